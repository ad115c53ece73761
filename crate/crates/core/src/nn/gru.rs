//! Gated recurrent cell on the tape.

use rand::Rng;

use crate::nn::{Graph, NodeId, ParamId, ParamSet, Tensor};

/// Parameters of one GRU cell. The input projection fuses the update,
/// reset, and candidate gates; the hidden projection fuses update and
/// reset, with the candidate's hidden transform kept separate so the
/// reset gate can be applied first.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub w_hc: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub const INIT_RANGE: f64 = 0.08;

    /// Registers weights uniform in ±[`Self::INIT_RANGE`] and zero biases.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let r = Self::INIT_RANGE;
        GruParams {
            w_x: params.add(
                format!("{prefix}.w_x"),
                Tensor::uniform(input_dim, 3 * hidden, -r, r, rng),
            ),
            w_h: params.add(
                format!("{prefix}.w_h"),
                Tensor::uniform(hidden, 2 * hidden, -r, r, rng),
            ),
            w_hc: params.add(
                format!("{prefix}.w_hc"),
                Tensor::uniform(hidden, hidden, -r, r, rng),
            ),
            bias: params.add(format!("{prefix}.bias"), Tensor::zeros(1, 3 * hidden)),
            hidden,
        }
    }
}

/// One step: `h' = c + z ⊙ (h - c)` with
/// `z = σ(x W_xz + h W_hz + b_z)`, `r = σ(x W_xr + h W_hr + b_r)`,
/// `c = tanh(x W_xc + (r ⊙ h) W_hc + b_c)`.
pub fn gru_step(g: &mut Graph, p: &GruParams, x: NodeId, h: NodeId) -> NodeId {
    let hd = p.hidden;
    let (w_x, w_h, w_hc, bias) = (g.param(p.w_x), g.param(p.w_h), g.param(p.w_hc), g.param(p.bias));
    let xp0 = g.matmul(x, w_x);
    let xp = g.add(xp0, bias);
    let hp = g.matmul(h, w_h);

    let xz = g.col_slice(xp, 0, hd);
    let hz = g.col_slice(hp, 0, hd);
    let zsum = g.add(xz, hz);
    let z = g.sigmoid(zsum);

    let xr = g.col_slice(xp, hd, hd);
    let hr = g.col_slice(hp, hd, hd);
    let rsum = g.add(xr, hr);
    let r = g.sigmoid(rsum);

    let rh = g.mul(r, h);
    let rhc = g.matmul(rh, w_hc);
    let xc = g.col_slice(xp, 2 * hd, hd);
    let csum = g.add(xc, rhc);
    let c = g.tanh(csum);

    let diff = g.sub(h, c);
    let gated = g.mul(z, diff);
    g.add(c, gated)
}

/// Runs a stack of bidirectional GRU layers over a token sequence.
///
/// `layers[l] = (forward cell, backward cell)`. Layer 0 consumes the given
/// per-token input nodes; deeper layers consume the concatenated 2H states
/// of the layer below. Returns the top layer's per-token states (each 1×2H,
/// in sequence order) and the summary `concat(last forward, last backward)`.
pub fn bigru_run(
    g: &mut Graph,
    layers: &[(GruParams, GruParams)],
    inputs: &[NodeId],
) -> (Vec<NodeId>, NodeId) {
    assert!(!layers.is_empty() && !inputs.is_empty());
    let mut seq: Vec<NodeId> = inputs.to_vec();
    let mut summary = None;
    for (fwd, bwd) in layers {
        let hidden = fwd.hidden;
        let mut fwd_states = Vec::with_capacity(seq.len());
        let mut h = g.constant(Tensor::zeros(1, hidden));
        for &x in &seq {
            h = gru_step(g, fwd, x, h);
            fwd_states.push(h);
        }
        let mut bwd_states = vec![NodeId::default(); seq.len()];
        let mut hb = g.constant(Tensor::zeros(1, hidden));
        for (i, &x) in seq.iter().enumerate().rev() {
            hb = gru_step(g, bwd, x, hb);
            bwd_states[i] = hb;
        }
        seq = fwd_states
            .iter()
            .zip(&bwd_states)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect();
        summary = Some(g.concat_cols(&[*fwd_states.last().unwrap(), bwd_states[0]]));
    }
    (seq, summary.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::testutil::assert_grads_match_fd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn gru_chain_grads_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut params = ParamSet::new();
        let cell = GruParams::init(&mut params, "gru", 3, 4, &mut rng);
        // Nonzero bias so its gradient path is exercised.
        for b in params.get_mut(cell.bias).data_mut() {
            *b = 0.05;
        }
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(1, 3, -0.9, 0.9, &mut rng))
            .collect();
        assert_grads_match_fd(
            &mut params,
            |p| {
                let mut g = Graph::new(p);
                let mut h = g.constant(Tensor::zeros(1, 4));
                for x in &xs {
                    let xn = g.constant(x.clone());
                    h = gru_step(&mut g, &cell, xn, h);
                }
                let w = g.constant(Tensor::row_vector(vec![0.4, -0.2, 0.9, 0.3]));
                let prod = g.mul(h, w);
                let ones = g.constant(Tensor::from_vec(4, 1, vec![1.0; 4]));
                let loss = g.matmul(prod, ones);
                let mut grads = p.zero_grads();
                g.backward(loss, &mut grads);
                (g.scalar(loss), grads)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn stacked_bigru_grads_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let l0 = (
            GruParams::init(&mut params, "l0.fwd", 3, 4, &mut rng),
            GruParams::init(&mut params, "l0.bwd", 3, 4, &mut rng),
        );
        let l1 = (
            GruParams::init(&mut params, "l1.fwd", 8, 4, &mut rng),
            GruParams::init(&mut params, "l1.bwd", 8, 4, &mut rng),
        );
        let layers = vec![l0, l1];
        let xs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(1, 3, -0.9, 0.9, &mut rng))
            .collect();
        assert_grads_match_fd(
            &mut params,
            |p| {
                let mut g = Graph::new(p);
                let inputs: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
                let (states, summary) = bigru_run(&mut g, &layers, &inputs);
                let picked = g.concat_cols(&[states[1], summary]);
                let w: Vec<f64> = (0..16).map(|i| 0.2 + 0.05 * i as f64).collect();
                let wn = g.constant(Tensor::row_vector(w));
                let prod = g.mul(picked, wn);
                let ones = g.constant(Tensor::from_vec(16, 1, vec![1.0; 16]));
                let loss = g.matmul(prod, ones);
                let mut grads = p.zero_grads();
                g.backward(loss, &mut grads);
                (g.scalar(loss), grads)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn zero_update_gate_keeps_candidate() {
        // With all weights zero, z = 0.5, c = 0, so h' = 0.5 h.
        let mut params = ParamSet::new();
        let cell = GruParams {
            w_x: params.add("w_x", Tensor::zeros(2, 12)),
            w_h: params.add("w_h", Tensor::zeros(4, 8)),
            w_hc: params.add("w_hc", Tensor::zeros(4, 4)),
            bias: params.add("bias", Tensor::zeros(1, 12)),
            hidden: 4,
        };
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::row_vector(vec![1.0, -1.0]));
        let h = g.constant(Tensor::row_vector(vec![0.8, -0.4, 0.2, 0.6]));
        let out = gru_step(&mut g, &cell, x, h);
        for (got, want) in g.value(out).data().iter().zip([0.4, -0.2, 0.1, 0.3]) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
