//! The copy-equipped edit model.
//!
//! Predicts an output sequence from an input `x` and a retrieved pair
//! `(x′, y′)`. Three bidirectional GRU encoders read `x`, `x′`, and `y′`;
//! the `y′` encoder sees each token's embedding concatenated with a
//! positional copy embedding so the decoder can address prototype tokens
//! by position. A GRU decoder with bilinear attention over all encoder
//! states emits logits over the base vocabulary plus one copy token per
//! prototype position. Training sums probability over a target's support
//! (its base word and every prototype position holding that word);
//! decoding folds copy mass back onto surface words. Passing no retrieved
//! pair degenerates to a plain attention seq2seq over `x` — the baseline
//! shares this code path.

use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Example, Vocabulary, BOS, EOS, UNK};
use crate::embednet::{BatchSampler, IterRecord, TrainLog};
use crate::nn::{
    bigru_run, clip_global_norm, gru_step, Adam, AdamConfig, Graph, GruParams, NodeId, ParamId,
    ParamSet, Tensor,
};
use crate::pipeline::stream_rng;
use crate::retriever::{RetrievalContext, Retriever, RetrieverError};

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("prototype length {len} exceeds the {cap} copy tokens; raise num_copy_tokens")]
    SourceTooLong { len: usize, cap: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
}

pub const DEFAULT_COPY_TOKENS: usize = 300;

/// The extended output alphabet: base vocabulary ids `[0, V)` followed by
/// copy ids `[V, V+N)`, one per prototype position.
#[derive(Debug, Clone, Copy)]
pub struct CopyVocab {
    base_size: usize,
    num_copy: usize,
}

impl CopyVocab {
    pub fn new(base_size: usize, num_copy: usize) -> Self {
        CopyVocab {
            base_size,
            num_copy,
        }
    }

    pub fn total(&self) -> usize {
        self.base_size + self.num_copy
    }

    pub fn copy_id(&self, pos: usize) -> usize {
        assert!(pos < self.num_copy);
        self.base_size + pos
    }

    pub fn copy_pos(&self, id: usize) -> Option<usize> {
        (id >= self.base_size && id < self.total()).then(|| id - self.base_size)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EditorConfig {
    pub vocab_size: usize,
    pub num_copy_tokens: usize,
    pub embed_dim: usize,
    pub copy_dim: usize,
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl EditorConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        EditorConfig {
            vocab_size,
            num_copy_tokens: DEFAULT_COPY_TOKENS,
            embed_dim: 64,
            copy_dim: 16,
            hidden_dim: 64,
            enc_layers: 1,
            dec_layers: 2,
        }
    }

    pub fn copy_vocab(&self) -> CopyVocab {
        CopyVocab::new(self.vocab_size, self.num_copy_tokens)
    }
}

struct Encoder {
    layers: Vec<(GruParams, GruParams)>,
    null_summary: ParamId,
}

struct Layout {
    token_embed: ParamId,
    copy_embed: ParamId,
    enc_x: Encoder,
    enc_xp: Encoder,
    enc_yp: Encoder,
    dec_init: Vec<(ParamId, ParamId)>,
    dec: Vec<GruParams>,
    att_w: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Edit-model parameters plus their registry.
pub struct Editor {
    cfg: EditorConfig,
    params: ParamSet,
    layout: Layout,
}

const INIT_RANGE: f64 = GruParams::INIT_RANGE;

fn weight<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: String,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> ParamId {
    params.add(name, Tensor::uniform(rows, cols, -INIT_RANGE, INIT_RANGE, rng))
}

fn build_encoder<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    input_dim: usize,
    hidden: usize,
    num_layers: usize,
    rng: &mut R,
) -> Encoder {
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let in_dim = if l == 0 { input_dim } else { 2 * hidden };
        layers.push((
            GruParams::init(params, &format!("enc.{name}.l{l}.fwd"), in_dim, hidden, rng),
            GruParams::init(params, &format!("enc.{name}.l{l}.bwd"), in_dim, hidden, rng),
        ));
    }
    let null_summary = weight(params, format!("enc.{name}.null"), 1, 2 * hidden, rng);
    Encoder {
        layers,
        null_summary,
    }
}

impl Editor {
    /// Fresh parameters: weights uniform in ±0.08, biases zero.
    pub fn build<R: Rng + ?Sized>(cfg: EditorConfig, rng: &mut R) -> Self {
        assert!(cfg.vocab_size >= Vocabulary::RESERVED);
        assert!(cfg.enc_layers >= 1 && cfg.dec_layers >= 1 && cfg.num_copy_tokens >= 1);
        let (v, e, c, h) = (cfg.vocab_size, cfg.embed_dim, cfg.copy_dim, cfg.hidden_dim);
        let mut params = ParamSet::new();
        let token_embed = weight(&mut params, "embed.token".into(), v, e, rng);
        let copy_embed = weight(&mut params, "embed.copy".into(), cfg.num_copy_tokens, c, rng);
        let enc_x = build_encoder(&mut params, "x", e, h, cfg.enc_layers, rng);
        let enc_xp = build_encoder(&mut params, "xp", e, h, cfg.enc_layers, rng);
        let enc_yp = build_encoder(&mut params, "yp", e + c, h, cfg.enc_layers, rng);
        let mut dec_init = Vec::with_capacity(cfg.dec_layers);
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            dec_init.push((
                weight(&mut params, format!("dec.init.l{l}.w"), 6 * h, h, rng),
                params.add(format!("dec.init.l{l}.b"), Tensor::zeros(1, h)),
            ));
            let input_dim = if l == 0 { e } else { h };
            dec.push(GruParams::init(
                &mut params,
                &format!("dec.l{l}"),
                input_dim,
                h,
                rng,
            ));
        }
        let att_w = weight(&mut params, "att.w".into(), h, 2 * h, rng);
        let out_w = weight(&mut params, "out.w".into(), 3 * h, v + cfg.num_copy_tokens, rng);
        let out_b = params.add("out.b", Tensor::zeros(1, v + cfg.num_copy_tokens));
        Editor {
            cfg,
            params,
            layout: Layout {
                token_embed,
                copy_embed,
                enc_x,
                enc_xp,
                enc_yp,
                dec_init,
                dec,
                att_w,
                out_w,
                out_b,
            },
        }
    }

    /// Rebuilds the layout over a parameter set restored from a checkpoint.
    pub fn from_params(cfg: EditorConfig, params: ParamSet) -> Self {
        let id = |name: String| {
            params
                .id(&name)
                .unwrap_or_else(|| panic!("checkpoint is missing parameter `{name}`"))
        };
        let gru = |prefix: String| GruParams {
            w_x: id(format!("{prefix}.w_x")),
            w_h: id(format!("{prefix}.w_h")),
            w_hc: id(format!("{prefix}.w_hc")),
            bias: id(format!("{prefix}.bias")),
            hidden: cfg.hidden_dim,
        };
        let encoder = |name: &str| Encoder {
            layers: (0..cfg.enc_layers)
                .map(|l| {
                    (
                        gru(format!("enc.{name}.l{l}.fwd")),
                        gru(format!("enc.{name}.l{l}.bwd")),
                    )
                })
                .collect(),
            null_summary: id(format!("enc.{name}.null")),
        };
        let layout = Layout {
            token_embed: id("embed.token".into()),
            copy_embed: id("embed.copy".into()),
            enc_x: encoder("x"),
            enc_xp: encoder("xp"),
            enc_yp: encoder("yp"),
            dec_init: (0..cfg.dec_layers)
                .map(|l| {
                    (
                        id(format!("dec.init.l{l}.w")),
                        id(format!("dec.init.l{l}.b")),
                    )
                })
                .collect(),
            dec: (0..cfg.dec_layers).map(|l| gru(format!("dec.l{l}"))).collect(),
            out_w: id("out.w".into()),
            out_b: id("out.b".into()),
            att_w: id("att.w".into()),
        };
        Editor { cfg, params, layout }
    }

    pub fn config(&self) -> &EditorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Per-token encoder inputs for one sequence; `y′` additionally gets
    /// its position's copy embedding so position `t` is addressable.
    fn encode_seq(
        &self,
        g: &mut Graph,
        enc: &Encoder,
        ids: &[usize],
        with_copy: bool,
    ) -> (Vec<NodeId>, NodeId) {
        if ids.is_empty() {
            return (Vec::new(), g.param(enc.null_summary));
        }
        let embedded = g.embed_rows(self.layout.token_embed, ids);
        let copies = with_copy
            .then(|| g.embed_rows(self.layout.copy_embed, &(0..ids.len()).collect::<Vec<_>>()));
        let inputs: Vec<NodeId> = (0..ids.len())
            .map(|i| {
                let base = g.row_slice(embedded, i);
                match copies {
                    Some(table) => {
                        let pos = g.row_slice(table, i);
                        g.concat_cols(&[base, pos])
                    }
                    None => base,
                }
            })
            .collect();
        bigru_run(g, &enc.layers, &inputs)
    }

    /// Builds the full teacher-forced graph for one tuple and returns the
    /// summed negative log-likelihood node.
    fn forward_loss(&self, g: &mut Graph, item: &EditItem) -> NodeId {
        let h = self.cfg.hidden_dim;
        let (states_x, sum_x) = self.encode_seq(g, &self.layout.enc_x, &item.x_ids, false);
        let (states_xp, sum_xp) = self.encode_seq(g, &self.layout.enc_xp, &item.xp_ids, false);
        let (states_yp, sum_yp) = self.encode_seq(g, &self.layout.enc_yp, &item.yp_ids, true);
        let mut all_states: Vec<NodeId> = states_x;
        all_states.extend(states_xp);
        all_states.extend(states_yp);
        if all_states.is_empty() {
            all_states.push(g.constant(Tensor::zeros(1, 2 * h)));
        }
        let states = g.concat_rows(&all_states);
        let summaries = g.concat_cols(&[sum_x, sum_xp, sum_yp]);
        let mut hidden = Vec::with_capacity(self.cfg.dec_layers);
        for (w, b) in &self.layout.dec_init {
            let (wn, bn) = (g.param(*w), g.param(*b));
            let proj = g.matmul(summaries, wn);
            let raw = g.add(proj, bn);
            hidden.push(g.tanh(raw));
        }
        let att_w = g.param(self.layout.att_w);
        let (out_w, out_b) = (g.param(self.layout.out_w), g.param(self.layout.out_b));
        let allowed = self.cfg.vocab_size + item.yp_ids.len();
        let mut losses = Vec::with_capacity(item.supports.len());
        for (t, support) in item.supports.iter().enumerate() {
            let emb = g.embed_rows(self.layout.token_embed, &[item.prev_ids[t]]);
            let mut x = emb;
            for (l, cell) in self.layout.dec.iter().enumerate() {
                hidden[l] = gru_step(g, cell, x, hidden[l]);
                x = hidden[l];
            }
            let query = g.matmul(x, att_w);
            let scores = g.matmul_nt(query, states);
            let alpha = g.softmax_rows(scores);
            let context = g.matmul(alpha, states);
            let feat = g.concat_cols(&[x, context]);
            let proj = g.matmul(feat, out_w);
            let logits = g.add(proj, out_b);
            let masked = g.mask_cols_from(logits, allowed);
            losses.push(g.neg_log_support(masked, support.clone()));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        total
    }

    /// Mean loss over a batch plus parameter gradients. Deterministic; the
    /// entry point for finite-difference checks.
    pub fn batch_loss(&self, batch: &[&EditItem]) -> Result<(f64, Vec<Tensor>), EditorError> {
        if batch.is_empty() {
            return Err(EditorError::EmptyBatch);
        }
        let mut grads = self.params.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for item in batch {
            let mut g = Graph::new(&self.params);
            let nll = self.forward_loss(&mut g, item);
            let scaled = g.scale(nll, scale);
            total += g.scalar(scaled);
            g.backward(scaled, &mut grads);
        }
        Ok((total, grads))
    }

    /// Teacher-forced log-probability of `y` given input `x` and an
    /// optional retrieved pair; summing each step over the target's
    /// base-or-copy support. Always ≤ 0.
    pub fn edit_logprob(
        &self,
        vocab: &Vocabulary,
        x: &Example,
        retrieved: Option<&Example>,
        y: &[String],
    ) -> Result<f64, EditorError> {
        let item = make_item(vocab, &self.cfg, x, retrieved, y)?;
        let mut g = Graph::new(&self.params);
        let nll = self.forward_loss(&mut g, &item);
        Ok(-g.scalar(nll))
    }
}

/// One pre-encoded training tuple.
#[derive(Debug, Clone)]
pub struct EditItem {
    pub x_ids: Vec<usize>,
    pub xp_ids: Vec<usize>,
    pub yp_ids: Vec<usize>,
    pub yp_tokens: Vec<String>,
    /// Decoder inputs: BOS then the target's base ids.
    pub prev_ids: Vec<usize>,
    /// Per-step target supports over base+copy ids.
    pub supports: Vec<Vec<usize>>,
}

/// Input-field tokens joined with EOS separators between fields.
pub fn join_fields(vocab: &Vocabulary, ex: &Example) -> Vec<usize> {
    let mut ids = Vec::new();
    for (fi, (_, toks)) in ex.input_fields.iter().enumerate() {
        if fi > 0 {
            ids.push(EOS);
        }
        ids.extend(vocab.encode(toks));
    }
    ids
}

/// The ids a target token may be produced as: its base id plus a copy id
/// for every prototype position holding the same word. Out-of-vocabulary
/// targets train on copy ids alone when copyable, else on UNK.
pub fn build_copy_target(
    vocab: &Vocabulary,
    copy: &CopyVocab,
    y_t: &str,
    source: &[String],
) -> Vec<usize> {
    let base = vocab.id(y_t);
    let copies: Vec<usize> = source
        .iter()
        .enumerate()
        .filter(|(_, w)| w.as_str() == y_t)
        .map(|(p, _)| copy.copy_id(p))
        .collect();
    let oov = base == UNK && !vocab.contains(y_t);
    if oov && !copies.is_empty() {
        copies
    } else {
        let mut support = vec![base];
        support.extend(copies);
        support
    }
}

/// Assembles the tuple `(x, x′, y′) → y` for training or scoring.
pub fn make_item(
    vocab: &Vocabulary,
    cfg: &EditorConfig,
    x: &Example,
    retrieved: Option<&Example>,
    y: &[String],
) -> Result<EditItem, EditorError> {
    let copy = cfg.copy_vocab();
    let (xp_ids, yp_tokens) = match retrieved {
        Some(r) => (join_fields(vocab, r), r.output.clone()),
        None => (Vec::new(), Vec::new()),
    };
    if yp_tokens.len() > cfg.num_copy_tokens {
        return Err(EditorError::SourceTooLong {
            len: yp_tokens.len(),
            cap: cfg.num_copy_tokens,
        });
    }
    let mut prev_ids = Vec::with_capacity(y.len() + 1);
    prev_ids.push(BOS);
    prev_ids.extend(vocab.encode(y));
    let mut supports: Vec<Vec<usize>> = y
        .iter()
        .map(|tok| build_copy_target(vocab, &copy, tok, &yp_tokens))
        .collect();
    supports.push(build_copy_target(vocab, &copy, "<eos>", &yp_tokens));
    Ok(EditItem {
        x_ids: join_fields(vocab, x),
        xp_ids,
        yp_ids: vocab.encode(&yp_tokens),
        yp_tokens,
        prev_ids,
        supports,
    })
}

// ---------------------------------------------------------------------
// Incremental decoding (forward-only, no tape).

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0; w.cols()];
    for (i, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn gru_step_eval(ps: &ParamSet, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hd = p.hidden;
    let mut xp = vecmat(x, ps.get(p.w_x));
    for (v, b) in xp.iter_mut().zip(ps.get(p.bias).data()) {
        *v += b;
    }
    let hp = vecmat(h, ps.get(p.w_h));
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let z: Vec<f64> = (0..hd).map(|i| sigmoid(xp[i] + hp[i])).collect();
    let r: Vec<f64> = (0..hd).map(|i| sigmoid(xp[hd + i] + hp[hd + i])).collect();
    let rh: Vec<f64> = (0..hd).map(|i| r[i] * h[i]).collect();
    let rhc = vecmat(&rh, ps.get(p.w_hc));
    (0..hd)
        .map(|i| {
            let c = (xp[2 * hd + i] + rhc[i]).tanh();
            c + z[i] * (h[i] - c)
        })
        .collect()
}

fn bigru_eval(
    ps: &ParamSet,
    layers: &[(GruParams, GruParams)],
    inputs: Vec<Vec<f64>>,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut seq = inputs;
    let mut summary = Vec::new();
    for (fwd, bwd) in layers {
        let hd = fwd.hidden;
        let mut fwd_states = Vec::with_capacity(seq.len());
        let mut h = vec![0.0; hd];
        for x in &seq {
            h = gru_step_eval(ps, fwd, x, &h);
            fwd_states.push(h.clone());
        }
        let mut bwd_states = vec![Vec::new(); seq.len()];
        let mut hb = vec![0.0; hd];
        for (i, x) in seq.iter().enumerate().rev() {
            hb = gru_step_eval(ps, bwd, x, &hb);
            bwd_states[i] = hb.clone();
        }
        summary = [fwd_states.last().unwrap().as_slice(), &bwd_states[0]].concat();
        seq = fwd_states
            .into_iter()
            .zip(&bwd_states)
            .map(|(f, b)| [f.as_slice(), b.as_slice()].concat())
            .collect();
    }
    (seq, summary)
}

/// Encoder pass cached for incremental decoding of one tuple.
pub struct DecodeSession {
    states: Vec<Vec<f64>>,
    summaries: Vec<f64>,
    yp_tokens: Vec<String>,
    allowed: usize,
    /// Surface-canonical id per prototype position: the base id when the
    /// word is in-vocabulary, else the copy id of its first occurrence.
    canon: Vec<usize>,
}

impl DecodeSession {
    /// Number of emission ids live at each step (base + prototype copies).
    pub fn allowed(&self) -> usize {
        self.allowed
    }
}

/// Decoder recurrent state, advanced one token at a time.
#[derive(Debug, Clone)]
pub struct DecodeState {
    hidden: Vec<Vec<f64>>,
}

/// One ranked beam-search output.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Emitted ids; copy ids are kept unresolved. Ends with EOS iff finished.
    pub tokens: Vec<usize>,
    /// Resolved surface words (copy ids replaced by their prototype word),
    /// excluding the final EOS.
    pub surface: Vec<String>,
    pub logp: f64,
    pub finished: bool,
}

impl Editor {
    fn encode_seq_eval(&self, enc: &Encoder, ids: &[usize], with_copy: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
        if ids.is_empty() {
            return (Vec::new(), self.params.get(enc.null_summary).data().to_vec());
        }
        let embed = self.params.get(self.layout.token_embed);
        let copy = self.params.get(self.layout.copy_embed);
        let inputs: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                if with_copy {
                    [embed.row(id), copy.row(i)].concat()
                } else {
                    embed.row(id).to_vec()
                }
            })
            .collect();
        bigru_eval(&self.params, &enc.layers, inputs)
    }

    /// Runs all three encoders once; the result conditions every
    /// subsequent decode step for this tuple.
    pub fn start_decode(
        &self,
        vocab: &Vocabulary,
        x: &Example,
        retrieved: Option<&Example>,
    ) -> Result<DecodeSession, EditorError> {
        let item = make_item(vocab, &self.cfg, x, retrieved, &[])?;
        let (mut states, sum_x) = self.encode_seq_eval(&self.layout.enc_x, &item.x_ids, false);
        let (s_xp, sum_xp) = self.encode_seq_eval(&self.layout.enc_xp, &item.xp_ids, false);
        let (s_yp, sum_yp) = self.encode_seq_eval(&self.layout.enc_yp, &item.yp_ids, true);
        states.extend(s_xp);
        states.extend(s_yp);
        if states.is_empty() {
            states.push(vec![0.0; 2 * self.cfg.hidden_dim]);
        }
        let canon: Vec<usize> = item
            .yp_tokens
            .iter()
            .map(|w| {
                if vocab.contains(w) {
                    vocab.id(w)
                } else {
                    let first = item.yp_tokens.iter().position(|o| o == w).unwrap();
                    self.cfg.vocab_size + first
                }
            })
            .collect();
        Ok(DecodeSession {
            states,
            summaries: [sum_x, sum_xp, sum_yp].concat(),
            allowed: self.cfg.vocab_size + item.yp_ids.len(),
            yp_tokens: item.yp_tokens,
            canon,
        })
    }

    /// Fresh decoder state for a session: each layer starts from a learned
    /// projection of the three encoder summaries.
    pub fn init_state(&self, sess: &DecodeSession) -> DecodeState {
        let hidden = self
            .layout
            .dec_init
            .iter()
            .map(|(w, b)| {
                let mut h = vecmat(&sess.summaries, self.params.get(*w));
                for (v, bias) in h.iter_mut().zip(self.params.get(*b).data()) {
                    *v = (*v + bias).tanh();
                }
                h
            })
            .collect();
        DecodeState { hidden }
    }

    /// Consumes `prev` (a base-vocabulary id) and returns the next-token
    /// probability distribution over the session's live ids.
    pub fn step(
        &self,
        sess: &DecodeSession,
        state: &mut DecodeState,
        prev: usize,
    ) -> Result<Vec<f64>, EditorError> {
        if prev >= self.cfg.vocab_size {
            return Err(EditorError::TokenOutOfRange {
                id: prev,
                vocab: self.cfg.vocab_size,
            });
        }
        let mut x = self.params.get(self.layout.token_embed).row(prev).to_vec();
        for (l, cell) in self.layout.dec.iter().enumerate() {
            state.hidden[l] = gru_step_eval(&self.params, cell, &x, &state.hidden[l]);
            x = state.hidden[l].clone();
        }
        let query = vecmat(&x, self.params.get(self.layout.att_w));
        let scores: Vec<f64> = sess
            .states
            .iter()
            .map(|s| s.iter().zip(&query).map(|(a, b)| a * b).sum())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let wsum: f64 = weights.iter().sum();
        let mut context = vec![0.0; 2 * self.cfg.hidden_dim];
        for (w, s) in weights.iter().zip(&sess.states) {
            for (c, v) in context.iter_mut().zip(s) {
                *c += (w / wsum) * v;
            }
        }
        let feat = [x.as_slice(), &context].concat();
        let mut logits = vecmat(&feat, self.params.get(self.layout.out_w));
        for (v, b) in logits.iter_mut().zip(self.params.get(self.layout.out_b).data()) {
            *v += b;
        }
        logits.truncate(sess.allowed);
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - lmax).exp()).collect();
        let psum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= psum);
        Ok(probs)
    }

    /// Moves each copy id's probability onto its surface-canonical id:
    /// in-vocabulary prototype words absorb their copy mass; repeated
    /// out-of-vocabulary words collapse onto their first position. Total
    /// mass is conserved.
    pub fn fold_copy_mass(&self, sess: &DecodeSession, probs: &mut [f64]) {
        for p in 0..sess.yp_tokens.len() {
            let id = self.cfg.vocab_size + p;
            let target = sess.canon[p];
            if target != id {
                probs[target] += probs[id];
                probs[id] = 0.0;
            }
        }
    }

    /// The surface word of an emission id.
    pub fn surface_token(&self, vocab: &Vocabulary, sess: &DecodeSession, id: usize) -> String {
        match self.cfg.copy_vocab().copy_pos(id) {
            Some(p) => sess.yp_tokens[p].clone(),
            None => vocab.token(id).to_string(),
        }
    }

    /// The base id a just-emitted token is conditioned as on the next step:
    /// copy ids are replaced by their prototype word's id.
    fn cond_id(&self, vocab: &Vocabulary, sess: &DecodeSession, token: usize) -> usize {
        match self.cfg.copy_vocab().copy_pos(token) {
            Some(p) => vocab.id(&sess.yp_tokens[p]),
            None => token,
        }
    }

    /// Length-capped beam search, ranked by cumulative log-probability.
    /// Copy mass folds onto surface words before each expansion, so every
    /// hypothesis token is surface-canonical.
    pub fn beam_search(
        &self,
        vocab: &Vocabulary,
        x: &Example,
        retrieved: Option<&Example>,
        beam_width: usize,
        max_len: usize,
    ) -> Result<Vec<BeamHypothesis>, EditorError> {
        assert!(beam_width >= 1);
        let sess = self.start_decode(vocab, x, retrieved)?;
        struct Hyp {
            tokens: Vec<usize>,
            logp: f64,
            finished: bool,
            state: DecodeState,
        }
        let mut beam = vec![Hyp {
            tokens: Vec::new(),
            logp: 0.0,
            finished: false,
            state: self.init_state(&sess),
        }];
        for _ in 0..max_len {
            if beam.iter().all(|h| h.finished) {
                break;
            }
            let mut next: Vec<Hyp> = Vec::new();
            for hyp in beam {
                if hyp.finished {
                    next.push(hyp);
                    continue;
                }
                let prev = match hyp.tokens.last() {
                    Some(&t) => self.cond_id(vocab, &sess, t),
                    None => BOS,
                };
                let mut state = hyp.state.clone();
                let mut probs = self.step(&sess, &mut state, prev)?;
                self.fold_copy_mass(&sess, &mut probs);
                let mut ranked: Vec<(usize, f64)> = probs
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(i, &p)| (i, p))
                    .collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                for (token, p) in ranked.into_iter().take(beam_width) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(token);
                    next.push(Hyp {
                        logp: hyp.logp + p.ln(),
                        finished: token == EOS,
                        tokens,
                        state: state.clone(),
                    });
                }
            }
            next.sort_by(|a, b| {
                b.logp
                    .total_cmp(&a.logp)
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            next.truncate(beam_width);
            beam = next;
        }
        Ok(beam
            .into_iter()
            .map(|h| BeamHypothesis {
                surface: h
                    .tokens
                    .iter()
                    .filter(|&&t| t != EOS)
                    .map(|&t| self.surface_token(vocab, &sess, t))
                    .collect(),
                tokens: h.tokens,
                logp: h.logp,
                finished: h.finished,
            })
            .collect())
    }

    /// Greedy decode: the beam-width-1 special case.
    pub fn greedy_decode(
        &self,
        vocab: &Vocabulary,
        x: &Example,
        retrieved: Option<&Example>,
        max_len: usize,
    ) -> Result<BeamHypothesis, EditorError> {
        let sess = self.start_decode(vocab, x, retrieved)?;
        let mut state = self.init_state(&sess);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut logp = 0.0;
        let mut finished = false;
        for _ in 0..max_len {
            let mut probs = self.step(&sess, &mut state, prev)?;
            self.fold_copy_mass(&sess, &mut probs);
            let (best, p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
                .unwrap();
            tokens.push(best);
            logp += p.ln();
            if best == EOS {
                finished = true;
                break;
            }
            prev = self.cond_id(vocab, &sess, best);
        }
        Ok(BeamHypothesis {
            surface: tokens
                .iter()
                .filter(|&&t| t != EOS)
                .map(|&t| self.surface_token(vocab, &sess, t))
                .collect(),
            tokens,
            logp,
            finished,
        })
    }

    /// Folds copy mass, drops folded-away slots, and returns the k most
    /// probable surface words. Ties break on the lower emission id.
    pub fn top_surface(
        &self,
        vocab: &Vocabulary,
        sess: &DecodeSession,
        mut probs: Vec<f64>,
        k: usize,
    ) -> Vec<String> {
        self.fold_copy_mass(sess, &mut probs);
        let mut ranked: Vec<usize> = (0..probs.len())
            .filter(|&i| {
                // Only surface-canonical ids: skip folded-away copy slots.
                self.cfg
                    .copy_vocab()
                    .copy_pos(i)
                    .map(|p| sess.canon[p] == i)
                    .unwrap_or(true)
            })
            .collect();
        ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then_with(|| a.cmp(&b)));
        ranked
            .into_iter()
            .take(k)
            .map(|i| self.surface_token(vocab, sess, i))
            .collect()
    }

    /// Top-k surface words of the next-token distribution after teacher
    /// forcing the gold prefix.
    pub fn next_token_candidates(
        &self,
        vocab: &Vocabulary,
        x: &Example,
        retrieved: Option<&Example>,
        gold_prefix: &[String],
        k: usize,
    ) -> Result<Vec<String>, EditorError> {
        let sess = self.start_decode(vocab, x, retrieved)?;
        let mut state = self.init_state(&sess);
        let mut prev = BOS;
        for tok in gold_prefix {
            self.step(&sess, &mut state, prev)?;
            prev = vocab.id(tok);
        }
        let probs = self.step(&sess, &mut state, prev)?;
        Ok(self.top_surface(vocab, &sess, probs, k))
    }
}

// ---------------------------------------------------------------------
// Training.

/// Training-loop hyperparameters.
#[derive(Debug, Clone)]
pub struct EditTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Seed for the identity-augmentation coin flips, independent of the
    /// init/batch seed.
    pub augment_seed: u64,
    /// Chance per example per epoch of substituting the identity tuple
    /// (x′, x′, y′) → y′ for the real one.
    pub identity_prob: f64,
}

impl Default for EditTrainConfig {
    fn default() -> Self {
        EditTrainConfig {
            iterations: 1000,
            batch_size: 16,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            augment_seed: 0,
            identity_prob: 0.1,
        }
    }
}

/// Trains the editor on precomputed retrieved pairs (`pairs[i]` is the
/// prototype for `train[i]`; `None` trains the no-retrieval baseline).
/// Deterministic given the seed; initialization, batch order, and identity
/// augmentation each draw from their own stream.
pub fn train_editor_with_pairs(
    train: &[Example],
    vocab: &Vocabulary,
    pairs: &[Option<Example>],
    net_cfg: EditorConfig,
    cfg: &EditTrainConfig,
) -> Result<(Editor, TrainLog), EditorError> {
    if train.is_empty() {
        return Err(EditorError::EmptyTrainSet);
    }
    assert_eq!(train.len(), pairs.len());
    let mut init_rng = stream_rng(cfg.seed, "editor.init");
    let mut editor = Editor::build(net_cfg, &mut init_rng);
    let base_items: Vec<EditItem> = train
        .iter()
        .zip(pairs)
        .map(|(ex, pair)| make_item(vocab, &editor.cfg, ex, pair.as_ref(), &ex.output))
        .collect::<Result<_, _>>()?;
    let identity_items: Vec<Option<EditItem>> = pairs
        .iter()
        .map(|pair| {
            pair.as_ref()
                .map(|r| make_item(vocab, &editor.cfg, r, Some(r), &r.output))
                .transpose()
        })
        .collect::<Result<_, _>>()?;
    let mut sampler = BatchSampler::new(train.len(), stream_rng(cfg.seed, "editor.data"));
    let mut identity_rng = stream_rng(cfg.augment_seed, "editor.identity");
    let mut use_identity = vec![false; train.len()];
    let mut opt = Adam::new(&editor.params, cfg.adam);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for it in 0..cfg.iterations {
        if sampler.at_epoch_boundary() {
            for flag in use_identity.iter_mut() {
                *flag = identity_rng.random::<f64>() < cfg.identity_prob;
            }
        }
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<&EditItem> = idx
            .iter()
            .map(|&i| match (&identity_items[i], use_identity[i]) {
                (Some(item), true) => item,
                _ => &base_items[i],
            })
            .collect();
        let (loss, mut grads) = editor.batch_loss(&batch)?;
        if !loss.is_finite() {
            return Err(EditorError::NonFiniteLoss { iteration: it });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut editor.params, &grads);
        log.0.push(IterRecord {
            iteration: it,
            loss,
            wallclock_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((editor, log))
}

/// Looks up each training example's prototype with the retriever,
/// excluding the example itself, then trains.
pub fn train_editor(
    train: &[Example],
    vocab: &Vocabulary,
    retriever: &Retriever,
    net_cfg: EditorConfig,
    cfg: &EditTrainConfig,
) -> Result<(Editor, TrainLog), EditorError> {
    let ctx = RetrievalContext::new(train);
    let pairs = train
        .iter()
        .map(|ex| {
            retriever
                .retrieve(&ctx, vocab, ex, Some(&ex.id))
                .map(|(r, _)| Some(r.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    train_editor_with_pairs(train, vocab, &pairs, net_cfg, cfg)
}

/// Trains the no-retrieval baseline: the same architecture with empty
/// prototype inputs throughout.
pub fn train_seq2seq(
    train: &[Example],
    vocab: &Vocabulary,
    net_cfg: EditorConfig,
    cfg: &EditTrainConfig,
) -> Result<(Editor, TrainLog), EditorError> {
    let pairs = vec![None; train.len()];
    let mut cfg = cfg.clone();
    cfg.identity_prob = 0.0;
    train_editor_with_pairs(train, vocab, &pairs, net_cfg, &cfg)
}
