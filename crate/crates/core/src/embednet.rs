//! The noisy encoder-decoder that learns the retrieval embedding.
//!
//! The encoder maps an input (one or more named token-sequence fields) to a
//! unit vector via per-field bidirectional GRU encoders, a linear combiner,
//! and Euclidean normalization. Training perturbs the encoding with vMF
//! noise at fixed concentration and asks a GRU decoder conditioned on the
//! noisy vector to reconstruct a target sequence: the example's output for
//! the task-aware retriever, or the concatenated input fields for the
//! input-only variant. The KL term of the underlying variational bound is
//! constant in the parameters at fixed concentration, so the loss is
//! reconstruction only.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::corpus::{Example, Vocabulary, BOS, EOS, PAD};
use crate::nn::{
    bigru_run, clip_global_norm, gru_step, Adam, AdamConfig, Graph, GruParams, NodeId, ParamId,
    ParamSet, Tensor,
};
use crate::pipeline::stream_rng;
use crate::vmf::{self, UnitVector};

#[derive(Debug, Error)]
pub enum EmbednetError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("expected {expected} input fields, got {got}")]
    FieldCountMismatch { expected: usize, got: usize },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Vmf(#[from] vmf::VmfError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNetConfig {
    pub vocab_size: usize,
    pub field_names: Vec<String>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub kappa: f64,
}

impl EmbedNetConfig {
    pub fn desk_scale(vocab_size: usize, field_names: Vec<String>) -> Self {
        EmbedNetConfig {
            vocab_size,
            field_names,
            embed_dim: 64,
            hidden_dim: 64,
            latent_dim: 64,
            enc_layers: 1,
            dec_layers: 1,
            kappa: 500.0,
        }
    }
}

struct FieldEncoder {
    layers: Vec<(GruParams, GruParams)>,
    null_summary: ParamId,
}

struct Layout {
    token_embed: ParamId,
    fields: Vec<FieldEncoder>,
    comb_w: ParamId,
    comb_b: ParamId,
    dec_init: Vec<(ParamId, ParamId)>,
    dec: Vec<GruParams>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Encoder-decoder parameters plus their registry.
pub struct EmbedNet {
    cfg: EmbedNetConfig,
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

impl EmbedNet {
    /// Fresh parameters: weights uniform in ±0.08, biases zero.
    pub fn build<R: Rng + ?Sized>(cfg: EmbedNetConfig, rng: &mut R) -> Self {
        assert!(cfg.vocab_size >= Vocabulary::RESERVED);
        assert!(!cfg.field_names.is_empty());
        assert!(cfg.enc_layers >= 1 && cfg.dec_layers >= 1);
        let (v, e, h, d) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim);
        let mut params = ParamSet::new();
        let token_embed = weight(&mut params, "embed.token".into(), v, e, rng);
        let mut fields = Vec::with_capacity(cfg.field_names.len());
        for fi in 0..cfg.field_names.len() {
            let mut layers = Vec::with_capacity(cfg.enc_layers);
            for l in 0..cfg.enc_layers {
                let input_dim = if l == 0 { e } else { 2 * h };
                layers.push((
                    GruParams::init(&mut params, &format!("enc.f{fi}.l{l}.fwd"), input_dim, h, rng),
                    GruParams::init(&mut params, &format!("enc.f{fi}.l{l}.bwd"), input_dim, h, rng),
                ));
            }
            let null_summary = weight(&mut params, format!("enc.f{fi}.null"), 1, 2 * h, rng);
            fields.push(FieldEncoder {
                layers,
                null_summary,
            });
        }
        let comb_w = weight(
            &mut params,
            "comb.w".into(),
            2 * h * cfg.field_names.len(),
            d,
            rng,
        );
        let comb_b = params.add("comb.b", Tensor::zeros(1, d));
        let mut dec_init = Vec::with_capacity(cfg.dec_layers);
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            dec_init.push((
                weight(&mut params, format!("dec.init.l{l}.w"), d, h, rng),
                params.add(format!("dec.init.l{l}.b"), Tensor::zeros(1, h)),
            ));
            let input_dim = if l == 0 { e + d } else { h };
            dec.push(GruParams::init(
                &mut params,
                &format!("dec.l{l}"),
                input_dim,
                h,
                rng,
            ));
        }
        let out_w = weight(&mut params, "out.w".into(), h, v, rng);
        let out_b = params.add("out.b", Tensor::zeros(1, v));
        EmbedNet {
            cfg,
            params,
            layout: Layout {
                token_embed,
                fields,
                comb_w,
                comb_b,
                dec_init,
                dec,
                out_w,
                out_b,
            },
        }
    }

    /// Rebuilds the layout over a parameter set restored from a checkpoint.
    pub fn from_params(cfg: EmbedNetConfig, params: ParamSet) -> Self {
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
        let fields = (0..cfg.field_names.len())
            .map(|fi| FieldEncoder {
                layers: (0..cfg.enc_layers)
                    .map(|l| {
                        (
                            gru(format!("enc.f{fi}.l{l}.fwd")),
                            gru(format!("enc.f{fi}.l{l}.bwd")),
                        )
                    })
                    .collect(),
                null_summary: id(format!("enc.f{fi}.null")),
            })
            .collect();
        let layout = Layout {
            token_embed: id("embed.token".into()),
            fields,
            comb_w: id("comb.w".into()),
            comb_b: id("comb.b".into()),
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
        };
        EmbedNet { cfg, params, layout }
    }

    pub fn config(&self) -> &EmbedNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), EmbednetError> {
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(EmbednetError::TokenOutOfRange {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Builds the encoder subgraph; returns the unit-vector node.
    fn encode_graph(&self, g: &mut Graph, fields: &[Vec<usize>]) -> NodeId {
        let mut summaries = Vec::with_capacity(fields.len());
        for (fi, ids) in fields.iter().enumerate() {
            // PAD-only suffixes do not affect the encoding.
            let trimmed = trim_trailing_pad(ids);
            let enc = &self.layout.fields[fi];
            if trimmed.is_empty() {
                summaries.push(g.param(enc.null_summary));
                continue;
            }
            let embedded = g.embed_rows(self.layout.token_embed, trimmed);
            let inputs: Vec<NodeId> = (0..trimmed.len()).map(|i| g.row_slice(embedded, i)).collect();
            let (_, summary) = bigru_run(g, &enc.layers, &inputs);
            summaries.push(summary);
        }
        let cat = g.concat_cols(&summaries);
        let (w, b) = (g.param(self.layout.comb_w), g.param(self.layout.comb_b));
        let proj = g.matmul(cat, w);
        let raw = g.add(proj, b);
        g.l2_normalize_row(raw)
    }

    /// Deterministic embedding of pre-encoded input fields.
    pub fn encode_ids(&self, fields: &[Vec<usize>]) -> Result<UnitVector, EmbednetError> {
        if fields.len() != self.cfg.field_names.len() {
            return Err(EmbednetError::FieldCountMismatch {
                expected: self.cfg.field_names.len(),
                got: fields.len(),
            });
        }
        for ids in fields {
            self.check_ids(ids)?;
        }
        let mut g = Graph::new(&self.params);
        let mu = self.encode_graph(&mut g, fields);
        Ok(UnitVector::new(g.value(mu).data().to_vec())?)
    }

    /// Embedding of an example's input fields under `vocab`.
    pub fn encode_example(
        &self,
        vocab: &Vocabulary,
        ex: &Example,
    ) -> Result<UnitVector, EmbednetError> {
        let fields: Vec<Vec<usize>> = ex
            .input_fields
            .iter()
            .map(|(_, toks)| vocab.encode(toks))
            .collect();
        self.encode_ids(&fields)
    }

    /// Builds the teacher-forced decoder subgraph over target ids and
    /// returns the summed negative log-likelihood node.
    fn decode_loss_graph(&self, g: &mut Graph, v: NodeId, target: &[usize]) -> NodeId {
        let mut hidden = Vec::with_capacity(self.cfg.dec_layers);
        for (w, b) in &self.layout.dec_init {
            let (wn, bn) = (g.param(*w), g.param(*b));
            let proj = g.matmul(v, wn);
            let raw = g.add(proj, bn);
            hidden.push(g.tanh(raw));
        }
        let (out_w, out_b) = (g.param(self.layout.out_w), g.param(self.layout.out_b));
        let mut losses = Vec::with_capacity(target.len());
        let mut prev = BOS;
        for &t in target {
            let emb = g.embed_rows(self.layout.token_embed, &[prev]);
            let mut x = g.concat_cols(&[emb, v]);
            for (l, cell) in self.layout.dec.iter().enumerate() {
                hidden[l] = gru_step(g, cell, x, hidden[l]);
                x = hidden[l];
            }
            let proj = g.matmul(x, out_w);
            let logits = g.add(proj, out_b);
            losses.push(g.neg_log_support(logits, vec![t]));
            prev = t;
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        total
    }

    /// Teacher-forced log-probability of the exact token sequence `y`
    /// (callers append EOS) given the latent vector.
    pub fn decode_logprob(&self, v: &UnitVector, y: &[usize]) -> Result<f64, EmbednetError> {
        assert!(!y.is_empty(), "cannot score an empty sequence");
        self.check_ids(y)?;
        let mut g = Graph::new(&self.params);
        let vn = g.constant(Tensor::row_vector(v.as_slice().to_vec()));
        let nll = self.decode_loss_graph(&mut g, vn, y);
        Ok(-g.scalar(nll))
    }

    /// Mean reconstruction loss over a batch with the given per-example
    /// noise vectors, plus parameter gradients. Deterministic; the entry
    /// point for finite-difference checks through the sampling step.
    pub fn reconstruction_loss_with_noise(
        &self,
        batch: &[BatchItem],
        noises: &[Vec<f64>],
        lm_mode: bool,
    ) -> Result<(f64, Vec<Tensor>), EmbednetError> {
        if batch.is_empty() {
            return Err(EmbednetError::EmptyBatch);
        }
        assert_eq!(batch.len(), noises.len());
        let mut grads = self.params.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (item, z) in batch.iter().zip(noises) {
            let mut g = Graph::new(&self.params);
            let v = if lm_mode {
                g.constant(Tensor::row_vector(z.clone()))
            } else {
                let mu = self.encode_graph(&mut g, &item.fields);
                g.vmf_reparam(mu, z.clone())
            };
            let nll = self.decode_loss_graph(&mut g, v, &item.target);
            let scaled = g.scale(nll, scale);
            total += g.scalar(scaled);
            g.backward(scaled, &mut grads);
        }
        Ok((total, grads))
    }

    /// Draws fresh vMF noise for each batch item and delegates to
    /// [`Self::reconstruction_loss_with_noise`].
    pub fn reconstruction_loss<R: Rng + ?Sized>(
        &self,
        batch: &[BatchItem],
        kappa: f64,
        rng: &mut R,
    ) -> Result<(f64, Vec<Tensor>), EmbednetError> {
        let noises = batch
            .iter()
            .map(|_| vmf::reparam_noise(self.cfg.latent_dim, kappa, rng))
            .collect::<Result<Vec<_>, _>>()?;
        self.reconstruction_loss_with_noise(batch, &noises, false)
    }
}

fn trim_trailing_pad(ids: &[usize]) -> &[usize] {
    let mut end = ids.len();
    while end > 0 && ids[end - 1] == PAD {
        end -= 1;
    }
    &ids[..end]
}

/// One pre-encoded training example: input fields and decoder target
/// (already ending in EOS).
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub fields: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

/// Which sequence the decoder reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconTarget {
    /// The example output: the task-aware retriever.
    Output,
    /// The concatenated input fields: the input-only retriever.
    InputConcat,
}

/// Converts an example to a batch item under the given target mode.
pub fn batch_item(vocab: &Vocabulary, ex: &Example, target: ReconTarget) -> BatchItem {
    let fields: Vec<Vec<usize>> = ex
        .input_fields
        .iter()
        .map(|(_, toks)| vocab.encode(toks))
        .collect();
    let mut t = match target {
        ReconTarget::Output => vocab.encode(&ex.output),
        ReconTarget::InputConcat => fields.iter().flatten().copied().collect(),
    };
    t.push(EOS);
    BatchItem { fields, target: t }
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
    pub target: ReconTarget,
    /// Train the decoder on pure noise vectors, ignoring the encoder.
    /// A language-model baseline used by diagnostics, not the pipeline.
    pub lm_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 16,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            target: ReconTarget::Output,
            lm_mode: false,
        }
    }
}

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wallclock_ms: u64,
}

/// Training log, persisted as CSV `iteration,loss,wallclock_ms`.
#[derive(Debug, Clone, Default)]
pub struct TrainLog(pub Vec<IterRecord>);

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,wallclock_ms\n");
        for r in &self.0 {
            s.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.wallclock_ms));
        }
        s
    }
}

/// Deterministic epoch shuffler: yields minibatches of example indices,
/// reshuffling at each epoch boundary from its own rng stream.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha12Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: ChaCha12Rng) -> Self {
        assert!(n > 0);
        BatchSampler {
            order: (0..n).collect(),
            pos: usize::MAX,
            rng,
        }
    }

    /// True when the next call to `next_batch` starts a new epoch.
    pub fn at_epoch_boundary(&self) -> bool {
        self.pos >= self.order.len()
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Trains a retriever encoder-decoder with minibatch Adam. Deterministic
/// given the seed; separate rng streams drive initialization, data order,
/// and noise so the pieces stay independently reproducible.
pub fn train_retriever(
    train: &[Example],
    vocab: &Vocabulary,
    net_cfg: EmbedNetConfig,
    cfg: &TrainConfig,
) -> Result<(EmbedNet, TrainLog), EmbednetError> {
    if train.is_empty() {
        return Err(EmbednetError::EmptyTrainSet);
    }
    let mut init_rng = stream_rng(cfg.seed, "embednet.init");
    let mut net = EmbedNet::build(net_cfg, &mut init_rng);
    let items: Vec<BatchItem> = train
        .iter()
        .map(|ex| batch_item(vocab, ex, cfg.target))
        .collect();
    let mut sampler = BatchSampler::new(items.len(), stream_rng(cfg.seed, "embednet.data"));
    let mut noise_rng = stream_rng(cfg.seed, "embednet.noise");
    let mut opt = Adam::new(&net.params, cfg.adam);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<BatchItem> = idx.iter().map(|&i| items[i].clone()).collect();
        let noises = batch
            .iter()
            .map(|_| vmf::reparam_noise(net.cfg.latent_dim, net.cfg.kappa, &mut noise_rng))
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, mut grads) =
            net.reconstruction_loss_with_noise(&batch, &noises, cfg.lm_mode)?;
        if !loss.is_finite() {
            return Err(EmbednetError::NonFiniteLoss { iteration: it });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut net.params, &grads);
        log.0.push(IterRecord {
            iteration: it,
            loss,
            wallclock_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((net, log))
}

/// [`train_retriever`] with the reconstruction target switched to the
/// concatenated input fields.
pub fn train_input_retriever(
    train: &[Example],
    vocab: &Vocabulary,
    net_cfg: EmbedNetConfig,
    cfg: &TrainConfig,
) -> Result<(EmbedNet, TrainLog), EmbednetError> {
    let cfg = TrainConfig {
        target: ReconTarget::InputConcat,
        ..cfg.clone()
    };
    train_retriever(train, vocab, net_cfg, &cfg)
}
