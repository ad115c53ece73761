//! Stage orchestration shared by the CLI and the end-to-end tests.
//!
//! Each stage is a pure function over files in `config.data_dir`:
//! `synth` (or external data) feeds `ingest`, which feeds
//! `train-retriever`, `build-index`, `train-editor`, and finally
//! `evaluate`/`complete`. Every artifact carries the config hash and the
//! hash of the dataset it was built from, so inconsistent combinations
//! are detected instead of silently compared.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{file_hash, Config, ConfigError};
use crate::corpus::{
    build_vocabulary, deduplicate, filter_by_length, load_jsonl, save_jsonl, split_by_group,
    CorpusError, Example, Vocabulary,
};
use crate::editor::{
    train_editor, train_seq2seq, EditTrainConfig, Editor, EditorConfig, EditorError,
};
use crate::embednet::{
    train_retriever as train_embed_net, EmbedNet, EmbedNetConfig, EmbednetError, ReconTarget,
    TrainConfig, TrainLog,
};
use crate::eval::{
    evaluate_systems, report_csv, report_json, report_text, EditSystem, EvalError, EvalReport,
    ReportMeta, RetrieverOnlySystem, System, AUTOCOMPLETE_KS, MAX_DECODE_LEN,
};
use crate::nn::AdamConfig;
use crate::retriever::{
    build_exact_index, build_lsh_index, load_store, save_store, IndexEntry, Retriever,
    RetrieverError, RetrieverKind, RetrievalContext,
};
use crate::synth::{decoy_corpus, standard_corpus};

/// Leaf capacity of pipeline-built approximate indexes.
pub const MAX_LEAF_SIZE: usize = 16;

/// Derives an independent, labelled rng stream from a 64-bit seed.
///
/// Streams for initialization, data order, noise, and augmentation must not
/// overlap; hashing the label with the seed keeps them decoupled without
/// hand-assigned offsets.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Embednet(#[from] EmbednetError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing artifact `{artifact}`; run the `{stage}` stage first")]
    MissingPrerequisite {
        artifact: PathBuf,
        stage: &'static str,
    },
    #[error(
        "dataset mismatch for {artifact}: built from {built}, current data is {current} \
         (pass --force to compare anyway)"
    )]
    DatasetMismatch {
        artifact: String,
        built: String,
        current: String,
    },
    #[error("{0}")]
    BadArgument(String),
}

impl PipelineError {
    /// Process exit code: 2 usage, 3 missing prerequisite, 4 numeric
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingPrerequisite { .. } => 3,
            PipelineError::Embednet(EmbednetError::NonFiniteLoss { .. })
            | PipelineError::Editor(EditorError::NonFiniteLoss { .. }) => 4,
            PipelineError::BadArgument(_) => 2,
            _ => 1,
        }
    }
}

/// Locations of every pipeline artifact under one data directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &Config) -> Self {
        Paths {
            root: PathBuf::from(&cfg.data_dir),
        }
    }

    pub fn raw(&self) -> PathBuf {
        self.root.join("raw.jsonl")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.jsonl"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn retriever_ck(&self) -> PathBuf {
        self.root.join("retriever.ck")
    }

    pub fn index_store(&self) -> PathBuf {
        self.root.join("index.bin")
    }

    pub fn editor_ck(&self) -> PathBuf {
        self.root.join("editor.ck")
    }

    pub fn seq2seq_ck(&self) -> PathBuf {
        self.root.join("seq2seq.ck")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn meta(&self, artifact: &str) -> PathBuf {
        self.root.join(format!("{artifact}.meta"))
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingPrerequisite {
            artifact: path,
            stage,
        })
    }
}

fn write_meta(path: &Path, entries: &[(&str, String)]) -> Result<(), PipelineError> {
    let mut f = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(f, "{k} = {v}")?;
    }
    f.flush()?;
    Ok(())
}

fn read_meta(path: &Path) -> Result<Vec<(String, String)>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn meta_value<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

const FIELD_SEP: char = '\u{1f}';

// Stage: synth.

/// Generates the configured synthetic corpus into `raw.jsonl` (or `out`).
pub fn stage_synth(cfg: &Config, out: Option<&Path>) -> Result<usize, PipelineError> {
    let paths = Paths::new(cfg);
    std::fs::create_dir_all(&paths.root)?;
    let corpus = match cfg.task.as_str() {
        "decoy" => decoy_corpus(
            cfg.template_count,
            cfg.instances_per_template,
            cfg.seed_data,
        ),
        _ => standard_corpus(
            cfg.template_count,
            cfg.instances_per_template,
            cfg.seed_data,
        ),
    };
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| paths.raw());
    save_jsonl(&target, &corpus)?;
    write_meta(
        &paths.meta("raw"),
        &[
            ("stage", "synth".into()),
            ("config_hash", cfg.hash()),
            ("examples", corpus.len().to_string()),
        ],
    )?;
    Ok(corpus.len())
}

// Stage: ingest.

/// Per-stage example counts, reported by `ingest`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestCounts {
    pub loaded: usize,
    pub after_length_filter: usize,
    pub after_dedup: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Tokenize → filter by length → deduplicate → split by group → save.
/// `raw` defaults to the synth output inside the data directory.
pub fn stage_ingest(cfg: &Config, raw: Option<&Path>) -> Result<IngestCounts, PipelineError> {
    let paths = Paths::new(cfg);
    std::fs::create_dir_all(&paths.root)?;
    let raw_path = match raw {
        Some(p) => p.to_path_buf(),
        None => require(paths.raw(), "synth")?,
    };
    let examples = load_jsonl(&raw_path)?;
    let loaded = examples.len();
    let examples = filter_by_length(examples, cfg.max_output_len);
    let after_length_filter = examples.len();
    let examples = deduplicate(examples);
    let after_dedup = examples.len();
    let split = split_by_group(
        &examples,
        (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
        cfg.seed_data,
    )?;
    let vocab = build_vocabulary(&split.train, cfg.min_count)?;
    save_jsonl(&paths.split("train"), &split.train)?;
    save_jsonl(&paths.split("validation"), &split.validation)?;
    save_jsonl(&paths.split("test"), &split.test)?;
    vocab.save(&paths.vocab())?;
    let counts = IngestCounts {
        loaded,
        after_length_filter,
        after_dedup,
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
    };
    write_meta(
        &paths.meta("ingest"),
        &[
            ("stage", "ingest".into()),
            ("config_hash", cfg.hash()),
            ("dataset_hash", file_hash(&paths.split("train"))?),
            ("loaded", counts.loaded.to_string()),
            ("after_length_filter", counts.after_length_filter.to_string()),
            ("after_dedup", counts.after_dedup.to_string()),
            ("train", counts.train.to_string()),
            ("validation", counts.validation.to_string()),
            ("test", counts.test.to_string()),
        ],
    )?;
    Ok(counts)
}

fn load_split(paths: &Paths, name: &str) -> Result<Vec<Example>, PipelineError> {
    let path = require(paths.split(name), "ingest")?;
    Ok(load_jsonl(&path)?)
}

fn load_vocab(paths: &Paths) -> Result<Vocabulary, PipelineError> {
    let path = require(paths.vocab(), "ingest")?;
    Ok(Vocabulary::load(&path)?)
}

// Stage: train-retriever.

fn embed_net_config(cfg: &Config, vocab: &Vocabulary, field_names: Vec<String>) -> EmbedNetConfig {
    EmbedNetConfig {
        vocab_size: vocab.size(),
        field_names,
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        latent_dim: cfg.latent_dim,
        enc_layers: cfg.enc_layers,
        dec_layers: cfg.enc_layers,
        kappa: cfg.kappa,
    }
}

fn field_names_of(examples: &[Example]) -> Vec<String> {
    examples
        .first()
        .map(|ex| ex.input_fields.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default()
}

/// Trains the task retriever's encoder-decoder and checkpoints it.
pub fn stage_train_retriever(cfg: &Config) -> Result<TrainLog, PipelineError> {
    let paths = Paths::new(cfg);
    let train = load_split(&paths, "train")?;
    let vocab = load_vocab(&paths)?;
    let field_names = field_names_of(&train);
    let net_cfg = embed_net_config(cfg, &vocab, field_names.clone());
    let train_cfg = TrainConfig {
        iterations: cfg.retriever_iterations,
        batch_size: cfg.batch_size,
        adam: AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        clip_norm: cfg.clip_norm,
        seed: cfg.seed_init,
        target: ReconTarget::Output,
        lm_mode: false,
    };
    let (net, log) = train_embed_net(&train, &vocab, net_cfg, &train_cfg)?;
    let ck = Checkpoint::from_params(
        cfg.canonical(),
        vec![
            ("stage".into(), "train-retriever".into()),
            ("config_hash".into(), cfg.hash()),
            (
                "dataset_hash".into(),
                file_hash(&paths.split("train"))?,
            ),
            ("seed".into(), cfg.seed_init.to_string()),
            (
                "field_names".into(),
                field_names.join(&FIELD_SEP.to_string()),
            ),
        ],
        &vocab,
        net.params(),
    );
    ck.save(&paths.retriever_ck())?;
    Ok(log)
}

fn load_embed_net(ck: &Checkpoint) -> Result<EmbedNet, PipelineError> {
    let snapshot = Config::parse(&ck.config_text)?;
    let field_names: Vec<String> = ck
        .meta_value("field_names")
        .unwrap_or_default()
        .split(FIELD_SEP)
        .map(str::to_string)
        .collect();
    let net_cfg = embed_net_config(&snapshot, &ck.vocab, field_names);
    Ok(EmbedNet::from_params(net_cfg, ck.to_param_set()))
}

// Stage: build-index.

/// Embeds every training example with the trained retriever and persists
/// the embedding store the search index is rebuilt from.
pub fn stage_build_index(cfg: &Config) -> Result<usize, PipelineError> {
    let paths = Paths::new(cfg);
    let ck_path = require(paths.retriever_ck(), "train-retriever")?;
    let train = load_split(&paths, "train")?;
    let ck = Checkpoint::load(&ck_path)?;
    let net = load_embed_net(&ck)?;
    let entries: Vec<IndexEntry> = train
        .iter()
        .map(|ex| {
            Ok(IndexEntry {
                id: ex.id.clone(),
                embedding: net.encode_example(&ck.vocab, ex)?.into_vec(),
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    save_store(&paths.index_store(), &entries, cfg.seed_data)?;
    write_meta(
        &paths.meta("index"),
        &[
            ("stage", "build-index".into()),
            ("config_hash", cfg.hash()),
            ("dataset_hash", file_hash(&paths.split("train"))?),
            ("retriever_hash", file_hash(&ck_path)?),
            ("entries", entries.len().to_string()),
        ],
    )?;
    Ok(entries.len())
}

/// Rebuilds the task retriever (net + index) from its persisted artifacts.
fn load_task_retriever(cfg: &Config, paths: &Paths) -> Result<(Retriever, Checkpoint), PipelineError> {
    let ck_path = require(paths.retriever_ck(), "train-retriever")?;
    let store_path = require(paths.index_store(), "build-index")?;
    let ck = Checkpoint::load(&ck_path)?;
    let net = load_embed_net(&ck)?;
    let (entries, build_seed) = load_store(&store_path)?;
    let retriever = if cfg.num_trees == 0 {
        Retriever::with_exact(RetrieverKind::Task, net, build_exact_index(&entries)?)
    } else {
        let index = build_lsh_index(&entries, cfg.num_trees, MAX_LEAF_SIZE, build_seed)?;
        let search_k = if cfg.search_k == 0 {
            index.default_search_k()
        } else {
            cfg.search_k
        };
        Retriever::with_lsh(RetrieverKind::Task, net, index, search_k)
    };
    Ok((retriever, ck))
}

// Stage: train-editor.

/// Trains the editor (or, with `seq2seq`, the no-retrieval baseline) and
/// checkpoints it. When `dev_eval_every` is positive, also returns the
/// mean negative log-likelihood over the validation split.
pub fn stage_train_editor(
    cfg: &Config,
    seq2seq: bool,
) -> Result<(TrainLog, Option<f64>), PipelineError> {
    let paths = Paths::new(cfg);
    let train = load_split(&paths, "train")?;
    let vocab = load_vocab(&paths)?;
    let net_cfg = EditorConfig {
        vocab_size: vocab.size(),
        num_copy_tokens: cfg.num_copy_tokens,
        embed_dim: cfg.embed_dim,
        copy_dim: cfg.copy_dim,
        hidden_dim: cfg.hidden_dim,
        enc_layers: cfg.enc_layers,
        dec_layers: cfg.dec_layers,
    };
    let train_cfg = EditTrainConfig {
        iterations: cfg.editor_iterations,
        batch_size: cfg.batch_size,
        adam: AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        clip_norm: cfg.clip_norm,
        seed: cfg.seed_train,
        augment_seed: cfg.seed_augment,
        identity_prob: cfg.identity_prob,
    };
    let mut meta = vec![
        ("stage".to_string(), "train-editor".to_string()),
        ("config_hash".to_string(), cfg.hash()),
        (
            "dataset_hash".to_string(),
            file_hash(&paths.split("train"))?,
        ),
        ("seed".to_string(), cfg.seed_train.to_string()),
    ];
    let retriever = if seq2seq {
        None
    } else {
        Some(load_task_retriever(cfg, &paths)?.0)
    };
    let (editor, log, out_path) = if seq2seq {
        meta.push(("mode".into(), "seq2seq".into()));
        let (editor, log) = train_seq2seq(&train, &vocab, net_cfg, &train_cfg)?;
        (editor, log, paths.seq2seq_ck())
    } else {
        meta.push(("mode".into(), "edit".into()));
        meta.push((
            "retriever_hash".into(),
            file_hash(&paths.retriever_ck())?,
        ));
        let retriever = retriever.as_ref().unwrap();
        let (editor, log) = train_editor(&train, &vocab, retriever, net_cfg, &train_cfg)?;
        (editor, log, paths.editor_ck())
    };
    let ck = Checkpoint::from_params(cfg.canonical(), meta, &vocab, editor.params());
    ck.save(&out_path)?;
    let dev_nll = if cfg.dev_eval_every > 0 {
        let validation = load_split(&paths, "validation")?;
        let ctx = RetrievalContext::new(&train);
        let mut total = 0.0;
        for ex in &validation {
            let hit = match &retriever {
                Some(r) => Some(r.retrieve(&ctx, &vocab, ex, None)?.0),
                None => None,
            };
            total += -editor.edit_logprob(&vocab, ex, hit, &ex.output)?;
        }
        Some(total / validation.len().max(1) as f64)
    } else {
        None
    };
    Ok((log, dev_nll))
}

fn load_editor(path: &Path) -> Result<(Editor, Checkpoint), PipelineError> {
    let ck = Checkpoint::load(path)?;
    let snapshot = Config::parse(&ck.config_text)?;
    let net_cfg = EditorConfig {
        vocab_size: ck.vocab.size(),
        num_copy_tokens: snapshot.num_copy_tokens,
        embed_dim: snapshot.embed_dim,
        copy_dim: snapshot.copy_dim,
        hidden_dim: snapshot.hidden_dim,
        enc_layers: snapshot.enc_layers,
        dec_layers: snapshot.dec_layers,
    };
    Ok((Editor::from_params(net_cfg, ck.to_param_set()), ck))
}

// Stage: evaluate.

/// Everything `evaluate` produces: the metric rows (in fixed system
/// order) plus the rendered artifacts.
#[derive(Debug)]
pub struct EvalOutput {
    pub reports: Vec<EvalReport>,
    pub text: String,
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
}

fn check_dataset_hash(
    artifact: &str,
    built: Option<&str>,
    current: &str,
    force: bool,
) -> Result<(), PipelineError> {
    match built {
        Some(b) if b != current && !force => Err(PipelineError::DatasetMismatch {
            artifact: artifact.to_string(),
            built: b.to_string(),
            current: current.to_string(),
        }),
        _ => Ok(()),
    }
}

/// Evaluates every available system on one split and writes the reports.
///
/// Refuses to mix artifacts built from different training data unless
/// `force` is set.
pub fn stage_evaluate(cfg: &Config, split: &str, force: bool) -> Result<EvalOutput, PipelineError> {
    let paths = Paths::new(cfg);
    let examples = load_split(&paths, split)?;
    let train = load_split(&paths, "train")?;
    let editor_path = require(paths.editor_ck(), "train-editor")?;
    let (editor, editor_ck) = load_editor(&editor_path)?;
    let (retriever, _retriever_ck) = load_task_retriever(cfg, &paths)?;

    let train_hash = file_hash(&paths.split("train"))?;
    let retriever_ck_loaded = Checkpoint::load(&paths.retriever_ck())?;
    check_dataset_hash(
        "retriever.ck",
        retriever_ck_loaded.meta_value("dataset_hash"),
        &train_hash,
        force,
    )?;
    check_dataset_hash(
        "editor.ck",
        editor_ck.meta_value("dataset_hash"),
        &train_hash,
        force,
    )?;
    let index_meta = read_meta(&paths.meta("index")).unwrap_or_default();
    check_dataset_hash(
        "index.bin",
        meta_value(&index_meta, "dataset_hash"),
        &train_hash,
        force,
    )?;

    let vocab = &editor_ck.vocab;
    let ctx = RetrievalContext::new(&train);
    let lexical = Retriever::lexical(vocab.clone(), &train)?;

    let seq2seq = if paths.seq2seq_ck().exists() {
        let (net, ck) = load_editor(&paths.seq2seq_ck())?;
        check_dataset_hash(
            "seq2seq.ck",
            ck.meta_value("dataset_hash"),
            &train_hash,
            force,
        )?;
        Some(net)
    } else {
        None
    };

    let edit_system = EditSystem {
        name: "retrieve-edit".into(),
        editor: &editor,
        vocab,
        retrieval: Some((&retriever, &ctx)),
    };
    let retriever_only = RetrieverOnlySystem {
        name: "retriever-only".into(),
        vocab,
        retriever: &retriever,
        ctx: &ctx,
    };
    let lexical_only = RetrieverOnlySystem {
        name: "lexical-retriever".into(),
        vocab,
        retriever: &lexical,
        ctx: &ctx,
    };
    let seq2seq_system = seq2seq.as_ref().map(|net| EditSystem {
        name: "seq2seq".into(),
        editor: net,
        vocab,
        retrieval: None,
    });

    let mut systems: Vec<&dyn System> = vec![&edit_system, &retriever_only];
    if let Some(s) = &seq2seq_system {
        systems.push(s);
    }
    systems.push(&lexical_only);

    let reports = evaluate_systems(&systems, &examples, &AUTOCOMPLETE_KS)?;
    let meta = ReportMeta::new(cfg.seed_data, cfg.hash(), file_hash(&paths.split(split))?);
    let json = report_json(&reports, &AUTOCOMPLETE_KS, &meta);
    let csv = report_csv(&reports);
    let text = report_text(&reports);
    std::fs::write(paths.report_json(), &json)?;
    std::fs::write(paths.report_csv(), &csv)?;
    write_meta(
        &paths.meta("report"),
        &[
            ("stage", "evaluate".into()),
            ("config_hash", cfg.hash()),
            ("dataset_hash", meta.dataset_hash.clone()),
            ("split", split.to_string()),
        ],
    )?;
    Ok(EvalOutput {
        reports,
        text,
        json_path: paths.report_json(),
        csv_path: paths.report_csv(),
    })
}

// Stage: complete.

/// One interactive completion: the retrieved prototype and the beam's
/// top hypotheses for a single input record.
#[derive(Debug)]
pub struct Completion {
    pub input_id: String,
    pub retrieved_id: String,
    pub distance: f64,
    /// (surface tokens, log probability), best first.
    pub candidates: Vec<(Vec<String>, f64)>,
}

/// Runs retrieve + edit for record `index` of a split. In train mode the
/// record's own entry is excluded from retrieval; in test mode nothing is
/// excluded, so a memorized input retrieves itself.
pub fn stage_complete(
    cfg: &Config,
    split: &str,
    index: usize,
    topk: usize,
    train_mode: bool,
) -> Result<Completion, PipelineError> {
    let paths = Paths::new(cfg);
    let examples = load_split(&paths, split)?;
    let train = load_split(&paths, "train")?;
    let x = examples.get(index).ok_or_else(|| {
        PipelineError::BadArgument(format!(
            "record {index} out of range for split `{split}` of {} examples",
            examples.len()
        ))
    })?;
    let editor_path = require(paths.editor_ck(), "train-editor")?;
    let (editor, editor_ck) = load_editor(&editor_path)?;
    let (retriever, _) = load_task_retriever(cfg, &paths)?;
    let vocab = &editor_ck.vocab;
    let ctx = RetrievalContext::new(&train);
    let exclude = train_mode.then_some(x.id.as_str());
    let (hit, distance) = retriever.retrieve(&ctx, vocab, x, exclude)?;
    let width = cfg.beam_width.max(topk);
    let hyps = editor.beam_search(vocab, x, Some(hit), width, MAX_DECODE_LEN)?;
    Ok(Completion {
        input_id: x.id.clone(),
        retrieved_id: hit.id.clone(),
        distance,
        candidates: hyps
            .into_iter()
            .take(topk)
            .map(|h| (h.surface, h.logp))
            .collect(),
    })
}

// Serving.

/// Trained artifacts held together for repeated free-text queries: the
/// entry point for embedding the system into other programs.
pub struct Session {
    cfg: Config,
    train: Vec<Example>,
    retriever: Retriever,
    editor: Editor,
    vocab: Vocabulary,
    field_names: Vec<String>,
}

impl Session {
    /// Loads the trained retriever, index, and editor from the configured
    /// data directory.
    pub fn open(cfg: Config) -> Result<Self, PipelineError> {
        let paths = Paths::new(&cfg);
        let train = load_split(&paths, "train")?;
        let editor_path = require(paths.editor_ck(), "train-editor")?;
        let (editor, editor_ck) = load_editor(&editor_path)?;
        let (retriever, retriever_ck) = load_task_retriever(&cfg, &paths)?;
        let field_names = retriever_ck
            .meta_value("field_names")
            .unwrap_or_default()
            .split(FIELD_SEP)
            .map(str::to_string)
            .collect();
        Ok(Session {
            cfg,
            train,
            retriever,
            editor,
            vocab: editor_ck.vocab,
            field_names,
        })
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Retrieves the nearest training example for a whitespace-tokenized
    /// query and beam-decodes up to `topk` edited candidates.
    pub fn complete(&self, text: &str, topk: usize) -> Result<Completion, PipelineError> {
        if self.field_names.len() != 1 {
            return Err(PipelineError::BadArgument(format!(
                "free-text queries need a single-field model, this one has {} fields",
                self.field_names.len()
            )));
        }
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(PipelineError::BadArgument("empty query".into()));
        }
        if topk == 0 {
            return Err(PipelineError::BadArgument("topk must be positive".into()));
        }
        let x = Example {
            id: "query".into(),
            group_key: "query".into(),
            input_fields: vec![(self.field_names[0].clone(), tokens)],
            output: Vec::new(),
        };
        let ctx = RetrievalContext::new(&self.train);
        let (hit, distance) = self.retriever.retrieve(&ctx, &self.vocab, &x, None)?;
        let width = self.cfg.beam_width.max(topk);
        let hyps = self.editor.beam_search(&self.vocab, &x, Some(hit), width, MAX_DECODE_LEN)?;
        Ok(Completion {
            input_id: x.id,
            retrieved_id: hit.id.clone(),
            distance,
            candidates: hyps
                .into_iter()
                .take(topk)
                .map(|h| (h.surface, h.logp))
                .collect(),
        })
    }
}

// Stage: report.

/// Renders a previously written JSON report as the text table.
pub fn stage_report(cfg: &Config) -> Result<String, PipelineError> {
    let paths = Paths::new(cfg);
    let path = require(paths.report_json(), "evaluate")?;
    let text = std::fs::read_to_string(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| PipelineError::BadArgument(format!("malformed report: {e}")))?;
    let systems = value
        .get("systems")
        .and_then(|s| s.as_array())
        .ok_or_else(|| PipelineError::BadArgument("report lacks a `systems` array".into()))?;
    let reports: Vec<EvalReport> = systems
        .iter()
        .map(|s| {
            serde_json::from_value(s.clone())
                .map_err(|e| PipelineError::BadArgument(format!("malformed report row: {e}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(report_text(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: u64 = stream_rng(7, "init").random();
        let b: u64 = stream_rng(7, "init").random();
        let c: u64 = stream_rng(7, "data").random();
        let d: u64 = stream_rng(8, "init").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    fn micro_config(dir: &Path) -> Config {
        let mut cfg = Config::default();
        cfg.data_dir = dir.to_string_lossy().into_owned();
        cfg.task = "standard".into();
        cfg.template_count = 12;
        cfg.instances_per_template = 3;
        cfg.latent_dim = 8;
        cfg.embed_dim = 8;
        cfg.hidden_dim = 8;
        cfg.copy_dim = 4;
        cfg.num_copy_tokens = 32;
        cfg.retriever_iterations = 3;
        cfg.editor_iterations = 3;
        cfg.batch_size = 4;
        cfg.num_trees = 2;
        cfg.beam_width = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn run_full_pipeline(cfg: &Config) -> EvalOutput {
        stage_synth(cfg, None).unwrap();
        stage_ingest(cfg, None).unwrap();
        stage_train_retriever(cfg).unwrap();
        stage_build_index(cfg).unwrap();
        stage_train_editor(cfg, false).unwrap();
        stage_train_editor(cfg, true).unwrap();
        stage_evaluate(cfg, "test", false).unwrap()
    }

    #[test]
    fn ingest_counts_and_rerun_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        let n = stage_synth(&cfg, None).unwrap();
        assert_eq!(n, 36);
        let counts = stage_ingest(&cfg, None).unwrap();
        assert_eq!(counts.loaded, 36);
        assert_eq!(counts.after_length_filter, 36);
        assert!(counts.after_dedup <= counts.after_length_filter);
        assert_eq!(
            counts.train + counts.validation + counts.test,
            counts.after_dedup
        );
        let paths = Paths::new(&cfg);
        let first = std::fs::read(paths.split("train")).unwrap();
        let counts2 = stage_ingest(&cfg, None).unwrap();
        assert_eq!(counts, counts2);
        assert_eq!(std::fs::read(paths.split("train")).unwrap(), first);
    }

    #[test]
    fn missing_prerequisites_name_their_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        match stage_ingest(&cfg, None) {
            Err(PipelineError::MissingPrerequisite { stage, .. }) => assert_eq!(stage, "synth"),
            other => panic!("expected missing synth, got {other:?}"),
        }
        match stage_train_retriever(&cfg) {
            Err(e @ PipelineError::MissingPrerequisite { .. }) => {
                assert_eq!(e.exit_code(), 3);
                assert!(e.to_string().contains("ingest"), "{e}");
            }
            other => panic!("expected missing ingest, got {other:?}"),
        }
        stage_synth(&cfg, None).unwrap();
        stage_ingest(&cfg, None).unwrap();
        match stage_evaluate(&cfg, "test", false) {
            Err(PipelineError::MissingPrerequisite { stage, .. }) => {
                assert_eq!(stage, "train-editor")
            }
            other => panic!("expected missing editor, got {other:?}"),
        }
        match stage_train_editor(&cfg, false) {
            Err(PipelineError::MissingPrerequisite { stage, .. }) => {
                assert_eq!(stage, "train-retriever")
            }
            other => panic!("expected missing retriever, got {other:?}"),
        }
    }

    #[test]
    fn single_group_split_error_is_surfaced() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path());
        stage_synth(&cfg, None).unwrap();
        // Collapse every example into one group.
        let paths = Paths::new(&cfg);
        let mut examples = load_jsonl(&paths.raw()).unwrap();
        for ex in &mut examples {
            ex.group_key = "only".into();
        }
        save_jsonl(&paths.raw(), &examples).unwrap();
        cfg.seed_data += 1; // does not matter; split must fail first
        match stage_ingest(&cfg, None) {
            Err(PipelineError::Corpus(CorpusError::TooFewGroups(1))) => {}
            other => panic!("expected TooFewGroups, got {other:?}"),
        }
    }

    #[test]
    fn micro_pipeline_end_to_end_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let out_a = run_full_pipeline(&micro_config(dir_a.path()));
        let out_b = run_full_pipeline(&micro_config(dir_b.path()));

        assert_eq!(out_a.reports.len(), 4);
        let names: Vec<&str> = out_a.reports.iter().map(|r| r.system.as_str()).collect();
        assert_eq!(
            names,
            ["retrieve-edit", "retriever-only", "seq2seq", "lexical-retriever"]
        );
        let json_a = std::fs::read(&out_a.json_path).unwrap();
        let json_b = std::fs::read(&out_b.json_path).unwrap();
        assert_eq!(json_a, json_b, "reports must be bit-identical");
        let parsed: serde_json::Value = serde_json::from_slice(&json_a).unwrap();
        assert!(parsed["metadata"]["config_hash"].is_string());
        assert_eq!(parsed["systems"].as_array().unwrap().len(), 4);

        // The rendered text table mentions every system.
        let text = stage_report(&micro_config(dir_a.path())).unwrap();
        for name in names {
            assert!(text.contains(name));
        }
    }

    #[test]
    fn complete_exclusion_rules() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        run_full_pipeline(&cfg);
        let train = load_jsonl(&Paths::new(&cfg).split("train")).unwrap();
        let as_train = stage_complete(&cfg, "train", 0, 2, true).unwrap();
        assert_eq!(as_train.input_id, train[0].id);
        assert_ne!(as_train.retrieved_id, train[0].id);
        assert!(!as_train.candidates.is_empty());
        let as_test = stage_complete(&cfg, "train", 0, 2, false).unwrap();
        assert_eq!(as_test.retrieved_id, train[0].id);
        assert!(as_test.distance <= 1e-6);
        match stage_complete(&cfg, "train", 10_000, 2, true) {
            Err(e @ PipelineError::BadArgument(_)) => assert_eq!(e.exit_code(), 2),
            other => panic!("expected BadArgument, got {other:?}"),
        }
    }

    #[test]
    fn session_serves_free_text_queries() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        run_full_pipeline(&cfg);
        let train = load_jsonl(&Paths::new(&cfg).split("train")).unwrap();
        let session = Session::open(cfg).unwrap();
        assert_eq!(session.train_size(), train.len());
        assert!(session.vocab_size() > 10);
        // A memorized description retrieves its own record at distance 0.
        let text = train[0].input_fields[0].1.join(" ");
        let done = session.complete(&text, 2).unwrap();
        assert_eq!(done.retrieved_id, train[0].id);
        assert!(done.distance <= 1e-6);
        assert!(!done.candidates.is_empty());
        assert!(done.candidates.len() <= 2);
        // Unseen words fall back to the unknown token rather than failing.
        session.complete("entirely novel words", 1).unwrap();
        assert!(session.complete("   ", 1).is_err());
        assert!(session.complete("x", 0).is_err());
    }

    #[test]
    fn evaluate_refuses_mismatched_datasets_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        run_full_pipeline(&cfg);
        // Tamper with the training data, leaving stale models behind.
        let paths = Paths::new(&cfg);
        let mut train = load_jsonl(&paths.split("train")).unwrap();
        train[0].output.push("tampered".into());
        save_jsonl(&paths.split("train"), &train).unwrap();
        match stage_evaluate(&cfg, "test", false) {
            Err(PipelineError::DatasetMismatch { artifact, .. }) => {
                assert_eq!(artifact, "retriever.ck")
            }
            other => panic!("expected DatasetMismatch, got {other:?}"),
        }
        let forced = stage_evaluate(&cfg, "test", true).unwrap();
        assert_eq!(forced.reports.len(), 4);
    }
}
