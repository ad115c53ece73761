//! Run configuration: a flat `key = value` text format with `#` comments,
//! command-line overrides, validation, canonical serialization, and
//! SHA-256 content hashes used to stamp every artifact.

use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every knob of the pipeline. Unset file keys keep their defaults;
/// command-line `--key value` pairs override file values.
///
/// Seed roles: `seed_data` drives corpus generation, splitting, and index
/// building; `seed_init` the retriever's training run; `seed_train` the
/// editor's initialization and batch order; `seed_augment` the identity-
/// augmentation coin flips.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Corpus flavor: `standard` (templated) or `decoy` (order-only twins).
    pub task: String,
    /// Directory holding datasets, checkpoints, indexes, and reports.
    pub data_dir: String,
    pub latent_dim: usize,
    pub kappa: f64,
    pub retriever_iterations: usize,
    pub editor_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub beam_width: usize,
    /// Trees in the approximate index; 0 selects the exact index.
    pub num_trees: usize,
    /// Candidate budget per query; 0 selects `50 * num_trees`.
    pub search_k: usize,
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_train: u64,
    pub seed_augment: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub copy_dim: usize,
    pub num_copy_tokens: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub identity_prob: f64,
    pub min_count: usize,
    /// Ingest drops examples whose output exceeds this many tokens.
    pub max_output_len: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub template_count: usize,
    pub instances_per_template: usize,
    /// If nonzero, editor training also reports validation loss.
    /// Diagnostic only; no early stopping is attached to it.
    pub dev_eval_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            task: "standard".into(),
            data_dir: "data".into(),
            latent_dim: 64,
            kappa: 500.0,
            retriever_iterations: 1000,
            editor_iterations: 1000,
            batch_size: 16,
            learning_rate: 0.001,
            clip_norm: 5.0,
            beam_width: 5,
            num_trees: 10,
            search_k: 0,
            seed_data: 0,
            seed_init: 0,
            seed_train: 0,
            seed_augment: 0,
            embed_dim: 64,
            hidden_dim: 64,
            copy_dim: 16,
            num_copy_tokens: 300,
            enc_layers: 1,
            dec_layers: 2,
            identity_prob: 0.1,
            min_count: 1,
            max_output_len: 160,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            template_count: 216,
            instances_per_template: 10,
            dev_eval_every: 0,
        }
    }
}

macro_rules! config_keys {
    ($($field:ident : $ty:ident),* $(,)?) => {
        /// All recognized keys, in canonical serialization order.
        pub const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl Config {
            /// Sets one field from its textual form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = parse_value::<$ty>(key, value)?;
                        Ok(())
                    })*
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            /// Canonical `key = value` serialization covering every key,
            /// in [`KEYS`] order. Parsing it back reproduces the config.
            pub fn canonical(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!(
                    "{} = {}\n", stringify!($field), self.$field
                ));)*
                out
            }
        }
    };
}

config_keys! {
    task: String,
    data_dir: String,
    latent_dim: usize,
    kappa: f64,
    retriever_iterations: usize,
    editor_iterations: usize,
    batch_size: usize,
    learning_rate: f64,
    clip_norm: f64,
    beam_width: usize,
    num_trees: usize,
    search_k: usize,
    seed_data: u64,
    seed_init: u64,
    seed_train: u64,
    seed_augment: u64,
    embed_dim: usize,
    hidden_dim: usize,
    copy_dim: usize,
    num_copy_tokens: usize,
    enc_layers: usize,
    dec_layers: usize,
    identity_prob: f64,
    min_count: usize,
    max_output_len: usize,
    train_ratio: f64,
    val_ratio: f64,
    test_ratio: f64,
    template_count: usize,
    instances_per_template: usize,
    dev_eval_every: usize,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected: std::any::type_name::<T>(),
    })
}

impl Config {
    /// Parses the flat text format: one `key = value` per line, `#` starts
    /// a comment, blank lines ignored. Unmentioned keys keep defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies command-line `--key value` pairs on top of file values.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (key, value) in pairs {
            self.set(key, value)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization; stamped into artifacts so
    /// mismatched runs are detectable. Filesystem locations are excluded:
    /// the hash identifies the experiment, not where it is stored.
    pub fn hash(&self) -> String {
        let keyed: String = self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("data_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        sha256_hex(keyed.as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive_usize: [(&str, usize); 13] = [
            ("latent_dim", self.latent_dim),
            ("retriever_iterations", self.retriever_iterations),
            ("editor_iterations", self.editor_iterations),
            ("batch_size", self.batch_size),
            ("beam_width", self.beam_width),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("copy_dim", self.copy_dim),
            ("num_copy_tokens", self.num_copy_tokens),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("min_count", self.min_count),
            ("max_output_len", self.max_output_len),
        ];
        for (name, v) in positive_usize {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        let positive_f64 = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive_f64 {
            if !(v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.kappa >= 0.0) {
            return Err(ConfigError::Invalid("kappa must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.identity_prob) {
            return Err(ConfigError::Invalid(
                "identity_prob must lie in [0, 1]".into(),
            ));
        }
        let ratios = (self.train_ratio, self.val_ratio, self.test_ratio);
        if ratios.0 <= 0.0
            || ratios.1 <= 0.0
            || ratios.2 <= 0.0
            || (ratios.0 + ratios.1 + ratios.2 - 1.0).abs() > 1e-9
        {
            return Err(ConfigError::Invalid(format!(
                "split ratios must be positive and sum to 1, got {ratios:?}"
            )));
        }
        if self.template_count == 0 || self.instances_per_template == 0 {
            return Err(ConfigError::Invalid(
                "template_count and instances_per_template must be positive".into(),
            ));
        }
        match self.task.as_str() {
            "standard" => {
                if self.template_count > crate::synth::MAX_STANDARD_TEMPLATES {
                    return Err(ConfigError::Invalid(format!(
                        "standard task supports at most {} templates",
                        crate::synth::MAX_STANDARD_TEMPLATES
                    )));
                }
                Ok(())
            }
            "decoy" => {
                if self.template_count % 2 != 0
                    || self.template_count > crate::synth::MAX_DECOY_TEMPLATES
                {
                    return Err(ConfigError::Invalid(format!(
                        "decoy task needs an even template count of at most {}",
                        crate::synth::MAX_DECOY_TEMPLATES
                    )));
                }
                Ok(())
            }
            other => Err(ConfigError::Invalid(format!(
                "task must be `standard` or `decoy`, got `{other}`"
            ))),
        }
    }
}

/// SHA-256 of a file's bytes; identifies datasets independent of path.
pub fn file_hash(path: &Path) -> Result<String, ConfigError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_contract() {
        let cfg = Config::default();
        assert_eq!(cfg.kappa, 500.0);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.retriever_iterations, 1000);
        assert_eq!(cfg.identity_prob, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn canonical_round_trips() {
        let mut cfg = Config::default();
        cfg.kappa = 12.5;
        cfg.learning_rate = 3e-4;
        cfg.task = "decoy".into();
        cfg.seed_train = u64::MAX;
        let text = cfg.canonical();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
        // Every key appears exactly once.
        for key in KEYS {
            assert_eq!(
                text.lines().filter(|l| l.starts_with(&format!("{key} ="))).count(),
                1,
                "missing key {key}"
            );
        }
    }

    #[test]
    fn parse_handles_comments_and_spacing() {
        let text = "\n# full comment\n  kappa=7.5  \nbatch_size = 4 # trailing\n\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.kappa, 7.5);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.beam_width, Config::default().beam_width);
    }

    #[test]
    fn parse_errors_name_the_problem() {
        match Config::parse("kappa") {
            Err(ConfigError::BadLine { line: 1, .. }) => {}
            other => panic!("expected BadLine, got {other:?}"),
        }
        match Config::parse("not_a_key = 3") {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "not_a_key"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        match Config::parse("batch_size = soon") {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "batch_size"),
            other => panic!("expected BadValue, got {other:?}"),
        }
    }

    #[test]
    fn overrides_win_and_change_the_hash() {
        let mut cfg = Config::parse("kappa = 100").unwrap();
        let before = cfg.hash();
        cfg.apply_overrides(&[("kappa".into(), "200".into())]).unwrap();
        assert_eq!(cfg.kappa, 200.0);
        assert_ne!(cfg.hash(), before);
        assert_eq!(cfg.hash().len(), 64);
        assert!(cfg.hash().chars().all(|c| c.is_ascii_hexdigit()));
        // Equal configs hash equally.
        assert_eq!(cfg.hash(), cfg.clone().hash());
        // Moving the data directory does not change the experiment.
        let after = cfg.hash();
        cfg.apply_overrides(&[("data_dir".into(), "elsewhere".into())])
            .unwrap();
        assert_eq!(cfg.hash(), after);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let cases = [
            ("kappa = -1", "kappa"),
            ("batch_size = 0", "batch_size"),
            ("learning_rate = 0", "learning_rate"),
            ("identity_prob = 1.5", "identity_prob"),
            ("train_ratio = 0.9", "ratios"),
            ("task = mystery", "task"),
            ("template_count = 1000", "too many standard templates"),
            ("task = decoy\ntemplate_count = 7", "odd decoy template count"),
            ("task = decoy\ntemplate_count = 200", "too many decoy templates"),
        ];
        for (text, what) in cases {
            let cfg = Config::parse(text).unwrap();
            assert!(cfg.validate().is_err(), "{what} should be rejected");
        }
    }

    #[test]
    fn file_hash_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(&path, b"{\"id\":\"a\"}\n").unwrap();
        let h1 = file_hash(&path).unwrap();
        std::fs::write(&path, b"{\"id\":\"b\"}\n").unwrap();
        let h2 = file_hash(&path).unwrap();
        assert_ne!(h1, h2);
        assert_eq!(h1.len(), 64);
    }
}
