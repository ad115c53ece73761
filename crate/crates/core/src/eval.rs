//! Metrics and experiment reports.
//!
//! Sentence-level BLEU-4 and exact match score full predictions; the
//! autocomplete metrics measure, under a teacher-forced gold prefix, how
//! many consecutive next tokens a system ranks into its top-k candidate
//! list. Reports aggregate several systems evaluated on the identical
//! example sequence and serialize to an aligned text table, CSV, and JSON
//! with provenance metadata.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::corpus::Vocabulary;
use crate::editor::{Editor, EditorError};
use crate::retriever::{RetrievalContext, Retriever, RetrieverError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
}

const BLEU_EPS: f64 = 1e-9;
pub const BEAM_WIDTH: usize = 5;
pub const MAX_DECODE_LEN: usize = 160;
pub const AUTOCOMPLETE_KS: [usize; 3] = [1, 5, 10];

fn ngram_counts(seq: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for i in 0..=seq.len() - n {
            *counts.entry(&seq[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    let total = candidate.len().saturating_sub(n - 1);
    (matches, total)
}

/// Sentence BLEU-4: uniform n-gram weights, brevity penalty, and ε-smoothed
/// modified precisions (ε = 1e-9 added to numerator and denominator).
/// Empty candidates and candidates with no unigram overlap score 0.
pub fn bleu(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let (m1, _) = clipped_matches(candidate, reference, 1);
    if m1 == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, total) = clipped_matches(candidate, reference, n);
        log_sum += ((m as f64 + BLEU_EPS) / (total as f64 + BLEU_EPS)).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// 1 iff the token sequences are identical.
pub fn exact_match(candidate: &[String], reference: &[String]) -> f64 {
    if candidate == reference {
        1.0
    } else {
        0.0
    }
}

/// Lengths of the maximal runs of consecutive `true` bits.
pub fn correct_runs(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0;
    for &b in bits {
        if b {
            current += 1;
        } else if current > 0 {
            runs.push(current);
            current = 0;
        }
    }
    if current > 0 {
        runs.push(current);
    }
    runs
}

/// Per-example correctness bits and run statistics at each k, plus the
/// corpus aggregates (arithmetic means over examples).
#[derive(Debug, Clone)]
pub struct AutocompleteResult {
    pub ks: Vec<usize>,
    /// `bits[example][ki][position]`.
    pub bits: Vec<Vec<Vec<bool>>>,
    /// `longest[example][ki]`: the longest run (0 when no position is correct).
    pub longest: Vec<Vec<f64>>,
    /// `mean_run[example][ki]`: the mean run length (0 when no runs).
    pub mean_run: Vec<Vec<f64>>,
    pub agg_longest: Vec<f64>,
    pub agg_mean_run: Vec<f64>,
}

impl AutocompleteResult {
    /// Derives all run statistics from raw correctness bits.
    pub fn from_bits(ks: Vec<usize>, bits: Vec<Vec<Vec<bool>>>) -> Self {
        let n = bits.len().max(1);
        let mut longest = Vec::with_capacity(bits.len());
        let mut mean_run = Vec::with_capacity(bits.len());
        let mut agg_longest = vec![0.0; ks.len()];
        let mut agg_mean_run = vec![0.0; ks.len()];
        for ex_bits in &bits {
            let mut ex_longest = Vec::with_capacity(ks.len());
            let mut ex_mean = Vec::with_capacity(ks.len());
            for ki_bits in ex_bits {
                let runs = correct_runs(ki_bits);
                let l = runs.iter().copied().max().unwrap_or(0) as f64;
                let m = if runs.is_empty() {
                    0.0
                } else {
                    runs.iter().sum::<usize>() as f64 / runs.len() as f64
                };
                ex_longest.push(l);
                ex_mean.push(m);
            }
            for ki in 0..ks.len() {
                agg_longest[ki] += ex_longest[ki] / n as f64;
                agg_mean_run[ki] += ex_mean[ki] / n as f64;
            }
            longest.push(ex_longest);
            mean_run.push(ex_mean);
        }
        AutocompleteResult {
            ks,
            bits,
            longest,
            mean_run,
            agg_longest,
            agg_mean_run,
        }
    }
}

/// A sequence predictor under evaluation: full decode plus per-position
/// ranked next-token candidates under a teacher-forced gold prefix.
pub trait System {
    fn name(&self) -> &str;
    fn predict(&self, x: &Example) -> Result<Vec<String>, EvalError>;
    /// One ranked candidate list per gold position (list `t` conditions on
    /// `gold[..t]`).
    fn candidate_lists(
        &self,
        x: &Example,
        gold: &[String],
        k_max: usize,
    ) -> Result<Vec<Vec<String>>, EvalError>;
}

/// The editor driven end-to-end: beam decoding with width
/// [`BEAM_WIDTH`], optionally conditioned on a retrieved prototype.
pub struct EditSystem<'a> {
    pub name: String,
    pub editor: &'a Editor,
    pub vocab: &'a Vocabulary,
    /// `None` evaluates the no-retrieval baseline.
    pub retrieval: Option<(&'a Retriever, &'a RetrievalContext<'a>)>,
}

impl EditSystem<'_> {
    fn retrieved(&self, x: &Example) -> Result<Option<Example>, EvalError> {
        match &self.retrieval {
            Some((retriever, ctx)) => {
                let (hit, _) = retriever.retrieve(ctx, self.vocab, x, None)?;
                Ok(Some(hit.clone()))
            }
            None => Ok(None),
        }
    }
}

impl System for EditSystem<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, x: &Example) -> Result<Vec<String>, EvalError> {
        let retrieved = self.retrieved(x)?;
        let hyps = self
            .editor
            .beam_search(self.vocab, x, retrieved.as_ref(), BEAM_WIDTH, MAX_DECODE_LEN)?;
        Ok(hyps.into_iter().next().map(|h| h.surface).unwrap_or_default())
    }

    fn candidate_lists(
        &self,
        x: &Example,
        gold: &[String],
        k_max: usize,
    ) -> Result<Vec<Vec<String>>, EvalError> {
        let retrieved = self.retrieved(x)?;
        let sess = self.editor.start_decode(self.vocab, x, retrieved.as_ref())?;
        let mut state = self.editor.init_state(&sess);
        let mut prev = crate::corpus::BOS;
        let mut lists = Vec::with_capacity(gold.len());
        for tok in gold {
            let probs = self.editor.step(&sess, &mut state, prev)?;
            lists.push(self.editor.top_surface(self.vocab, &sess, probs, k_max));
            prev = self.vocab.id(tok);
        }
        Ok(lists)
    }
}

/// Emits the retrieved prototype's output verbatim; its next-token
/// candidate at position `t` is the prototype's token `t`.
pub struct RetrieverOnlySystem<'a> {
    pub name: String,
    pub vocab: &'a Vocabulary,
    pub retriever: &'a Retriever,
    pub ctx: &'a RetrievalContext<'a>,
}

impl System for RetrieverOnlySystem<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, x: &Example) -> Result<Vec<String>, EvalError> {
        let (hit, _) = self.retriever.retrieve(self.ctx, self.vocab, x, None)?;
        Ok(hit.output.clone())
    }

    fn candidate_lists(
        &self,
        x: &Example,
        gold: &[String],
        _k_max: usize,
    ) -> Result<Vec<Vec<String>>, EvalError> {
        let (hit, _) = self.retriever.retrieve(self.ctx, self.vocab, x, None)?;
        Ok((0..gold.len())
            .map(|t| hit.output.get(t).cloned().into_iter().collect())
            .collect())
    }
}

/// One system's metrics over an evaluation split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub bleu: f64,
    pub exact_match: f64,
    /// Mean longest completed length per k (order matches the evaluated ks).
    pub longest: Vec<f64>,
    /// Mean average completion length per k.
    pub avg: Vec<f64>,
}

/// Evaluates one system over the split in order.
pub fn evaluate_system(
    sys: &dyn System,
    examples: &[Example],
    ks: &[usize],
) -> Result<(EvalReport, AutocompleteResult), EvalError> {
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mut bleu_sum = 0.0;
    let mut em_sum = 0.0;
    let mut all_bits = Vec::with_capacity(examples.len());
    for ex in examples {
        let pred = sys.predict(ex)?;
        bleu_sum += bleu(&pred, &ex.output);
        em_sum += exact_match(&pred, &ex.output);
        let lists = sys.candidate_lists(ex, &ex.output, k_max)?;
        assert_eq!(lists.len(), ex.output.len());
        let ex_bits: Vec<Vec<bool>> = ks
            .iter()
            .map(|&k| {
                lists
                    .iter()
                    .zip(&ex.output)
                    .map(|(list, gold)| list.iter().take(k).any(|c| c == gold))
                    .collect()
            })
            .collect();
        all_bits.push(ex_bits);
    }
    let auto = AutocompleteResult::from_bits(ks.to_vec(), all_bits);
    let n = examples.len().max(1) as f64;
    Ok((
        EvalReport {
            system: sys.name().to_string(),
            bleu: bleu_sum / n,
            exact_match: em_sum / n,
            longest: auto.agg_longest.clone(),
            avg: auto.agg_mean_run.clone(),
        },
        auto,
    ))
}

/// Evaluates every system on the identical example order.
pub fn evaluate_systems(
    systems: &[&dyn System],
    examples: &[Example],
    ks: &[usize],
) -> Result<Vec<EvalReport>, EvalError> {
    systems
        .iter()
        .map(|sys| evaluate_system(*sys, examples, ks).map(|(r, _)| r))
        .collect()
}

/// Report provenance: the experiment seed plus content hashes of the
/// configuration and dataset (see the config module's hashing).
#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub bleu_scheme: String,
}

impl ReportMeta {
    pub fn new(seed: u64, config_hash: String, dataset_hash: String) -> Self {
        ReportMeta {
            seed,
            config_hash,
            dataset_hash,
            bleu_scheme: "sentence-mean, add-epsilon 1e-9".into(),
        }
    }
}

/// Fixed-header CSV, one row per system.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "system,bleu,exact_match,longest_k1,longest_k5,longest_k10,avg_k1,avg_k5,avg_k10\n",
    );
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.system,
            r.bleu,
            r.exact_match,
            r.longest[0],
            r.longest[1],
            r.longest[2],
            r.avg[0],
            r.avg[1],
            r.avg[2]
        ));
    }
    s
}

/// Aligned plain-text table of the same rows as the CSV.
pub fn report_text(reports: &[EvalReport]) -> String {
    let headers = [
        "system",
        "bleu",
        "exact",
        "longest@1",
        "longest@5",
        "longest@10",
        "avg@1",
        "avg@5",
        "avg@10",
    ];
    let rows: Vec<[String; 9]> = reports
        .iter()
        .map(|r| {
            [
                r.system.clone(),
                format!("{:.2}", r.bleu),
                format!("{:.3}", r.exact_match),
                format!("{:.2}", r.longest[0]),
                format!("{:.2}", r.longest[1]),
                format!("{:.2}", r.longest[2]),
                format!("{:.2}", r.avg[0]),
                format!("{:.2}", r.avg[1]),
                format!("{:.2}", r.avg[2]),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = fmt_row(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out.push('\n');
    for row in &rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct JsonReport<'a> {
    metadata: &'a ReportMeta,
    ks: &'a [usize],
    systems: &'a [EvalReport],
}

/// JSON report with provenance metadata; serialization is deterministic.
pub fn report_json(reports: &[EvalReport], ks: &[usize], meta: &ReportMeta) -> String {
    serde_json::to_string_pretty(&JsonReport {
        metadata: meta,
        ks,
        systems: reports,
    })
    .expect("report serialization cannot fail")
    + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_frozen_values() {
        // Hand oracle: all clipped precisions 1 (the 0/0 four-gram smooths
        // to 1), brevity penalty exp(1 - 4/3).
        let v = bleu(&t("the cat sat"), &t("the cat sat on"));
        assert!((v - 71.65313105737893).abs() < 1e-10, "{v}");
        let v = bleu(&t("the the the the"), &t("the cat"));
        assert!((v - 8.034284187270558e-6).abs() < 1e-16, "{v}");
        let v = bleu(&t("a b c d e f"), &t("a b x d e f"));
        assert!((v - 0.2540663741143586).abs() < 1e-12, "{v}");
        let v = bleu(&t("a b c e d f"), &t("a b c d e f"));
        assert!((v - 0.24028114145652574).abs() < 1e-12, "{v}");
    }

    #[test]
    fn bleu_edge_cases() {
        assert_eq!(bleu(&[], &t("a b")), 0.0);
        assert_eq!(bleu(&t("x y z"), &t("a b")), 0.0);
        assert_eq!(bleu(&t("a"), &t("a")), 100.0);
        assert!(bleu(&t("a b c"), &t("a b c")) == 100.0);
        // Longer candidate than reference: no brevity penalty.
        let v = bleu(&t("a b c d"), &t("a b c"));
        assert!(v < 100.0 && v > 0.0);
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match(&t("a b"), &t("a b")), 1.0);
        assert_eq!(exact_match(&t("a b"), &t("a c")), 0.0);
        assert_eq!(exact_match(&tokenize("a  b"), &tokenize("a b")), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prop_bleu_self_is_100(len in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let seq: Vec<String> = (0..len)
                .map(|_| format!("w{}", rng.random_range(0..6)))
                .collect();
            prop_assert!((bleu(&seq, &seq) - 100.0).abs() < 1e-9);
            prop_assert_eq!(exact_match(&seq, &seq), 1.0);
        }

        #[test]
        fn prop_bleu_in_range(la in 0usize..10, lb in 1usize..10, seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut gen = |l: usize| -> Vec<String> {
                (0..l).map(|_| format!("w{}", rng.random_range(0..4))).collect()
            };
            let (a, b) = (gen(la), gen(lb));
            let v = bleu(&a, &b);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
            if exact_match(&a, &b) == 1.0 {
                prop_assert!((v - 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn run_statistics() {
        assert_eq!(correct_runs(&[true, true, false, true, true]), vec![2, 2]);
        assert_eq!(correct_runs(&[false, false]), Vec::<usize>::new());
        assert_eq!(correct_runs(&[true; 5]), vec![5]);
        let r = AutocompleteResult::from_bits(
            vec![1],
            vec![vec![vec![true, true, false, true, true]]],
        );
        assert_eq!(r.longest[0][0], 2.0);
        assert_eq!(r.mean_run[0][0], 2.0);
        let r = AutocompleteResult::from_bits(vec![1], vec![vec![vec![true; 7]]]);
        assert_eq!(r.longest[0][0], 7.0);
        assert_eq!(r.mean_run[0][0], 7.0);
        let r = AutocompleteResult::from_bits(vec![1], vec![vec![vec![false; 4]]]);
        assert_eq!(r.longest[0][0], 0.0);
        assert_eq!(r.mean_run[0][0], 0.0);
        // Aggregates are means over examples.
        let r = AutocompleteResult::from_bits(
            vec![1],
            vec![vec![vec![true, true]], vec![vec![false, false]]],
        );
        assert_eq!(r.agg_longest[0], 1.0);
        assert_eq!(r.agg_mean_run[0], 1.0);
    }

    /// Candidates drawn uniformly at random, ignoring the input.
    struct RandomSystem {
        vocab_size: usize,
        seed: u64,
    }

    impl System for RandomSystem {
        fn name(&self) -> &str {
            "random"
        }
        fn predict(&self, _x: &Example) -> Result<Vec<String>, EvalError> {
            Ok(Vec::new())
        }
        fn candidate_lists(
            &self,
            x: &Example,
            gold: &[String],
            k_max: usize,
        ) -> Result<Vec<Vec<String>>, EvalError> {
            let mut rng = ChaCha12Rng::seed_from_u64(
                self.seed ^ x.id.bytes().fold(0u64, |a, b| a.wrapping_mul(31) + b as u64),
            );
            Ok((0..gold.len())
                .map(|_| {
                    (0..k_max)
                        .map(|_| format!("w{}", rng.random_range(0..self.vocab_size)))
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn random_system_completion_lengths_match_binomial_oracle() {
        // k=10 of V=1000 gives per-position hit rate ~0.01; the exact
        // longest-run distribution over 200 positions has mean 0.8857.
        let examples: Vec<Example> = (0..60)
            .map(|i| Example {
                id: format!("e{i}"),
                group_key: format!("e{i}"),
                input_fields: vec![("in".into(), t("q"))],
                output: (0..200).map(|j| format!("w{}", (i * 7 + j * 13) % 1000)).collect(),
            })
            .collect();
        let sys = RandomSystem {
            vocab_size: 1000,
            seed: 42,
        };
        let (report, auto) = evaluate_system(&sys, &examples, &[1, 5, 10]).unwrap();
        let longest_k10 = report.longest[2];
        assert!(
            (0.7..=1.1).contains(&longest_k10),
            "longest@10 {longest_k10} outside the oracle band"
        );
        assert!(longest_k10 / 200.0 < 0.05);
        assert!(report.avg[2] <= longest_k10 + 1e-12);
        // Monotone in k for every example.
        for ex in 0..auto.longest.len() {
            assert!(auto.longest[ex][0] <= auto.longest[ex][1]);
            assert!(auto.longest[ex][1] <= auto.longest[ex][2]);
            assert!(auto.mean_run[ex][0] <= auto.mean_run[ex][2] + 1e-12);
        }
    }

    /// Deterministic fake: correct whenever the gold token is in a fixed set.
    struct OracleSystem {
        known: Vec<String>,
    }

    impl System for OracleSystem {
        fn name(&self) -> &str {
            "oracle"
        }
        fn predict(&self, x: &Example) -> Result<Vec<String>, EvalError> {
            Ok(x.output.clone())
        }
        fn candidate_lists(
            &self,
            _x: &Example,
            gold: &[String],
            _k_max: usize,
        ) -> Result<Vec<Vec<String>>, EvalError> {
            Ok(gold
                .iter()
                .map(|g| {
                    if self.known.contains(g) {
                        vec![g.clone()]
                    } else {
                        vec!["<wrong>".to_string()]
                    }
                })
                .collect())
        }
    }

    #[test]
    fn evaluate_system_aggregates() {
        let ex = Example {
            id: "a".into(),
            group_key: "a".into(),
            input_fields: vec![("in".into(), t("q"))],
            output: t("x y z y x"),
        };
        let sys = OracleSystem {
            known: vec!["x".into(), "y".into()],
        };
        // Bits: x y z y x -> 1 1 0 1 1: runs {2, 2}.
        let (report, auto) = evaluate_system(&sys, &[ex], &[1, 5, 10]).unwrap();
        assert_eq!(auto.bits[0][0], vec![true, true, false, true, true]);
        assert_eq!(report.longest, vec![2.0, 2.0, 2.0]);
        assert_eq!(report.avg, vec![2.0, 2.0, 2.0]);
        assert_eq!(report.bleu, 100.0);
        assert_eq!(report.exact_match, 1.0);
    }

    #[test]
    fn reports_serialize() {
        let reports = vec![
            EvalReport {
                system: "edit".into(),
                bleu: 41.25,
                exact_match: 0.125,
                longest: vec![1.0, 2.0, 2.5],
                avg: vec![0.75, 1.5, 2.0],
            },
            EvalReport {
                system: "seq2seq".into(),
                bleu: 20.0,
                exact_match: 0.0,
                longest: vec![0.5, 1.0, 1.25],
                avg: vec![0.25, 0.75, 1.0],
            },
        ];
        let csv = report_csv(&reports);
        assert_eq!(
            csv.lines().next().unwrap(),
            "system,bleu,exact_match,longest_k1,longest_k5,longest_k10,avg_k1,avg_k5,avg_k10"
        );
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "edit,41.25,0.125,1,2,2.5,0.75,1.5,2"
        );
        assert_eq!(csv.lines().count(), 3);

        let text = report_text(&reports);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.contains("  ")));

        let meta = ReportMeta::new(7, "cfg123".into(), "data456".into());
        let json = report_json(&reports, &[1, 5, 10], &meta);
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["metadata"]["seed"], 7);
        assert_eq!(parsed["metadata"]["config_hash"], "cfg123");
        assert_eq!(parsed["systems"][0]["system"], "edit");
        assert_eq!(parsed["systems"][1]["bleu"], 20.0);
        // Deterministic byte-for-byte.
        assert_eq!(json, report_json(&reports, &[1, 5, 10], &meta));
    }

    #[test]
    fn edit_and_retriever_systems_run_end_to_end() {
        use crate::corpus::build_vocabulary;
        use crate::editor::{train_editor_with_pairs, EditTrainConfig, EditorConfig};
        use crate::retriever::{build_exact_index, IndexEntry, RetrieverKind};

        let examples: Vec<Example> = (0..6)
            .map(|i| Example {
                id: format!("e{i}"),
                group_key: format!("g{i}"),
                input_fields: vec![("in".into(), t(&format!("make item {i}")))],
                output: t(&format!("item {i} done")),
            })
            .collect();
        let vocab = build_vocabulary(&examples, 1).unwrap();
        let pairs: Vec<Option<Example>> = examples
            .iter()
            .enumerate()
            .map(|(i, _)| Some(examples[(i + 1) % examples.len()].clone()))
            .collect();
        let net_cfg = EditorConfig {
            vocab_size: vocab.size(),
            num_copy_tokens: 8,
            embed_dim: 8,
            copy_dim: 4,
            hidden_dim: 8,
            enc_layers: 1,
            dec_layers: 1,
        };
        let cfg = EditTrainConfig {
            iterations: 3,
            batch_size: 2,
            seed: 0,
            ..EditTrainConfig::default()
        };
        let (editor, _) =
            train_editor_with_pairs(&examples, &vocab, &pairs, net_cfg, &cfg).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let net = crate::embednet::EmbedNet::build(
            crate::embednet::EmbedNetConfig {
                vocab_size: vocab.size(),
                field_names: vec!["in".into()],
                embed_dim: 8,
                hidden_dim: 8,
                latent_dim: 6,
                enc_layers: 1,
                dec_layers: 1,
                kappa: 100.0,
            },
            &mut rng,
        );
        let entries: Vec<IndexEntry> = examples
            .iter()
            .map(|ex| IndexEntry {
                id: ex.id.clone(),
                embedding: net.encode_example(&vocab, ex).unwrap().into_vec(),
            })
            .collect();
        let index = build_exact_index(&entries).unwrap();
        let retriever = Retriever::with_exact(RetrieverKind::Task, net, index);
        let ctx = RetrievalContext::new(&examples);

        let edit_sys = EditSystem {
            name: "retrieve-edit".into(),
            editor: &editor,
            vocab: &vocab,
            retrieval: Some((&retriever, &ctx)),
        };
        let seq_sys = EditSystem {
            name: "seq2seq".into(),
            editor: &editor,
            vocab: &vocab,
            retrieval: None,
        };
        let ret_sys = RetrieverOnlySystem {
            name: "retriever-only".into(),
            vocab: &vocab,
            retriever: &retriever,
            ctx: &ctx,
        };
        let reports =
            evaluate_systems(&[&edit_sys, &seq_sys, &ret_sys], &examples, &[1, 5, 10]).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert!((0.0..=100.0).contains(&r.bleu));
            assert!((0.0..=1.0).contains(&r.exact_match));
            assert!(r.longest[0] <= r.longest[2] + 1e-12);
        }
        // Retriever-only on a training input returns that example verbatim.
        let (hit, _) = retriever.retrieve(&ctx, &vocab, &examples[2], None).unwrap();
        assert_eq!(hit.id, "e2");
        let pred = ret_sys.predict(&examples[2]).unwrap();
        assert_eq!(pred, examples[2].output);
    }
}
