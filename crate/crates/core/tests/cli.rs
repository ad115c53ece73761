//! End-to-end checks of the command-line binary: exit codes, per-stage
//! ingest counts against an independent recount, and completion modes.

use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use retedit::corpus::{load_jsonl, save_jsonl, Example};
use retedit::synth::standard_corpus;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retedit"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success for {args:?}: stderr={}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn micro_args(dir: &Path) -> Vec<String> {
    let mut args = Vec::new();
    let dir = dir.to_string_lossy();
    for kv in [
        format!("data_dir={dir}"),
        "template_count=12".into(),
        "instances_per_template=3".into(),
        "latent_dim=8".into(),
        "embed_dim=8".into(),
        "hidden_dim=8".into(),
        "copy_dim=4".into(),
        "num_copy_tokens=32".into(),
        "retriever_iterations=3".into(),
        "editor_iterations=3".into(),
        "batch_size=4".into(),
        "num_trees=2".into(),
        "beam_width=2".into(),
    ] {
        args.push("--set".to_string());
        args.push(kv);
    }
    args
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let data = format!("data_dir={}", dir.path().to_string_lossy());

    // Missing prerequisite: exit 3, message names the stage to run.
    let out = bin()
        .args(["evaluate", "--set", &data])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ingest"), "stderr: {stderr}");

    let out = bin()
        .args(["train-editor", "--set", &data])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Usage errors: exit 2.
    let out = bin()
        .args(["synth", "--set", "bogus_key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["synth", "--set", "batch_size=0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn content_key(ex: &Example) -> String {
    let mut key = String::new();
    for (name, toks) in &ex.input_fields {
        key.push_str(name);
        key.push('\u{1}');
        key.push_str(&toks.join("\u{2}"));
        key.push('\u{3}');
    }
    key.push('\u{4}');
    key.push_str(&ex.output.join("\u{2}"));
    key
}

#[test]
fn ingest_prints_counts_matching_an_independent_recount() {
    let dir = tempfile::tempdir().unwrap();
    let raw_path = dir.path().join("raw_input.jsonl");

    let mut corpus = standard_corpus(100, 10, 7);
    // One overlong record (filtered) and one content duplicate (deduped).
    let mut long = corpus[0].clone();
    long.id = "long_0".into();
    long.output = vec!["tok".to_string(); 200];
    let mut dup = corpus[1].clone();
    dup.id = "dup_0".into();
    dup.group_key = "dup_group".into();
    corpus.push(long);
    corpus.push(dup);
    save_jsonl(&raw_path, &corpus).unwrap();

    // Independent recount of every stage.
    let expect_loaded = corpus.len();
    let kept: Vec<&Example> = corpus.iter().filter(|ex| ex.output.len() <= 160).collect();
    let expect_filtered = kept.len();
    let mut seen = HashSet::new();
    let expect_deduped = kept
        .iter()
        .filter(|ex| seen.insert(content_key(ex)))
        .count();
    assert_eq!(expect_loaded, 1002);
    assert_eq!(expect_filtered, 1001);
    // At least the planted duplicate goes; slot collisions may add more.
    assert!(expect_deduped <= expect_filtered - 1);

    let data = format!("data_dir={}", dir.path().to_string_lossy());
    let out = run_ok(&[
        "ingest",
        "--set",
        &data,
        "--raw",
        raw_path.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let count = |label: &str| -> usize {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{label} ")))
            .unwrap_or_else(|| panic!("no `{label}` line in: {stdout}"))
            .parse()
            .unwrap()
    };
    assert_eq!(count("loaded"), expect_loaded);
    assert_eq!(count("length-filtered"), expect_filtered);
    assert_eq!(count("deduplicated"), expect_deduped);
    assert_eq!(
        count("train") + count("validation") + count("test"),
        expect_deduped
    );

    // Groups never straddle splits.
    let groups = |name: &str| -> HashSet<String> {
        load_jsonl(&dir.path().join(format!("{name}.jsonl")))
            .unwrap()
            .into_iter()
            .map(|ex| ex.group_key)
            .collect()
    };
    let (tr, va, te) = (groups("train"), groups("validation"), groups("test"));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));

    // The ingest record embeds the configuration hash.
    let meta = std::fs::read_to_string(dir.path().join("ingest.meta")).unwrap();
    let hash_line = meta
        .lines()
        .find(|l| l.starts_with("config_hash"))
        .expect("config_hash in ingest.meta");
    let hash = hash_line.split('=').nth(1).unwrap().trim();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn complete_retrieves_self_only_outside_train_mode() {
    let dir = tempfile::tempdir().unwrap();
    let args = micro_args(dir.path());
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    for stage in ["synth", "ingest", "train-retriever", "build-index", "train-editor"] {
        let mut full = vec![stage];
        full.extend(&argrefs);
        run_ok(&full);
    }
    let train = load_jsonl(&dir.path().join("train.jsonl")).unwrap();

    let mut full = vec!["complete", "--split", "train", "--index", "0", "--train-mode"];
    full.extend(&argrefs);
    let out = run_ok(&full);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let header = stdout.lines().next().unwrap();
    assert!(header.starts_with(&format!("input {} retrieved ", train[0].id)));
    assert!(!header.contains(&format!("retrieved {} ", train[0].id)));

    let mut full = vec!["complete", "--split", "train", "--index", "0"];
    full.extend(&argrefs);
    let out = run_ok(&full);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let header = stdout.lines().next().unwrap();
    assert!(
        header.starts_with(&format!("input {id} retrieved {id} ", id = train[0].id)),
        "header: {header}"
    );
    let distance: f64 = header.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(distance <= 1e-6, "self distance {distance}");
}
