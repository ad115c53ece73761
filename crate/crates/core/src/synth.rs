//! Synthetic corpora with known structure.
//!
//! The standard corpus pairs a one-line description with a short code
//! snippet. A template fixes a code skeleton and an operation; every
//! instance fills name, argument, and constant slots from shared pools.
//! Instances of one template differ in at most five output positions
//! (two name words, the argument in up to two places, one constant),
//! while changing the operation alone moves six (two symbol and four
//! word occurrences) and changing the skeleton at least six. Output
//! nearest neighbors therefore recover template identity — the property
//! that makes retrieval useful — and neighbor pairs exercise exactly
//! the slot substitutions an editor must learn to apply.
//!
//! The decoy corpus makes bag-of-words retrieval fail on purpose: each
//! template pair shares an identical description token multiset and
//! differs only in the order of two marker words, while the twins' outputs
//! use different skeletons. Order-blind similarity cannot separate twins;
//! an order-aware encoder can.

use crate::corpus::Example;
use crate::pipeline::stream_rng;
use rand::Rng;

pub const MAX_STANDARD_TEMPLATES: usize = SKELETONS.len() * OPS.len();
pub const MAX_DECOY_TEMPLATES: usize = 120;

const VERBS: [&str; 20] = [
    "parse", "build", "merge", "scan", "fold", "trim", "rank", "join", "split", "probe",
    "shift", "blend", "stack", "clamp", "score", "patch", "route", "weigh", "group", "tally",
];
const NOUNS: [&str; 20] = [
    "config", "matrix", "buffer", "stream", "record", "bundle", "ledger", "packet", "window",
    "column", "cursor", "digest", "anchor", "volume", "marker", "socket", "fabric", "tunnel",
    "beacon", "sample",
];
const ARGS: [&str; 25] = [
    "items", "count", "total", "width", "depth", "limit", "vals", "seq", "data", "node",
    "edge", "key", "row", "cell", "rate", "mass", "span", "tick", "heap", "pool",
    "left", "right", "base", "step", "size",
];
const CONSTS: [&str; 25] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "12", "16", "20", "24", "32",
    "40", "48", "64", "100", "128", "200", "256", "500", "1000",
];
const OPS: [(&str, &str); 12] = [
    ("+", "sum"),
    ("-", "difference"),
    ("*", "product"),
    ("/", "quotient"),
    ("%", "remainder"),
    ("^", "power"),
    ("&", "conjunction"),
    ("|", "disjunction"),
    ("<", "minimum"),
    (">", "maximum"),
    ("=", "match"),
    ("@", "pairing"),
];

/// Code/description skeleton pair. Placeholders: `N1 N2` name words,
/// `A` argument slot, `C` constant slot, `S` operator symbol, `W` operator
/// word. Each code skeleton uses N1, N2, and C once, A at most twice, and
/// carries six operator tokens plus a two-word structure tag in its
/// comment, so within-template edits (at most five) stay strictly below
/// cross-template edits (at least six).
const SKELETONS: [(&str, &str); 18] = [
    (
        "write a function N1 N2 that returns the W of A and C",
        "def N1 N2 ( A ) : return A S C # direct value W W S W W",
    ),
    (
        "N1 N2 stores the W of A with C then returns it",
        "def N1 N2 ( A ) : out = A S C return out # local result W W S W W",
    ),
    (
        "make N1 N2 return the W of A and C when ready else nothing",
        "def N1 N2 ( A ) : if ready : return A S C return None # early branch W W S W W",
    ),
    (
        "N1 N2 walks A yielding the W of each item and C",
        "def N1 N2 ( A ) : for item in A : yield item S C # inner loop W W S W W",
    ),
    (
        "loop inside N1 N2 stepping until done then return the W of A and C",
        "def N1 N2 ( A ) : while busy : spin ( ) return A S C # wait cycle W W S W W",
    ),
    (
        "N1 N2 wraps the W of A and C in a boxed list",
        "def N1 N2 ( A ) : box = [ A S C ] return box # boxed list W W S W W",
    ),
    (
        "N1 N2 guards the W of A and C against errors",
        "def N1 N2 ( A ) : try : return A S C except : return zero # safe fallback W W S W W",
    ),
    (
        "N1 N2 validates its input and then returns the W of A and C",
        "def N1 N2 ( A ) : assert input is valid return A S C # checked entry W W S W W",
    ),
    (
        "N1 N2 prints the W of A and C to the console",
        "def N1 N2 ( A ) : print ( prefix , A S C ) return None # console echo W W S W W",
    ),
    (
        "N1 N2 builds a mapping from a tag to the W of A and C",
        "def N1 N2 ( A ) : return { tag : A S C } # mapping shape W W S W W",
    ),
    (
        "N1 N2 takes A and returns a closure computing the W over C",
        "def N1 N2 ( A ) : return lambda v : v S C # closure body W W S W W",
    ),
    (
        "N1 N2 opens A and returns the W of it and C",
        "def N1 N2 ( A ) : with A as fh : return fh S C # managed handle W W S W W",
    ),
    (
        "N1 N2 drops A and returns the W of C with one",
        "def N1 N2 ( A ) : del A return C S one # cleared slot W W S W W",
    ),
    (
        "N1 N2 raises an error carrying the W of A and C",
        "def N1 N2 ( A ) : raise ValueError ( A S C ) # raised alert W W S W W",
    ),
    (
        "N1 N2 writes the W of A and C into a global",
        "def N1 N2 ( A ) : global acc acc = A S C return acc # shared state W W S W W",
    ),
    (
        "N1 N2 returns a pair of the W of A and C plus nothing",
        "def N1 N2 ( A ) : return ( A S C , None ) # tuple shell W W S W W",
    ),
    (
        "N1 N2 resets a start to C before the W of it and A",
        "def N1 N2 ( A ) : start = C return start S A # seeded swap W W S W W",
    ),
    (
        "N1 N2 picks the W of A and C when ready or nothing",
        "def N1 N2 ( A ) : return A S C if ready else None # ternary pick W W S W W",
    ),
];

const MARKERS: [&str; 20] = [
    "north", "south", "east", "west", "amber", "azure", "coral", "ivory", "jade", "onyx",
    "pearl", "ruby", "sable", "topaz", "umber", "viridian", "sienna", "ochre", "slate", "teal",
];
const NOISE: [&str; 20] = [
    "kindly", "promptly", "carefully", "quietly", "roughly", "neatly", "swiftly", "firmly",
    "loosely", "boldly", "plainly", "subtly", "evenly", "oddly", "barely", "nearly",
    "mostly", "partly", "jointly", "solely",
];
const BOILERPLATE: [&str; 6] = ["please", "implement", "this", "small", "routine", "now"];

struct Fill<'a> {
    n1: &'a str,
    n2: &'a str,
    arg: &'a str,
    cnst: &'a str,
    op: (&'a str, &'a str),
}

fn fill(skeleton: &str, f: &Fill) -> Vec<String> {
    skeleton
        .split_whitespace()
        .map(|tok| {
            match tok {
                "N1" => f.n1,
                "N2" => f.n2,
                "A" => f.arg,
                "C" => f.cnst,
                "S" => f.op.0,
                "W" => f.op.1,
                other => other,
            }
            .to_string()
        })
        .collect()
}

/// The templated description→code corpus. Template `t` combines skeleton
/// `t % 18` with operation `t / 18`; `group_key` is the template label, so
/// a grouped split holds out whole templates. Name, argument, and constant
/// slots are drawn per instance, so nearest neighbors within a template
/// differ exactly in the slots an editor can read off the description.
pub fn standard_corpus(
    template_count: usize,
    instances_per_template: usize,
    seed: u64,
) -> Vec<Example> {
    assert!(
        (1..=MAX_STANDARD_TEMPLATES).contains(&template_count),
        "template_count must be in 1..={MAX_STANDARD_TEMPLATES}"
    );
    assert!(instances_per_template >= 1);
    let mut examples = Vec::with_capacity(template_count * instances_per_template);
    for t in 0..template_count {
        let (skel, op) = (t % SKELETONS.len(), t / SKELETONS.len());
        for m in 0..instances_per_template {
            let mut rng = stream_rng(seed, &format!("synth.std.t{t}.i{m}"));
            let f = Fill {
                n1: VERBS[rng.random_range(0..VERBS.len())],
                n2: NOUNS[rng.random_range(0..NOUNS.len())],
                arg: ARGS[rng.random_range(0..ARGS.len())],
                cnst: CONSTS[rng.random_range(0..CONSTS.len())],
                op: OPS[op],
            };
            examples.push(Example {
                id: format!("t{t:03}_i{m:02}"),
                group_key: format!("t{t:03}"),
                input_fields: vec![("desc".into(), fill(SKELETONS[skel].0, &f))],
                output: fill(SKELETONS[skel].1, &f),
            });
        }
    }
    examples
}

/// The order-only corpus. Templates come in twins: instance `m` of twin
/// `2p` and of twin `2p+1` share the exact same description token multiset
/// (marker order swapped) but different output skeletons. `group_key` is
/// the example id, so a grouped split is instance-level and every test
/// query has same-template training neighbors.
pub fn decoy_corpus(
    template_count: usize,
    instances_per_template: usize,
    seed: u64,
) -> Vec<Example> {
    assert!(
        (2..=MAX_DECOY_TEMPLATES).contains(&template_count) && template_count % 2 == 0,
        "template_count must be even and in 2..={MAX_DECOY_TEMPLATES}"
    );
    assert!(instances_per_template >= 1);
    let pairs = template_count / 2;
    let mut pair_rng = stream_rng(seed, "synth.decoy.pairs");
    let mut marker_pairs: Vec<(usize, usize)> = Vec::with_capacity(pairs);
    while marker_pairs.len() < pairs {
        let a = pair_rng.random_range(0..MARKERS.len());
        let b = pair_rng.random_range(0..MARKERS.len());
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if !marker_pairs.contains(&key) {
            marker_pairs.push(key);
        }
    }
    let mut examples = Vec::with_capacity(template_count * instances_per_template);
    for p in 0..pairs {
        let (ma, mb) = marker_pairs[p];
        for twin in 0..2 {
            let j = 2 * p + twin;
            let (skel, op) = ((2 * p + twin) % SKELETONS.len(), (p + 5 * twin) % OPS.len());
            let (n1, n2) = (VERBS[j % VERBS.len()], NOUNS[j / VERBS.len()]);
            let (first, second) = if twin == 0 {
                (MARKERS[ma], MARKERS[mb])
            } else {
                (MARKERS[mb], MARKERS[ma])
            };
            for m in 0..instances_per_template {
                // Twins share this stream so instance m gets identical
                // slot and noise words in both orders.
                let mut rng = stream_rng(seed, &format!("synth.decoy.p{p}.i{m}"));
                let arg = ARGS[rng.random_range(0..ARGS.len())];
                let cnst = CONSTS[rng.random_range(0..CONSTS.len())];
                let noise_a = NOISE[rng.random_range(0..NOISE.len())];
                let noise_b = NOISE[rng.random_range(0..NOISE.len())];
                let mut desc: Vec<String> =
                    BOILERPLATE.iter().map(|s| s.to_string()).collect();
                for w in [
                    first, "comes", "before", second, "using", arg, "with", cnst, noise_a,
                    noise_b,
                ] {
                    desc.push(w.to_string());
                }
                let f = Fill {
                    n1,
                    n2,
                    arg,
                    cnst,
                    op: OPS[op],
                };
                let id = format!("d{j:03}_i{m:02}");
                examples.push(Example {
                    id: id.clone(),
                    group_key: id,
                    input_fields: vec![("desc".into(), desc)],
                    output: fill(SKELETONS[skel].1, &f),
                });
            }
        }
    }
    examples
}

/// The template label encoded in a synthetic id (`t012_i03` → `t012`).
pub fn template_label(id: &str) -> &str {
    id.split('_').next().unwrap_or(id)
}
