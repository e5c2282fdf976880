//! Seeded synthetic corpora in the shared JSONL schema.
//!
//! Each dataset pairs a premise with a hypothesis whose first word is a
//! label cue ("certainly" for yes, "never" for no, "possibly" for the
//! 3-class neutral rows), so the tasks are learnable at toy scale. OOD
//! splits keep the cue structure but swap the content vocabulary, and their
//! hypotheses lexically overlap the premise regardless of label.
//!
//! Sentence lengths are budgeted against the model family's context window:
//! short-sentence datasets always fit a 32-example teacher prompt, while the
//! long-sentence dataset always exceeds the window at 32 contexts (and still
//! fits at 16) — so the infeasible cell of the run matrix is structural, not
//! tuned.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::seeds::derive_seed;
use crate::text::{PatternSpec, Role, TaskKind, Vocabulary};

use super::{uniform_below, DataError, Manifest, ManifestTask, RawRecord, Result, MANIFEST_VERSION};

pub const DEFAULT_CORPUS_SEED: u64 = 1729;

pub const CUE_YES: &str = "certainly";
pub const CUE_NO: &str = "never";
pub const CUE_NEUTRAL: &str = "possibly";

const NLI_POOL_IN: &[&str] = &[
    "the", "a", "dog", "cat", "bird", "horse", "man", "woman", "child", "park", "garden",
    "house", "river", "bridge", "walks", "runs", "sees", "holds", "finds", "crosses", "near",
    "under", "beside", "small", "large", "quiet",
];

const NLI_POOL_OOD: &[&str] = &[
    "the", "a", "doctor", "lawyer", "artist", "teacher", "student", "library", "museum",
    "street", "city", "train", "market", "reads", "writes", "paints", "teaches", "visits",
    "leaves", "behind", "around", "inside", "busy", "old", "new", "bright",
];

const QQP_STARTERS: &[&str] = &["how", "what", "why", "where"];

const QQP_POOL_IN: &[&str] = &[
    "best", "way", "learn", "cook", "rice", "train", "puppy", "start", "running", "improve",
    "memory", "fastest", "method", "clean", "windows", "grow", "tomatoes", "save", "money",
    "study", "math", "quickly",
];

const QQP_POOL_OOD: &[&str] = &[
    "route", "reaches", "airport", "quickest", "juggling", "helps", "focus", "repair",
    "bicycle", "brakes", "safely", "plant", "roses", "winter", "violin", "adults", "budget",
    "meals", "weekly", "sketch", "portraits", "evenings",
];

/// Word-count ranges per sentence. Short sentences keep every 32-context
/// prompt inside the window; long ones push every 32-context prompt out.
const SHORT_LEN: (usize, usize) = (4, 6);
const LONG_LEN: (usize, usize) = (12, 16);

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[uniform_below(rng, pool.len())]
}

fn sentence(rng: &mut ChaCha8Rng, pool: &[&str], len: (usize, usize)) -> String {
    let n = len.0 + uniform_below(rng, len.1 - len.0 + 1);
    let words: Vec<&str> = (0..n).map(|_| pick(rng, pool)).collect();
    words.join(" ")
}

fn question(rng: &mut ChaCha8Rng, pool: &[&str], len: (usize, usize)) -> String {
    let n = len.0 + uniform_below(rng, len.1 - len.0 + 1);
    let mut words: Vec<String> = vec![pick(rng, QQP_STARTERS).to_string()];
    for _ in 1..n {
        words.push(pick(rng, pool).to_string());
    }
    let last = words.last_mut().expect("n >= 1");
    last.push('?');
    words.join(" ")
}

/// Hypothesis with the cue word first. `overlap` draws content words from the
/// premise (lexical-overlap structure); otherwise they come from the pool.
fn hypothesis(
    rng: &mut ChaCha8Rng,
    cue: &str,
    premise: &str,
    pool: &[&str],
    len: (usize, usize),
    overlap: bool,
) -> String {
    let n = len.0 + uniform_below(rng, len.1 - len.0 + 1);
    let premise_words: Vec<&str> = premise.split_whitespace().collect();
    let mut words: Vec<String> = vec![cue.to_string()];
    for _ in 1..n {
        let w = if overlap {
            premise_words[uniform_below(rng, premise_words.len())]
        } else {
            pick(rng, pool)
        };
        words.push(w.trim_end_matches('?').to_string());
    }
    words.join(" ")
}

struct SplitPlan {
    dataset: &'static str,
    file: &'static str,
    count: usize,
    /// 3-class labels (entailment/neutral/contradiction) instead of yes/no.
    three_class: bool,
    questions: bool,
    len: (usize, usize),
    pool: &'static [&'static str],
    /// OOD-style: hypotheses overlap the premise for every label.
    always_overlap: bool,
}

const PLANS: &[SplitPlan] = &[
    SplitPlan {
        dataset: "mnli",
        file: "raw/mnli_train.jsonl",
        count: 400,
        three_class: true,
        questions: false,
        len: SHORT_LEN,
        pool: NLI_POOL_IN,
        always_overlap: false,
    },
    SplitPlan {
        dataset: "mnli",
        file: "raw/mnli_validation.jsonl",
        count: 300,
        three_class: true,
        questions: false,
        len: SHORT_LEN,
        pool: NLI_POOL_IN,
        always_overlap: false,
    },
    SplitPlan {
        dataset: "rte",
        file: "raw/rte_train.jsonl",
        count: 220,
        three_class: false,
        questions: false,
        len: LONG_LEN,
        pool: NLI_POOL_IN,
        always_overlap: false,
    },
    SplitPlan {
        dataset: "rte",
        file: "raw/rte_validation.jsonl",
        count: 150,
        three_class: false,
        questions: false,
        len: LONG_LEN,
        pool: NLI_POOL_IN,
        always_overlap: false,
    },
    SplitPlan {
        dataset: "qqp",
        file: "raw/qqp_train.jsonl",
        count: 400,
        three_class: false,
        questions: true,
        len: SHORT_LEN,
        pool: QQP_POOL_IN,
        always_overlap: false,
    },
    SplitPlan {
        dataset: "qqp",
        file: "raw/qqp_validation.jsonl",
        count: 150,
        three_class: false,
        questions: true,
        len: SHORT_LEN,
        pool: QQP_POOL_IN,
        always_overlap: false,
    },
    SplitPlan {
        dataset: "hans-lexical-overlap",
        file: "raw/hans_lexical_overlap.jsonl",
        count: 150,
        three_class: false,
        questions: false,
        len: SHORT_LEN,
        pool: NLI_POOL_OOD,
        always_overlap: true,
    },
    SplitPlan {
        dataset: "paws-qqp",
        file: "raw/paws_qqp.jsonl",
        count: 150,
        three_class: false,
        questions: true,
        len: SHORT_LEN,
        pool: QQP_POOL_OOD,
        always_overlap: true,
    },
];

fn generate_split(plan: &SplitPlan, seed: u64) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_tag = if plan.file.contains("train") { "train" } else { "val" };
    (0..plan.count)
        .map(|i| {
            let premise = if plan.questions {
                question(&mut rng, plan.pool, plan.len)
            } else {
                sentence(&mut rng, plan.pool, plan.len)
            };
            let (label, cue) = if plan.three_class {
                match uniform_below(&mut rng, 3) {
                    0 => ("entailment", CUE_YES),
                    1 => ("neutral", CUE_NEUTRAL),
                    _ => ("contradiction", CUE_NO),
                }
            } else if uniform_below(&mut rng, 2) == 0 {
                ("yes", CUE_YES)
            } else {
                ("no", CUE_NO)
            };
            // Yes rows overlap their premise, no rows draw fresh words —
            // except OOD splits, where overlap is label-independent.
            let overlap = plan.always_overlap || cue == CUE_YES;
            let mut hyp =
                hypothesis(&mut rng, cue, &premise, plan.pool, plan.len, overlap);
            if plan.questions {
                hyp.push('?');
            }
            RawRecord {
                uid: format!("{}-{split_tag}-{i:04}", plan.dataset),
                premise,
                hypothesis: hyp,
                label: label.to_string(),
            }
        })
        .collect()
}

/// Everything the data directory holds, generated in memory.
pub struct GeneratedCorpora {
    /// Relative path -> JSONL contents.
    pub files: BTreeMap<String, String>,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
}

pub fn generate(seed: u64) -> GeneratedCorpora {
    let mut files = BTreeMap::new();
    let mut all_records: Vec<RawRecord> = Vec::new();
    for (i, plan) in PLANS.iter().enumerate() {
        let records = generate_split(plan, derive_seed(seed, i as u64));
        let mut out = String::new();
        for r in &records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        files.insert(plan.file.to_string(), out);
        all_records.extend(records);
    }

    // Vocabulary covers every instruction, the example scaffold, and every
    // corpus word, in a fixed traversal order.
    let mut texts: Vec<String> = Vec::new();
    for task in [TaskKind::Nli, TaskKind::Paraphrase] {
        for role in [Role::Teacher, Role::Student] {
            texts.push(PatternSpec::new(task, role).instruction());
        }
    }
    texts.push("Premise: Hypothesis: Label:".to_string());
    for r in &all_records {
        texts.push(format!("{} {}", r.premise, r.hypothesis));
    }
    let vocab = Vocabulary::build(texts.iter().map(|s| s.as_str()));

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        vocab: "vocab.txt".into(),
        tasks: vec![
            ManifestTask {
                name: "mnli".into(),
                kind: TaskKind::Nli,
                binarize: true,
                train: "raw/mnli_train.jsonl".into(),
                in_domain_validation: "raw/mnli_validation.jsonl".into(),
                ood_validation: "raw/hans_lexical_overlap.jsonl".into(),
            },
            ManifestTask {
                name: "rte".into(),
                kind: TaskKind::Nli,
                binarize: false,
                train: "raw/rte_train.jsonl".into(),
                in_domain_validation: "raw/rte_validation.jsonl".into(),
                ood_validation: "raw/hans_lexical_overlap.jsonl".into(),
            },
            ManifestTask {
                name: "qqp".into(),
                kind: TaskKind::Paraphrase,
                binarize: false,
                train: "raw/qqp_train.jsonl".into(),
                in_domain_validation: "raw/qqp_validation.jsonl".into(),
                ood_validation: "raw/paws_qqp.jsonl".into(),
            },
        ],
    };

    GeneratedCorpora { files, manifest, vocab }
}

/// Writes `raw/*.jsonl`, `manifest.json`, and `vocab.txt` under `dir`.
pub fn write_corpora(dir: &Path, seed: u64) -> Result<GeneratedCorpora> {
    let gen = generate(seed);
    let io_err = |path: &Path, source: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw_dir = dir.join("raw");
    std::fs::create_dir_all(&raw_dir).map_err(|e| io_err(&raw_dir, e))?;
    for (rel, contents) in &gen.files {
        let path = dir.join(rel);
        std::fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
    }
    gen.manifest.save(&dir.join("manifest.json"))?;
    gen.vocab
        .save(&dir.join("vocab.txt"))
        .map_err(|e| DataError::Manifest(format!("vocab save failed: {e}")))?;
    Ok(gen)
}
