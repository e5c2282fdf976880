//! Dataset ingestion, label binarization, and the sampling protocol.
//!
//! All sampling is without replacement, uid-addressed, and pure given
//! (split, seed): context sets, inference requests, and eval samples are
//! reproducible byte-for-byte. The inference/context disjointness guarantee
//! is enforced here at sampling time and re-asserted by the trainer.

pub mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::derive_seed;
use crate::text::TaskKind;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("{path}:{line}: duplicate uid '{uid}'")]
    DuplicateUid { path: String, line: usize, uid: String },
    #[error("{path}:{line}: unknown label '{label}'")]
    UnknownLabel { path: String, line: usize, label: String },
    #[error("split '{split}' too small: need {needed} examples for {what}, have {have}")]
    SplitTooSmall { split: String, needed: usize, have: usize, what: String },
    #[error("split role violation: {0}")]
    RoleViolation(String),
    #[error("invalid task spec: {0}")]
    TaskSpec(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Binary label after relabeling. Every dataset is reduced to this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn is_yes(self) -> bool {
        matches!(self, Label::Yes)
    }
}

/// One premise/hypothesis (or question pair) with its binary label — the atom
/// every sampling operation works over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub uid: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    InDomainValidation,
    OodValidation,
}

impl SplitRole {
    pub fn is_validation(self) -> bool {
        matches!(self, SplitRole::InDomainValidation | SplitRole::OodValidation)
    }
}

/// A named, role-tagged list of examples with unique uids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub role: SplitRole,
    pub examples: Vec<LabeledExample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Pre-binarization record: label is free text, fields already validated
/// non-empty and uid-unique.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub uid: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct RawSplit {
    pub name: String,
    pub role: SplitRole,
    pub records: Vec<RawRecord>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(raw.lines().map(str::to_string).collect())
}

fn parse_records(path: &Path, lines: &[String]) -> Result<Vec<RawRecord>> {
    let path_s = path.display().to_string();
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            path: path_s.clone(),
            line: lineno,
            detail: e.to_string(),
        })?;
        for (field, value) in
            [("uid", &rec.uid), ("premise", &rec.premise), ("hypothesis", &rec.hypothesis)]
        {
            if value.trim().is_empty() {
                return Err(DataError::Parse {
                    path: path_s.clone(),
                    line: lineno,
                    detail: format!("empty field '{field}'"),
                });
            }
        }
        if !seen.insert(rec.uid.clone()) {
            return Err(DataError::DuplicateUid { path: path_s, line: lineno, uid: rec.uid });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Loads a JSONL split whose labels are already binary yes/no.
pub fn load_split(path: &Path, name: &str, role: SplitRole) -> Result<DatasetSplit> {
    let lines = read_lines(path)?;
    let records = parse_records(path, &lines)?;
    let path_s = path.display().to_string();
    let mut examples = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let label = match rec.label.as_str() {
            "yes" => Label::Yes,
            "no" => Label::No,
            other => {
                return Err(DataError::UnknownLabel {
                    path: path_s,
                    line: i + 1,
                    label: other.to_string(),
                })
            }
        };
        examples.push(LabeledExample {
            uid: rec.uid,
            premise: rec.premise,
            hypothesis: rec.hypothesis,
            label,
        });
    }
    Ok(DatasetSplit { name: name.to_string(), role, examples })
}

/// Loads a JSONL split without interpreting labels (pre-binarization path).
pub fn load_raw_split(path: &Path, name: &str, role: SplitRole) -> Result<RawSplit> {
    let lines = read_lines(path)?;
    let records = parse_records(path, &lines)?;
    Ok(RawSplit { name: name.to_string(), role, records })
}

/// Binarization result; `dropped_neutral` lets callers surface a warning when
/// a split loses rows (or empties entirely).
#[derive(Debug, Clone)]
pub struct BinarizeOutcome {
    pub split: DatasetSplit,
    pub dropped_neutral: usize,
}

/// Three-class to binary relabeling: entailment examples become yes,
/// contradictions become no, neutral rows are dropped, survivor order is
/// preserved. Already-binary labels pass through, which makes the operation
/// idempotent.
pub fn binarize_mnli(raw: &RawSplit) -> Result<BinarizeOutcome> {
    let mut examples = Vec::with_capacity(raw.records.len());
    let mut dropped = 0usize;
    for (i, rec) in raw.records.iter().enumerate() {
        let label = match rec.label.as_str() {
            "entailment" | "yes" => Label::Yes,
            "contradiction" | "no" => Label::No,
            "neutral" => {
                dropped += 1;
                continue;
            }
            other => {
                return Err(DataError::UnknownLabel {
                    path: raw.name.clone(),
                    line: i + 1,
                    label: other.to_string(),
                })
            }
        };
        examples.push(LabeledExample {
            uid: rec.uid.clone(),
            premise: rec.premise.clone(),
            hypothesis: rec.hypothesis.clone(),
            label,
        });
    }
    Ok(BinarizeOutcome {
        split: DatasetSplit { name: raw.name.clone(), role: raw.role, examples },
        dropped_neutral: dropped,
    })
}

/// One task's dataset wiring: which in-domain and OOD datasets pair up. The
/// pairing is fixed — NLI tasks validate OOD on the lexical-overlap set,
/// the paraphrase task on its adversarial counterpart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub in_domain: String,
    pub ood: String,
}

pub const OOD_NLI: &str = "hans-lexical-overlap";
pub const OOD_PARAPHRASE: &str = "paws-qqp";

impl TaskSpec {
    pub fn mnli() -> Self {
        TaskSpec {
            name: "mnli".into(),
            kind: TaskKind::Nli,
            in_domain: "mnli".into(),
            ood: OOD_NLI.into(),
        }
    }

    pub fn rte() -> Self {
        TaskSpec {
            name: "rte".into(),
            kind: TaskKind::Nli,
            in_domain: "rte".into(),
            ood: OOD_NLI.into(),
        }
    }

    pub fn qqp() -> Self {
        TaskSpec {
            name: "qqp".into(),
            kind: TaskKind::Paraphrase,
            in_domain: "qqp".into(),
            ood: OOD_PARAPHRASE.into(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mnli" => Ok(Self::mnli()),
            "rte" => Ok(Self::rte()),
            "qqp" => Ok(Self::qqp()),
            other => Err(DataError::TaskSpec(format!("unknown task '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::Nli => {
                (self.in_domain == "mnli" || self.in_domain == "rte") && self.ood == OOD_NLI
            }
            TaskKind::Paraphrase => self.in_domain == "qqp" && self.ood == OOD_PARAPHRASE,
        };
        if ok {
            Ok(())
        } else {
            Err(DataError::TaskSpec(format!(
                "kind {:?} incompatible with in_domain '{}' / ood '{}'",
                self.kind, self.in_domain, self.ood
            )))
        }
    }
}

/// One of the four sampled context-example sets for a given n.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextSet {
    pub n: usize,
    pub set_index: usize,
    /// The derived seed this set was drawn with.
    pub seed: u64,
    pub examples: Vec<LabeledExample>,
}

impl ContextSet {
    pub fn uids(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.uid.as_str()).collect()
    }

    fn uid_key(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.examples.iter().map(|e| e.uid.as_str()).collect();
        v.sort_unstable();
        v
    }
}

/// Unbiased bounded draw (rejection sampling over the top of the u64 range),
/// hand-rolled so sampled indices never depend on a rand-crate algorithm.
fn uniform_below(rng: &mut ChaCha8Rng, bound: usize) -> usize {
    debug_assert!(bound > 0);
    let bound = bound as u64;
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let r = rng.next_u64();
        if r >= threshold {
            return (r % bound) as usize;
        }
    }
}

/// Partial Fisher-Yates: the first `count` entries of a seeded shuffle.
fn draw_indices(pool_len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(count <= pool_len);
    let mut idx: Vec<usize> = (0..pool_len).collect();
    for i in 0..count {
        let j = i + uniform_below(rng, pool_len - i);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

pub const CONTEXT_SETS_PER_N: usize = 4;

/// Draws the four context sets for one n. Each set holds n distinct-uid
/// examples; the four sets are pairwise non-identical (they may overlap).
/// A colliding redraw gets a fresh derived seed, so the output is still a
/// pure function of (split, n, seed).
pub fn sample_context_sets(
    split: &DatasetSplit,
    n: usize,
    seed: u64,
) -> Result<Vec<ContextSet>> {
    if n == 0 {
        return Err(DataError::Sampling("context size n must be positive".into()));
    }
    if split.role != SplitRole::Train {
        return Err(DataError::RoleViolation(format!(
            "context sets must come from a train split, got {:?} ('{}')",
            split.role, split.name
        )));
    }
    let needed = CONTEXT_SETS_PER_N * n;
    if split.len() < needed {
        return Err(DataError::SplitTooSmall {
            split: split.name.clone(),
            needed,
            have: split.len(),
            what: format!("{CONTEXT_SETS_PER_N} context sets of {n}"),
        });
    }
    let mut sets: Vec<ContextSet> = Vec::with_capacity(CONTEXT_SETS_PER_N);
    // Streams 0..3 are first draws; redraws continue upward in steps of 4.
    const MAX_ATTEMPTS: u64 = 64;
    for set_index in 0..CONTEXT_SETS_PER_N {
        let mut attempt = 0u64;
        let set = loop {
            let stream = attempt * CONTEXT_SETS_PER_N as u64 + set_index as u64;
            let set_seed = derive_seed(seed, stream);
            let mut rng = ChaCha8Rng::seed_from_u64(set_seed);
            let examples: Vec<LabeledExample> = draw_indices(split.len(), n, &mut rng)
                .into_iter()
                .map(|i| split.examples[i].clone())
                .collect();
            let candidate = ContextSet { n, set_index, seed: set_seed, examples };
            if !sets.iter().any(|s| s.uid_key() == candidate.uid_key()) {
                break candidate;
            }
            attempt += 1;
            if attempt >= MAX_ATTEMPTS {
                return Err(DataError::Sampling(format!(
                    "could not draw 4 distinct context sets of {n} from '{}' after {MAX_ATTEMPTS} attempts",
                    split.name
                )));
            }
        };
        sets.push(set);
    }
    Ok(sets)
}

pub const INFERENCE_REQUEST_COUNT: usize = 32;

/// Draws `count` training examples disjoint (by uid) from every provided
/// context set — the examples the student is actually fine-tuned on.
pub fn sample_inference_requests(
    split: &DatasetSplit,
    context_sets: &[ContextSet],
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if split.role != SplitRole::Train {
        return Err(DataError::RoleViolation(format!(
            "inference requests must come from a train split, got {:?} ('{}')",
            split.role, split.name
        )));
    }
    let excluded: BTreeSet<&str> =
        context_sets.iter().flat_map(|s| s.examples.iter()).map(|e| e.uid.as_str()).collect();
    let pool: Vec<&LabeledExample> =
        split.examples.iter().filter(|e| !excluded.contains(e.uid.as_str())).collect();
    if pool.len() < count {
        return Err(DataError::SplitTooSmall {
            split: split.name.clone(),
            needed: count + excluded.len(),
            have: split.len(),
            what: format!("{count} inference requests disjoint from {} context uids", excluded.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_indices(pool.len(), count, &mut rng).into_iter().map(|i| pool[i].clone()).collect())
}

pub const EVAL_SAMPLE_COUNT: usize = 100;

/// Draws the evaluation sample from a validation split.
pub fn sample_eval(split: &DatasetSplit, count: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if !split.role.is_validation() {
        return Err(DataError::RoleViolation(format!(
            "eval samples must come from a validation split, got {:?} ('{}')",
            split.role, split.name
        )));
    }
    if split.len() < count {
        return Err(DataError::SplitTooSmall {
            split: split.name.clone(),
            needed: count,
            have: split.len(),
            what: format!("{count} eval examples"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_indices(split.len(), count, &mut rng)
        .into_iter()
        .map(|i| split.examples[i].clone())
        .collect())
}

/// Manifest schema (v1): task names to split files, plus the shared
/// vocabulary, all relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab: String,
    pub tasks: Vec<ManifestTask>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub kind: TaskKind,
    /// Whether the in-domain splits carry 3-class labels that need
    /// binarization at load time.
    pub binarize: bool,
    pub train: String,
    pub in_domain_validation: String,
    pub ood_validation: String,
}

pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        let m: Manifest =
            serde_json::from_str(&raw).map_err(|e| DataError::Manifest(e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        for t in &m.tasks {
            TaskSpec::by_name(&t.name)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(path, json)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn task(&self, name: &str) -> Result<&ManifestTask> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| DataError::Manifest(format!("task '{name}' not in manifest")))
    }
}

/// A task's three splits, loaded and label-normalized.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: DatasetSplit,
    pub in_domain_validation: DatasetSplit,
    pub ood_validation: DatasetSplit,
    /// Neutral rows dropped during binarization (train, validation).
    pub dropped_neutral: (usize, usize),
}

/// Loads one task per the manifest. `base_dir` is the manifest's directory.
pub fn load_task(manifest: &Manifest, base_dir: &Path, name: &str) -> Result<TaskData> {
    let entry = manifest.task(name)?;
    let spec = TaskSpec::by_name(&entry.name)?;
    spec.validate()?;
    let mut dropped = (0usize, 0usize);
    let load_in_domain = |rel: &str, split_name: &str, role: SplitRole, drop_slot: &mut usize| {
        let path = base_dir.join(rel);
        if entry.binarize {
            let raw = load_raw_split(&path, split_name, role)?;
            let out = binarize_mnli(&raw)?;
            *drop_slot = out.dropped_neutral;
            Ok(out.split)
        } else {
            load_split(&path, split_name, role)
        }
    };
    let train = load_in_domain(&entry.train, &spec.in_domain, SplitRole::Train, &mut dropped.0)?;
    let in_domain_validation = load_in_domain(
        &entry.in_domain_validation,
        &spec.in_domain,
        SplitRole::InDomainValidation,
        &mut dropped.1,
    )?;
    let ood_validation =
        load_split(&base_dir.join(&entry.ood_validation), &spec.ood, SplitRole::OodValidation)?;
    Ok(TaskData { spec, train, in_domain_validation, ood_validation, dropped_neutral: dropped })
}
