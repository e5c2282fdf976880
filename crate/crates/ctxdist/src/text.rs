//! Tokenization and bit-exact prompt rendering.
//!
//! The tokenizer is word-level over whitespace: words keep their punctuation,
//! newlines are their own token, and "Yes"/"No" are reserved single tokens so
//! the position right after "Label:" always carries the whole label. Prompt
//! rendering is canonical — one exact byte sequence per (pattern, examples)
//! input — and pinned by golden files.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledExample;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("vocabulary io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary line {line} duplicates token '{token}'")]
    DuplicateToken { token: String, line: usize },
    #[error("vocabulary line {line} holds '{found}', expected reserved token '{want}'")]
    ReservedMismatch { line: usize, want: String, found: String },
    #[error("inference example '{uid}' appears in the context set")]
    Leakage { uid: String },
    #[error("prompt contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TextError>;

/// Reserved token ids. Everything after these is corpus order.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const NEWLINE: usize = 2;
pub const YES: usize = 3;
pub const NO: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "\n", "Yes", "No"];

/// Word-level vocabulary. Immutable once built; encoding is pure.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an iterator of corpus strings. Reserved tokens first, then
    /// every new word in first-encounter order, so the same corpus sequence
    /// always yields the same id assignment.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.intern(t);
        }
        for text in texts {
            for line in text.split('\n') {
                for word in line.split_whitespace() {
                    v.intern(word);
                }
            }
        }
        v
    }

    fn intern(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Words become ids (unknown words become [`UNK`]), newlines become
    /// [`NEWLINE`]. The empty string encodes to an empty sequence.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                ids.push(NEWLINE);
            }
            for word in line.split_whitespace() {
                ids.push(self.index.get(word).copied().unwrap_or(UNK));
            }
        }
        ids
    }

    /// Inverse of [`Self::encode`] for corpus text: words joined by single
    /// spaces, newline tokens emitted bare.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut need_space = false;
        for &id in ids {
            if id == NEWLINE {
                out.push('\n');
                need_space = false;
                continue;
            }
            if need_space {
                out.push(' ');
            }
            match self.tokens.get(id) {
                Some(tok) => out.push_str(tok),
                None => out.push_str("<unk>"),
            }
            need_space = true;
        }
        out
    }

    /// Vocabulary file format (v1): one token per line, line number = id,
    /// reserved tokens first; the newline token is written as the two-byte
    /// escape `\n`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            if tok == "\n" {
                out.push_str("\\n");
            } else {
                out.push_str(tok);
            }
            out.push('\n');
        }
        std::fs::write(path, out)
            .map_err(|source| TextError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|source| TextError::Io { path: path.display().to_string(), source })?;
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for (lineno, line) in raw.lines().enumerate() {
            let tok = if line == "\\n" { "\n" } else { line };
            if let Some(want) = RESERVED.get(lineno) {
                if tok != *want {
                    return Err(TextError::ReservedMismatch {
                        line: lineno,
                        want: if *want == "\n" { "\\n".into() } else { (*want).into() },
                        found: line.to_string(),
                    });
                }
            }
            if v.index.contains_key(tok) {
                return Err(TextError::DuplicateToken { token: line.to_string(), line: lineno });
            }
            v.intern(tok);
        }
        if v.tokens.len() < RESERVED.len() {
            return Err(TextError::Contract(format!(
                "vocabulary file holds {} tokens, needs at least the {} reserved ones",
                v.tokens.len(),
                RESERVED.len()
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Nli,
    Paraphrase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// One row of the prompt-pattern table: task kind x role determines the
/// instruction line; the example template and answer prefix are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternSpec {
    pub task: TaskKind,
    pub role: Role,
}

const NLI_QUESTION: &str = "Are the following sentences examples of entailment, yes or no?";
const PARA_QUESTION: &str =
    "Are the following sentences duplicates or paraphrases of each other, yes or no?";
const THINK_PREFIX: &str = "Think logically. ";
pub const ANSWER_PREFIX: &str = "Label:";

impl PatternSpec {
    pub fn new(task: TaskKind, role: Role) -> Self {
        PatternSpec { task, role }
    }

    /// The instruction line. Teachers get the "Think logically." preamble;
    /// students ask the bare question.
    pub fn instruction(&self) -> String {
        let question = match self.task {
            TaskKind::Nli => NLI_QUESTION,
            TaskKind::Paraphrase => PARA_QUESTION,
        };
        match self.role {
            Role::Teacher => format!("{THINK_PREFIX}{question}"),
            Role::Student => question.to_string(),
        }
    }
}

/// A prompt string with its encoding. `answer_position` is the index of the
/// final token — the "Label:" word — so the model's distribution at that
/// position is the label prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub answer_position: usize,
}

/// One example in the shared general pattern. With `with_label`, the label
/// follows the answer prefix; inference renderings stop at "Label:".
pub fn render_example(ex: &LabeledExample, with_label: bool) -> String {
    debug_assert!(!ex.premise.is_empty() && !ex.hypothesis.is_empty());
    let mut s = format!(
        "Premise: {}\nHypothesis: {}\n{ANSWER_PREFIX}",
        ex.premise, ex.hypothesis
    );
    if with_label {
        s.push(' ');
        s.push_str(if ex.label.is_yes() { "Yes" } else { "No" });
    }
    s
}

/// Instruction, labeled context examples joined by blank lines, then the
/// unlabeled inference example.
pub fn render_teacher_prompt(
    spec: &PatternSpec,
    contexts: &[LabeledExample],
    inference: &LabeledExample,
    vocab: &Vocabulary,
) -> Result<RenderedPrompt> {
    if spec.role != Role::Teacher {
        return Err(TextError::Contract("teacher prompt rendered from a student pattern".into()));
    }
    if contexts.is_empty() {
        return Err(TextError::Contract("teacher prompt needs at least one context example".into()));
    }
    if contexts.iter().any(|c| c.uid == inference.uid) {
        return Err(TextError::Leakage { uid: inference.uid.clone() });
    }
    let mut text = spec.instruction();
    text.push('\n');
    for (i, c) in contexts.iter().enumerate() {
        if i > 0 {
            text.push_str("\n\n");
        }
        text.push_str(&render_example(c, true));
    }
    text.push_str("\n\n");
    text.push_str(&render_example(inference, false));
    Ok(finish_prompt(text, vocab))
}

/// Instruction then the unlabeled inference example; no contexts.
pub fn render_student_prompt(
    spec: &PatternSpec,
    inference: &LabeledExample,
    vocab: &Vocabulary,
) -> Result<RenderedPrompt> {
    if spec.role != Role::Student {
        return Err(TextError::Contract("student prompt rendered from a teacher pattern".into()));
    }
    let mut text = spec.instruction();
    text.push('\n');
    text.push_str(&render_example(inference, false));
    Ok(finish_prompt(text, vocab))
}

fn finish_prompt(text: String, vocab: &Vocabulary) -> RenderedPrompt {
    let token_ids = vocab.encode(&text);
    let answer_position = token_ids.len() - 1;
    RenderedPrompt { text, token_ids, answer_position }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn ex(uid: &str, premise: &str, hypothesis: &str, label: Label) -> LabeledExample {
        LabeledExample {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            label,
            uid: uid.to_string(),
        }
    }

    fn demo_vocab() -> Vocabulary {
        let texts = [
            "Think logically. Are the following sentences examples of entailment, yes or no?",
            "Are the following sentences duplicates or paraphrases of each other, yes or no?",
            "Premise: Hypothesis: Label: the cat sat on a mat dogs bark A B C D",
        ];
        Vocabulary::build(texts)
    }

    #[test]
    fn reserved_ids_are_pinned() {
        let v = demo_vocab();
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.token(NEWLINE), Some("\n"));
        assert_eq!(v.encode("Yes"), vec![YES]);
        assert_eq!(v.encode("No"), vec![NO]);
    }

    #[test]
    fn encode_empty_is_empty() {
        assert!(demo_vocab().encode("").is_empty());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = demo_vocab();
        let ids = v.encode("the zzzzz sat");
        assert_eq!(ids[1], UNK);
        assert_eq!(v.decode(&ids), "the <unk> sat");
    }

    #[test]
    fn corpus_text_round_trips() {
        let v = demo_vocab();
        for s in [
            "the cat sat",
            "the cat\nsat on a mat",
            "Premise: A\nHypothesis: B\nLabel: Yes",
            "A\n\nB",
            "Think logically. Are the following sentences examples of entailment, yes or no?",
        ] {
            assert_eq!(v.decode(&v.encode(s)), s, "round trip failed for {s:?}");
        }
    }

    #[test]
    fn render_example_matches_pattern_exactly() {
        let e = ex("u1", "A", "B", Label::Yes);
        assert_eq!(render_example(&e, true), "Premise: A\nHypothesis: B\nLabel: Yes");
        assert_eq!(render_example(&e, false), "Premise: A\nHypothesis: B\nLabel:");
        let n = ex("u2", "A", "B", Label::No);
        assert_eq!(render_example(&n, true), "Premise: A\nHypothesis: B\nLabel: No");
    }

    #[test]
    fn render_example_fields_recoverable() {
        let e = ex("u1", "the cat sat", "dogs bark", Label::No);
        let s = render_example(&e, true);
        let premise = s.strip_prefix("Premise: ").unwrap().split('\n').next().unwrap();
        let hypothesis =
            s.split("Hypothesis: ").nth(1).unwrap().split('\n').next().unwrap();
        assert_eq!(premise, "the cat sat");
        assert_eq!(hypothesis, "dogs bark");
    }

    #[test]
    fn teacher_prompt_layout_and_instruction() {
        let v = demo_vocab();
        let spec = PatternSpec::new(TaskKind::Nli, Role::Teacher);
        let contexts = vec![ex("c1", "A", "B", Label::Yes), ex("c2", "C", "D", Label::No)];
        let inf = ex("q1", "the cat sat", "dogs bark", Label::Yes);
        let p = render_teacher_prompt(&spec, &contexts, &inf, &v).unwrap();
        let want = "Think logically. Are the following sentences examples of entailment, yes or no?\n\
                    Premise: A\nHypothesis: B\nLabel: Yes\n\n\
                    Premise: C\nHypothesis: D\nLabel: No\n\n\
                    Premise: the cat sat\nHypothesis: dogs bark\nLabel:";
        assert_eq!(p.text, want);
        assert_eq!(p.answer_position, p.token_ids.len() - 1);
        assert_eq!(p.token_ids, v.encode(&p.text));
        assert_eq!(v.token(p.token_ids[p.answer_position]), Some("Label:"));
    }

    #[test]
    fn paraphrase_instruction_differs() {
        let spec = PatternSpec::new(TaskKind::Paraphrase, Role::Teacher);
        assert_eq!(
            spec.instruction(),
            "Think logically. Are the following sentences duplicates or paraphrases of each other, yes or no?"
        );
        let student = PatternSpec::new(TaskKind::Paraphrase, Role::Student);
        assert!(!student.instruction().starts_with("Think logically."));
    }

    #[test]
    fn teacher_prompt_grows_with_context_count() {
        let v = demo_vocab();
        let spec = PatternSpec::new(TaskKind::Nli, Role::Teacher);
        let inf = ex("q1", "A", "B", Label::Yes);
        let mut prev = 0;
        for n in 1..=5 {
            let contexts: Vec<_> =
                (0..n).map(|i| ex(&format!("c{i}"), "C", "D", Label::No)).collect();
            let p = render_teacher_prompt(&spec, &contexts, &inf, &v).unwrap();
            assert!(p.token_ids.len() > prev);
            prev = p.token_ids.len();
        }
    }

    #[test]
    fn teacher_prompt_rejects_leakage() {
        let v = demo_vocab();
        let spec = PatternSpec::new(TaskKind::Nli, Role::Teacher);
        let shared = ex("dup", "A", "B", Label::Yes);
        let err =
            render_teacher_prompt(&spec, &[shared.clone()], &shared, &v).unwrap_err();
        assert!(matches!(err, TextError::Leakage { uid } if uid == "dup"));
    }

    #[test]
    fn student_prompt_has_no_contexts_and_shares_label_suffix() {
        let v = demo_vocab();
        let t_spec = PatternSpec::new(TaskKind::Nli, Role::Teacher);
        let s_spec = PatternSpec::new(TaskKind::Nli, Role::Student);
        let ctx = ex("c1", "the cat sat", "on a mat", Label::Yes);
        let inf = ex("q1", "A", "B", Label::No);
        let teacher = render_teacher_prompt(&t_spec, &[ctx.clone()], &inf, &v).unwrap();
        let student = render_student_prompt(&s_spec, &inf, &v).unwrap();
        assert!(!student.text.contains("the cat sat"));
        assert!(!student.text.contains("Think logically."));
        let suffix = "Premise: A\nHypothesis: B\nLabel:";
        assert!(teacher.text.ends_with(suffix));
        assert!(student.text.ends_with(suffix));
        assert_eq!(
            v.token(student.token_ids[student.answer_position]),
            Some("Label:")
        );
    }

    #[test]
    fn role_mismatch_is_rejected() {
        let v = demo_vocab();
        let inf = ex("q1", "A", "B", Label::Yes);
        let wrong = PatternSpec::new(TaskKind::Nli, Role::Student);
        assert!(render_teacher_prompt(&wrong, &[inf.clone()], &inf, &v).is_err());
        let wrong2 = PatternSpec::new(TaskKind::Nli, Role::Teacher);
        assert!(render_student_prompt(&wrong2, &inf, &v).is_err());
    }

    #[test]
    fn vocab_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = demo_vocab();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v.len(), loaded.len());
        for id in 0..v.len() {
            assert_eq!(v.token(id), loaded.token(id));
        }
        // Escaped newline token occupies one line.
        let raw = std::fs::read_to_string(&path).unwrap();
        assert_eq!(raw.lines().nth(NEWLINE), Some("\\n"));
    }

    #[test]
    fn vocab_load_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\n<unk>\n\\n\nYes\nNo\nword\nword\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TextError::DuplicateToken { line: 6, .. })
        ));
        std::fs::write(&path, "<pad>\nYes\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(TextError::ReservedMismatch { line: 1, .. })));
    }
}
