//! Synthetic multi-task instruction corpus.
//!
//! Every sample reads `[marker, instruction…, SEP, response…]`. The marker
//! token names the task the way an instruction would; the content tokens
//! come from the task's vocabulary band. `copy`/`reverse` share a band and
//! so do `sort-window`/`arithmetic-mod`, which makes those pairs look alike
//! to the model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MopsError, Result};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
/// Task `t` is announced by token `MARKER_BASE + t`.
pub const MARKER_BASE: usize = 2;
pub const MAX_TASKS: usize = 16;
/// Response length of the band language-model task.
const LM_CONTINUATION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SortWindow,
    ArithmeticMod,
    PatternComplete,
    VocabBandLm,
    ClassificationTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    pub band_start: usize,
    pub band_len: usize,
    /// Inclusive range of the instruction content length (the motif period
    /// for `pattern-complete`).
    pub min_len: usize,
    pub max_len: usize,
}

impl TaskSpec {
    pub fn marker(&self) -> usize {
        MARKER_BASE + self.task_id
    }

    pub fn band(&self) -> std::ops::Range<usize> {
        self.band_start..self.band_start + self.band_len
    }

    /// Longest sample this task can emit.
    pub fn max_tokens(&self) -> usize {
        let k = self.max_len;
        2 + match self.kind {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::SortWindow => 2 * k,
            TaskKind::ArithmeticMod | TaskKind::ClassificationTag => k + 1,
            TaskKind::PatternComplete => 3 * k,
            TaskKind::VocabBandLm => k + LM_CONTINUATION,
        }
    }

    fn overlaps(&self, other: &TaskSpec) -> bool {
        self.band_start < other.band_start + other.band_len && other.band_start < self.band_start + self.band_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub task: usize,
    pub tokens: Vec<usize>,
    pub split: Split,
}

impl Sample {
    /// Length of the instruction part, up to and including `SEP`.
    pub fn instruction_len(&self) -> usize {
        self.tokens.iter().position(|&t| t == SEP).map_or(self.tokens.len(), |p| p + 1)
    }

    pub fn instruction(&self) -> &[usize] {
        &self.tokens[..self.instruction_len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub tasks: Vec<TaskSpec>,
    pub samples_per_task: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

fn spec(task_id: usize, kind: TaskKind, band_start: usize, band_len: usize, lens: (usize, usize)) -> TaskSpec {
    TaskSpec { task_id, kind, band_start, band_len, min_len: lens.0, max_len: lens.1 }
}

impl CorpusConfig {
    /// The four-task toy layout: two pairs of look-alike tasks.
    pub fn toy_four() -> Self {
        Self {
            tasks: vec![
                spec(0, TaskKind::Copy, 32, 16, (3, 6)),
                spec(1, TaskKind::Reverse, 32, 16, (3, 6)),
                spec(2, TaskKind::SortWindow, 64, 16, (3, 6)),
                spec(3, TaskKind::ArithmeticMod, 64, 16, (2, 4)),
            ],
            samples_per_task: 400,
            vocab_size: 256,
            max_seq_len: 16,
        }
    }

    /// All seven generator kinds, one task each.
    pub fn default_seven() -> Self {
        let mut c = Self::toy_four();
        c.tasks.push(spec(4, TaskKind::PatternComplete, 96, 16, (2, 3)));
        c.tasks.push(spec(5, TaskKind::VocabBandLm, 128, 16, (4, 6)));
        c.tasks.push(spec(6, TaskKind::ClassificationTag, 160, 18, (4, 6)));
        c
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Task pairs whose vocabulary bands overlap.
    pub fn similar_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, a) in self.tasks.iter().enumerate() {
            for (j, b) in self.tasks.iter().enumerate().skip(i + 1) {
                if a.overlaps(b) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_task < 10 {
            return Err(MopsError::Config(format!(
                "samples_per_task must be at least 10, got {}",
                self.samples_per_task
            )));
        }
        if self.tasks.is_empty() || self.tasks.len() > MAX_TASKS {
            return Err(MopsError::Config(format!("need 1..={MAX_TASKS} tasks")));
        }
        let reserved = MARKER_BASE + MAX_TASKS;
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(MopsError::Config(format!("task {i} has task_id {}", t.task_id)));
            }
            if t.band_start < reserved || t.band_start + t.band_len > self.vocab_size {
                return Err(MopsError::Config(format!(
                    "task {i}: band {:?} must lie within {reserved}..{}",
                    t.band(),
                    self.vocab_size
                )));
            }
            let min_band = if t.kind == TaskKind::ClassificationTag { 4 } else { 2 };
            if t.band_len < min_band || t.min_len == 0 || t.min_len > t.max_len {
                return Err(MopsError::Config(format!("task {i}: degenerate band or length range")));
            }
            if t.max_tokens() > self.max_seq_len {
                return Err(MopsError::Config(format!(
                    "task {i}: samples reach {} tokens, above max_seq_len {}",
                    t.max_tokens(),
                    self.max_seq_len
                )));
            }
        }
        if self.tasks.len() >= 2 && self.similar_pairs().is_empty() {
            return Err(MopsError::Config("at least two tasks must share a vocabulary band".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskCorpus {
    pub samples: Vec<Sample>,
}

impl TaskCorpus {
    pub fn train(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test).collect()
    }

    pub fn train_owned(&self) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train).cloned().collect()
    }

    pub fn test_owned(&self) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test).cloned().collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.samples.iter().map(|s| s.task + 1).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn band_token(spec: &TaskSpec, value: usize) -> usize {
    spec.band_start + value
}

fn generate_sample(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = rng.random_range(spec.min_len..=spec.max_len);
    let mut tokens = vec![spec.marker()];
    match spec.kind {
        TaskKind::Copy | TaskKind::Reverse | TaskKind::SortWindow => {
            let content: Vec<usize> = (0..k).map(|_| band_token(spec, rng.random_range(0..spec.band_len))).collect();
            tokens.extend(&content);
            tokens.push(SEP);
            let mut answer = content;
            match spec.kind {
                TaskKind::Reverse => answer.reverse(),
                TaskKind::SortWindow => answer.sort_unstable(),
                _ => {}
            }
            tokens.extend(answer);
        }
        TaskKind::ArithmeticMod => {
            let ops: Vec<usize> = (0..k).map(|_| rng.random_range(0..spec.band_len)).collect();
            tokens.extend(ops.iter().map(|&v| band_token(spec, v)));
            tokens.push(SEP);
            tokens.push(band_token(spec, ops.iter().sum::<usize>() % spec.band_len));
        }
        TaskKind::PatternComplete => {
            let motif: Vec<usize> = (0..k).map(|_| band_token(spec, rng.random_range(0..spec.band_len))).collect();
            tokens.extend(&motif);
            tokens.extend(&motif);
            tokens.push(SEP);
            tokens.extend(&motif);
        }
        TaskKind::VocabBandLm => {
            // A fixed affine successor rule per task, followed 80% of the time.
            let mult = 2 * (spec.task_id % 4) + 3;
            let shift = 5 + spec.task_id;
            let mut x = rng.random_range(0..spec.band_len);
            let mut seq = Vec::with_capacity(k + LM_CONTINUATION);
            for _ in 0..k + LM_CONTINUATION {
                seq.push(band_token(spec, x));
                x = if rng.random_bool(0.8) {
                    (mult * x + shift) % spec.band_len
                } else {
                    rng.random_range(0..spec.band_len)
                };
            }
            tokens.extend(&seq[..k]);
            tokens.push(SEP);
            tokens.extend(&seq[k..]);
        }
        TaskKind::ClassificationTag => {
            let values = spec.band_len - 2;
            let content: Vec<usize> = (0..k).map(|_| rng.random_range(0..values)).collect();
            let low = content.iter().filter(|&&v| v < values / 2).count();
            tokens.extend(content.iter().map(|&v| band_token(spec, v)));
            tokens.push(SEP);
            let tag = if 2 * low >= k { values } else { values + 1 };
            tokens.push(band_token(spec, tag));
        }
    }
    tokens
}

/// Generates `samples_per_task` samples for each task; the last tenth of
/// each task's samples form its test split.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<TaskCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.samples_per_task;
    let test = (n / 10).max(1);
    let mut samples = Vec::with_capacity(n * config.tasks.len());
    for spec in &config.tasks {
        for i in 0..n {
            let split = if i < n - test { Split::Train } else { Split::Test };
            samples.push(Sample { task: spec.task_id, tokens: generate_sample(spec, &mut rng), split });
        }
    }
    Ok(TaskCorpus { samples })
}

/// Checks that a sample obeys its task's layout: marker first, one `SEP`,
/// every other token inside the band, lengths within range.
pub fn audit_sample(spec: &TaskSpec, sample: &Sample, max_seq_len: usize) -> Result<()> {
    let fail = |msg: String| Err(MopsError::Input(format!("task {}: {msg}", spec.task_id)));
    if sample.task != spec.task_id {
        return fail(format!("sample labelled {}", sample.task));
    }
    if sample.tokens.len() > max_seq_len || sample.tokens.len() > spec.max_tokens() {
        return fail(format!("sample of {} tokens is too long", sample.tokens.len()));
    }
    if sample.tokens.first() != Some(&spec.marker()) {
        return fail("missing task marker".into());
    }
    if sample.tokens.iter().filter(|&&t| t == SEP).count() != 1 {
        return fail("expected exactly one separator".into());
    }
    let band = spec.band();
    if let Some(t) = sample.tokens[1..].iter().find(|&&t| t != SEP && !band.contains(&t)) {
        return fail(format!("token {t} outside band {band:?}"));
    }
    let content = sample.instruction_len() - 2;
    let expected = match spec.kind {
        TaskKind::PatternComplete => content / 2,
        _ => content,
    };
    if expected < spec.min_len || expected > spec.max_len {
        return fail(format!("instruction length {content} out of range"));
    }
    Ok(())
}

pub fn save_corpus(corpus: &TaskCorpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &corpus.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<TaskCorpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| MopsError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(TaskCorpus { samples })
}

/// Deterministic shuffle helper shared by the training loops.
pub(crate) fn shuffled_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_and_split() {
        let c = CorpusConfig::default_seven();
        let corpus = generate_corpus(&c, 1).unwrap();
        assert_eq!(corpus.len(), 7 * 400);
        assert_eq!(corpus.num_tasks(), 7);
        for t in 0..7 {
            let train = corpus.samples.iter().filter(|s| s.task == t && s.split == Split::Train).count();
            let test = corpus.samples.iter().filter(|s| s.task == t && s.split == Split::Test).count();
            assert_eq!((train, test), (360, 40));
        }
        assert_eq!(c.similar_pairs(), vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn copy_task_repeats_its_prefix() {
        let c = CorpusConfig::toy_four();
        let corpus = generate_corpus(&c, 2).unwrap();
        for s in corpus.samples.iter().filter(|s| s.task == 0) {
            let sep = s.instruction_len();
            let prefix = &s.tokens[1..sep - 1];
            assert_eq!(&s.tokens[sep..], prefix);
        }
        for s in corpus.samples.iter().filter(|s| s.task == 1) {
            let sep = s.instruction_len();
            let mut prefix = s.tokens[1..sep - 1].to_vec();
            prefix.reverse();
            assert_eq!(s.tokens[sep..], prefix[..]);
        }
    }

    #[test]
    fn every_sample_passes_the_audit() {
        let c = CorpusConfig::default_seven();
        let corpus = generate_corpus(&c, 3).unwrap();
        for s in &corpus.samples {
            audit_sample(&c.tasks[s.task], s, c.max_seq_len).unwrap();
            assert!(s.tokens.iter().all(|&t| t < c.vocab_size));
        }
    }

    #[test]
    fn disjoint_bands_are_perfectly_separable() {
        let c = CorpusConfig::default_seven();
        let corpus = generate_corpus(&c, 4).unwrap();
        // Copy (band 32..48) against pattern-complete (band 96..112).
        let (a, b) = (&c.tasks[0], &c.tasks[4]);
        for s in corpus.samples.iter().filter(|s| s.task == 0 || s.task == 4) {
            let content = &s.tokens[1..s.instruction_len() - 1];
            let guess = if content.iter().all(|t| a.band().contains(t)) { 0 } else { 4 };
            assert!(content.iter().all(|t| c.tasks[guess].band().contains(t)));
            assert_eq!(guess, s.task);
            assert!(!a.overlaps(b));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = CorpusConfig::toy_four();
        assert_eq!(generate_corpus(&c, 9).unwrap(), generate_corpus(&c, 9).unwrap());
        assert_ne!(generate_corpus(&c, 9).unwrap(), generate_corpus(&c, 10).unwrap());
    }

    #[test]
    fn config_errors() {
        let mut c = CorpusConfig::toy_four();
        c.tasks[0].band_start = 250;
        assert!(generate_corpus(&c, 0).is_err());
        let mut c = CorpusConfig::toy_four();
        c.samples_per_task = 5;
        assert!(c.validate().is_err());
        let mut c = CorpusConfig::toy_four();
        c.max_seq_len = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&CorpusConfig::toy_four(), 5).unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&corpus, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 10;
        std::fs::write(&path, &text[..cut]).unwrap();
        match load_corpus(&path) {
            Err(MopsError::Parse { line, .. }) => assert_eq!(line, corpus.len()),
            other => panic!("expected a parse error, got {other:?}"),
        }

        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn jsonl_record_shape() {
        let s = Sample { task: 2, tokens: vec![4, 70, 1, 70], split: Split::Test };
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"task":2,"tokens":[4,70,1,70],"split":"test"}"#);
    }
}
