//! Synthetic multi-task mixture: structurally heterogeneous sequence tasks
//! over a fixed 64-symbol vocabulary, mixing one-token-answer
//! classification with multi-token and long generative targets.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numlin::Rng;

pub const VOCAB: usize = 64;
pub const PAD: usize = 0;
pub const SEP: usize = 1;

const TAG_CHOICE: usize = 2;
const TAG_COPY: usize = 3;
const TAG_ARITH: usize = 4;
const TAG_LONGGEN: usize = 5;

/// Number tokens 6..=31 encode values 0..26.
const NUM_BASE: usize = 6;
const NUM_SPAN: usize = 26;
/// Letter tokens 32..=63.
const LET_BASE: usize = 32;
const LET_SPAN: usize = 26;
/// Choice patterns use the first 8 letters; answers the 8 after them.
const CHOICE_LETTERS: usize = 8;
const CHOICE_PATTERN_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskTag {
    Choice,
    Copy,
    Arith,
    LongGen,
}

impl TaskTag {
    pub fn name(&self) -> &'static str {
        match self {
            TaskTag::Choice => "choice",
            TaskTag::Copy => "copy",
            TaskTag::Arith => "arith",
            TaskTag::LongGen => "longgen",
        }
    }

    pub fn parse(s: &str) -> Result<TaskTag> {
        match s {
            "choice" => Ok(TaskTag::Choice),
            "copy" => Ok(TaskTag::Copy),
            "arith" => Ok(TaskTag::Arith),
            "longgen" => Ok(TaskTag::LongGen),
            other => Err(Error::Format(format!("unknown task tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub task_tag: TaskTag,
}

impl Sample {
    /// Input followed by targets, the sequence the model trains on.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.input_ids.clone();
        s.extend_from_slice(&self.target_ids);
        s
    }

    /// Loss mask over `full_sequence`: true exactly at target positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.input_ids.len()];
        m.extend(std::iter::repeat(true).take(self.target_ids.len()));
        m
    }

    pub fn len(&self) -> usize {
        self.input_ids.len() + self.target_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-task sample counts plus the mixture seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixtureSpec {
    pub choice: usize,
    pub copy: usize,
    pub arith: usize,
    pub longgen: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn total(&self) -> usize {
        self.choice + self.copy + self.arith + self.longgen
    }
}

/// Distinct-input capacity of each task family.
pub fn capacity(tag: TaskTag) -> usize {
    match tag {
        // 4 pattern slots over 8 letters
        TaskTag::Choice => CHOICE_LETTERS.pow(CHOICE_PATTERN_LEN as u32),
        // spans of length 3..=6 over 26 letters
        TaskTag::Copy => (3..=6u32).map(|k| LET_SPAN.pow(k)).sum(),
        TaskTag::Arith => NUM_SPAN * NUM_SPAN,
        TaskTag::LongGen => NUM_SPAN * NUM_SPAN,
    }
}

/// Generate the mixture: distinct inputs per family, globally shuffled by
/// the mixture seed.
pub fn gen_mixture(spec: &MixtureSpec) -> Result<Vec<Sample>> {
    for (tag, count) in [
        (TaskTag::Choice, spec.choice),
        (TaskTag::Copy, spec.copy),
        (TaskTag::Arith, spec.arith),
        (TaskTag::LongGen, spec.longgen),
    ] {
        if count > capacity(tag) {
            return Err(Error::Argument(format!(
                "{} count {count} exceeds combinatorial capacity {}",
                tag.name(),
                capacity(tag)
            )));
        }
    }
    let mut rng = Rng::new(spec.seed);
    let mut samples = Vec::with_capacity(spec.total());
    samples.extend(gen_choice(&mut rng.fork(1), spec.choice));
    samples.extend(gen_copy(&mut rng.fork(2), spec.copy));
    samples.extend(gen_arith(&mut rng.fork(3), spec.arith));
    samples.extend(gen_longgen(&mut rng.fork(4), spec.longgen));
    rng.shuffle(&mut samples);
    Ok(samples)
}

/// Majority-letter classification: 4 pattern tokens from 8 letters, the
/// 1-token answer names the most frequent letter (lowest letter on ties).
fn gen_choice(rng: &mut Rng, count: usize) -> Vec<Sample> {
    let mut all: Vec<usize> = (0..capacity(TaskTag::Choice)).collect();
    rng.shuffle(&mut all);
    all.truncate(count);
    all.into_iter()
        .map(|code| {
            let mut pattern = Vec::with_capacity(CHOICE_PATTERN_LEN);
            let mut c = code;
            for _ in 0..CHOICE_PATTERN_LEN {
                pattern.push(c % CHOICE_LETTERS);
                c /= CHOICE_LETTERS;
            }
            let mut freq = [0usize; CHOICE_LETTERS];
            for &p in &pattern {
                freq[p] += 1;
            }
            let winner = (0..CHOICE_LETTERS).max_by_key(|&i| (freq[i], CHOICE_LETTERS - i)).unwrap();
            let mut input = vec![TAG_CHOICE];
            input.extend(pattern.iter().map(|&p| LET_BASE + p));
            input.push(SEP);
            Sample {
                input_ids: input,
                target_ids: vec![LET_BASE + CHOICE_LETTERS + winner],
                task_tag: TaskTag::Choice,
            }
        })
        .collect()
}

/// Echo task: the target repeats the input span verbatim.
fn gen_copy(rng: &mut Rng, count: usize) -> Vec<Sample> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let k = 3 + rng.next_below(4);
        let span: Vec<usize> = (0..k).map(|_| LET_BASE + rng.next_below(LET_SPAN)).collect();
        if !seen.insert(span.clone()) {
            continue;
        }
        let mut input = vec![TAG_COPY];
        input.extend_from_slice(&span);
        input.push(SEP);
        out.push(Sample {
            input_ids: input,
            target_ids: span,
            task_tag: TaskTag::Copy,
        });
    }
    out
}

/// Sum of two small numbers mod 26, answered as two base-6 digit tokens.
fn gen_arith(rng: &mut Rng, count: usize) -> Vec<Sample> {
    let mut all: Vec<(usize, usize)> = (0..NUM_SPAN)
        .flat_map(|a| (0..NUM_SPAN).map(move |b| (a, b)))
        .collect();
    rng.shuffle(&mut all);
    all.truncate(count);
    all.into_iter()
        .map(|(a, b)| {
            let s = (a + b) % NUM_SPAN;
            Sample {
                input_ids: vec![TAG_ARITH, NUM_BASE + a, NUM_BASE + b, SEP],
                target_ids: vec![NUM_BASE + s / 6, NUM_BASE + s % 6],
                task_tag: TaskTag::Arith,
            }
        })
        .collect()
}

/// Deterministic expansion: seeds (x, y) produce a target of 8 + (y mod 4)
/// letters stepping by 1 + (y mod 3) through the alphabet.
fn gen_longgen(rng: &mut Rng, count: usize) -> Vec<Sample> {
    let mut all: Vec<(usize, usize)> = (0..NUM_SPAN)
        .flat_map(|x| (0..NUM_SPAN).map(move |y| (x, y)))
        .collect();
    rng.shuffle(&mut all);
    all.truncate(count);
    all.into_iter()
        .map(|(x, y)| {
            let len = 8 + y % 4;
            let step = 1 + y % 3;
            let target = (0..len)
                .map(|i| LET_BASE + (x + i * step) % LET_SPAN)
                .collect();
            Sample {
                input_ids: vec![TAG_LONGGEN, NUM_BASE + x, NUM_BASE + y, SEP],
                target_ids: target,
                task_tag: TaskTag::LongGen,
            }
        })
        .collect()
}

/// A padded batch: right-padded sequences plus loss masks that exclude pad
/// positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn target_token_count(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }
}

pub fn batchify(samples: &[Sample], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Argument("batchify: empty sample list".into()));
    }
    let mut batches = Vec::new();
    for chunk in samples.chunks(batch_size) {
        let width = chunk.iter().map(Sample::len).max().unwrap();
        let mut sequences = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for s in chunk {
            let mut seq = s.full_sequence();
            let mut mask = s.loss_mask();
            seq.resize(width, PAD);
            mask.resize(width, false);
            sequences.push(seq);
            masks.push(mask);
        }
        batches.push(Batch { sequences, masks });
    }
    Ok(batches)
}

/// One sample per line: task tag, space-separated input ids, `|`,
/// space-separated target ids.
pub fn export_samples(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(s.task_tag.name());
        for id in &s.input_ids {
            out.push_str(&format!(" {id}"));
        }
        out.push_str(" |");
        for id in &s.target_ids {
            out.push_str(&format!(" {id}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_samples(text: &str) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Format(format!("sample line {}: {msg}", lineno + 1));
        let (tag_str, rest) = line.split_once(' ').ok_or_else(|| err("missing ids"))?;
        let tag = TaskTag::parse(tag_str)?;
        let (input_part, target_part) = rest.split_once('|').ok_or_else(|| err("missing separator"))?;
        let parse_ids = |part: &str| -> Result<Vec<usize>> {
            part.split_whitespace()
                .map(|t| {
                    let id: usize = t.parse().map_err(|_| err("bad token id"))?;
                    if id >= VOCAB {
                        return Err(err("token id out of vocabulary"));
                    }
                    Ok(id)
                })
                .collect()
        };
        samples.push(Sample {
            input_ids: parse_ids(input_part)?,
            target_ids: parse_ids(target_part)?,
            task_tag: tag,
        });
    }
    Ok(samples)
}
