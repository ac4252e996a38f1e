//! Synthetic parallel instruction data.
//!
//! The pivot ("English") language uses the lower half of the content-token
//! range. A target language is a permutation of content ids that swaps the
//! lower half with the upper half, so target surface forms never coincide
//! with English ones while every sequence keeps its length.

use crate::error::{Error, Result};
use crate::supervision::ParallelExample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

pub const SEP_ID: usize = 2;
pub const TASK_COPY: usize = 3;
pub const TASK_REVERSE: usize = 4;
pub const TASK_KV: usize = 5;
pub const TASK_ADD: usize = 6;
/// Separates key-value pairs from the queried keys.
pub const ASK_ID: usize = 7;
/// Ids below this are control tokens shared by every language.
pub const CONTENT_START: usize = 8;

/// Half-width of the content range; English uses `CONTENT_START..CONTENT_START + h`.
pub fn content_half(vocab_size: usize) -> usize {
    vocab_size.saturating_sub(CONTENT_START) / 2
}

pub fn english_tokens(vocab_size: usize) -> std::ops::Range<usize> {
    CONTENT_START..CONTENT_START + content_half(vocab_size)
}

/// English token for the number `n` in modular-add.
pub fn number_token(n: usize) -> usize {
    CONTENT_START + n
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageMap {
    pub name: String,
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl LanguageMap {
    pub fn identity(vocab_size: usize) -> Self {
        let forward: Vec<usize> = (0..vocab_size).collect();
        LanguageMap {
            name: "identity".into(),
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.forward.len()
    }

    pub fn map(&self, id: usize) -> usize {
        self.forward[id]
    }

    pub fn unmap(&self, id: usize) -> usize {
        self.inverse[id]
    }

    pub fn apply(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.forward[t]).collect()
    }

    pub fn invert(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.inverse[t]).collect()
    }
}

/// Random bijection sending English content ids onto the upper half and back.
pub fn make_language(seed: u64, vocab_size: usize) -> Result<LanguageMap> {
    let h = content_half(vocab_size);
    if h == 0 {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} leaves no content tokens beyond {CONTENT_START} reserved"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<usize> = (0..h).collect();
    targets.shuffle(&mut rng);
    let mut forward: Vec<usize> = (0..vocab_size).collect();
    for (e, &t) in targets.iter().enumerate() {
        let (en, tg) = (CONTENT_START + e, CONTENT_START + h + t);
        forward[en] = tg;
        forward[tg] = en;
    }
    let mut inverse = vec![0; vocab_size];
    for (i, &f) in forward.iter().enumerate() {
        inverse[f] = i;
    }
    Ok(LanguageMap {
        name: format!("lang-{seed}"),
        forward,
        inverse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    #[serde(alias = "kv")]
    KeyValueRecall,
    ModularAdd,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "kv" | "key-value-recall" => Ok(TaskKind::KeyValueRecall),
            "add" | "modular-add" => Ok(TaskKind::ModularAdd),
            other => Err(Error::Config(format!("unknown task kind {other}"))),
        }
    }
}

/// Task parameters. `query_len` counts payload items (tokens for copy and
/// reverse, key-value pairs for recall); `answer_len` counts queried keys for
/// recall. Both ranges are inclusive. Modular-add always has two operands
/// and one answer token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub query_len: (usize, usize),
    pub answer_len: (usize, usize),
    pub modulus: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, seed: u64) -> Self {
        let (query_len, answer_len) = match kind {
            TaskKind::Copy | TaskKind::Reverse => ((3, 6), (3, 6)),
            TaskKind::KeyValueRecall => ((4, 6), (1, 1)),
            TaskKind::ModularAdd => ((2, 2), (1, 1)),
        };
        TaskSpec {
            kind,
            vocab_size,
            query_len,
            answer_len,
            modulus: 10,
            seed,
        }
    }

    /// Longest `x ⧺ y` this spec can produce.
    pub fn max_sequence_len(&self) -> usize {
        let (n, m) = (self.query_len.1, self.answer_len.1);
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => 2 + 2 * n,
            TaskKind::KeyValueRecall => 3 + 2 * n + 2 * m,
            TaskKind::ModularAdd => 5,
        }
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let h = content_half(self.vocab_size);
        let bad = |m: String| Err(Error::Config(m));
        if h == 0 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        for (name, (lo, hi)) in [("query_len", self.query_len), ("answer_len", self.answer_len)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range ({lo}, {hi}) invalid"));
            }
        }
        match self.kind {
            TaskKind::KeyValueRecall => {
                if self.query_len.1 > h {
                    return bad("more keys than English tokens".into());
                }
                if self.answer_len.1 > self.query_len.0 {
                    return bad("answer_len may not exceed the number of pairs".into());
                }
            }
            TaskKind::ModularAdd => {
                if self.modulus < 2 || self.modulus > h {
                    return bad(format!("modulus {} outside 2..={h}", self.modulus));
                }
            }
            TaskKind::Copy | TaskKind::Reverse => {}
        }
        if self.max_sequence_len() > max_seq_len {
            return bad(format!(
                "task needs {} positions, model allows {max_seq_len}",
                self.max_sequence_len()
            ));
        }
        Ok(())
    }

    /// English-analog query and answer for example `index`.
    fn sample(&self, index: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, index));
        let english = english_tokens(self.vocab_size);
        let n = rng.random_range(self.query_len.0..=self.query_len.1);
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                let payload: Vec<usize> = (0..n).map(|_| rng.random_range(english.clone())).collect();
                let marker = if self.kind == TaskKind::Copy { TASK_COPY } else { TASK_REVERSE };
                let mut x = vec![marker];
                x.extend(&payload);
                x.push(SEP_ID);
                let mut y = payload;
                if self.kind == TaskKind::Reverse {
                    y.reverse();
                }
                (x, y)
            }
            TaskKind::KeyValueRecall => {
                let m = rng.random_range(self.answer_len.0..=self.answer_len.1.min(n));
                let keys: Vec<usize> = rand::seq::index::sample(&mut rng, english.len(), n)
                    .into_iter()
                    .map(|i| english.start + i)
                    .collect();
                let values: Vec<usize> = (0..n).map(|_| rng.random_range(english.clone())).collect();
                let asked: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
                let mut x = vec![TASK_KV];
                for (k, v) in keys.iter().zip(&values) {
                    x.push(*k);
                    x.push(*v);
                }
                x.push(ASK_ID);
                x.extend(asked.iter().map(|&i| keys[i]));
                x.push(SEP_ID);
                let y = asked.iter().map(|&i| values[i]).collect();
                (x, y)
            }
            TaskKind::ModularAdd => {
                let a = rng.random_range(0..self.modulus);
                let b = rng.random_range(0..self.modulus);
                let x = vec![TASK_ADD, number_token(a), number_token(b), SEP_ID];
                (x, vec![number_token((a + b) % self.modulus)])
            }
        }
    }
}

/// splitmix64 finalizer over `(seed, index)`.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

/// Split assignment by English content: 80% train, 10% dev, 10% test.
pub fn split_of(ex: &ParallelExample) -> Split {
    match content_hash(ex) % 10 {
        0 => Split::Dev,
        1 => Split::Test,
        _ => Split::Train,
    }
}

/// First eight bytes of SHA-256 over the English query and answer.
pub fn content_hash(ex: &ParallelExample) -> u64 {
    let mut h = Sha256::new();
    for t in &ex.x_en {
        h.update((*t as u32).to_le_bytes());
    }
    h.update(u32::MAX.to_le_bytes());
    for t in &ex.y_en {
        h.update((*t as u32).to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<ParallelExample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn subset(&self, split: Split) -> Dataset {
        let (examples, splits) = self
            .examples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(e, s)| (e.clone(), *s))
            .unzip();
        Dataset { examples, splits }
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.examples.len() {
            return Err(Error::Config("split tags do not cover examples".into()));
        }
        self.examples.iter().try_for_each(|e| e.validate())
    }

    pub fn vocab_bound(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|e| e.x_tgt.iter().chain(&e.x_en).chain(&e.y_tgt).chain(&e.y_en))
            .max()
            .map_or(0, |m| m + 1)
    }

    /// SHA-256 of the serialized file form, hex.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, self).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

fn make_example(task: &TaskSpec, language: &LanguageMap, index: u64) -> ParallelExample {
    let (x_en, y_en) = task.sample(index);
    ParallelExample {
        x_tgt: language.apply(&x_en),
        y_tgt: language.apply(&y_en),
        x_en,
        y_en,
    }
}

fn check_inputs(task: &TaskSpec, language: &LanguageMap) -> Result<()> {
    if language.vocab_size() != task.vocab_size {
        return Err(Error::Config(format!(
            "language covers {} ids, task uses {}",
            language.vocab_size(),
            task.vocab_size
        )));
    }
    task.validate(usize::MAX)
}

/// `n` examples in index order, split tags from content hashes.
pub fn generate(task: &TaskSpec, language: &LanguageMap, n: usize) -> Result<Dataset> {
    check_inputs(task, language)?;
    let examples: Vec<ParallelExample> = (0..n as u64).map(|i| make_example(task, language, i)).collect();
    let splits = examples.iter().map(split_of).collect();
    Ok(Dataset { examples, splits })
}

/// Generates until each split holds its requested count; surplus examples
/// of a full split are skipped. Order within the output follows generation.
pub fn generate_splits(task: &TaskSpec, language: &LanguageMap, sizes: [usize; 3]) -> Result<Dataset> {
    check_inputs(task, language)?;
    let total: usize = sizes.iter().sum();
    let mut filled = [0usize; 3];
    let mut out = Dataset::default();
    let budget = (total as u64 + 100) * 200;
    let mut index = 0u64;
    while filled.iter().sum::<usize>() < total {
        if index >= budget {
            return Err(Error::Config(format!(
                "task space too small to fill splits {sizes:?} (got {filled:?})"
            )));
        }
        let ex = make_example(task, language, index);
        index += 1;
        let s = split_of(&ex);
        let k = Split::ALL.iter().position(|x| *x == s).unwrap();
        if filled[k] < sizes[k] {
            filled[k] += 1;
            out.examples.push(ex);
            out.splits.push(s);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    split: Split,
    x_tgt: Vec<usize>,
    x_en: Vec<usize>,
    y_tgt: Vec<usize>,
    y_en: Vec<usize>,
}

pub fn write_jsonl(w: &mut impl Write, data: &Dataset) -> Result<()> {
    for (ex, split) in data.examples.iter().zip(&data.splits) {
        let rec = Record {
            split: *split,
            x_tgt: ex.x_tgt.clone(),
            x_en: ex.x_en.clone(),
            y_tgt: ex.y_tgt.clone(),
            y_en: ex.y_en.clone(),
        };
        serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Dataset> {
    let mut out = Dataset::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let ex = ParallelExample {
            x_tgt: rec.x_tgt,
            x_en: rec.x_en,
            y_tgt: rec.y_tgt,
            y_en: rec.y_en,
        };
        ex.validate().map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        out.examples.push(ex);
        out.splits.push(rec.split);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, data)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

/// Reserved ids every [`LanguageMap`] fixes.
pub fn reserved_tokens() -> std::ops::Range<usize> {
    0..CONTENT_START
}
