//! Synthetic sequence tasks over a shared 32-symbol alphabet.
//!
//! | task    | prompt              | answer                  |
//! |---------|---------------------|-------------------------|
//! | add     | `$07+42=`           | `(a+b) mod 10`, `#`     |
//! | chain   | `$07+42*13=`        | `(a+b·c) mod 10`, `#`   |
//! | copy    | `$>cafe...=`        | the string, `#`         |
//! | reverse | `$<cafe...=`        | the reversed string, `#`|
//! | lookup  | `$a:3,c:7,f:1?c=`   | `7`, `#`                |
//! | sort    | `$~5031=`           | `0135`, `#`             |
//!
//! `add` is a sub-computation of `chain` and `copy` shares its whole input
//! format with `reverse`; `sort` shares nothing but the digit symbols.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::{argmax, ModelWeights};

pub type Token = usize;

/// Symbol table; a token id is its index here.
pub const ALPHABET: [char; 32] = [
    '.', '$', '#', '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', 'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h',
    'i', 'j', '+', '*', '=', ':', '?', ',', '>', '<', '~',
];

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
const DIGIT0: Token = 3;
const LETTER0: Token = 13;
const LETTERS: usize = 10;

pub fn encode(text: &str) -> Result<Vec<Token>> {
    text.chars()
        .map(|c| {
            ALPHABET
                .iter()
                .position(|&a| a == c)
                .ok_or_else(|| invalid(format!("symbol {c:?} is not in the alphabet")))
        })
        .collect()
}

pub fn decode(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|&t| ALPHABET.get(t).copied().unwrap_or('\u{fffd}'))
        .collect()
}

fn digit(d: usize) -> Token {
    DIGIT0 + d
}

fn letter(i: usize) -> Token {
    LETTER0 + i
}

fn sym(c: char) -> Token {
    ALPHABET.iter().position(|&a| a == c).expect("alphabet symbol")
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<Token>,
    pub y: Vec<Token>,
}

impl Example {
    /// Teacher-forced model input: the prompt followed by all answer tokens
    /// but the last.
    pub fn input_tokens(&self) -> Vec<Token> {
        let mut t = self.x.clone();
        t.extend_from_slice(&self.y[..self.y.len() - 1]);
        t
    }

    pub fn total_len(&self) -> usize {
        self.x.len() + self.y.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Add,
    Chain,
    Copy,
    Reverse,
    Lookup,
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Add,
        TaskKind::Chain,
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Lookup,
        TaskKind::Sort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::Chain => "chain",
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Lookup => "lookup",
            TaskKind::Sort => "sort",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Digits per operand for `add` and `chain`.
    pub operand_digits: usize,
    /// String length range for `copy`, `reverse` and `sort`.
    pub min_len: usize,
    pub max_len: usize,
    pub example_count: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: TaskKind, example_count: usize, seed: u64) -> Self {
        let (min_len, max_len) = match task {
            TaskKind::Sort => (4, 6),
            _ => (5, 10),
        };
        Self {
            task,
            operand_digits: 2,
            min_len,
            max_len,
            example_count,
            seed,
        }
    }

    /// Longest `|x| + |y|` this spec can produce.
    pub fn max_total_len(&self) -> usize {
        let d = self.operand_digits;
        match self.task {
            TaskKind::Add => 1 + 2 * d + 2 + 2,
            TaskKind::Chain => 1 + 3 * d + 3 + 2,
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Sort => 3 + 2 * self.max_len + 1,
            TaskKind::Lookup => 15 + 2,
        }
    }

    fn distinct_prompts(&self) -> f64 {
        let d = self.operand_digits as i32;
        match self.task {
            TaskKind::Add => 10f64.powi(2 * d),
            TaskKind::Chain => 10f64.powi(3 * d),
            TaskKind::Copy | TaskKind::Reverse => (self.min_len..=self.max_len)
                .map(|l| (LETTERS as f64).powi(l as i32))
                .sum(),
            TaskKind::Sort => (self.min_len..=self.max_len).map(|l| 10f64.powi(l as i32)).sum(),
            TaskKind::Lookup => 10.0 * 9.0 * 8.0 * 1000.0 * 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.example_count < 10 {
            return Err(invalid(format!(
                "{}: example_count must be at least 10, got {}",
                self.task, self.example_count
            )));
        }
        match self.task {
            TaskKind::Add | TaskKind::Chain if self.operand_digits == 0 || self.operand_digits > 4 => {
                return Err(invalid("operand_digits must be in 1..=4"));
            }
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Sort
                if self.min_len == 0 || self.min_len > self.max_len =>
            {
                return Err(invalid(format!(
                    "invalid length range {}..={}",
                    self.min_len, self.max_len
                )));
            }
            _ => {}
        }
        // keep rejection sampling comfortably away from exhausting the space
        if self.example_count as f64 > 0.5 * self.distinct_prompts() {
            return Err(invalid(format!(
                "{}: {} examples requested but only {:.0} distinct prompts exist",
                self.task,
                self.example_count,
                self.distinct_prompts()
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Example {
        let bos = vec![BOS];
        match self.task {
            TaskKind::Add => {
                let m = 10usize.pow(self.operand_digits as u32);
                let (a, b) = (rng.gen_range(0..m), rng.gen_range(0..m));
                let mut x = bos;
                push_number(&mut x, a, self.operand_digits);
                x.push(sym('+'));
                push_number(&mut x, b, self.operand_digits);
                x.push(sym('='));
                Example {
                    x,
                    y: vec![digit((a + b) % 10), EOS],
                }
            }
            TaskKind::Chain => {
                let m = 10usize.pow(self.operand_digits as u32);
                let (a, b, c) = (rng.gen_range(0..m), rng.gen_range(0..m), rng.gen_range(0..m));
                let mut x = bos;
                push_number(&mut x, a, self.operand_digits);
                x.push(sym('+'));
                push_number(&mut x, b, self.operand_digits);
                x.push(sym('*'));
                push_number(&mut x, c, self.operand_digits);
                x.push(sym('='));
                Example {
                    x,
                    y: vec![digit((a + b * c) % 10), EOS],
                }
            }
            TaskKind::Copy | TaskKind::Reverse => {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let s: Vec<Token> = (0..len).map(|_| letter(rng.gen_range(0..LETTERS))).collect();
                let marker = if self.task == TaskKind::Copy { '>' } else { '<' };
                let mut x = bos;
                x.push(sym(marker));
                x.extend_from_slice(&s);
                x.push(sym('='));
                let mut y = s;
                if self.task == TaskKind::Reverse {
                    y.reverse();
                }
                y.push(EOS);
                Example { x, y }
            }
            TaskKind::Lookup => {
                let mut keys: Vec<usize> = (0..LETTERS).collect();
                keys.shuffle(rng);
                keys.truncate(3);
                let values: Vec<usize> = (0..3).map(|_| rng.gen_range(0..10)).collect();
                let q = rng.gen_range(0..3);
                let mut x = bos;
                for i in 0..3 {
                    if i > 0 {
                        x.push(sym(','));
                    }
                    x.push(letter(keys[i]));
                    x.push(sym(':'));
                    x.push(digit(values[i]));
                }
                x.push(sym('?'));
                x.push(letter(keys[q]));
                x.push(sym('='));
                Example {
                    x,
                    y: vec![digit(values[q]), EOS],
                }
            }
            TaskKind::Sort => {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let mut s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..10)).collect();
                let mut x = bos;
                x.push(sym('~'));
                x.extend(s.iter().map(|&d| digit(d)));
                x.push(sym('='));
                s.sort_unstable();
                let mut y: Vec<Token> = s.into_iter().map(digit).collect();
                y.push(EOS);
                Example { x, y }
            }
        }
    }
}

fn push_number(out: &mut Vec<Token>, value: usize, digits: usize) {
    for i in (0..digits).rev() {
        out.push(digit(value / 10usize.pow(i as u32) % 10));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl TaskDataset {
    pub fn task(&self) -> TaskKind {
        self.spec.task
    }

    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// One JSON record per line: `{"task","split","x","y"}`.
    pub fn write_records(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in [Split::Train, Split::Validation, Split::Test] {
            for ex in self.split(s) {
                let rec = serde_json::json!({
                    "task": self.task().name(),
                    "split": s.name(),
                    "x": decode(&ex.x),
                    "y": decode(&ex.y),
                });
                writeln!(out, "{rec}")?;
            }
        }
        Ok(())
    }
}

/// Deterministic dataset with distinct prompts split 0.6 / 0.2 / 0.2.
pub fn generate(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let stream = TaskKind::ALL.iter().position(|&k| k == spec.task).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut seen = HashSet::with_capacity(spec.example_count);
    let mut examples = Vec::with_capacity(spec.example_count);
    let mut attempts = 0usize;
    while examples.len() < spec.example_count {
        attempts += 1;
        if attempts > 100 * spec.example_count {
            return Err(invalid(format!("{}: could not draw enough distinct prompts", spec.task)));
        }
        let ex = spec.sample(&mut rng);
        if seen.insert(ex.x.clone()) {
            examples.push(ex);
        }
    }
    let n = spec.example_count;
    let n_train = n * 3 / 5;
    let n_val = n / 5;
    let test = examples.split_off(n_train + n_val);
    let validation = examples.split_off(n_train);
    Ok(TaskDataset {
        spec: spec.clone(),
        train: examples,
        validation,
        test,
    })
}

/// Anything that yields next-token logits for a token prefix.
pub trait NextTokenModel {
    fn logits(&self, tokens: &[Token]) -> Result<Matrix>;

    fn logits_batch(&self, seqs: &[Vec<Token>]) -> Result<Vec<Matrix>> {
        seqs.iter().map(|s| self.logits(s)).collect()
    }
}

impl NextTokenModel for ModelWeights {
    fn logits(&self, tokens: &[Token]) -> Result<Matrix> {
        self.forward(tokens)
    }

    fn logits_batch(&self, seqs: &[Vec<Token>]) -> Result<Vec<Matrix>> {
        self.forward_batch(seqs)
    }
}

/// Whether greedy decoding from `ex.x` reproduces `ex.y` exactly.
///
/// Greedy decoding reproduces `y` iff every teacher-forced argmax along
/// `x ++ y` equals the next answer token, so one causal pass suffices.
pub fn exact_match(model: &impl NextTokenModel, ex: &Example) -> Result<bool> {
    Ok(matches_logits(&model.logits(&ex.input_tokens())?, ex))
}

fn matches_logits(logits: &Matrix, ex: &Example) -> bool {
    let start = ex.x.len() - 1;
    ex.y
        .iter()
        .enumerate()
        .all(|(i, &target)| argmax(logits.row(start + i)) == target)
}

/// Fraction of examples answered exactly under greedy decoding.
pub fn accuracy(model: &impl NextTokenModel, split: &[Example]) -> Result<f64> {
    if split.is_empty() {
        return Err(invalid("accuracy over an empty split"));
    }
    let inputs: Vec<Vec<Token>> = split.iter().map(Example::input_tokens).collect();
    let logits = model.logits_batch(&inputs)?;
    let hits = split.iter().zip(&logits).filter(|(ex, l)| matches_logits(l, ex)).count();
    Ok(hits as f64 / split.len() as f64)
}

/// Greedy argmax decoding until EOS or `max_new` tokens.
pub fn greedy_decode(model: &impl NextTokenModel, prompt: &[Token], max_new: usize) -> Result<Vec<Token>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = model.logits(&seq)?;
        let next = argmax(logits.row(logits.rows() - 1));
        out.push(next);
        if next == EOS {
            break;
        }
        seq.push(next);
    }
    Ok(out)
}
