//! Synthetic verifiable-reward tasks.
//!
//! A prompt pairs a real-valued context vector (the stand-in for an image)
//! with a question id. The ground-truth answer is a deterministic function of
//! both, and a response is rewarded iff its final token equals the answer.
//! Earlier tokens are free "reasoning" tokens that never affect the reward.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{self, purpose};

/// Answer rule used to label generated prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    /// Answer is the argmax over a question-selected slice of `V` features.
    Easy,
    /// Answer bits are the signs of `ceil(log2 V)` question-selected
    /// features. Answers are uniform over prompts, so the best policy that
    /// ignores the context is uniform.
    #[default]
    CollapseProne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub context_dim: usize,
    pub num_questions: usize,
    pub count: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            max_len: 4,
            context_dim: 16,
            num_questions: 2,
            count: 640,
            difficulty: Difficulty::CollapseProne,
            seed: 7,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(LabError::config("task.count must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(LabError::config("task.vocab_size must be >= 2"));
        }
        if self.max_len < 1 {
            return Err(LabError::config("task.max_len must be >= 1"));
        }
        if self.num_questions < 1 {
            return Err(LabError::config("task.num_questions must be >= 1"));
        }
        let needed = match self.difficulty {
            Difficulty::Easy => self.vocab_size,
            Difficulty::CollapseProne => answer_bits(self.vocab_size),
        };
        if self.context_dim < needed {
            return Err(LabError::config(format!(
                "task.context_dim = {} is too small for {:?} with vocab_size {} (needs >= {needed})",
                self.context_dim, self.difficulty, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// One verifiable task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub context: Vec<f64>,
    pub question_id: usize,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub prompts: Vec<Prompt>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub context_dim: usize,
    pub num_questions: usize,
}

impl TaskSuite {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.prompts.iter().map(|p| p.id).collect()
    }
}

fn answer_bits(vocab_size: usize) -> usize {
    (usize::BITS - (vocab_size - 1).leading_zeros()) as usize
}

/// Ground-truth label of `(context, question_id)` under the given rule.
pub fn answer_for(difficulty: Difficulty, context: &[f64], question_id: usize, vocab_size: usize) -> usize {
    let d = context.len();
    match difficulty {
        Difficulty::Easy => {
            let offset = question_id * vocab_size;
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for k in 0..vocab_size {
                let v = context[(offset + k) % d];
                if v > best_val {
                    best_val = v;
                    best = k;
                }
            }
            best
        }
        Difficulty::CollapseProne => {
            let bits = answer_bits(vocab_size);
            let offset = question_id * bits;
            let mut code = 0usize;
            for k in 0..bits {
                if context[(offset + k) % d] > 0.0 {
                    code |= 1 << k;
                }
            }
            code % vocab_size
        }
    }
}

pub fn make_task_suite(cfg: &TaskConfig) -> Result<TaskSuite> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[purpose::SUITE]);
    let prompts = (0..cfg.count)
        .map(|id| {
            let context: Vec<f64> = (0..cfg.context_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let question_id = id % cfg.num_questions;
            let answer = answer_for(cfg.difficulty, &context, question_id, cfg.vocab_size);
            Prompt {
                id,
                context,
                question_id,
                answer,
            }
        })
        .collect();
    Ok(TaskSuite {
        prompts,
        vocab_size: cfg.vocab_size,
        max_len: cfg.max_len,
        context_dim: cfg.context_dim,
        num_questions: cfg.num_questions,
    })
}

static DEGENERATE_RESPONSES: AtomicU64 = AtomicU64::new(0);

/// Number of empty responses seen by [`verify`] in this process.
pub fn degenerate_response_count() -> u64 {
    DEGENERATE_RESPONSES.load(Ordering::Relaxed)
}

/// Binary outcome reward: 1 iff the last token equals the answer.
///
/// An empty response scores 0 and bumps the degenerate-response counter.
pub fn verify(prompt: &Prompt, response: &[usize]) -> u8 {
    match response.last() {
        Some(&tok) => u8::from(tok == prompt.answer),
        None => {
            DEGENERATE_RESPONSES.fetch_add(1, Ordering::Relaxed);
            0
        }
    }
}

/// Disjoint train/validation split. Prompts keep their original ids.
pub fn split(suite: &TaskSuite, val_fraction: f64, seed: u64) -> Result<(TaskSuite, TaskSuite)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(LabError::config(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if suite.is_empty() {
        return Err(LabError::usage("cannot split an empty suite"));
    }
    let n = suite.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[purpose::SPLIT]));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = suite
        .prompts
        .iter()
        .cloned()
        .zip(is_val)
        .partition(|(_, v)| *v);
    let rebuild = |prompts: Vec<(Prompt, bool)>| TaskSuite {
        prompts: prompts.into_iter().map(|(p, _)| p).collect(),
        ..suite.clone_header()
    };
    Ok((rebuild(train), rebuild(val)))
}

impl TaskSuite {
    fn clone_header(&self) -> TaskSuite {
        TaskSuite {
            prompts: Vec::new(),
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            context_dim: self.context_dim,
            num_questions: self.num_questions,
        }
    }
}

/// Text-only view: the context is replaced by zeros.
pub fn mask_image(prompt: &Prompt) -> Prompt {
    Prompt {
        context: vec![0.0; prompt.context.len()],
        ..prompt.clone()
    }
}

const SUITE_HEADER: &str = "# rlvr-suite v1";

/// Line-oriented text form: a header, a dims line, then one prompt per line
/// (`id question_id answer c_0 ... c_{d-1}`).
pub fn suite_to_text(suite: &TaskSuite) -> String {
    let mut out = String::new();
    writeln!(out, "{SUITE_HEADER}").unwrap();
    writeln!(
        out,
        "vocab_size={} max_len={} context_dim={} num_questions={}",
        suite.vocab_size, suite.max_len, suite.context_dim, suite.num_questions
    )
    .unwrap();
    for p in &suite.prompts {
        write!(out, "{} {} {}", p.id, p.question_id, p.answer).unwrap();
        for c in &p.context {
            write!(out, " {c}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn suite_from_text(text: &str) -> Result<TaskSuite> {
    let mut lines = text.lines();
    if lines.next() != Some(SUITE_HEADER) {
        return Err(LabError::parse("missing suite header"));
    }
    let dims = lines.next().ok_or_else(|| LabError::parse("missing dims line"))?;
    let mut vals = [0usize; 4];
    let keys = ["vocab_size", "max_len", "context_dim", "num_questions"];
    for (slot, field) in vals.iter_mut().zip(dims.split_whitespace()) {
        let (_, v) = field
            .split_once('=')
            .ok_or_else(|| LabError::parse(format!("bad dims field {field:?}")))?;
        *slot = v
            .parse()
            .map_err(|_| LabError::parse(format!("bad dims field {field:?}")))?;
    }
    if dims.split_whitespace().count() != keys.len() {
        return Err(LabError::parse("dims line must carry 4 fields"));
    }
    let [vocab_size, max_len, context_dim, num_questions] = vals;
    let mut prompts = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || LabError::parse(format!("malformed prompt line {}", lineno + 3));
        let mut fields = line.split_whitespace();
        let mut int = || -> Result<usize> { fields.next().ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let id = int()?;
        let question_id = int()?;
        let answer = int()?;
        let context: Vec<f64> = line
            .split_whitespace()
            .skip(3)
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if context.len() != context_dim || answer >= vocab_size {
            return Err(bad());
        }
        prompts.push(Prompt {
            id,
            context,
            question_id,
            answer,
        });
    }
    Ok(TaskSuite {
        prompts,
        vocab_size,
        max_len,
        context_dim,
        num_questions,
    })
}
