//! Seeded synthetic long-dependency tasks.
//!
//! Token ids 0..=3 are reserved across all tasks (see [`PAD`], [`DELIM`],
//! [`BLANK`], [`QUERY`]); content symbols are drawn from `4..vocab`. Every
//! generator is a pure function of its seed and parameters.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const DELIM: usize = 1;
pub const BLANK: usize = 2;
pub const QUERY: usize = 3;
pub const FIRST_SYMBOL: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turns: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub facts: Option<usize>,
    /// For multi-turn episodes: which fact each answer position queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fact_ids: Option<Vec<usize>>,
}

/// One training or evaluation sequence. `target[t]` is only meaningful
/// where `mask[t]` is set; elsewhere it holds [`PAD`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<bool>,
    pub meta: TaskMeta,
}

impl TaskInstance {
    fn new(input: Vec<usize>, meta: TaskMeta) -> Self {
        let len = input.len();
        Self {
            input,
            target: vec![PAD; len],
            mask: vec![false; len],
            meta,
        }
    }

    fn answer(&mut self, pos: usize, token: usize) {
        self.target[pos] = token;
        self.mask[pos] = true;
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn answer_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| i)
    }

    /// Gold answers in position order.
    pub fn answers(&self) -> Vec<usize> {
        self.answer_positions().map(|i| self.target[i]).collect()
    }
}

fn symbols(vocab: usize) -> usize {
    vocab.saturating_sub(FIRST_SYMBOL)
}

fn symbol(rng: &mut Rng, vocab: usize) -> usize {
    rng.random_range(FIRST_SYMBOL..vocab)
}

/// Uniform symbol different from every token in `exclude`.
fn symbol_except(rng: &mut Rng, vocab: usize, exclude: &[usize]) -> usize {
    loop {
        let s = symbol(rng, vocab);
        if !exclude.contains(&s) {
            return s;
        }
    }
}

fn distinct_symbols(rng: &mut Rng, vocab: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (FIRST_SYMBOL..vocab).collect();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}

/// Copy task: `payload ∥ DELIM ∥ BLANK×gap ∥ QUERY`. The payload must be
/// reproduced, in order, at the final `payload` positions of the sequence.
pub fn gen_copy(seed: u64, payload: usize, vocab: usize, gap: usize) -> Result<TaskInstance> {
    if payload == 0 || gap == 0 {
        return Err(Error::Config(
            "copy task needs payload >= 1 and gap >= 1".into(),
        ));
    }
    if symbols(vocab) < 1 {
        return Err(Error::Config(format!(
            "copy task needs a vocabulary above the {FIRST_SYMBOL} reserved ids, got {vocab}"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let body: Vec<usize> = (0..payload).map(|_| symbol(&mut rng, vocab)).collect();
    let mut input = body.clone();
    input.push(DELIM);
    input.extend(std::iter::repeat_n(BLANK, gap));
    input.push(QUERY);
    let len = input.len();
    let mut inst = TaskInstance::new(
        input,
        TaskMeta {
            task: "copy".into(),
            seed,
            payload: Some(payload),
            gap: Some(gap),
            ..TaskMeta::default()
        },
    );
    for (j, &tok) in body.iter().enumerate() {
        inst.answer(len - payload + j, tok);
    }
    Ok(inst)
}

/// Associative recall: `k1 v1 … kk vk QUERY kq`, answered with `vq` at
/// the final position. Keys are distinct; values may repeat.
pub fn gen_assoc_recall(seed: u64, pairs: usize, vocab: usize) -> Result<TaskInstance> {
    if pairs == 0 {
        return Err(Error::Config(
            "associative recall needs at least one pair".into(),
        ));
    }
    let needed = pairs + FIRST_SYMBOL;
    if vocab < needed {
        return Err(Error::Config(format!(
            "associative recall with {pairs} distinct keys needs vocab >= {needed}, got {vocab}"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let keys = distinct_symbols(&mut rng, vocab, pairs);
    let values: Vec<usize> = (0..pairs).map(|_| symbol(&mut rng, vocab)).collect();
    let q = rng.random_range(0..pairs);
    let mut input = Vec::with_capacity(2 * pairs + 2);
    for (k, v) in keys.iter().zip(&values) {
        input.push(*k);
        input.push(*v);
    }
    input.push(QUERY);
    input.push(keys[q]);
    let last = input.len() - 1;
    let mut inst = TaskInstance::new(
        input,
        TaskMeta {
            task: "assoc".into(),
            seed,
            pairs: Some(pairs),
            ..TaskMeta::default()
        },
    );
    inst.answer(last, values[q]);
    Ok(inst)
}

/// Needle retrieval: `DELIM fact d_1 … d_D QUERY`, answered with the fact
/// at the final position. Distractors never equal the fact.
pub fn gen_needle(seed: u64, distance: usize, vocab: usize) -> Result<TaskInstance> {
    if symbols(vocab) < 2 {
        return Err(Error::Config(format!(
            "needle task needs at least two content symbols, got vocab {vocab}"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let fact = symbol(&mut rng, vocab);
    let mut input = Vec::with_capacity(distance + 3);
    input.push(DELIM);
    input.push(fact);
    for _ in 0..distance {
        input.push(symbol_except(&mut rng, vocab, &[fact]));
    }
    input.push(QUERY);
    let last = input.len() - 1;
    let mut inst = TaskInstance::new(
        input,
        TaskMeta {
            task: "needle".into(),
            seed,
            distance: Some(distance),
            ..TaskMeta::default()
        },
    );
    inst.answer(last, fact);
    Ok(inst)
}

/// Multi-turn probe: one fact block `k1 v1 … kF vF`, then `turns` query
/// turns. Each query turn is preceded by a distractor turn of `gap` tokens
/// (never a fact key) and then asks `QUERY k`, answered with `v` at the key
/// position. Facts are queried round-robin in a seeded order, so every fact
/// is asked once `turns >= facts`. Turn 0 carries the fact block.
pub fn gen_multiturn(
    seed: u64,
    turns: usize,
    facts: usize,
    vocab: usize,
    gap: usize,
) -> Result<Vec<TaskInstance>> {
    if turns == 0 || facts == 0 {
        return Err(Error::Config(
            "multi-turn probe needs turns >= 1 and facts >= 1".into(),
        ));
    }
    if symbols(vocab) < facts + 1 {
        return Err(Error::Config(format!(
            "multi-turn probe with {facts} facts needs vocab >= {} so distractors differ from keys, got {vocab}",
            facts + FIRST_SYMBOL + 1
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let keys = distinct_symbols(&mut rng, vocab, facts);
    let values: Vec<usize> = (0..facts).map(|_| symbol(&mut rng, vocab)).collect();
    let mut order: Vec<usize> = (0..facts).collect();
    order.shuffle(&mut rng);

    let meta = |fact_ids: Vec<usize>| TaskMeta {
        task: "multiturn".into(),
        seed,
        gap: Some(gap),
        turns: Some(turns),
        facts: Some(facts),
        fact_ids: Some(fact_ids),
        ..TaskMeta::default()
    };
    let mut out = Vec::with_capacity(turns);
    for t in 0..turns {
        let fact = order[t % facts];
        let mut input = Vec::new();
        if t == 0 {
            for (k, v) in keys.iter().zip(&values) {
                input.push(*k);
                input.push(*v);
            }
        }
        for _ in 0..gap {
            input.push(symbol_except(&mut rng, vocab, &keys));
        }
        input.push(QUERY);
        input.push(keys[fact]);
        let last = input.len() - 1;
        let mut inst = TaskInstance::new(input, meta(vec![fact]));
        inst.answer(last, values[fact]);
        out.push(inst);
    }
    Ok(out)
}

/// Joins the turns of one multi-turn episode into a single sequence.
pub fn concat_turns(turns: &[TaskInstance]) -> Result<TaskInstance> {
    let first = turns
        .first()
        .ok_or_else(|| Error::Contract("episode has no turns".into()))?;
    let mut meta = first.meta.clone();
    let mut fact_ids = Vec::new();
    let mut inst = TaskInstance {
        input: Vec::new(),
        target: Vec::new(),
        mask: Vec::new(),
        meta: TaskMeta::default(),
    };
    for turn in turns {
        inst.input.extend(&turn.input);
        inst.target.extend(&turn.target);
        inst.mask.extend(&turn.mask);
        fact_ids.extend(turn.meta.fact_ids.iter().flatten());
    }
    meta.fact_ids = Some(fact_ids);
    inst.meta = meta;
    Ok(inst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    #[default]
    Assoc,
    Needle,
    Multiturn,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Assoc => "assoc",
            TaskKind::Needle => "needle",
            TaskKind::Multiturn => "multiturn",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TaskKind::Copy,
            TaskKind::Assoc,
            TaskKind::Needle,
            TaskKind::Multiturn,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown task `{s}` (expected copy, assoc, needle or multiturn)"
            ))
        })
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Task selection and parameters; only the fields of the chosen task are
/// read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub name: TaskKind,
    /// Copy payload length.
    pub payload: usize,
    /// Copy delay, or distractors per multi-turn turn.
    pub gap: usize,
    /// Associative-recall pairs.
    pub pairs: usize,
    /// Needle distance.
    pub distance: usize,
    pub turns: usize,
    pub facts: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: TaskKind::Assoc,
            payload: 4,
            gap: 8,
            pairs: 8,
            distance: 50,
            turns: 10,
            facts: 4,
        }
    }
}

impl TaskConfig {
    /// One sequence of the task. Multi-turn episodes come back joined.
    pub fn generate(&self, seed: u64, vocab: usize) -> Result<TaskInstance> {
        match self.name {
            TaskKind::Copy => gen_copy(seed, self.payload, vocab, self.gap),
            TaskKind::Assoc => gen_assoc_recall(seed, self.pairs, vocab),
            TaskKind::Needle => gen_needle(seed, self.distance, vocab),
            TaskKind::Multiturn => concat_turns(&gen_multiturn(
                seed, self.turns, self.facts, vocab, self.gap,
            )?),
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        self.generate(0, vocab).map(|_| ())
    }
}
