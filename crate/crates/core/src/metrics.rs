//! Answer-quality metrics over token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn require_reference<T>(reference: &[T]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::Contract("reference must be non-empty".into()));
    }
    Ok(())
}

fn counts<T: Eq + Hash>(tokens: &[T]) -> HashMap<&T, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t).or_insert(0) += 1;
    }
    map
}

/// Size of the multiset intersection.
fn overlap<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> usize {
    let reference = counts(reference);
    counts(candidate)
        .into_iter()
        .map(|(tok, c)| c.min(reference.get(tok).copied().unwrap_or(0)))
        .sum()
}

/// Clipped unigram precision times the brevity penalty
/// `exp(1 - |r| / |c|)` (applied when the candidate is shorter).
pub fn bleu1<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64> {
    require_reference(reference)?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let precision = overlap(candidate, reference) as f64 / c;
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(precision * brevity)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (β = 1): `2·LCS / (|c| + |r|)`.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    require_reference(reference)?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference);
    Ok(2.0 * lcs as f64 / (candidate.len() + reference.len()) as f64)
}

pub fn exact_match<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    require_reference(reference)?;
    Ok(if candidate == reference { 1.0 } else { 0.0 })
}

/// Bag-of-tokens F1: `2·overlap / (|c| + |r|)`.
pub fn token_f1<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64> {
    require_reference(reference)?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    Ok(2.0 * overlap(candidate, reference) as f64 / (candidate.len() + reference.len()) as f64)
}

/// Fraction of repeated queries of a fact whose answer equals the first
/// answer given for that fact. `fact_ids[i]` names the fact asked at turn
/// `i`. With no repeated queries the score is 1.
///
/// This measures stability, not correctness: a model that repeats the
/// same wrong answer is perfectly consistent.
pub fn consistency_score<T: Eq>(answers: &[T], fact_ids: &[usize]) -> Result<f64> {
    let (matches, repeats) = consistency_counts(answers, fact_ids)?;
    Ok(if repeats == 0 {
        1.0
    } else {
        matches as f64 / repeats as f64
    })
}

/// `(matching re-queries, re-queries)` for [`consistency_score`].
pub fn consistency_counts<T: Eq>(answers: &[T], fact_ids: &[usize]) -> Result<(usize, usize)> {
    if answers.is_empty() {
        return Err(Error::Contract(
            "consistency needs at least one turn".into(),
        ));
    }
    if answers.len() != fact_ids.len() {
        return Err(Error::dim(
            "consistency_score",
            format!("{} answers for {} fact ids", answers.len(), fact_ids.len()),
        ));
    }
    let mut first: HashMap<usize, &T> = HashMap::new();
    let (mut matches, mut repeats) = (0, 0);
    for (answer, fact) in answers.iter().zip(fact_ids) {
        match first.get(fact) {
            Some(prev) => {
                repeats += 1;
                if *prev == answer {
                    matches += 1;
                }
            }
            None => {
                first.insert(*fact, answer);
            }
        }
    }
    Ok((matches, repeats))
}

/// Aggregate scores over an evaluation set, each in [0, 1].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instances: usize,
    /// Fraction of answer positions predicted exactly.
    pub acc: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub em: f64,
    pub token_f1: f64,
    /// Only defined for multi-turn episodes.
    pub consistency: Option<f64>,
    /// Mean write gate over all evaluated steps, for gated variants.
    pub gw_mean: Option<f64>,
    /// Mean forget gate over all evaluated steps, for gated variants.
    pub gf_mean: Option<f64>,
}

/// Accumulates per-instance scores into a [`MetricReport`].
#[derive(Default)]
pub struct MetricAccumulator {
    instances: usize,
    positions: usize,
    correct: usize,
    bleu1: f64,
    rouge_l: f64,
    em: f64,
    token_f1: f64,
    consistency: Option<(usize, usize)>,
}

impl MetricAccumulator {
    pub fn add(&mut self, predicted: &[usize], reference: &[usize]) -> Result<()> {
        if predicted.len() != reference.len() {
            return Err(Error::dim(
                "metrics",
                format!(
                    "{} predictions for {} answers",
                    predicted.len(),
                    reference.len()
                ),
            ));
        }
        self.instances += 1;
        self.positions += reference.len();
        self.correct += predicted
            .iter()
            .zip(reference)
            .filter(|(p, r)| p == r)
            .count();
        self.bleu1 += bleu1(predicted, reference)?;
        self.rouge_l += rouge_l(predicted, reference)?;
        self.em += exact_match(predicted, reference)?;
        self.token_f1 += token_f1(predicted, reference)?;
        Ok(())
    }

    pub fn add_episode(
        &mut self,
        predicted: &[usize],
        reference: &[usize],
        fact_ids: &[usize],
    ) -> Result<()> {
        self.add(predicted, reference)?;
        let (m, r) = consistency_counts(predicted, fact_ids)?;
        let (tm, tr) = self.consistency.get_or_insert((0, 0));
        *tm += m;
        *tr += r;
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let n = self.instances.max(1) as f64;
        MetricReport {
            instances: self.instances,
            acc: self.correct as f64 / self.positions.max(1) as f64,
            bleu1: self.bleu1 / n,
            rouge_l: self.rouge_l / n,
            em: self.em / n,
            token_f1: self.token_f1 / n,
            consistency: self
                .consistency
                .map(|(m, r)| if r == 0 { 1.0 } else { m as f64 / r as f64 }),
            gw_mean: None,
            gf_mean: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu1_hand_cases() {
        assert_eq!(bleu1(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 1.0);
        assert_eq!(bleu1(&["x", "y"], &["a", "b"]).unwrap(), 0.0);
        let v = bleu1(&["a", "b", "b"], &["a", "b", "c"]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        let empty: [&str; 0] = [];
        assert_eq!(bleu1(&empty, &["a"]).unwrap(), 0.0);
        assert!(bleu1(&["a"], &empty).is_err());
    }

    #[test]
    fn bleu1_brevity_penalty() {
        // one of one candidate token matches; c = 1, r = 2 => exp(1 - 2)
        let v = bleu1(&["a"], &["a", "b"]).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_l_hand_cases() {
        assert_eq!(
            rouge_l(&["a", "b", "c", "d"], &["a", "c", "b", "d"]).unwrap(),
            0.75
        );
        assert_eq!(rouge_l(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]).unwrap(), 0.0);
    }

    #[test]
    fn f1_and_em_hand_cases() {
        assert_eq!(token_f1(&["a", "b"], &["b", "c"]).unwrap(), 0.5);
        assert_eq!(exact_match(&["a", "b"], &["b", "c"]).unwrap(), 0.0);
        assert_eq!(exact_match(&[7], &[7]).unwrap(), 1.0);
        assert_eq!(token_f1(&[7], &[7]).unwrap(), 1.0);
        assert_eq!(token_f1(&[1], &[2]).unwrap(), 0.0);
    }

    #[test]
    fn consistency_hand_cases() {
        let v = consistency_score(&["x", "x", "y", "x"], &[0, 0, 0, 0]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(consistency_score(&["q"], &[0]).unwrap(), 1.0);
        assert_eq!(
            consistency_score(&[1, 2, 1, 2], &[0, 1, 0, 1]).unwrap(),
            1.0
        );
        let empty: [u8; 0] = [];
        assert!(consistency_score(&empty, &[]).is_err());
    }

    #[test]
    fn accumulator_averages() {
        let mut acc = MetricAccumulator::default();
        acc.add(&[4], &[4]).unwrap();
        acc.add(&[5], &[4]).unwrap();
        let r = acc.finish();
        assert_eq!(r.instances, 2);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.em, 0.5);
        assert_eq!(r.consistency, None);
    }
}
