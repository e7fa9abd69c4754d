use gatemem::metrics::{
    bleu1, consistency_score, exact_match, rouge_l, token_f1, MetricAccumulator,
};
use gatemem::Error;
use proptest::prelude::*;

#[test]
fn hand_computed_scores() {
    assert!((bleu1(&['a', 'b', 'b'], &['a', 'b', 'c']).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(
        rouge_l(&['a', 'b', 'c', 'd'], &['a', 'c', 'b', 'd']).unwrap(),
        0.75
    );
    assert_eq!(token_f1(&['a', 'b'], &['b', 'c']).unwrap(), 0.5);
    let c = consistency_score(&['x', 'x', 'y', 'x'], &[0, 0, 0, 0]).unwrap();
    assert!((c - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn identical_and_disjoint_cases_are_exact() {
    let same = [4, 9, 9, 5];
    assert_eq!(bleu1(&same, &same).unwrap(), 1.0);
    assert_eq!(rouge_l(&same, &same).unwrap(), 1.0);
    assert_eq!(exact_match(&same, &same).unwrap(), 1.0);
    assert_eq!(token_f1(&same, &same).unwrap(), 1.0);
    let other = [6, 7, 8];
    assert_eq!(bleu1(&other, &same).unwrap(), 0.0);
    assert_eq!(rouge_l(&other, &same).unwrap(), 0.0);
    assert_eq!(exact_match(&other, &same).unwrap(), 0.0);
    assert_eq!(token_f1(&other, &same).unwrap(), 0.0);
}

#[test]
fn empty_reference_is_a_contract_error_and_empty_candidate_scores_zero() {
    let empty: [u8; 0] = [];
    assert!(matches!(bleu1(&[1u8], &empty), Err(Error::Contract(_))));
    assert!(matches!(rouge_l(&[1u8], &empty), Err(Error::Contract(_))));
    assert!(matches!(
        exact_match(&[1u8], &empty),
        Err(Error::Contract(_))
    ));
    assert!(matches!(token_f1(&[1u8], &empty), Err(Error::Contract(_))));
    assert_eq!(bleu1(&empty, &[1u8]).unwrap(), 0.0);
    assert_eq!(token_f1(&empty, &[1u8]).unwrap(), 0.0);
}

#[test]
fn consistency_boundaries() {
    assert_eq!(consistency_score(&['q'], &[0]).unwrap(), 1.0);
    assert_eq!(
        consistency_score(&['q', 'q', 'q'], &[2, 2, 2]).unwrap(),
        1.0
    );
    // Different facts never count as repeats of each other.
    assert_eq!(
        consistency_score(&['a', 'b', 'a', 'b'], &[0, 1, 0, 1]).unwrap(),
        1.0
    );
    assert_eq!(
        consistency_score(&['a', 'b', 'b', 'a'], &[0, 1, 0, 1]).unwrap(),
        0.0
    );
    let none: [char; 0] = [];
    assert!(matches!(
        consistency_score(&none, &[]),
        Err(Error::Contract(_))
    ));
    assert!(consistency_score(&['a'], &[0, 1]).is_err());
}

#[test]
fn unigram_bleu_ignores_order() {
    // A permutation has every unigram matched, so it scores 1 without
    // being an exact match; ROUGE-L still sees the reordering.
    assert_eq!(bleu1(&[1, 2], &[2, 1]).unwrap(), 1.0);
    assert_eq!(exact_match(&[1, 2], &[2, 1]).unwrap(), 0.0);
    assert!(rouge_l(&[1, 2], &[2, 1]).unwrap() < 1.0);
}

#[test]
fn accumulator_reports_means() {
    let mut acc = MetricAccumulator::default();
    acc.add(&[4, 5], &[4, 5]).unwrap();
    acc.add(&[4, 6], &[4, 5]).unwrap();
    let r = acc.finish();
    assert_eq!(r.instances, 2);
    assert_eq!(r.em, 0.5);
    assert_eq!(r.acc, 0.75);
    assert_eq!(r.token_f1, 0.75);
}

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..=max_len)
}

fn relabel(seq: &[u8], perm: &[u8]) -> Vec<u8> {
    seq.iter().map(|&t| perm[t as usize]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn scores_are_invariant_under_relabeling(
        c in tokens(8),
        r in tokens(8),
        perm in Just((0u8..6).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (pc, pr) = (relabel(&c, &perm), relabel(&r, &perm));
        prop_assert_eq!(bleu1(&c, &r).unwrap(), bleu1(&pc, &pr).unwrap());
        prop_assert_eq!(rouge_l(&c, &r).unwrap(), rouge_l(&pc, &pr).unwrap());
        prop_assert_eq!(exact_match(&c, &r).unwrap(), exact_match(&pc, &pr).unwrap());
        prop_assert_eq!(token_f1(&c, &r).unwrap(), token_f1(&pc, &pr).unwrap());
        let ids: Vec<usize> = r.iter().map(|&t| t as usize % 3).collect();
        let answers = &c[..c.len().min(r.len())];
        prop_assert_eq!(
            consistency_score(answers, &ids[..answers.len()]).unwrap(),
            consistency_score(&relabel(answers, &perm), &ids[..answers.len()]).unwrap()
        );
    }

    #[test]
    fn rouge_is_symmetric(c in tokens(8), r in tokens(8)) {
        prop_assert_eq!(rouge_l(&c, &r).unwrap(), rouge_l(&r, &c).unwrap());
    }

    #[test]
    fn scores_lie_in_the_unit_interval(c in tokens(8), r in tokens(8)) {
        for s in [
            bleu1(&c, &r).unwrap(),
            rouge_l(&c, &r).unwrap(),
            exact_match(&c, &r).unwrap(),
            token_f1(&c, &r).unwrap(),
        ] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn perfect_scores_track_exact_match(c in tokens(5), r in tokens(5)) {
        let em = exact_match(&c, &r).unwrap() == 1.0;
        if em {
            prop_assert_eq!(bleu1(&c, &r).unwrap(), 1.0);
            prop_assert_eq!(rouge_l(&c, &r).unwrap(), 1.0);
        }
        if c.len() == r.len() {
            prop_assert_eq!(rouge_l(&c, &r).unwrap() == 1.0, em);
        }
        if bleu1(&c, &r).unwrap() == 1.0 {
            // Unigram BLEU is order-blind: a perfect score means the same
            // token multiset, with no brevity penalty.
            let (mut a, mut b) = (c.clone(), r.clone());
            a.sort_unstable();
            b.sort_unstable();
            prop_assert!(c.len() >= r.len());
            if c.len() == r.len() {
                prop_assert_eq!(a, b);
            }
        }
    }
}
