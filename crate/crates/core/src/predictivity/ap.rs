//! Average precision over a ranking of scores.
//!
//! `AP = Σ_n (R_n − R_{n−1}) P_n`, swept over the distinct score thresholds in
//! descending order. Tied scores enter the ranking together as one
//! threshold, which keeps AP independent of instance order.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Input(format!("score {i} is not finite")));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Input(format!("label {i} is not 0/1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Undefined("average precision needs both positive and negative labels".into()));
    }
    Ok(pos)
}

/// Sweeps tie groups in the given order and accumulates AP.
fn sweep(groups: impl Iterator<Item = (usize, usize)>, positives: usize) -> f64 {
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (group_pos, group_len) in groups {
        tp += group_pos;
        seen += group_len;
        if group_pos > 0 {
            ap += (group_pos as f64 / positives as f64) * (tp as f64 / seen as f64);
        }
    }
    ap
}

/// Tie groups of the descending ranking, as `(positives, size)` pairs.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = f64::NAN;
    for &i in &idx {
        let pos = labels[i] as usize;
        match groups.last_mut() {
            Some(g) if scores[i] == last => {
                g.0 += pos;
                g.1 += 1;
            }
            _ => groups.push((pos, 1)),
        }
        last = scores[i];
    }
    groups
}

/// Average precision of `scores` as a ranking of the positive labels.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let positives = check(scores, labels)?;
    Ok(sweep(tie_groups(scores, labels).into_iter(), positives))
}

/// Predictivity in both directions of a score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BidirectionalAp {
    /// `max(forward, reverse)`.
    pub ap: f64,
    pub forward: f64,
    /// AP of the negated scores.
    pub reverse: f64,
    /// Set when the value falls below 0.5 or all scores are tied.
    pub degenerate: bool,
}

/// `max(AP(s), AP(−s))`: a neuron is predictive whether it fires for the
/// positive or the negative class.
pub fn bidirectional_ap(scores: &[f64], labels: &[u8]) -> Result<BidirectionalAp> {
    let positives = check(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let forward = sweep(groups.iter().copied(), positives);
    let reverse = sweep(groups.iter().rev().copied(), positives);
    let ap = forward.max(reverse);
    Ok(BidirectionalAp {
        ap,
        forward,
        reverse,
        degenerate: ap < 0.5 || groups.len() == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_ranking() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn interleaved_ranking() {
        let ap = average_precision(&[0.9, 0.7, 0.6, 0.2], &[1, 0, 1, 0]).unwrap();
        assert_abs_diff_eq!(ap, 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn inverted_ranking() {
        let ap = average_precision(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap();
        assert_abs_diff_eq!(ap, 5.0 / 12.0, epsilon = 1e-15);
    }

    #[test]
    fn bidirectional_takes_the_better_direction() {
        let b = bidirectional_ap(&[0.9, 0.7, 0.6, 0.2], &[1, 0, 1, 0]).unwrap();
        assert_abs_diff_eq!(b.forward, 5.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.reverse, 0.5, epsilon = 1e-15);
        assert_eq!(b.ap, b.forward);
        assert!(!b.degenerate);

        let anti = bidirectional_ap(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap();
        assert_eq!(anti.ap, 1.0);
    }

    #[test]
    fn constant_scores_are_flagged() {
        let b = bidirectional_ap(&[0.3, 0.3], &[1, 0]).unwrap();
        assert_eq!(b.forward, 0.5);
        assert_eq!(b.reverse, 0.5);
        assert!(b.degenerate);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(average_precision(&[0.1, 0.2], &[1, 1]), Err(Error::Undefined(_))));
        assert!(matches!(bidirectional_ap(&[0.1, 0.2], &[0, 0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn rejects_nan_and_length_mismatch() {
        assert!(average_precision(&[f64::NAN, 0.2], &[1, 0]).is_err());
        assert!(average_precision(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn ties_do_not_depend_on_order() {
        let a = average_precision(&[1.0, 0.0, 0.0, 0.0], &[1, 1, 0, 0]).unwrap();
        let b = average_precision(&[1.0, 0.0, 0.0, 0.0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(a, b);
    }
}
