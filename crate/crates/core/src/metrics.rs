//! Segmentation metrics, the geometric-mean reward and rank statistics.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

use crate::nn::loss::IGNORE_LABEL;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no non-background ground-truth pixels")]
    NoForeground,
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations")]
    TooShort,
    #[error("rank correlation undefined for a constant sequence")]
    Constant,
    #[error("label {label} outside [0, {classes})")]
    Label { label: u8, classes: usize },
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    background: usize,
    counts: Vec<u64>,
}

/// The three reward components, computed over non-background classes present in ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores {
    pub miou: f64,
    pub fwiou: f64,
    pub mpa: f64,
}

impl SegScores {
    /// Geometric mean of the three components.
    pub fn reward(&self) -> f64 {
        (self.miou * self.fwiou * self.mpa).cbrt()
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize, background: usize) -> Self {
        assert!(background < classes);
        Self {
            classes,
            background,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>], background: usize) -> Self {
        let classes = rows.len();
        let mut m = Self::new(classes, background);
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), classes, "square matrix");
            m.counts[r * classes..(r + 1) * classes].copy_from_slice(row);
        }
        m
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn background(&self) -> usize {
        self.background
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn set(&mut self, truth: usize, pred: usize, v: u64) {
        self.counts[truth * self.classes + pred] = v;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds pixel pairs; ground-truth pixels carrying the ignore label are skipped.
    pub fn accumulate(&mut self, truth: &[u8], pred: &[u8]) -> Result<(), MetricsError> {
        assert_eq!(truth.len(), pred.len(), "label map lengths");
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            for l in [t, p] {
                if l as usize >= self.classes {
                    return Err(MetricsError::Label { label: l, classes: self.classes });
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!((self.classes, self.background), (other.classes, other.background));
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn scores(&self) -> Result<SegScores, MetricsError> {
        let k = self.classes;
        // Per-class terms are summed in sorted order so that relabelling the
        // classes cannot change the result, not even in the last bit.
        let mut ious = Vec::new();
        let mut accs = Vec::new();
        let mut weighted = Vec::new();
        let mut fw_den = 0u64;
        for c in (0..k).filter(|&c| c != self.background) {
            let tp = self.get(c, c) as f64;
            let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
            if gt == 0 {
                continue;
            }
            let predicted: u64 = (0..k).map(|t| self.get(t, c)).sum();
            fw_den += gt;
            let gt = gt as f64;
            let fp = predicted as f64 - tp;
            let fn_ = gt - tp;
            let iou = tp / (tp + fp + fn_);
            ious.push(iou);
            accs.push(tp / gt);
            weighted.push(gt * iou);
        }
        let present = ious.len();
        if present == 0 {
            return Err(MetricsError::NoForeground);
        }
        let sorted_sum = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v.into_iter().sum::<f64>()
        };
        let (iou_sum, acc_sum, fw_num) = (sorted_sum(ious), sorted_sum(accs), sorted_sum(weighted));
        let fw_den = fw_den as f64;
        Ok(SegScores {
            miou: iou_sum / present as f64,
            fwiou: fw_num / fw_den,
            mpa: acc_sum / present as f64,
        })
    }

    pub fn reward(&self) -> Result<f64, MetricsError> {
        self.scores().map(|s| s.reward())
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooShort);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One-sided sign-test p-value: probability of at least `wins` successes out
/// of `wins + losses` fair coin flips. Ties are excluded by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            binom = binom * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += binom;
        }
    }
    p / 2.0f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![2, 0, 0], vec![0, 3, 1], vec![0, 1, 3]], 0)
    }

    #[test]
    fn hand_computed_example() {
        let s = example().scores().unwrap();
        assert!((s.miou - 0.6).abs() < 1e-12);
        assert!((s.fwiou - 0.6).abs() < 1e-12);
        assert!((s.mpa - 0.75).abs() < 1e-12);
        assert!((s.reward() - 0.27f64.cbrt()).abs() < 1e-12);
        assert!((s.reward() - 0.6463).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction() {
        let m = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 1]], 0);
        assert_eq!(m.reward().unwrap(), 1.0);
    }

    #[test]
    fn background_only_is_an_error() {
        let m = ConfusionMatrix::from_rows(&[vec![5, 1], vec![0, 0]], 0);
        assert_eq!(m.reward(), Err(MetricsError::NoForeground));
    }

    #[test]
    fn absent_classes_are_dropped() {
        // class 2 absent from ground truth but predicted once.
        let m = ConfusionMatrix::from_rows(&[vec![3, 0, 1], vec![0, 4, 0], vec![0, 0, 0]], 0);
        let s = m.scores().unwrap();
        assert_eq!(s.miou, 1.0);
        assert_eq!(s.mpa, 1.0);
    }

    #[test]
    fn accumulate_and_merge_are_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth: Vec<u8> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<u8> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let mut whole = ConfusionMatrix::new(4, 0);
        whole.accumulate(&truth, &pred).unwrap();
        let mut a = ConfusionMatrix::new(4, 0);
        a.accumulate(&truth[..77], &pred[..77]).unwrap();
        let mut b = ConfusionMatrix::new(4, 0);
        b.accumulate(&truth[77..], &pred[77..]).unwrap();
        a.merge(&b);
        assert_eq!(a, whole);
        assert_eq!(whole.total(), 200);
    }

    #[test]
    fn ignore_label_skipped() {
        let mut m = ConfusionMatrix::new(3, 0);
        m.accumulate(&[1, IGNORE_LABEL, 2], &[1, 0, 2]).unwrap();
        assert_eq!(m.total(), 2);
        assert!(m.accumulate(&[3], &[0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 5.0, 7.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[9.0, 5.0, 1.0, 0.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::Constant));
        assert_eq!(spearman(&[1.0], &[1.0]), Err(MetricsError::TooShort));
    }

    #[test]
    fn fwiou_can_drop_when_a_weak_class_grows() {
        // Class 1 has few pixels and low IoU; adding a true positive gives it
        // more weight in the frequency-weighted mean than it gains in IoU.
        let m = ConfusionMatrix::from_rows(&[vec![20, 44, 22], vec![5, 1, 1], vec![22, 7, 25]], 0);
        let mut up = m.clone();
        up.set(1, 1, 2);
        let (a, b) = (m.scores().unwrap(), up.scores().unwrap());
        assert!(b.fwiou < a.fwiou);
        assert!(b.miou > a.miou && b.mpa > a.mpa && b.reward() > a.reward());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn sign_test_values() {
        // P(X >= 14 | n=20) = 0.0577, P(X >= 13) = 0.1316
        assert!((sign_test_p(14, 6) - 0.057_659).abs() < 1e-5);
        assert!((sign_test_p(13, 7) - 0.131_588).abs() < 1e-5);
        assert_eq!(sign_test_p(0, 5), 1.0);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, k: usize) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(k, 0);
        for t in 0..k {
            for p in 0..k {
                m.set(t, p, rng.random_range(0..50));
            }
        }
        m.set(1, 1, m.get(1, 1) + 1);
        m
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = random_matrix(&mut rng, 5);
            let mut perm: Vec<usize> = (1..5).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            perm.insert(0, 0);
            let mut p = ConfusionMatrix::new(5, 0);
            for t in 0..5 {
                for q in 0..5 {
                    p.set(perm[t], perm[q], m.get(t, q));
                }
            }
            assert_eq!(m.scores().unwrap(), p.scores().unwrap());
        }
    }

    #[test]
    fn monotone_in_diagonal_and_below_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let m = random_matrix(&mut rng, 4);
            let s = m.scores().unwrap();
            assert!(s.reward() <= (s.miou + s.fwiou + s.mpa) / 3.0 + 1e-12);
            for c in 1..4 {
                let mut up = m.clone();
                up.set(c, c, m.get(c, c) + 3);
                let u = up.scores().unwrap();
                assert!(u.miou >= s.miou - 1e-12);
                assert!(u.mpa >= s.mpa - 1e-12);
                assert!(u.reward() >= s.reward() - 1e-12);
            }
        }
    }
}
