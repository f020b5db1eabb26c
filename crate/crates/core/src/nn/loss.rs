//! Segmentation cross-entropy, auxiliary terms and the logit-matching
//! distillation penalty.

use alloc::vec::Vec;

use super::kernels::{upsample_bilinear, upsample_bilinear_backward};
use super::{NnError, Real, Tensor};

/// Mask value excluded from the loss and from metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kd_coeff: f64,
    /// One coefficient per auxiliary output; a single value applies to all.
    pub aux_coeffs: Vec<f64>,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kd_coeff: 0.3,
            aux_coeffs: alloc::vec![0.3],
        }
    }
}

impl LossSpec {
    pub fn aux_coeff(&self, k: usize) -> f64 {
        self.aux_coeffs
            .get(k)
            .or(self.aux_coeffs.last())
            .copied()
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main_ce: f64,
    pub aux_ce: Vec<f64>,
    /// Absent when no teacher logits were supplied.
    pub kd: Option<f64>,
}

/// Mean softmax cross-entropy over non-ignored pixels, with its gradient.
pub fn cross_entropy<R: Real>(logits: &Tensor<R>, target: &[u8]) -> Result<(f64, Tensor<R>), NnError> {
    let [n, k, h, w] = logits.shape();
    let hw = h * w;
    assert_eq!(target.len(), n * hw, "target length");
    let mut grad = Tensor::zeros(logits.shape());
    let valid = target.iter().filter(|&&t| t != IGNORE_LABEL).count();
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / valid as f64;
    let mut total = 0.0f64;
    let mut probs = alloc::vec![0.0f64; k];
    for s in 0..n {
        for p in 0..hw {
            let t = target[s * hw + p];
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= k {
                return Err(NnError::ClassOutOfRange { class: t, num_classes: k });
            }
            let base = s * k * hw + p;
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(logits.data()[base + c * hw].as_f64());
            }
            let mut sum = 0.0;
            for c in 0..k {
                probs[c] = num_traits::Float::exp(logits.data()[base + c * hw].as_f64() - max);
                sum += probs[c];
            }
            total += -(num_traits::Float::ln(probs[t as usize] / sum));
            let g = grad.data_mut();
            for c in 0..k {
                let pc = probs[c] / sum - if c == t as usize { 1.0 } else { 0.0 };
                g[base + c * hw] = R::lit(pc * inv);
            }
        }
    }
    Ok((total * inv, grad))
}

/// Mean squared difference over all elements, with the gradient w.r.t. `student`.
pub fn mse<R: Real>(student: &Tensor<R>, teacher: &Tensor<R>) -> (f64, Tensor<R>) {
    assert_eq!(student.shape(), teacher.shape(), "distillation logit shapes");
    let inv = 1.0 / student.len() as f64;
    let mut grad = Tensor::zeros(student.shape());
    let mut total = 0.0;
    for ((g, &s), &t) in grad.data_mut().iter_mut().zip(student.data()).zip(teacher.data()) {
        let d = (s - t).as_f64();
        total += d * d;
        *g = R::lit(2.0 * d * inv);
    }
    (total * inv, grad)
}

/// Gradients of the total loss with respect to the native-resolution logits.
#[derive(Debug, Clone)]
pub struct LossGrads<R> {
    pub main: Tensor<R>,
    pub aux: Vec<Tensor<R>>,
}

/// `CE(main) + sum_k aux_k * CE(aux_k) + kd * MSE(main, teacher)`, every
/// logit map upsampled to mask resolution first.
pub fn total_loss<R: Real>(
    main: &Tensor<R>,
    aux: &[&Tensor<R>],
    target: &[u8],
    mask_hw: (usize, usize),
    teacher: Option<&Tensor<R>>,
    spec: &LossSpec,
) -> Result<(LossBreakdown, LossGrads<R>), NnError> {
    let (mh, mw) = mask_hw;
    let up = upsample_bilinear(main, mh, mw);
    let (main_ce, mut dup) = cross_entropy(&up, target)?;
    let mut total = main_ce;
    let mut kd = None;
    if let Some(t) = teacher {
        let (l, mut g) = mse(&up, t);
        g.scale(R::lit(spec.kd_coeff));
        dup.add_assign(&g);
        total += spec.kd_coeff * l;
        kd = Some(l);
    }
    let dmain = upsample_bilinear_backward(&dup, main.h(), main.w());
    let mut aux_ce = Vec::with_capacity(aux.len());
    let mut daux = Vec::with_capacity(aux.len());
    for (k, a) in aux.iter().enumerate() {
        let coeff = spec.aux_coeff(k);
        let up = upsample_bilinear(a, mh, mw);
        let (l, mut g) = cross_entropy(&up, target)?;
        g.scale(R::lit(coeff));
        total += coeff * l;
        aux_ce.push(l);
        daux.push(upsample_bilinear_backward(&g, a.h(), a.w()));
    }
    if !total.is_finite() {
        return Err(NnError::NonFinite("loss"));
    }
    Ok((
        LossBreakdown {
            total,
            main_ce,
            aux_ce,
            kd,
        },
        LossGrads { main: dmain, aux: daux },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_two_class_is_ln2() {
        let logits = Tensor::new([1, 2, 1, 1], vec![0.0f64, 0.0]);
        let (l, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_nonnegative_and_vanishes_when_confident() {
        let logits = Tensor::new([1, 3, 1, 1], vec![40.0f64, 0.0, 0.0]);
        let (l, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!((0.0..1e-15).contains(&l));
        let logits = Tensor::new([1, 3, 1, 1], vec![1.0f64, 2.0, 0.5]);
        assert!(cross_entropy(&logits, &[0]).unwrap().0 > 0.0);
    }

    #[test]
    fn ignore_and_out_of_range() {
        let logits = Tensor::new([1, 2, 1, 2], vec![1.0f64, 0.0, 0.0, 3.0]);
        let (l, g) = cross_entropy(&logits, &[IGNORE_LABEL, 1]).unwrap();
        let (l2, _) = cross_entropy(&Tensor::new([1, 2, 1, 1], vec![0.0f64, 3.0]), &[1]).unwrap();
        assert!((l - l2).abs() < 1e-12);
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(
            cross_entropy(&logits, &[0, 2]).unwrap_err(),
            NnError::ClassOutOfRange { class: 2, num_classes: 2 }
        );
    }

    #[test]
    fn kd_zero_when_matching_and_aux_linearity() {
        let main = Tensor::new([1, 2, 2, 2], vec![0.1f64, -0.3, 0.5, 0.2, 1.0, 0.0, -1.0, 0.4]);
        let aux = main.clone();
        let target = [0u8, 1, 1, 0];
        let spec = LossSpec { kd_coeff: 0.3, aux_coeffs: vec![0.0] };
        let (b, _) = total_loss(&main, &[&aux], &target, (2, 2), Some(&main), &spec).unwrap();
        assert_eq!(b.kd, Some(0.0));
        assert_eq!(b.total, b.main_ce);
        let spec = LossSpec { kd_coeff: 0.3, aux_coeffs: vec![0.5] };
        let (b2, _) = total_loss(&main, &[&aux], &target, (2, 2), None, &spec).unwrap();
        assert!(b2.kd.is_none());
        assert!((b2.total - (b2.main_ce + 0.5 * b2.aux_ce[0])).abs() < 1e-12);
    }
}
