//! Chamfer generation losses, the fine-tuning objective and cross-entropy.

use crate::error::{invalid_arg, shape_err, Result};
use crate::geometry::Point;
use crate::nncore::{Graph, Scalar, Var};

/// Per-point discrepancy used inside the Chamfer distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferForm {
    /// L1 distance `|dx| + |dy| + |dz|`.
    L1,
    /// Squared Euclidean distance.
    L2,
}

#[inline]
fn point_dist<T: Scalar>(a: &[T], b: &[T], form: ChamferForm) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    match form {
        ChamferForm::L1 => dx.abs() + dy.abs() + dz.abs(),
        ChamferForm::L2 => dx * dx + dy * dy + dz * dz,
    }
}

/// Chamfer distance of two flat `xyz` point lists plus nearest witnesses.
///
/// Returns `(value, witness_of_a_in_b, witness_of_b_in_a)`; ties go to the
/// lower index.
pub(crate) fn chamfer_kernel<T: Scalar>(a: &[T], b: &[T], form: ChamferForm) -> (T, Vec<usize>, Vec<usize>) {
    let na = a.len() / 3;
    let nb = b.len() / 3;
    let mut best_a = vec![T::infinity(); na];
    let mut wit_a = vec![0usize; na];
    let mut best_b = vec![T::infinity(); nb];
    let mut wit_b = vec![0usize; nb];
    for i in 0..na {
        let pa = &a[3 * i..3 * i + 3];
        for j in 0..nb {
            let d = point_dist(pa, &b[3 * j..3 * j + 3], form);
            if d < best_a[i] {
                best_a[i] = d;
                wit_a[i] = j;
            }
            if d < best_b[j] {
                best_b[j] = d;
                wit_b[j] = i;
            }
        }
    }
    let sa: T = best_a.iter().copied().sum();
    let sb: T = best_b.iter().copied().sum();
    let value = sa / T::c(na as f64) + sb / T::c(nb as f64);
    (value, wit_a, wit_b)
}

fn flatten(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Symmetric Chamfer distance between two nonempty point sets.
pub fn chamfer(a: &[Point], b: &[Point], form: ChamferForm) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid_arg("chamfer needs two nonempty point sets"));
    }
    Ok(chamfer_kernel(&flatten(a), &flatten(b), form).0)
}

/// Generation loss split into its two Chamfer forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationLoss {
    pub cd_l1: f64,
    pub cd_l2: f64,
}

impl GenerationLoss {
    pub fn total(&self) -> f64 {
        self.cd_l1 + self.cd_l2
    }
}

/// Mean over patch pairs of `chamfer_l1 + chamfer_l2`.
///
/// Both inputs are flat lists of `patches * k` points.
pub fn generation_loss(pred: &[Point], target: &[Point], k: usize) -> Result<GenerationLoss> {
    if k == 0 || pred.len() != target.len() || !pred.len().is_multiple_of(k) || pred.is_empty() {
        return Err(shape_err(format!(
            "generation_loss: {} predicted vs {} target points with k = {k}",
            pred.len(),
            target.len()
        )));
    }
    let g = pred.len() / k;
    let (mut l1, mut l2) = (0.0, 0.0);
    for i in 0..g {
        let a = &pred[i * k..(i + 1) * k];
        let b = &target[i * k..(i + 1) * k];
        l1 += chamfer(a, b, ChamferForm::L1)?;
        l2 += chamfer(a, b, ChamferForm::L2)?;
    }
    Ok(GenerationLoss {
        cd_l1: l1 / g as f64,
        cd_l2: l2 / g as f64,
    })
}

/// `L_d + lambda * L_g`.
pub fn finetune_loss(downstream: f64, generation: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(invalid_arg(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(downstream + lambda * generation)
}

/// Softmax cross-entropy of one logit vector.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(invalid_arg(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label])
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub generation: f64,
    pub downstream: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Differentiable generation loss nodes `(cd_l1, cd_l2, sum)` on a graph.
pub fn generation_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, k: usize) -> (Var, Var, Var) {
    let l1 = g.chamfer(pred, target, k, k, ChamferForm::L1);
    let l2 = g.chamfer(pred, target, k, k, ChamferForm::L2);
    let total = g.add(l1, l2);
    (l1, l2, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_values() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &b, ChamferForm::L1).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &b, ChamferForm::L2).unwrap(), 2.0);
        let a2 = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let b2 = [[0.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a2, &b2, ChamferForm::L2).unwrap(), 2.0);
        assert_eq!(chamfer(&a2, &a2, ChamferForm::L1).unwrap(), 0.0);
        assert!(chamfer(&[], &b2, ChamferForm::L1).is_err());
    }

    #[test]
    fn generation_loss_edges() {
        let p = [[0.1, 0.2, 0.3], [0.0, -0.1, 0.2]];
        let perfect = generation_loss(&p, &p, 2).unwrap();
        assert_eq!(perfect.total(), 0.0);
        let q = [[0.0, 0.0, 0.0], [0.5, -0.1, 0.2]];
        let one = generation_loss(&p, &q, 2).unwrap();
        let direct = chamfer(&p, &q, ChamferForm::L1).unwrap() + chamfer(&p, &q, ChamferForm::L2).unwrap();
        assert_eq!(one.total(), direct);
        assert!(generation_loss(&p, &q[..1], 1).is_err());
    }

    #[test]
    fn finetune_and_ce() {
        assert_eq!(finetune_loss(0.7, 0.2, 0.0).unwrap(), 0.7);
        assert_eq!(finetune_loss(0.7, 0.0, 3.0).unwrap(), 0.7);
        assert!((finetune_loss(0.7, 0.2, 3.0).unwrap() - 1.3).abs() < 1e-15);
        assert!(finetune_loss(0.7, 0.2, -1.0).is_err());
        assert!((cross_entropy(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-20);
        assert!(cross_entropy(&[0.0], 1).is_err());
    }

    fn pts() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_nonnegative(a in pts(), b in pts()) {
            for form in [ChamferForm::L1, ChamferForm::L2] {
                let ab = chamfer(&a, &b, form).unwrap();
                let ba = chamfer(&b, &a, form).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!(ab >= 0.0);
            }
        }
    }
}
