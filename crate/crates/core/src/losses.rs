//! Data loss, support-foot constraint loss and their weighted sum.
//!
//! Plain functions evaluate single samples directly and serve as the
//! reference for the batched graph version used in training.

use std::rc::Rc;

use nalgebra::{DMatrix, DVector, Vector6};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::kinematics::FrameJacobian;
use crate::trajectory::Support;

/// `mean_b ‖ŷ_b − y_b‖²`.
pub fn data_loss(pred: &[DVector<f64>], target: &[DVector<f64>]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("batch size", target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.len() != t.len() {
            return Err(Error::dim("prediction length", t.len(), p.len()));
        }
        total += (p - t).norm_squared();
    }
    Ok(total / pred.len() as f64)
}

/// `α A_LF + (1 − α) A_RF` with `A = (J^B)⁻¹ J^ṡ`.
pub fn blended_support_map(j_lf: &FrameJacobian, j_rf: &FrameJacobian, alpha: f64) -> Result<DMatrix<f64>> {
    let support = Support::from_alpha(alpha)?;
    Ok(match support {
        Support::Left => j_lf.support_map(),
        Support::Right => j_rf.support_map(),
    })
}

/// `[v̂; ω̂] + A ṡ̂` for a physical-unit prediction.
pub fn pi_residual(y_hat: &DVector<f64>, layout: &FeatureLayout, map: &DMatrix<f64>) -> Result<Vector6<f64>> {
    if y_hat.len() != layout.output_len() {
        return Err(Error::dim("prediction length", layout.output_len(), y_hat.len()));
    }
    if map.shape() != (6, layout.n) {
        return Err(Error::dim("support map columns", layout.n, map.ncols()));
    }
    let sdot = y_hat.rows(layout.output_joint_velocities().start, layout.n);
    let mut r: Vector6<f64> = (map * sdot).fixed_rows::<6>(0).into_owned();
    for (k, &c) in layout.output_current_velocity().iter().enumerate() {
        r[k] += y_hat[c];
    }
    Ok(r)
}

/// Squared norm of the support-foot constraint residual for one sample.
pub fn pi_loss(
    y_hat: &DVector<f64>,
    layout: &FeatureLayout,
    j_lf: &FrameJacobian,
    j_rf: &FrameJacobian,
    alpha: f64,
) -> Result<f64> {
    let map = blended_support_map(j_lf, j_rf, alpha)?;
    Ok(pi_residual(y_hat, layout, &map)?.norm_squared())
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub data: f64,
    pub pi: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn combine(data: f64, pi: f64, weight: f64) -> Self {
        Self {
            data,
            pi,
            total: data + weight * pi,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.is_finite() && self.pi.is_finite() && self.total.is_finite()
    }
}

/// `L_D + w·L_B` from per-sample parts. `pred_data`/`target` are compared
/// directly; `pred_physical` feeds the constraint term.
pub fn total_loss(
    pred_data: &[DVector<f64>],
    target: &[DVector<f64>],
    pred_physical: &[DVector<f64>],
    maps: &[DMatrix<f64>],
    layout: &FeatureLayout,
    weight: f64,
) -> Result<LossTerms> {
    if weight < 0.0 {
        return Err(Error::Config(format!("PI weight must be nonnegative, got {weight}")));
    }
    if pred_physical.len() != maps.len() {
        return Err(Error::dim("support maps", pred_physical.len(), maps.len()));
    }
    let data = data_loss(pred_data, target)?;
    let mut pi = 0.0;
    for (y, m) in pred_physical.iter().zip(maps) {
        pi += pi_residual(y, layout, m)?.norm_squared();
    }
    if !pred_physical.is_empty() {
        pi /= pred_physical.len() as f64;
    }
    Ok(LossTerms::combine(data, pi, weight))
}

/// Loss nodes recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub data: NodeId,
    pub pi: NodeId,
    /// `data + w·pi`; equals `data` when `w = 0` so the constraint term is
    /// reported without entering the gradient.
    pub total: NodeId,
}

/// Records both loss terms for a batch. `output` is compared against the
/// rows of `target`; `physical` supplies `(v̂, ω̂, ṡ̂)`; `maps[b]` is the
/// 6×n support map of row `b`.
pub fn graph_losses(
    g: &mut Graph,
    output: NodeId,
    physical: NodeId,
    target: Matrix,
    maps: Rc<Vec<Matrix>>,
    layout: &FeatureLayout,
    weight: f64,
) -> Result<LossNodes> {
    let batch = target.nrows().max(1) as f64;
    let t = g.leaf(target);
    let diff = g.sub(output, t)?;
    let sq = g.sum_sq(diff);
    let data = g.scale(sq, 1.0 / batch);
    let vel = g.gather_cols(physical, Rc::new(layout.output_current_velocity().to_vec()))?;
    let sd = g.gather_cols(physical, Rc::new(layout.output_joint_velocities().collect()))?;
    let mapped = g.rowwise_linear(sd, maps)?;
    let r = g.add(vel, mapped)?;
    let sq = g.sum_sq(r);
    let pi = g.scale(sq, 1.0 / batch);
    let total = if weight > 0.0 {
        let wp = g.scale(pi, weight);
        g.add(data, wp)?
    } else {
        data
    };
    Ok(LossNodes { data, pi, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biped::{biped_tree, BipedDims};
    use crate::features::{trajectory_samples, ContactThresholds, WindowConfig};
    use crate::kinematics::frame_jacobian;
    use crate::synth::{generate_gait, GaitParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn data_loss_cases() {
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(data_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let b = a.add_scalar(1.0);
        assert_eq!(data_loss(&[b], &[a.clone()]).unwrap(), 4.0);
        assert!(data_loss(&[a.clone()], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<_> = (0..8).map(|_| random_vec(&mut rng, 5)).collect();
        let t: Vec<_> = (0..8).map(|_| random_vec(&mut rng, 5)).collect();
        let mut reference = 0.0;
        for b in 0..8 {
            for k in 0..5 {
                reference += (p[b][k] - t[b][k]).powi(2) / 8.0;
            }
        }
        assert!((data_loss(&p, &t).unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn pi_loss_rejects_fractional_alpha() {
        let tree = biped_tree(0, &BipedDims::default());
        let j = frame_jacobian(&tree, &[0.0; 6], "LF").unwrap();
        let y = DVector::zeros(FeatureLayout::new(6).output_len());
        let err = pi_loss(&y, &FeatureLayout::new(6), &j, &j, 0.5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(pi_loss(&y, &FeatureLayout::new(6), &j, &j, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn exact_cancellation_gives_zero() {
        let tree = biped_tree(0, &BipedDims::default());
        let layout = FeatureLayout::new(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let jl = frame_jacobian(&tree, &s, "LF").unwrap();
            let jr = frame_jacobian(&tree, &s, "RF").unwrap();
            let mut y = random_vec(&mut rng, layout.output_len());
            let sdot = y.rows(layout.output_joint_velocities().start, 6).into_owned();
            let v = -jr.support_map() * sdot;
            for (k, &c) in layout.output_current_velocity().iter().enumerate() {
                y[c] = v[k];
            }
            assert!(pi_loss(&y, &layout, &jl, &jr, 0.0).unwrap() <= 1e-18 * 100.0);
        }
    }

    #[test]
    fn ground_truth_samples_have_zero_pi_loss() {
        let dims = BipedDims::default();
        let tree = biped_tree(0, &dims);
        let traj = generate_gait(&tree, &dims, &GaitParams::forward_walk(0.3, 6.0)).unwrap();
        let layout = FeatureLayout::new(6);
        let samples =
            trajectory_samples(&tree, &traj, &WindowConfig::default(), ContactThresholds::default()).unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            let l = pi_loss(&s.y, &layout, &s.j_lf, &s.j_rf, s.alpha()).unwrap();
            assert!(l <= 1e-8, "{l}");
        }
    }

    #[test]
    fn total_loss_weight_behaviour() {
        let layout = FeatureLayout::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<_> = (0..4).map(|_| random_vec(&mut rng, layout.output_len())).collect();
        let t: Vec<_> = (0..4).map(|_| random_vec(&mut rng, layout.output_len())).collect();
        let maps: Vec<_> = (0..4).map(|_| DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let l0 = total_loss(&p, &t, &p, &maps, &layout, 0.0).unwrap();
        assert_eq!(l0.total, data_loss(&p, &t).unwrap());
        let l10 = total_loss(&p, &t, &p, &maps, &layout, 10.0).unwrap();
        let l20 = total_loss(&p, &t, &p, &maps, &layout, 20.0).unwrap();
        assert!(((l20.total - l10.total) - 10.0 * l10.pi).abs() < 1e-12);
        assert!(l20.total >= l10.total && l10.total >= l0.total);
        assert!(total_loss(&p, &t, &p, &maps, &layout, -1.0).is_err());
        let perfect = total_loss(&t, &t, &vec![DVector::zeros(layout.output_len()); 4], &maps, &layout, 10.0)
            .unwrap();
        assert_eq!(perfect.total, 0.0);
    }

    #[test]
    fn graph_losses_match_plain_and_fd() {
        let layout = FeatureLayout::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = 5;
        let o = layout.output_len();
        let y = DMatrix::from_fn(rows, o, |_, _| rng.gen_range(-1.0..1.0));
        let target = DMatrix::from_fn(rows, o, |_, _| rng.gen_range(-1.0..1.0));
        let maps: Vec<Matrix> = (0..rows).map(|_| DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let eval = |y: &DMatrix<f64>| {
            let mut g = Graph::new();
            let yn = g.leaf(y.clone());
            let n = graph_losses(&mut g, yn, yn, target.clone(), Rc::new(maps.clone()), &layout, 10.0).unwrap();
            (g.scalar(n.total), g.scalar(n.data), g.scalar(n.pi))
        };
        let rows_of = |m: &DMatrix<f64>| -> Vec<DVector<f64>> {
            (0..rows).map(|i| m.row(i).transpose()).collect()
        };
        let plain = total_loss(&rows_of(&y), &rows_of(&target), &rows_of(&y), &maps, &layout, 10.0).unwrap();
        let (t, d, p) = eval(&y);
        assert!((t - plain.total).abs() < 1e-12 && (d - plain.data).abs() < 1e-12 && (p - plain.pi).abs() < 1e-12);
        let mut g = Graph::new();
        let yn = g.leaf(y.clone());
        let n = graph_losses(&mut g, yn, yn, target.clone(), Rc::new(maps.clone()), &layout, 10.0).unwrap();
        g.backward(n.total).unwrap();
        let grad = g.grad(yn);
        let eps = 1e-6;
        for i in 0..rows {
            for j in 0..o {
                let mut a = y.clone();
                a[(i, j)] += eps;
                let mut b = y.clone();
                b[(i, j)] -= eps;
                let fd = (eval(&a).0 - eval(&b).0) / (2.0 * eps);
                let rel = (fd - grad[(i, j)]).abs() / fd.abs().max(grad[(i, j)].abs()).max(1e-8);
                assert!(rel <= 1e-6, "({i},{j}) {fd} vs {}", grad[(i, j)]);
            }
        }
    }

    #[test]
    fn zero_weight_keeps_pi_out_of_gradient() {
        let layout = FeatureLayout::new(1);
        let y = DMatrix::from_element(2, layout.output_len(), 0.5);
        let maps = Rc::new(vec![DMatrix::from_element(6, 1, 1.0); 2]);
        let mut g = Graph::new();
        let yn = g.leaf(y.clone());
        let n = graph_losses(&mut g, yn, yn, y.clone(), maps, &layout, 0.0).unwrap();
        g.backward(n.total).unwrap();
        assert!(g.scalar(n.pi) > 0.0);
        assert_eq!(g.grad(yn).abs().max(), 0.0);
    }
}
