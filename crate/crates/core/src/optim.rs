//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamWState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.nrows(), p.ncols()), Matrix::zeros(p.nrows(), p.ncols())))
            .unzip();
        Self { step: 0, m, v }
    }
}

/// One update of every parameter. Gradients are checked for finiteness
/// before anything is modified.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut AdamWState,
    config: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("optimizer parameters", state.m.len(), grads.len()));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].shape() != p.shape() {
            return Err(Error::dim(
                format!("gradient of {}", names.get(k).map(String::as_str).unwrap_or("?")),
                p.len(),
                g.len(),
            ));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step: state.step + 1,
                param: names.get(k).cloned().unwrap_or_else(|| format!("#{k}")),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    for (k, p) in params.iter_mut().enumerate() {
        let g = &grads[k];
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for idx in 0..g.len() {
            let gi = g[idx];
            m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
            v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
            let m_hat = m[idx] / c1;
            let v_hat = v[idx] / c2;
            let pi = p[idx];
            p[idx] = pi - config.lr * (m_hat / (v_hat.sqrt() + config.eps)) - config.lr * config.weight_decay * pi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["p".into()]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Matrix::from_element(2, 2, 0.7);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..10 {
            adamw_step(&mut [&mut p], &[Matrix::zeros(2, 2)], &names(), &mut st, &cfg).unwrap();
        }
        assert_eq!(p, Matrix::from_element(2, 2, 0.7));
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut p = Matrix::from_element(1, 1, 2.0);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut expect = 2.0;
        for _ in 0..20 {
            adamw_step(&mut [&mut p], &[Matrix::zeros(1, 1)], &names(), &mut st, &cfg).unwrap();
            expect *= 1.0 - 0.1 * 0.5;
            assert!((p[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_is_sign_scaled_learning_rate() {
        let mut p = Matrix::from_element(1, 1, 0.0);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut [&mut p], &[Matrix::from_element(1, 1, 3.0)], &names(), &mut st, &cfg).unwrap();
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_step_and_name() {
        let mut p = Matrix::from_element(1, 2, 1.0);
        let mut st = AdamWState::new([&p]);
        let g = Matrix::from_row_slice(1, 2, &[0.0, f64::NAN]);
        let err = adamw_step(&mut [&mut p], &[g], &["expert0.w1".into()], &mut st, &Default::default())
            .unwrap_err();
        match err {
            Error::NonFiniteGradient { step, param } => {
                assert_eq!(step, 1);
                assert_eq!(param, "expert0.w1");
            }
            e => panic!("unexpected {e}"),
        }
        assert_eq!(p, Matrix::from_element(1, 2, 1.0));
        assert_eq!(st.step, 0);
    }
}
