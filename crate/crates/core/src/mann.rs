//! Mode-adaptive network: a gating perceptron produces `K` convex blending
//! coefficients, and the prediction perceptron runs with the
//! coefficient-weighted sum of `K` expert weight sets.
//!
//! Both perceptrons have one ELU hidden layer. Weight matrices are stored
//! `fan_in × fan_out` and applied to row vectors. Inputs are standardized
//! with the stored [`Normalizer`] before entering either network, and the
//! prediction network emits standardized outputs that [`MannWeights::predict`]
//! maps back to physical units.

use std::path::Path;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{elu_matrix, softmax_rows, Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::features::FeatureLayout;

/// Hidden sizes and expert count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkProfile {
    pub gating_hidden: usize,
    pub hidden: usize,
    pub experts: usize,
}

impl NetworkProfile {
    pub fn full() -> Self {
        Self {
            gating_hidden: 32,
            hidden: 512,
            experts: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            gating_hidden: 16,
            hidden: 64,
            experts: 4,
        }
    }
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MannConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Columns of the (standardized) input fed to the gating network.
    pub gating_indices: Vec<usize>,
    pub gating_hidden: usize,
    pub hidden: usize,
    pub experts: usize,
}

impl MannConfig {
    pub fn for_layout(layout: &FeatureLayout, profile: NetworkProfile) -> Self {
        Self {
            input_dim: layout.input_len(),
            output_dim: layout.output_len(),
            gating_indices: layout.gating_indices(),
            gating_hidden: profile.gating_hidden,
            hidden: profile.hidden,
            experts: profile.experts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("expert count must be at least 1".into()));
        }
        if self.hidden == 0 || self.gating_hidden == 0 || self.gating_indices.is_empty() {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if let Some(&bad) = self.gating_indices.iter().find(|&&i| i >= self.input_dim) {
            return Err(Error::Config(format!(
                "gating index {bad} outside input of length {}",
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Affine layer `x W + b` for a row vector `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Matrix::zeros(fan_in, fan_out),
            b: Matrix::zeros(1, fan_out),
        }
    }

    fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        Self {
            w: Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng)),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x * &self.w;
        for mut row in out.row_iter_mut() {
            row += &self.b;
        }
        out
    }

    fn scaled_add(&mut self, other: &Dense, c: f64) {
        self.w += &other.w * c;
        self.b += &other.b * c;
    }
}

/// One prediction-network weight set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub hidden: Dense,
    pub output: Dense,
}

impl Expert {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Dense::zeros(input, hidden),
            output: Dense::zeros(hidden, output),
        }
    }

    /// Single-hidden-layer forward on row-stacked inputs.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.output.apply(&elu_matrix(&self.hidden.apply(x)))
    }
}

/// Per-column standardization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

const MIN_STD: f64 = 1e-6;

fn column_stats<'a>(rows: impl Iterator<Item = &'a DVector<f64>>, dim: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for r in rows {
        count += 1;
        for j in 0..dim {
            let d = r[j] - mean[j];
            mean[j] += d / count as f64;
            m2[j] += d * (r[j] - mean[j]);
        }
    }
    let std = m2
        .iter()
        .map(|&s| {
            let sd = if count > 0 { (s / count as f64).sqrt() } else { 0.0 };
            if sd < MIN_STD {
                1.0
            } else {
                sd.max(floor)
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(input: usize, output: usize) -> Self {
        Self {
            x_mean: vec![0.0; input],
            x_std: vec![1.0; input],
            y_mean: vec![0.0; output],
            y_std: vec![1.0; output],
        }
    }

    /// Mean and population standard deviation per column; constant
    /// columns get unit scale and input scales are raised to at least
    /// `input_floor`.
    pub fn fit<'a>(
        xs: impl Iterator<Item = &'a DVector<f64>>,
        ys: impl Iterator<Item = &'a DVector<f64>>,
        input: usize,
        output: usize,
        input_floor: f64,
    ) -> Self {
        let (x_mean, x_std) = column_stats(xs, input, input_floor);
        let (y_mean, y_std) = column_stats(ys, output, 0.0);
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn normalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn normalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.y_mean.iter().zip(&self.y_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.y_mean.iter().zip(&self.y_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWeights {
    pub config: MannConfig,
    pub seed: u64,
    pub gating_hidden: Dense,
    pub gating_output: Dense,
    pub experts: Vec<Expert>,
    pub normalizer: Normalizer,
}

/// Node handles produced by [`MannWeights::forward_graph`].
#[derive(Debug, Clone)]
pub struct MannNodes {
    /// Parameter leaves in [`MannWeights::parameter_names`] order.
    pub params: Vec<NodeId>,
    pub theta: NodeId,
    /// Standardized prediction, `B × output_dim`.
    pub output: NodeId,
    /// Prediction in physical units.
    pub physical: NodeId,
}

fn shape_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(what, expected, got));
    }
    Ok(())
}

impl MannWeights {
    /// Xavier-uniform weights, zero biases, identity normalization.
    pub fn init(config: MannConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = config.gating_indices.len();
        let gating_hidden = Dense::xavier(g, config.gating_hidden, &mut rng);
        let gating_output = Dense::xavier(config.gating_hidden, config.experts, &mut rng);
        let experts = (0..config.experts)
            .map(|_| Expert {
                hidden: Dense::xavier(config.input_dim, config.hidden, &mut rng),
                output: Dense::xavier(config.hidden, config.output_dim, &mut rng),
            })
            .collect();
        let normalizer = Normalizer::identity(config.input_dim, config.output_dim);
        Ok(Self {
            config,
            seed,
            gating_hidden,
            gating_output,
            experts,
            normalizer,
        })
    }

    /// Every parameter set to zero.
    pub fn zeros(config: MannConfig) -> Result<Self> {
        config.validate()?;
        let g = config.gating_indices.len();
        Ok(Self {
            gating_hidden: Dense::zeros(g, config.gating_hidden),
            gating_output: Dense::zeros(config.gating_hidden, config.experts),
            experts: (0..config.experts)
                .map(|_| Expert::zeros(config.input_dim, config.hidden, config.output_dim))
                .collect(),
            normalizer: Normalizer::identity(config.input_dim, config.output_dim),
            seed: 0,
            config,
        })
    }

    pub fn experts(&self) -> usize {
        self.experts.len()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["gating.w1", "gating.b1", "gating.w2", "gating.b2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for j in 0..self.experts.len() {
            for p in ["w1", "b1", "w2", "b2"] {
                names.push(format!("expert{j}.{p}"));
            }
        }
        names
    }

    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut out = vec![
            &self.gating_hidden.w,
            &self.gating_hidden.b,
            &self.gating_output.w,
            &self.gating_output.b,
        ];
        for e in &self.experts {
            out.extend([&e.hidden.w, &e.hidden.b, &e.output.w, &e.output.b]);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.gating_hidden.w,
            &mut self.gating_hidden.b,
            &mut self.gating_output.w,
            &mut self.gating_output.b,
        ];
        for e in &mut self.experts {
            out.extend([
                &mut e.hidden.w,
                &mut e.hidden.b,
                &mut e.output.w,
                &mut e.output.b,
            ]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|m| m.len()).sum()
    }

    /// Blending coefficients for one gating input (already standardized).
    pub fn gating_forward(&self, x_hat: &[f64]) -> Result<DVector<f64>> {
        shape_check("gating input", self.config.gating_indices.len(), x_hat.len())?;
        let x = Matrix::from_row_slice(1, x_hat.len(), x_hat);
        let h = elu_matrix(&self.gating_hidden.apply(&x));
        let theta = softmax_rows(&self.gating_output.apply(&h));
        Ok(DVector::from_iterator(theta.ncols(), theta.iter().cloned()))
    }

    /// `Σ_j θ_j · expert_j`, tensor by tensor.
    pub fn blend_experts(&self, theta: &[f64]) -> Result<Expert> {
        blend_experts(&self.experts, theta)
    }

    fn gating_input(&self, x_std: &[f64]) -> Vec<f64> {
        self.config.gating_indices.iter().map(|&i| x_std[i]).collect()
    }

    /// Standardized output for a standardized input, via explicit blending.
    pub fn predict_standardized(&self, x_std: &[f64]) -> Result<DVector<f64>> {
        shape_check("network input", self.config.input_dim, x_std.len())?;
        let theta = self.gating_forward(&self.gating_input(x_std))?;
        let blended = self.blend_experts(theta.as_slice())?;
        let y = blended.forward(&Matrix::from_row_slice(1, x_std.len(), x_std));
        Ok(DVector::from_iterator(y.ncols(), y.iter().cloned()))
    }

    /// Physical-unit prediction `ŷ` for a physical-unit input `x`.
    pub fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        shape_check("network input", self.config.input_dim, x.len())?;
        let xs = self.normalizer.normalize_x(x.as_slice());
        let ys = self.predict_standardized(&xs)?;
        Ok(DVector::from_vec(self.normalizer.denormalize_y(ys.as_slice())))
    }

    /// Records the batched forward pass on `g`. `x_std` holds standardized
    /// inputs as rows. The mixture is evaluated as
    /// `h = ELU(Σ_j θ_j (x W1_j + b1_j))`, `y = Σ_j θ_j (h W2_j + b2_j)`,
    /// which equals running the blended network row by row.
    pub fn forward_graph(&self, g: &mut Graph, x_std: Matrix) -> Result<MannNodes> {
        shape_check("network input", self.config.input_dim, x_std.ncols())?;
        let params: Vec<NodeId> = self.parameters().into_iter().map(|m| g.leaf(m.clone())).collect();
        let x = g.leaf(x_std);
        let xg = g.gather_cols(x, Rc::new(self.config.gating_indices.clone()))?;
        let gh = g.matmul(xg, params[0])?;
        let gh = g.add_row(gh, params[1])?;
        let gh = g.elu(gh);
        let logits = g.matmul(gh, params[2])?;
        let logits = g.add_row(logits, params[3])?;
        let theta = g.softmax(logits)?;
        let k = self.experts.len();
        let mut coeff = Vec::with_capacity(k);
        for j in 0..k {
            coeff.push(g.column(theta, j)?);
        }
        let mut hidden = None;
        for j in 0..k {
            let p = &params[4 + 4 * j..8 + 4 * j];
            let h = g.matmul(x, p[0])?;
            let h = g.add_row(h, p[1])?;
            let h = g.scale_rows(h, coeff[j])?;
            hidden = Some(match hidden {
                None => h,
                Some(acc) => g.add(acc, h)?,
            });
        }
        let h = g.elu(hidden.expect("at least one expert"));
        let mut out = None;
        for j in 0..k {
            let p = &params[4 + 4 * j..8 + 4 * j];
            let y = g.matmul(h, p[2])?;
            let y = g.add_row(y, p[3])?;
            let y = g.scale_rows(y, coeff[j])?;
            out = Some(match out {
                None => y,
                Some(acc) => g.add(acc, y)?,
            });
        }
        let output = out.expect("at least one expert");
        let scaled = g.scale_cols(output, Rc::new(self.normalizer.y_std.clone()))?;
        let mean = g.leaf(Matrix::from_row_slice(1, self.config.output_dim, &self.normalizer.y_mean));
        let physical = g.add_row(scaled, mean)?;
        Ok(MannNodes {
            params,
            theta,
            output,
            physical,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: self.config.hash(),
            weights: self.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.into_weights()
    }
}

pub const CHECKPOINT_FORMAT: &str = "pibc-mann v1";

/// On-disk form of [`MannWeights`]: JSON with shapes implied by the stored
/// matrices, the init seed and the config hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub weights: MannWeights,
}

impl Checkpoint {
    pub fn into_weights(self) -> Result<MannWeights> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format `{}`", self.format)));
        }
        let w = self.weights;
        if w.config.hash() != self.config_hash {
            return Err(Error::Parse("checkpoint config hash mismatch".into()));
        }
        w.config.validate()?;
        let c = &w.config;
        let expect = |m: &Matrix, r: usize, cols: usize, what: &str| -> Result<()> {
            if m.shape() != (r, cols) {
                return Err(Error::Parse(format!(
                    "{what} has shape {:?}, expected {:?}",
                    m.shape(),
                    (r, cols)
                )));
            }
            Ok(())
        };
        expect(&w.gating_hidden.w, c.gating_indices.len(), c.gating_hidden, "gating.w1")?;
        expect(&w.gating_hidden.b, 1, c.gating_hidden, "gating.b1")?;
        expect(&w.gating_output.w, c.gating_hidden, c.experts, "gating.w2")?;
        expect(&w.gating_output.b, 1, c.experts, "gating.b2")?;
        if w.experts.len() != c.experts {
            return Err(Error::dim("experts", c.experts, w.experts.len()));
        }
        for e in &w.experts {
            expect(&e.hidden.w, c.input_dim, c.hidden, "expert.w1")?;
            expect(&e.hidden.b, 1, c.hidden, "expert.b1")?;
            expect(&e.output.w, c.hidden, c.output_dim, "expert.w2")?;
            expect(&e.output.b, 1, c.output_dim, "expert.b2")?;
        }
        let n = &w.normalizer;
        if n.x_mean.len() != c.input_dim
            || n.x_std.len() != c.input_dim
            || n.y_mean.len() != c.output_dim
            || n.y_std.len() != c.output_dim
        {
            return Err(Error::Parse("normalizer size does not match network".into()));
        }
        Ok(w)
    }
}

/// Tensor-wise `Σ_j θ_j · experts[j]`.
pub fn blend_experts(experts: &[Expert], theta: &[f64]) -> Result<Expert> {
    shape_check("blending coefficients", experts.len(), theta.len())?;
    let first = experts
        .first()
        .ok_or_else(|| Error::Config("no experts to blend".into()))?;
    let mut out = Expert {
        hidden: Dense::zeros(first.hidden.w.nrows(), first.hidden.w.ncols()),
        output: Dense::zeros(first.output.w.nrows(), first.output.w.ncols()),
    };
    for (e, &t) in experts.iter().zip(theta) {
        if e.hidden.w.shape() != first.hidden.w.shape() || e.output.w.shape() != first.output.w.shape() {
            return Err(Error::Config("experts have different shapes".into()));
        }
        out.hidden.scaled_add(&e.hidden, t);
        out.output.scaled_add(&e.output, t);
    }
    Ok(out)
}

/// Stacks vectors as the rows of a matrix.
pub fn stack_rows(rows: &[&[f64]]) -> DMatrix<f64> {
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}
