//! Autoregressive generation with pose integration and drift correction.
//!
//! Step `i` assembles the network input from data up to `i − 1` only:
//! past window slots hold the velocities actually applied. The `k = 0` and
//! later slots mix the waypoint-derived velocity command with the last
//! applied velocity (`k = 0`) or the previous prediction's future samples.
//! The pose entries hold the integrated base pose and the previously
//! predicted joints. The predicted `k = 0`
//! twist is corrected, integrated, and pushed to the history.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::{DVector, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::correction::{correct_twist, CorrectionGains, WaypointSchedule};
use crate::error::{Error, Result};
use crate::features::{extract_output, ContactThresholds, ContactTracker, FeatureLayout, WindowConfig};
use crate::kinematics::{forward_kinematics, frame_jacobian_by_index, KinematicState, KinematicTree};
use crate::mann::MannWeights;
use crate::so3::{self, EulerOrder};
use crate::trajectory::{Support, Trajectory, TrajectoryStep};

pub const LOG_SCHEMA: &str = "# schema: pibc-rollout v1";
const RENORMALIZE_EVERY: usize = 50;

/// Anything that maps an input vector to an output vector.
pub trait MotionModel {
    fn layout(&self) -> FeatureLayout;
    fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl MotionModel for MannWeights {
    fn layout(&self) -> FeatureLayout {
        FeatureLayout::new((self.config.input_dim - 78) / 2)
    }

    fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        MannWeights::predict(self, x)
    }
}

/// Nearest-neighbour lookup over stored pairs.
#[derive(Debug, Clone)]
pub struct MemorizingModel {
    pub layout: FeatureLayout,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl MotionModel for MemorizingModel {
    fn layout(&self) -> FeatureLayout {
        self.layout
    }

    fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let best = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, v)| (i, (v - x).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| Error::Config("memorizing model is empty".into()))?;
        Ok(self.outputs[best.0].clone())
    }
}

/// Returns a fixed vector.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    pub layout: FeatureLayout,
    pub output: DVector<f64>,
}

impl MotionModel for ConstantModel {
    fn layout(&self) -> FeatureLayout {
        self.layout
    }

    fn predict(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.output.clone())
    }
}

/// `p ← p + R v dt`, `R ← R exp(ω dt)`.
pub fn integrate_base(
    position: &Vector3<f64>,
    rotation: &Rotation3<f64>,
    twist: &Vector6<f64>,
    dt: f64,
) -> (Vector3<f64>, Rotation3<f64>) {
    let v: Vector3<f64> = twist.fixed_rows::<3>(0).into();
    let w: Vector3<f64> = twist.fixed_rows::<3>(3).into();
    (position + rotation * v * dt, rotation * so3::exp(&(w * dt)))
}

/// Re-projects onto SO(3) via the polar factor.
pub fn renormalize(r: &Rotation3<f64>) -> Rotation3<f64> {
    Rotation3::from_matrix_eps(r.matrix(), 1e-15, 20, *r)
}

/// Initial conditions taken from a reference trajectory at frame `start`:
/// applied-velocity history up to `start − 1`, the state at `start − 1`,
/// and the reference target vector at `start − 1` standing in for the
/// previous prediction.
#[derive(Debug, Clone)]
pub struct RolloutSeed {
    pub history: Vec<Vector6<f64>>,
    pub state: KinematicState,
    pub previous_output: DVector<f64>,
}

impl RolloutSeed {
    pub fn from_trajectory(traj: &Trajectory, start: usize, window: &WindowConfig) -> Result<Self> {
        let need = (-window.input_offsets()[0]) as usize;
        if start < need || start == 0 || start > traj.len() {
            return Err(Error::Contract(format!(
                "rollout start {start} needs at least {need} frames of history"
            )));
        }
        let previous_output = extract_output(traj, start - 1, window)?.ok_or_else(|| {
            Error::Contract(format!("reference too short for a future window at {}", start - 1))
        })?;
        Ok(Self {
            history: traj.steps[..start].iter().map(|s| s.state.base_velocity).collect(),
            state: traj.steps[start - 1].state.clone(),
            previous_output,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub steps: usize,
    pub rate_hz: f64,
    pub gains: CorrectionGains,
    pub correction: bool,
    pub window: WindowConfig,
    pub contacts: ContactThresholds,
    /// Weight of the waypoint-derived desired velocity in the current and
    /// future input slots. The remainder is the last applied velocity for
    /// the current slot and the previous prediction for future slots.
    pub command_blend: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            rate_hz: 50.0,
            gains: CorrectionGains::default(),
            correction: true,
            window: WindowConfig::default(),
            contacts: ContactThresholds {
                height: 0.02,
                speed: 0.5,
                max_gap: 0.5,
            },
            command_blend: 1.0,
        }
    }
}

impl RolloutConfig {
    pub fn effective_gains(&self) -> CorrectionGains {
        if self.correction {
            self.gains
        } else {
            CorrectionGains::off()
        }
    }
}

/// World pitch and height of one foot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FootTrace {
    pub pitch: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogStep {
    pub step: usize,
    pub time: f64,
    pub predicted: DVector<f64>,
    pub state: KinematicState,
    /// False when Tait-Bryan extraction hit gimbal lock; the rollout
    /// continued on the rotation matrix.
    pub angles_valid: bool,
    pub support: Support,
    /// `J_SF ν` in the support-foot frame.
    pub support_velocity: Vector6<f64>,
    pub left: FootTrace,
    pub right: FootTrace,
}

impl LogStep {
    pub fn support_foot(&self) -> FootTrace {
        if self.support.is_left() {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub rate_hz: f64,
    pub steps: Vec<LogStep>,
}

fn foot_trace(pose: &nalgebra::Isometry3<f64>) -> FootTrace {
    let r = pose.rotation.to_rotation_matrix();
    let (_, pitch, _) = r.euler_angles();
    FootTrace {
        pitch,
        height: pose.translation.vector.z,
    }
}

fn angles(r: &Rotation3<f64>) -> (Vector3<f64>, bool) {
    match so3::tait_bryan_from_rotation(r, EulerOrder::Xyz) {
        Ok(a) => (a, true),
        Err(_) => {
            let (a, b, c) = r.euler_angles();
            (Vector3::new(a, b, c), false)
        }
    }
}

/// Source of one input velocity slot, by frame offset `o` relative to the
/// step being predicted.
#[derive(Debug, Clone, Copy)]
enum SlotSource {
    /// `o < 0`: applied-velocity history.
    History(i64),
    /// `o = 0`: last applied velocity.
    Current,
    /// `o > 0`: previous prediction, interpolated between output slots
    /// `lo` and `hi` with weight `w` on `hi`. The previous prediction was
    /// made one frame earlier, so frame offset `o` is its offset `o + 1`.
    Future { lo: usize, hi: usize, w: f64 },
}

struct InputAssembler {
    layout: FeatureLayout,
    slots: Vec<(i64, SlotSource)>,
}

impl InputAssembler {
    fn new(layout: FeatureLayout, window: &WindowConfig) -> Self {
        let out = window.output_offsets();
        let last = out.len() - 1;
        let slots = window
            .input_offsets()
            .iter()
            .map(|&o| {
                let src = if o < 0 {
                    SlotSource::History(o)
                } else if o == 0 {
                    SlotSource::Current
                } else {
                    let t = (o + 1).min(out[last]);
                    let hi = (1..=last).find(|&k| out[k] >= t).unwrap_or(last);
                    let lo = hi - 1;
                    let w = (t - out[lo]) as f64 / (out[hi] - out[lo]) as f64;
                    SlotSource::Future { lo, hi, w }
                };
                (o, src)
            })
            .collect();
        Self { layout, slots }
    }

    /// Frame offsets of the slots that lie at or after the predicted step.
    fn command_offsets(&self) -> Vec<i64> {
        self.slots.iter().map(|s| s.0).filter(|&o| o >= 0).collect()
    }

    fn assemble(
        &self,
        history: &VecDeque<Vector6<f64>>,
        prev: &DVector<f64>,
        desired: &[Vector6<f64>],
        blend: f64,
        state: &KinematicState,
        psi: &Vector3<f64>,
    ) -> DVector<f64> {
        let n = self.layout.n;
        let mut x = DVector::zeros(self.layout.input_len());
        let len = history.len() as i64;
        let twist_at = |k: usize| {
            Vector6::new(
                prev[3 * k],
                prev[3 * k + 1],
                prev[3 * k + 2],
                prev[21 + 3 * k],
                prev[21 + 3 * k + 1],
                prev[21 + 3 * k + 2],
            )
        };
        let mut commanded = desired.iter();
        for (slot, &(_, src)) in self.slots.iter().enumerate() {
            let own = match src {
                // history holds frames up to i − 1; offset o is frame i + o
                SlotSource::History(o) => history[(len + o) as usize],
                SlotSource::Current => *history.back().expect("history is nonempty"),
                SlotSource::Future { lo, hi, w } => twist_at(lo) * (1.0 - w) + twist_at(hi) * w,
            };
            let t = match src {
                SlotSource::History(_) => own,
                _ if blend == 0.0 => own,
                _ => own * (1.0 - blend) + commanded.next().expect("one command per slot") * blend,
            };
            for c in 0..3 {
                x[3 * slot + c] = t[c];
                x[36 + 3 * slot + c] = t[3 + c];
            }
        }
        let base = 72;
        for j in 0..n {
            x[base + j] = state.joints[j];
            x[base + n + j] = state.joint_velocities[j];
        }
        for c in 0..3 {
            x[base + 2 * n + c] = state.position[c];
            x[base + 2 * n + 3 + c] = psi[c];
        }
        x
    }
}

/// Runs `config.steps` autoregressive steps.
pub fn rollout<M: MotionModel + ?Sized>(
    model: &M,
    tree: &KinematicTree,
    seed: &RolloutSeed,
    waypoints: &WaypointSchedule,
    config: &RolloutConfig,
) -> Result<TrajectoryLog> {
    let layout = model.layout();
    if layout.n != tree.dof() || seed.state.dof() != tree.dof() {
        return Err(Error::dim("model joints", tree.dof(), layout.n));
    }
    if seed.previous_output.len() != layout.output_len() {
        return Err(Error::dim("seed output", layout.output_len(), seed.previous_output.len()));
    }
    let need = (-config.window.input_offsets()[0]) as usize;
    if seed.history.len() < need {
        return Err(Error::Contract(format!(
            "history has {} frames, the input window needs {need}",
            seed.history.len()
        )));
    }
    if !(0.0..=1.0).contains(&config.command_blend) {
        return Err(Error::Config(format!(
            "command blend must be in [0, 1], got {}",
            config.command_blend
        )));
    }
    let assembler = InputAssembler::new(layout, &config.window);
    let gains = config.effective_gains();
    let dt = 1.0 / config.rate_hz;
    let mut history: VecDeque<Vector6<f64>> = seed.history[seed.history.len() - need..].iter().copied().collect();
    let mut prev = seed.previous_output.clone();
    let mut state = seed.state.clone();
    let (mut psi, _) = angles(&state.rotation);
    let lf = tree.foot_index(true);
    let rf = tree.foot_index(false);
    let mut tracker = ContactTracker::new(config.contacts, None)?;
    let mut log = TrajectoryLog {
        rate_hz: config.rate_hz,
        steps: Vec::with_capacity(config.steps),
    };
    let sd = layout.output_joint_velocities();
    let sj = layout.output_joints();
    for step in 0..config.steps {
        let time = (step + 1) as f64 * dt;
        // frame i + o of the step that produces frame i sits at schedule
        // time `time + o·dt`
        let desired: Vec<Vector6<f64>> = if config.command_blend == 0.0 {
            Vec::new()
        } else {
            assembler
                .command_offsets()
                .iter()
                .map(|&o| waypoints.desired_twist(time + o as f64 * dt, dt))
                .collect()
        };
        let x = assembler.assemble(&history, &prev, &desired, config.command_blend, &state, &psi);
        let y = model.predict(&x)?;
        if y.len() != layout.output_len() {
            return Err(Error::dim("model output", layout.output_len(), y.len()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePrediction { step });
        }
        let twist = Vector6::new(y[0], y[1], y[2], y[21], y[22], y[23]);
        let twist = if gains.is_off() {
            twist
        } else {
            let desired = waypoints.desired_at(time - dt);
            correct_twist(&twist, &state.position, &state.rotation, &desired, &gains)
        };
        let (p, mut r) = integrate_base(&state.position, &state.rotation, &twist, dt);
        if (step + 1) % RENORMALIZE_EVERY == 0 {
            r = renormalize(&r);
        }
        state = KinematicState {
            position: p,
            rotation: r,
            joints: DVector::from_column_slice(&y.as_slice()[sj.clone()]),
            base_velocity: twist,
            joint_velocities: DVector::from_column_slice(&y.as_slice()[sd.clone()]),
        };
        let (a, valid) = angles(&r);
        if !valid {
            log::warn!("gimbal lock at rollout step {step}; continuing on the rotation matrix");
        }
        psi = a;
        history.pop_front();
        history.push_back(twist);

        let fk = forward_kinematics(tree, &state.base_pose(), state.joints.as_slice())?;
        let (lt, rt) = (foot_trace(fk.by_index(lf)), foot_trace(fk.by_index(rf)));
        let jl = frame_jacobian_by_index(tree, state.joints.as_slice(), lf)?;
        let jr = frame_jacobian_by_index(tree, state.joints.as_slice(), rf)?;
        let vl = jl.apply(&state.base_velocity, &state.joint_velocities);
        let vr = jr.apply(&state.base_velocity, &state.joint_velocities);
        let ground = lt.height.min(rt.height);
        let support = tracker.update(
            (lt.height - ground, vl.fixed_rows::<3>(0).norm()),
            (rt.height - ground, vr.fixed_rows::<3>(0).norm()),
        );
        log.steps.push(LogStep {
            step,
            time,
            predicted: y.clone(),
            state: state.clone(),
            angles_valid: valid,
            support,
            support_velocity: if support.is_left() { vl } else { vr },
            left: lt,
            right: rt,
        });
        prev = y;
    }
    Ok(log)
}

impl TrajectoryLog {
    pub fn duration(&self) -> f64 {
        self.steps.len() as f64 / self.rate_hz
    }

    /// The generated motion as a plain trajectory with support labels.
    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory {
            rate_hz: self.rate_hz,
            steps: self
                .steps
                .iter()
                .map(|s| TrajectoryStep {
                    time: s.time,
                    state: s.state.clone(),
                    support: Some(s.support),
                })
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{LOG_SCHEMA}")?;
        let n = self.steps.first().map(|s| s.state.dof()).unwrap_or(0);
        let m = self.steps.first().map(|s| s.predicted.len()).unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "step", "time", "px", "py", "pz", "roll", "pitch", "yaw", "angles_valid", "vx", "vy", "vz", "wx",
            "wy", "wz",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..n).map(|i| format!("s_{i}")));
        header.extend((0..n).map(|i| format!("sd_{i}")));
        header.extend(
            ["alpha", "sf_vx", "sf_vy", "sf_vz", "sf_wx", "sf_wy", "sf_wz", "lf_pitch", "lf_height", "rf_pitch", "rf_height"]
                .iter()
                .map(|s| s.to_string()),
        );
        header.extend((0..m).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for s in &self.steps {
            let (a, _) = angles(&s.state.rotation);
            let mut row: Vec<String> = vec![s.step.to_string(), s.time.to_string()];
            row.extend(s.state.position.iter().map(|v| v.to_string()));
            row.extend(a.iter().map(|v| v.to_string()));
            row.push(u8::from(s.angles_valid).to_string());
            row.extend(s.state.base_velocity.iter().map(|v| v.to_string()));
            row.extend(s.state.joints.iter().map(|v| v.to_string()));
            row.extend(s.state.joint_velocities.iter().map(|v| v.to_string()));
            row.push(s.support.alpha().to_string());
            row.extend(s.support_velocity.iter().map(|v| v.to_string()));
            for f in [s.left, s.right] {
                row.push(f.pitch.to_string());
                row.push(f.height.to_string());
            }
            row.extend(s.predicted.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// A straight synthetic walk used as the rollout reference: it supplies
/// the seed history and, frame by frame, the desired poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceWalk {
    pub step_length: f64,
    /// Frame of the reference at which generation starts.
    pub start: usize,
    pub asymmetry: f64,
}

impl Default for ReferenceWalk {
    fn default() -> Self {
        Self {
            step_length: 0.25,
            start: 100,
            asymmetry: 0.0,
        }
    }
}

impl ReferenceWalk {
    /// Reference trajectory long enough for `steps` generated frames plus
    /// the future window, with the matching seed and waypoint schedule.
    pub fn build(
        &self,
        tree: &KinematicTree,
        dims: &crate::biped::BipedDims,
        config: &RolloutConfig,
    ) -> Result<(Trajectory, RolloutSeed, WaypointSchedule)> {
        let horizon = *config.window.output_offsets().last().expect("output window") as usize;
        let frames = self.start + config.steps + horizon + 1;
        let mut params = crate::synth::GaitParams::forward_walk(self.step_length, frames as f64 / config.rate_hz);
        params.asymmetry = self.asymmetry;
        params.rate_hz = config.rate_hz;
        let traj = crate::synth::generate_gait(tree, dims, &params)?;
        let seed = RolloutSeed::from_trajectory(&traj, self.start, &config.window)?;
        // desired pose for the step that starts at rollout time t is
        // reference frame start − 1 + t·rate
        let wp = WaypointSchedule::from_trajectory(&traj, self.start - 1)?;
        Ok((traj, seed, wp))
    }
}

/// Support-foot velocity accumulated over a rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FootSlide {
    /// `Σ_i ‖v_SF,i‖`, m/s summed over steps.
    pub linear_sum: f64,
    /// `Σ_i ‖ω_SF,i‖`, rad/s summed over steps.
    pub angular_sum: f64,
    /// The sums divided by the duration in seconds.
    pub linear_per_second: f64,
    pub angular_per_second: f64,
}

pub fn metric_foot_slide(log: &TrajectoryLog) -> FootSlide {
    let (mut lin, mut ang) = (0.0, 0.0);
    for s in &log.steps {
        lin += s.support_velocity.fixed_rows::<3>(0).norm();
        ang += s.support_velocity.fixed_rows::<3>(3).norm();
    }
    let t = log.duration().max(f64::MIN_POSITIVE);
    FootSlide {
        linear_sum: lin,
        angular_sum: ang,
        linear_per_second: lin / t,
        angular_per_second: ang / t,
    }
}

/// Same accumulation for a labelled trajectory, with `J_SF ν` computed
/// from the truth support column.
pub fn trajectory_foot_slide(tree: &KinematicTree, traj: &Trajectory) -> Result<FootSlide> {
    let (mut lin, mut ang) = (0.0, 0.0);
    for s in &traj.steps {
        let support = s
            .support
            .ok_or_else(|| Error::Contract("trajectory has no support labels".into()))?;
        let j = frame_jacobian_by_index(tree, s.state.joints.as_slice(), tree.foot_index(support.is_left()))?;
        let v = j.apply(&s.state.base_velocity, &s.state.joint_velocities);
        lin += v.fixed_rows::<3>(0).norm();
        ang += v.fixed_rows::<3>(3).norm();
    }
    let t = traj.duration().max(f64::MIN_POSITIVE);
    Ok(FootSlide {
        linear_sum: lin,
        angular_sum: ang,
        linear_per_second: lin / t,
        angular_per_second: ang / t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Per step `(t, dx, dy, dz, roll, pitch, yaw)` relative to the
    /// rollout's first pose.
    pub series: Vec<[f64; 7]>,
    pub terminal_lateral: f64,
    pub terminal_yaw: f64,
    /// Terminal deviation from the desired pose at the final time.
    pub terminal_position_error: f64,
    pub terminal_yaw_error: f64,
}

impl DriftReport {
    pub fn ground_path(&self) -> Vec<(f64, f64)> {
        self.series.iter().map(|r| (r[1], r[2])).collect()
    }
}

/// Displacements are in the frame of the start pose; yaw is measured
/// against the start heading.
pub fn metric_drift(log: &TrajectoryLog, start: &KinematicState, desired: &WaypointSchedule) -> DriftReport {
    let r0 = start.rotation;
    let mut series = Vec::with_capacity(log.steps.len());
    for s in &log.steps {
        let d = r0.inverse() * (s.state.position - start.position);
        let rel = r0.inverse() * s.state.rotation;
        let (a, _) = angles(&rel);
        series.push([s.time, d.x, d.y, d.z, a.x, a.y, a.z]);
    }
    let last = series.last().copied().unwrap_or([0.0; 7]);
    let (pos_err, yaw_err) = match log.steps.last() {
        Some(s) => {
            let want = desired.desired_at(s.time);
            let rel = want.rotation.inverse() * s.state.rotation;
            let (a, _) = angles(&rel);
            ((s.state.position - want.position).norm(), a.z)
        }
        None => (0.0, 0.0),
    };
    DriftReport {
        series,
        terminal_lateral: last[2],
        terminal_yaw: last[6],
        terminal_position_error: pos_err,
        terminal_yaw_error: yaw_err,
    }
}

/// Per-step foot pitch and height for both feet plus the annotated support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootTraces {
    pub time: Vec<f64>,
    pub left: Vec<FootTrace>,
    pub right: Vec<FootTrace>,
    pub support: Vec<Support>,
}

pub fn metric_foot_traces(log: &TrajectoryLog) -> FootTraces {
    FootTraces {
        time: log.steps.iter().map(|s| s.time).collect(),
        left: log.steps.iter().map(|s| s.left).collect(),
        right: log.steps.iter().map(|s| s.right).collect(),
        support: log.steps.iter().map(|s| s.support).collect(),
    }
}

pub const FOOT_TRACE_SCHEMA: &str = "# schema: pibc-foot-traces v1";

impl FootTraces {
    pub fn from_trajectory(tree: &KinematicTree, traj: &Trajectory) -> Result<Self> {
        let mut out = FootTraces {
            time: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            support: Vec::new(),
        };
        for s in &traj.steps {
            let fk = forward_kinematics(tree, &s.state.base_pose(), s.state.joints.as_slice())?;
            out.time.push(s.time);
            out.left.push(foot_trace(fk.by_index(tree.foot_index(true))));
            out.right.push(foot_trace(fk.by_index(tree.foot_index(false))));
            out.support.push(s.support.unwrap_or(Support::Left));
        }
        Ok(out)
    }

    /// Contiguous runs of the same support foot as index ranges.
    pub fn stance_phases(&self) -> Vec<(Support, std::ops::Range<usize>)> {
        let mut out: Vec<(Support, std::ops::Range<usize>)> = Vec::new();
        for (i, &s) in self.support.iter().enumerate() {
            match out.last_mut() {
                Some((sup, r)) if *sup == s => r.end = i + 1,
                _ => out.push((s, i..i + 1)),
            }
        }
        out
    }

    fn support_trace(&self, i: usize) -> FootTrace {
        if self.support[i].is_left() {
            self.left[i]
        } else {
            self.right[i]
        }
    }

    /// Largest `|pitch|` of the support foot.
    pub fn max_support_pitch(&self) -> f64 {
        (0..self.time.len())
            .map(|i| self.support_trace(i).pitch.abs())
            .fold(0.0, f64::max)
    }

    /// Pooled standard deviation of support-foot height about each stance
    /// phase's own mean.
    pub fn support_height_std(&self) -> f64 {
        let (mut ss, mut count) = (0.0, 0usize);
        for (_, r) in self.stance_phases() {
            let hs: Vec<f64> = r.clone().map(|i| self.support_trace(i).height).collect();
            let mean = hs.iter().sum::<f64>() / hs.len() as f64;
            ss += hs.iter().map(|h| (h - mean).powi(2)).sum::<f64>();
            count += hs.len();
        }
        if count == 0 {
            0.0
        } else {
            (ss / count as f64).sqrt()
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W, label: &str) -> Result<()> {
        writeln!(out, "{FOOT_TRACE_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "time", "lf_pitch", "lf_height", "rf_pitch", "rf_height", "alpha"])?;
        for i in 0..self.time.len() {
            w.write_record([
                label.to_string(),
                self.time[i].to_string(),
                self.left[i].pitch.to_string(),
                self.left[i].height.to_string(),
                self.right[i].pitch.to_string(),
                self.right[i].height.to_string(),
                self.support[i].alpha().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Metrics written next to a rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub steps: usize,
    pub duration: f64,
    pub correction: bool,
    pub gains: CorrectionGains,
    pub foot_slide: FootSlide,
    pub max_support_pitch: f64,
    pub support_height_std: f64,
    pub terminal_x: f64,
    pub terminal_lateral: f64,
    pub terminal_yaw: f64,
    pub terminal_position_error: f64,
    pub terminal_yaw_error: f64,
    pub gimbal_lock_steps: usize,
}

pub fn summarize(
    log: &TrajectoryLog,
    start: &KinematicState,
    desired: &WaypointSchedule,
    config: &RolloutConfig,
) -> RolloutSummary {
    let drift = metric_drift(log, start, desired);
    let traces = metric_foot_traces(log);
    RolloutSummary {
        steps: log.steps.len(),
        duration: log.duration(),
        correction: !config.effective_gains().is_off(),
        gains: config.effective_gains(),
        foot_slide: metric_foot_slide(log),
        max_support_pitch: traces.max_support_pitch(),
        support_height_std: traces.support_height_std(),
        terminal_x: drift.series.last().map(|r| r[1]).unwrap_or(0.0),
        terminal_lateral: drift.terminal_lateral,
        terminal_yaw: drift.terminal_yaw,
        terminal_position_error: drift.terminal_position_error,
        terminal_yaw_error: drift.terminal_yaw_error,
        gimbal_lock_steps: log.steps.iter().filter(|s| !s.angles_valid).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biped::{biped_tree, BipedDims};
    use crate::correction::Pose;
    use crate::features::{trajectory_samples, ContactThresholds};
    use crate::synth::{generate_gait, GaitParams};
    use std::f64::consts::PI;

    #[test]
    fn integrate_base_cases() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let r = Rotation3::from_euler_angles(0.1, 0.2, 0.3);
        assert_eq!(integrate_base(&p, &r, &Vector6::zeros(), 0.02), (p, r * so3::exp(&Vector3::zeros())));
        let (_, r2) = integrate_base(
            &Vector3::zeros(),
            &Rotation3::identity(),
            &Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, PI / 2.0),
            1.0,
        );
        let expect = Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 2.0);
        assert!((r2.matrix() - expect.matrix()).abs().max() < 1e-15);
    }

    #[test]
    fn circle_closes_after_one_period() {
        let dt = 0.02;
        let twist = Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let (mut p, mut r) = (Vector3::zeros(), Rotation3::identity());
        let steps = (2.0 * PI / dt).round() as usize;
        for _ in 0..steps {
            (p, r) = integrate_base(&p, &r, &twist, dt);
        }
        // radius 1, so 1% of the circumference scale
        assert!(p.norm() < 0.01 * 2.0 * PI, "{}", p.norm());
    }

    #[test]
    fn rotation_stays_orthonormal_over_long_runs() {
        let twist = Vector6::new(0.3, 0.1, 0.0, 0.7, -1.1, 0.4);
        let (mut p, mut r) = (Vector3::zeros(), Rotation3::identity());
        for k in 1..=10_000 {
            (p, r) = integrate_base(&p, &r, &twist, 0.02);
            if k % RENORMALIZE_EVERY == 0 {
                r = renormalize(&r);
            }
        }
        assert!(so3::orthonormality_error(r.matrix()) <= 1e-8);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    fn reference(seconds: f64) -> (KinematicTree, Trajectory) {
        let dims = BipedDims::default();
        let tree = biped_tree(0, &dims);
        let traj = generate_gait(&tree, &dims, &GaitParams::forward_walk(0.25, seconds)).unwrap();
        (tree, traj)
    }

    fn memorizer(tree: &KinematicTree, traj: &Trajectory) -> MemorizingModel {
        let samples =
            trajectory_samples(tree, traj, &WindowConfig::default(), ContactThresholds::default()).unwrap();
        MemorizingModel {
            layout: FeatureLayout::new(tree.dof()),
            inputs: samples.iter().map(|s| s.x.clone()).collect(),
            outputs: samples.iter().map(|s| s.y.clone()).collect(),
        }
    }

    #[test]
    fn memorizing_model_tracks_reference() {
        let (tree, traj) = reference(12.0);
        let model = memorizer(&tree, &traj);
        let start = 100;
        let seed = RolloutSeed::from_trajectory(&traj, start, &WindowConfig::default()).unwrap();
        let cfg = RolloutConfig {
            steps: 100,
            correction: false,
            ..Default::default()
        };
        let wp = WaypointSchedule::from_trajectory(&traj, start).unwrap();
        let log = rollout(&model, &tree, &seed, &wp, &cfg).unwrap();
        assert_eq!(log.steps.len(), 100);
        for s in &log.steps {
            let truth = &traj.steps[start + s.step].state;
            assert!((s.state.position - truth.position).norm() < 0.1);
        }
    }

    #[test]
    fn zero_gains_equal_disabled_correction_bitwise() {
        let (tree, traj) = reference(8.0);
        let model = memorizer(&tree, &traj);
        let seed = RolloutSeed::from_trajectory(&traj, 60, &WindowConfig::default()).unwrap();
        let wp = WaypointSchedule::constant(Pose {
            position: Vector3::new(5.0, 1.0, 0.9),
            rotation: Rotation3::identity(),
        });
        let a = rollout(
            &model,
            &tree,
            &seed,
            &wp,
            &RolloutConfig {
                steps: 40,
                correction: false,
                ..Default::default()
            },
        )
        .unwrap();
        let b = rollout(
            &model,
            &tree,
            &seed,
            &wp,
            &RolloutConfig {
                steps: 40,
                gains: CorrectionGains::off(),
                ..Default::default()
            },
        )
        .unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn zero_output_model_with_correction_returns_to_waypoint() {
        let (tree, traj) = reference(4.0);
        let layout = FeatureLayout::new(6);
        let mut out = DVector::zeros(layout.output_len());
        // constant straight legs
        out.as_mut_slice()[layout.output_joints()].fill(0.0);
        let model = ConstantModel { layout, output: out };
        let mut seed = RolloutSeed::from_trajectory(&traj, 60, &WindowConfig::default()).unwrap();
        seed.state.position += Vector3::new(0.3, -0.2, 0.0);
        let target = Pose {
            position: traj.steps[59].state.position,
            rotation: traj.steps[59].state.rotation,
        };
        let wp = WaypointSchedule::constant(target);
        let log = rollout(&model, &tree, &seed, &wp, &RolloutConfig::default()).unwrap();
        let e0 = (seed.state.position - target.position).norm();
        let e = (log.steps.last().unwrap().state.position - target.position).norm();
        assert!(e < e0 * 0.01, "{e} vs {e0}");
    }

    #[test]
    fn non_finite_prediction_aborts_with_step() {
        let (tree, traj) = reference(4.0);
        let layout = FeatureLayout::new(6);
        let model = ConstantModel {
            layout,
            output: DVector::from_element(layout.output_len(), f64::NAN),
        };
        let seed = RolloutSeed::from_trajectory(&traj, 60, &WindowConfig::default()).unwrap();
        let wp = WaypointSchedule::from_trajectory(&traj, 60).unwrap();
        let err = rollout(&model, &tree, &seed, &wp, &RolloutConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinitePrediction { step: 0 }));
    }

    #[test]
    fn short_history_is_rejected() {
        let (_, traj) = reference(4.0);
        assert!(RolloutSeed::from_trajectory(&traj, 20, &WindowConfig::default()).is_err());
    }

    #[test]
    fn oracle_trajectory_has_no_slide_and_flat_stance() {
        let (tree, traj) = reference(10.0);
        let slide = trajectory_foot_slide(&tree, &traj).unwrap();
        assert!(slide.linear_sum <= 1e-8 && slide.angular_sum <= 1e-8, "{slide:?}");
        let traces = FootTraces::from_trajectory(&tree, &traj).unwrap();
        assert_eq!(traces.left[0].pitch, 0.0);
        assert!(traces.support_height_std() <= 1e-6);
        assert!(traces.max_support_pitch() <= 1e-9);
    }

    #[test]
    fn constant_support_speed_sums_linearly() {
        let (tree, traj) = reference(4.0);
        let layout = FeatureLayout::new(6);
        let seed = RolloutSeed::from_trajectory(&traj, 60, &WindowConfig::default()).unwrap();
        let mut y = DVector::zeros(layout.output_len());
        y[0] = 0.2;
        let model = ConstantModel { layout, output: y };
        let cfg = RolloutConfig {
            steps: 250,
            correction: false,
            ..Default::default()
        };
        let wp = WaypointSchedule::from_trajectory(&traj, 60).unwrap();
        let log = rollout(&model, &tree, &seed, &wp, &cfg).unwrap();
        let m = metric_foot_slide(&log);
        // straight legs translating at 0.2 m/s for 5 s
        assert!((m.linear_sum - 50.0 * 5.0 * 0.2).abs() < 1e-9, "{m:?}");
        assert!((m.linear_per_second - 50.0 * 0.2).abs() < 1e-9);
        let drift = metric_drift(&log, &seed.state, &wp);
        assert!(drift.terminal_lateral.abs() < 1e-12 && drift.terminal_yaw.abs() < 1e-12);
    }

    #[test]
    fn yaw_bias_open_and_closed_loop() {
        let (tree, traj) = reference(4.0);
        let layout = FeatureLayout::new(6);
        let seed = RolloutSeed::from_trajectory(&traj, 60, &WindowConfig::default()).unwrap();
        let b = 0.05;
        let mut y = DVector::zeros(layout.output_len());
        y[23] = b;
        let model = ConstantModel { layout, output: y };
        let wp = WaypointSchedule::constant(Pose {
            position: seed.state.position,
            rotation: seed.state.rotation,
        });
        let open = rollout(
            &model,
            &tree,
            &seed,
            &wp,
            &RolloutConfig {
                steps: 500,
                correction: false,
                ..Default::default()
            },
        )
        .unwrap();
        let d = metric_drift(&open, &seed.state, &wp);
        assert!((d.terminal_yaw - b * 10.0).abs() < 1e-9, "{}", d.terminal_yaw);
        let closed = rollout(&model, &tree, &seed, &wp, &RolloutConfig { steps: 500, ..Default::default() }).unwrap();
        let d = metric_drift(&closed, &seed.state, &wp);
        assert!((d.terminal_yaw - b / 1.0).abs() < 0.05 * b, "{}", d.terminal_yaw);
    }
}
