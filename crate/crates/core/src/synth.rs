//! Synthetic biped gaits that satisfy the support-foot constraint exactly.
//!
//! Each step is one single-support phase of fixed duration, with the
//! support exchange at the boundary. The stance shank stays vertical
//! (`knee = −hip_pitch`), so the pelvis stays level and the stance foot
//! flat. The swing hip mirrors the stance hip, and the swing knee adds a
//! bump `δ(τ)` whose peak sets the foot clearance. Hip yaws steer and
//! strafe.
//!
//! The base pose is the fixed support-foot pose composed with the inverse
//! foot-from-base transform, and the base velocity is the one that holds
//! the support foot still. Every joint is at rest at each exchange.

use std::f64::consts::PI;

use nalgebra::{DVector, Isometry3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biped::{leg_joint_indices, BipedDims};
use crate::error::{Error, Result};
use crate::kinematics::{
    base_velocity_from_constraint, forward_kinematics, frame_jacobian_by_index, KinematicState,
    KinematicTree,
};
use crate::trajectory::{Support, Trajectory, TrajectoryStep, DEFAULT_RATE_HZ};

/// What the robot does during one segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// Signed base advance per step along the stepping direction, yaw change
    /// per step, and hip-yaw offset of the stepping direction.
    Walk {
        step_length: f64,
        #[serde(default)]
        turn: f64,
        #[serde(default)]
        strafe: f64,
    },
    Stand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub motion: Motion,
    /// Seconds, rounded down to whole steps while walking.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    pub stance_duration: f64,
    pub swing_duration: f64,
    pub clearance: f64,
    pub segments: Vec<Segment>,
    /// Left/right bias: adds `0.04·a` rad of turn per step and `0.1·a` rad of
    /// strafe while walking.
    #[serde(default)]
    pub asymmetry: f64,
    /// Scale of the upper-body swing on the extra joints.
    #[serde(default = "default_arm_amplitude")]
    pub arm_amplitude: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
}

fn default_arm_amplitude() -> f64 {
    0.5
}

fn default_rate() -> f64 {
    DEFAULT_RATE_HZ
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            stance_duration: 0.5,
            swing_duration: 0.5,
            clearance: 0.05,
            segments: vec![Segment {
                motion: Motion::Walk {
                    step_length: 0.25,
                    turn: 0.0,
                    strafe: 0.0,
                },
                duration: 10.0,
            }],
            asymmetry: 0.0,
            arm_amplitude: default_arm_amplitude(),
            seed: 0,
            rate_hz: DEFAULT_RATE_HZ,
        }
    }
}

const TURN_BIAS: f64 = 0.04;
const STRAFE_BIAS: f64 = 0.1;

impl GaitParams {
    /// Straight forward walk for `duration` seconds.
    pub fn forward_walk(step_length: f64, duration: f64) -> Self {
        Self {
            segments: vec![Segment {
                motion: Motion::Walk {
                    step_length,
                    turn: 0.0,
                    strafe: 0.0,
                },
                duration,
            }],
            ..Self::default()
        }
    }

    pub fn steps_per_phase(&self) -> usize {
        (self.swing_duration * self.rate_hz).round() as usize
    }

    pub fn validate(&self, dims: &BipedDims) -> Result<()> {
        let bad = |m: String| Err(Error::GaitParams(m));
        if !(self.stance_duration > 0.0 && self.swing_duration > 0.0) {
            return bad("durations must be positive".into());
        }
        if self.stance_duration != self.swing_duration {
            return bad(format!(
                "stance duration {} must equal swing duration {} (instantaneous support exchange)",
                self.stance_duration, self.swing_duration
            ));
        }
        let frames = self.swing_duration * self.rate_hz;
        if (frames - frames.round()).abs() > 1e-9 || frames.round() < 2.0 {
            return bad(format!(
                "swing duration {} is not a whole number (≥ 2) of {} Hz frames",
                self.swing_duration, self.rate_hz
            ));
        }
        if !(self.clearance > 0.0 && self.clearance < dims.shank) {
            return bad(format!("clearance {} outside (0, {})", self.clearance, dims.shank));
        }
        for seg in &self.segments {
            if !(seg.duration >= 0.0) {
                return bad("segment duration must be nonnegative".into());
            }
            if let Motion::Walk {
                step_length,
                turn,
                strafe,
            } = seg.motion
            {
                let effective = step_length.abs();
                if effective >= 2.0 * dims.thigh {
                    return bad(format!(
                        "step length {step_length} unreachable with thigh {}",
                        dims.thigh
                    ));
                }
                if !(turn.is_finite() && strafe.is_finite() && turn.abs() < 1.0 && strafe.abs() <= PI / 2.0)
                {
                    return bad(format!("turn {turn} or strafe {strafe} out of range"));
                }
            }
        }
        Ok(())
    }
}

/// `u(τ) = τ − sin(2πτ)/2π`: rest-to-rest, C¹, `u(0)=0`, `u(1)=1`.
fn cycloid(tau: f64) -> (f64, f64) {
    (
        tau - (2.0 * PI * tau).sin() / (2.0 * PI),
        1.0 - (2.0 * PI * tau).cos(),
    )
}

/// `δ(τ) = δmax (1 − cos 2πτ)/2` and its τ-derivative.
fn bump(tau: f64, peak: f64) -> (f64, f64) {
    (
        peak * (1.0 - (2.0 * PI * tau).cos()) * 0.5,
        peak * PI * (2.0 * PI * tau).sin(),
    )
}

#[derive(Debug, Clone, Copy)]
struct StepPlan {
    phi: f64,
    turn: f64,
    strafe: f64,
}

struct Generator<'a> {
    tree: &'a KinematicTree,
    legs: [[usize; 3]; 2],
    extras: Vec<(usize, f64)>,
    arm_amplitude: f64,
    dims: BipedDims,
    frames_per_step: usize,
    step_time: f64,
    peak: f64,
    rate: f64,
    support: Support,
    foot_world: Isometry3<f64>,
    phi_prev: f64,
    yaw_stance: f64,
    yaw_swing: f64,
    joints: DVector<f64>,
    out: Trajectory,
}

impl<'a> Generator<'a> {
    fn new(tree: &'a KinematicTree, params: &GaitParams, dims: BipedDims) -> Result<Self> {
        let left = leg_joint_indices(tree, true)
            .ok_or_else(|| Error::Model("left leg joints not found".into()))?;
        let right = leg_joint_indices(tree, false)
            .ok_or_else(|| Error::Model("right leg joints not found".into()))?;
        let names = tree.joint_names();
        let extras = names
            .iter()
            .enumerate()
            .filter(|(i, _)| !left.contains(i) && !right.contains(i))
            .map(|(i, name)| {
                let side = if name.starts_with("l_") {
                    1.0
                } else if name.starts_with("r_") {
                    -1.0
                } else {
                    0.0
                };
                let k: f64 = name
                    .rsplit('_')
                    .next()
                    .and_then(|d| d.parse().ok())
                    .unwrap_or(0.0);
                (i, side / (k + 1.0))
            })
            .collect();
        let n = tree.dof();
        let joints = DVector::zeros(n);
        let start = KinematicState::standing(n, dims.standing_height());
        // first step swings the left leg
        let support = Support::Right;
        let fk = forward_kinematics(tree, &start.base_pose(), joints.as_slice())?;
        let foot_world = *fk.by_index(tree.foot_index(support.is_left()));
        let mut g = Self {
            tree,
            legs: [left, right],
            extras,
            arm_amplitude: params.arm_amplitude,
            dims,
            frames_per_step: params.steps_per_phase(),
            step_time: params.swing_duration,
            peak: (1.0 - params.clearance / dims.shank).acos(),
            rate: params.rate_hz,
            support,
            foot_world,
            phi_prev: 0.0,
            yaw_stance: 0.0,
            yaw_swing: 0.0,
            joints,
            out: Trajectory::new(params.rate_hz),
        };
        let sdot = DVector::zeros(n);
        g.push(0, sdot)?;
        Ok(g)
    }

    fn leg(&self, support: Support) -> [usize; 3] {
        if support.is_left() {
            self.legs[0]
        } else {
            self.legs[1]
        }
    }

    /// Appends a frame for the current joints, deriving the base pose and
    /// velocity from the fixed support foot.
    fn push(&mut self, frame: usize, sdot: DVector<f64>) -> Result<()> {
        let s = self.joints.as_slice();
        let foot = self.tree.foot_index(self.support.is_left());
        let rel = self.tree.relative_poses(s)?;
        let base = self.foot_world * rel[foot].inverse();
        let j = frame_jacobian_by_index(self.tree, s, foot)?;
        let v: Vector6<f64> = base_velocity_from_constraint(&j, &sdot);
        let state = KinematicState {
            position: base.translation.vector,
            rotation: base.rotation.to_rotation_matrix(),
            joints: self.joints.clone(),
            base_velocity: v,
            joint_velocities: sdot,
        };
        self.out.steps.push(TrajectoryStep {
            time: frame as f64 / self.rate,
            state,
            support: Some(self.support),
        });
        Ok(())
    }

    fn set_extras(&mut self, hip_left: f64, hip_left_rate: f64, sdot: &mut DVector<f64>) {
        for &(i, c) in &self.extras {
            self.joints[i] = self.arm_amplitude * c * hip_left;
            sdot[i] = self.arm_amplitude * c * hip_left_rate;
        }
    }

    fn step(&mut self, plan: StepPlan) -> Result<()> {
        let st = self.leg(self.support);
        let sw = self.leg(self.support.flipped());
        let n = self.tree.dof();
        let (h0, h1) = (-self.phi_prev, plan.phi);
        let (ys0, ys1) = (self.yaw_stance, self.yaw_stance - plan.turn);
        let (yw0, yw1) = (self.yaw_swing, plan.strafe + plan.turn * 0.5);
        let t = self.step_time;
        for k in 1..=self.frames_per_step {
            let tau = k as f64 / self.frames_per_step as f64;
            let (u, du) = cycloid(tau);
            let (d, dd) = bump(tau, self.peak);
            let h = h0 + (h1 - h0) * u;
            let hd = (h1 - h0) * du / t;
            let mut sdot = DVector::zeros(n);
            self.joints[st[0]] = ys0 + (ys1 - ys0) * u;
            sdot[st[0]] = (ys1 - ys0) * du / t;
            self.joints[st[1]] = h;
            sdot[st[1]] = hd;
            self.joints[st[2]] = -h;
            sdot[st[2]] = -hd;
            self.joints[sw[0]] = yw0 + (yw1 - yw0) * u;
            sdot[sw[0]] = (yw1 - yw0) * du / t;
            self.joints[sw[1]] = -h;
            sdot[sw[1]] = -hd;
            self.joints[sw[2]] = h + d;
            sdot[sw[2]] = hd + dd / t;
            let (hl, hld) = if self.support.is_left() { (h, hd) } else { (-h, -hd) };
            self.set_extras(hl, hld, &mut sdot);
            if k == self.frames_per_step {
                // exact rest at the exchange
                self.joints[sw[2]] = h;
                sdot.fill(0.0);
            }
            let frame = self.out.len();
            self.push(frame, sdot)?;
        }
        // support exchange: the swing foot becomes the fixed foot
        let base = self.out.steps.last().expect("frame pushed").state.base_pose();
        let fk = forward_kinematics(self.tree, &base, self.joints.as_slice())?;
        let new_support = self.support.flipped();
        self.foot_world = *fk.by_index(self.tree.foot_index(new_support.is_left()));
        self.support = new_support;
        self.phi_prev = plan.phi;
        self.yaw_stance = yw1;
        self.yaw_swing = ys1;
        Ok(())
    }

    /// Both feet stay planted; the label keeps the foot that supported the
    /// last frame.
    fn stand(&mut self, frames: usize) -> Result<()> {
        let n = self.tree.dof();
        let label = self.out.steps.last().and_then(|s| s.support);
        for _ in 0..frames {
            let frame = self.out.len();
            self.push(frame, DVector::zeros(n))?;
            self.out.steps.last_mut().expect("frame pushed").support = label;
        }
        Ok(())
    }

    fn phi(&self, step_length: f64) -> f64 {
        (step_length / (2.0 * self.dims.thigh)).asin()
    }
}

/// Generates a trajectory with truth support labels. The first frame is a
/// standing pose with the base at the origin; a closing step is inserted
/// before every stand that follows walking.
pub fn generate_gait(tree: &KinematicTree, dims: &BipedDims, params: &GaitParams) -> Result<Trajectory> {
    params.validate(dims)?;
    let mut g = Generator::new(tree, params, *dims)?;
    let step_time = params.swing_duration;
    let mut walking = false;
    for seg in &params.segments {
        match seg.motion {
            Motion::Walk {
                step_length,
                turn,
                strafe,
            } => {
                let steps = (seg.duration / step_time + 1e-9).floor() as usize;
                let plan = StepPlan {
                    phi: g.phi(step_length),
                    turn: turn + params.asymmetry * TURN_BIAS,
                    strafe: strafe + params.asymmetry * STRAFE_BIAS,
                };
                for _ in 0..steps {
                    g.step(plan)?;
                }
                walking |= steps > 0;
            }
            Motion::Stand => {
                let mut frames = (seg.duration * params.rate_hz).round() as usize;
                if walking {
                    g.step(StepPlan {
                        phi: 0.0,
                        turn: 0.0,
                        strafe: 0.0,
                    })?;
                    frames = frames.saturating_sub(g.frames_per_step);
                    walking = false;
                }
                g.stand(frames)?;
            }
        }
    }
    Ok(g.out)
}

/// Worst support-foot residuals over the labelled stance samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// max ‖J_SF ν‖ linear part, m/s.
    pub max_linear: f64,
    /// max ‖J_SF ν‖ angular part, rad/s.
    pub max_angular: f64,
    /// max support-foot displacement from its pose at the start of the
    /// phase, m.
    pub max_position_drift: f64,
    /// max support-foot rotation away from its phase-initial pose, rad.
    pub max_rotation_drift: f64,
    pub samples: usize,
}

impl ConsistencyReport {
    pub fn max_velocity(&self) -> f64 {
        self.max_linear.max(self.max_angular)
    }
}

pub fn verify_consistency(tree: &KinematicTree, traj: &Trajectory) -> Result<ConsistencyReport> {
    if !traj.has_truth() {
        return Err(Error::Contract("trajectory has no support labels".into()));
    }
    let mut report = ConsistencyReport::default();
    let mut phase: Option<(Support, Isometry3<f64>)> = None;
    for step in &traj.steps {
        let support = step.support.expect("checked above");
        let st = &step.state;
        let foot = tree.foot_index(support.is_left());
        let s = st.joints.as_slice();
        let j = frame_jacobian_by_index(tree, s, foot)?;
        let v = j.apply(&st.base_velocity, &st.joint_velocities);
        report.max_linear = report.max_linear.max(v.fixed_rows::<3>(0).norm());
        report.max_angular = report.max_angular.max(v.fixed_rows::<3>(3).norm());
        let pose = *forward_kinematics(tree, &st.base_pose(), s)?.by_index(foot);
        match phase {
            Some((sup, start)) if sup == support => {
                let d = start.inverse() * pose;
                report.max_position_drift = report.max_position_drift.max(d.translation.vector.norm());
                report.max_rotation_drift = report.max_rotation_drift.max(d.rotation.angle());
            }
            _ => phase = Some((support, pose)),
        }
        report.samples += 1;
    }
    Ok(report)
}

/// Configuration of the randomized training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub episodes: usize,
    pub episode_duration: f64,
    pub seed: u64,
    #[serde(default)]
    pub asymmetry: f64,
    pub clearance: f64,
    /// Fraction of segments that walk forward.
    pub forward_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            episodes: 60,
            episode_duration: 20.0,
            seed: 0,
            asymmetry: 0.0,
            clearance: 0.05,
            forward_fraction: 0.6,
        }
    }
}

/// Draws the gait parameters of one episode. Segments are forward,
/// backward, strafing, turning-in-place or standing; step time is shared by
/// the whole episode.
pub fn random_gait_params(rng: &mut impl Rng, config: &CorpusConfig) -> GaitParams {
    let step_frames = rng.gen_range(22..=28);
    let step_time = step_frames as f64 / DEFAULT_RATE_HZ;
    let mut segments = Vec::new();
    let mut total = 0.0;
    while total < config.episode_duration {
        let duration = rng.gen_range(2.0..6.0_f64).min(config.episode_duration - total + step_time);
        let r: f64 = rng.gen();
        let f = config.forward_fraction;
        let rest = (1.0 - f) / 4.0;
        let motion = if r < f {
            Motion::Walk {
                step_length: rng.gen_range(0.1..0.35),
                turn: rng.gen_range(-0.12..0.12),
                strafe: 0.0,
            }
        } else if r < f + rest {
            Motion::Walk {
                step_length: -rng.gen_range(0.05..0.2),
                turn: rng.gen_range(-0.05..0.05),
                strafe: 0.0,
            }
        } else if r < f + 2.0 * rest {
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Motion::Walk {
                step_length: rng.gen_range(0.1..0.2),
                turn: 0.0,
                strafe: dir * rng.gen_range(0.3..0.6),
            }
        } else if r < f + 3.0 * rest {
            Motion::Walk {
                step_length: 0.0,
                turn: rng.gen_range(-0.25..0.25),
                strafe: 0.0,
            }
        } else {
            Motion::Stand
        };
        segments.push(Segment { motion, duration });
        total += duration;
    }
    GaitParams {
        stance_duration: step_time,
        swing_duration: step_time,
        clearance: config.clearance,
        segments,
        asymmetry: config.asymmetry,
        arm_amplitude: default_arm_amplitude(),
        seed: config.seed,
        rate_hz: DEFAULT_RATE_HZ,
    }
}

/// Deterministic corpus: episode `e` uses a generator seeded from
/// `(seed, e)`.
pub fn generate_corpus(
    tree: &KinematicTree,
    dims: &BipedDims,
    config: &CorpusConfig,
) -> Result<Vec<Trajectory>> {
    (0..config.episodes)
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(e as u64));
            let mut params = random_gait_params(&mut rng, config);
            params.seed = config.seed;
            generate_gait(tree, dims, &params)
        })
        .collect()
}
