//! Network input/output vectors, mirror augmentation and support-foot
//! annotation.
//!
//! Input `x_i` (length `2n+78`): 12 body-fixed base linear velocities and
//! 12 angular velocities sampled at 6 Hz on a 2 s window around step `i`,
//! then `s_{i-1}`, `ṡ_{i-1}`, `p_{i-1}`, `ψ_{i-1}`.
//!
//! Output `y_i` (length `2n+48`): 7 linear and 7 angular base velocities at
//! 6 Hz over the next second starting at `i`, then `s_i`, `ṡ_i`, `p_i`, `ψ_i`.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DVector, Matrix3, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, frame_jacobian_by_index, FrameJacobian, KinematicState, KinematicTree,
};
use crate::so3::EulerOrder;
use crate::trajectory::{Support, Trajectory, TrajectoryStep};

pub const INPUT_WINDOW: usize = 12;
pub const OUTPUT_WINDOW: usize = 7;

/// Placement of the 12-sample input window relative to step `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowAlignment {
    /// `k = −6..=5`
    #[default]
    Centered,
    /// `k = −5..=6`
    Lead,
}

/// Frame the input velocity window is centred on, relative to the
/// predicted step `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowAnchor {
    /// Centred on `i`; the `k = 0` sample is the target's current velocity.
    #[default]
    Current,
    /// Centred on `i − 1`, the frame of the pose entries.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub rate_hz: f64,
    pub sample_hz: f64,
    pub alignment: WindowAlignment,
    pub anchor: WindowAnchor,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            rate_hz: 50.0,
            sample_hz: 6.0,
            alignment: WindowAlignment::Centered,
            anchor: WindowAnchor::Current,
        }
    }
}

impl WindowConfig {
    fn offset(&self, k: i64) -> i64 {
        (k as f64 * self.rate_hz / self.sample_hz).round() as i64
    }

    fn anchor_shift(&self) -> i64 {
        match self.anchor {
            WindowAnchor::Current => 0,
            WindowAnchor::Previous => 1,
        }
    }

    /// Frame offsets of the input velocity window relative to `i`
    /// (nearest-index rounding).
    pub fn input_offsets(&self) -> [i64; INPUT_WINDOW] {
        let first = match self.alignment {
            WindowAlignment::Centered => -6,
            WindowAlignment::Lead => -5,
        };
        std::array::from_fn(|j| self.offset(first + j as i64) - self.anchor_shift())
    }

    pub fn output_offsets(&self) -> [i64; OUTPUT_WINDOW] {
        std::array::from_fn(|k| self.offset(k as i64))
    }

    /// Slot of the `k = 0` sample in the input window.
    pub fn input_zero_slot(&self) -> usize {
        self.input_offsets()
            .iter()
            .position(|&o| o == -self.anchor_shift())
            .expect("window contains its anchor frame")
    }
}

/// Index arithmetic for the feature vectors of an `n`-joint model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n: usize,
}

impl FeatureLayout {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn input_len(&self) -> usize {
        2 * self.n + 78
    }

    pub fn output_len(&self) -> usize {
        2 * self.n + 48
    }

    pub fn input_linear(&self) -> Range<usize> {
        0..36
    }
    pub fn input_angular(&self) -> Range<usize> {
        36..72
    }
    pub fn input_joints(&self) -> Range<usize> {
        72..72 + self.n
    }
    pub fn input_joint_velocities(&self) -> Range<usize> {
        72 + self.n..72 + 2 * self.n
    }
    pub fn input_position(&self) -> Range<usize> {
        72 + 2 * self.n..75 + 2 * self.n
    }
    pub fn input_orientation(&self) -> Range<usize> {
        75 + 2 * self.n..78 + 2 * self.n
    }
    /// Everything after the velocity window.
    pub fn input_pose(&self) -> Range<usize> {
        72..self.input_len()
    }

    pub fn output_linear(&self) -> Range<usize> {
        0..21
    }
    pub fn output_angular(&self) -> Range<usize> {
        21..42
    }
    pub fn output_joints(&self) -> Range<usize> {
        42..42 + self.n
    }
    pub fn output_joint_velocities(&self) -> Range<usize> {
        42 + self.n..42 + 2 * self.n
    }
    pub fn output_position(&self) -> Range<usize> {
        42 + 2 * self.n..45 + 2 * self.n
    }
    pub fn output_orientation(&self) -> Range<usize> {
        45 + 2 * self.n..48 + 2 * self.n
    }
    pub fn output_pose(&self) -> Range<usize> {
        42..self.output_len()
    }

    /// Column indices of the `k = 0` base velocity `(v, ω)` in the output.
    pub fn output_current_velocity(&self) -> [usize; 6] {
        [0, 1, 2, 21, 22, 23]
    }

    /// Default gating input: the 72 velocity-window values.
    pub fn gating_indices(&self) -> Vec<usize> {
        (0..72).collect()
    }
}

fn push_pose(out: &mut Vec<f64>, st: &KinematicState) -> Result<()> {
    out.extend(st.joints.iter());
    out.extend(st.joint_velocities.iter());
    out.extend(st.position.iter());
    out.extend(st.tait_bryan(EulerOrder::Xyz)?.iter());
    Ok(())
}

fn index_at(i: usize, off: i64, len: usize) -> Option<usize> {
    let j = i as i64 + off;
    (j >= 0 && (j as usize) < len).then_some(j as usize)
}

/// Input vector at step `i`; `Ok(None)` when the window leaves the
/// trajectory.
pub fn extract_input(traj: &Trajectory, i: usize, window: &WindowConfig) -> Result<Option<DVector<f64>>> {
    let len = traj.len();
    if i == 0 || i > len {
        return Ok(None);
    }
    let mut idx = [0usize; INPUT_WINDOW];
    for (slot, off) in window.input_offsets().iter().enumerate() {
        match index_at(i, *off, len) {
            Some(j) => idx[slot] = j,
            None => return Ok(None),
        }
    }
    let n = traj.dof();
    let mut out = Vec::with_capacity(2 * n + 78);
    for &j in &idx {
        out.extend(traj.steps[j].state.linear_velocity().iter());
    }
    for &j in &idx {
        out.extend(traj.steps[j].state.angular_velocity().iter());
    }
    push_pose(&mut out, &traj.steps[i - 1].state)?;
    Ok(Some(DVector::from_vec(out)))
}

/// Target vector at step `i`; `Ok(None)` when the future window leaves the
/// trajectory.
pub fn extract_output(traj: &Trajectory, i: usize, window: &WindowConfig) -> Result<Option<DVector<f64>>> {
    let len = traj.len();
    let mut idx = [0usize; OUTPUT_WINDOW];
    for (slot, off) in window.output_offsets().iter().enumerate() {
        match index_at(i, *off, len) {
            Some(j) => idx[slot] = j,
            None => return Ok(None),
        }
    }
    let n = traj.dof();
    let mut out = Vec::with_capacity(2 * n + 48);
    for &j in &idx {
        out.extend(traj.steps[j].state.linear_velocity().iter());
    }
    for &j in &idx {
        out.extend(traj.steps[j].state.angular_velocity().iter());
    }
    push_pose(&mut out, &traj.steps[i].state)?;
    Ok(Some(DVector::from_vec(out)))
}

/// Joint correspondence for sagittal mirroring: joint `i` of the mirrored
/// state is `sign[i] · s[partner[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorMap {
    pub partner: Vec<usize>,
    pub sign: Vec<f64>,
}

impl MirrorMap {
    /// Validates that every joint is covered once and that pairs are
    /// symmetric, which makes mirroring an involution.
    pub fn new(partner: Vec<usize>, sign: Vec<f64>) -> Result<Self> {
        let n = partner.len();
        if sign.len() != n {
            return Err(Error::Config(format!(
                "mirror map has {} partners and {} signs",
                n,
                sign.len()
            )));
        }
        for (i, &p) in partner.iter().enumerate() {
            if p >= n {
                return Err(Error::Config(format!("mirror partner {p} out of range")));
            }
            if partner[p] != i {
                return Err(Error::Config(format!(
                    "mirror map is not symmetric: {i} -> {p} -> {}",
                    partner[p]
                )));
            }
            if sign[i].abs() != 1.0 || sign[i] != sign[p] {
                return Err(Error::Config(format!("bad mirror sign for joint {i}")));
            }
        }
        Ok(Self { partner, sign })
    }

    pub fn dof(&self) -> usize {
        self.partner.len()
    }

    /// Parses `left right sign` lines (joint names, `#` comments).
    /// Self-mirrored joints are written with the same name twice.
    pub fn parse(text: &str, tree: &KinematicTree) -> Result<Self> {
        let n = tree.dof();
        let mut partner = vec![usize::MAX; n];
        let mut sign = vec![0.0; n];
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "mirror map line {}: expected `left right sign`",
                    ln + 1
                )));
            }
            let a = tree.joint_index(parts[0]).ok_or_else(|| {
                Error::Config(format!("mirror map line {}: unknown joint `{}`", ln + 1, parts[0]))
            })?;
            let b = tree.joint_index(parts[1]).ok_or_else(|| {
                Error::Config(format!("mirror map line {}: unknown joint `{}`", ln + 1, parts[1]))
            })?;
            let sg: f64 = parts[2]
                .parse()
                .map_err(|_| Error::Config(format!("mirror map line {}: bad sign", ln + 1)))?;
            for (x, y) in [(a, b), (b, a)] {
                if partner[x] != usize::MAX && partner[x] != y {
                    return Err(Error::Config(format!(
                        "joint `{}` mapped twice",
                        tree.joint_names()[x]
                    )));
                }
                partner[x] = y;
                sign[x] = sg;
            }
        }
        let names = tree.joint_names();
        let missing: Vec<&str> = (0..n)
            .filter(|&i| partner[i] == usize::MAX)
            .map(|i| names[i])
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "incomplete mirror map, missing: {}",
                missing.join(", ")
            )));
        }
        Self::new(partner, sign)
    }

    pub fn to_text(&self, tree: &KinematicTree) -> String {
        let names = tree.joint_names();
        let mut out = String::from("# left right sign\n");
        for i in 0..self.dof() {
            let p = self.partner[i];
            if p >= i {
                out.push_str(&format!("{} {} {}\n", names[i], names[p], self.sign[i]));
            }
        }
        out
    }

    /// Pairs `l_*` with `r_*`; other joints map to themselves. Signs come
    /// from the joint axes: a joint keeps its sign when its axis is normal
    /// to the sagittal plane (pitch-type) and flips otherwise.
    pub fn for_tree(tree: &KinematicTree) -> Result<Self> {
        let names = tree.joint_names();
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut partner = Vec::with_capacity(names.len());
        let mut sign = Vec::with_capacity(names.len());
        let axes: Vec<Vector3<f64>> = tree
            .links()
            .iter()
            .filter_map(|l| l.axis.map(|a| a.into_inner()))
            .collect();
        for (i, name) in names.iter().enumerate() {
            let other = if let Some(rest) = name.strip_prefix("l_") {
                format!("r_{rest}")
            } else if let Some(rest) = name.strip_prefix("r_") {
                format!("l_{rest}")
            } else {
                name.to_string()
            };
            let p = *index
                .get(other.as_str())
                .ok_or_else(|| Error::Config(format!("no mirror partner for `{name}`")))?;
            let a = axes[i];
            let reflected = -Vector3::new(a.x, -a.y, a.z);
            let s = reflected.dot(&axes[p]);
            if (s.abs() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("joint `{name}` has no mirror-symmetric axis")));
            }
            partner.push(p);
            sign.push(s.signum());
        }
        Self::new(partner, sign)
    }
}

fn mirror_rotation(r: &Rotation3<f64>) -> Rotation3<f64> {
    // M R M with M = diag(1, −1, 1): flips the sign of entries with exactly
    // one index equal to y.
    let m = r.matrix();
    let mut out = *m;
    for i in 0..3 {
        for j in 0..3 {
            if (i == 1) != (j == 1) {
                out[(i, j)] = -m[(i, j)];
            }
        }
    }
    Rotation3::from_matrix_unchecked(Matrix3::from(out))
}

/// Reflects a state across the world xz plane and swaps left/right joints.
pub fn mirror_state(st: &KinematicState, map: &MirrorMap) -> Result<KinematicState> {
    let n = st.dof();
    if map.dof() != n {
        return Err(Error::Config(format!(
            "mirror map covers {} joints, state has {n}",
            map.dof()
        )));
    }
    let mirror_joints =
        |v: &DVector<f64>| DVector::from_fn(n, |i, _| map.sign[i] * v[map.partner[i]]);
    let v = st.base_velocity;
    Ok(KinematicState {
        position: Vector3::new(st.position.x, -st.position.y, st.position.z),
        rotation: mirror_rotation(&st.rotation),
        joints: mirror_joints(&st.joints),
        base_velocity: Vector6::new(v[0], -v[1], v[2], -v[3], v[4], -v[5]),
        joint_velocities: mirror_joints(&st.joint_velocities),
    })
}

pub fn mirror_sample(step: &TrajectoryStep, map: &MirrorMap) -> Result<TrajectoryStep> {
    Ok(TrajectoryStep {
        time: step.time,
        state: mirror_state(&step.state, map)?,
        support: step.support.map(Support::flipped),
    })
}

pub fn mirror_trajectory(traj: &Trajectory, map: &MirrorMap) -> Result<Trajectory> {
    Ok(Trajectory {
        rate_hz: traj.rate_hz,
        steps: traj
            .steps
            .iter()
            .map(|s| mirror_sample(s, map))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactThresholds {
    pub height: f64,
    pub speed: f64,
    /// Longest tolerated stretch without a qualifying foot, seconds.
    pub max_gap: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self {
            height: 0.01,
            speed: 0.01,
            max_gap: 0.5,
        }
    }
}

/// Per-step support-foot decision with hysteresis.
#[derive(Debug, Clone)]
pub struct ContactTracker {
    pub thresholds: ContactThresholds,
    pub previous: Option<Support>,
    gap_steps: usize,
    longest_gap: usize,
}

impl ContactTracker {
    pub fn new(thresholds: ContactThresholds, initial: Option<Support>) -> Result<Self> {
        if !(thresholds.height > 0.0 && thresholds.speed > 0.0) {
            return Err(Error::Config("contact thresholds must be positive".into()));
        }
        Ok(Self {
            thresholds,
            previous: initial,
            gap_steps: 0,
            longest_gap: 0,
        })
    }

    /// Heights in meters above ground, speeds in m/s.
    pub fn update(&mut self, left: (f64, f64), right: (f64, f64)) -> Support {
        let ok = |(h, v): (f64, f64)| h < self.thresholds.height && v < self.thresholds.speed;
        let (l, r) = (ok(left), ok(right));
        let decided = match (l, r) {
            (true, false) => Some(Support::Left),
            (false, true) => Some(Support::Right),
            (true, true) => self.previous.or(Some(if left.1 <= right.1 {
                Support::Left
            } else {
                Support::Right
            })),
            (false, false) => None,
        };
        if decided.is_none() {
            self.gap_steps += 1;
            self.longest_gap = self.longest_gap.max(self.gap_steps);
        } else {
            self.gap_steps = 0;
        }
        let support = decided
            .or(self.previous)
            .unwrap_or(if left.0 <= right.0 {
                Support::Left
            } else {
                Support::Right
            });
        self.previous = Some(support);
        support
    }

    pub fn longest_gap_steps(&self) -> usize {
        self.longest_gap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactAnnotation {
    pub support: Vec<Support>,
    pub warnings: Vec<String>,
}

/// Foot height above ground and linear speed for one state.
pub fn foot_height_speed(tree: &KinematicTree, st: &KinematicState, left: bool) -> Result<(f64, f64)> {
    let idx = tree.foot_index(left);
    let fk = forward_kinematics(tree, &st.base_pose(), st.joints.as_slice())?;
    let h = fk.by_index(idx).translation.vector.z;
    let j = frame_jacobian_by_index(tree, st.joints.as_slice(), idx)?;
    let v = j.apply(&st.base_velocity, &st.joint_velocities);
    Ok((h, v.fixed_rows::<3>(0).norm()))
}

/// Labels each step with a support foot from foot height and speed.
pub fn annotate_contacts(
    tree: &KinematicTree,
    traj: &Trajectory,
    thresholds: ContactThresholds,
) -> Result<ContactAnnotation> {
    let mut tracker = ContactTracker::new(thresholds, None)?;
    let mut support = Vec::with_capacity(traj.len());
    let mut warnings = Vec::new();
    let gap_limit = (thresholds.max_gap * traj.rate_hz).round() as usize;
    let mut warned = false;
    for (i, step) in traj.steps.iter().enumerate() {
        let l = foot_height_speed(tree, &step.state, true)?;
        let r = foot_height_speed(tree, &step.state, false)?;
        support.push(tracker.update(l, r));
        if tracker.gap_steps > gap_limit && !warned {
            let msg = format!(
                "no foot in contact for more than {} s (from step {})",
                thresholds.max_gap,
                i + 1 - tracker.gap_steps
            );
            log::warn!("{msg}");
            warnings.push(msg);
            warned = true;
        }
        if tracker.gap_steps == 0 {
            warned = false;
        }
    }
    Ok(ContactAnnotation { support, warnings })
}

/// One training pair with its support annotation and both foot Jacobians
/// evaluated at the ground-truth configuration of step `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub support: Support,
    pub j_lf: FrameJacobian,
    pub j_rf: FrameJacobian,
}

impl FeatureSample {
    pub fn alpha(&self) -> f64 {
        self.support.alpha()
    }

    pub fn support_jacobian(&self) -> &FrameJacobian {
        match self.support {
            Support::Left => &self.j_lf,
            Support::Right => &self.j_rf,
        }
    }
}

/// Builds every valid sample of a trajectory. Support labels come from the
/// trajectory's truth column when present, otherwise from annotation.
pub fn trajectory_samples(
    tree: &KinematicTree,
    traj: &Trajectory,
    window: &WindowConfig,
    thresholds: ContactThresholds,
) -> Result<Vec<FeatureSample>> {
    if traj.dof() != tree.dof() {
        return Err(Error::dim("trajectory joints", tree.dof(), traj.dof()));
    }
    let labels: Vec<Support> = if traj.has_truth() {
        traj.steps.iter().map(|s| s.support.unwrap()).collect()
    } else {
        annotate_contacts(tree, traj, thresholds)?.support
    };
    let (lf, rf) = (tree.foot_index(true), tree.foot_index(false));
    let mut out = Vec::new();
    for i in 0..traj.len() {
        let (Some(x), Some(y)) = (extract_input(traj, i, window)?, extract_output(traj, i, window)?)
        else {
            continue;
        };
        let s = traj.steps[i].state.joints.as_slice();
        out.push(FeatureSample {
            x,
            y,
            support: labels[i],
            j_lf: frame_jacobian_by_index(tree, s, lf)?,
            j_rf: frame_jacobian_by_index(tree, s, rf)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub window: WindowConfig,
    pub contacts: ContactThresholds,
    pub mirror: bool,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            contacts: ContactThresholds::default(),
            mirror: true,
            test_fraction: 0.1,
        }
    }
}

/// Samples grouped by source trajectory. A trajectory and its mirror image
/// share a group so that splits never separate them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub samples: Vec<FeatureSample>,
    pub groups: Vec<Range<usize>>,
    group_source: Vec<usize>,
}

impl Dataset {
    pub fn build(
        tree: &KinematicTree,
        trajectories: &[Trajectory],
        config: &DatasetConfig,
        mirror_map: Option<&MirrorMap>,
    ) -> Result<Self> {
        let layout = FeatureLayout::new(tree.dof());
        let mut samples = Vec::new();
        let mut groups = Vec::new();
        let mut group_source = Vec::new();
        let map = if config.mirror {
            Some(match mirror_map {
                Some(m) => m.clone(),
                None => MirrorMap::for_tree(tree)?,
            })
        } else {
            None
        };
        for (src, traj) in trajectories.iter().enumerate() {
            let start = samples.len();
            samples.extend(trajectory_samples(tree, traj, &config.window, config.contacts)?);
            groups.push(start..samples.len());
            group_source.push(src);
            if let Some(map) = &map {
                let mirrored = mirror_trajectory(traj, map)?;
                let start = samples.len();
                samples.extend(trajectory_samples(tree, &mirrored, &config.window, config.contacts)?);
                groups.push(start..samples.len());
                group_source.push(src);
            }
        }
        Ok(Self {
            layout,
            samples,
            groups,
            group_source,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Contiguous split: with at least 10 source trajectories every
    /// `1/fraction`-th source goes to test; otherwise the tail of each
    /// group, after a guard gap of up to one feature window (capped at half of the
    /// remaining samples), is held out.
    pub fn split(&self, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let sources = self.group_source.iter().max().map(|m| m + 1).unwrap_or(0);
        let mut train = Vec::new();
        let mut test = Vec::new();
        if test_fraction <= 0.0 {
            return ((0..self.len()).collect(), test);
        }
        let stride = (1.0 / test_fraction).round().max(2.0) as usize;
        if sources >= 10 {
            for (g, range) in self.groups.iter().enumerate() {
                let to_test = self.group_source[g] % stride == stride - 1;
                let dst = if to_test { &mut test } else { &mut train };
                dst.extend(range.clone());
            }
        } else {
            const GUARD: usize = 100;
            for range in &self.groups {
                let len = range.len();
                let n_test = ((len as f64) * test_fraction).round() as usize;
                let cut = range.start + len.saturating_sub(n_test);
                let guard = GUARD.min((cut - range.start) / 2);
                let guard_start = cut - guard;
                train.extend(range.start..guard_start);
                test.extend(cut..range.end);
            }
        }
        (train, test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biped::{biped_tree, BipedDims};
    use crate::kinematics::KinematicState;
    use proptest::prelude::*;

    fn constant_velocity_traj(n: usize, len: usize) -> Trajectory {
        let mut t = Trajectory::new(50.0);
        for i in 0..len {
            let mut st = KinematicState::standing(n, 0.9);
            st.position.x = 0.02 * i as f64;
            st.base_velocity[0] = 1.0;
            st.base_velocity[5] = 0.0;
            for j in 0..n {
                st.joints[j] = 0.01 * (i + j) as f64;
                st.joint_velocities[j] = 0.5;
            }
            t.steps.push(TrajectoryStep {
                time: i as f64 / 50.0,
                state: st,
                support: Some(Support::Left),
            });
        }
        t
    }

    #[test]
    fn window_index_table_matches_rounded_offsets() {
        // k·50/6 rounded to nearest, enumerated independently.
        let oracle: Vec<i64> = (-6..=5)
            .map(|k: i64| {
                let exact = k as f64 * 50.0 / 6.0;
                let lo = exact.floor();
                if exact - lo < 0.5 { lo as i64 } else { lo as i64 + 1 }
            })
            .collect();
        let w = WindowConfig::default();
        assert_eq!(w.input_offsets().to_vec(), oracle);
        assert_eq!(w.input_offsets(), [-50, -42, -33, -25, -17, -8, 0, 8, 17, 25, 33, 42]);
        assert_eq!(w.output_offsets(), [0, 8, 17, 25, 33, 42, 50]);
        assert_eq!(w.input_zero_slot(), 6);
        let lead = WindowConfig {
            alignment: WindowAlignment::Lead,
            ..w
        };
        assert_eq!(lead.input_offsets()[11], 50);
        let previous = WindowConfig {
            anchor: WindowAnchor::Previous,
            ..w
        };
        assert_eq!(previous.input_offsets(), [-51, -43, -34, -26, -18, -9, -1, 7, 16, 24, 32, 41]);
        assert_eq!(previous.input_zero_slot(), 6);
    }

    #[test]
    fn lengths_for_26_joint_robot() {
        let t = constant_velocity_traj(26, 120);
        let w = WindowConfig::default();
        assert_eq!(extract_input(&t, 60, &w).unwrap().unwrap().len(), 130);
        assert_eq!(extract_output(&t, 60, &w).unwrap().unwrap().len(), 100);
    }

    #[test]
    fn out_of_range_windows_are_skipped() {
        let t = constant_velocity_traj(2, 120);
        let w = WindowConfig::default();
        assert!(extract_input(&t, 49, &w).unwrap().is_none());
        assert!(extract_input(&t, 50, &w).unwrap().is_some());
        assert!(extract_input(&t, 120 - 42, &w).unwrap().is_none());
        assert!(extract_output(&t, 120 - 50, &w).unwrap().is_none());
        assert!(extract_output(&t, 120 - 51, &w).unwrap().is_some());
    }

    #[test]
    fn constant_velocity_fills_identical_slots() {
        let t = constant_velocity_traj(3, 120);
        let layout = FeatureLayout::new(3);
        let x = extract_input(&t, 60, &WindowConfig::default()).unwrap().unwrap();
        let lin = &x.as_slice()[layout.input_linear()];
        for chunk in lin.chunks(3) {
            assert_eq!(chunk, &lin[0..3]);
        }
        let y = extract_output(&t, 60, &WindowConfig::default()).unwrap().unwrap();
        assert_eq!(&y.as_slice()[0..3], t.steps[60].state.linear_velocity().as_slice());
    }

    #[test]
    fn stationary_output_is_zero_velocity_constant_pose() {
        let mut t = Trajectory::new(50.0);
        for i in 0..120 {
            t.steps.push(TrajectoryStep {
                time: i as f64 / 50.0,
                state: KinematicState::standing(2, 0.9),
                support: None,
            });
        }
        let layout = FeatureLayout::new(2);
        let w = WindowConfig::default();
        let a = extract_output(&t, 55, &w).unwrap().unwrap();
        let b = extract_output(&t, 60, &w).unwrap().unwrap();
        assert!(a.as_slice()[0..42].iter().all(|&v| v == 0.0));
        assert_eq!(&a.as_slice()[layout.output_pose()], &b.as_slice()[layout.output_pose()]);
    }

    #[test]
    fn input_pose_slots_equal_previous_output_pose() {
        let t = constant_velocity_traj(4, 150);
        let layout = FeatureLayout::new(4);
        let w = WindowConfig::default();
        for i in 51..100 {
            let x = extract_input(&t, i, &w).unwrap().unwrap();
            let y = extract_output(&t, i - 1, &w).unwrap().unwrap();
            assert_eq!(&x.as_slice()[layout.input_pose()], &y.as_slice()[layout.output_pose()]);
        }
    }

    #[test]
    fn mirror_map_validation() {
        let tree = biped_tree(0, &BipedDims::default());
        let map = MirrorMap::for_tree(&tree).unwrap();
        let text = map.to_text(&tree);
        assert_eq!(MirrorMap::parse(&text, &tree).unwrap(), map);
        let incomplete: String = text.lines().take(2).collect::<Vec<_>>().join("\n");
        let err = MirrorMap::parse(&incomplete, &tree).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("incomplete"));
        assert!(MirrorMap::new(vec![1, 1], vec![1.0, 1.0]).is_err());
        // pitch joints keep their sign, yaw joints flip
        let yaw = tree.joint_index("l_hip_yaw").unwrap();
        let pitch = tree.joint_index("l_hip_pitch").unwrap();
        assert_eq!(map.sign[yaw], -1.0);
        assert_eq!(map.sign[pitch], 1.0);
        assert_eq!(map.partner[yaw], tree.joint_index("r_hip_yaw").unwrap());
    }

    #[test]
    fn mirroring_left_support_gives_right() {
        let tree = biped_tree(0, &BipedDims::default());
        let map = MirrorMap::for_tree(&tree).unwrap();
        let step = TrajectoryStep {
            time: 0.0,
            state: KinematicState::standing(6, 0.9),
            support: Some(Support::Left),
        };
        let m = mirror_sample(&step, &map).unwrap();
        assert_eq!(m.support, Some(Support::Right));
        assert_eq!(m.support.unwrap().alpha(), 0.0);
    }

    #[test]
    fn straight_walk_in_xz_plane_maps_to_itself_with_swapped_legs() {
        let tree = biped_tree(0, &BipedDims::default());
        let map = MirrorMap::for_tree(&tree).unwrap();
        let mut st = KinematicState::standing(6, 0.85);
        st.position.x = 1.3;
        st.rotation = Rotation3::from_euler_angles(0.0, 0.05, 0.0);
        st.base_velocity = Vector6::new(0.6, 0.0, -0.02, 0.0, 0.1, 0.0);
        let (l, r) = (tree.joint_index("l_hip_pitch").unwrap(), tree.joint_index("r_hip_pitch").unwrap());
        st.joints[l] = 0.3;
        st.joints[r] = -0.3;
        let m = mirror_state(&st, &map).unwrap();
        assert_eq!(m.position, st.position);
        assert_eq!(m.rotation, st.rotation);
        assert_eq!(m.base_velocity, st.base_velocity);
        assert_eq!(m.joints[l], -0.3);
        assert_eq!(m.joints[r], 0.3);
    }

    #[test]
    fn mirror_state_rejects_wrong_map_size() {
        let tree = biped_tree(0, &BipedDims::default());
        let map = MirrorMap::for_tree(&tree).unwrap();
        assert!(mirror_state(&KinematicState::standing(4, 0.9), &map).is_err());
    }

    #[test]
    fn tracker_keeps_previous_foot_in_double_support() {
        let mut tr = ContactTracker::new(ContactThresholds::default(), Some(Support::Right)).unwrap();
        for _ in 0..20 {
            assert_eq!(tr.update((0.0, 0.0), (0.0, 0.0)), Support::Right);
        }
        assert_eq!(tr.update((0.0, 0.0), (0.2, 0.5)), Support::Left);
        assert_eq!(tr.update((0.0, 0.0), (0.0, 0.0)), Support::Left);
        assert!(ContactTracker::new(
            ContactThresholds { height: 0.0, ..Default::default() },
            None
        )
        .is_err());
    }

    #[test]
    fn annotation_matches_generator_truth() {
        use crate::synth::{generate_gait, GaitParams, Motion, Segment};
        let dims = BipedDims::default();
        let tree = biped_tree(0, &dims);
        let mut params = GaitParams::forward_walk(0.25, 20.0);
        params.segments.push(Segment { motion: Motion::Stand, duration: 3.0 });
        params.segments.push(Segment {
            motion: Motion::Walk { step_length: 0.0, turn: 0.2, strafe: 0.0 },
            duration: 5.0,
        });
        let traj = generate_gait(&tree, &dims, &params).unwrap();
        let ann = annotate_contacts(&tree, &traj, ContactThresholds::default()).unwrap();
        let agree = ann
            .support
            .iter()
            .zip(&traj.steps)
            .filter(|(a, s)| Some(**a) == s.support)
            .count();
        let bad: Vec<usize> = (0..traj.len()).filter(|&i| Some(ann.support[i]) != traj.steps[i].support).collect();
        assert!(agree as f64 >= 0.99 * traj.len() as f64, "{agree}/{} {:?}", traj.len(), &bad[..40.min(bad.len())]);
        assert!(ann.warnings.is_empty());
        // alternates once per 25-frame stance during the walk
        let changes = ann.support[1..1000].windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 39);
    }

    #[test]
    fn standing_keeps_alpha_constant() {
        let tree = biped_tree(0, &BipedDims::default());
        let mut t = Trajectory::new(50.0);
        for i in 0..100 {
            t.steps.push(TrajectoryStep {
                time: i as f64 / 50.0,
                state: KinematicState::standing(6, 0.9),
                support: None,
            });
        }
        let ann = annotate_contacts(&tree, &t, ContactThresholds::default()).unwrap();
        assert!(ann.support.iter().all(|&s| s == ann.support[0]));
    }

    #[test]
    fn long_flight_raises_warning() {
        let tree = biped_tree(0, &BipedDims::default());
        let mut t = Trajectory::new(50.0);
        for i in 0..60 {
            t.steps.push(TrajectoryStep {
                time: i as f64 / 50.0,
                state: KinematicState::standing(6, 1.5),
                support: None,
            });
        }
        let ann = annotate_contacts(&tree, &t, ContactThresholds::default()).unwrap();
        assert_eq!(ann.warnings.len(), 1);
    }

    #[test]
    fn mirroring_doubles_the_dataset() {
        use crate::synth::{generate_gait, GaitParams};
        let dims = BipedDims::default();
        let tree = biped_tree(0, &dims);
        let traj = generate_gait(&tree, &dims, &GaitParams::forward_walk(0.2, 6.0)).unwrap();
        let plain = Dataset::build(&tree, &[traj.clone()], &DatasetConfig { mirror: false, ..Default::default() }, None).unwrap();
        let doubled = Dataset::build(&tree, &[traj], &DatasetConfig::default(), None).unwrap();
        assert_eq!(doubled.len(), 2 * plain.len());
        assert!(plain.samples.iter().all(|s| s.alpha() == 0.0 || s.alpha() == 1.0));
        let (train, test) = doubled.split(0.1);
        assert!(!test.is_empty() && !train.is_empty());
        assert!(train.iter().all(|i| !test.contains(i)));
    }

    proptest! {
        #[test]
        fn dimensions_hold_for_any_n(n in 1usize..30) {
            let t = constant_velocity_traj(n, 110);
            let w = WindowConfig::default();
            let x = extract_input(&t, 55, &w).unwrap().unwrap();
            let y = extract_output(&t, 55, &w).unwrap().unwrap();
            prop_assert_eq!(x.len(), 2 * n + 78);
            prop_assert_eq!(y.len(), 2 * n + 48);
            prop_assert_eq!(FeatureLayout::new(n).input_len(), x.len());
        }

        #[test]
        fn mirror_is_an_exact_involution(
            p in proptest::array::uniform3(-5.0f64..5.0),
            a in proptest::array::uniform3(-1.2f64..1.2),
            v in proptest::array::uniform6(-2.0f64..2.0),
            s in proptest::collection::vec(-2.0f64..2.0, 12),
            left in any::<bool>(),
        ) {
            let tree = biped_tree(0, &BipedDims::default());
            let map = MirrorMap::for_tree(&tree).unwrap();
            let st = KinematicState {
                position: Vector3::from(p),
                rotation: Rotation3::from_euler_angles(a[0], a[1], a[2]),
                joints: DVector::from_column_slice(&s[..6]),
                base_velocity: Vector6::from_column_slice(&v),
                joint_velocities: DVector::from_column_slice(&s[6..]),
            };
            let step = TrajectoryStep {
                time: 1.0,
                state: st,
                support: Some(if left { Support::Left } else { Support::Right }),
            };
            let twice = mirror_sample(&mirror_sample(&step, &map).unwrap(), &map).unwrap();
            prop_assert_eq!(twice, step);
        }
    }
}
