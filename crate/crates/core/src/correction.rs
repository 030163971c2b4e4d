//! Proportional pose feedback on predicted base velocities.
//!
//! `v^c = v̂ − k0 Rᵀ (p − p_d)` and `ω^c = ω̂ − k1 vee(skew(R_dᵀ R))`, both in
//! the body frame. Desired poses come from a [`WaypointSchedule`].

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{self, skew_vee, EulerOrder};
use crate::trajectory::Trajectory;

pub const WAYPOINT_SCHEMA: &str = "# schema: pibc-waypoints v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionGains {
    /// Position gain, 1/s.
    pub k0: f64,
    /// Rotation gain, 1/s.
    pub k1: f64,
}

impl Default for CorrectionGains {
    fn default() -> Self {
        Self { k0: 1.0, k1: 1.0 }
    }
}

impl CorrectionGains {
    pub fn new(k0: f64, k1: f64) -> Result<Self> {
        if !(k0 >= 0.0 && k1 >= 0.0) {
            return Err(Error::Config(format!("gains must be nonnegative, got ({k0}, {k1})")));
        }
        Ok(Self { k0, k1 })
    }

    pub fn off() -> Self {
        Self { k0: 0.0, k1: 0.0 }
    }

    pub fn is_off(&self) -> bool {
        self.k0 == 0.0 && self.k1 == 0.0
    }
}

pub fn correct_linear(
    v_hat: &Vector3<f64>,
    r: &Rotation3<f64>,
    p: &Vector3<f64>,
    p_d: &Vector3<f64>,
    k0: f64,
) -> Vector3<f64> {
    if p == p_d {
        return *v_hat;
    }
    v_hat - r.inverse() * (p - p_d) * k0
}

pub fn correct_angular(w_hat: &Vector3<f64>, r: &Rotation3<f64>, r_d: &Rotation3<f64>, k1: f64) -> Vector3<f64> {
    if r == r_d {
        return *w_hat;
    }
    w_hat - skew_vee((r_d.inverse() * r).matrix()) * k1
}

/// Applies both corrections to a body twist `(v, ω)`.
pub fn correct_twist(
    twist: &Vector6<f64>,
    p: &Vector3<f64>,
    r: &Rotation3<f64>,
    desired: &Pose,
    gains: &CorrectionGains,
) -> Vector6<f64> {
    let v = correct_linear(&twist.fixed_rows::<3>(0).into(), r, p, &desired.position, gains.k0);
    let w = correct_angular(&twist.fixed_rows::<3>(3).into(), r, &desired.rotation, gains.k1);
    Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Rotation3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub time: f64,
    pub pose: Pose,
}

/// Piecewise-constant targets: the active waypoint is the latest one whose
/// time is not after `t` (the first one before it starts).
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointSchedule {
    waypoints: Vec<Waypoint>,
}

impl WaypointSchedule {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::Config("waypoint schedule is empty".into()));
        }
        if waypoints.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::Config("waypoint times must be nondecreasing".into()));
        }
        Ok(Self { waypoints })
    }

    pub fn constant(pose: Pose) -> Self {
        Self {
            waypoints: vec![Waypoint { time: 0.0, pose }],
        }
    }

    /// One waypoint per trajectory frame, time-shifted so that frame
    /// `start` is at `t = 0`.
    pub fn from_trajectory(traj: &Trajectory, start: usize) -> Result<Self> {
        let t0 = traj.steps.get(start).map(|s| s.time).unwrap_or(0.0);
        Self::new(
            traj.steps[start.min(traj.len())..]
                .iter()
                .map(|s| Waypoint {
                    time: s.time - t0,
                    pose: Pose {
                        position: s.state.position,
                        rotation: s.state.rotation,
                    },
                })
                .collect(),
        )
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn desired_at(&self, t: f64) -> Pose {
        let k = self.waypoints.partition_point(|w| w.time <= t);
        self.waypoints[k.saturating_sub(1)].pose
    }

    /// Body-frame twist of the schedule at `t` by central differences over
    /// `±h`; zero once the schedule has ended.
    pub fn desired_twist(&self, t: f64, h: f64) -> Vector6<f64> {
        let e = 1e-6 * h;
        let (a, b) = (self.desired_at(t - h + e), self.desired_at(t + h + e));
        let r = self.desired_at(t + e).rotation;
        let v = r.inverse() * (b.position - a.position) / (2.0 * h);
        let w = (a.rotation.inverse() * b.rotation).scaled_axis() / (2.0 * h);
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{WAYPOINT_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "x", "y", "z", "roll", "pitch", "yaw"])?;
        for wp in &self.waypoints {
            let a = so3::tait_bryan_from_rotation(&wp.pose.rotation, EulerOrder::Xyz)?;
            let p = wp.pose.position;
            w.write_record(
                [wp.time, p.x, p.y, p.z, a.x, a.y, a.z]
                    .iter()
                    .map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut out = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse()
                        .map_err(|_| Error::Parse(format!("waypoint row {}: `{f}`", line + 1)))
                })
                .collect::<Result<_>>()?;
            if v.len() != 7 {
                return Err(Error::dim(format!("waypoint row {} fields", line + 1), 7, v.len()));
            }
            out.push(Waypoint {
                time: v[0],
                pose: Pose {
                    position: Vector3::new(v[1], v[2], v[3]),
                    rotation: so3::rotation_from_tait_bryan(&Vector3::new(v[4], v[5], v[6]), EulerOrder::Xyz),
                },
            });
        }
        Self::new(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_is_an_exact_fixed_point() {
        let v = Vector3::new(0.3, -0.1, 0.05);
        let r = Rotation3::from_euler_angles(0.1, 0.2, 0.3);
        let p = Vector3::new(1.0, 2.0, 0.9);
        assert_eq!(correct_linear(&v, &r, &p, &p, 1.0), v);
        assert_eq!(correct_angular(&v, &r, &r, 1.0), v);
        let tw = Vector6::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        let pose = Pose { position: p, rotation: r };
        assert_eq!(correct_twist(&tw, &p, &r, &pose, &CorrectionGains::default()), tw);
    }

    #[test]
    fn linear_substitution_case() {
        let out = correct_linear(
            &Vector3::zeros(),
            &Rotation3::identity(),
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::zeros(),
            0.5,
        );
        assert_eq!(out, Vector3::new(-0.5, 0.0, 0.0));
    }

    #[test]
    fn angular_about_z_uses_sine() {
        let theta: f64 = 0.4;
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
        let out = correct_angular(&Vector3::zeros(), &r, &Rotation3::identity(), 2.0);
        assert!(out.x.abs() < 1e-15 && out.y.abs() < 1e-15);
        assert!((out.z + 2.0 * theta.sin()).abs() < 1e-15);
    }

    #[test]
    fn closed_loop_position_decays_exponentially() {
        let k0 = 1.0;
        let dt = 0.02;
        let mut p = Vector3::new(1.0, -0.5, 0.2);
        let e0 = p.norm();
        let r = Rotation3::identity();
        let mut prev = e0;
        for step in 1..=250 {
            let v = correct_linear(&Vector3::zeros(), &r, &p, &Vector3::zeros(), k0);
            p += r * v * dt;
            let e = p.norm();
            assert!(e < prev);
            prev = e;
            let t = step as f64 * dt;
            let expect = e0 * (-k0 * t).exp();
            assert!((e - expect).abs() <= 0.05 * expect, "t={t}: {e} vs {expect}");
        }
    }

    #[test]
    fn closed_loop_rotation_converges_monotonically() {
        let dt = 0.02;
        let r_d = Rotation3::identity();
        let mut r = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.3);
        let mut prev = so3::geodesic_distance(&r_d, &r);
        for _ in 0..500 {
            let w = correct_angular(&Vector3::zeros(), &r, &r_d, 1.0);
            r = r * so3::exp(&(w * dt));
            let e = so3::geodesic_distance(&r_d, &r);
            assert!(e < prev);
            prev = e;
        }
        assert!(prev < 1e-3, "{prev}");
    }

    #[test]
    fn waypoints_are_piecewise_constant() {
        let pose = |x: f64| Pose {
            position: Vector3::new(x, 0.0, 0.0),
            rotation: Rotation3::identity(),
        };
        let s = WaypointSchedule::new(vec![
            Waypoint { time: 0.0, pose: pose(0.0) },
            Waypoint { time: 1.0, pose: pose(1.0) },
            Waypoint { time: 2.5, pose: pose(2.0) },
        ])
        .unwrap();
        assert_eq!(s.desired_at(-1.0).position.x, 0.0);
        assert_eq!(s.desired_at(0.99).position.x, 0.0);
        assert_eq!(s.desired_at(1.0).position.x, 1.0);
        assert_eq!(s.desired_at(9.0).position.x, 2.0);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(WaypointSchedule::read_csv(&buf[..]).unwrap(), s);
        assert!(WaypointSchedule::new(vec![]).is_err());
        assert!(CorrectionGains::new(-1.0, 0.0).is_err());
    }
}
