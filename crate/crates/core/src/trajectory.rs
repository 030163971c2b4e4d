//! Time-indexed state trajectories and their CSV form.
//!
//! One row per 50 Hz step:
//! `time, px, py, pz, roll, pitch, yaw, vx, vy, vz, wx, wy, wz, s_0.., sd_0.., [alpha]`.
//! Base velocities are body-fixed; angles are extrinsic x-y-z. The
//! optional `alpha` column is the ground-truth support foot (1 = left).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::KinematicState;
use crate::so3::{self, EulerOrder};

pub const TRAJECTORY_SCHEMA: &str = "# schema: pibc-trajectory v1";
pub const DEFAULT_RATE_HZ: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Support {
    Left,
    Right,
}

impl Support {
    /// `α`: 1 when the left foot supports, 0 for the right.
    pub fn alpha(self) -> f64 {
        match self {
            Support::Left => 1.0,
            Support::Right => 0.0,
        }
    }

    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if alpha == 1.0 {
            Ok(Support::Left)
        } else if alpha == 0.0 {
            Ok(Support::Right)
        } else {
            Err(Error::Contract(format!("alpha must be 0 or 1, got {alpha}")))
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Support::Left => Support::Right,
            Support::Right => Support::Left,
        }
    }

    pub fn is_left(self) -> bool {
        self == Support::Left
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub time: f64,
    pub state: KinematicState,
    pub support: Option<Support>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rate_hz: f64,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn new(rate_hz: f64) -> Self {
        Self {
            rate_hz,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn dof(&self) -> usize {
        self.steps.first().map(|s| s.state.dof()).unwrap_or(0)
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.rate_hz
    }

    pub fn has_truth(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.support.is_some())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "{TRAJECTORY_SCHEMA}")?;
        let n = self.dof();
        let truth = self.has_truth();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "time", "px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..n).map(|i| format!("s_{i}")));
        header.extend((0..n).map(|i| format!("sd_{i}")));
        if truth {
            header.push("alpha".into());
        }
        w.write_record(&header)?;
        for step in &self.steps {
            let st = &step.state;
            let rpy = st.tait_bryan(EulerOrder::Xyz)?;
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            row.push(step.time.to_string());
            row.extend(st.position.iter().map(|v| v.to_string()));
            row.extend(rpy.iter().map(|v| v.to_string()));
            row.extend(st.base_velocity.iter().map(|v| v.to_string()));
            row.extend(st.joints.iter().map(|v| v.to_string()));
            row.extend(st.joint_velocities.iter().map(|v| v.to_string()));
            if truth {
                row.push(step.support.map(|s| s.alpha()).unwrap_or(0.0).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, rate_hz: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(input);
        let header = rdr.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with("s_")).count();
        let sd = header.iter().filter(|h| h.starts_with("sd_")).count();
        if sd != n {
            return Err(Error::Parse(format!(
                "trajectory header has {n} joint positions but {sd} joint velocities"
            )));
        }
        let truth = header.iter().any(|h| h == "alpha");
        let expected = 13 + 2 * n + usize::from(truth);
        if header.len() != expected {
            return Err(Error::dim("trajectory columns", expected, header.len()));
        }
        let mut traj = Trajectory::new(rate_hz);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: `{f}`: {e}", line + 1)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != expected {
                return Err(Error::dim(format!("row {} fields", line + 1), expected, vals.len()));
            }
            let rpy = Vector3::new(vals[4], vals[5], vals[6]);
            let state = KinematicState {
                position: Vector3::new(vals[1], vals[2], vals[3]),
                rotation: so3::rotation_from_tait_bryan(&rpy, EulerOrder::Xyz),
                base_velocity: Vector6::from_column_slice(&vals[7..13]),
                joints: DVector::from_column_slice(&vals[13..13 + n]),
                joint_velocities: DVector::from_column_slice(&vals[13 + n..13 + 2 * n]),
            };
            let support = if truth {
                Some(Support::from_alpha(vals[13 + 2 * n])?)
            } else {
                None
            };
            traj.steps.push(TrajectoryStep {
                time: vals[0],
                state,
                support,
            });
        }
        Ok(traj)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f), DEFAULT_RATE_HZ)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn sample() -> Trajectory {
        let mut t = Trajectory::new(50.0);
        for i in 0..5 {
            let mut st = KinematicState::standing(2, 0.9);
            st.position.x = 0.1 * i as f64;
            st.rotation = Rotation3::from_euler_angles(0.01, -0.02, 0.3 * i as f64);
            st.joints[1] = 0.25;
            st.base_velocity[0] = 0.5;
            t.steps.push(TrajectoryStep {
                time: i as f64 * 0.02,
                state: st,
                support: Some(if i % 2 == 0 { Support::Left } else { Support::Right }),
            });
        }
        t
    }

    #[test]
    fn csv_round_trip() {
        let t = sample();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(TRAJECTORY_SCHEMA));
        let back = Trajectory::read_csv(&buf[..], 50.0).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.steps.iter().zip(&back.steps) {
            assert_eq!(a.time, b.time);
            assert_eq!(a.support, b.support);
            assert_eq!(a.state.position, b.state.position);
            assert_eq!(a.state.joints, b.state.joints);
            assert!((a.state.rotation.matrix() - b.state.rotation.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn bad_alpha_is_a_contract_error() {
        assert!(Support::from_alpha(0.5).is_err());
        assert_eq!(Support::from_alpha(1.0).unwrap(), Support::Left);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let text = "time,px,py,pz,roll,pitch,yaw,vx,vy,vz,wx,wy,wz\n0,0,0,0,0,0,0,0,0,0,0,0,x\n";
        assert!(Trajectory::read_csv(text.as_bytes(), 50.0).is_err());
    }
}
