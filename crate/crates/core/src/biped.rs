//! The desk-scale biped: two 3-joint legs (hip yaw, hip pitch, knee) with
//! rigid feet, plus optional upper-body joints to reach larger `n`.

use serde::{Deserialize, Serialize};

use crate::kinematics::{KinematicTree, LinkSpec, ModelFile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BipedDims {
    /// Lateral distance from the base origin to each hip, meters.
    pub hip_offset: f64,
    pub thigh: f64,
    pub shank: f64,
}

impl Default for BipedDims {
    fn default() -> Self {
        Self {
            hip_offset: 0.1,
            thigh: 0.45,
            shank: 0.45,
        }
    }
}

impl BipedDims {
    /// Base height with straight legs and feet on the ground.
    pub fn standing_height(&self) -> f64 {
        self.thigh + self.shank
    }
}

pub const LEG_JOINTS: [&str; 3] = ["hip_yaw", "hip_pitch", "knee"];

/// Leg joint indices `[hip_yaw, hip_pitch, knee]` for one side.
pub fn leg_joint_indices(tree: &KinematicTree, left: bool) -> Option<[usize; 3]> {
    let side = if left { "l" } else { "r" };
    let mut out = [0; 3];
    for (k, j) in LEG_JOINTS.iter().enumerate() {
        out[k] = tree.joint_index(&format!("{side}_{j}"))?;
    }
    Some(out)
}

fn link(name: &str, parent: &str, xyz: [f64; 3], axis: Option<[f64; 3]>) -> LinkSpec {
    LinkSpec {
        name: name.to_string(),
        parent: Some(parent.to_string()),
        xyz,
        rpy: [0.0; 3],
        axis,
    }
}

/// Builds the biped with `6 + extra_joints` revolute joints. Extra joints
/// go to two arm chains (paired) and, for odd counts, one neck yaw.
pub fn biped_tree(extra_joints: usize, dims: &BipedDims) -> KinematicTree {
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    let mut links = vec![LinkSpec {
        name: "pelvis".into(),
        parent: None,
        xyz: [0.0; 3],
        rpy: [0.0; 3],
        axis: None,
    }];
    for (side, sign) in [("l", 1.0), ("r", -1.0)] {
        links.push(link(
            &format!("{side}_hip_yaw"),
            "pelvis",
            [0.0, sign * dims.hip_offset, 0.0],
            Some(z),
        ));
        links.push(link(
            &format!("{side}_hip_pitch"),
            &format!("{side}_hip_yaw"),
            [0.0; 3],
            Some(y),
        ));
        links.push(link(
            &format!("{side}_knee"),
            &format!("{side}_hip_pitch"),
            [0.0, 0.0, -dims.thigh],
            Some(y),
        ));
        links.push(link(
            &format!("{side}_foot"),
            &format!("{side}_knee"),
            [0.0, 0.0, -dims.shank],
            None,
        ));
    }
    let per_arm = extra_joints / 2;
    let axes = [y, x, z];
    for (side, sign) in [("l", 1.0), ("r", -1.0)] {
        let mut parent = "pelvis".to_string();
        for k in 0..per_arm {
            let name = format!("{side}_arm_{k}");
            let xyz = if k == 0 {
                [0.0, sign * 0.18, 0.35]
            } else {
                [0.0, 0.0, -0.12]
            };
            links.push(link(&name, &parent, xyz, Some(axes[k % 3])));
            parent = name;
        }
    }
    if extra_joints % 2 == 1 {
        links.push(link("neck_yaw", "pelvis", [0.0, 0.0, 0.5], Some(z)));
    }
    KinematicTree::from_spec(ModelFile {
        left_foot: "l_foot".into(),
        right_foot: "r_foot".into(),
        links,
    })
    .expect("biped model is well formed")
}
