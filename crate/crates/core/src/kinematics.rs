//! Floating-base forward kinematics and frame Jacobians.
//!
//! All 6D velocities are left-trivialized and ordered `(linear, angular)`.
//! For a frame `F` and base `B` the Jacobian splits as `J = [J^B | J^s]`,
//! where `J^B` is the adjoint of the relative transform `F ← B`: upper
//! block-triangular with rotation matrices on the diagonal.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix3, Matrix4, Matrix6, Rotation3, Translation3, Unit,
    UnitQuaternion, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{self, EulerOrder};

/// One link as written in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Offset from the parent link frame, meters.
    #[serde(default)]
    pub xyz: [f64; 3],
    /// Offset rotation, extrinsic x-y-z angles in radians.
    #[serde(default)]
    pub rpy: [f64; 3],
    /// Revolute axis in the link frame; absent for rigidly attached links.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
}

/// On-disk model description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub left_foot: String,
    pub right_foot: String,
    #[serde(rename = "link")]
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Isometry3<f64>,
    pub axis: Option<Unit<Vector3<f64>>>,
    /// Index into the joint vector when the link is actuated.
    pub joint: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KinematicTree {
    links: Vec<Link>,
    joint_links: Vec<usize>,
    by_name: HashMap<String, usize>,
    left_foot: usize,
    right_foot: usize,
    spec: ModelFile,
}

/// Frame names accepted besides link names.
pub const BASE: &str = "base";
pub const LEFT_FOOT: &str = "LF";
pub const RIGHT_FOOT: &str = "RF";

impl KinematicTree {
    /// Builds a tree. Links must be listed parents-first; the first link is
    /// the floating base and the only one without a parent.
    pub fn from_spec(spec: ModelFile) -> Result<Self> {
        if spec.links.is_empty() {
            return Err(Error::Model("no links".into()));
        }
        let mut links = Vec::with_capacity(spec.links.len());
        let mut by_name = HashMap::new();
        let mut joint_links = Vec::new();
        for (idx, ls) in spec.links.iter().enumerate() {
            if by_name.contains_key(&ls.name) {
                return Err(Error::Model(format!("duplicate link `{}`", ls.name)));
            }
            let parent = match (&ls.parent, idx) {
                (None, 0) => None,
                (None, _) => {
                    return Err(Error::Model(format!(
                        "link `{}` has no parent; only the base may be a root",
                        ls.name
                    )))
                }
                (Some(p), 0) => {
                    return Err(Error::Model(format!("base link has parent `{p}`")));
                }
                (Some(p), _) => Some(*by_name.get(p).ok_or_else(|| {
                    Error::Model(format!(
                        "parent `{p}` of `{}` is not defined before it",
                        ls.name
                    ))
                })?),
            };
            if idx == 0 && ls.axis.is_some() {
                return Err(Error::Model("the base link cannot carry a joint".into()));
            }
            let axis = match ls.axis {
                None => None,
                Some(a) => {
                    let v = Vector3::from(a);
                    if !(v.norm() > 1e-9) {
                        return Err(Error::Model(format!("zero axis on `{}`", ls.name)));
                    }
                    Some(Unit::new_normalize(v))
                }
            };
            let joint = axis.map(|_| {
                joint_links.push(idx);
                joint_links.len() - 1
            });
            let offset = Isometry3::from_parts(
                Translation3::from(Vector3::from(ls.xyz)),
                UnitQuaternion::from_euler_angles(ls.rpy[0], ls.rpy[1], ls.rpy[2]),
            );
            by_name.insert(ls.name.clone(), idx);
            links.push(Link {
                name: ls.name.clone(),
                parent,
                offset,
                axis,
                joint,
            });
        }
        let resolve = |name: &str| {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Model(format!("foot frame `{name}` is not a link")))
        };
        let left_foot = resolve(&spec.left_foot)?;
        let right_foot = resolve(&spec.right_foot)?;
        Ok(Self {
            links,
            joint_links,
            by_name,
            left_foot,
            right_foot,
            spec,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ModelFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&self.spec).expect("model spec serializes")
    }

    pub fn spec(&self) -> &ModelFile {
        &self.spec
    }

    /// Number of revolute joints.
    pub fn dof(&self) -> usize {
        self.joint_links.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joint_names(&self) -> Vec<&str> {
        self.joint_links
            .iter()
            .map(|&l| self.links[l].name.as_str())
            .collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).and_then(|&l| self.links[l].joint)
    }

    /// Resolves `base`, `LF`, `RF` or a link name.
    pub fn frame_index(&self, frame: &str) -> Result<usize> {
        match frame {
            BASE => Ok(0),
            LEFT_FOOT => Ok(self.left_foot),
            RIGHT_FOOT => Ok(self.right_foot),
            name => self
                .by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownFrame(name.to_string())),
        }
    }

    pub fn foot_index(&self, left: bool) -> usize {
        if left {
            self.left_foot
        } else {
            self.right_foot
        }
    }

    fn check_joints(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dof() {
            return Err(Error::dim("joint positions", self.dof(), s.len()));
        }
        Ok(())
    }

    /// World transform of every link.
    pub fn link_poses(&self, base: &Isometry3<f64>, s: &[f64]) -> Result<Vec<Isometry3<f64>>> {
        self.check_joints(s)?;
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.links.len());
        for link in &self.links {
            let pose = match link.parent {
                None => *base,
                Some(p) => {
                    let mut t = out[p] * link.offset;
                    if let (Some(axis), Some(j)) = (link.axis, link.joint) {
                        t *= UnitQuaternion::from_axis_angle(&axis, s[j]);
                    }
                    t
                }
            };
            out.push(pose);
        }
        Ok(out)
    }

    /// Transforms of every link relative to the base (base at identity).
    pub fn relative_poses(&self, s: &[f64]) -> Result<Vec<Isometry3<f64>>> {
        self.link_poses(&Isometry3::identity(), s)
    }

    fn on_path(&self, frame: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = Some(frame);
        while let Some(l) = cur {
            path.push(l);
            cur = self.links[l].parent;
        }
        path
    }
}

/// World poses of all named frames for one configuration.
#[derive(Debug, Clone)]
pub struct FramePoses<'a> {
    tree: &'a KinematicTree,
    poses: Vec<Isometry3<f64>>,
}

impl FramePoses<'_> {
    pub fn transform(&self, frame: &str) -> Result<Isometry3<f64>> {
        Ok(self.poses[self.tree.frame_index(frame)?])
    }

    pub fn homogeneous(&self, frame: &str) -> Result<Matrix4<f64>> {
        Ok(self.transform(frame)?.to_homogeneous())
    }

    pub fn by_index(&self, link: usize) -> &Isometry3<f64> {
        &self.poses[link]
    }

    /// Every link keyed by name.
    pub fn to_map(&self) -> HashMap<String, Isometry3<f64>> {
        self.tree
            .links
            .iter()
            .zip(&self.poses)
            .map(|(l, p)| (l.name.clone(), *p))
            .collect()
    }
}

pub fn forward_kinematics<'a>(
    tree: &'a KinematicTree,
    base: &Isometry3<f64>,
    s: &[f64],
) -> Result<FramePoses<'a>> {
    Ok(FramePoses {
        tree,
        poses: tree.link_poses(base, s)?,
    })
}

/// Full floating-base state `(q, ν)`. Orientation is kept as a rotation
/// matrix; Tait-Bryan angles are derived on request.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicState {
    pub position: Vector3<f64>,
    pub rotation: Rotation3<f64>,
    pub joints: DVector<f64>,
    /// Body-fixed base velocity `(v, ω)`.
    pub base_velocity: Vector6<f64>,
    pub joint_velocities: DVector<f64>,
}

impl KinematicState {
    pub fn standing(n: usize, height: f64) -> Self {
        Self {
            position: Vector3::new(0.0, 0.0, height),
            rotation: Rotation3::identity(),
            joints: DVector::zeros(n),
            base_velocity: Vector6::zeros(),
            joint_velocities: DVector::zeros(n),
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn base_pose(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position),
            UnitQuaternion::from_rotation_matrix(&self.rotation),
        )
    }

    pub fn linear_velocity(&self) -> Vector3<f64> {
        self.base_velocity.fixed_rows::<3>(0).into()
    }

    pub fn angular_velocity(&self) -> Vector3<f64> {
        self.base_velocity.fixed_rows::<3>(3).into()
    }

    pub fn tait_bryan(&self, order: EulerOrder) -> Result<Vector3<f64>> {
        so3::tait_bryan_from_rotation(&self.rotation, order)
    }

    /// Combined velocity `ν = (v_B, ṡ)`.
    pub fn nu(&self) -> DVector<f64> {
        let n = self.dof();
        let mut nu = DVector::zeros(6 + n);
        nu.fixed_rows_mut::<6>(0).copy_from(&self.base_velocity);
        nu.rows_mut(6, n).copy_from(&self.joint_velocities);
        nu
    }
}

/// `Ad_T` for `T = (R, p)` acting on `(v, ω)` twists.
pub fn adjoint(t: &Isometry3<f64>) -> Matrix6<f64> {
    let r = *t.rotation.to_rotation_matrix().matrix();
    let p = t.translation.vector;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(so3::hat(&p) * r));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad
}

/// `J = [J^B | J^s]` for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameJacobian {
    pub base: Matrix6<f64>,
    pub joints: DMatrix<f64>,
}

impl FrameJacobian {
    /// Splits a `6 × (6+n)` matrix.
    pub fn from_matrix(j: &DMatrix<f64>) -> Result<Self> {
        if j.nrows() != 6 || j.ncols() < 6 {
            return Err(Error::dim("jacobian columns (>= 6, 6 rows)", 6, j.ncols()));
        }
        Ok(Self {
            base: Matrix6::from_iterator(j.columns(0, 6).iter().cloned()),
            joints: j.columns(6, j.ncols() - 6).into_owned(),
        })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.joints.ncols();
        let mut j = DMatrix::zeros(6, 6 + n);
        j.view_mut((0, 0), (6, 6)).copy_from(&self.base);
        j.view_mut((0, 6), (6, n)).copy_from(&self.joints);
        j
    }

    pub fn dof(&self) -> usize {
        self.joints.ncols()
    }

    /// `J · ν`.
    pub fn apply(&self, base_velocity: &Vector6<f64>, sdot: &DVector<f64>) -> Vector6<f64> {
        let mut v = self.base * base_velocity;
        v += &self.joints * sdot;
        v
    }

    /// Inverse of `J^B` from its adjoint structure:
    /// `[[A, B], [0, C]]⁻¹ = [[Aᵀ, −Aᵀ B Cᵀ], [0, Cᵀ]]`.
    pub fn base_inverse(&self) -> Matrix6<f64> {
        let a: Matrix3<f64> = self.base.fixed_view::<3, 3>(0, 0).into();
        let b: Matrix3<f64> = self.base.fixed_view::<3, 3>(0, 3).into();
        let c: Matrix3<f64> = self.base.fixed_view::<3, 3>(3, 3).into();
        let mut inv = Matrix6::zeros();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&a.transpose());
        inv.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-a.transpose() * b * c.transpose()));
        inv.fixed_view_mut::<3, 3>(3, 3).copy_from(&c.transpose());
        inv
    }

    /// `(J^B)⁻¹ J^s`, the 6×n map whose negation gives the base velocity
    /// that keeps this frame still.
    pub fn support_map(&self) -> DMatrix<f64> {
        let inv = DMatrix::from_iterator(6, 6, self.base_inverse().iter().cloned());
        inv * &self.joints
    }

    /// Largest magnitude in the lower-left block and the worst
    /// orthonormality residual of the diagonal blocks.
    pub fn base_structure_error(&self) -> (f64, f64) {
        let ll = self.base.fixed_view::<3, 3>(3, 0).abs().max();
        let a: Matrix3<f64> = self.base.fixed_view::<3, 3>(0, 0).into();
        let c: Matrix3<f64> = self.base.fixed_view::<3, 3>(3, 3).into();
        (
            ll,
            so3::orthonormality_error(&a).max(so3::orthonormality_error(&c)),
        )
    }
}

/// Left-trivialized Jacobian of `frame` at joint configuration `s`.
/// Depends only on the joint positions; the base pose cancels out.
pub fn frame_jacobian(tree: &KinematicTree, s: &[f64], frame: &str) -> Result<FrameJacobian> {
    let fidx = tree.frame_index(frame)?;
    frame_jacobian_by_index(tree, s, fidx)
}

pub fn frame_jacobian_by_index(
    tree: &KinematicTree,
    s: &[f64],
    frame: usize,
) -> Result<FrameJacobian> {
    let rel = tree.relative_poses(s)?;
    let frame_inv = rel[frame].inverse();
    let base = adjoint(&frame_inv);
    let mut joints = DMatrix::zeros(6, tree.dof());
    for l in tree.on_path(frame) {
        let link = &tree.links[l];
        if let (Some(axis), Some(j)) = (link.axis, link.joint) {
            let t = frame_inv * rel[l];
            let r = t.rotation.to_rotation_matrix();
            let w = r * axis.into_inner();
            let v = t.translation.vector.cross(&w);
            joints.fixed_view_mut::<3, 1>(0, j).copy_from(&v);
            joints.fixed_view_mut::<3, 1>(3, j).copy_from(&w);
        }
    }
    Ok(FrameJacobian { base, joints })
}

/// Base velocity that keeps the support frame still:
/// `v_B = −(J^B)⁻¹ J^s ṡ`.
pub fn base_velocity_from_constraint(j: &FrameJacobian, sdot: &DVector<f64>) -> Vector6<f64> {
    let rhs: Vector6<f64> = -(&j.joints * sdot).fixed_rows::<6>(0).into_owned();
    j.base_inverse() * rhs
}
