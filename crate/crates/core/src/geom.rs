//! Rotation and pose geometry on S³×ℝ³, Denavit-Hartenberg forward kinematics,
//! the identification Jacobian used by calibration, and a damped least-squares
//! inverse kinematics solver used to emulate visual servoing.
//!
//! Poses are flattened into 7-vectors `[px, py, pz, qw, qx, qy, qz]` whenever a
//! Euclidean difference is needed. Quaternion blocks are always sign-aligned to
//! a reference before subtraction so that `q` and `-q` never produce a spurious
//! residual.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Mul, Neg};
use std::str::FromStr;

use nalgebra::{DMatrix, Isometry3, Matrix6, Quaternion, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error(
        "inverse kinematics did not converge after {iterations} iterations \
         (position error {position_error:.3e} m, orientation error {orientation_error:.3e} rad)"
    )]
    NoConvergence {
        iterations: usize,
        position_error: f64,
        orientation_error: f64,
    },
    #[error("kinematic chain must have at least one joint")]
    EmptyChain,
    #[error("joint vector has {got} entries, chain has {expected} joints")]
    JointCount { expected: usize, got: usize },
    #[error("unknown DH parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter mask frees no parameters")]
    EmptyMask,
    #[error("parameter mask has {got} entries, expected {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("no joint configurations supplied")]
    NoConfigurations,
}

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a quaternion from raw components and normalizes it. A zero
    /// (or non-finite) input yields the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Self::IDENTITY;
        }
        Quat { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-300 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * axis.x / n, s * axis.y / n, s * axis.z / n)
    }

    /// Rotation by the vector's norm about its direction.
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn conjugate(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Representative with `w >= 0`.
    pub fn canonical(self) -> Quat {
        if self.w < 0.0 {
            -self
        } else {
            self
        }
    }

    /// True when both quaternions describe the same rotation (up to sign).
    pub fn rotation_eq(&self, other: &Quat, tol: f64) -> bool {
        geodesic_distance(self, other) <= tol
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        geodesic_distance(&Quat::IDENTITY, self)
    }

    /// Rotation vector (axis times angle) of the shortest representative.
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        let q = self.canonical();
        let v = Vector3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * s.atan2(q.w);
        v * (angle / s)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_unit() * v
    }

    pub fn to_unit(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_unchecked(Quaternion::new(self.w, self.x, self.y, self.z))
    }

    pub fn from_unit(q: &UnitQuaternion<f64>) -> Self {
        Self::new(q.w, q.i, q.j, q.k)
    }
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        Quat { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }
}

impl Mul for Quat {
    type Output = Quat;
    fn mul(self, r: Quat) -> Quat {
        Quat::new(
            self.w * r.w - self.x * r.x - self.y * r.y - self.z * r.z,
            self.w * r.x + self.x * r.w + self.y * r.z - self.z * r.y,
            self.w * r.y - self.x * r.z + self.y * r.w + self.z * r.x,
            self.w * r.z + self.x * r.y - self.y * r.x + self.z * r.w,
        )
    }
}

/// Geodesic distance `2·arccos(|⟨q1, q2⟩|)` between the rotations represented
/// by two unit quaternions, in `[0, π]`.
///
/// Evaluated as `4·atan2(‖q1 − s·q2‖, ‖q1 + s·q2‖)` with `s = sign⟨q1, q2⟩`,
/// which is the same quantity without the loss of precision `arccos` suffers
/// near 1.
pub fn geodesic_distance(q1: &Quat, q2: &Quat) -> f64 {
    let q2 = align_sign(q1, q2);
    let diff = [q1.w - q2.w, q1.x - q2.x, q1.y - q2.y, q1.z - q2.z];
    let sum = [q1.w + q2.w, q1.x + q2.x, q1.y + q2.y, q1.z + q2.z];
    let dn = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sn = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    (4.0 * dn.atan2(sn)).clamp(0.0, PI)
}

/// Returns `candidate` or `-candidate`, whichever has a nonnegative inner
/// product with `reference`.
pub fn align_sign(reference: &Quat, candidate: &Quat) -> Quat {
    if reference.dot(candidate) < 0.0 {
        -*candidate
    } else {
        *candidate
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Element of S³×ℝ³: unit quaternion plus position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Quat,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Quat, position: Vector3<f64>) -> Self {
        Pose { rotation, position }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose { rotation: Quat::IDENTITY, position: Vector3::new(x, y, z) }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Pose {
            rotation: Quat::from_unit(&iso.rotation),
            position: iso.translation.vector,
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.rotation.to_unit())
    }

    /// `self ∘ other` as rigid transforms.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            position: self.position + self.rotation.rotate(&other.position),
        }
    }

    pub fn canonical(self) -> Pose {
        Pose { rotation: self.rotation.canonical(), position: self.position }
    }

    /// `[px, py, pz, qw, qx, qy, qz]`.
    pub fn to_vector7(&self) -> [f64; 7] {
        let q = self.rotation;
        [self.position.x, self.position.y, self.position.z, q.w, q.x, q.y, q.z]
    }

    pub fn from_vector7(v: &[f64]) -> Pose {
        Pose {
            rotation: Quat::new(v[3], v[4], v[5], v[6]),
            position: Vector3::new(v[0], v[1], v[2]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector7().iter().all(|v| v.is_finite())
    }
}

/// Componentwise 7-vector difference `measured − computed`, with the measured
/// quaternion sign-aligned to the computed one first.
pub fn pose_difference(measured: &Pose, computed: &Pose) -> [f64; 7] {
    let aligned = Pose {
        rotation: align_sign(&computed.rotation, &measured.rotation),
        position: measured.position,
    };
    let m = aligned.to_vector7();
    let c = computed.to_vector7();
    let mut out = [0.0; 7];
    for i in 0..7 {
        out[i] = m[i] - c[i];
    }
    out
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    quat: [f64; 4],
    pos: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            quat: self.rotation.to_array(),
            pos: [self.position.x, self.position.y, self.position.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        let n = r.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 1e-12) {
            return Err(serde::de::Error::custom("pose quaternion must be nonzero and finite"));
        }
        Ok(Pose {
            rotation: Quat::from_array(r.quat),
            position: Vector3::new(r.pos[0], r.pos[1], r.pos[2]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One row of a DH table. Angles are kept wrapped to `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawDhRow")]
pub struct DhRow {
    phi: f64,
    alpha: f64,
    a: f64,
    d: f64,
    kind: JointKind,
}

#[derive(Deserialize)]
struct RawDhRow {
    phi: f64,
    alpha: f64,
    a: f64,
    d: f64,
    #[serde(default = "default_kind")]
    kind: JointKind,
}

fn default_kind() -> JointKind {
    JointKind::Revolute
}

impl From<RawDhRow> for DhRow {
    fn from(r: RawDhRow) -> Self {
        DhRow::new(r.phi, r.alpha, r.a, r.d, r.kind)
    }
}

impl DhRow {
    pub fn new(phi: f64, alpha: f64, a: f64, d: f64, kind: JointKind) -> Self {
        DhRow { phi: wrap_angle(phi), alpha: wrap_angle(alpha), a, d, kind }
    }

    pub fn revolute(phi: f64, alpha: f64, a: f64, d: f64) -> Self {
        Self::new(phi, alpha, a, d, JointKind::Revolute)
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn d(&self) -> f64 {
        self.d
    }
    pub fn kind(&self) -> JointKind {
        self.kind
    }

    pub fn get(&self, p: DhParam) -> f64 {
        match p {
            DhParam::Phi => self.phi,
            DhParam::Alpha => self.alpha,
            DhParam::A => self.a,
            DhParam::D => self.d,
        }
    }

    pub fn with(&self, p: DhParam, value: f64) -> DhRow {
        let mut r = *self;
        match p {
            DhParam::Phi => r.phi = wrap_angle(value),
            DhParam::Alpha => r.alpha = wrap_angle(value),
            DhParam::A => r.a = value,
            DhParam::D => r.d = value,
        }
        r
    }

    /// Link transform `Rz(φ+θ)·Tz(d)·Tx(a)·Rx(α)` (prismatic joints add θ to `d`).
    pub fn transform(&self, joint: f64) -> Isometry3<f64> {
        let (angle, d) = match self.kind {
            JointKind::Revolute => (self.phi + joint, self.d),
            JointKind::Prismatic => (self.phi, self.d + joint),
        };
        let (s, c) = angle.sin_cos();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        Isometry3::from_parts(Translation3::new(self.a * c, self.a * s, d), rot)
    }
}

/// The four DH parameter kinds, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DhParam {
    Phi,
    Alpha,
    A,
    D,
}

impl DhParam {
    pub const ALL: [DhParam; 4] = [DhParam::Phi, DhParam::Alpha, DhParam::A, DhParam::D];

    pub fn is_angle(self) -> bool {
        matches!(self, DhParam::Phi | DhParam::Alpha)
    }

    fn prefix(self) -> &'static str {
        match self {
            DhParam::Phi => "phi",
            DhParam::Alpha => "alpha",
            DhParam::A => "a",
            DhParam::D => "d",
        }
    }
}

/// A single DH parameter, e.g. `phi7`. `joint` is zero-based; the textual
/// form is one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub kind: DhParam,
    pub joint: usize,
}

impl ParamId {
    pub fn new(kind: DhParam, joint: usize) -> Self {
        ParamId { kind, joint }
    }

    /// Position in the stacked vector `[φ̄ ᾱ ā d̄]` of a chain with `n` joints.
    pub fn index(&self, n: usize) -> usize {
        self.kind as usize * n + self.joint
    }

    pub fn from_index(index: usize, n: usize) -> Self {
        ParamId { kind: DhParam::ALL[index / n], joint: index % n }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.joint + 1)
    }
}

impl FromStr for ParamId {
    type Err = GeomError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // "alpha" must be tried before "a".
        for kind in [DhParam::Phi, DhParam::Alpha, DhParam::D, DhParam::A] {
            if let Some(rest) = s.strip_prefix(kind.prefix()) {
                if let Ok(j) = rest.parse::<usize>() {
                    if j >= 1 {
                        return Ok(ParamId { kind, joint: j - 1 });
                    }
                }
            }
        }
        Err(GeomError::UnknownParameter(s.to_string()))
    }
}

impl Serialize for ParamId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which of the `4·n_j` DH parameters are unknown (free) during identification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    free: Vec<bool>,
}

impl ParamMask {
    pub fn new(free: Vec<bool>) -> Self {
        ParamMask { free }
    }

    pub fn none(n_joints: usize) -> Self {
        ParamMask { free: vec![false; 4 * n_joints] }
    }

    pub fn all(n_joints: usize) -> Self {
        ParamMask { free: vec![true; 4 * n_joints] }
    }

    /// Frees only the joint offsets φ.
    pub fn joint_offsets(n_joints: usize) -> Self {
        let mut m = Self::none(n_joints);
        for j in 0..n_joints {
            m.free[j] = true;
        }
        m
    }

    pub fn from_params(n_joints: usize, params: &[ParamId]) -> Result<Self, GeomError> {
        let mut m = Self::none(n_joints);
        for p in params {
            if p.joint >= n_joints {
                return Err(GeomError::UnknownParameter(p.to_string()));
            }
            m.free[p.index(n_joints)] = true;
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn n_joints(&self) -> usize {
        self.free.len() / 4
    }

    pub fn is_free(&self, index: usize) -> bool {
        self.free[index]
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.free.len()).filter(|&i| self.free[i]).collect()
    }

    pub fn free_params(&self) -> Vec<ParamId> {
        let n = self.n_joints();
        self.free_indices().into_iter().map(|i| ParamId::from_index(i, n)).collect()
    }
}

/// Per-parameter corrections `δ̄ = [δφ̄ δᾱ δā δd̄]`; entries fixed by the mask
/// are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta {
    values: Vec<f64>,
    mask: ParamMask,
}

impl ParamDelta {
    pub fn zeros(mask: ParamMask) -> Self {
        ParamDelta { values: vec![0.0; mask.len()], mask }
    }

    /// Builds a delta from the values of the free parameters, in mask order.
    pub fn from_free(mask: ParamMask, free_values: &[f64]) -> Self {
        assert_eq!(mask.n_free(), free_values.len(), "free value count must match the mask");
        let mut values = vec![0.0; mask.len()];
        for (i, v) in mask.free_indices().into_iter().zip(free_values) {
            values[i] = *v;
        }
        ParamDelta { values, mask }
    }

    /// Delta touching only the listed parameters (which become the free set).
    pub fn from_entries(n_joints: usize, entries: &[(ParamId, f64)]) -> Result<Self, GeomError> {
        let ids: Vec<ParamId> = entries.iter().map(|(p, _)| *p).collect();
        let mask = ParamMask::from_params(n_joints, &ids)?;
        let mut values = vec![0.0; mask.len()];
        for (p, v) in entries {
            values[p.index(n_joints)] += *v;
        }
        Ok(ParamDelta { values, mask })
    }

    pub fn mask(&self) -> &ParamMask {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: ParamId) -> f64 {
        self.values[p.index(self.mask.n_joints())]
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.mask.free_indices().into_iter().map(|i| self.values[i]).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Serial chain: DH table plus base and tool transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDhChain")]
pub struct DhChain {
    rows: Vec<DhRow>,
    base: Pose,
    tool: Pose,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDhChain {
    rows: Vec<DhRow>,
    #[serde(default)]
    base: Pose,
    #[serde(default)]
    tool: Pose,
}

impl TryFrom<RawDhChain> for DhChain {
    type Error = GeomError;
    fn try_from(r: RawDhChain) -> Result<Self, GeomError> {
        DhChain::new(r.rows, r.base, r.tool)
    }
}

impl DhChain {
    pub fn new(rows: Vec<DhRow>, base: Pose, tool: Pose) -> Result<Self, GeomError> {
        if rows.is_empty() {
            return Err(GeomError::EmptyChain);
        }
        Ok(DhChain { rows, base: base.canonical(), tool: tool.canonical() })
    }

    /// Nominal 7-DOF WAM-style arm with a scoop tool mounted on the last
    /// joint axis, 12 cm past the wrist flange.
    pub fn wam7() -> Self {
        let h = PI / 2.0;
        let rows = vec![
            DhRow::revolute(0.0, -h, 0.0, 0.0),
            DhRow::revolute(0.0, h, 0.0, 0.0),
            DhRow::revolute(0.0, -h, 0.045, 0.55),
            DhRow::revolute(0.0, h, -0.045, 0.0),
            DhRow::revolute(0.0, -h, 0.0, 0.3),
            DhRow::revolute(0.0, h, 0.0, 0.0),
            DhRow::revolute(0.0, 0.0, 0.0, 0.06),
        ];
        DhChain::new(rows, Pose::identity(), Pose::from_translation(0.0, 0.0, 0.12))
            .expect("nominal chain is nonempty")
    }

    pub fn n_joints(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[DhRow] {
        &self.rows
    }

    pub fn base(&self) -> &Pose {
        &self.base
    }

    pub fn tool(&self) -> &Pose {
        &self.tool
    }

    pub fn param(&self, p: ParamId) -> f64 {
        self.rows[p.joint].get(p.kind)
    }

    /// Stacked parameter vector `Ψ = [φ̄ ᾱ ā d̄]`.
    pub fn param_vector(&self) -> Vec<f64> {
        let n = self.n_joints();
        (0..4 * n).map(|i| self.param(ParamId::from_index(i, n))).collect()
    }

    pub fn with_param_offset(&self, p: ParamId, delta: f64) -> DhChain {
        let mut c = self.clone();
        let row = &mut c.rows[p.joint];
        *row = row.with(p.kind, row.get(p.kind) + delta);
        c
    }

    /// `Ψ + δ̄`.
    pub fn apply_delta(&self, delta: &ParamDelta) -> DhChain {
        let n = self.n_joints();
        assert_eq!(delta.mask().len(), 4 * n, "delta does not match chain size");
        let mut c = self.clone();
        for (i, v) in delta.values().iter().enumerate() {
            if *v != 0.0 {
                let p = ParamId::from_index(i, n);
                let row = &mut c.rows[p.joint];
                *row = row.with(p.kind, row.get(p.kind) + v);
            }
        }
        c
    }

    /// Parameter-wise difference `self − other`, angles wrapped.
    pub fn delta_from(&self, other: &DhChain) -> Vec<f64> {
        let n = self.n_joints();
        (0..4 * n)
            .map(|i| {
                let p = ParamId::from_index(i, n);
                let d = self.param(p) - other.param(p);
                if p.kind.is_angle() {
                    wrap_angle(d)
                } else {
                    d
                }
            })
            .collect()
    }

    pub fn append_row(&self, row: DhRow) -> DhChain {
        let mut c = self.clone();
        c.rows.push(row);
        c
    }
}

/// `f_B · ∏ T_{i−1,i}(θ_i) · f_T`, with the rotation returned as its `w ≥ 0`
/// representative.
pub fn forward_kinematics(chain: &DhChain, theta: &[f64]) -> Pose {
    assert_eq!(theta.len(), chain.n_joints(), "joint vector length must match the chain");
    let mut t = chain.base.to_isometry();
    for (row, q) in chain.rows.iter().zip(theta) {
        t *= row.transform(*q);
    }
    t *= chain.tool.to_isometry();
    Pose::from_isometry(&t).canonical()
}

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Sensitivity of the stacked 7-vector pose representation with respect to the
/// free DH parameters, by central differences.
#[derive(Debug, Clone)]
pub struct IdentificationJacobian {
    pub matrix: DMatrix<f64>,
    pub params: Vec<ParamId>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

impl IdentificationJacobian {
    pub fn compute(chain: &DhChain, thetas: &[Vec<f64>], mask: &ParamMask) -> Result<Self, GeomError> {
        Self::with_step(chain, thetas, mask, DEFAULT_FD_STEP)
    }

    pub fn with_step(
        chain: &DhChain,
        thetas: &[Vec<f64>],
        mask: &ParamMask,
        h: f64,
    ) -> Result<Self, GeomError> {
        let n = chain.n_joints();
        if thetas.is_empty() {
            return Err(GeomError::NoConfigurations);
        }
        if mask.len() != 4 * n {
            return Err(GeomError::MaskLength { expected: 4 * n, got: mask.len() });
        }
        if mask.n_free() == 0 {
            return Err(GeomError::EmptyMask);
        }
        for th in thetas {
            if th.len() != n {
                return Err(GeomError::JointCount { expected: n, got: th.len() });
            }
        }
        let params = mask.free_params();
        let mut matrix = DMatrix::zeros(7 * thetas.len(), params.len());
        for (col, p) in params.iter().enumerate() {
            let plus = chain.with_param_offset(*p, h);
            let minus = chain.with_param_offset(*p, -h);
            for (m, th) in thetas.iter().enumerate() {
                let base = forward_kinematics(chain, th);
                let dp = pose_difference(&forward_kinematics(&plus, th), &base);
                let dm = pose_difference(&forward_kinematics(&minus, th), &base);
                for k in 0..7 {
                    matrix[(7 * m + k, col)] = (dp[k] - dm[k]) / (2.0 * h);
                }
            }
        }
        let singular_values = singular_values_desc(&matrix);
        let rank = numerical_rank(&singular_values);
        Ok(IdentificationJacobian { matrix, params, singular_values, rank })
    }

    pub fn n_free(&self) -> usize {
        self.params.len()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.params.len()
    }

    /// Parameters with significant weight in the numerical null space; these
    /// cannot be identified from the supplied configurations.
    pub fn unidentifiable(&self) -> Vec<ParamId> {
        if self.is_full_rank() {
            return Vec::new();
        }
        let svd = self.matrix.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let smax = svd.singular_values.max();
        let mut out = Vec::new();
        for (r, s) in svd.singular_values.iter().enumerate() {
            if *s > RANK_TOL * smax {
                continue;
            }
            for (c, p) in self.params.iter().enumerate() {
                if v_t[(r, c)].abs() > 0.1 && !out.contains(p) {
                    out.push(*p);
                }
            }
        }
        // Columns of zero length are also unidentifiable.
        for (c, p) in self.params.iter().enumerate() {
            if self.matrix.column(c).norm() <= RANK_TOL * smax.max(1e-300) && !out.contains(p) {
                out.push(*p);
            }
        }
        out.sort();
        out
    }
}

const RANK_TOL: f64 = 1e-8;

fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn numerical_rank(s: &[f64]) -> usize {
    let smax = s.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    s.iter().filter(|v| **v > RANK_TOL * smax).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkOptions {
    pub damping: f64,
    pub max_step: f64,
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            damping: 1e-3,
            max_step: 0.2,
            max_iterations: 200,
            position_tolerance: 5e-4,
            orientation_tolerance: 0.1_f64.to_radians(),
        }
    }
}

/// World-frame 6D error `[p_target − p; rotvec(q_target · q⁻¹)]`.
fn pose_error6(target: &Pose, current: &Pose) -> Vector6<f64> {
    let dp = target.position - current.position;
    let dq = (target.rotation * current.rotation.conjugate()).to_rotation_vector();
    Vector6::new(dp.x, dp.y, dp.z, dq.x, dq.y, dq.z)
}

fn ik_jacobian(chain: &DhChain, theta: &[f64]) -> DMatrix<f64> {
    let h = 1e-7;
    let n = theta.len();
    let mut j = DMatrix::zeros(6, n);
    let mut th = theta.to_vec();
    for c in 0..n {
        th[c] = theta[c] + h;
        let plus = forward_kinematics(chain, &th);
        th[c] = theta[c] - h;
        let minus = forward_kinematics(chain, &th);
        th[c] = theta[c];
        let e = pose_error6(&plus, &minus) / (2.0 * h);
        for r in 0..6 {
            j[(r, c)] = e[r];
        }
    }
    j
}

/// Damped least-squares IK from `theta0`. Returns a joint vector placing the
/// tool of `chain` at `target` within the option tolerances.
pub fn solve_ik(chain: &DhChain, target: &Pose, theta0: &[f64], opts: &IkOptions) -> Result<Vec<f64>, GeomError> {
    let n = chain.n_joints();
    if theta0.len() != n {
        return Err(GeomError::JointCount { expected: n, got: theta0.len() });
    }
    let mut theta = theta0.to_vec();
    let mut pos_err = f64::INFINITY;
    let mut rot_err = f64::INFINITY;
    if !target.is_finite() {
        return Err(GeomError::NoConvergence { iterations: 0, position_error: pos_err, orientation_error: rot_err });
    }
    let lambda2 = opts.damping * opts.damping;
    for iter in 0..=opts.max_iterations {
        let current = forward_kinematics(chain, &theta);
        pos_err = (target.position - current.position).norm();
        rot_err = geodesic_distance(&target.rotation, &current.rotation);
        if pos_err < opts.position_tolerance && rot_err < opts.orientation_tolerance {
            return Ok(theta);
        }
        if iter == opts.max_iterations {
            break;
        }
        let e = pose_error6(target, &current);
        let j = ik_jacobian(chain, &theta);
        let jjt: Matrix6<f64> = {
            let m = &j * j.transpose();
            Matrix6::from_fn(|r, c| m[(r, c)]) + Matrix6::identity() * lambda2
        };
        let Some(chol) = jjt.cholesky() else {
            break;
        };
        let y = chol.solve(&e);
        let step = j.transpose() * nalgebra::DVector::from_column_slice(y.as_slice());
        let max = step.amax();
        let scale = if max > opts.max_step { opts.max_step / max } else { 1.0 };
        for (t, s) in theta.iter_mut().zip(step.iter()) {
            *t += scale * s;
        }
    }
    Err(GeomError::NoConvergence {
        iterations: opts.max_iterations,
        position_error: pos_err,
        orientation_error: rot_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        loop {
            let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n: f64 = v.iter().map(|x| x * x).sum();
            if n > 1e-3 && n <= 1.0 {
                return Quat::from_array(v);
            }
        }
    }

    fn random_theta(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn geodesic_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_quat(&mut rng);
        assert_eq!(geodesic_distance(&q, &q), 0.0);
        assert_eq!(geodesic_distance(&q, &-q), 0.0);
        let rz = Quat::from_axis_angle(&Vector3::z(), PI / 2.0);
        assert_abs_diff_eq!(geodesic_distance(&Quat::IDENTITY, &rz), PI / 2.0, epsilon = 1e-12);
        // matches the arccos form away from the ill-conditioned region
        let a = random_quat(&mut rng);
        let b = random_quat(&mut rng);
        let reference = 2.0 * a.dot(&b).abs().min(1.0).acos();
        assert_abs_diff_eq!(geodesic_distance(&a, &b), reference, epsilon = 1e-9);
    }

    #[test]
    fn align_sign_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_quat(&mut rng);
        assert_eq!(align_sign(&q, &q), q);
        assert_eq!(align_sign(&q, &-q), q);
        let c = Quat::new(-0.9, 0.3, 0.2, (1.0f64 - 0.81 - 0.09 - 0.04).sqrt());
        let out = align_sign(&Quat::IDENTITY, &c);
        assert_abs_diff_eq!(out.w(), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn quaternion_norm_invariant() {
        let q = Quat::new(3.0, -1.0, 2.0, 0.5);
        let n = q.dot(&q).sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let p = q * Quat::new(0.1, 0.2, 0.3, 0.4);
        assert!((p.dot(&p).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        let r = DhRow::revolute(7.0, -4.0, 0.1, 0.2);
        assert!(r.phi() > -PI && r.phi() <= PI);
        assert!(r.alpha() > -PI && r.alpha() <= PI);
    }

    #[test]
    fn fk_z_stack() {
        let rows = vec![
            DhRow::revolute(0.0, 0.0, 0.0, 0.1),
            DhRow::revolute(0.0, 0.0, 0.0, 0.2),
            DhRow::revolute(0.0, 0.0, 0.0, 0.3),
        ];
        let chain = DhChain::new(rows, Pose::identity(), Pose::identity()).unwrap();
        let p = forward_kinematics(&chain, &[0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(p.position.z, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.position.x, 0.0);
        assert_eq!(p.rotation, Quat::IDENTITY);
    }

    #[test]
    fn fk_planar_one_link() {
        let chain = DhChain::new(vec![DhRow::revolute(0.0, 0.0, 1.0, 0.0)], Pose::identity(), Pose::identity()).unwrap();
        let p = forward_kinematics(&chain, &[PI / 2.0]);
        assert_abs_diff_eq!(p.position.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.position.y, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.position.z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn fk_prismatic_joint_extends_offset() {
        let chain = DhChain::new(
            vec![DhRow::new(0.0, 0.0, 0.0, 0.1, JointKind::Prismatic)],
            Pose::identity(),
            Pose::identity(),
        )
        .unwrap();
        let p = forward_kinematics(&chain, &[0.25]);
        assert_abs_diff_eq!(p.position.z, 0.35, epsilon = 1e-15);
    }

    #[test]
    fn fk_appending_zero_row_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chain = DhChain::wam7();
        let longer = chain.append_row(DhRow::revolute(0.0, 0.0, 0.0, 0.0));
        for _ in 0..50 {
            let th = random_theta(&mut rng, 7);
            let th8: Vec<f64> = th.iter().copied().chain([0.0]).collect();
            let a = forward_kinematics(&chain, &th).to_vector7();
            let b = forward_kinematics(&longer, &th8).to_vector7();
            for k in 0..7 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fk_perturbed_difference_matches_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chain = DhChain::wam7();
        let th = random_theta(&mut rng, 7);
        let vals: Vec<f64> = (0..28).map(|_| rng.random_range(-0.01..0.01)).collect();
        let delta = ParamDelta::from_free(ParamMask::all(7), &vals);
        let perturbed = chain.apply_delta(&delta);
        // Same perturbation built parameter by parameter.
        let mut manual = chain.clone();
        for (i, v) in vals.iter().enumerate() {
            manual = manual.with_param_offset(ParamId::from_index(i, 7), *v);
        }
        let d1 = pose_difference(&forward_kinematics(&perturbed, &th), &forward_kinematics(&chain, &th));
        let d2 = pose_difference(&forward_kinematics(&manual, &th), &forward_kinematics(&chain, &th));
        for k in 0..7 {
            assert!((d1[k] - d2[k]).abs() < 1e-14);
        }
        assert!(d1.iter().any(|v| v.abs() > 1e-4));
    }

    #[test]
    fn param_id_round_trip_names() {
        for s in ["phi1", "alpha7", "a3", "d2"] {
            let p: ParamId = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("theta1".parse::<ParamId>().is_err());
        assert!("phi0".parse::<ParamId>().is_err());
        let p = ParamId::new(DhParam::A, 2);
        assert_eq!(ParamId::from_index(p.index(7), 7), p);
    }

    #[test]
    fn param_delta_fixed_entries_zero() {
        let mask = ParamMask::joint_offsets(7);
        let d = ParamDelta::from_free(mask, &[0.1; 7]);
        for i in 7..28 {
            assert_eq!(d.values()[i], 0.0);
        }
    }

    #[test]
    fn jacobian_z_stack_d1_column() {
        let rows = vec![DhRow::revolute(0.0, 0.0, 0.0, 0.1), DhRow::revolute(0.0, 0.0, 0.0, 0.2)];
        let chain = DhChain::new(rows, Pose::identity(), Pose::identity()).unwrap();
        let mask = ParamMask::from_params(2, &[ParamId::new(DhParam::D, 0)]).unwrap();
        let j = IdentificationJacobian::compute(&chain, &[vec![0.0, 0.0], vec![0.3, -0.2]], &mask).unwrap();
        assert_eq!(j.matrix.shape(), (14, 1));
        for m in 0..2 {
            let col: Vec<f64> = (0..7).map(|k| j.matrix[(7 * m + k, 0)]).collect();
            let expected = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
            for k in 0..7 {
                assert!((col[k] - expected[k]).abs() < 1e-8, "{col:?}");
            }
        }
    }

    #[test]
    fn jacobian_shape_single_measurement() {
        let chain = DhChain::wam7();
        let j = IdentificationJacobian::compute(&chain, &[vec![0.1; 7]], &ParamMask::all(7)).unwrap();
        assert_eq!(j.matrix.shape(), (7, 28));
        assert!(!j.is_full_rank());
    }

    #[test]
    fn jacobian_rejects_bad_inputs() {
        let chain = DhChain::wam7();
        assert_eq!(
            IdentificationJacobian::compute(&chain, &[], &ParamMask::all(7)).unwrap_err(),
            GeomError::NoConfigurations
        );
        assert_eq!(
            IdentificationJacobian::compute(&chain, &[vec![0.0; 7]], &ParamMask::none(7)).unwrap_err(),
            GeomError::EmptyMask
        );
    }

    #[test]
    fn ik_already_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chain = DhChain::wam7();
        let th = random_theta(&mut rng, 7);
        let target = forward_kinematics(&chain, &th);
        let sol = solve_ik(&chain, &target, &th, &IkOptions::default()).unwrap();
        assert_eq!(sol, th);
    }

    #[test]
    fn ik_recovers_from_perturbed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chain = DhChain::wam7();
        let opts = IkOptions::default();
        for _ in 0..20 {
            let th = random_theta(&mut rng, 7);
            let target = forward_kinematics(&chain, &th);
            let seed: Vec<f64> = th.iter().map(|t| t + rng.random_range(-0.05..0.05)).collect();
            let sol = solve_ik(&chain, &target, &seed, &opts).unwrap();
            let got = forward_kinematics(&chain, &sol);
            assert!((got.position - target.position).norm() < opts.position_tolerance);
            assert!(geodesic_distance(&got.rotation, &target.rotation) < opts.orientation_tolerance);
        }
    }

    #[test]
    fn ik_unreachable_target_fails() {
        let chain = DhChain::wam7();
        let target = Pose::from_translation(10.0, 0.0, 0.0);
        let err = solve_ik(&chain, &target, &[0.1; 7], &IkOptions::default()).unwrap_err();
        assert!(matches!(err, GeomError::NoConvergence { .. }));
    }

    #[test]
    fn chain_json_round_trip() {
        let chain = DhChain::wam7();
        let s = serde_json::to_string(&chain).unwrap();
        assert!(s.contains("\"quat\""));
        let back: DhChain = serde_json::from_str(&s).unwrap();
        assert_eq!(back, chain);
        let bad = r#"{"rows": []}"#;
        assert!(serde_json::from_str::<DhChain>(bad).is_err());
    }
}
