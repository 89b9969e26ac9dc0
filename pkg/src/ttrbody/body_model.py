"""Simplified differentiable parametric body: pose/shape -> joints/mesh -> 2D.

A 17-joint kinematic tree with 96 skinned vertices stands in for a full
statistical body model. Pose is per-joint axis-angle (radians), shape is a
10-coefficient bone-offset basis, and the camera is weak-perspective
(scale, 2D translation). All maps are differentiable; `body_jacobians`
returns the dense analytic derivatives used by the adaptation losses.

Units: millimeters for 3D quantities, unnormalized plane units for 2D.
Every function here is pure; templates and parameters are treated as
immutable once constructed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    InvalidCameraError,
    InvalidParameterError,
    NumericError,
)

JOINT_COUNT = 17
VERTEX_COUNT = 96
THETA_DIM = 3 * JOINT_COUNT
BETA_DIM = 10

JOINT_NAMES = (
    "pelvis",
    "spine",
    "neck",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_clavicle",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_clavicle",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)

_PARENT = (0, 0, 1, 0, 3, 4, 0, 6, 7, 2, 9, 10, 11, 2, 13, 14, 15)

# Rest bone offsets (mm), +Y up. The hips are placed symmetrically about the
# pelvis so the pelvis is exactly the hip-ring midpoint (see joint_regressor).
_REST_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.0, 280.0, 0.0),
    (0.0, 260.0, 0.0),
    (95.0, 0.0, 0.0),
    (0.0, -420.0, 0.0),
    (0.0, -400.0, 0.0),
    (-95.0, 0.0, 0.0),
    (0.0, -420.0, 0.0),
    (0.0, -400.0, 0.0),
    (70.0, -15.0, 0.0),
    (115.0, 0.0, 0.0),
    (0.0, -280.0, 0.0),
    (0.0, -250.0, 0.0),
    (-70.0, -15.0, 0.0),
    (-115.0, 0.0, 0.0),
    (0.0, -280.0, 0.0),
    (0.0, -250.0, 0.0),
)

# max relative bone-length change at ||beta|| = 1
_SHAPE_EXTENT = 0.1

_L_HIP, _R_HIP = 3, 6

TEMPLATE_SCHEMA = "template.v1"


def _as_array(x, shape, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def _require_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite entries")


@dataclass
class BodyParams:
    """Axis-angle pose ``theta`` (51,) and shape coefficients ``beta`` (10,)."""

    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = _as_array(self.theta, (THETA_DIM,), "theta")
        self.beta = _as_array(self.beta, (BETA_DIM,), "beta")
        _require_finite(self.theta, "theta")
        _require_finite(self.beta, "beta")


@dataclass
class CamParams:
    """Weak-perspective camera: positive scale and 2D plane translation."""

    scale: float
    trans: np.ndarray

    def __post_init__(self):
        self.scale = float(self.scale)
        self.trans = _as_array(self.trans, (2,), "trans")
        if not np.isfinite(self.scale) or not np.all(np.isfinite(self.trans)):
            raise InvalidCameraError("camera parameters must be finite")
        if self.scale <= 0.0:
            raise InvalidCameraError(f"camera scale must be > 0, got {self.scale}")

    def as_vector(self):
        return np.concatenate(([self.scale], self.trans))


@dataclass
class Joints3D:
    """Camera-centered 3D joint positions, (17, 3) in mm."""

    points: np.ndarray

    def __post_init__(self):
        self.points = _as_array(self.points, (JOINT_COUNT, 3), "joints")
        _require_finite(self.points, "joints")


@dataclass
class Mesh:
    """Skinned vertex positions, (96, 3) in mm."""

    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = _as_array(self.vertices, (VERTEX_COUNT, 3), "vertices")
        _require_finite(self.vertices, "vertices")


@dataclass
class Keypoints2D:
    """Projected joints, (17, 2) plane units, with per-joint confidence."""

    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.points = _as_array(self.points, (JOINT_COUNT, 2), "points")
        self.confidence = _as_array(self.confidence, (JOINT_COUNT,), "confidence")
        _require_finite(self.points, "points")
        if np.any(self.confidence < 0.0) or np.any(self.confidence > 1.0):
            raise InvalidParameterError("confidence entries must lie in [0, 1]")


@dataclass
class BodyTemplate:
    """Kinematic tree, shape basis, vertex binding and joint regressor.

    ``parent`` is the joint-parent index array (root points at itself),
    ``rest_offsets`` the per-joint bone offsets at beta = 0, ``shape_basis``
    the (17, 3, 10) map from beta to offset deltas, ``vertex_bone`` /
    ``vertex_offsets`` the rigid binding of each mesh vertex to one joint
    frame, and ``joint_regressor`` a row-stochastic (17, 96) matrix whose
    product with the skinned mesh reproduces the joints for every pose.
    """

    parent: np.ndarray
    rest_offsets: np.ndarray
    shape_basis: np.ndarray
    vertex_bone: np.ndarray
    vertex_offsets: np.ndarray
    joint_regressor: np.ndarray
    seed: int = 0
    _order: tuple = field(init=False, repr=False)
    _descendants: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        if self.parent.shape != (JOINT_COUNT,):
            raise DimensionError(f"parent: expected ({JOINT_COUNT},), got {self.parent.shape}")
        self.rest_offsets = _as_array(self.rest_offsets, (JOINT_COUNT, 3), "rest_offsets")
        self.shape_basis = _as_array(
            self.shape_basis, (JOINT_COUNT, 3, BETA_DIM), "shape_basis"
        )
        self.vertex_bone = np.asarray(self.vertex_bone, dtype=np.int64)
        if self.vertex_bone.shape != (VERTEX_COUNT,):
            raise DimensionError("vertex_bone: expected (96,)")
        self.vertex_offsets = _as_array(
            self.vertex_offsets, (VERTEX_COUNT, 3), "vertex_offsets"
        )
        self.joint_regressor = _as_array(
            self.joint_regressor, (JOINT_COUNT, VERTEX_COUNT), "joint_regressor"
        )
        self._order = self._topological_order()
        self._descendants = self._descendant_lists()
        self._check_invariants()

    def _topological_order(self):
        if self.parent[0] not in (0, -1):
            raise ConfigurationError("parent[0] must be the root (self or -1)")
        children = [[] for _ in range(JOINT_COUNT)]
        for j in range(1, JOINT_COUNT):
            p = int(self.parent[j])
            if not 0 <= p < JOINT_COUNT or p == j:
                raise ConfigurationError(f"joint {j} has invalid parent {p}")
            children[p].append(j)
        order, stack = [], [0]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != JOINT_COUNT:
            raise ConfigurationError("joint tree is not connected and acyclic")
        return tuple(order)

    def _descendant_lists(self):
        desc = [[] for _ in range(JOINT_COUNT)]
        for j in reversed(self._order):
            if j == 0:
                continue
            p = int(self.parent[j])
            desc[p].append(j)
            desc[p].extend(desc[j])
        return tuple(tuple(sorted(d)) for d in desc)

    def _check_invariants(self):
        row_sums = self.joint_regressor.sum(axis=1)
        if np.max(np.abs(row_sums - 1.0)) > 1e-9:
            raise ConfigurationError("joint_regressor rows must sum to 1 within 1e-9")
        if np.any(self.joint_regressor < 0.0):
            raise ConfigurationError("joint_regressor must be nonnegative")
        if np.any(self.vertex_bone < 0) or np.any(self.vertex_bone >= JOINT_COUNT):
            raise ConfigurationError("vertex_bone indices out of range")
        rest = BodyParams(np.zeros(THETA_DIM), np.zeros(BETA_DIM))
        rest_joints = forward_kinematics(rest, self).points
        rest_mesh = skin_mesh(rest, self).vertices
        err = np.max(np.abs(self.joint_regressor @ rest_mesh - rest_joints))
        if err > 1e-6:
            raise ConfigurationError(
                f"joint_regressor does not reproduce rest joints (max err {err:.3g} mm)"
            )


@dataclass
class BodyJacobians:
    """Dense derivative bundle for one (params, cam) evaluation point."""

    djoints_dtheta: np.ndarray  # (17, 3, 51)
    djoints_dbeta: np.ndarray  # (17, 3, 10)
    dkeypoints_dcam: np.ndarray  # (17, 2, 3); cam order (scale, tx, ty)


def _rot_coeffs(t):
    """Rodrigues coefficients a, b and their derivative ratios a'/t, b'/t."""
    if t < 1e-4:
        t2 = t * t
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c1 = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0
        c2 = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0
        return a, b, c1, c2
    s, c = np.sin(t), np.cos(t)
    half = np.sin(0.5 * t) / t
    a = s / t
    b = 2.0 * half * half
    c1 = (t * c - s) / t**3
    c2 = (t * s - 2.0 * (1.0 - c)) / t**4
    return a, b, c1, c2


def _skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


_E_SKEW = tuple(_skew(e) for e in np.eye(3))


def rodrigues(omega):
    """Axis-angle (3,) -> rotation matrix (3, 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    t = float(np.linalg.norm(omega))
    a, b, _, _ = _rot_coeffs(t)
    k = _skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_with_jacobian(omega):
    """Rotation matrix plus its derivative tensor dR (3, 3, 3), dR[m] = dR/dw_m."""
    omega = np.asarray(omega, dtype=np.float64)
    t = float(np.linalg.norm(omega))
    a, b, c1, c2 = _rot_coeffs(t)
    k = _skew(omega)
    k2 = k @ k
    r = np.eye(3) + a * k + b * k2
    dr = np.empty((3, 3, 3))
    for m in range(3):
        em = _E_SKEW[m]
        dr[m] = c1 * omega[m] * k + a * em + c2 * omega[m] * k2 + b * (em @ k + k @ em)
    return r, dr


def _fk_full(params, template, with_rot_jac=False):
    """Positions (17,3), global rotations (17,3,3), optional local dR list."""
    offsets = template.rest_offsets + template.shape_basis @ params.beta
    theta = params.theta.reshape(JOINT_COUNT, 3)
    x = np.empty((JOINT_COUNT, 3))
    rg = np.empty((JOINT_COUNT, 3, 3))
    dr_loc = [None] * JOINT_COUNT if with_rot_jac else None
    for j in template._order:
        if with_rot_jac:
            r, dr_loc[j] = rodrigues_with_jacobian(theta[j])
        else:
            r = rodrigues(theta[j])
        if j == 0:
            x[0] = offsets[0]
            rg[0] = r
        else:
            p = int(template.parent[j])
            x[j] = x[p] + rg[p] @ offsets[j]
            rg[j] = rg[p] @ r
    return x, rg, dr_loc


def forward_kinematics(params: BodyParams, template: BodyTemplate) -> Joints3D:
    """Pose/shape -> 3D joints via accumulated rotations along the tree."""
    x, _, _ = _fk_full(params, template)
    return Joints3D(x)


def skin_mesh(params: BodyParams, template: BodyTemplate) -> Mesh:
    """Rigidly attach each vertex to its bound joint frame."""
    x, rg, _ = _fk_full(params, template)
    bone = template.vertex_bone
    verts = x[bone] + np.einsum("vij,vj->vi", rg[bone], template.vertex_offsets)
    return Mesh(verts)


def project_weak_perspective(joints: Joints3D, cam: CamParams) -> Keypoints2D:
    """2D point = scale * (X, Y) + trans; depth is dropped."""
    pts = cam.scale * joints.points[:, :2] + cam.trans
    return Keypoints2D(pts, np.ones(JOINT_COUNT))


def body_jacobians(
    params: BodyParams, cam: CamParams, template: BodyTemplate
) -> BodyJacobians:
    """Analytic derivatives of joints w.r.t. (theta, beta) and of the
    projected keypoints w.r.t. the camera, all at the given point."""
    x, rg, dr_loc = _fk_full(params, template, with_rot_jac=True)

    dj_dtheta = np.zeros((JOINT_COUNT, 3, THETA_DIM))
    for k in range(JOINT_COUNT):
        desc = template._descendants[k]
        if not desc:
            continue
        rp = np.eye(3) if k == 0 else rg[int(template.parent[k])]
        rel = (x[list(desc)] - x[k]) @ rg[k]  # rows: Rg[k]^T (x_i - x_k)
        for m in range(3):
            mm = rp @ dr_loc[k][m]
            dj_dtheta[list(desc), :, 3 * k + m] = rel @ mm.T

    dj_dbeta = np.zeros((JOINT_COUNT, 3, BETA_DIM))
    acc = np.zeros((JOINT_COUNT, 3, BETA_DIM))
    acc[0] = template.shape_basis[0]
    for j in template._order:
        if j == 0:
            dj_dbeta[0] = acc[0]
            continue
        p = int(template.parent[j])
        acc[j] = acc[p] + rg[p] @ template.shape_basis[j]
        dj_dbeta[j] = acc[j]

    dkp_dcam = np.zeros((JOINT_COUNT, 2, 3))
    dkp_dcam[:, :, 0] = x[:, :2]
    dkp_dcam[:, 0, 1] = 1.0
    dkp_dcam[:, 1, 2] = 1.0
    _ = cam  # projection is affine in cam; jacobian needs joints only

    for name, arr in (
        ("djoints_dtheta", dj_dtheta),
        ("djoints_dbeta", dj_dbeta),
        ("dkeypoints_dcam", dkp_dcam),
    ):
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            raise NumericError(f"{name} non-finite at index {tuple(bad[0])}")
    return BodyJacobians(dj_dtheta, dj_dbeta, dkp_dcam)


def make_template(seed: int) -> BodyTemplate:
    """Deterministic template from a 64-bit seed.

    The skeleton layout is canonical; the seed drives only the shape basis.
    The right-hip basis block mirrors the left so the pelvis stays the exact
    midpoint of the two hip rings for every shape, which is what lets the
    joint regressor recover the root exactly.
    """
    rng = np.random.default_rng([int(seed), 1])
    rest = np.array(_REST_OFFSETS)
    basis = rng.normal(size=(JOINT_COUNT, 3, BETA_DIM))
    basis[0] = 0.0
    basis[_R_HIP] = -basis[_L_HIP]
    for j in range(1, JOINT_COUNT):
        smax = np.linalg.svd(basis[j], compute_uv=False)[0]
        basis[j] *= _SHAPE_EXTENT * np.linalg.norm(rest[j]) / smax

    vertex_bone = np.repeat(np.arange(1, JOINT_COUNT), 6)
    vertex_offsets = np.empty((VERTEX_COUNT, 3))
    for i, j in enumerate(range(1, JOINT_COUNT)):
        d = rest[j] / np.linalg.norm(rest[j])
        u = np.cross(d, [0.0, 0.0, 1.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(d, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(d, u)
        radius = min(max(0.18 * np.linalg.norm(rest[j]), 15.0), 60.0)
        ang = 2.0 * np.pi * np.arange(6) / 6.0
        ring = radius * (np.outer(np.cos(ang), u) + np.outer(np.sin(ang), v))
        ring -= ring.mean(axis=0)  # centroid exactly on the joint
        vertex_offsets[6 * i : 6 * i + 6] = ring

    regressor = np.zeros((JOINT_COUNT, VERTEX_COUNT))
    for i, j in enumerate(range(1, JOINT_COUNT)):
        regressor[j, 6 * i : 6 * i + 6] = 1.0 / 6.0
    for hip in (_L_HIP, _R_HIP):
        ring_start = 6 * (hip - 1)
        regressor[0, ring_start : ring_start + 6] = 1.0 / 12.0

    return BodyTemplate(
        parent=np.array(_PARENT),
        rest_offsets=rest,
        shape_basis=basis,
        vertex_bone=vertex_bone,
        vertex_offsets=vertex_offsets,
        joint_regressor=regressor,
        seed=int(seed),
    )


def template_to_json(template: BodyTemplate) -> str:
    """Canonical template.v1 document; regressor stored as (row, col, value)."""
    triplets = [
        [int(r), int(c), float(template.joint_regressor[r, c])]
        for r, c in np.argwhere(template.joint_regressor != 0.0)
    ]
    doc = {
        "schema": TEMPLATE_SCHEMA,
        "seed": int(template.seed),
        "parent": template.parent.tolist(),
        "rest_offsets": template.rest_offsets.ravel().tolist(),
        "shape_basis": template.shape_basis.ravel().tolist(),
        "vertex_bone": template.vertex_bone.tolist(),
        "vertex_offsets": template.vertex_offsets.ravel().tolist(),
        "joint_regressor": triplets,
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def template_from_json(text: str) -> BodyTemplate:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"template is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != TEMPLATE_SCHEMA:
        raise FormatError(f"expected schema {TEMPLATE_SCHEMA!r}")
    try:
        regressor = np.zeros((JOINT_COUNT, VERTEX_COUNT))
        for r, c, v in doc["joint_regressor"]:
            regressor[int(r), int(c)] = float(v)
        return BodyTemplate(
            parent=np.array(doc["parent"]),
            rest_offsets=np.array(doc["rest_offsets"]).reshape(JOINT_COUNT, 3),
            shape_basis=np.array(doc["shape_basis"]).reshape(JOINT_COUNT, 3, BETA_DIM),
            vertex_bone=np.array(doc["vertex_bone"]),
            vertex_offsets=np.array(doc["vertex_offsets"]).reshape(VERTEX_COUNT, 3),
            joint_regressor=regressor,
            seed=int(doc["seed"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed template field: {exc}") from exc


def save_template(template: BodyTemplate, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(template_to_json(template) + "\n")


def load_template(path) -> BodyTemplate:
    with open(path, "r", encoding="utf-8") as fh:
        return template_from_json(fh.read())


def template_hash(template: BodyTemplate) -> str:
    return hashlib.sha256(template_to_json(template).encode()).hexdigest()[:16]
