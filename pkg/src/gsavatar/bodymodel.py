"""Parametric articulated body model.

Blendshape deformation, joint regression, forward kinematics and linear
blend skinning over a generic model asset, plus the analytic backward passes
needed by the avatar and alignment optimizers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARTS = ("body", "hand", "face")
PART_INDEX = {name: i for i, name in enumerate(PARTS)}

SMALL_ANGLE = 1e-8
WEIGHT_TOL = 1e-6


class ModelFormatError(ValueError):
    """Raised when a model file violates the asset invariants."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True, eq=False)
class BodyModelAsset:
    template_vertices: np.ndarray  # N x 3
    faces: np.ndarray  # F x 3
    skin_weights: np.ndarray  # N x K
    joint_regressor: np.ndarray  # K x N
    parents: np.ndarray  # K, root = -1
    shape_basis: np.ndarray  # N x 3 x |beta|
    expression_basis: np.ndarray  # N x 3 x |psi|
    pose_basis: np.ndarray  # N x 3 x 9(K-1)
    part_labels: np.ndarray  # N ints indexing PARTS
    units: str = "m"
    joint_names: tuple[str, ...] = ()
    joint_parts: np.ndarray | None = None  # K ints indexing PARTS
    landmark_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    landmark_names: tuple[str, ...] = ()

    def __post_init__(self):
        validate_asset(self)

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def num_betas(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def num_expressions(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def topo_order(self) -> list[int]:
        return _topological_order(self.parents)

    def rest_joints(self, beta=None, psi=None) -> np.ndarray:
        return regress_joints(self, shaped_template(self, beta, psi))


def _topological_order(parents: np.ndarray) -> list[int]:
    k = len(parents)
    children = [[] for _ in range(k)]
    roots = []
    for j, p in enumerate(parents):
        if p < 0:
            roots.append(j)
        elif p >= k:
            raise ModelFormatError("parents", f"joint {j} has out-of-range parent {p}")
        else:
            children[p].append(j)
    if len(roots) != 1:
        raise ModelFormatError("parents", f"expected exactly one root, found {len(roots)}")
    order, stack = [], [roots[0]]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != k:
        raise ModelFormatError("parents", "parent graph contains a cycle or disconnected joints")
    return order


def validate_asset(asset: BodyModelAsset) -> None:
    v = asset.template_vertices
    if v.ndim != 2 or v.shape[1] != 3:
        raise ModelFormatError("template_vertices", f"expected N x 3, got {v.shape}")
    n = v.shape[0]
    k = asset.parents.shape[0]
    _topological_order(asset.parents)
    w = asset.skin_weights
    if w.shape != (n, k):
        raise ModelFormatError("skin_weights", f"expected {(n, k)}, got {w.shape}")
    if np.any(w < 0):
        raise ModelFormatError("skin_weights", "negative weights")
    if np.max(np.abs(w.sum(axis=1) - 1.0)) > WEIGHT_TOL:
        raise ModelFormatError("skin_weights", "rows must sum to 1")
    if asset.joint_regressor.shape != (k, n):
        raise ModelFormatError("joint_regressor", f"expected {(k, n)}, got {asset.joint_regressor.shape}")
    for key in ("shape_basis", "expression_basis"):
        b = getattr(asset, key)
        if b.ndim != 3 or b.shape[:2] != (n, 3):
            raise ModelFormatError(key, f"expected N x 3 x D, got {b.shape}")
    if asset.pose_basis.shape != (n, 3, 9 * (k - 1)):
        raise ModelFormatError("pose_basis", f"expected {(n, 3, 9 * (k - 1))}, got {asset.pose_basis.shape}")
    if asset.part_labels.shape != (n,) or np.any((asset.part_labels < 0) | (asset.part_labels >= len(PARTS))):
        raise ModelFormatError("part_labels", "expected N labels in body/hand/face")
    if asset.faces.size and (asset.faces.min() < 0 or asset.faces.max() >= n):
        raise ModelFormatError("faces", "vertex index out of range")
    if asset.landmark_vertices.size and (asset.landmark_vertices.min() < 0 or asset.landmark_vertices.max() >= n):
        raise ModelFormatError("landmarks", "vertex index out of range")
    for key in ("template_vertices", "skin_weights", "joint_regressor", "shape_basis", "expression_basis", "pose_basis"):
        if not np.all(np.isfinite(getattr(asset, key))):
            raise ModelFormatError(key, "non-finite values")


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1)
    k = skew(aa)
    k2 = k @ k
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2


def rodrigues_jacobian(aa: np.ndarray) -> np.ndarray:
    """dR/dv_i stacked as (..., 3, 3, 3) with the component index first."""
    aa = np.asarray(aa, dtype=np.float64)
    lead = aa.shape[:-1]
    flat = aa.reshape(-1, 3)
    out = np.empty((flat.shape[0], 3, 3, 3))
    eye = np.eye(3)
    e_skew = skew(eye)
    for n, v in enumerate(flat):
        theta2 = v @ v
        if np.sqrt(theta2) < SMALL_ANGLE:
            vx = skew(v)
            for i in range(3):
                out[n, i] = e_skew[i] + 0.5 * (e_skew[i] @ vx + vx @ e_skew[i])
            continue
        r = rodrigues(v)
        vx = skew(v)
        for i in range(3):
            rhs = np.cross(v, (eye - r) @ eye[i])
            out[n, i] = (v[i] * vx + skew(rhs)) @ r / theta2
    return out.reshape(lead + (3, 3, 3))


def rotation_grad_to_axis_angle(aa: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    jac = rodrigues_jacobian(aa)
    return np.einsum("...iab,...ab->...i", jac, d_rot)


def canonicalize_axis_angle(aa: np.ndarray) -> np.ndarray:
    """Map each axis-angle vector to the equivalent one with magnitude <= pi."""
    aa = np.array(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(angle + np.pi, 2 * np.pi) - np.pi
    scale = np.divide(wrapped, angle, out=np.ones_like(angle), where=angle > 0)
    return aa * scale


# ---------------------------------------------------------------------------
# model evaluation


def _check_len(name: str, arr: np.ndarray, expected: int) -> None:
    if arr.shape != (expected,):
        raise ValueError(f"{name} has shape {arr.shape}, expected ({expected},)")


def pose_feature(theta: np.ndarray) -> np.ndarray:
    """Flattened (R_k - I) for every non-root joint."""
    rots = rodrigues(np.asarray(theta, dtype=np.float64).reshape(-1, 3))
    return (rots[1:] - np.eye(3)).reshape(-1)


def shaped_template(asset: BodyModelAsset, beta=None, psi=None, theta=None) -> np.ndarray:
    """Template plus shape, expression and pose blendshape offsets."""
    verts = asset.template_vertices.copy()
    if beta is not None:
        beta = np.asarray(beta, dtype=np.float64)
        _check_len("beta", beta, asset.num_betas)
        verts += asset.shape_basis @ beta
    if psi is not None:
        psi = np.asarray(psi, dtype=np.float64)
        _check_len("psi", psi, asset.num_expressions)
        verts += asset.expression_basis @ psi
    if theta is not None:
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        _check_len("theta", theta, 3 * asset.num_joints)
        verts += asset.pose_basis @ pose_feature(theta)
    return verts


def regress_joints(asset: BodyModelAsset, shaped_vertices: np.ndarray) -> np.ndarray:
    if shaped_vertices.shape != (asset.num_vertices, 3):
        raise ValueError(f"expected {(asset.num_vertices, 3)} vertices, got {shaped_vertices.shape}")
    return asset.joint_regressor @ shaped_vertices


@dataclass
class Kinematics:
    """World transforms of one forward-kinematics evaluation."""

    rotations: np.ndarray  # K x 3 x 3 (G_k)
    translations: np.ndarray  # K x 3 (b_k)
    posed_joints: np.ndarray  # K x 3
    local_rotations: np.ndarray
    world_rotations: np.ndarray
    joints: np.ndarray
    theta: np.ndarray


def forward_kinematics(asset: BodyModelAsset, joints: np.ndarray, theta: np.ndarray,
                       translation=None) -> Kinematics:
    """Rest-relative joint transforms: x_posed = G_k x_rest + b_k."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    k = asset.num_joints
    if theta.shape[0] != k:
        raise ValueError(f"theta has {theta.shape[0]} joints, model has {k}")
    trans = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    local = rodrigues(theta)
    world_r = np.empty((k, 3, 3))
    world_t = np.empty((k, 3))
    for j in asset.topo_order:
        p = asset.parents[j]
        if p < 0:
            world_r[j] = local[j]
            world_t[j] = joints[j]
        else:
            world_r[j] = world_r[p] @ local[j]
            world_t[j] = world_r[p] @ (joints[j] - joints[p]) + world_t[p]
    b = world_t - np.einsum("kij,kj->ki", world_r, joints) + trans
    return Kinematics(world_r.copy(), b, world_t + trans, local, world_r, np.asarray(joints, dtype=np.float64), theta)


def forward_kinematics_backward(asset: BodyModelAsset, kin: Kinematics, d_rot=None, d_trans=None,
                                d_posed_joints=None):
    """Reverse pass of forward_kinematics.

    Returns (d_theta K x 3, d_joints K x 3, d_translation 3).
    """
    k = asset.num_joints
    d_rot = np.zeros((k, 3, 3)) if d_rot is None else np.asarray(d_rot, dtype=np.float64)
    d_trans = np.zeros((k, 3)) if d_trans is None else np.asarray(d_trans, dtype=np.float64)
    joints = kin.joints
    d_world_t = d_trans.copy()
    if d_posed_joints is not None:
        d_world_t += d_posed_joints
    d_translation = d_world_t.sum(axis=0)
    # b = t - A J + T
    d_world_r = d_rot - np.einsum("ki,kj->kij", d_trans, joints)
    d_joints = -np.einsum("kji,kj->ki", kin.world_rotations, d_trans)
    d_local = np.zeros((k, 3, 3))
    for j in reversed(asset.topo_order):
        p = asset.parents[j]
        if p < 0:
            d_local[j] = d_world_r[j]
            d_joints[j] += d_world_t[j]
            continue
        a_p = kin.world_rotations[p]
        d_world_r[p] += d_world_r[j] @ kin.local_rotations[j].T
        d_local[j] = a_p.T @ d_world_r[j]
        off = joints[j] - joints[p]
        d_world_r[p] += np.outer(d_world_t[j], off)
        g = a_p.T @ d_world_t[j]
        d_joints[j] += g
        d_joints[p] -= g
        d_world_t[p] += d_world_t[j]
    d_theta = rotation_grad_to_axis_angle(kin.theta, d_local)
    return d_theta, d_joints, d_translation


def lbs_apply(asset: BodyModelAsset, shaped_vertices: np.ndarray, rotations: np.ndarray,
              translations: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """v -> sum_k w_vk (G_k v + b_k)."""
    w = asset.skin_weights if weights is None else weights
    g = np.einsum("nk,kij->nij", w, rotations)
    b = w @ translations
    return np.einsum("nij,nj->ni", g, shaped_vertices) + b


def blended_transforms(weights: np.ndarray, rotations: np.ndarray, translations: np.ndarray):
    return np.einsum("nk,kij->nij", weights, rotations), weights @ translations


@dataclass
class PosedBody:
    vertices: np.ndarray
    joints: np.ndarray  # posed joint positions
    kinematics: Kinematics
    shaped: np.ndarray  # with pose blendshapes
    shaped_rest: np.ndarray  # without pose blendshapes


def pose_body(asset: BodyModelAsset, theta, beta=None, psi=None, translation=None) -> PosedBody:
    """Full model evaluation M(beta, theta, psi) plus posed joints."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    rest = shaped_template(asset, beta, psi)
    joints = regress_joints(asset, rest)
    kin = forward_kinematics(asset, joints, theta, translation)
    shaped = rest + asset.pose_basis @ pose_feature(theta)
    verts = lbs_apply(asset, shaped, kin.rotations, kin.translations)
    return PosedBody(verts, kin.posed_joints, kin, shaped, rest)


def keypoints(asset: BodyModelAsset, posed: PosedBody) -> np.ndarray:
    """Model keypoints: posed joints followed by posed landmark vertices."""
    return np.concatenate([posed.joints, posed.vertices[asset.landmark_vertices]], axis=0)


def keypoint_parts(asset: BodyModelAsset) -> np.ndarray:
    jp = asset.joint_parts if asset.joint_parts is not None else np.zeros(asset.num_joints, dtype=np.int64)
    return np.concatenate([jp, asset.part_labels[asset.landmark_vertices]]).astype(np.int64)


def keypoints_backward(asset: BodyModelAsset, posed: PosedBody, theta, d_keypoints: np.ndarray):
    """Gradient of a keypoint loss w.r.t. (theta, beta, psi, translation)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    k = asset.num_joints
    kin = posed.kinematics
    d_kp = np.asarray(d_keypoints, dtype=np.float64)
    d_joints_posed = d_kp[:k]
    d_lm = d_kp[k:]
    lm = asset.landmark_vertices
    w = asset.skin_weights[lm]  # L x K
    v = posed.shaped[lm]
    # posed_lm = sum_k w (G_k v + b_k)
    d_rot = np.einsum("lk,li,lj->kij", w, d_lm, v)
    d_trans = w.T @ d_lm
    g = np.einsum("lk,kij->lij", w, kin.rotations)
    d_shaped_lm = np.einsum("lij,li->lj", g, d_lm)
    d_theta, d_joints, d_translation = forward_kinematics_backward(asset, kin, d_rot, d_trans, d_joints_posed)
    # pose blendshapes on landmarks
    d_feat = np.einsum("lcp,lc->p", asset.pose_basis[lm], d_shaped_lm).reshape(k - 1, 3, 3)
    d_theta[1:] += rotation_grad_to_axis_angle(theta[1:], d_feat)
    # rest vertices feed both joints and landmark positions
    d_rest = asset.joint_regressor.T @ d_joints
    np.add.at(d_rest, lm, d_shaped_lm)
    d_beta = np.einsum("ncb,nc->b", asset.shape_basis, d_rest)
    d_psi = np.einsum("ncb,nc->b", asset.expression_basis, d_rest)
    return d_theta.reshape(-1), d_beta, d_psi, d_translation


# ---------------------------------------------------------------------------
# file format

_ARRAY_KEYS = ("template_vertices", "faces", "skin_weights", "joint_regressor", "parents",
               "shape_basis", "expression_basis", "pose_basis")


def asset_to_dict(asset: BodyModelAsset) -> dict:
    out = {key: getattr(asset, key).tolist() for key in _ARRAY_KEYS}
    out["part_labels"] = [PARTS[i] for i in asset.part_labels]
    out["units"] = asset.units
    out["joint_names"] = list(asset.joint_names)
    if asset.joint_parts is not None:
        out["joint_parts"] = [PARTS[i] for i in asset.joint_parts]
    out["landmarks"] = {name: int(v) for name, v in zip(asset.landmark_names, asset.landmark_vertices)}
    return out


def asset_from_dict(data: dict) -> BodyModelAsset:
    missing = [k for k in _ARRAY_KEYS + ("part_labels", "units") if k not in data]
    if missing:
        raise ModelFormatError(missing[0], "missing key")
    arrays = {}
    for key in _ARRAY_KEYS:
        dtype = np.int64 if key in ("faces", "parents") else np.float64
        try:
            arrays[key] = np.asarray(data[key], dtype=dtype)
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(key, f"not a rectangular numeric array ({exc})") from None
    n = arrays["template_vertices"].shape[0]
    if arrays["faces"].size == 0:
        arrays["faces"] = arrays["faces"].reshape(0, 3)
    for key in ("shape_basis", "expression_basis"):
        if arrays[key].size == 0:
            arrays[key] = arrays[key].reshape(n, 3, 0)
    try:
        labels = np.array([PART_INDEX[p] for p in data["part_labels"]], dtype=np.int64)
    except KeyError as exc:
        raise ModelFormatError("part_labels", f"unknown part {exc}") from None
    joint_parts = None
    if "joint_parts" in data:
        try:
            joint_parts = np.array([PART_INDEX[p] for p in data["joint_parts"]], dtype=np.int64)
        except KeyError as exc:
            raise ModelFormatError("joint_parts", f"unknown part {exc}") from None
    landmarks = data.get("landmarks", {})
    return BodyModelAsset(
        part_labels=labels,
        units=str(data["units"]),
        joint_names=tuple(data.get("joint_names", ())),
        joint_parts=joint_parts,
        landmark_vertices=np.array(list(landmarks.values()), dtype=np.int64),
        landmark_names=tuple(landmarks.keys()),
        **arrays,
    )


def save_model(asset: BodyModelAsset, path) -> None:
    Path(path).write_text(json.dumps(asset_to_dict(asset)), encoding="utf-8")


def load_model(path) -> BodyModelAsset:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return asset_from_dict(data)
