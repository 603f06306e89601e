"""Canonical Gaussian avatar and its articulation into frame space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bodymodel as bm
from .nets import (Mlp, PosEncoding, make_lbs_net, make_pose_net, mlp_backward, mlp_forward, pos_encode,
                   pos_encode_backward)

EPSILON = 1e-8
INIT_OPACITY = 0.1
MIN_NEIGHBOR_DISTANCE = 1e-4

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def num_sh_bases(degree: int) -> int:
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# Gaussian parameters


@dataclass
class GaussianSet:
    """Structure-of-arrays storage for M canonical Gaussians."""

    centers: np.ndarray  # M x 3
    rotations: np.ndarray  # M x 4 unit quaternions (w, x, y, z)
    log_scales: np.ndarray  # M x 3
    opacity_logits: np.ndarray  # M
    sh: np.ndarray  # M x B x 3
    parts: np.ndarray  # M ints into bodymodel.PARTS

    FIELDS = ("centers", "rotations", "log_scales", "opacity_logits", "sh", "parts")
    PARAMS = ("centers", "rotations", "log_scales", "opacity_logits", "sh")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f)[idx].copy() for f in self.FIELDS))

    def copy(self) -> "GaussianSet":
        return self.subset(slice(None))

    @staticmethod
    def concat(sets: list["GaussianSet"]) -> "GaussianSet":
        return GaussianSet(*(np.concatenate([getattr(s, f) for s in sets], axis=0) for f in GaussianSet.FIELDS))

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = d_rot
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0]
              + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
              + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
              - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def canonical_covariance(rotations: np.ndarray, log_scales: np.ndarray):
    """Sigma = R S S^T R^T; also returns (R, M = R S) for the backward pass."""
    r = quat_to_rotmat(rotations)
    m = r * np.exp(log_scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2), r, m


def canonical_covariance_backward(rotations, log_scales, r, m, d_cov):
    d_m = (d_cov + np.swapaxes(d_cov, -1, -2)) @ m
    scales = np.exp(log_scales)
    d_r = d_m * scales[..., None, :]
    d_log_scales = np.sum(d_m * r, axis=-2) * scales
    return quat_to_rotmat_backward(rotations, d_r), d_log_scales


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int):
    """Real SH basis values (M x B) and their derivatives w.r.t. direction (M x B x 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    m = dirs.shape[0]
    nb = num_sh_bases(degree)
    val = np.zeros((m, nb))
    jac = np.zeros((m, nb, 3))
    val[:, 0] = SH_C0
    if degree > 0:
        val[:, 1], val[:, 2], val[:, 3] = -SH_C1 * y, SH_C1 * z, -SH_C1 * x
        jac[:, 1, 1], jac[:, 2, 2], jac[:, 3, 0] = -SH_C1, SH_C1, -SH_C1
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        val[:, 4] = c[0] * x * y
        val[:, 5] = c[1] * y * z
        val[:, 6] = c[2] * (2 * zz - xx - yy)
        val[:, 7] = c[3] * x * z
        val[:, 8] = c[4] * (xx - yy)
        jac[:, 4] = c[0] * np.stack([y, x, 0 * x], 1)
        jac[:, 5] = c[1] * np.stack([0 * x, z, y], 1)
        jac[:, 6] = c[2] * np.stack([-2 * x, -2 * y, 4 * z], 1)
        jac[:, 7] = c[3] * np.stack([z, 0 * x, x], 1)
        jac[:, 8] = c[4] * np.stack([2 * x, -2 * y, 0 * x], 1)
    if degree > 2:
        c = SH_C3
        val[:, 9] = c[0] * y * (3 * xx - yy)
        val[:, 10] = c[1] * x * y * z
        val[:, 11] = c[2] * y * (4 * zz - xx - yy)
        val[:, 12] = c[3] * z * (2 * zz - 3 * xx - 3 * yy)
        val[:, 13] = c[4] * x * (4 * zz - xx - yy)
        val[:, 14] = c[5] * z * (xx - yy)
        val[:, 15] = c[6] * x * (xx - 3 * yy)
        jac[:, 9] = c[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, 0 * x], 1)
        jac[:, 10] = c[1] * np.stack([y * z, x * z, x * y], 1)
        jac[:, 11] = c[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], 1)
        jac[:, 12] = c[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], 1)
        jac[:, 13] = c[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], 1)
        jac[:, 14] = c[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], 1)
        jac[:, 15] = c[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, 0 * x], 1)
    return val, jac


@dataclass
class ColorCache:
    basis: np.ndarray
    basis_jac: np.ndarray
    raw: np.ndarray
    offsets: np.ndarray
    dist: np.ndarray
    dirs: np.ndarray


def sh_to_color(sh: np.ndarray, positions: np.ndarray, camera_center: np.ndarray):
    """View-dependent colour max(SH(dir) + 0.5, 0) evaluated at the camera ray direction."""
    degree = int(round(np.sqrt(sh.shape[1]))) - 1
    offsets = positions - camera_center
    dist = np.linalg.norm(offsets, axis=1, keepdims=True)
    dirs = offsets / np.maximum(dist, 1e-12)
    basis, jac = sh_basis(dirs, degree)
    raw = np.einsum("mb,mbc->mc", basis, sh) + 0.5
    return np.maximum(raw, 0.0), ColorCache(basis, jac, raw, offsets, dist, dirs)


def sh_to_color_backward(sh: np.ndarray, cache: ColorCache, d_color: np.ndarray):
    """Returns (d_sh, d_positions)."""
    g = d_color * (cache.raw > 0)
    d_sh = np.einsum("mb,mc->mbc", cache.basis, g)
    if sh.shape[1] == 1:
        return d_sh, np.zeros_like(cache.offsets)
    d_basis = np.einsum("mbc,mc->mb", sh, g)
    d_dirs = np.einsum("mb,mbk->mk", d_basis, cache.basis_jac)
    d_pos = (d_dirs - cache.dirs * np.sum(cache.dirs * d_dirs, axis=1, keepdims=True)) / cache.dist
    return d_sh, d_pos


# ---------------------------------------------------------------------------
# avatar


@dataclass
class FramePose:
    theta: np.ndarray  # 3K axis-angle
    beta: np.ndarray
    psi: np.ndarray
    translation: np.ndarray

    @classmethod
    def rest(cls, asset: bm.BodyModelAsset) -> "FramePose":
        return cls(np.zeros(3 * asset.num_joints), np.zeros(asset.num_betas), np.zeros(asset.num_expressions),
                   np.zeros(3))

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist(), "psi": self.psi.tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "FramePose":
        return cls(*(np.asarray(data[k], dtype=np.float64).reshape(-1) for k in ("theta", "beta", "psi", "translation")))


@dataclass
class GaussianAvatar:
    gaussians: GaussianSet
    lbs_net: Mlp
    pose_net: Mlp
    base_weights: np.ndarray  # M x K nearest-vertex skinning weights
    beta: np.ndarray  # identity shape defining the canonical space
    encoding: PosEncoding = field(default_factory=PosEncoding)
    epsilon: float = EPSILON

    def refresh_base_weights(self, asset: bm.BodyModelAsset) -> None:
        verts = bm.shaped_template(asset, self.beta)
        idx = nearest_vertices(self.gaussians.centers, verts)
        self.base_weights = asset.skin_weights[idx].copy()

    def copy(self) -> "GaussianAvatar":
        return GaussianAvatar(self.gaussians.copy(), self.lbs_net.copy(), self.pose_net.copy(),
                              self.base_weights.copy(), self.beta.copy(), self.encoding, self.epsilon)


def nearest_vertices(points: np.ndarray, verts: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Brute-force nearest vertex index per point."""
    out = np.empty(points.shape[0], dtype=np.int64)
    vv = np.sum(verts * verts, axis=1)
    for s in range(0, points.shape[0], chunk):
        p = points[s:s + chunk]
        d2 = np.sum(p * p, axis=1)[:, None] - 2.0 * p @ verts.T + vv[None]
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out


def nearest_distances(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    idx = nearest_vertices(points, verts)
    return np.linalg.norm(points - verts[idx], axis=1)


def init_from_model(asset: bm.BodyModelAsset, sh_degree: int = 3, beta=None, seed: int = 0,
                    encoding: PosEncoding | None = None) -> GaussianAvatar:
    """One Gaussian per template vertex with zero-initialised offset networks."""
    beta = np.zeros(asset.num_betas) if beta is None else np.asarray(beta, dtype=np.float64)
    verts = bm.shaped_template(asset, beta)
    n = verts.shape[0]
    d = np.linalg.norm(verts[:, None, :] - verts[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    k = min(3, n - 1)
    near = np.sort(d, axis=1)[:, :k].mean(axis=1) if k > 0 else np.ones(n)
    near = np.maximum(near, MIN_NEIGHBOR_DISTANCE)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    gs = GaussianSet(
        centers=verts.copy(),
        rotations=rotations,
        log_scales=np.repeat(np.log(near)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(INIT_OPACITY))),
        sh=np.zeros((n, num_sh_bases(sh_degree), 3)),
        parts=asset.part_labels.copy(),
    )
    rng = np.random.default_rng(seed)
    enc = encoding or PosEncoding()
    avatar = GaussianAvatar(gs, make_lbs_net(asset.num_joints, enc, rng), make_pose_net(3 * asset.num_joints, rng),
                            asset.skin_weights.copy(), beta, enc)
    return avatar


def blended_weights(avatar: GaussianAvatar, return_cache: bool = False):
    """softmax_k(log(w_k^base + eps) + f_w(gamma(p^c))[k])."""
    feats = pos_encode(avatar.gaussians.centers, avatar.encoding)
    offsets, net_cache = mlp_forward(avatar.lbs_net, feats)
    logits = np.log(avatar.base_weights + avatar.epsilon) + offsets
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    w = e / e.sum(axis=1, keepdims=True)
    if return_cache:
        return w, net_cache
    return w


def refine_pose(avatar: GaussianAvatar, theta_smplx: np.ndarray, return_cache: bool = False):
    """theta = theta_smplx * exp(f_theta(theta_smplx)) elementwise."""
    theta_smplx = np.asarray(theta_smplx, dtype=np.float64).reshape(-1)
    out, cache = mlp_forward(avatar.pose_net, theta_smplx)
    scale = np.exp(out)
    theta = theta_smplx * scale
    if return_cache:
        return theta, (cache, scale)
    return theta


@dataclass
class ArticulatedGaussians:
    means: np.ndarray  # M x 3 frame-space centres
    covs: np.ndarray  # M x 3 x 3 frame-space covariances
    weights: np.ndarray
    blend_rot: np.ndarray  # M x 3 x 3 (G)
    blend_trans: np.ndarray  # M x 3 (b)
    cov_canonical: np.ndarray
    kinematics: bm.Kinematics
    theta: np.ndarray
    theta_smplx: np.ndarray
    valid: bool = True
    _cache: dict = field(default_factory=dict, repr=False)


def articulate(avatar: GaussianAvatar, asset: bm.BodyModelAsset, pose: FramePose) -> ArticulatedGaussians:
    """Canonical -> frame space via blended skinning of rest-relative joint transforms."""
    gs = avatar.gaussians
    weights, lbs_cache = blended_weights(avatar, return_cache=True)
    theta, pose_cache = refine_pose(avatar, pose.theta, return_cache=True)
    joints = bm.regress_joints(asset, bm.shaped_template(asset, pose.beta))
    kin = bm.forward_kinematics(asset, joints, theta, pose.translation)
    g, b = bm.blended_transforms(weights, kin.rotations, kin.translations)
    cov_c, r, m = canonical_covariance(gs.rotations, gs.log_scales)
    means = np.einsum("mij,mj->mi", g, gs.centers) + b
    covs = g @ cov_c @ np.swapaxes(g, -1, -2)
    valid = bool(np.all(np.isfinite(means)) and np.all(np.isfinite(covs)))
    out = ArticulatedGaussians(means, covs, weights, g, b, cov_c, kin, theta, np.asarray(pose.theta, dtype=np.float64))
    out.valid = valid
    out._cache = {"lbs": lbs_cache, "pose": pose_cache, "rot": r, "m": m}
    return out


@dataclass
class AvatarGrads:
    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    lbs_net: list
    pose_net: list


def articulate_backward(avatar: GaussianAvatar, asset: bm.BodyModelAsset, art: ArticulatedGaussians,
                        d_means: np.ndarray, d_covs: np.ndarray) -> AvatarGrads:
    gs = avatar.gaussians
    g, cov_c = art.blend_rot, art.cov_canonical
    d_covs = np.asarray(d_covs, dtype=np.float64)
    # means = G p + b ; covs = G C G^T
    d_g = np.einsum("mi,mj->mij", d_means, gs.centers)
    gc = g @ cov_c
    d_g += d_covs @ g @ np.swapaxes(cov_c, -1, -2) + np.swapaxes(d_covs, -1, -2) @ gc
    d_cov_c = np.swapaxes(g, -1, -2) @ d_covs @ g
    d_centers = np.einsum("mji,mj->mi", g, d_means)
    d_b = d_means
    kin = art.kinematics
    d_w = np.einsum("mij,kij->mk", d_g, kin.rotations) + d_b @ kin.translations.T
    d_rot_k = np.einsum("mk,mij->kij", art.weights, d_g)
    d_trans_k = art.weights.T @ d_b
    # softmax backward
    w = art.weights
    d_logits = w * (d_w - np.sum(d_w * w, axis=1, keepdims=True))
    lbs_grads, d_feat = mlp_backward(avatar.lbs_net, art._cache["lbs"], d_logits)
    d_centers += pos_encode_backward(gs.centers, avatar.encoding, d_feat)
    # pose refinement
    d_theta, _, _ = bm.forward_kinematics_backward(asset, kin, d_rot_k, d_trans_k)
    net_cache, scale = art._cache["pose"]
    d_out = d_theta.reshape(-1) * art.theta_smplx * scale
    pose_grads, _ = mlp_backward(avatar.pose_net, net_cache, d_out)
    d_q, d_s = canonical_covariance_backward(gs.rotations, gs.log_scales, art._cache["rot"], art._cache["m"], d_cov_c)
    return AvatarGrads(d_centers, d_q, d_s, lbs_grads, pose_grads)
