"""Robust multi-source body-model fitting.

Minimises a robust 2D keypoint reprojection term plus a body prior (3D body
keypoints and a low-dimensional pose embedding) and a depth-only hand prior,
with L-BFGS and a strong-Wolfe line search over a three-stage schedule.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import bodymodel as bm
from .avatar import FramePose
from .rasterizer import Camera

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# robust penalty


def geman_mcclure(residual, rho: float, return_grad: bool = False):
    """rho^2 |r|^2 / (|r|^2 + rho^2) over the last axis; bounded by rho^2."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    r = np.asarray(residual, dtype=np.float64)
    sq = np.sum(r * r, axis=-1)
    rho2 = rho * rho
    val = rho2 * sq / (sq + rho2)
    if not return_grad:
        return val
    grad = (2.0 * rho2 * rho2 / (sq + rho2) ** 2)[..., None] * r
    return val, grad


# ---------------------------------------------------------------------------
# L-BFGS with strong-Wolfe line search


@dataclass
class LineSearchStep:
    alpha: float
    f0: float
    g0: float  # directional derivative at 0
    f: float
    g: float  # directional derivative at alpha
    c1: float
    c2: float

    @property
    def sufficient_decrease(self) -> bool:
        return self.f <= self.f0 + self.c1 * self.alpha * self.g0 + 1e-12 * abs(self.f0)

    @property
    def curvature(self) -> bool:
        return abs(self.g) <= self.c2 * abs(self.g0)


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    status: str  # "converged" | "max_iters" | "line_search_failed"
    history: list[float] = field(default_factory=list)
    steps: list[LineSearchStep] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "converged"


def _cubic_min(a, fa, ga, b, fb, gb):
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    x = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2 * d2)
    return x if np.isfinite(x) else None


def strong_wolfe(phi: Callable[[float], tuple[float, float]], f0: float, g0: float, alpha0: float = 1.0,
                 c1: float = 1e-4, c2: float = 0.9, max_evals: int = 40, alpha_max: float = 1e10):
    """Bracketing/zoom line search; returns (alpha, f, g, extra) or None on failure.

    Function values are compared with a slack of 1e-12 |f0| so that steps whose
    decrease is below round-off are still judged by their derivative.
    """
    slack = 1e-12 * abs(f0)
    a_prev, f_prev, g_prev = 0.0, f0, g0
    alpha = alpha0
    evals = 0

    def zoom(lo, f_lo, g_lo, hi, f_hi, g_hi):
        nonlocal evals
        while evals < max_evals:
            a = _cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            width = hi_b - lo_b
            if a is None or not (lo_b + 0.1 * width <= a <= hi_b - 0.1 * width):
                a = 0.5 * (lo + hi)
            f_a, g_a, extra = phi(a)
            evals += 1
            if f_a > f0 + c1 * a * g0 + slack or f_a > f_lo + slack:
                hi, f_hi, g_hi = a, f_a, g_a
            else:
                if abs(g_a) <= -c2 * g0:
                    return a, f_a, g_a, extra
                if g_a * (hi - lo) >= 0:
                    hi, f_hi, g_hi = lo, f_lo, g_lo
                lo, f_lo, g_lo = a, f_a, g_a
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return None

    while evals < max_evals:
        f_a, g_a, extra = phi(alpha)
        evals += 1
        if not np.isfinite(f_a):
            alpha = 0.5 * (a_prev + alpha)
            continue
        if f_a > f0 + c1 * alpha * g0 + slack or (evals > 1 and f_a > f_prev + slack):
            return zoom(a_prev, f_prev, g_prev, alpha, f_a, g_a)
        if abs(g_a) <= -c2 * g0:
            return alpha, f_a, g_a, extra
        if g_a >= 0:
            return zoom(alpha, f_a, g_a, a_prev, f_prev, g_prev)
        a_prev, f_prev, g_prev = alpha, f_a, g_a
        alpha = min(2.0 * alpha, alpha_max)
    return None


def lbfgs_wolfe(objective: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, max_iters: int = 100,
                tolerance: float = 1e-8, history_size: int = 10, c1: float = 1e-4, c2: float = 0.9) -> OptimizeResult:
    """Minimise ``objective`` (returning value and gradient) with L-BFGS."""
    x = np.array(x0, dtype=np.float64)
    f, g = objective(x)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient is not finite at the starting point")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    history = [float(f)]
    steps: list[LineSearchStep] = []
    status = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        if np.max(np.abs(g)) < tolerance:
            status = "converged"
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += s * (a - b)
        d = -q
        g0 = float(g @ d)
        if g0 >= 0:  # not a descent direction: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g
            g0 = float(g @ d)
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))

        def phi(a, x=x, d=d):
            fa, ga = objective(x + a * d)
            return fa, float(ga @ d), ga

        found = strong_wolfe(phi, f, g0, alpha0, c1, c2)
        if found is None:
            status = "line_search_failed"
            it -= 1
            break
        alpha, f_new, g_new_dir, g_new = found
        steps.append(LineSearchStep(alpha, float(f), g0, float(f_new), g_new_dir, c1, c2))
        s = alpha * d
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        history.append(float(f))
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > history_size:
                s_hist.pop(0)
                y_hist.pop(0)
        if np.max(np.abs(g)) < tolerance:
            status = "converged"
            break
    return OptimizeResult(x, float(f), g, it, status, history, steps)


# ---------------------------------------------------------------------------
# pose prior


class PriorDecoder(Protocol):
    dim: int

    def decode(self, eta: np.ndarray) -> np.ndarray: ...

    def decode_backward(self, eta: np.ndarray, grad: np.ndarray) -> np.ndarray: ...


@dataclass
class LinearPriorDecoder:
    """Deterministic linear embedding -> axis-angle body pose map with orthonormal rows."""

    matrix: np.ndarray  # (3 * n_body_joints) x dim

    @classmethod
    def random(cls, out_dim: int, dim: int = 32, seed: int = 0) -> "LinearPriorDecoder":
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(dim, out_dim)))
        return cls(q.T.copy())

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def decode(self, eta):
        return self.matrix @ np.asarray(eta, dtype=np.float64)

    def decode_backward(self, eta, grad):
        return self.matrix.T @ grad

    def encode(self, pose):
        """Minimum-norm embedding reproducing ``pose`` (used for initialisation)."""
        return self.matrix.T @ np.asarray(pose, dtype=np.float64)


# ---------------------------------------------------------------------------
# detections and configuration


@dataclass
class FrameDetections:
    keypoints2d: np.ndarray  # P x 3 (u, v, confidence)
    camera: Camera
    body_joints3d: np.ndarray | None = None
    hand_joints3d: np.ndarray | None = None
    name: str = ""

    def to_dict(self) -> dict:
        out = {"keypoints2d": self.keypoints2d.tolist(),
               "camera": {k: v for k, v in self.camera.to_dict().items()}}
        if self.body_joints3d is not None:
            out["body_joints3d"] = self.body_joints3d.tolist()
        if self.hand_joints3d is not None:
            out["hand_joints3d"] = self.hand_joints3d.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict, name: str = "") -> "FrameDetections":
        kp = np.asarray(data["keypoints2d"], dtype=np.float64).reshape(-1, 3)
        if np.any((kp[:, 2] < 0) | (kp[:, 2] > 1)):
            raise ValueError(f"{name}: keypoint confidences must lie in [0, 1]")
        cam = data["camera"]
        camera = Camera.from_dict({"width": 1, "height": 1, **cam})
        body = data.get("body_joints3d")
        hand = data.get("hand_joints3d")
        return cls(kp, camera, None if body is None else np.asarray(body, dtype=np.float64).reshape(-1, 3),
                   None if hand is None else np.asarray(hand, dtype=np.float64).reshape(-1, 3), name)


def read_detections(path) -> FrameDetections:
    path = Path(path)
    return FrameDetections.from_dict(json.loads(path.read_text()), name=path.name)


def write_detections(path, det: FrameDetections) -> None:
    Path(path).write_text(json.dumps(det.to_dict()))


@dataclass
class KeypointLayout:
    """Index sets of the model keypoints (joints followed by landmark vertices)."""

    parts: np.ndarray
    body3d: np.ndarray
    hand3d: np.ndarray
    root: int
    body_joints: np.ndarray  # non-root body joints driven by the prior decoder
    free_joints: np.ndarray  # hand / face joints optimised directly

    @classmethod
    def from_asset(cls, asset: bm.BodyModelAsset) -> "KeypointLayout":
        parts = bm.keypoint_parts(asset)
        body, hand = bm.PART_INDEX["body"], bm.PART_INDEX["hand"]
        jp = asset.joint_parts if asset.joint_parts is not None else np.zeros(asset.num_joints, np.int64)
        root = int(np.nonzero(asset.parents < 0)[0][0])
        body_joints = np.array([j for j in range(asset.num_joints) if jp[j] == body and j != root], dtype=np.int64)
        free = np.array([j for j in range(asset.num_joints) if jp[j] != body and j != root], dtype=np.int64)
        return cls(parts, np.nonzero(parts == body)[0], np.nonzero(parts == hand)[0], root, body_joints, free)


@dataclass
class StageConfig:
    iterations: int
    lambda_bp: float
    lambda_hp: float
    gamma_scale: dict = field(default_factory=lambda: {"body": 1.0, "hand": 1.0, "face": 1.0})
    optimize_free_joints: bool = True


def default_stages() -> list[StageConfig]:
    return [
        StageConfig(30, 1.0, 0.0, optimize_free_joints=False),
        StageConfig(40, 0.5, 1.0),
        StageConfig(60, 0.2, 1.0, gamma_scale={"body": 1.0, "hand": 2.0, "face": 2.0}),
    ]


@dataclass
class FitConfig:
    rho_2d: float = 100.0  # pixels
    rho_3d: float = 0.1  # model units
    prior_unit_scale: float = 3000.0  # 3D residuals are multiplied by this before the robust penalty
    gamma: dict = field(default_factory=lambda: {"body": 1.0, "hand": 2.0, "face": 2.0})
    stages: list[StageConfig] = field(default_factory=default_stages)
    tolerance: float = 1e-9
    eta_dim: int = 32
    block_iterations: int = 10

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ValueError("the fitting schedule has exactly three stages")
        weights = [self.rho_2d, self.rho_3d, self.prior_unit_scale, *self.gamma.values()]
        for st in self.stages:
            weights += [st.lambda_bp, st.lambda_hp, *st.gamma_scale.values()]
        if any((not np.isfinite(w)) or w < 0 for w in weights):
            raise ValueError("fit weights must be finite and non-negative")

    def with_hand_prior(self, enabled: bool) -> "FitConfig":
        stages = [StageConfig(s.iterations, s.lambda_bp, s.lambda_hp if enabled else 0.0, dict(s.gamma_scale),
                              s.optimize_free_joints) for s in self.stages]
        return FitConfig(self.rho_2d, self.rho_3d, self.prior_unit_scale, dict(self.gamma), stages, self.tolerance,
                         self.eta_dim, self.block_iterations)


# ---------------------------------------------------------------------------
# per-frame loss terms


@dataclass
class FrameParams:
    root: np.ndarray  # 3
    translation: np.ndarray  # 3
    eta: np.ndarray
    free: np.ndarray  # 3 * len(free_joints)
    psi: np.ndarray

    def theta(self, layout: KeypointLayout, decoder, num_joints: int) -> np.ndarray:
        th = np.zeros((num_joints, 3))
        th[layout.root] = self.root
        if layout.body_joints.size:
            th[layout.body_joints] = decoder.decode(self.eta).reshape(-1, 3)
        if layout.free_joints.size:
            th[layout.free_joints] = self.free.reshape(-1, 3)
        return th.reshape(-1)


def project_keypoints(points: np.ndarray, camera: Camera):
    """Pinhole projection with its Jacobian; points are camera-frame (identity extrinsics)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    in_front = z > camera.near
    zs = np.where(in_front, z, 1.0)
    uv = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    jac = np.zeros((points.shape[0], 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * x / zs**2
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * y / zs**2
    return uv, jac, in_front


@dataclass
class TermValues:
    l2d: float = 0.0
    lbp: float = 0.0
    lhp: float = 0.0
    behind_camera: int = 0
    missing_body: bool = False
    missing_hand: bool = False


def _gamma_vector(layout: KeypointLayout, config: FitConfig, stage: StageConfig) -> np.ndarray:
    per_part = np.array([config.gamma[p] * stage.gamma_scale.get(p, 1.0) for p in bm.PARTS])
    return per_part[layout.parts]


def loss_2d(keypoints_model: np.ndarray, det: FrameDetections, gamma: np.ndarray, rho: float,
            return_grad: bool = False):
    """sum_i gamma_i w_i psi(Pi_K(J_i) - J2D_i); keypoints behind the camera are skipped."""
    uv, jac, in_front = project_keypoints(keypoints_model, det.camera)
    weight = gamma * det.keypoints2d[:, 2] * in_front
    val, g = geman_mcclure(uv - det.keypoints2d[:, :2], rho, return_grad=True)
    total = float(np.sum(weight * val))
    behind = int(np.sum(~in_front & (det.keypoints2d[:, 2] > 0)))
    if not return_grad:
        return total, behind
    d_uv = weight[:, None] * g
    return total, behind, np.einsum("pi,pij->pj", d_uv, jac)


def loss_body_prior(eta: np.ndarray, keypoints_model: np.ndarray, det: FrameDetections, layout: KeypointLayout,
                    rho: float, scale: float = 1.0, return_grad: bool = False):
    """psi(J_b - J3D_b) summed over body keypoints plus |eta|^2."""
    reg = float(eta @ eta)
    d_kp = np.zeros_like(keypoints_model)
    if det.body_joints3d is None:
        return (reg, 0.0 * eta + 2 * eta, d_kp) if return_grad else reg
    resid = keypoints_model[layout.body3d] - det.body_joints3d
    val, g = geman_mcclure(resid, rho, return_grad=True)
    total = scale * scale * float(val.sum()) + reg
    if not return_grad:
        return total
    d_kp[layout.body3d] = scale * scale * g
    return total, 2 * eta, d_kp


def loss_hand_prior(keypoints_model: np.ndarray, det: FrameDetections, layout: KeypointLayout, rho: float,
                    scale: float = 1.0, return_grad: bool = False):
    """Robust error on the z coordinate of the hand keypoints only."""
    d_kp = np.zeros_like(keypoints_model)
    if det.hand_joints3d is None:
        return (0.0, d_kp) if return_grad else 0.0
    dz = keypoints_model[layout.hand3d, 2:3] - det.hand_joints3d[:, 2:3]
    val, g = geman_mcclure(dz, rho, return_grad=True)
    total = scale * scale * float(val.sum())
    if not return_grad:
        return total
    d_kp[layout.hand3d, 2] = scale * scale * g[:, 0]
    return total, d_kp


# ---------------------------------------------------------------------------
# sequence fitting


@dataclass
class FitResult:
    poses: list[FramePose]
    beta: np.ndarray
    frame_names: list[str]
    skipped: list[str]
    stage_histories: list[list[float]]
    stage_status: list[str]
    behind_camera: int = 0
    missing_terms: list[str] = field(default_factory=list)


class _Problem:
    """Stacked per-frame parameters plus a shared shape vector."""

    def __init__(self, asset, dets, layout, decoder, config, psi, fixed_beta=None):
        self.asset, self.dets, self.layout, self.decoder, self.config = asset, dets, layout, decoder, config
        self.psi = psi
        self.nf = len(dets)
        self.n_free = 3 * layout.free_joints.size
        self.per_frame = 6 + decoder.dim + self.n_free
        self.fixed_beta = fixed_beta
        self.nb = 0 if fixed_beta is not None else asset.num_betas

    def split(self, x):
        frames = []
        for i in range(self.nf):
            v = x[i * self.per_frame:(i + 1) * self.per_frame]
            d = self.decoder.dim
            frames.append(FrameParams(v[:3], v[3:6], v[6:6 + d], v[6 + d:], self.psi[i]))
        beta = self.fixed_beta if self.fixed_beta is not None else x[self.nf * self.per_frame:]
        return frames, beta

    def pack(self, frames, beta=None):
        parts = [np.concatenate([fp.root, fp.translation, fp.eta, fp.free]) for fp in frames]
        if self.fixed_beta is None:
            parts.append(np.asarray(beta, dtype=np.float64))
        return np.concatenate(parts)

    def evaluate(self, x, stage: StageConfig, return_grad=True, terms: list | None = None):
        frames, beta = self.split(x)
        cfg, lay = self.config, self.layout
        gamma = _gamma_vector(lay, cfg, stage)
        total = 0.0
        grad = np.zeros_like(x)
        d_beta_total = np.zeros(self.asset.num_betas)
        for i, (fp, det) in enumerate(zip(frames, self.dets)):
            theta = fp.theta(lay, self.decoder, self.asset.num_joints)
            posed = bm.pose_body(self.asset, theta, beta, fp.psi, fp.translation)
            kp = bm.keypoints(self.asset, posed)
            l2, behind, d_kp = loss_2d(kp, det, gamma, cfg.rho_2d, return_grad=True)
            lbp, d_eta, d_kp_b = loss_body_prior(fp.eta, kp, det, lay, cfg.rho_3d, cfg.prior_unit_scale, True)
            lhp, d_kp_h = loss_hand_prior(kp, det, lay, cfg.rho_3d, cfg.prior_unit_scale, True)
            total += l2 + stage.lambda_bp * lbp + stage.lambda_hp * lhp
            if terms is not None:
                terms.append(TermValues(l2, lbp, lhp, behind, det.body_joints3d is None, det.hand_joints3d is None))
            if not return_grad:
                continue
            d_kp = d_kp + stage.lambda_bp * d_kp_b + stage.lambda_hp * d_kp_h
            d_theta, d_beta, _, d_trans = bm.keypoints_backward(self.asset, posed, theta, d_kp)
            d_theta = d_theta.reshape(-1, 3)
            o = i * self.per_frame
            d = self.decoder.dim
            grad[o:o + 3] = d_theta[lay.root]
            grad[o + 3:o + 6] = d_trans
            d_e = stage.lambda_bp * d_eta
            if lay.body_joints.size:
                d_e = d_e + self.decoder.decode_backward(fp.eta, d_theta[lay.body_joints].reshape(-1))
            grad[o + 6:o + 6 + d] = d_e
            if stage.optimize_free_joints and self.n_free:
                grad[o + 6 + d:o + self.per_frame] = d_theta[lay.free_joints].reshape(-1)
            d_beta_total += d_beta
        if self.fixed_beta is None:
            grad[self.nf * self.per_frame:] = d_beta_total
        return total, grad


def _gauss_newton_scaling(prob: "_Problem", x: np.ndarray, stage: StageConfig, h: float = 1e-6,
                          shape_only: bool = False) -> np.ndarray:
    """Per-coordinate 1/sqrt of the Gauss-Newton curvature diagonal.

    Keypoint Jacobians come from central differences on each frame, and the
    robust penalties are replaced by their quadratic limit.  The diagonal
    depends only on the parametrisation, so it stays positive even where the
    objective itself is non-convex.
    """
    cfg, lay = prob.config, prob.layout
    gamma = _gamma_vector(lay, cfg, stage)
    frames, beta = prob.split(x)
    diag = np.zeros_like(x)
    s2 = cfg.prior_unit_scale**2
    for i, det in enumerate(prob.dets):
        sub = _Problem(prob.asset, [det], lay, prob.decoder, cfg, [prob.psi[i]], prob.fixed_beta)
        xs = sub.pack([frames[i]], beta)

        def kp_of(v):
            (fp,), b = sub.split(v)
            th = fp.theta(lay, prob.decoder, prob.asset.num_joints)
            return bm.keypoints(prob.asset, bm.pose_body(prob.asset, th, b, fp.psi, fp.translation))

        kp = kp_of(xs)
        _, pj, in_front = project_keypoints(kp, det.camera)
        w2d = gamma * det.keypoints2d[:, 2] * in_front
        d = np.zeros_like(xs)
        for j in range(prob.per_frame if shape_only else 0, xs.size):
            e = np.zeros_like(xs)
            e[j] = h
            jk = (kp_of(xs + e) - kp_of(xs - e)) / (2 * h)
            juv = np.einsum("pij,pj->pi", pj, jk)
            d[j] = 2 * np.sum(w2d * np.sum(juv * juv, axis=1))
            if det.body_joints3d is not None:
                d[j] += 2 * stage.lambda_bp * s2 * np.sum(jk[lay.body3d] ** 2)
            if det.hand_joints3d is not None:
                d[j] += 2 * stage.lambda_hp * s2 * np.sum(jk[lay.hand3d, 2] ** 2)
        d[6:6 + prob.decoder.dim] += 2 * stage.lambda_bp
        diag[i * prob.per_frame:(i + 1) * prob.per_frame] = d[:prob.per_frame]
        diag[prob.nf * prob.per_frame:] += d[prob.per_frame:]
    if shape_only:
        diag = diag[prob.nf * prob.per_frame:]
    floor = 1e-12 * max(diag.max(), 1.0)
    return 1.0 / np.sqrt(np.maximum(diag, floor))


def _shape_scaling(shape: "_ShapeProblem", beta: np.ndarray, stage: StageConfig) -> np.ndarray:
    return _gauss_newton_scaling(shape.prob, shape.prob.pack(shape.frames, beta), stage, shape_only=True)


def _minimise(prob, x: np.ndarray, stage: StageConfig, tolerance: float, iterations: int) -> OptimizeResult:
    """L-BFGS in diagonally rescaled coordinates; the history is in objective units."""
    scale = _shape_scaling(prob, x, stage) if isinstance(prob, _ShapeProblem) else _gauss_newton_scaling(prob, x, stage)
    res = lbfgs_wolfe(lambda z: _scaled(prob, z, scale, stage), x / scale, max_iters=iterations,
                      tolerance=tolerance)
    res.x = res.x * scale
    res.grad = res.grad / scale
    return res


def _minimise_blocks(prob: "_Problem", x: np.ndarray, stage: StageConfig, config: "FitConfig"):
    """Block-coordinate descent: per-frame pose blocks, then the shared shape.

    Frames are independent once the shape is fixed, so each gets its own line
    search instead of being throttled by the hardest frame.  Rounds of
    ``block_iterations`` per-frame iterations alternate with a shape update
    until the stage budget is spent.  The history records the full objective
    after every inner iteration and is non-increasing.
    """
    frames, beta = prob.split(x)
    frames = [FrameParams(*(np.array(a, copy=True) for a in (fp.root, fp.translation, fp.eta, fp.free, fp.psi)))
              for fp in frames]
    beta = np.array(beta, copy=True)
    history = [prob.evaluate(prob.pack(frames, beta), stage, return_grad=False)[0]]
    status = "converged"
    budget = stage.iterations
    while budget > 0:
        n = min(config.block_iterations, budget)
        budget -= n
        hists, moved = [], False
        for i, det in enumerate(prob.dets):
            sub = _Problem(prob.asset, [det], prob.layout, prob.decoder, config, [prob.psi[i]], fixed_beta=beta)
            r = _minimise(sub, sub.pack([frames[i]]), stage, config.tolerance, n)
            frames[i] = sub.split(r.x)[0][0]
            hists.append(r.history)
            moved |= r.n_iter > 0
            if r.status != "converged" and status != "line_search_failed":
                status = r.status
        length = max(len(h) for h in hists)
        history += [float(v) for v in np.sum([np.pad(h, (0, length - len(h)), mode="edge") for h in hists],
                                             axis=0)[1:]]
        shape = _ShapeProblem(prob, frames)
        r = _minimise(shape, beta, stage, config.tolerance, n)
        beta = r.x
        history += r.history[1:]
        moved |= r.n_iter > 0
        if not moved:
            break
    return prob.pack(frames, beta), history, status


class _ShapeProblem:
    """The full objective as a function of the shared shape only."""

    def __init__(self, prob: "_Problem", frames: list[FrameParams]):
        self.prob, self.frames = prob, frames

    def evaluate(self, beta, stage, return_grad=True, terms=None):
        f, g = self.prob.evaluate(self.prob.pack(self.frames, beta), stage, return_grad, terms)
        return f, g[self.prob.nf * self.prob.per_frame:]


def _scaled(prob, z, scale, stage):
    f, g = prob.evaluate(z * scale, stage)
    return f, g * scale


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    sc, dc = src - src.mean(axis=0), dst - dst.mean(axis=0)
    u, _, vt = np.linalg.svd(sc.T @ dc)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def rotation_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(rot) - 1) / 2, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-8:
        return np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) / 2
    if np.pi - angle < 1e-6:
        w, v = np.linalg.eigh((rot + rot.T) / 2)
        return v[:, -1] * angle
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) / (2 * np.sin(angle))
    return axis * angle


def _driving_joint(asset: bm.BodyModelAsset) -> np.ndarray:
    """Joint whose rotation chain ends at each keypoint (parent for joints, dominant weight for landmarks)."""
    joints = np.where(asset.parents < 0, np.arange(asset.num_joints), asset.parents)
    marks = np.argmax(asset.skin_weights[asset.landmark_vertices], axis=1)
    return np.concatenate([joints, marks])


def initial_frame(asset: bm.BodyModelAsset, det: FrameDetections, layout: KeypointLayout, decoder,
                  default_depth: float = 2.0) -> FrameParams:
    """Rigid alignment of the rest-pose body keypoints to the 3D body estimate.

    Only keypoints moved by the root alone are used when at least three exist,
    so a bent limb does not tilt the initial global orientation.
    """
    n_free = 3 * layout.free_joints.size
    fp = FrameParams(np.zeros(3), np.zeros(3), np.zeros(decoder.dim), np.zeros(n_free), np.zeros(asset.num_expressions))
    rest = bm.keypoints(asset, bm.pose_body(asset, np.zeros(3 * asset.num_joints)))
    if det.body_joints3d is not None and layout.body3d.size >= 3:
        rooted = _driving_joint(asset)[layout.body3d] == layout.root
        sel = rooted if rooted.sum() >= 3 else np.ones_like(rooted)
        src, dst = rest[layout.body3d][sel], det.body_joints3d[sel]
        rot = _kabsch(src, dst)
        root_j = asset.rest_joints()[layout.root]
        fp.root = rotation_to_axis_angle(rot)
        fp.translation = np.mean(dst - (src - root_j) @ rot.T - root_j, axis=0)
    else:
        fp.translation = np.array([0.0, 0.0, default_depth]) - rest.mean(axis=0)
    return fp


def fit_sequence(frames_detections: list[FrameDetections], asset: bm.BodyModelAsset, config: FitConfig | None = None,
                 decoder: PriorDecoder | None = None, init: list[FrameParams] | None = None,
                 init_beta: np.ndarray | None = None) -> FitResult:
    """Three-stage robust fit with one shape vector shared across all frames."""
    config = config or FitConfig()
    layout = KeypointLayout.from_asset(asset)
    decoder = decoder or LinearPriorDecoder.random(3 * layout.body_joints.size, config.eta_dim)
    n_kp = asset.num_joints + asset.landmark_vertices.size
    dets, names, skipped = [], [], []
    for i, det in enumerate(frames_detections):
        name = det.name or f"{i:06d}"
        usable = det.keypoints2d.shape[0] == n_kp and np.any(det.keypoints2d[:, 2] > 0)
        if not usable:
            skipped.append(name)
            log.warning("frame %s has no usable detections; skipped", name)
            continue
        dets.append(det)
        names.append(name)
    if not dets:
        raise ValueError("no frame has usable detections")
    if init is None:
        init = [initial_frame(asset, d, layout, decoder) for d in dets]
    beta0 = np.zeros(asset.num_betas) if init_beta is None else np.asarray(init_beta, dtype=np.float64)
    prob = _Problem(asset, dets, layout, decoder, config, [fp.psi for fp in init])
    x = prob.pack(init, beta0)
    histories, statuses = [], []
    for k, stage in enumerate(config.stages, start=1):
        x, hist, status = _minimise_blocks(prob, x, stage, config)
        histories.append(hist)
        statuses.append(status)
        log.info("fit stage %d: f %.6g -> %.6g (%s)", k, hist[0], hist[-1], status)
    terms: list[TermValues] = []
    prob.evaluate(x, config.stages[-1], return_grad=False, terms=terms)
    frames, beta = prob.split(x)
    poses = [FramePose(fp.theta(layout, decoder, asset.num_joints), beta.copy(), fp.psi.copy(), fp.translation.copy())
             for fp in frames]
    missing = [f"{n}:body_joints3d" for n, t in zip(names, terms) if t.missing_body]
    missing += [f"{n}:hand_joints3d" for n, t in zip(names, terms) if t.missing_hand]
    behind = sum(t.behind_camera for t in terms)
    if behind:
        log.warning("%d keypoints behind the camera were excluded", behind)
    return FitResult(poses, beta, names, skipped, histories, statuses, behind, missing)


def reprojection_error(asset: bm.BodyModelAsset, pose: FramePose, keypoints2d: np.ndarray, camera: Camera) -> float:
    """Mean pixel distance between projected model keypoints and reference 2D points."""
    kp = bm.keypoints(asset, bm.pose_body(asset, pose.theta, pose.beta, pose.psi, pose.translation))
    uv, _, _ = project_keypoints(kp, camera)
    return float(np.mean(np.linalg.norm(uv - keypoints2d[:, :2], axis=1)))
