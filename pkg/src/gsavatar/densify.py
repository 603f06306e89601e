"""Part-aware adaptive density control.

Each Gaussian keeps a ring buffer of its last 2R per-step positional gradient
norms.  Its densification threshold is the part constant ``e`` shifted by the
difference between the recent and the previous window of gradients, scaled by
a part coefficient ``lambda_t / R``.  With negative coefficients a rising
gradient lowers the threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import bodymodel as bm
from .avatar import GaussianAvatar, GaussianSet, nearest_distances, sigmoid

log = logging.getLogger(__name__)

# (e, lambda_t) per part
PART_CONSTANTS = {"body": (2e-4, -9.0), "hand": (1e-4, -4.5), "face": (1.4e-4, -6.3)}
TEMPLATE_DISTANCE = {"body": 0.05, "hand": 0.02, "face": 0.02}
SPLIT_FACTOR = 1.6
CLONE_EXTENT_FRACTION = 0.01


class DensifyError(RuntimeError):
    pass


@dataclass
class DensifyState:
    R: int = 100
    part_constants: dict = field(default_factory=lambda: dict(PART_CONSTANTS))
    opacity_prune_threshold: float = 0.005
    template_distance_threshold: dict = field(default_factory=lambda: dict(TEMPLATE_DISTANCE))
    adaptive: bool = True  # False gives the fixed per-part threshold e
    max_gaussians: int | None = None
    grad_history: np.ndarray = field(default=None)  # M x 2R
    visible_history: np.ndarray = field(default=None)  # M x 2R
    grad_direction: np.ndarray = field(default=None)  # M x 3 accumulated canonical position gradient
    steps: int = 0

    def __post_init__(self):
        if self.R <= 0:
            raise ValueError("densification interval R must be positive")
        for part in bm.PARTS:
            if part not in self.part_constants or part not in self.template_distance_threshold:
                raise ValueError(f"missing constants for part {part!r}")

    @classmethod
    def for_count(cls, num_gaussians: int, **kwargs) -> "DensifyState":
        state = cls(**kwargs)
        state.reset(num_gaussians)
        return state

    def reset(self, num_gaussians: int) -> None:
        self.grad_history = np.zeros((num_gaussians, 2 * self.R))
        self.visible_history = np.zeros((num_gaussians, 2 * self.R), dtype=bool)
        self.grad_direction = np.zeros((num_gaussians, 3))
        self.steps = 0

    @property
    def buffer_full(self) -> bool:
        return self.steps >= 2 * self.R

    def window_sums(self) -> tuple[np.ndarray, np.ndarray]:
        """(sum over the most recent R steps, sum over the R steps before)."""
        recent, previous = self._window_indices()
        return self.grad_history[:, recent].sum(axis=1), self.grad_history[:, previous].sum(axis=1)

    def _window_indices(self):
        n = 2 * self.R
        last = (self.steps - 1) % n
        recent = [(last - i) % n for i in range(self.R)]
        previous = [(last - self.R - i) % n for i in range(self.R)]
        return recent, previous

    def mean_recent_gradient(self) -> np.ndarray:
        recent, _ = self._window_indices()
        total = self.grad_history[:, recent].sum(axis=1)
        count = self.visible_history[:, recent].sum(axis=1)
        return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def record_gradients(state: DensifyState, grad_norms: np.ndarray, step: int | None = None,
                     visible: np.ndarray | None = None, position_grads: np.ndarray | None = None) -> None:
    """Push one optimizer step of per-Gaussian gradient norms into the ring buffers."""
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    m = state.grad_history.shape[0]
    if grad_norms.shape != (m,):
        raise ValueError(f"got {grad_norms.shape[0] if grad_norms.ndim else 0} gradient norms for {m} live Gaussians")
    slot = state.steps % (2 * state.R)
    state.grad_history[:, slot] = grad_norms
    state.visible_history[:, slot] = (grad_norms > 0) if visible is None else visible
    if position_grads is not None:
        state.grad_direction += position_grads
    state.steps += 1


def adaptive_threshold(state: DensifyState, gaussian_index, part) -> np.ndarray | float:
    """Per-Gaussian densification threshold; falls back to ``e`` until 2R steps are recorded."""
    part_names = np.atleast_1d(part)
    idx = np.atleast_1d(gaussian_index)
    e = np.array([state.part_constants[bm.PARTS[p] if not isinstance(p, str) else p][0] for p in part_names])
    lam = np.array([state.part_constants[bm.PARTS[p] if not isinstance(p, str) else p][1] for p in part_names])
    if not state.adaptive or not state.buffer_full:
        out = e * np.ones(idx.shape)
    else:
        recent, previous = state.window_sums()
        out = e + lam / state.R * (recent[idx] - previous[idx])
    return float(out[0]) if np.isscalar(gaussian_index) else out


@dataclass
class DensifyReport:
    splits: dict = field(default_factory=lambda: {p: 0 for p in bm.PARTS})
    clones: dict = field(default_factory=lambda: {p: 0 for p in bm.PARTS})
    prunes: dict = field(default_factory=lambda: {p: 0 for p in bm.PARTS})
    threshold_mean: dict = field(default_factory=dict)
    threshold_min: dict = field(default_factory=dict)
    live: int = 0
    sources: np.ndarray | None = None  # pre-densify index each surviving Gaussian was copied from
    created: np.ndarray | None = None  # True for clones and split children

    @property
    def total_changes(self) -> int:
        return sum(self.splits.values()) + sum(self.clones.values()) + sum(self.prunes.values())

    def rows(self, step: int) -> list[list]:
        return [[step, p, self.splits[p], self.clones[p], self.prunes[p], self.live] for p in bm.PARTS]


def scene_extent(asset: bm.BodyModelAsset, beta=None) -> float:
    v = bm.shaped_template(asset, beta)
    return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


def _sample_children(gs: GaussianSet, idx: np.ndarray, rng: np.random.Generator) -> GaussianSet:
    from .avatar import quat_to_rotmat

    children = []
    scales = np.exp(gs.log_scales[idx])
    rots = quat_to_rotmat(gs.rotations[idx])
    for _ in range(2):
        child = gs.subset(idx)
        z = rng.normal(size=(idx.size, 3)) * scales
        child.centers = gs.centers[idx] + np.einsum("mij,mj->mi", rots, z)
        child.log_scales = gs.log_scales[idx] - np.log(SPLIT_FACTOR)
        children.append(child)
    return GaussianSet.concat(children)


def densify_and_prune(avatar: GaussianAvatar, state: DensifyState, asset: bm.BodyModelAsset,
                      rng: np.random.Generator | None = None, extent: float | None = None) -> DensifyReport:
    """Split/clone Gaussians whose recent gradient exceeds their threshold, then prune."""
    rng = np.random.default_rng(0) if rng is None else rng
    gs = avatar.gaussians
    m = len(gs)
    report = DensifyReport()
    extent = scene_extent(asset, avatar.beta) if extent is None else extent
    thresholds = adaptive_threshold(state, np.arange(m), gs.parts)
    grads = state.mean_recent_gradient()
    for p, name in enumerate(bm.PARTS):
        sel = gs.parts == p
        if sel.any():
            report.threshold_mean[name] = float(thresholds[sel].mean())
            report.threshold_min[name] = float(thresholds[sel].min())
    over = np.nonzero(grads > thresholds)[0]
    if state.max_gaussians is not None:
        room = max(state.max_gaussians - m, 0)
        # most over-threshold first; ties broken by index for determinism
        ratio = grads[over] / np.maximum(thresholds[over], 1e-12)
        over = over[np.lexsort((over, -ratio))][:room]
        over.sort()
    big = np.max(np.exp(gs.log_scales[over]), axis=1) >= CLONE_EXTENT_FRACTION * extent if over.size else np.zeros(0, bool)
    clone_idx, split_idx = over[~big], over[big]

    # clones: copy nudged along the descent direction of the accumulated canonical gradient
    clones = gs.subset(clone_idx)
    direction = state.grad_direction[clone_idx]
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    unit = np.divide(direction, norm, out=np.zeros_like(direction), where=norm > 0)
    clones.centers = clones.centers - 0.5 * np.exp(clones.log_scales.max(axis=1, keepdims=True)) * unit
    children = _sample_children(gs, split_idx, rng)
    for p, name in enumerate(bm.PARTS):
        report.clones[name] = int(np.sum(gs.parts[clone_idx] == p))
        report.splits[name] = int(np.sum(gs.parts[split_idx] == p))

    keep = np.ones(m, dtype=bool)
    keep[split_idx] = False
    parents = np.concatenate([np.arange(m)[keep], clone_idx, split_idx, split_idx])
    created = np.arange(parents.size) >= keep.sum()
    new = GaussianSet.concat([gs.subset(keep), clones, children])

    # prune: transparent or drifted away from the template surface
    verts = bm.shaped_template(asset, avatar.beta)
    dist = nearest_distances(new.centers, verts)
    limit = np.array([state.template_distance_threshold[bm.PARTS[p]] for p in new.parts])
    prune = (sigmoid(new.opacity_logits) < state.opacity_prune_threshold) | (dist > limit)
    if prune.all():
        raise DensifyError(f"pruning would remove all {prune.size} Gaussians; optimisation has diverged")
    for p, name in enumerate(bm.PARTS):
        report.prunes[name] = int(np.sum(new.parts[prune] == p))
    survivors = ~prune
    avatar.gaussians = new.subset(survivors)
    avatar.refresh_base_weights(asset)

    # children inherit their parent's gradient history
    src = parents[survivors]
    state.grad_history = state.grad_history[src].copy()
    state.visible_history = state.visible_history[src].copy()
    state.grad_direction = np.zeros((src.size, 3))
    report.live = len(avatar.gaussians)
    report.sources = src
    report.created = created[survivors]
    log.debug("densify: %s", report)
    return report
