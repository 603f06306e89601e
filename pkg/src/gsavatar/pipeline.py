"""Datasets, training, rendering, evaluation and avatar persistence.

Dataset layout::

    root/
      camera.json          {"camera": {fx, fy, cx, cy, width, height, ...},
                            "identity": str, "splits": {"train": [...], "test": [...]}}
      images/000000.png    RGB frames
      masks/000000.png     foreground masks (grayscale)
      poses/000000.json    {"theta", "beta", "psi", "translation"}
      detections/000000.json   optional, consumed by the fitting step
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from . import bodymodel as bm
from .avatar import (SH_C0, FramePose, GaussianAvatar, GaussianSet, articulate, articulate_backward, init_from_model,
                     logit, sh_to_color, sh_to_color_backward, sigmoid)
from .densify import DensifyState, densify_and_prune, record_gradients, scene_extent
from .nets import Mlp, PosEncoding, make_confidence_net
from .objectives import ImageLoss, LossWeights, PerceptualScorer, image_loss, ssim
from .rasterizer import (Camera, RasterGrads, RenderOutput, project_backward, rasterize_backward, read_png, render,
                         write_depth, write_png)

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
REGIONS = ("full", "hand", "face")


class DatasetError(ValueError):
    """Missing or inconsistent dataset files; ``problems`` itemises each one."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("dataset failed validation:\n  " + "\n  ".join(self.problems))


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, frame: str | None = None, checkpoint: Path | None = None):
        super().__init__(message)
        self.frame = frame
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# dataset


@dataclass
class FrameRecord:
    name: str
    image: Path
    mask: Path
    pose: Path
    detections: Path | None = None


@dataclass
class Dataset:
    root: Path
    frames: list[FrameRecord]
    camera: Camera
    identity: str
    split: str

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.camera.height, self.camera.width

    def load_image(self, i: int) -> np.ndarray:
        img = read_png(self.frames[i].image)
        return img[..., :3] if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)

    def load_mask(self, i: int) -> np.ndarray:
        m = read_png(self.frames[i].mask)
        return m if m.ndim == 2 else m[..., 0]

    def load_pose(self, i: int) -> FramePose:
        return read_pose(self.frames[i].pose)


def read_pose(path) -> FramePose:
    return FramePose.from_dict(json.loads(Path(path).read_text()))


def write_pose(path, pose: FramePose) -> None:
    Path(path).write_text(json.dumps(pose.to_dict()))


def check_pose(asset: bm.BodyModelAsset, pose: FramePose, name: str = "pose") -> None:
    expected = {"theta": 3 * asset.num_joints, "beta": asset.num_betas, "psi": asset.num_expressions,
                "translation": 3}
    for key, n in expected.items():
        got = getattr(pose, key).size
        if got != n:
            raise ValueError(f"{name}: {key} has {got} values, model expects {n}")


def load_dataset(root, split: str = "train", asset: bm.BodyModelAsset | None = None) -> Dataset:
    """Validate the directory layout and return frames of one split sorted by name."""
    root = Path(root)
    problems: list[str] = []
    cam_path = root / "camera.json"
    if not cam_path.is_file():
        raise DatasetError([f"missing {cam_path}"])
    meta = json.loads(cam_path.read_text())
    camera = Camera.from_dict(meta.get("camera", meta))
    splits = meta.get("splits")
    if splits is None:
        names = sorted(p.stem for p in (root / "images").glob("*.png"))
        if split != "train":
            names = []
    else:
        if split not in splits:
            raise DatasetError([f"split {split!r} not listed in {cam_path}"])
        names = sorted(str(n) for n in splits[split])
    if not names:
        raise DatasetError([f"split {split!r} has no frames"])
    frames = []
    for name in names:
        rec = FrameRecord(name, root / "images" / f"{name}.png", root / "masks" / f"{name}.png",
                          root / "poses" / f"{name}.json")
        det = root / "detections" / f"{name}.json"
        rec.detections = det if det.is_file() else None
        for p in (rec.image, rec.mask, rec.pose):
            if not p.is_file():
                problems.append(f"missing file {p}")
        for p in (rec.image, rec.mask):
            if p.is_file():
                with Image.open(p) as im:
                    if im.size != (camera.width, camera.height):
                        problems.append(f"{p} is {im.size[0]}x{im.size[1]}, camera expects "
                                        f"{camera.width}x{camera.height}")
        if asset is not None and rec.pose.is_file():
            try:
                check_pose(asset, read_pose(rec.pose), str(rec.pose))
            except (ValueError, KeyError) as exc:
                problems.append(str(exc))
        frames.append(rec)
    if problems:
        raise DatasetError(problems)
    return Dataset(root, frames, camera, str(meta.get("identity", root.name)), split)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    iterations: int = 2000
    densify_start: int = 400
    densify_end: int = 1000
    densify_interval: int = 100
    adaptive_density: bool = True
    max_gaussians: int = 0  # 0 = unlimited
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_nets: float = 1e-3
    lambda_m: float = 0.1
    lambda_s: float = 0.01
    lambda_l: float = 0.04
    mu: float = 1.0
    log_confidence: float = 0.0
    sh_degree: int = 3
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    background: float = 0.0

    def __post_init__(self):
        # a window reaching past the last iteration is simply truncated
        if not 0 <= self.densify_start < self.densify_end:
            raise ValueError("need 0 <= densify_start < densify_end")
        if self.iterations < 0 or self.densify_interval <= 0:
            raise ValueError("iterations must be >= 0 and densify_interval > 0")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must lie in 0..3")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_m, self.lambda_s, self.lambda_l, self.mu, self.log_confidence)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(kind, text: str):
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    return float(text)


def parse_overrides(pairs: dict[str, str] | list[str]) -> dict:
    """Turn ``key=value`` strings (or a str->str dict) into typed TrainConfig fields."""
    if isinstance(pairs, list):
        items = {}
        for p in pairs:
            if "=" not in p:
                raise ValueError(f"expected key=value, got {p!r}")
            k, v = p.split("=", 1)
            items[k.strip()] = v.strip()
        pairs = items
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, value in pairs.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _coerce(types[key], value)
    return out


def load_config(path, overrides: dict | list | None = None) -> TrainConfig:
    """Flat ``key = value`` file; ``#`` starts a comment.  Overrides win."""
    values: dict[str, str] = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    parsed = parse_overrides(values)
    if overrides:
        parsed.update(overrides if isinstance(overrides, dict) and not any(isinstance(v, str) for v in overrides.values())
                      else parse_overrides(overrides))
    return TrainConfig(**parsed)


# ---------------------------------------------------------------------------
# avatar archive


def save_avatar(path, avatar: GaussianAvatar, confidence_net: Mlp | None = None) -> None:
    """Directory of .npy arrays plus manifest.json; byte-identical for identical state."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {f"gaussians_{f}": getattr(avatar.gaussians, f) for f in GaussianSet.FIELDS}
    arrays["base_weights"] = avatar.base_weights
    arrays["beta"] = avatar.beta
    nets = {"lbs_net": avatar.lbs_net, "pose_net": avatar.pose_net}
    if confidence_net is not None:
        nets["confidence_net"] = confidence_net
    for name, net in nets.items():
        for key, arr in net.state_dict().items():
            arrays[f"{name}_{key}"] = arr
    for name, arr in arrays.items():
        np.save(path / f"{name}.npy", np.ascontiguousarray(arr), allow_pickle=False)
    manifest = {
        "format": "gsavatar-archive/1",
        "num_gaussians": len(avatar.gaussians),
        "sh_degree": avatar.gaussians.sh_degree,
        "encoding": {"num_frequencies": avatar.encoding.num_frequencies,
                     "include_input": avatar.encoding.include_input},
        "epsilon": avatar.epsilon,
        "nets": {name: {"activations": net.activations, "layers": len(net.weights)} for name, net in nets.items()},
        "arrays": sorted(arrays),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_avatar(path) -> tuple[GaussianAvatar, Mlp | None]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"{mf} not found; not an avatar archive")
    manifest = json.loads(mf.read_text())

    def arr(name):
        return np.load(path / f"{name}.npy", allow_pickle=False)

    gs = GaussianSet(*(arr(f"gaussians_{f}") for f in GaussianSet.FIELDS))
    nets = {}
    for name, spec in manifest["nets"].items():
        n = spec["layers"]
        nets[name] = Mlp([arr(f"{name}_w{i}") for i in range(n)], [arr(f"{name}_b{i}") for i in range(n)],
                         list(spec["activations"]), name=name)
    enc = PosEncoding(**manifest["encoding"])
    avatar = GaussianAvatar(gs, nets["lbs_net"], nets["pose_net"], arr("base_weights"), arr("beta"), enc,
                            float(manifest["epsilon"]))
    return avatar, nets.get("confidence_net")


# ---------------------------------------------------------------------------
# rendering


def render_avatar(avatar: GaussianAvatar, asset: bm.BodyModelAsset, pose: FramePose, camera: Camera,
                  background=None):
    """Articulate and render; returns (RenderOutput, articulation, colour cache)."""
    art = articulate(avatar, asset, pose)
    colors, ccache = sh_to_color(avatar.gaussians.sh, art.means, camera.center)
    out = render(art.means, art.covs, colors, avatar.gaussians.opacities(), camera, background)
    return out, art, ccache


@dataclass
class FrameGrads:
    """Gradients of one frame's training loss for every trainable group."""

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    lbs_net: list
    pose_net: list
    confidence_net: list


@dataclass
class FrameStep:
    loss: ImageLoss
    render: RenderOutput
    raster_grads: RasterGrads
    grads: FrameGrads
    valid: bool


def frame_step(avatar: GaussianAvatar, asset: bm.BodyModelAsset, conf_net: Mlp, pose: FramePose, camera: Camera,
               target: np.ndarray, mask: np.ndarray, weights: LossWeights, background=None,
               perceptual: PerceptualScorer | None = None) -> FrameStep:
    """Loss of one frame and its reverse pass down to Gaussian and network parameters."""
    gs = avatar.gaussians
    out, art, ccache = render_avatar(avatar, asset, pose, camera, background)
    loss = image_loss(conf_net, out.color, out.depth, out.alpha, target, mask, weights, perceptual)
    rg = rasterize_backward(out.cache, loss.d_color, None, loss.d_alpha)
    d_means, d_covs = project_backward(out.projection, camera, rg.mean2d, rg.cov2d, rg.depth)
    d_sh, d_pos = sh_to_color_backward(gs.sh, ccache, rg.color)
    opac = sigmoid(gs.opacity_logits)
    ag = articulate_backward(avatar, asset, art, d_means + d_pos, d_covs)
    grads = FrameGrads(ag.centers, ag.rotations, ag.log_scales, rg.opacity * opac * (1 - opac), d_sh,
                       ag.lbs_net, ag.pose_net, loss.d_confidence_net)
    return FrameStep(loss, out, rg, grads, art.valid)


def render_novel(avatar: GaussianAvatar, asset: bm.BodyModelAsset, poses: list[FramePose], camera: Camera,
                 out_dir=None, names: list[str] | None = None, background=None) -> list[RenderOutput]:
    """Render each pose; with ``out_dir`` writes colour/alpha PNGs and raw depth per pose."""
    names = names or [f"{i:06d}" for i in range(len(poses))]
    outs = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for name, pose in zip(names, poses):
        check_pose(asset, pose, name)
        out, _, _ = render_avatar(avatar, asset, pose, camera, background)
        if out_dir is not None:
            write_png(out_dir / f"{name}.png", out.color)
            write_png(out_dir / f"{name}_alpha.png", out.alpha)
            write_depth(out_dir / f"{name}_depth.gsd", out.depth)
        outs.append(out)
    return outs


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """First/second-moment adaptive update applied in place, keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def tick(self) -> None:
        self.t += 1

    def step(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if key not in self.m:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
        m, v = self.m[key], self.v[key]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**self.t)
        vhat = v / (1 - self.beta2**self.t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def remap(self, keys, sources: np.ndarray, created: np.ndarray) -> None:
        """Follow a densification: survivors keep moments, new Gaussians start from zero."""
        for key in keys:
            if key in self.m:
                for store in (self.m, self.v):
                    moved = store[key][sources]
                    moved[created] = 0.0
                    store[key] = moved


@dataclass
class TrainResult:
    avatar: GaussianAvatar
    confidence_net: Mlp
    losses: list[float]
    log_rows: list[list]
    densify_rows: list[list]
    gaussian_counts: list[int]


def _position_lr(config: TrainConfig, it: int, extent: float) -> float:
    t = min(it / max(config.iterations, 1), 1.0)
    return extent * math.exp((1 - t) * math.log(config.lr_position) + t * math.log(config.lr_position_final))


def _checkpoint(out_dir, avatar, conf_net) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / "checkpoint"
    save_avatar(path, avatar, conf_net)
    return path


def train(dataset: Dataset, asset: bm.BodyModelAsset, config: TrainConfig | None = None, out_dir=None,
          avatar: GaussianAvatar | None = None, perceptual: PerceptualScorer | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Jointly optimise the Gaussians and the three networks on one identity."""
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    weights = config.loss_weights
    poses = [dataset.load_pose(i) for i in range(len(dataset))]
    for rec, pose in zip(dataset.frames, poses):
        check_pose(asset, pose, rec.name)
    images = [dataset.load_image(i) for i in range(len(dataset))]
    masks = [dataset.load_mask(i) for i in range(len(dataset))]
    if avatar is None:
        beta = np.mean([p.beta for p in poses], axis=0)
        avatar = init_from_model(asset, sh_degree=config.sh_degree, beta=beta, seed=config.seed)
    conf_net = make_confidence_net(np.random.default_rng(config.seed + 1))
    camera = dataset.camera
    background = np.full(3, config.background)
    extent = scene_extent(asset, avatar.beta)
    state = DensifyState.for_count(len(avatar.gaussians), R=config.densify_interval,
                                   adaptive=config.adaptive_density,
                                   max_gaussians=config.max_gaussians or None)
    densify_rng = np.random.default_rng(config.seed + 2)
    adam = Adam()
    losses, log_rows, densify_rows, counts = [], [], [], [len(avatar.gaussians)]
    gaussian_keys = [f"g.{f}" for f in GaussianSet.PARAMS]

    for it in range(config.iterations):
        idx = int(rng.integers(len(dataset)))
        name = dataset.frames[idx].name
        gs = avatar.gaussians
        step = frame_step(avatar, asset, conf_net, poses[idx], camera, images[idx], masks[idx], weights,
                          background, perceptual)
        loss, out, rg, grads = step.loss, step.render, step.raster_grads, step.grads
        if not (np.isfinite(loss.value) and step.valid):
            ck = _checkpoint(out_dir, avatar, conf_net)
            raise NumericalError(f"non-finite loss at iteration {it} on frame {name}", name, ck)

        adam.tick()
        adam.step("g.centers", gs.centers, grads.centers, _position_lr(config, it, extent))
        adam.step("g.rotations", gs.rotations, grads.rotations, config.lr_rotation)
        adam.step("g.log_scales", gs.log_scales, grads.log_scales, config.lr_scale)
        adam.step("g.opacity_logits", gs.opacity_logits, grads.opacity_logits, config.lr_opacity)
        # higher SH bands use a 20x smaller rate
        sh_lr = np.full((1, gs.sh.shape[1], 1), config.lr_sh / 20.0)
        sh_lr[0, 0, 0] = config.lr_sh
        adam.step("g.sh", gs.sh, grads.sh, sh_lr)
        for net_name, net, g in (("lbs", avatar.lbs_net, grads.lbs_net), ("pose", avatar.pose_net, grads.pose_net),
                                 ("conf", conf_net, grads.confidence_net)):
            for k, (p, gp) in enumerate(zip(net.params(), g)):
                adam.step(f"{net_name}.{k}", p, gp, config.lr_nets)
        losses.append(float(loss.value))

        in_window = config.densify_start <= it < config.densify_end
        if in_window:
            visible = np.zeros(len(gs), dtype=bool)
            visible[out.cache.point_list] = True
            record_gradients(state, rg.mean2d_norm, it, visible, grads.centers)
            if (it + 1 - config.densify_start) % config.densify_interval == 0 and it + 1 < config.densify_end:
                report = densify_and_prune(avatar, state, asset, densify_rng, extent)
                adam.remap(gaussian_keys, report.sources, report.created)
                densify_rows += report.rows(it + 1)
                log.info("iteration %d: densify -> %d Gaussians", it + 1, report.live)
        counts.append(len(avatar.gaussians))
        if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
            p = loss.parts
            log_rows.append([it, name, loss.value, p.confidence_l1, p.mask, p.ssim_term, p.perceptual,
                             len(avatar.gaussians)])
            log.debug("iteration %d frame %s loss %.6f", it, name, loss.value)
        if callback is not None:
            callback(it, float(loss.value))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_avatar(out_dir / "avatar", avatar, conf_net)
        with open(out_dir / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "frame", "loss", "confidence_l1", "mask", "one_minus_ssim", "perceptual",
                        "gaussians"])
            w.writerows([[r[0], r[1], *(f"{v:.10g}" for v in r[2:7]), r[7]] for r in log_rows])
        with open(out_dir / "densify_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "part", "splits", "clones", "prunes", "live"])
            w.writerows(densify_rows)
    return TrainResult(avatar, conf_net, losses, log_rows, densify_rows, counts)


# ---------------------------------------------------------------------------
# evaluation


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) for unit-range images, capped at 99 dB."""
    mse = float(np.mean((np.asarray(rendered, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class RegionBoxes:
    """Pixel rectangles (x0, y0, x1, y1), end-exclusive; ``empty`` flags regions that are off-screen."""

    boxes: dict[str, tuple[int, int, int, int]]
    empty: dict[str, bool] = field(default_factory=dict)

    def crop(self, image: np.ndarray, region: str) -> np.ndarray:
        x0, y0, x1, y1 = self.boxes[region]
        return image[y0:y1, x0:x1]


def region_boxes(asset: bm.BodyModelAsset, pose: FramePose, camera: Camera, padding: float = 0.1) -> RegionBoxes:
    """Bounds of the projected posed vertices of each part, padded by a fraction of their size."""
    posed = bm.pose_body(asset, pose.theta, pose.beta, pose.psi, pose.translation)
    uv, depth = camera.project_points(posed.vertices)
    front = depth > camera.near
    boxes, empty = {}, {}
    for region in REGIONS:
        sel = front if region == "full" else front & (asset.part_labels == bm.PART_INDEX[region])
        pts = uv[sel]
        on = (pts[:, 0] >= 0) & (pts[:, 0] < camera.width) & (pts[:, 1] >= 0) & (pts[:, 1] < camera.height)
        if not on.any():
            boxes[region] = (0, 0, 0, 0)
            empty[region] = True
            continue
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = padding * (hi - lo)
        lo, hi = lo - pad, hi + pad
        x0 = int(max(0, math.floor(lo[0])))
        y0 = int(max(0, math.floor(lo[1])))
        x1 = int(min(camera.width, math.ceil(hi[0]) + 1))
        y1 = int(min(camera.height, math.ceil(hi[1]) + 1))
        boxes[region] = (x0, y0, x1, y1)
        empty[region] = x1 <= x0 or y1 <= y0
    return RegionBoxes(boxes, empty)


@dataclass
class EvalResult:
    rows: list[dict]  # per frame and region
    summary: dict  # region -> {"psnr", "ssim", "frames", ...}
    skipped: list[str]

    def write_csv(self, path) -> None:
        keys = ["frame", "region", "psnr", "ssim"] + (["perceptual"] if any("perceptual" in r for r in self.rows)
                                                      else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([r[k] if isinstance(r[k], str) else f"{r[k]:.10g}" for k in keys])
            for region, s in self.summary.items():
                w.writerow(["mean", region] + [f"{s[k]:.10g}" for k in keys[2:]])


def evaluate(avatar: GaussianAvatar, asset: bm.BodyModelAsset, dataset: Dataset, regions: bool = True,
             perceptual: PerceptualScorer | None = None, background: float = 0.0) -> EvalResult:
    """PSNR and SSIM per test frame on the full image and on hand/face boxes."""
    rows, skipped = [], []
    bg = np.full(3, background)
    for i, rec in enumerate(dataset.frames):
        pose = dataset.load_pose(i)
        target = dataset.load_image(i)
        out, _, _ = render_avatar(avatar, asset, pose, dataset.camera, bg)
        boxes = region_boxes(asset, pose, dataset.camera) if regions else None
        for region in (REGIONS if regions else ("full",)):
            if region == "full":
                a, b = out.color, target
            else:
                if boxes.empty[region]:
                    skipped.append(f"{rec.name}:{region}")
                    log.warning("frame %s: %s region is empty; skipped", rec.name, region)
                    continue
                a, b = boxes.crop(out.color, region), boxes.crop(target, region)
            row = {"frame": rec.name, "region": region, "psnr": psnr(a, b), "ssim": ssim(a, b)}
            if perceptual is not None:
                row["perceptual"] = float(perceptual(a, b)[0])
            rows.append(row)
    summary = {}
    for region in REGIONS:
        sel = [r for r in rows if r["region"] == region]
        if sel:
            summary[region] = {k: float(np.mean([r[k] for r in sel])) for k in sel[0] if k not in ("frame", "region")}
            summary[region]["frames"] = len(sel)
    return EvalResult(rows, summary, skipped)


# ---------------------------------------------------------------------------
# synthetic fixture


SYNTH_CAMERA = dict(fx=160.0, fy=160.0, cx=64.0, cy=64.0, width=128, height=128)
SYNTH_TRANSLATION = np.array([-0.35, 0.0, 1.3])


def ground_truth_avatar(asset: bm.BodyModelAsset, seed: int = 0) -> GaussianAvatar:
    """Template Gaussians with smooth colour bands and high opacity."""
    avatar = init_from_model(asset, sh_degree=0, seed=seed)
    gs = avatar.gaussians
    c = gs.centers
    ang = np.arctan2(c[:, 2], c[:, 1])
    color = np.stack([
        0.5 + 0.3 * np.cos(2 * np.pi * c[:, 0] / 0.35),
        0.5 + 0.25 * np.sin(ang),
        0.45 + 0.3 * np.cos(2 * np.pi * c[:, 0] / 0.7 + 1.0) * np.cos(ang),
    ], axis=1)
    color[gs.parts == bm.PART_INDEX["hand"]] *= np.array([1.1, 0.85, 0.8])
    color[gs.parts == bm.PART_INDEX["face"]] *= np.array([0.8, 0.9, 1.15])
    gs.sh[:, 0, :] = (np.clip(color, 0.05, 0.95) - 0.5) / SH_C0
    gs.opacity_logits[:] = float(logit(0.95))
    return avatar


def synthetic_pose(rng: np.random.Generator, asset: bm.BodyModelAsset) -> FramePose:
    theta = np.zeros((asset.num_joints, 3))
    theta[0] = rng.uniform(-0.25, 0.25, 3)
    theta[1] = [rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.0, 0.7)]
    theta[2] = rng.uniform(-0.25, 0.25, 3)
    theta[3:] = rng.uniform(-0.25, 0.25, (asset.num_joints - 3, 3))
    return FramePose(theta.reshape(-1), np.zeros(asset.num_betas), np.zeros(asset.num_expressions),
                     SYNTH_TRANSLATION + rng.uniform(-0.03, 0.03, 3))


def make_synthetic_fixture(out_dir, seed: int = 0, n_train: int = 24, n_test: int = 8, size: int = 128,
                           detection_noise_px: float = 1.0) -> Dataset:
    """Write model, ground-truth avatar, rendered frames, masks, poses and detections."""
    from .align import write_detections
    from .synthetic import cylinder_arm_model, detections_from_pose

    out = Path(out_dir)
    for sub in ("images", "masks", "poses", "detections"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    asset = cylinder_arm_model()
    bm.save_model(asset, out / "model.json")
    gt = ground_truth_avatar(asset, seed)
    save_avatar(out / "gt_avatar", gt)
    s = size / 128.0
    camera = Camera(SYNTH_CAMERA["fx"] * s, SYNTH_CAMERA["fy"] * s, SYNTH_CAMERA["cx"] * s, SYNTH_CAMERA["cy"] * s,
                    size, size)
    rng = np.random.default_rng(seed)
    names = [f"{i:06d}" for i in range(n_train + n_test)]
    for name in names:
        pose = synthetic_pose(rng, asset)
        res, _, _ = render_avatar(gt, asset, pose, camera)
        write_png(out / "images" / f"{name}.png", res.color)
        write_png(out / "masks" / f"{name}.png", res.alpha)
        write_pose(out / "poses" / f"{name}.json", pose)
        det, _, _ = detections_from_pose(asset, pose, camera, detection_noise_px, rng)
        write_detections(out / "detections" / f"{name}.json", det)
    meta = {"camera": camera.to_dict(), "identity": "cylinder-arm",
            "splits": {"train": names[:n_train], "test": names[n_train:]}}
    (out / "camera.json").write_text(json.dumps(meta, indent=2))
    return load_dataset(out, "train", asset)
