"""Random small scenes for end-to-end gradient checks."""

import numpy as np

from gsavatar.avatar import FramePose, init_from_model
from gsavatar.nets import make_confidence_net
from gsavatar.objectives import LossParts, LossWeights, confidence_l1, log_confidence_penalty, mask_loss, ssim, total_loss
from gsavatar.pipeline import frame_step, render_avatar
from gsavatar.rasterizer import Camera

GROUPS = ("centers", "rotations", "log_scales", "opacity_logits", "sh", "lbs_net", "pose_net", "confidence_net")


def random_scene(asset, rng, n_gaussians=24, size=8, sh_degree=1):
    avatar = init_from_model(asset, sh_degree=sh_degree, seed=int(rng.integers(1 << 30)))
    keep = np.sort(rng.choice(asset.num_vertices, n_gaussians, replace=False))
    gs = avatar.gaussians.subset(keep)
    gs.centers = gs.centers + 0.01 * rng.normal(size=gs.centers.shape)
    q = rng.normal(size=(n_gaussians, 4))
    gs.rotations = q / np.linalg.norm(q, axis=1, keepdims=True)
    gs.log_scales = np.log(rng.uniform(0.02, 0.06, size=(n_gaussians, 3)))
    gs.opacity_logits = rng.normal(0.5, 1.0, size=n_gaussians)
    gs.sh = 0.3 * rng.normal(size=gs.sh.shape)
    avatar.gaussians = gs
    # soft base weights keep the skinning softmax away from saturation, so the lbs net has a visible effect
    avatar.base_weights = rng.dirichlet(np.ones(asset.num_joints), size=n_gaussians)
    for net, scale in ((avatar.lbs_net, 0.3), (avatar.pose_net, 0.3)):
        net.weights[-1][...] = scale * rng.normal(size=net.weights[-1].shape) / np.sqrt(net.weights[-1].shape[0])
    conf = make_confidence_net(rng)
    conf.weights[-1][...] = 0.3 * rng.normal(size=conf.weights[-1].shape)
    # zero biases would put background pixels (all-zero features) exactly on a ReLU kink
    for net in (avatar.lbs_net, avatar.pose_net, conf):
        for b in net.biases:
            b[...] = 0.1 * rng.normal(size=b.shape)
    pose = FramePose(0.25 * rng.normal(size=3 * asset.num_joints), np.zeros(asset.num_betas),
                     0.1 * rng.normal(size=asset.num_expressions), np.array([-0.3, 0.0, 1.3]) + 0.03 * rng.normal(size=3))
    camera = Camera(fx=12.0, fy=12.0, cx=size / 2, cy=size / 2, width=size, height=size)
    target = rng.uniform(0, 1, size=(size, size, 3))
    mask = (rng.uniform(size=(size, size)) > 0.5).astype(np.float64)
    weights = LossWeights(log_confidence=0.1)
    return avatar, conf, pose, camera, target, mask, weights


def group_arrays(avatar, conf, group):
    if group in ("lbs_net", "pose_net"):
        return getattr(avatar, group).params()
    if group == "confidence_net":
        return conf.params()
    return [getattr(avatar.gaussians, group)]


def _relu_pattern(cache):
    return b"".join((h > 0).tobytes() for h in cache[1][1:])


def render_structure(out, art, ccache, target, mask, conf_cache=None):
    """Discrete state of a frame: everything at which the loss is only piecewise smooth.

    Per-pixel contributing sets, depth order, termination index, ReLU patterns,
    the colour clamp, and the signs of the L1 residuals.
    """
    c = out.cache
    ys, xs = np.mgrid[0:c.height, 0:c.width]
    dx = xs.reshape(-1, 1) - c.mean2d[None, :, 0]
    dy = ys.reshape(-1, 1) - c.mean2d[None, :, 1]
    q = c.conics[None, :, 0] * dx * dx + 2 * c.conics[None, :, 1] * dx * dy + c.conics[None, :, 2] * dy * dy
    order = np.lexsort((np.arange(c.depths.size), c.depths))
    parts = [(q <= 9.0).tobytes(), order.tobytes(), c.last.tobytes(), out.projection.valid.tobytes(),
             _relu_pattern(art._cache["lbs"]), (ccache.raw > 0).tobytes(),
             np.sign(out.color - target).tobytes(), np.sign(out.alpha - mask).tobytes()]
    if conf_cache is not None:
        parts.append(_relu_pattern(conf_cache))
    return b"".join(parts)


def detached_loss(avatar, asset, pose, camera, target, mask, weights, C):
    """Training loss with the confidence map held fixed, as the stop-gradient prescribes."""
    out, art, ccache = render_avatar(avatar, asset, pose, camera, np.zeros(3))
    parts = LossParts(confidence_l1(C, out.color, target), mask_loss(out.alpha, mask), 1.0 - ssim(out.color, target))
    value = total_loss(parts, weights) + weights.log_confidence * log_confidence_penalty(C)
    return value, render_structure(out, art, ccache, target, mask)


def directional_check(asset, scene, rng, h=1e-5, max_redraws=20):
    """Relative error of analytic vs central-difference directional derivative, per group.

    Returns (errors, redraws, kinked).  A direction whose stencil changes the discrete
    render structure straddles a cutoff discontinuity and is redrawn.  ``kinked`` lists
    groups for which no direction within ``max_redraws`` kept the structure fixed, i.e.
    the base point itself lies within h of a kink and the central difference is not a
    derivative estimate there.
    """
    avatar, conf, pose, camera, target, mask, weights = scene
    bg = np.zeros(3)
    step = frame_step(avatar, asset, conf, pose, camera, target, mask, weights, bg)
    C0 = step.loss.confidence.C.copy()
    _, art, ccache = render_avatar(avatar, asset, pose, camera, bg)
    base = render_structure(step.render, art, ccache, target, mask)
    conf_base = _relu_pattern(step.loss.confidence._cache)
    out, redraws, kinked = {}, 0, []
    for group in GROUPS:
        arrays = group_arrays(avatar, conf, group)
        grads = getattr(step.grads, group)
        grads = grads if isinstance(grads, list) else [grads]

        def value(dirs, sign):
            for a, d in zip(arrays, dirs):
                a += sign * h * d
            if group == "confidence_net":
                st = frame_step(avatar, asset, conf, pose, camera, target, mask, weights, bg)
                v = st.loss.value, base if _relu_pattern(st.loss.confidence._cache) == conf_base else b""
            else:
                v = detached_loss(avatar, asset, pose, camera, target, mask, weights, C0)
            for a, d in zip(arrays, dirs):
                a -= sign * h * d
            return v

        for _ in range(max_redraws):
            dirs = [rng.normal(size=a.shape) for a in arrays]
            norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
            dirs = [d / norm for d in dirs]
            (fp, sp), (fm, sm) = value(dirs, 1.0), value(dirs, -1.0)
            if sp == base and sm == base:
                break
            redraws += 1
        else:
            kinked.append(group)
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        numeric = (fp - fm) / (2 * h)
        out[group] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
    return out, redraws, kinked
