"""Synthetic "cylinder-arm" body model used as the test and fixture asset.

Five joints (root, elbow, wrist and two fingers) drive a tube-shaped arm with
two finger tubes.  Vertices near the root cap are labelled ``face`` so every
part label is exercised; the wrist region and fingers are ``hand``.
"""

from __future__ import annotations

import numpy as np

from .bodymodel import PART_INDEX, BodyModelAsset

ARM_RADIUS = 0.045
FINGER_RADIUS = 0.012
ROOT_X, ELBOW_X, WRIST_X, FINGER_X, TIP_X = 0.0, 0.28, 0.50, 0.56, 0.70
FINGER_Y = 0.021
FACE_END_X = 0.06
HAND_START_X = 0.47

JOINT_NAMES = ("root", "elbow", "wrist", "finger_1", "finger_2")
PARENTS = np.array([-1, 0, 1, 2, 2])


def _ring(center_x, radius, segments, y0=0.0, z0=0.0):
    ang = 2 * np.pi * np.arange(segments) / segments
    return np.stack([np.full(segments, center_x), y0 + radius * np.cos(ang), z0 + radius * np.sin(ang)], axis=1)


def _tube_faces(start, rings, segments):
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a = start + r * segments + s
            b = start + r * segments + (s + 1) % segments
            c = a + segments
            d = b + segments
            faces.append((a, b, d))
            faces.append((a, d, c))
    return faces


def _ramp(x, lo, hi):
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def cylinder_arm_model(arm_rings: int = 22, arm_segments: int = 20, finger_rings: int = 7,
                       finger_segments: int = 10, seed: int = 7) -> BodyModelAsset:
    """Build the bundled synthetic articulated model (about 600 vertices)."""
    rng = np.random.default_rng(seed)
    verts, faces, finger_id = [], [], []
    xs = np.linspace(ROOT_X, FINGER_X, arm_rings)
    for x in xs:
        verts.append(_ring(x, ARM_RADIUS, arm_segments))
        finger_id.extend([-1] * arm_segments)
    faces += _tube_faces(0, arm_rings, arm_segments)
    for f, y0 in enumerate((FINGER_Y, -FINGER_Y)):
        start = sum(len(v) for v in verts)
        for x in np.linspace(FINGER_X, TIP_X, finger_rings):
            verts.append(_ring(x, FINGER_RADIUS, finger_segments, y0=y0))
            finger_id.extend([f] * finger_segments)
        faces += _tube_faces(start, finger_rings, finger_segments)
    # caps: root-end centre and both fingertip centres
    caps = np.array([[ROOT_X - 0.01, 0.0, 0.0], [TIP_X + 0.006, FINGER_Y, 0.0], [TIP_X + 0.006, -FINGER_Y, 0.0]])
    verts.append(caps)
    finger_id.extend([-1, 0, 1])
    v = np.concatenate(verts, axis=0)
    finger_id = np.array(finger_id)
    n = v.shape[0]
    x = v[:, 0]

    # skinning: smooth ramps along the tube centred on the regressed joints
    elbow_x = xs[np.argmin(np.abs(xs - ELBOW_X))]
    wrist_x = xs[np.argmin(np.abs(xs - WRIST_X))]
    w = np.zeros((n, 5))
    to_elbow = _ramp(x, elbow_x - 0.04, elbow_x + 0.04)
    to_wrist = _ramp(x, wrist_x - 0.03, wrist_x + 0.03)
    arm = finger_id < 0
    w[arm, 0] = 1.0 - to_elbow[arm]
    w[arm, 1] = to_elbow[arm] * (1.0 - to_wrist[arm])
    w[arm, 2] = to_elbow[arm] * to_wrist[arm]
    for f in (0, 1):
        sel = finger_id == f
        t = _ramp(x[sel], FINGER_X, FINGER_X + 0.03)
        w[sel, 2] = 1.0 - t
        w[sel, 3 + f] = t

    # joint regressor: mean of the ring closest to each joint
    jreg = np.zeros((5, n))
    for j, jx in enumerate((ROOT_X, ELBOW_X, WRIST_X)):
        r = int(np.argmin(np.abs(xs - jx)))
        jreg[j, r * arm_segments:(r + 1) * arm_segments] = 1.0 / arm_segments
    for f in (0, 1):
        start = arm_rings * arm_segments + f * finger_rings * finger_segments
        jreg[3 + f, start:start + finger_segments] = 1.0 / finger_segments

    radial = np.zeros_like(v)
    radial[:, 1:] = v[:, 1:]
    radial[finger_id == 0, 1] -= FINGER_Y
    radial[finger_id == 1, 1] += FINGER_Y
    forearm = ((x > ELBOW_X) & (x < WRIST_X)).astype(float)
    shape = np.zeros((n, 3, 4))
    shape[:, :, 0] = radial * 0.5  # overall thickness
    shape[:, 0, 1] = 0.1 * x  # limb length
    shape[:, :, 2] = radial * forearm[:, None]  # forearm thickness
    shape[:, 0, 3] = np.where(finger_id >= 0, 0.3 * (x - FINGER_X), 0.0)  # finger length

    face = x <= FACE_END_X
    bulge = np.exp(-((x - 0.0) / 0.03) ** 2) * face
    expr = np.zeros((n, 3, 2))
    expr[:, :, 0] = radial * bulge[:, None] * 0.4
    expr[:, 0, 1] = -0.01 * bulge

    # small smooth pose correctives localised around each non-root joint
    pose_basis = np.zeros((n, 3, 36))
    joint_x = [ELBOW_X, WRIST_X, FINGER_X, FINGER_X]
    for j in range(4):
        near = np.exp(-((x - joint_x[j]) / 0.04) ** 2)
        if j >= 2:
            near = near * (finger_id == j - 2)
        coef = rng.normal(scale=2e-3, size=(3, 9))
        pose_basis[:, :, 9 * j:9 * j + 9] = near[:, None, None] * coef[None]

    parts = np.full(n, PART_INDEX["body"], dtype=np.int64)
    parts[x >= HAND_START_X] = PART_INDEX["hand"]
    parts[face] = PART_INDEX["face"]

    top_of = lambda px: int(np.argmin(np.linalg.norm(v - np.array([px, 0.0, ARM_RADIUS]), axis=1)))  # noqa: E731
    side_of = lambda px: int(np.argmin(np.linalg.norm(v - np.array([px, ARM_RADIUS, 0.0]), axis=1)))  # noqa: E731
    landmarks = {
        "fingertip_1": n - 2,
        "fingertip_2": n - 1,
        "face_centre": n - 3,
        "face_top": top_of(0.02),
        "elbow_top": top_of(ELBOW_X),
        "upper_side": side_of(0.15),
        "forearm_side": side_of(0.40),
    }
    return BodyModelAsset(
        template_vertices=v,
        faces=np.array(faces, dtype=np.int64),
        skin_weights=w,
        joint_regressor=jreg,
        parents=PARENTS.copy(),
        shape_basis=shape,
        expression_basis=expr,
        pose_basis=pose_basis,
        part_labels=parts,
        units="m",
        joint_names=JOINT_NAMES,
        joint_parts=np.array([0, 0, 0, 1, 1], dtype=np.int64),
        landmark_vertices=np.array(list(landmarks.values()), dtype=np.int64),
        landmark_names=tuple(landmarks),
    )


# ---------------------------------------------------------------------------
# fitting scenarios

FIT_CAMERA = dict(fx=600.0, fy=600.0, cx=256.0, cy=256.0, width=512, height=512)
FIT_TRANSLATION = np.array([-0.3, 0.0, 1.5])


def fit_camera():
    from .rasterizer import Camera

    return Camera(**FIT_CAMERA)


def random_arm_pose(rng: np.random.Generator, asset: BodyModelAsset, finger_range: float = 0.3):
    """Plausible pose: mild global rotation, bent elbow, small wrist and finger motion."""
    from .avatar import FramePose

    theta = np.zeros((asset.num_joints, 3))
    theta[0] = rng.uniform(-0.3, 0.3, 3)
    theta[1] = [rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3), rng.uniform(0.2, 1.0)]
    theta[2] = rng.uniform(-0.3, 0.3, 3)
    theta[3:] = rng.uniform(-finger_range, finger_range, (asset.num_joints - 3, 3))
    beta = np.zeros(asset.num_betas)
    return FramePose(theta.reshape(-1), beta, np.zeros(asset.num_expressions),
                     FIT_TRANSLATION + rng.uniform(-0.05, 0.05, 3))


def detections_from_pose(asset: BodyModelAsset, pose, camera, noise_px: float = 0.0,
                         rng: np.random.Generator | None = None):
    """Pseudo detections: noisy projected keypoints plus exact 3D body and hand keypoints."""
    from . import bodymodel as bm
    from .align import FrameDetections, KeypointLayout, project_keypoints

    rng = np.random.default_rng(0) if rng is None else rng
    layout = KeypointLayout.from_asset(asset)
    kp = bm.keypoints(asset, bm.pose_body(asset, pose.theta, pose.beta, pose.psi, pose.translation))
    uv, _, _ = project_keypoints(kp, camera)
    clean = np.concatenate([uv, np.ones((uv.shape[0], 1))], axis=1)
    noisy = clean.copy()
    noisy[:, :2] += rng.normal(scale=noise_px, size=uv.shape) if noise_px > 0 else 0.0
    det = FrameDetections(noisy, camera, kp[layout.body3d].copy(), kp[layout.hand3d].copy())
    return det, clean, kp


def depth_ambiguous_hand_scenario(flex: float = 0.6):
    """Fingers flexed towards the camera; the returned initialisation flexes them away.

    Both configurations project to nearly the same 2D keypoints, so 2D evidence
    alone cannot resolve the depth ordering of the hand.
    """
    from .align import FrameParams, KeypointLayout, LinearPriorDecoder

    asset = cylinder_arm_model()
    camera = fit_camera()
    layout = KeypointLayout.from_asset(asset)
    decoder = LinearPriorDecoder.random(3 * layout.body_joints.size, 32)
    theta = np.zeros((asset.num_joints, 3))
    theta[1] = [0.0, 0.0, 0.4]
    theta[layout.free_joints] = [0.0, flex, 0.0]  # +y rotation moves the tips towards -z
    from .avatar import FramePose

    pose = FramePose(theta.reshape(-1), np.zeros(asset.num_betas), np.zeros(asset.num_expressions),
                     FIT_TRANSLATION.copy())
    det, _, kp = detections_from_pose(asset, pose, camera)
    mirrored = theta.copy()
    mirrored[layout.free_joints] = [0.0, -flex, 0.0]
    init = FrameParams(theta[layout.root].copy(), pose.translation.copy(),
                       decoder.encode(theta[layout.body_joints].reshape(-1)),
                       mirrored[layout.free_joints].reshape(-1), np.zeros(asset.num_expressions))
    return asset, decoder, det, init, kp
