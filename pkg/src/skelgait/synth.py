"""Sinusoidal stick-figure walkers on the coco18 layout.

Identity lives in limb proportions and gait dynamics; each sequence adds a
random start phase, small dynamic jitter and coordinate noise.  Not meant to
look like real gait, only to make identity a learnable function of motion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import SkeletonSequence, sequence_plan

MANIFEST_VERSION = 1
SYNTH_VIEW = 90
FACE_JOINTS = [0, 14, 15, 16, 17]
LIMBS = ("torso", "neck", "upper_arm", "forearm", "thigh", "shin")


@dataclass(frozen=True)
class WalkerParams:
    torso: float = 0.55
    neck: float = 0.2
    upper_arm: float = 0.3
    forearm: float = 0.27
    thigh: float = 0.45
    shin: float = 0.43
    shoulder_offset: float = 0.04
    hip_offset: float = 0.03
    head_forward: float = 0.04
    lean: float = 0.05
    frequency: float = 1 / 28  # gait cycles per frame
    hip_amplitude: float = 0.4
    knee_amplitude: float = 0.9
    knee_phase: float = 1.2
    arm_amplitude: float = 0.35
    arm_phase: float = 0.0
    elbow_flex: float = 0.25
    bob: float = 0.08
    phase: float = 0.0
    tilt: float = 0.0  # camera roll, radians
    aspect: float = 1.0  # horizontal / vertical image scale
    scale: float = 100.0

    def __post_init__(self):
        for name in LIMBS:
            if not getattr(self, name) > 0:
                raise ValueError(f"limb length {name} must be positive, got {getattr(self, name)}")
        if self.scale <= 0 or self.aspect <= 0:
            raise ValueError("scale and aspect must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WalkerParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in d.items() if k in known})


_IDENTITY_RANGES = {
    "torso": (0.45, 0.65),
    "neck": (0.15, 0.25),
    "upper_arm": (0.25, 0.36),
    "forearm": (0.22, 0.32),
    "thigh": (0.38, 0.52),
    "shin": (0.36, 0.5),
    "shoulder_offset": (0.0, 0.08),
    "hip_offset": (0.0, 0.06),
    "head_forward": (-0.02, 0.1),
    "lean": (-0.05, 0.15),
    "frequency": (1 / 34, 1 / 22),
    "hip_amplitude": (0.25, 0.55),
    "knee_amplitude": (0.5, 1.2),
    "knee_phase": (0.6, 1.8),
    "arm_amplitude": (0.1, 0.6),
    "arm_phase": (-0.4, 0.4),
    "elbow_flex": (0.05, 0.6),
    "bob": (0.03, 0.12),
}


def sample_identity(rng: np.random.Generator, spread: float = 1.0) -> WalkerParams:
    """Draw per-identity proportions and dynamics.

    ``spread`` shrinks every range about its midpoint (1 = full range).
    """
    values = {}
    for name, (lo, hi) in _IDENTITY_RANGES.items():
        mid, half = (lo + hi) / 2, spread * (hi - lo) / 2
        values[name] = float(rng.uniform(mid - half, mid + half))
    return WalkerParams(**values)


def sequence_variant(base: WalkerParams, rng: np.random.Generator, jitter: float = 0.03,
                     tilt: float = 0.0, aspect: float = 0.0) -> WalkerParams:
    """Per-recording variation: start phase, jitter on dynamics, camera roll and aspect."""
    def j(v):
        return float(v * (1.0 + rng.uniform(-jitter, jitter)))

    return replace(
        base,
        phase=float(rng.uniform(0.0, 2 * np.pi)),
        frequency=j(base.frequency),
        hip_amplitude=j(base.hip_amplitude),
        knee_amplitude=j(base.knee_amplitude),
        arm_amplitude=j(base.arm_amplitude),
        tilt=float(rng.uniform(-tilt, tilt)),
        aspect=float(1.0 + rng.uniform(-aspect, aspect)),
    )


def _walker_pose(p: WalkerParams, t: np.ndarray, condition: str) -> np.ndarray:
    """World coordinates (x forward, y up), shape (T, 18, 2)."""
    limb = 0.92 if condition == "CL" else 1.0
    upper_arm, forearm = p.upper_arm * limb, p.forearm * limb
    thigh, shin = p.thigh * limb, p.shin * limb
    phi = 2 * np.pi * p.frequency * t + p.phase
    speed = 4.0 * (p.thigh + p.shin) * np.sin(p.hip_amplitude) * p.frequency
    hip_c = np.stack([speed * t, p.thigh + p.shin + p.bob * p.hip_amplitude * np.cos(2 * phi)], axis=-1)
    up = np.array([np.sin(p.lean), np.cos(p.lean)])
    neck = hip_c + p.torso * up
    nose = neck + np.array([p.head_forward, p.neck])
    pts = np.zeros((len(t), 18, 2))
    pts[:, 0] = nose
    pts[:, 1] = neck
    pts[:, 14] = nose + [-0.02, 0.03]
    pts[:, 15] = nose + [-0.01, 0.035]
    pts[:, 16] = nose + [-0.1, 0.01]
    pts[:, 17] = nose + [-0.09, 0.015]

    arm_amp = {"r": p.arm_amplitude, "l": p.arm_amplitude}
    elbow_extra = {"r": 0.0, "l": 0.0}
    if condition == "BG":
        # right hand holds a bag: little swing, bent elbow
        arm_amp["r"] *= 0.25
        elbow_extra["r"] = 0.5

    for side, offset, (sh, el, wr), (hp, kn, an) in (
        ("r", 0.0, (2, 3, 4), (8, 9, 10)),
        ("l", np.pi, (5, 6, 7), (11, 12, 13)),
    ):
        sgn = 1.0 if side == "r" else -1.0
        shoulder = neck + np.array([sgn * p.shoulder_offset, -0.03])
        alpha = -arm_amp[side] * np.sin(phi + offset + p.arm_phase)
        beta = p.elbow_flex + elbow_extra[side] + 0.3 * arm_amp[side] * (1 + np.sin(phi + offset)) / 2
        elbow = shoulder + upper_arm * np.stack([np.sin(alpha), -np.cos(alpha)], axis=-1)
        wrist = elbow + forearm * np.stack([np.sin(alpha + beta), -np.cos(alpha + beta)], axis=-1)
        hip = hip_c + np.array([sgn * p.hip_offset, 0.0])
        theta = p.hip_amplitude * np.sin(phi + offset)
        kappa = p.knee_amplitude * (1 + np.sin(phi + offset + p.knee_phase)) / 2
        knee = hip + thigh * np.stack([np.sin(theta), -np.cos(theta)], axis=-1)
        ankle = knee + shin * np.stack([np.sin(theta - kappa), -np.cos(theta - kappa)], axis=-1)
        pts[:, sh], pts[:, el], pts[:, wr] = shoulder, elbow, wrist
        pts[:, hp], pts[:, kn], pts[:, an] = hip, knee, ankle
    return pts


def synth_walker(params: WalkerParams, num_frames: int, condition: str = "NM", seed: int = 0,
                 noise: float = 1.0, clothing_jitter: float = 2.0, occlusion: float = 0.0,
                 face_noise: float = 0.0, identity: str = "000",
                 seq_index: int = 1) -> SkeletonSequence:
    """Render one walking sequence in image coordinates (pixels, y down).

    ``noise``, ``face_noise`` (extra, on nose/eyes/ears) and ``clothing_jitter``
    are standard deviations in pixels;
    ``occlusion`` is the per-(frame, joint) probability of a dropped joint.
    Only the noise, jitter and occlusion depend on ``seed``.
    """
    condition = condition.upper()
    if num_frames < 8:
        raise ValueError(f"synthetic walkers need at least 8 frames, got {num_frames}")
    if condition not in ("NM", "BG", "CL"):
        raise ValueError(f"unknown condition {condition!r}")
    rng = np.random.default_rng(seed)
    t = np.arange(num_frames, dtype=np.float64)
    world = _walker_pose(params, t, condition)
    c, s = np.cos(params.tilt), np.sin(params.tilt)
    wx, wy = world[..., 0], world[..., 1]
    xy = np.empty_like(world)
    xy[..., 0] = 120.0 + params.scale * params.aspect * (c * wx - s * wy)
    xy[..., 1] = 400.0 - params.scale * (s * wx + c * wy)
    xy += rng.normal(0.0, 1.0, size=xy.shape) * noise
    if face_noise > 0:
        xy[:, FACE_JOINTS] += rng.normal(0.0, 1.0, size=(num_frames, len(FACE_JOINTS), 2)) * face_noise
    if condition == "CL":
        xy += rng.normal(0.0, 1.0, size=(num_frames, 1, 2)) * clothing_jitter
    conf = np.ones(xy.shape[:2])
    if occlusion > 0:
        drop = rng.random(conf.shape) < occlusion
        conf[drop] = 0.0
        xy[drop] = 0.0
    frames = np.concatenate([np.round(xy, 3), conf[..., None]], axis=-1)
    return SkeletonSequence(frames, identity=identity, condition=condition,
                            seq_index=seq_index, view=SYNTH_VIEW)


@dataclass(frozen=True)
class SynthConfig:
    num_ids: int = 16
    seqs_per_id: int = 8
    min_frames: int = 50
    max_frames: int = 80
    noise: float = 1.0
    clothing_jitter: float = 2.0
    occlusion: float = 0.0
    face_noise: float = 4.0
    spread: float = 0.75
    jitter: float = 0.03
    tilt: float = 0.0
    aspect: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 1:
            raise ValueError("at least one identity is required")
        sequence_plan(self.seqs_per_id)
        if not 8 <= self.min_frames <= self.max_frames:
            raise ValueError("need 8 <= min_frames <= max_frames")


def make_manifest(cfg: SynthConfig) -> dict:
    """Every per-sequence parameter record and seed needed to regenerate the dataset."""
    rng = np.random.default_rng(cfg.seed)
    records = []
    for k in range(cfg.num_ids):
        identity = f"{k + 1:03d}"
        base = sample_identity(rng, cfg.spread)
        for cond, idx in sequence_plan(cfg.seqs_per_id):
            params = sequence_variant(base, rng, cfg.jitter, cfg.tilt, cfg.aspect)
            records.append({
                "identity": identity,
                "condition": cond,
                "seq_index": idx,
                "view": SYNTH_VIEW,
                "num_frames": int(rng.integers(cfg.min_frames, cfg.max_frames + 1)),
                "seed": int(rng.integers(0, 2**63 - 1)),
                "params": params.to_dict(),
            })
    return {
        "version": MANIFEST_VERSION,
        "generator": asdict(cfg),
        "sequences": records,
    }


def generate_from_manifest(manifest: dict) -> list[SkeletonSequence]:
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')!r}")
    gen = manifest["generator"]
    seqs = []
    for rec in manifest["sequences"]:
        seqs.append(synth_walker(
            WalkerParams.from_dict(rec["params"]),
            rec["num_frames"],
            rec["condition"],
            seed=rec["seed"],
            noise=gen["noise"],
            clothing_jitter=gen["clothing_jitter"],
            occlusion=gen["occlusion"],
            face_noise=gen.get("face_noise", 0.0),
            identity=rec["identity"],
            seq_index=rec["seq_index"],
        ))
    return seqs


def generate_dataset(cfg: SynthConfig | None = None) -> tuple[list[SkeletonSequence], dict]:
    manifest = make_manifest(cfg or SynthConfig())
    return generate_from_manifest(manifest), manifest


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
