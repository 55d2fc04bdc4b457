"""Pose keypoint ingestion, sequence normalization and the gallery/probe protocol."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import SkeletonLayout, build_layout

CONDITIONS = ("NM", "BG", "CL")
_NAME_RE = re.compile(r"^(?P<id>[^-/\\]+)-(?P<cond>nm|bg|cl)-(?P<seq>\d+)-(?P<view>[^-/\\]+)$", re.I)


class KeypointFormatError(ValueError):
    pass


class SequenceError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(eq=False)
class SkeletonSequence:
    """T x N x 3 keypoints (x, y, confidence) plus identity/condition/view metadata."""

    frames: np.ndarray
    identity: str
    condition: str = "NM"
    seq_index: int = 1
    view: int | str = 90
    missing: np.ndarray | None = None

    def __post_init__(self):
        f = np.array(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3:
            raise SequenceError(f"frames must be T x N x 3, got {f.shape}")
        if f.shape[0] < 1:
            raise SequenceError("a sequence needs at least one frame")
        c = f[..., 2]
        if np.any((c < 0) | (c > 1)) or not np.all(np.isfinite(f)):
            raise SequenceError("confidences must lie in [0, 1] and coordinates be finite")
        f[c == 0, :2] = 0.0
        self.frames = f
        self.condition = str(self.condition).upper()
        if self.condition not in CONDITIONS:
            raise SequenceError(f"unknown condition {self.condition!r}")
        self.seq_index = int(self.seq_index)
        if self.seq_index < 1:
            raise SequenceError("seq_index must be positive")
        if self.missing is None:
            self.missing = ~np.any(c > 0, axis=1)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def name(self) -> str:
        return sequence_name(self.identity, self.condition, self.seq_index, self.view)

    def to_network_input(self) -> np.ndarray:
        """[3, T, N] channel-first array."""
        return np.ascontiguousarray(self.frames.transpose(2, 0, 1))


def sequence_name(identity, condition, seq_index, view) -> str:
    view_txt = f"{view:03d}" if isinstance(view, (int, np.integer)) else str(view)
    return f"{identity}-{str(condition).lower()}-{int(seq_index):02d}-{view_txt}"


def parse_sequence_name(name: str) -> dict:
    """``001-nm-01-090`` -> identity, condition, seq_index, view."""
    m = _NAME_RE.match(name)
    if m is None:
        raise SequenceError(f"{name!r} does not follow <id>-<condition>-<seq>-<view>")
    view = m["view"]
    return {
        "identity": m["id"],
        "condition": m["cond"].upper(),
        "seq_index": int(m["seq"]),
        "view": int(view) if view.isdigit() else view,
    }


# ---------------------------------------------------------------- keypoint files


def parse_pose_keypoints(content, num_joints: int = 18) -> tuple[np.ndarray, bool]:
    """Parse one per-frame keypoint document.

    Returns the (N, 3) keypoints of the person with the highest summed
    confidence and a flag that is True when the frame had nobody in it.
    """
    if isinstance(content, (str, bytes, bytearray)):
        try:
            doc = json.loads(content)
        except json.JSONDecodeError as exc:
            raise KeypointFormatError(f"not valid JSON: {exc}") from None
    else:
        doc = content
    if not isinstance(doc, Mapping) or not isinstance(doc.get("people"), list):
        raise KeypointFormatError('expected an object with a "people" list')
    if not doc["people"]:
        return np.zeros((num_joints, 3)), True
    best, best_score = None, -math.inf
    for person in doc["people"]:
        flat = person.get("pose_keypoints_2d") if isinstance(person, Mapping) else None
        if not isinstance(flat, list):
            raise KeypointFormatError('person entry lacks a "pose_keypoints_2d" list')
        if len(flat) % 3 != 0:
            raise KeypointFormatError(f"keypoint list length {len(flat)} is not divisible by 3")
        if len(flat) != 3 * num_joints:
            raise KeypointFormatError(
                f"keypoint list has {len(flat) // 3} joints, layout expects {num_joints}"
            )
        try:
            kp = np.asarray(flat, dtype=np.float64).reshape(num_joints, 3)
        except (TypeError, ValueError):
            raise KeypointFormatError("keypoint list holds non-numeric values") from None
        if not np.all(np.isfinite(kp)):
            raise KeypointFormatError("keypoint list holds non-finite values")
        score = kp[:, 2].sum()
        if score > best_score:
            best, best_score = kp, score
    best = best.copy()
    best[:, 2] = np.clip(best[:, 2], 0.0, 1.0)
    best[best[:, 2] == 0, :2] = 0.0
    return best, False


def keypoints_document(frame: np.ndarray | None) -> dict:
    """Inverse of parse_pose_keypoints for a single person (None -> empty frame)."""
    if frame is None:
        return {"version": 1.3, "people": []}
    return {"version": 1.3, "people": [{"pose_keypoints_2d": [float(v) for v in np.asarray(frame).reshape(-1)]}]}


def _frame_key(path: Path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


def frame_files(seq_dir: str | Path) -> list[Path]:
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise SequenceError(f"sequence directory not found: {seq_dir}")
    return sorted(seq_dir.glob("*.json"), key=_frame_key)


def assemble_sequence(files: Sequence[str | Path] | str | Path, layout: SkeletonLayout | str = "coco18",
                      metadata: Mapping | None = None) -> SkeletonSequence:
    """Stack per-frame files into a sequence; fully missing head/tail frames are trimmed.

    ``files`` may be a sequence directory (metadata then comes from its name).
    """
    layout = build_layout(layout)
    if isinstance(files, (str, Path)):
        seq_dir = Path(files)
        files = frame_files(seq_dir)
        if metadata is None:
            metadata = parse_sequence_name(seq_dir.name)
    files = [Path(f) for f in files]
    if not files:
        raise SequenceError("no frame files given")
    if metadata is None:
        metadata = parse_sequence_name(files[0].parent.name)
    frames, missing = [], []
    for f in files:
        kp, miss = parse_pose_keypoints(f.read_text(), layout.num_joints)
        frames.append(kp)
        missing.append(miss or not np.any(kp[:, 2] > 0))
    missing = np.asarray(missing)
    present = np.flatnonzero(~missing)
    if present.size == 0:
        raise SequenceError(f"no usable frames in {files[0].parent}")
    lo, hi = present[0], present[-1] + 1
    return SkeletonSequence(
        np.stack(frames[lo:hi]),
        identity=str(metadata["identity"]),
        condition=metadata.get("condition", "NM"),
        seq_index=metadata.get("seq_index", 1),
        view=metadata.get("view", 90),
        missing=missing[lo:hi],
    )


def write_sequence(seq: SkeletonSequence, root: str | Path) -> Path:
    """Write one keypoint file per frame under ``root/<sequence name>/``."""
    out = Path(root) / seq.name
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        doc = keypoints_document(None if seq.missing[t] else frame)
        (out / f"{seq.name}_{t:012d}_keypoints.json").write_text(json.dumps(doc))
    return out


def load_dataset(root: str | Path, layout: SkeletonLayout | str = "coco18") -> list[SkeletonSequence]:
    """Load every ``<id>-<cond>-<seq>-<view>`` directory below ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise SequenceError(f"data directory not found: {root}")
    layout = build_layout(layout)
    seqs = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if _NAME_RE.match(d.name):
            seqs.append(assemble_sequence(d, layout))
    if not seqs:
        raise SequenceError(f"no sequence directories found in {root}")
    return seqs


# ---------------------------------------------------------------- normalization


def normalize_sequence(seq: SkeletonSequence, layout: SkeletonLayout | str = "coco18") -> SkeletonSequence:
    """Centre on the mean gravity-joint position and divide by the median skeleton height."""
    layout = build_layout(layout)
    f = seq.frames
    if f.shape[1] != layout.num_joints:
        raise SequenceError(f"sequence has {f.shape[1]} joints, layout {layout.num_joints}")
    present = f[..., 2] > 0
    g = layout.gravity_joint
    if not np.any(present[:, g]):
        raise SequenceError("gravity joint is absent in every frame")
    centre = f[present[:, g], g, :2].mean(axis=0)
    heights = []
    for t in range(f.shape[0]):
        ys = f[t, present[t], 1]
        if ys.size:
            heights.append(ys.max() - ys.min())
    height = float(np.median(heights))
    if not height > 0:
        raise SequenceError("median skeleton height is zero")
    out = np.zeros_like(f)
    out[..., 2] = f[..., 2]
    out[..., :2] = np.where(present[..., None], (f[..., :2] - centre) / height, 0.0)
    return replace(seq, frames=out, missing=seq.missing.copy())


# ---------------------------------------------------------------- protocol


def _id_key(label):
    s = str(label)
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


@dataclass(frozen=True)
class Selector:
    condition: str
    seq_indices: tuple[int, ...]

    def __call__(self, seq: SkeletonSequence) -> bool:
        return seq.condition == self.condition and seq.seq_index in self.seq_indices

    def __str__(self):
        return f"{self.condition} #{','.join(str(i) for i in self.seq_indices)}"


@dataclass(frozen=True)
class ProtocolSpec:
    """Identity split plus gallery/probe selectors; defaults mirror the CASIA-B setting."""

    num_train: int | None = None  # None -> first half of the sorted identities
    gallery: Selector = Selector("NM", (1, 2, 3, 4))
    probes: tuple[tuple[str, Selector], ...] = (
        ("NM", Selector("NM", (5, 6))),
        ("BG", Selector("BG", (1, 2))),
        ("CL", Selector("CL", (1, 2))),
    )


@dataclass
class DatasetProtocol:
    train_ids: list[str]
    test_ids: list[str]
    spec: ProtocolSpec
    train: list[SkeletonSequence] = field(default_factory=list)
    gallery: list[SkeletonSequence] = field(default_factory=list)
    probes: dict[str, list[SkeletonSequence]] = field(default_factory=dict)


def build_protocol(index: Iterable[SkeletonSequence], spec: ProtocolSpec | None = None) -> DatasetProtocol:
    spec = spec or ProtocolSpec()
    index = list(index)
    ids = sorted({s.identity for s in index}, key=_id_key)
    if len(ids) < 2:
        raise ProtocolError("need at least two identities to split train/test")
    n_train = len(ids) // 2 if spec.num_train is None else spec.num_train
    if not 0 < n_train < len(ids):
        raise ProtocolError(f"cannot put {n_train} of {len(ids)} identities in training")
    train_ids, test_ids = ids[:n_train], ids[n_train:]
    test_set = set(test_ids)
    by_id: dict[str, list[SkeletonSequence]] = {}
    for s in index:
        by_id.setdefault(s.identity, []).append(s)
    for pid in test_ids:
        have = {s.seq_index for s in by_id[pid] if s.condition == spec.gallery.condition}
        lacking = [i for i in spec.gallery.seq_indices if i not in have]
        if lacking:
            raise ProtocolError(
                f"test identity {pid} lacks gallery sequences {spec.gallery.condition} #{lacking}"
            )
    train = [s for s in index if s.identity in set(train_ids)]
    gallery = [s for s in index if s.identity in test_set and spec.gallery(s)]
    probes = {
        name: [s for s in index if s.identity in test_set and sel(s) and not spec.gallery(s)]
        for name, sel in spec.probes
    }
    return DatasetProtocol(train_ids, test_ids, spec, train, gallery, probes)


def sequence_plan(n_seqs: int) -> list[tuple[str, int]]:
    """Condition/index slots for ``n_seqs`` sequences per identity, gallery slots first."""
    order = [("NM", 1), ("NM", 2), ("NM", 3), ("NM", 4), ("NM", 5), ("BG", 1), ("CL", 1),
             ("NM", 6), ("BG", 2), ("CL", 2)]
    if not 1 <= n_seqs <= len(order):
        raise ValueError(f"sequences per identity must be in [1, {len(order)}], got {n_seqs}")
    return order[:n_seqs]
