"""Sensor geometry, domain types and tactile-image layout.

The hand carries 15 pads of 4x4 taxels, each reporting a 3-axis force. Pads
are ordered finger 0..3, base to tip, with fingers 0-2 owning four pads and
the thumb (finger 3) owning three. Every array helper in this module accepts
arbitrary leading batch dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

N_PADS = 15
PAD_ROWS = 4
PAD_COLS = 4
N_AXES = 3
TACTILE_SHAPE = (N_PADS, PAD_ROWS, PAD_COLS, N_AXES)
TACTILE_DIM = N_PADS * PAD_ROWS * PAD_COLS * N_AXES  # 720
IMAGE_SIZE = 16
IMAGE_SHAPE = (N_AXES, IMAGE_SIZE, IMAGE_SIZE)
N_JOINTS = 16
N_FINGERTIPS = 4
ACTION_DIM = 3 + 4 + N_JOINTS  # 23

# (finger, slot) for each pad; slot 0 is the base of the finger
PAD_FINGER = np.array([0] * 4 + [1] * 4 + [2] * 4 + [3] * 3)
PAD_SLOT = np.array([0, 1, 2, 3] * 3 + [0, 1, 2])

QUAT_TOL = 1e-6
# optional per-frame extras kept in Trajectory.meta and in the file format
FRAME_META_KEYS = ("q_des", "qd", "phase")


class DataError(ValueError):
    """Input data violates a domain invariant."""


def _as_pads(pads) -> np.ndarray:
    arr = np.asarray(pads, dtype=np.float64)
    if arr.shape[-4:] != TACTILE_SHAPE:
        raise DataError(f"tactile reading must end in shape {TACTILE_SHAPE}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class TactileFrame:
    """One 720-value tactile reading, shape (15, 4, 4, 3)."""

    pads: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pads, dtype=np.float64)
        if arr.shape != TACTILE_SHAPE:
            raise DataError(f"TactileFrame needs shape {TACTILE_SHAPE}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("TactileFrame contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "pads", arr)

    @classmethod
    def zeros(cls) -> "TactileFrame":
        return cls(np.zeros(TACTILE_SHAPE))

    def flat(self) -> np.ndarray:
        return self.pads.reshape(TACTILE_DIM)


def _check_quat(q: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > QUAT_TOL):
        raise DataError(f"{what} quaternion is not unit norm (|q|={norms})")


@dataclass(frozen=True)
class RobotState:
    ee_pos: np.ndarray  # (3,) meters
    ee_quat: np.ndarray  # (4,) unit quaternion
    joints: np.ndarray  # (16,) radians
    fingertips: np.ndarray  # (4, 3) meters

    def __post_init__(self):
        for name, shape in (("ee_pos", (3,)), ("ee_quat", (4,)), ("joints", (N_JOINTS,)),
                            ("fingertips", (N_FINGERTIPS, 3))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"RobotState.{name} needs shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        _check_quat(self.ee_quat, "RobotState")


@dataclass(frozen=True)
class Action:
    """Absolute arm pose plus 16 hand joint targets (23 scalars)."""

    ee_pos: np.ndarray
    ee_quat: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        for name, shape in (("ee_pos", (3,)), ("ee_quat", (4,)), ("joints", (N_JOINTS,))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"Action.{name} needs shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        _check_quat(self.ee_quat, "Action")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.ee_pos, self.ee_quat, self.joints])

    @classmethod
    def from_vector(cls, vec) -> "Action":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (ACTION_DIM,):
            raise DataError(f"action vector must have {ACTION_DIM} entries, got {vec.shape}")
        return cls(vec[:3], vec[3:7], vec[7:])


@dataclass
class Trajectory:
    """Columnar storage of a time-ordered episode.

    ``visual`` and ``actions`` are either present for every frame or absent.
    """

    t: np.ndarray  # (N,)
    tactile: np.ndarray  # (N, 15, 4, 4, 3)
    ee_pos: np.ndarray  # (N, 3)
    ee_quat: np.ndarray  # (N, 4)
    joints: np.ndarray  # (N, 16)
    fingertips: np.ndarray  # (N, 4, 3)
    visual: Optional[np.ndarray] = None  # (N, D)
    actions: Optional[np.ndarray] = None  # (N, 23)
    meta: Optional[dict] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        n = len(self.t)
        self.tactile = _as_pads(self.tactile).reshape((n,) + TACTILE_SHAPE)
        self.ee_pos = np.asarray(self.ee_pos, dtype=np.float64).reshape(n, 3)
        self.ee_quat = np.asarray(self.ee_quat, dtype=np.float64).reshape(n, 4)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(n, N_JOINTS)
        self.fingertips = np.asarray(self.fingertips, dtype=np.float64).reshape(n, N_FINGERTIPS, 3)
        if self.visual is not None:
            self.visual = np.asarray(self.visual, dtype=np.float64)
            if self.visual.ndim != 2 or len(self.visual) != n:
                raise DataError("visual features must be an (N, D) array")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.float64).reshape(n, ACTION_DIM)
            if n:
                _check_quat(self.actions[:, 3:7], "action")
        if np.any(np.diff(self.t) <= 0):
            raise DataError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.tactile)):
            raise DataError("tactile readings contain non-finite values")
        if n:
            _check_quat(self.ee_quat, "state")
        if self.meta is None:
            self.meta = {}

    def __len__(self) -> int:
        return len(self.t)

    def subset(self, indices: Sequence[int]) -> "Trajectory":
        idx = np.asarray(indices, dtype=np.int64)
        return Trajectory(
            t=self.t[idx], tactile=self.tactile[idx], ee_pos=self.ee_pos[idx],
            ee_quat=self.ee_quat[idx], joints=self.joints[idx], fingertips=self.fingertips[idx],
            visual=None if self.visual is None else self.visual[idx],
            actions=None if self.actions is None else self.actions[idx],
            meta={k: ([v[i] for i in idx] if isinstance(v, list) else np.asarray(v)[idx])
                  if k in FRAME_META_KEYS else v for k, v in self.meta.items()},
        )

    def state(self, i: int) -> RobotState:
        return RobotState(self.ee_pos[i], self.ee_quat[i], self.joints[i], self.fingertips[i])

    def frame(self, i: int) -> TactileFrame:
        return TactileFrame(self.tactile[i])


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    """Per-axis (x, y, z) global min/max."""

    min: np.ndarray  # (3,)
    max: np.ndarray  # (3,)

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(N_AXES)
        hi = np.asarray(self.max, dtype=np.float64).reshape(N_AXES)
        if np.any(hi < lo):
            raise DataError("NormStats max must be >= min")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["min"]), np.array(d["max"]))


def fit_norm_stats(frames) -> NormStats:
    """Per-axis min and max over every taxel of every frame.

    ``frames`` is an (N, 15, 4, 4, 3) array or a sequence of TactileFrame.
    """
    if isinstance(frames, np.ndarray):
        arr = _as_pads(frames)
    else:
        frames = list(frames)
        if not frames:
            raise DataError("empty dataset")
        arr = np.stack([f.pads if isinstance(f, TactileFrame) else _as_pads(f) for f in frames])
    if arr.size == 0:
        raise DataError("empty dataset")
    if not np.all(np.isfinite(arr)):
        raise DataError("dataset contains non-finite values")
    flat = arr.reshape(-1, N_AXES)
    return NormStats(flat.min(axis=0), flat.max(axis=0))


def normalize(pads, stats: NormStats) -> np.ndarray:
    """Map raw readings into [0, 1] per axis; degenerate axes map to 0."""
    if isinstance(pads, TactileFrame):
        pads = pads.pads
    arr = np.asarray(pads, dtype=np.float64)
    span = stats.max - stats.min
    safe = np.where(span > 0, span, 1.0)
    out = (arr - stats.min) / safe
    out = np.where(span > 0, out, 0.0)
    return np.clip(out, 0.0, 1.0)


def normalize_image(image, stats: NormStats) -> np.ndarray:
    """Per-pixel normalisation of a raw (..., 3, H, W) layout image."""
    img = np.asarray(image, dtype=np.float64)
    moved = np.moveaxis(img, -3, -1)
    return np.moveaxis(normalize(moved, stats), -1, -3)


# ---------------------------------------------------------------- image layout

def _build_layout():
    # flat taxel index -> (channel, row, col)
    chan = np.empty(TACTILE_SHAPE, dtype=np.int64)
    row = np.empty(TACTILE_SHAPE, dtype=np.int64)
    col = np.empty(TACTILE_SHAPE, dtype=np.int64)
    for p in range(N_PADS):
        f, s = PAD_FINGER[p], PAD_SLOT[p]
        for r in range(PAD_ROWS):
            for c in range(PAD_COLS):
                for a in range(N_AXES):
                    chan[p, r, c, a] = a
                    row[p, r, c, a] = PAD_ROWS * s + r
                    col[p, r, c, a] = PAD_COLS * f + c
    return chan.reshape(-1), row.reshape(-1), col.reshape(-1)


LAYOUT_CHANNEL, LAYOUT_ROW, LAYOUT_COL = _build_layout()
LAYOUT_PIXEL = (LAYOUT_CHANNEL * IMAGE_SIZE + LAYOUT_ROW) * IMAGE_SIZE + LAYOUT_COL
PAD_MASK = np.ones(IMAGE_SHAPE, dtype=bool)
PAD_MASK.reshape(-1)[LAYOUT_PIXEL] = False  # True on the thumb padding


def permute_pads(pads, permutation: Optional[Sequence[int]]) -> np.ndarray:
    """Place pad ``permutation[i]`` at slot ``i``."""
    arr = np.asarray(pads, dtype=np.float64)
    if permutation is None:
        return arr
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(N_PADS)):
        raise DataError("pad permutation must be a permutation of 0..14")
    return arr[..., perm, :, :, :]


def layout_image(pads, pad_value: float = 0.0) -> np.ndarray:
    """Arrange (..., 15, 4, 4, 3) readings into (..., 3, 16, 16) without normalising."""
    arr = _as_pads(pads)
    lead = arr.shape[:-4]
    flat = arr.reshape(lead + (TACTILE_DIM,))
    img = np.full(lead + (N_AXES * IMAGE_SIZE * IMAGE_SIZE,), float(pad_value))
    img[..., LAYOUT_PIXEL] = flat
    return img.reshape(lead + IMAGE_SHAPE)


def tactile_image(pads, stats: NormStats, pad_value: float = 0.0,
                  permutation: Optional[Sequence[int]] = None) -> np.ndarray:
    """Normalise a reading and lay it out as a 3x16x16 image.

    Finger f occupies columns 4f..4f+3 with its pads stacked base-first from
    row 0; the thumb's missing fourth pad (rows 12-15, columns 12-15) holds
    ``pad_value``.
    """
    if isinstance(pads, TactileFrame):
        pads = pads.pads
    return layout_image(permute_pads(normalize(pads, stats), permutation), pad_value)


def image_to_pads(image) -> np.ndarray:
    """Inverse of :func:`layout_image`; padding is dropped."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-3:] != IMAGE_SHAPE:
        raise DataError(f"image must end in shape {IMAGE_SHAPE}, got {img.shape}")
    lead = img.shape[:-3]
    flat = img.reshape(lead + (-1,))[..., LAYOUT_PIXEL]
    return flat.reshape(lead + TACTILE_SHAPE)


def upscale(image, size: int) -> np.ndarray:
    """Nearest-neighbour resize of (..., C, 16, 16) to (..., C, size, size)."""
    img = np.asarray(image, dtype=np.float64)
    if size < IMAGE_SIZE:
        raise DataError(f"upscale size must be >= {IMAGE_SIZE}, got {size}")
    h = img.shape[-1]
    src = (np.arange(size) * h) // size
    return img[..., src[:, None], src[None, :]]


# ---------------------------------------------------------------- file format

def _frame_record(traj: Trajectory, i: int) -> dict:
    rec = {
        "t": float(traj.t[i]),
        "tactile": traj.tactile[i].tolist(),
        "ee_pos": traj.ee_pos[i].tolist(),
        "ee_quat": traj.ee_quat[i].tolist(),
        "joints": traj.joints[i].tolist(),
        "fingertips": traj.fingertips[i].tolist(),
    }
    if traj.visual is not None:
        rec["visual_feature"] = traj.visual[i].tolist()
    if traj.actions is not None:
        rec["action"] = traj.actions[i].tolist()
    for key in FRAME_META_KEYS:
        if key in traj.meta:
            v = traj.meta[key][i]
            rec[key] = v.tolist() if isinstance(v, np.ndarray) else v
    return rec


def write_trajectory(path, traj: Trajectory) -> None:
    """Write one JSON record per frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i in range(len(traj)):
            fh.write(json.dumps(_frame_record(traj, i)))
            fh.write("\n")


def read_trajectory(path) -> Trajectory:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return trajectory_from_records(records, source=str(path))


def trajectory_from_records(records: Iterable[dict], source: str = "<records>") -> Trajectory:
    records = list(records)
    required = ("t", "tactile", "ee_pos", "ee_quat", "joints", "fingertips")
    for i, rec in enumerate(records):
        missing = [k for k in required if k not in rec]
        if missing:
            raise DataError(f"{source}: record {i} missing fields {missing}")
    has_vis = [("visual_feature" in r) for r in records]
    has_act = [("action" in r) for r in records]
    if any(has_vis) and not all(has_vis):
        raise DataError(f"{source}: visual_feature present on some frames only")
    if any(has_act) and not all(has_act):
        raise DataError(f"{source}: action present on some frames only")

    def col(key, shape):
        if not records:
            return np.zeros((0,) + shape)
        return np.array([r[key] for r in records], dtype=np.float64).reshape((len(records),) + shape)

    visual = None
    if records and all(has_vis):
        visual = np.array([r["visual_feature"] for r in records], dtype=np.float64)
    meta = {"source": source}
    for key in FRAME_META_KEYS:
        if records and all(key in r for r in records):
            vals = [r[key] for r in records]
            meta[key] = vals if key == "phase" else np.array(vals, dtype=np.float64)
    return Trajectory(
        t=col("t", ()), tactile=col("tactile", TACTILE_SHAPE), ee_pos=col("ee_pos", (3,)),
        ee_quat=col("ee_quat", (4,)), joints=col("joints", (N_JOINTS,)),
        fingertips=col("fingertips", (N_FINGERTIPS, 3)), visual=visual,
        actions=col("action", (ACTION_DIM,)) if records and all(has_act) else None,
        meta=meta,
    )


def read_trajectories(directory) -> list:
    """Read every ``*.jsonl`` file in ``directory`` in sorted name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return [read_trajectory(p) for p in sorted(directory.glob("*.jsonl"))]


def unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.where(n > 0, n, 1.0)


def identity_quat() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def is_finite(x) -> bool:
    return bool(np.all(np.isfinite(np.asarray(x, dtype=np.float64))))

