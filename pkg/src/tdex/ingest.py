"""Motion-threshold subsampling of trajectories and dataset statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataError, Trajectory, read_trajectories, write_trajectory

PLAY_THRESHOLD_M = 0.01
DEMO_THRESHOLD_M = 0.02


@dataclass(frozen=True)
class SubsampleConfig:
    threshold: float = PLAY_THRESHOLD_M  # meters of accumulated motion
    include_first: bool = True

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")


def step_displacements(traj: Trajectory) -> np.ndarray:
    """Per-step motion: summed fingertip deltas plus end-effector delta.

    Entry ``k`` is the motion from frame ``k-1`` to ``k``; entry 0 is zero.
    """
    n = len(traj)
    out = np.zeros(n)
    if n < 2:
        return out
    out[1:] = displacement(traj, np.arange(n - 1), np.arange(1, n))
    return out


def displacement(traj: Trajectory, i, k) -> np.ndarray:
    """Summed fingertip distance plus end-effector distance between frames ``i`` and ``k``."""
    tips = np.linalg.norm(traj.fingertips[k] - traj.fingertips[i], axis=-1).sum(axis=-1)
    ee = np.linalg.norm(traj.ee_pos[k] - traj.ee_pos[i], axis=-1)
    return tips + ee


def motion_subsample(traj: Trajectory, cfg: SubsampleConfig = SubsampleConfig(),
                     mode: str = "chord") -> list:
    """Indices of frames kept once the hand has moved more than ``cfg.threshold``.

    ``mode="chord"`` measures the distance from the last kept frame, which makes
    the operation idempotent. ``mode="path"`` accumulates per-step deltas
    instead (always >= the chord). Frame 0 is kept when ``include_first`` is
    set; the reference frame is frame 0 either way.
    """
    n = len(traj)
    if n == 0:
        raise DataError("cannot subsample an empty trajectory")
    if mode == "chord":
        kept = [0]
        last = 0
        for k in range(1, n):
            if displacement(traj, last, k) > cfg.threshold:
                kept.append(k)
                last = k
    elif mode == "path":
        steps = step_displacements(traj)
        kept = [0]
        acc = 0.0
        for k in range(1, n):
            acc += steps[k]
            if acc > cfg.threshold:
                kept.append(k)
                acc = 0.0
    else:
        raise ValueError(f"unknown subsample mode {mode!r}")
    return kept if cfg.include_first else kept[1:]


def compose_actions(actions: np.ndarray, kept) -> np.ndarray:
    """Action for each kept frame: the absolute target issued just before the next kept frame.

    Actions are absolute targets, so the last command of a skipped span is the
    one that takes the hand to the next retained state.
    """
    kept = list(kept)
    ends = [k - 1 for k in kept[1:]] + [len(actions) - 1]
    return actions[ends]


def subsample(traj: Trajectory, threshold: float, compose: bool = True) -> Trajectory:
    kept = motion_subsample(traj, SubsampleConfig(threshold))
    out = traj.subset(kept)
    if compose and traj.actions is not None:
        out.actions = compose_actions(traj.actions, kept)
    return out


def dataset_stats(trajs, threshold: float = PLAY_THRESHOLD_M) -> dict:
    """Frame counts before/after subsampling, duration and effective rate."""
    before = after = 0
    duration = 0.0
    cfg = SubsampleConfig(threshold)
    for traj in trajs:
        if len(traj) == 0:
            continue
        before += len(traj)
        after += len(motion_subsample(traj, cfg))
        duration += float(traj.t[-1] - traj.t[0])
    return {
        "trajectories": len(trajs),
        "frames_before": before,
        "frames_after": after,
        "duration_s": duration,
        "rate_before_hz": before / duration if duration > 0 else 0.0,
        "rate_after_hz": after / duration if duration > 0 else 0.0,
        "threshold_m": threshold,
    }


def ingest_dir(src, dst, threshold: float) -> dict:
    """Subsample every trajectory file in ``src`` into ``dst`` (same names)."""
    src, dst = Path(src), Path(dst)
    paths = sorted(src.glob("*.jsonl"))
    trajs = read_trajectories(src)
    dst.mkdir(parents=True, exist_ok=True)
    for path, traj in zip(paths, trajs):
        if len(traj) == 0:
            continue
        write_trajectory(dst / path.name, subsample(traj, threshold))
    return dataset_stats(trajs, threshold)
