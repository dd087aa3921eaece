"""Nearest-neighbour action retrieval over demonstrations, and a BC baseline."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import nn
from .core import ACTION_DIM, DataError, RobotState, Trajectory
from .representations import Featurizer, TorqueContext, torque_contexts

DEFAULT_REJECT_K = 10
BOTTLE_WEIGHTS = {"w_v": 1.0, "w_t": 2.0}


def max_pairwise_distance(x, chunk: int = 256) -> float:
    """Exact largest Euclidean distance between any two rows."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2 or x.shape[1] == 0:
        return 0.0
    sq = np.einsum("ij,ij->i", x, x)
    best, pair = -np.inf, (0, 0)
    for s in range(0, len(x), chunk):
        d2 = sq[s:s + chunk, None] + sq[None, :] - 2.0 * x[s:s + chunk] @ x.T
        i, j = np.unravel_index(np.argmax(d2), d2.shape)
        if d2[i, j] > best:
            best, pair = d2[i, j], (s + i, j)
    # the Gram trick only picks the pair; the distance itself is computed directly
    return float(np.linalg.norm(x[pair[0]] - x[pair[1]]))


def modality_scale(x) -> float:
    d = max_pairwise_distance(x)
    return 1.0 / d if d > 0.0 else 1.0


@dataclass(frozen=True)
class FeatureIndex:
    """Demonstration rows with per-modality scaling; immutable once built."""

    visual: np.ndarray  # (N, Dv), may have Dv = 0
    tactile: np.ndarray  # (N, Dt), may have Dt = 0
    actions: np.ndarray  # (N, 23)
    source: np.ndarray  # (N, 2) of (demo, frame)
    scale_v: float = 1.0
    scale_t: float = 1.0
    w_v: float = 1.0
    w_t: float = 1.0

    def __len__(self):
        return len(self.actions)

    def distances(self, y_v, y_t) -> np.ndarray:
        d = np.zeros(len(self))
        if self.w_v != 0.0 and self.visual.shape[1]:
            diff = self.scale_v * (np.asarray(y_v, dtype=np.float64)[None, :] - self.visual)
            d += self.w_v * np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if self.w_t != 0.0 and self.tactile.shape[1]:
            diff = self.scale_t * (np.asarray(y_t, dtype=np.float64)[None, :] - self.tactile)
            d += self.w_t * np.sqrt(np.einsum("ij,ij->i", diff, diff))
        return d

    def with_weights(self, w_v: float, w_t: float) -> "FeatureIndex":
        if w_v < 0 or w_t < 0:
            raise ValueError("weights must be non-negative")
        return FeatureIndex(self.visual, self.tactile, self.actions, self.source,
                            self.scale_v, self.scale_t, float(w_v), float(w_t))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, visual=self.visual, tactile=self.tactile, actions=self.actions,
                     source=self.source, scalars=np.array([self.scale_v, self.scale_t, self.w_v, self.w_t]))

    @classmethod
    def load(cls, path) -> "FeatureIndex":
        with np.load(path) as z:
            sv, st, wv, wt = (float(v) for v in z["scalars"])
            return cls(z["visual"], z["tactile"], z["actions"], z["source"], sv, st, wv, wt)


def make_index(visual, tactile, actions, source=None, w_v: float = 1.0, w_t: float = 1.0) -> FeatureIndex:
    actions = np.asarray(actions, dtype=np.float64)
    n = len(actions)
    if n == 0:
        raise DataError("index needs at least one row")
    visual = np.zeros((n, 0)) if visual is None else np.asarray(visual, dtype=np.float64).reshape(n, -1)
    tactile = np.zeros((n, 0)) if tactile is None else np.asarray(tactile, dtype=np.float64).reshape(n, -1)
    if source is None:
        source = np.stack([np.zeros(n, dtype=np.int64), np.arange(n)], axis=1)
    if w_v < 0 or w_t < 0:
        raise ValueError("weights must be non-negative")
    return FeatureIndex(visual, tactile, actions, np.asarray(source, dtype=np.int64),
                        modality_scale(visual), modality_scale(tactile), float(w_v), float(w_t))


def tactile_features(featurizer: Optional[Featurizer], traj: Trajectory) -> Optional[np.ndarray]:
    if featurizer is None:
        return None
    aux = torque_contexts(traj) if featurizer.variant == "torque_proxy" else None
    return featurizer.batch(traj.tactile, aux)


def visual_features(visual_featurizer, traj: Trajectory) -> Optional[np.ndarray]:
    if visual_featurizer is None:
        return None
    if traj.visual is None:
        raise DataError("trajectory has no visual features")
    return np.asarray(visual_featurizer(traj.visual), dtype=np.float64)


def identity_visual(v):
    return np.asarray(v, dtype=np.float64)


def build_index(demos, tactile_featurizer: Optional[Featurizer], visual_featurizer: Optional[Callable] = identity_visual,
                w_v: float = 1.0, w_t: float = 1.0) -> FeatureIndex:
    """Featurize every demo frame; actions come from the (already subsampled) demos."""
    if not demos:
        raise DataError("no demonstrations")
    vis, tac, acts, src = [], [], [], []
    for d, traj in enumerate(demos):
        if traj.actions is None:
            raise DataError(f"demo {d} has no actions")
        vis.append(visual_features(visual_featurizer, traj))
        tac.append(tactile_features(tactile_featurizer, traj))
        acts.append(traj.actions)
        src.append(np.stack([np.full(len(traj), d), np.arange(len(traj))], axis=1))
    v = None if vis[0] is None else np.concatenate(vis)
    t = None if tac[0] is None else np.concatenate(tac)
    return make_index(v, t, np.concatenate(acts), np.concatenate(src), w_v, w_t)


class RejectBuffer:
    """FIFO of the ``k`` most recently retrieved rows."""

    def __init__(self, k: int = DEFAULT_REJECT_K):
        if k < 0:
            raise ValueError("reject buffer size must be >= 0")
        self.k = k
        self._q = deque(maxlen=k) if k > 0 else None

    def __contains__(self, row) -> bool:
        return self._q is not None and row in self._q

    def __len__(self):
        return 0 if self._q is None else len(self._q)

    def rows(self) -> list:
        return [] if self._q is None else list(self._q)

    def push(self, row: int) -> None:
        if self._q is not None:
            self._q.append(int(row))

    def clear(self) -> None:
        if self._q is not None:
            self._q.clear()


class Neighbor(NamedTuple):
    row: int
    action: np.ndarray
    distance: float


def nn_query(index: FeatureIndex, y_v, y_t, reject: Optional[RejectBuffer] = None) -> Neighbor:
    """Nearest row not in ``reject`` (lowest index on ties); pushes the winner into ``reject``."""
    if len(index) == 0:
        raise DataError("empty index")
    d = index.distances(y_v, y_t)
    blocked = reject.rows() if reject is not None else []
    if blocked:
        d = d.copy()
        d[blocked] = np.inf
        if len(set(blocked)) >= len(index):
            raise DataError("buffer exhausts index")
    row = int(np.argmin(d))  # first occurrence on ties
    if reject is not None:
        reject.push(row)
    return Neighbor(row, index.actions[row].copy(), float(d[row]))


# ---------------------------------------------------------------- policies

def _obs_tactile_feature(featurizer: Optional[Featurizer], obs) -> np.ndarray:
    if featurizer is None:
        return np.zeros(0)
    aux = None
    if featurizer.variant == "torque_proxy":
        state = RobotState(obs.ee_pos, obs.ee_quat, obs.joints, obs.fingertips)
        aux = [TorqueContext(state, obs.q_des, obs.qd)]
    return featurizer.batch(np.asarray(obs.tactile)[None], aux)[0]


def _obs_visual_feature(visual_featurizer, obs) -> np.ndarray:
    if visual_featurizer is None:
        return np.zeros(0)
    return np.asarray(visual_featurizer(np.asarray(obs.visual)[None]), dtype=np.float64)[0]


@dataclass
class NNPolicy:
    index: FeatureIndex
    tactile_featurizer: Optional[Featurizer] = None
    visual_featurizer: Optional[Callable] = identity_visual
    reject_k: int = DEFAULT_REJECT_K
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.reject_k >= len(self.index):
            raise ValueError("reject buffer must be smaller than the index")
        self.reject = RejectBuffer(self.reject_k)

    def reset(self):
        self.reject.clear()
        self.trace = []

    def act(self, obs) -> np.ndarray:
        y_v = _obs_visual_feature(self.visual_featurizer, obs)
        y_t = _obs_tactile_feature(self.tactile_featurizer, obs)
        nb = nn_query(self.index, y_v, y_t, self.reject)
        self.trace.append({"step": len(self.trace), "neighbor": nb.row,
                           "source": [int(s) for s in self.index.source[nb.row]],
                           "distance": nb.distance})
        return nb.action


def rollout(policy, env, max_steps: int) -> dict:
    """Closed loop observe -> act -> step; one record per executed step."""
    if hasattr(policy, "reset"):
        policy.reset()
    steps = []
    obs = env.observe()
    success = bool(getattr(env, "success", lambda: False)())
    for i in range(max_steps):
        if success:
            break
        a = np.asarray(policy.act(obs), dtype=np.float64)
        rec = {"step": i, "action": a.tolist()}
        trace = getattr(policy, "trace", None)
        if trace:
            rec["neighbor"] = trace[-1]["neighbor"]
            rec["distance"] = trace[-1]["distance"]
        steps.append(rec)
        obs = env.step(a)
        success = bool(getattr(env, "success", lambda: False)())
    return {"steps": steps, "success": success}


# ---------------------------------------------------------------- behaviour cloning

@dataclass
class BCPolicy:
    net: nn.NetSpec
    params: nn.ParamStore
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    tactile_featurizer: Optional[Featurizer] = None
    visual_featurizer: Optional[Callable] = identity_visual
    losses: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def reset(self):
        self.trace = []

    def act(self, obs) -> np.ndarray:
        return bc_predict(self, _obs_visual_feature(self.visual_featurizer, obs),
                          _obs_tactile_feature(self.tactile_featurizer, obs))


def _unit_quat_rows(a: np.ndarray) -> np.ndarray:
    out = a.copy()
    q = out[..., 3:7]
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    ident = np.zeros_like(q)
    ident[..., 0] = 1.0
    out[..., 3:7] = np.where(norm > 1e-12, q / np.maximum(norm, 1e-12), ident)
    return out


def bc_fit(x, y, epochs: int = 100, seed: int = 0, batch_size: int = 64, lr: float = 1e-3,
           hidden=(256, 128)) -> tuple:
    """Train a ReLU MLP on standardised (x, y) with MSE; returns (net, params, stats, losses)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise DataError("no training rows")
    in_mean, in_std = x.mean(0), x.std(0)
    in_std = np.where(in_std > 1e-8, in_std, 1.0)
    out_mean, out_std = y.mean(0), y.std(0)
    out_std = np.where(out_std > 1e-8, out_std, 1.0)
    xs = (x - in_mean) / in_std
    ys = (y - out_mean) / out_std
    net = nn.mlp("bc", (x.shape[1],) + tuple(hidden) + (y.shape[1],))
    rng = np.random.default_rng([seed, 2024])
    params = nn.init_params(net, rng)
    cfg = nn.AdamConfig(lr=lr, weight_decay=0.0)
    losses = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 2025, epoch]).permutation(len(xs))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            pred, tape = nn.forward(net, params, xs[idx])
            err = pred - ys[idx]
            losses.append(float(np.mean(err ** 2)))
            grads, _ = nn.backward(tape, 2.0 * err / err.size)
            nn.adam(params, grads, cfg)
    return net, params, (in_mean, in_std, out_mean, out_std), losses


def bc_train(demos, tactile_featurizer: Optional[Featurizer], visual_featurizer: Optional[Callable] = identity_visual,
             epochs: int = 100, seed: int = 0, batch_size: int = 64) -> BCPolicy:
    if not demos:
        raise DataError("no demonstrations")
    xs, ys = [], []
    for d, traj in enumerate(demos):
        if traj.actions is None:
            raise DataError(f"demo {d} has no actions")
        parts = [p for p in (visual_features(visual_featurizer, traj), tactile_features(tactile_featurizer, traj))
                 if p is not None]
        if not parts:
            raise DataError("BC needs at least one modality")
        xs.append(np.concatenate(parts, axis=1))
        ys.append(traj.actions)
    net, params, (im, isd, om, osd), losses = bc_fit(np.concatenate(xs), np.concatenate(ys), epochs, seed, batch_size)
    return BCPolicy(net, params, im, isd, om, osd, tactile_featurizer, visual_featurizer, losses)


def bc_predict(policy: BCPolicy, y_v, y_t) -> np.ndarray:
    x = np.concatenate([np.asarray(y_v, dtype=np.float64).reshape(-1), np.asarray(y_t, dtype=np.float64).reshape(-1)])
    xs = ((x - policy.in_mean) / policy.in_std)[None]
    out, _ = nn.forward(policy.net, policy.params, xs)
    a = out[0] * policy.out_std + policy.out_mean
    if a.shape != (ACTION_DIM,):
        raise DataError(f"BC produced {a.shape[0]} outputs, expected {ACTION_DIM}")
    return _unit_quat_rows(a)


def write_episode_log(path, episodes) -> None:
    """One JSON object per executed step: episode, step, neighbor id, distance, action."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e, ep in enumerate(episodes):
            for rec in ep["steps"]:
                fh.write(json.dumps({"episode": e, **rec}, sort_keys=True) + "\n")
