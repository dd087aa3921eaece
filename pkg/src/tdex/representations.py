"""Tactile feature extractors behind a single featurizer interface."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .core import (N_AXES, N_JOINTS, N_PADS, TACTILE_DIM, DataError, NormStats, RobotState,
                   TactileFrame, tactile_image)
from .encoders import Encoder

VARIANTS = ("tdex_image_cnn", "stacked_45ch_cnn", "shared_per_pad_cnn", "raw_720", "pca_k",
            "sum_pooled_45", "shuffled_image_cnn", "torque_proxy")
CNN_VARIANTS = {"tdex_image_cnn": "tdex3", "stacked_45ch_cnn": "stacked",
                "shared_per_pad_cnn": "shared", "shuffled_image_cnn": "tdex3"}


# ---------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (720,)
    components: np.ndarray  # (k, 720), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing
    total_variance: float

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros(self.k)
        return self.explained_variance / self.total_variance


def _flat(frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.shape[-1] == TACTILE_DIM:
        return x
    if x.shape[-4:] != (N_PADS, 4, 4, N_AXES):
        raise DataError(f"expected 720 features or (15, 4, 4, 3) frames, got shape {x.shape}")
    return x.reshape(x.shape[:-4] + (TACTILE_DIM,))


def pca_fit(frames, k: int = 100) -> PcaModel:
    """Top-``k`` eigenvectors of the 720x720 sample covariance.

    Each component is signed so its largest-magnitude entry is positive.
    """
    x = _flat(frames)
    n, d = x.shape
    if k < 1 or k > d:
        raise DataError(f"k must be in [1, {d}], got {k}")
    if k > n:
        raise DataError(f"k={k} exceeds the number of samples {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:k]
    comps = evecs[:, order].T
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps = comps * signs[:, None]
    var = np.clip(evals[order], 0.0, None)
    return PcaModel(mean, comps, var, float(np.clip(evals, 0.0, None).sum()))


def pca_project(model: PcaModel, frames) -> np.ndarray:
    x = _flat(frames)
    if x.shape[-1] != model.mean.shape[0]:
        raise DataError(f"expected {model.mean.shape[0]} features, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.k:
        raise DataError(f"expected {model.k} coefficients, got {z.shape[-1]}")
    return model.mean + z @ model.components


# ---------------------------------------------------------------- simple features

def raw_features(frames) -> np.ndarray:
    """Flatten readings pad-major: pad, row, col, axis."""
    return _flat(frames)


def sum_pooled(frames) -> np.ndarray:
    """Sum each pad's 4x4 taxels per axis: (pad0.x, pad0.y, pad0.z, pad1.x, ...)."""
    x = np.asarray(frames, dtype=np.float64)
    return x.sum(axis=(-3, -2)).reshape(x.shape[:-4] + (N_PADS * N_AXES,))


def make_pad_permutation(seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 1515]).permutation(N_PADS)


def pd_torque_targets(q, q_des, qd, kp: float = 1.0, kd: float = 0.0) -> np.ndarray:
    """PD torque command kp*(q_des - q) - kd*qd, without a gravity term."""
    if kp < 0 or kd < 0:
        raise ValueError("PD gains must be non-negative")
    q, q_des, qd = (np.asarray(a, dtype=np.float64) for a in (q, q_des, qd))
    return kp * (q_des - q) - kd * qd


@dataclass(frozen=True)
class TorqueContext:
    """What the torque proxy needs beyond the tactile frame."""

    state: RobotState
    q_des: np.ndarray
    qd: np.ndarray


# ---------------------------------------------------------------- featurizer

@dataclass
class Featurizer:
    variant: str
    encoder: Optional[Encoder] = None
    params: Optional[nn.ParamStore] = None
    stats: Optional[NormStats] = None
    pca: Optional[PcaModel] = None
    permutation: Optional[np.ndarray] = None
    pad_value: float = 0.0
    kp: float = 1.0
    kd: float = 0.05
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown featurizer variant {self.variant!r}")
        if self.variant in CNN_VARIANTS:
            if self.encoder is None or self.params is None or self.stats is None:
                raise ValueError(f"{self.variant} needs an encoder, parameters and norm stats")
            if self.encoder.arch != CNN_VARIANTS[self.variant]:
                raise ValueError(f"{self.variant} needs a {CNN_VARIANTS[self.variant]} encoder")
        if self.variant == "shuffled_image_cnn" and self.permutation is None:
            raise ValueError("shuffled_image_cnn needs a pad permutation")
        if self.variant == "pca_k" and self.pca is None:
            raise ValueError("pca_k needs a fitted PcaModel")

    @property
    def dim(self) -> int:
        if self.variant in CNN_VARIANTS:
            return self.encoder.dim
        return {"raw_720": TACTILE_DIM, "sum_pooled_45": N_PADS * N_AXES,
                "torque_proxy": N_JOINTS, "pca_k": self.pca.k if self.pca else 0}[self.variant]

    def images(self, frames) -> np.ndarray:
        perm = self.permutation if self.variant == "shuffled_image_cnn" else None
        return tactile_image(frames, self.stats, self.pad_value, perm)

    def batch(self, frames, aux=None, chunk: int = 512) -> np.ndarray:
        """Features for (N, 15, 4, 4, 3) frames; ``aux`` is a list of TorqueContext for torque_proxy."""
        frames = np.asarray(frames, dtype=np.float64)
        if self.variant == "torque_proxy":
            if aux is None:
                raise DataError("torque_proxy needs robot state and desired joints")
            return np.stack([pd_torque_targets(a.state.joints, a.q_des, a.qd, self.kp, self.kd) for a in aux])
        if self.variant == "raw_720":
            return raw_features(frames)
        if self.variant == "sum_pooled_45":
            return sum_pooled(frames)
        if self.variant == "pca_k":
            return pca_project(self.pca, frames)
        out = []
        for start in range(0, len(frames), chunk):
            feats, _ = self.encoder.forward(self.params, self.images(frames[start:start + chunk]))
            out.append(feats)
        return np.concatenate(out) if out else np.zeros((0, self.dim))

    # -- persistence
    def save(self, directory) -> Path:
        directory = Path(directory)
        store = nn.ParamStore()
        if self.params is not None:
            for name in self.params:
                store.add(name, self.params[name])
        if self.pca is not None:
            store.add("pca.mean", self.pca.mean)
            store.add("pca.components", self.pca.components)
            store.add("pca.explained_variance", self.pca.explained_variance)
        meta = {
            "variant": self.variant,
            "dim": self.dim,
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "encoder_params": [] if self.params is None else list(self.params.params),
            "norm_stats": None if self.stats is None else self.stats.to_dict(),
            "permutation": None if self.permutation is None else [int(i) for i in self.permutation],
            "pad_value": self.pad_value,
            "pca_total_variance": None if self.pca is None else self.pca.total_variance,
            "kp": self.kp,
            "kd": self.kd,
            "meta": self.meta,
        }
        return nn.save_checkpoint(directory, store, meta)


def featurize(f: Featurizer, frame, aux: Optional[TorqueContext] = None) -> np.ndarray:
    """Feature vector for a single frame."""
    pads = frame.pads if isinstance(frame, TactileFrame) else np.asarray(frame, dtype=np.float64)
    if f.variant == "torque_proxy" and aux is None:
        raise DataError("torque_proxy needs robot state and desired joints")
    return f.batch(pads[None], None if aux is None else [aux])[0]


def load_featurizer(directory) -> Featurizer:
    store, meta = nn.load_checkpoint(directory)
    enc = Encoder.from_dict(meta["encoder"]) if meta.get("encoder") else None
    params = None
    if meta.get("encoder_params"):
        params = nn.ParamStore()
        for name in meta["encoder_params"]:
            params.add(name, store[name])
    pca = None
    if "pca.mean" in store:
        pca = PcaModel(store["pca.mean"], store["pca.components"], store["pca.explained_variance"],
                       float(meta["pca_total_variance"]))
    return Featurizer(
        variant=meta["variant"], encoder=enc, params=params,
        stats=NormStats.from_dict(meta["norm_stats"]) if meta.get("norm_stats") else None,
        pca=pca,
        permutation=None if meta.get("permutation") is None else np.array(meta["permutation"]),
        pad_value=meta.get("pad_value", 0.0), kp=meta.get("kp", 1.0), kd=meta.get("kd", 0.05),
        meta=meta.get("meta", {}),
    )


def torque_contexts(traj) -> list:
    """TorqueContext per frame, from ``q_des``/``qd`` stored alongside the trajectory.

    Without stored commands the previous frame's action joints stand in for the
    desired joints and velocity is differenced from the joint readings.
    """
    n = len(traj)
    q_des = traj.meta.get("q_des")
    qd = traj.meta.get("qd")
    if q_des is None:
        q_des = traj.joints.copy()
        if traj.actions is not None and n > 1:
            q_des[1:] = traj.actions[:-1, 7:]
    if qd is None:
        qd = np.zeros_like(traj.joints)
        if n > 1:
            qd[1:] = np.diff(traj.joints, axis=0) / np.diff(traj.t)[:, None]
    return [TorqueContext(traj.state(i), np.asarray(q_des[i]), np.asarray(qd[i])) for i in range(n)]


def write_features(path, features: np.ndarray, meta: Optional[dict] = None) -> None:
    """Row-per-frame little-endian float32 matrix plus ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feats = np.asarray(features, dtype=np.float64)
    path.write_bytes(feats.astype("<f4").tobytes())
    manifest = {"rows": int(feats.shape[0]), "cols": int(feats.shape[1]) if feats.ndim == 2 else 0,
                "dtype": "float32", "byte_order": "little", "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_features(path) -> tuple:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    return data.reshape(manifest["rows"], manifest["cols"]), manifest
