"""BYOL pretraining of tactile encoders on play data."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .core import DataError
from .encoders import Encoder
from .nn import AdamConfig, ParamStore, l2_normalize, l2_normalize_backward, mlp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    blur_p: float = 0.5
    blur_sigma: tuple = (1.0, 2.0)
    crop_p: float = 0.5
    crop_scale: tuple = (0.9, 1.0)

    def __post_init__(self):
        for p in (self.blur_p, self.crop_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"augmentation probability {p} outside [0, 1]")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop scale range {self.crop_scale} must lie in (0, 1]")
        if not 0.0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"bad blur sigma range {self.blur_sigma}")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(blur_p=0.0, crop_p=0.0)


# ---------------------------------------------------------------- augmentation

def gaussian_kernel3(sigma) -> np.ndarray:
    """Normalised 1-D taps at offsets (-1, 0, 1); ``sigma`` may be a vector."""
    sigma = np.asarray(sigma, dtype=np.float64)[..., None]
    taps = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma * sigma))
    return taps / taps.sum(axis=-1, keepdims=True)


def gaussian_blur(images, sigma) -> np.ndarray:
    """Separable 3x3 blur of (N, C, H, W) with per-sample sigma, reflect borders."""
    x = np.asarray(images, dtype=np.float64)
    k = gaussian_kernel3(np.broadcast_to(sigma, (x.shape[0],)))[:, :, None, None, None]
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1)), mode="reflect")
    x = k[:, 0] * xp[..., :-2] + k[:, 1] * xp[..., 1:-1] + k[:, 2] * xp[..., 2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="reflect")
    return k[:, 0] * xp[..., :-2, :] + k[:, 1] * xp[..., 1:-1, :] + k[:, 2] * xp[..., 2:, :]


def _bilinear_axis(start, side, size):
    # pixel-centre sampling positions of the crop, clamped to the source grid
    pos = start[:, None] + (np.arange(size) + 0.5) * (side[:, None] / size) - 0.5
    pos = np.clip(pos, 0.0, size - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, pos - lo


def crop_resize(images, top, left, side) -> np.ndarray:
    """Crop per-sample squares (top, left, side in pixels) and resize back bilinearly."""
    x = np.asarray(images, dtype=np.float64)
    n, c, h, w = x.shape
    top, left, side = (np.broadcast_to(np.asarray(a, dtype=np.float64), (n,)) for a in (top, left, side))
    y0, y1, wy = _bilinear_axis(top, side, h)
    x0, x1, wx = _bilinear_axis(left, side, w)
    b = np.arange(n)[:, None, None]
    xt = x.transpose(0, 2, 3, 1)  # N, H, W, C

    def gather(yi, xi):
        return xt[b, yi[:, :, None], xi[:, None, :]]

    wy = wy[:, :, None, None]
    wx = wx[:, None, :, None]
    top_row = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot_row = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top_row * (1 - wy) + bot_row * wy
    return out.transpose(0, 3, 1, 2)


def _draw(rng: np.random.Generator, cfg: AugmentConfig, size: int) -> tuple:
    # always consume the same six draws so streams stay aligned across configs
    u_blur, u_sigma, u_crop, u_area, u_top, u_left = rng.random(6)
    sigma = cfg.blur_sigma[0] + u_sigma * (cfg.blur_sigma[1] - cfg.blur_sigma[0])
    area = cfg.crop_scale[0] + u_area * (cfg.crop_scale[1] - cfg.crop_scale[0])
    side = size * np.sqrt(area)
    return (u_blur < cfg.blur_p, sigma, u_crop < cfg.crop_p, side,
            u_top * (size - side), u_left * (size - side))


def _apply(images, draws) -> np.ndarray:
    out = np.array(images, dtype=np.float64)
    blur = np.array([d[0] for d in draws])
    if blur.any():
        sig = np.array([d[1] for d in draws])[blur]
        out[blur] = gaussian_blur(out[blur], sig)
    crop = np.array([d[2] for d in draws])
    if crop.any():
        sel = [d for d in draws if d[2]]
        out[crop] = crop_resize(out[crop], [d[4] for d in sel], [d[5] for d in sel], [d[3] for d in sel])
    return out


def augment(image, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Blur then crop a single (3, H, W) image, each with its own probability."""
    image = np.asarray(image, dtype=np.float64)
    return _apply(image[None], [_draw(rng, cfg, image.shape[-1])])[0]


def augment_batch(images, cfg: AugmentConfig, seed: int, keys) -> np.ndarray:
    """Augment a batch; sample ``i`` draws from its own stream seeded by ``(seed, *keys[i])``.

    Results depend only on the keys, not on batch composition or order.
    """
    images = np.asarray(images, dtype=np.float64)
    draws = [_draw(np.random.default_rng([seed, *map(int, key)]), cfg, images.shape[-1]) for key in keys]
    return _apply(images, draws)


# ---------------------------------------------------------------- model state

@dataclass(frozen=True)
class ByolConfig:
    arch: str = "tdex3"
    image_size: int = 16
    proj_hidden: int = 128
    proj_dim: int = 256
    pred_hidden: int = 128
    predictor: bool = True
    residual_predictor: bool = True
    ema_tau: float = 0.99
    adam: AdamConfig = field(default_factory=AdamConfig)
    batch_size: int = 1024
    epochs: int = 1000
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ByolState:
    """Online encoder/projector/predictor plus the EMA target encoder/projector."""

    encoder: Encoder
    projector: nn.NetSpec
    predictor: Optional[nn.NetSpec]
    online: ParamStore
    target: ParamStore
    ema_tau: float = 0.99
    residual: bool = True
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ValueError(f"ema_tau must be in [0, 1], got {self.ema_tau}")

    @property
    def target_names(self) -> list:
        return self.encoder.param_names() + list(self.projector.param_shapes())


def init_byol(cfg: ByolConfig, rng: np.random.Generator) -> ByolState:
    """Fresh online networks; the target starts as an exact copy.

    The predictor is residual, ``p = z + mlp(z)``, with its output layer zeroed
    so it starts as the identity.
    """
    encoder = Encoder(cfg.arch, "encoder", cfg.image_size)
    projector = mlp("projector", (encoder.dim, cfg.proj_hidden, cfg.proj_dim))
    online = encoder.init(rng)
    nn.init_params(projector, rng, online)
    predictor = None
    if cfg.predictor:
        predictor = mlp("predictor", (cfg.proj_dim, cfg.pred_hidden, cfg.proj_dim))
        nn.init_params(predictor, rng, online)
        if cfg.residual_predictor:
            last = len(predictor.layers) - 1
            online.params[f"predictor.{last}.weight"][:] = 0.0
    state = ByolState(encoder, projector, predictor, online, ParamStore(), cfg.ema_tau,
                      residual=cfg.residual_predictor)
    for name in state.target_names:
        state.target.add(name, online[name])
    return state


def _online_branch(state: ByolState, x):
    y, t_enc = state.encoder.forward(state.online, x)
    z, t_proj = nn.forward(state.projector, state.online, y)
    if state.predictor is None:
        return z, (t_enc, t_proj, None)
    q, t_pred = nn.forward(state.predictor, state.online, z)
    return (z + q if state.residual else q), (t_enc, t_proj, t_pred)


def _online_backward(state: ByolState, tapes, g_p, grads: dict) -> None:
    t_enc, t_proj, t_pred = tapes
    g_z = g_p
    if t_pred is not None:
        g_pred, g_zq = nn.backward(t_pred, g_p)
        _accumulate(grads, g_pred)
        g_z = g_p + g_zq if state.residual else g_zq
    g_proj, g_y = nn.backward(t_proj, g_z)
    _accumulate(grads, g_proj)
    _accumulate(grads, state.encoder.backward(t_enc, g_y))


def _accumulate(grads: dict, new: dict) -> None:
    for k, v in new.items():
        if k in grads:
            grads[k] = grads[k] + v
        else:
            grads[k] = v


def target_projection(state: ByolState, x) -> np.ndarray:
    y, _ = state.encoder.forward(state.target, x)
    z, _ = nn.forward(state.projector, state.target, y)
    return z


def byol_terms(state: ByolState, view1, view2) -> np.ndarray:
    """Per-sample directional losses, shape (2, N): view1->view2 and view2->view1."""
    p1, _ = _online_branch(state, view1)
    p2, _ = _online_branch(state, view2)
    zt1 = target_projection(state, view1)
    zt2 = target_projection(state, view2)
    pn1, _ = l2_normalize(p1)
    pn2, _ = l2_normalize(p2)
    zn1, _ = l2_normalize(zt1)
    zn2, _ = l2_normalize(zt2)
    return np.stack([np.sum((pn1 - zn2) ** 2, axis=1), np.sum((pn2 - zn1) ** 2, axis=1)])


def byol_loss(state: ByolState, view1, view2) -> tuple:
    """Symmetrised normalised-MSE loss and its gradient for the online parameters.

    The target branch is treated as a constant.
    """
    view1 = np.asarray(view1, dtype=np.float64)
    view2 = np.asarray(view2, dtype=np.float64)
    if view1.shape != view2.shape:
        raise ValueError(f"view shapes differ: {view1.shape} vs {view2.shape}")
    n = view1.shape[0]
    if n == 0:
        raise DataError("batch size 0")
    p1, tapes1 = _online_branch(state, view1)
    p2, tapes2 = _online_branch(state, view2)
    zn1, _ = l2_normalize(target_projection(state, view1))
    zn2, _ = l2_normalize(target_projection(state, view2))
    pn1, norm1 = l2_normalize(p1)
    pn2, norm2 = l2_normalize(p2)
    d1 = pn1 - zn2
    d2 = pn2 - zn1
    loss = float((np.sum(d1 * d1) + np.sum(d2 * d2)) / (2 * n))

    grads: dict = {}
    _online_backward(state, tapes1, l2_normalize_backward(pn1, norm1, d1 / n), grads)
    _online_backward(state, tapes2, l2_normalize_backward(pn2, norm2, d2 / n), grads)
    ordered = {name: grads[name] for name in state.online.params}
    return loss, ordered


def ema_update(state: ByolState) -> ByolState:
    """target <- tau * target + (1 - tau) * online, in place."""
    tau = state.ema_tau
    for name in state.target_names:
        state.target.params[name] = tau * state.target.params[name] + (1.0 - tau) * state.online.params[name]
    state.target.version += 1
    return state


# ---------------------------------------------------------------- training loop

@dataclass
class PretrainResult:
    encoder: Encoder
    params: ParamStore  # encoder weights from the best epoch
    epoch_losses: list
    step_losses: list
    best_epoch: int
    config: ByolConfig
    seed: int

    def manifest(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "byol": self.config.to_dict(),
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "epoch_losses": self.epoch_losses,
            "weight_decay_mode": "l2-in-gradient",
        }


def train_step(state: ByolState, view1, view2, adam_cfg: AdamConfig) -> float:
    loss, grads = byol_loss(state, view1, view2)
    nn.adam(state.online, grads, adam_cfg)
    ema_update(state)
    state.step += 1
    return loss


def pretrain(images, cfg: ByolConfig = ByolConfig(), seed: int = 0,
             on_epoch: Optional[Callable[[int, float], None]] = None) -> PretrainResult:
    """Train with BYOL and keep the encoder from the epoch with the lowest mean loss."""
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if n == 0:
        raise DataError("empty dataset")
    rng = np.random.default_rng([seed, 0])
    state = init_byol(cfg, rng)
    enc_names = state.encoder.param_names()
    batch = max(1, min(cfg.batch_size, n))
    epoch_losses, step_losses = [], []
    best = (np.inf, -1, None)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 1, epoch]).permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            keys1 = [(epoch, int(i), 0) for i in idx]
            keys2 = [(epoch, int(i), 1) for i in idx]
            v1 = augment_batch(images[idx], cfg.augment, seed, keys1)
            v2 = augment_batch(images[idx], cfg.augment, seed, keys2)
            losses.append(train_step(state, v1, v2, cfg.adam))
        step_losses.extend(losses)
        mean = float(np.mean(losses))
        epoch_losses.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        log.debug("epoch %d loss %.6f", epoch, mean)
        if mean < best[0]:
            snapshot = ParamStore()
            for name in enc_names:
                snapshot.add(name, state.online[name])
            best = (mean, epoch, snapshot)
    if best[2] is None:
        snapshot = ParamStore()
        for name in enc_names:
            snapshot.add(name, state.online[name])
        best = (np.inf, -1, snapshot)
    return PretrainResult(state.encoder, best[2], epoch_losses, step_losses, best[1], cfg, seed)
