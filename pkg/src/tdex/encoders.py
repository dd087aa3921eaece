"""Tactile encoder architectures.

Every encoder consumes batches of normalised tactile images (N, 3, 16, 16) so
that pretraining augmentations are shared; non-image architectures convert the
image back to per-pad tensors internally.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .core import IMAGE_SIZE, N_AXES, N_PADS, PAD_COLS, PAD_ROWS, image_to_pads, upscale
from .nn import Conv2d, GlobalAvgPool, NetSpec, ReLU

ARCHS = ("tdex3", "stacked", "shared")
SHARED_PAD_DIM = 16


def image_cnn(name: str, image_size: int = IMAGE_SIZE) -> NetSpec:
    return NetSpec(name, (3, image_size, image_size), (
        Conv2d(3, 16, 3, 2, 1), ReLU(),
        Conv2d(16, 32, 3, 2, 1), ReLU(),
        Conv2d(32, 64, 4, 1, 0), ReLU(),
        GlobalAvgPool(),
    ))


def stacked_cnn(name: str) -> NetSpec:
    c = N_PADS * N_AXES
    return NetSpec(name, (c, PAD_ROWS, PAD_COLS), (
        Conv2d(c, 64, 3, 1, 1), ReLU(),
        Conv2d(64, 64, 3, 1, 1), ReLU(),
        Conv2d(64, 64, 3, 1, 1), ReLU(),
        GlobalAvgPool(),
    ))


def pad_cnn(name: str) -> NetSpec:
    return NetSpec(name, (N_AXES, PAD_ROWS, PAD_COLS), (
        Conv2d(N_AXES, 16, 3, 1, 1), ReLU(),
        Conv2d(16, 32, 3, 1, 1), ReLU(),
        Conv2d(32, SHARED_PAD_DIM, 3, 1, 1), ReLU(),
        GlobalAvgPool(),
    ))


def stack_pads(images) -> np.ndarray:
    """(N, 3, 16, 16) images -> (N, 45, 4, 4), channels pad-major then axis."""
    pads = image_to_pads(images)  # (N, 15, 4, 4, 3)
    n = pads.shape[0]
    return pads.transpose(0, 1, 4, 2, 3).reshape(n, N_PADS * N_AXES, PAD_ROWS, PAD_COLS)


class Encoder:
    """One of the tactile architectures bound to a parameter-name prefix."""

    def __init__(self, arch: str = "tdex3", name: str = "encoder", image_size: int = IMAGE_SIZE):
        if arch not in ARCHS:
            raise ValueError(f"unknown encoder arch {arch!r}; expected one of {ARCHS}")
        if arch != "tdex3" and image_size != IMAGE_SIZE:
            raise ValueError("only the image CNN supports upscaled input")
        self.arch = arch
        self.name = name
        self.image_size = image_size
        if arch == "tdex3":
            self.net = image_cnn(name, image_size)
            self.dim = self.net.output_shape[0]
        elif arch == "stacked":
            self.net = stacked_cnn(name)
            self.dim = self.net.output_shape[0]
        else:
            self.net = pad_cnn(name)
            self.dim = N_PADS * self.net.output_shape[0]

    def init(self, rng, store=None):
        return nn.init_params(self.net, rng, store)

    def param_names(self) -> list:
        return list(self.net.param_shapes())

    def prepare(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if self.arch == "tdex3":
            return images if self.image_size == IMAGE_SIZE else upscale(images, self.image_size)
        if self.arch == "stacked":
            return stack_pads(images)
        pads = image_to_pads(images)
        return pads.transpose(0, 1, 4, 2, 3).reshape(-1, N_AXES, PAD_ROWS, PAD_COLS)

    def forward(self, params, images):
        n = len(images)
        out, tape = nn.forward(self.net, params, self.prepare(images))
        if self.arch == "shared":
            out = out.reshape(n, self.dim)
        return out, tape

    def backward(self, tape, grad) -> dict:
        if self.arch == "shared":
            grad = grad.reshape(-1, SHARED_PAD_DIM)
        grads, _ = nn.backward(tape, grad)
        return grads

    def to_dict(self) -> dict:
        return {"arch": self.arch, "name": self.name, "image_size": self.image_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        return cls(d["arch"], d.get("name", "encoder"), d.get("image_size", IMAGE_SIZE))
