"""Decoder models and differentiable decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from gendeblur import diffcore as dc
from gendeblur.diffcore import Tensor
from gendeblur.errors import ShapeError
from gendeblur.generators.layers import LayerSpec, forward, infer_shapes, init_weights


@dataclass(frozen=True, eq=False)
class GeneratorModel:
    """Pretrained decoder ``G: R^latent_dim -> image or kernel space``.

    ``kind`` is ``"image"`` (sigmoid head, output ``(H, W, C)``) or
    ``"kernel"`` (relu head, output ``(kh, kw)``).  Weight arrays are made
    read-only on construction.
    """

    latent_dim: int
    layers: tuple
    weights: MappingProxyType
    kind: str = "image"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.latent_dim <= 0:
            raise ShapeError("latent_dim must be positive")
        if self.kind not in ("image", "kernel"):
            raise ShapeError(f"unknown generator kind {self.kind!r}")
        frozen = {}
        for name, arr in dict(self.weights).items():
            a = np.array(arr, dtype=np.float32, copy=True)
            a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "weights", MappingProxyType(frozen))
        chw = infer_shapes((self.latent_dim,), self.layers)[-1]
        if len(chw) != 3:
            raise ShapeError(f"decoder must end in a CHW tensor, got {chw}")
        if self.kind == "kernel" and chw[0] != 1:
            raise ShapeError("kernel decoders must emit a single channel")
        # cached tensors so decode does not re-wrap the arrays every call
        object.__setattr__(self, "_params", {k: Tensor(v) for k, v in frozen.items()})

    @property
    def chw_shape(self):
        return infer_shapes((self.latent_dim,), self.layers)[-1]

    @property
    def output_shape(self):
        c, h, w = self.chw_shape
        return (h, w) if self.kind == "kernel" else (h, w, c)


def random_model(latent_dim, layers, kind="image", seed=0):
    rng = np.random.default_rng(seed)
    return GeneratorModel(latent_dim, tuple(layers), init_weights((latent_dim,), layers, rng), kind)


def decode(model, z):
    """Forward pass ``G(z)``; differentiable in ``z``.

    ``z`` may be ``(latent_dim,)`` or batched ``(R, latent_dim)``; the
    output gains the same leading axis.
    """
    z = dc.as_tensor(z)
    if z.shape[-1] != model.latent_dim or z.ndim not in (1, 2):
        raise ShapeError(f"latent of shape {z.shape} does not match latent_dim {model.latent_dim}")
    single = z.ndim == 1
    zb = dc.reshape(z, (1, model.latent_dim)) if single else z
    x = forward(model.layers, model._params, zb, training=False)
    if model.kind == "kernel":
        c, h, w = model.chw_shape
        x = dc.reshape(x, (x.shape[0], h, w))
    else:
        x = dc.transpose(x, (0, 2, 3, 1))
    if single:
        x = dc.reshape(x, model.output_shape)
    return x


def decode_array(model, z):
    """:func:`decode` without tape participation, returned as a numpy array."""
    return decode(model, np.asarray(z)).data
