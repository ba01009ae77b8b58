"""Layer specifications, architecture builders and the shared forward pass.

Activations flow through the network in NCHW layout with a leading batch
axis; dense layers see the flattened ``(N, features)`` view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gendeblur import diffcore as dc
from gendeblur.errors import ShapeError

KINDS = ("dense", "conv", "convT", "maxpool", "upsample", "relu", "sigmoid", "batchnorm", "reshape")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    """One layer; ``params`` holds the kind-specific integers/shapes.

    dense: units; conv/convT: filters, size, stride; maxpool: size, stride;
    upsample: factor; reshape: shape (per-sample, without batch axis).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")

    def to_json(self):
        return {"kind": self.kind, **{k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()}}

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(kind, d)


def L(kind, **params):
    return LayerSpec(kind, params)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------


def blur_encoder_arch():
    """conv(20,2,1) relu maxpool(2,2) conv(20,2,1) relu maxpool(2,2) flatten.

    The two fc(latent) heads are added by the VAE.
    """
    return [
        L("conv", filters=20, size=2, stride=1), L("relu"), L("maxpool", size=2, stride=2),
        L("conv", filters=20, size=2, stride=1), L("relu"), L("maxpool", size=2, stride=2),
        L("reshape", shape=(720,)),
    ]


def blur_decoder_arch():
    """fc(720) relu reshape(20,6,6) up2 convT(20) relu up2 convT(20) relu convT(1) relu."""
    return [
        L("dense", units=720), L("relu"), L("reshape", shape=(20, 6, 6)),
        L("upsample", factor=2), L("convT", filters=20, size=2, stride=1), L("relu"),
        L("upsample", factor=2), L("convT", filters=20, size=2, stride=1), L("relu"),
        L("convT", filters=1, size=2, stride=1), L("relu"),
    ]


def image_encoder_arch(widths=(128, 256, 512), image_size=32):
    """Mirror of :func:`image_decoder_arch` (SVHN layout at default widths)."""
    layers = []
    for w in widths:
        layers += [L("conv", filters=w, size=2, stride=2), L("batchnorm"), L("relu")]
    side = image_size // 2 ** len(widths)
    layers.append(L("reshape", shape=(widths[-1] * side * side,)))
    return layers


def image_decoder_arch(widths=(512, 256, 128), channels=3, image_size=32):
    """fc -> reshape -> [convT(w,2,2) bn relu]* -> conv(channels,1,1) -> sigmoid.

    Default widths reproduce the SVHN decoder (fc(8192) -> 512x4x4 -> 32x32x3).
    """
    side = image_size // 2 ** len(widths)
    if side * 2 ** len(widths) != image_size:
        raise ShapeError(f"image size {image_size} not reachable with {len(widths)} stride-2 stages")
    layers = [L("dense", units=widths[0] * side * side), L("reshape", shape=(widths[0], side, side))]
    for w in widths:
        layers += [L("convT", filters=w, size=2, stride=2), L("batchnorm"), L("relu")]
    layers += [L("conv", filters=channels, size=1, stride=1), L("sigmoid")]
    return layers


# ---------------------------------------------------------------------------
# shapes and parameters
# ---------------------------------------------------------------------------


def infer_shapes(input_shape, layers):
    """Per-sample shape after each layer; raises :class:`ShapeError` if they do not chain."""
    shape = tuple(input_shape)
    shapes = []
    for i, spec in enumerate(layers):
        p = spec.params
        k = spec.kind
        where = f"layer {i} ({k})"
        if k == "dense":
            if len(shape) != 1:
                raise ShapeError(f"{where}: needs flat input, got {shape}")
            shape = (p["units"],)
        elif k in ("conv", "convT", "maxpool", "upsample", "batchnorm"):
            if len(shape) != 3:
                raise ShapeError(f"{where}: needs CHW input, got {shape}")
            c, h, w = shape
            if k == "conv":
                s, n = p["stride"], p["size"]
                ho, wo = (h - n) // s + 1, (w - n) // s + 1
                if h < n or w < n or ho <= 0 or wo <= 0:
                    raise ShapeError(f"{where}: kernel {n} does not fit {h}x{w}")
                shape = (p["filters"], ho, wo)
            elif k == "convT":
                s, n = p["stride"], p["size"]
                shape = (p["filters"], (h - 1) * s + n, (w - 1) * s + n)
            elif k == "maxpool":
                s, n = p["stride"], p["size"]
                if h < n or w < n:
                    raise ShapeError(f"{where}: pool {n} does not fit {h}x{w}")
                shape = (c, (h - n) // s + 1, (w - n) // s + 1)
            elif k == "upsample":
                shape = (c, h * p["factor"], w * p["factor"])
        elif k == "reshape":
            new = tuple(p["shape"])
            if int(np.prod(new)) != int(np.prod(shape)):
                raise ShapeError(f"{where}: cannot reshape {shape} to {new}")
            shape = new
        shapes.append(shape)
    return shapes


def init_weights(input_shape, layers, rng, prefix=""):
    """He-uniform weights, zero biases, unit/zero batchnorm affine and stats."""
    weights = {}
    shape = tuple(input_shape)
    for i, (spec, out) in enumerate(zip(layers, infer_shapes(input_shape, layers))):
        name = f"{prefix}{i}"
        p = spec.params
        if spec.kind == "dense":
            fan_in = shape[0]
            bound = np.sqrt(6.0 / fan_in)
            weights[f"{name}.weight"] = rng.uniform(-bound, bound, size=(p["units"], fan_in))
            weights[f"{name}.bias"] = np.zeros(p["units"])
        elif spec.kind == "conv":
            fan_in = shape[0] * p["size"] ** 2
            bound = np.sqrt(6.0 / fan_in)
            weights[f"{name}.weight"] = rng.uniform(-bound, bound, size=(p["filters"], shape[0], p["size"], p["size"]))
            weights[f"{name}.bias"] = np.zeros(p["filters"])
        elif spec.kind == "convT":
            # each output pixel of a stride-s transposed conv sees ~ Ci*(k/s)^2 inputs
            fan_in = shape[0] * max(1, (p["size"] // p["stride"]) ** 2)
            bound = np.sqrt(6.0 / fan_in)
            weights[f"{name}.weight"] = rng.uniform(-bound, bound, size=(shape[0], p["filters"], p["size"], p["size"]))
            weights[f"{name}.bias"] = np.zeros(p["filters"])
        elif spec.kind == "batchnorm":
            c = shape[0]
            weights[f"{name}.gamma"] = np.ones(c)
            weights[f"{name}.beta"] = np.zeros(c)
            weights[f"{name}.running_mean"] = np.zeros(c)
            weights[f"{name}.running_var"] = np.ones(c)
        shape = out
    return {k: v.astype(np.float32) for k, v in weights.items()}


def trainable_names(weights):
    return [k for k in weights if not k.endswith(("running_mean", "running_var"))]


def forward(layers, params, x, training=False, bn_updates=None, prefix=""):
    """Run ``layers`` on batched input ``x`` (Tensor, ``(N, ...)``).

    ``params`` maps weight names to Tensors (or arrays).  In training mode
    batchnorm uses batch statistics and, if ``bn_updates`` is a dict, the
    batch mean/var are stored there keyed by layer name.
    """
    n = x.shape[0]
    for i, spec in enumerate(layers):
        name = f"{prefix}{i}"
        p = spec.params
        k = spec.kind
        if k == "dense":
            x = dc.dense(x, params[f"{name}.weight"], params[f"{name}.bias"])
        elif k == "conv":
            x = dc.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=p["stride"])
        elif k == "convT":
            x = dc.conv_transpose2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=p["stride"])
        elif k == "maxpool":
            x = dc.maxpool(x, p["size"], p["stride"])
        elif k == "upsample":
            x = dc.upsample_nn(x, p["factor"])
        elif k == "relu":
            x = dc.relu(x)
        elif k == "sigmoid":
            x = dc.sigmoid(x)
        elif k == "reshape":
            x = dc.reshape(x, (n,) + tuple(p["shape"]))
        elif k == "batchnorm":
            gamma, beta = params[f"{name}.gamma"], params[f"{name}.beta"]
            if training:
                if bn_updates is not None:
                    xd = x.data.astype(np.float64)
                    bn_updates[name] = (xd.mean(axis=(0, 2, 3)), xd.var(axis=(0, 2, 3)))
                x = dc.batchnorm_train(x, gamma, beta, eps=BN_EPS)
            else:
                mean = np.asarray(params[f"{name}.running_mean"], dtype=np.float64)
                var = np.asarray(params[f"{name}.running_var"], dtype=np.float64)
                g = np.asarray(getattr(gamma, "data", gamma), dtype=np.float64)
                b = np.asarray(getattr(beta, "data", beta), dtype=np.float64)
                scale = g / np.sqrt(var + BN_EPS)
                shift = b - mean * scale
                x = x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)
    return x
