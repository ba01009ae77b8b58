"""Variational autoencoder training; only the decoder is kept afterwards."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from gendeblur import diffcore as dc
from gendeblur.diffcore import Tape, Tensor
from gendeblur.errors import ShapeError, UsageError
from gendeblur.generators.layers import BN_MOMENTUM, forward, infer_shapes, init_weights, trainable_names
from gendeblur.generators.model import GeneratorModel
from gendeblur.optim import Adam


@dataclass
class VaeConfig:
    """VAE training settings.

    ``steps`` overrides ``epochs`` when set.  ``obs_std`` is the standard
    deviation of the Gaussian reconstruction likelihood, so the data term of
    the ELBO is ``-||x - x_hat||^2 / (2 obs_std^2)`` per sample.
    """

    latent_dim: int = 50
    batch_size: int = 5
    learning_rate: float = 1e-5
    epochs: int = 1
    seed: int = 0
    steps: int | None = None
    obs_std: float = 1.0

    def __post_init__(self):
        for name in ("latent_dim", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"VaeConfig.{name} must be positive")
        if self.learning_rate <= 0 or self.obs_std <= 0:
            raise ValueError("VaeConfig.learning_rate and obs_std must be positive")
        if self.steps is not None and self.steps < 0:
            raise ValueError("VaeConfig.steps must be non-negative")

    @classmethod
    def blur_full(cls, **kw):
        return cls(**{"latent_dim": 50, "batch_size": 5, "learning_rate": 1e-5, **kw})

    @classmethod
    def svhn_full(cls, **kw):
        return cls(**{"latent_dim": 100, "batch_size": 1500, "learning_rate": 1e-5, **kw})

    @classmethod
    def blur_desk(cls, **kw):
        return cls(**{"latent_dim": 50, "batch_size": 32, "learning_rate": 3e-4, "obs_std": 0.01,
                      "epochs": 20, **kw})

    @classmethod
    def toy_image_desk(cls, **kw):
        return cls(**{"latent_dim": 8, "batch_size": 32, "learning_rate": 2e-3, "obs_std": 0.2,
                      "epochs": 40, **kw})


def kl_standard_normal(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    terms = 1.0 + logvar - dc.square(mu) - dc.exp(logvar)
    return dc.tsum(terms, axis=-1) * -0.5


def reparameterize(mu, logvar, eps):
    """z = mu + sigma * eps with sigma = exp(logvar / 2)."""
    return mu + dc.exp(logvar * 0.5) * eps


def _as_nchw(data):
    """Stack a dataset into float32 NCHW; kernels (N,h,w) gain a channel axis."""
    arr = np.asarray(data if isinstance(data, np.ndarray) else list(data), dtype=np.float32)
    if arr.size == 0 or arr.shape[0] == 0:
        raise UsageError("empty dataset")
    if arr.ndim == 3:
        return arr[:, None], "kernel"
    if arr.ndim == 4:
        return np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), "image"
    raise ShapeError(f"dataset items must be (h,w) kernels or (H,W,C) images, got {arr.shape[1:]}")


def _init_output_layer(params, layers, data_mean, scale=0.01):
    """Start the decoder near the per-channel data mean.

    He-scaled outputs are O(1); for kernels whose pixels are ~1e-3 the first
    updates then drive a ReLU head negative everywhere and it never recovers.
    """
    last = max(i for i, spec in enumerate(layers) if spec.kind in ("dense", "conv", "convT"))
    head = next((spec.kind for spec in layers[last + 1:] if spec.kind in ("relu", "sigmoid")), None)
    mean = np.clip(data_mean, 1e-6, 1.0 - 1e-6)
    bias = np.log(mean / (1.0 - mean)) if head == "sigmoid" else mean
    w, b = f"dec.{last}.weight", f"dec.{last}.bias"
    params[w] = (params[w] * scale).astype(np.float32)
    params[b] = np.broadcast_to(bias, params[b].shape).astype(np.float32).copy()


class Vae:
    """Encoder and decoder parameters plus the pieces of the ELBO."""

    def __init__(self, encoder_layers, decoder_layers, input_chw, latent_dim, kind, rng, data_mean=None):
        self.encoder_layers = tuple(encoder_layers)
        self.decoder_layers = tuple(decoder_layers)
        self.latent_dim = latent_dim
        self.kind = kind
        feats = infer_shapes(input_chw, self.encoder_layers)[-1]
        if len(feats) != 1:
            raise ShapeError(f"encoder must end flat, got {feats}")
        out = infer_shapes((latent_dim,), self.decoder_layers)[-1]
        if tuple(out) != tuple(input_chw):
            raise ShapeError(f"decoder output {out} does not match data {input_chw}")
        bound = math.sqrt(6.0 / feats[0])
        params = init_weights(input_chw, self.encoder_layers, rng, prefix="enc.")
        params["mu.weight"] = rng.uniform(-bound, bound, (latent_dim, feats[0])).astype(np.float32)
        params["mu.bias"] = np.zeros(latent_dim, np.float32)
        # start with small posterior variance so early reconstructions are informative
        params["logvar.weight"] = rng.uniform(-bound, bound, (latent_dim, feats[0])).astype(np.float32) * 0.1
        params["logvar.bias"] = np.full(latent_dim, -4.0, np.float32)
        params.update(init_weights((latent_dim,), self.decoder_layers, rng, prefix="dec."))
        if data_mean is not None:
            _init_output_layer(params, self.decoder_layers, np.asarray(data_mean, np.float64))
        self.params = params

    def _tensors(self, requires_grad):
        names = set(trainable_names(self.params)) if requires_grad else set()
        return {k: Tensor(v, requires_grad=k in names) for k, v in self.params.items()}

    def encode(self, x, tensors=None, training=False, bn_updates=None):
        t = tensors or self._tensors(False)
        h = forward(self.encoder_layers, t, dc.as_tensor(x), training, bn_updates, prefix="enc.")
        mu = dc.dense(h, t["mu.weight"], t["mu.bias"])
        logvar = dc.dense(h, t["logvar.weight"], t["logvar.bias"])
        return mu, logvar

    def decode(self, z, tensors=None, training=False, bn_updates=None):
        t = tensors or self._tensors(False)
        return forward(self.decoder_layers, t, dc.as_tensor(z), training, bn_updates, prefix="dec.")

    def elbo_terms(self, x, eps, obs_std, tensors=None, training=False, bn_updates=None):
        """Per-sample (reconstruction log-likelihood, KL), constants dropped."""
        mu, logvar = self.encode(x, tensors, training, bn_updates)
        z = reparameterize(mu, logvar, eps)
        xhat = self.decode(z, tensors, training, bn_updates)
        sq = dc.tsum(dc.square(xhat - x), axis=(1, 2, 3))
        return sq * (-0.5 / obs_std ** 2), kl_standard_normal(mu, logvar)

    def elbo(self, x, obs_std, seed=0):
        """Mean ELBO over ``x`` with a fixed noise draw (eval-mode batchnorm)."""
        x = np.asarray(x, np.float32)
        eps = np.random.default_rng(seed).normal(size=(x.shape[0], self.latent_dim))
        rec, kl = self.elbo_terms(x, eps, obs_std)
        return float(np.mean(rec.data.astype(np.float64) - kl.data))

    def reconstruct(self, x):
        """Decode the posterior mean of each input."""
        mu, _ = self.encode(np.asarray(x, np.float32))
        return self.decode(mu).data

    def decoder_model(self, meta=None):
        weights = {k[4:]: v for k, v in self.params.items() if k.startswith("dec.")}
        return GeneratorModel(self.latent_dim, self.decoder_layers, weights, self.kind, meta or {})


def fit_vae(dataset, cfg, encoder_layers, decoder_layers):
    """Train a VAE; returns ``(vae, history, data_nchw)``.

    ``history`` holds the minibatch ELBO per step plus full-data ELBO before
    and after training (fixed evaluation noise).
    """
    data, kind = _as_nchw(dataset)
    rng = np.random.default_rng(cfg.seed)
    channel_mean = data.mean(axis=(0, 2, 3), dtype=np.float64)
    vae = Vae(encoder_layers, decoder_layers, data.shape[1:], cfg.latent_dim, kind, rng, data_mean=channel_mean)
    n = data.shape[0]
    bs = min(cfg.batch_size, n)
    per_epoch = max(1, n // bs)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    names = trainable_names(vae.params)
    opt = Adam([vae.params[k] for k in names], lr=cfg.learning_rate)
    history = {"elbo": [], "elbo_start": vae.elbo(data, cfg.obs_std, seed=cfg.seed + 1)}
    order = rng.permutation(n)
    for step in range(total):
        pos = step % per_epoch
        if pos == 0 and step > 0:
            order = rng.permutation(n)
        idx = order[pos * bs:(pos + 1) * bs]
        x = data[idx]
        eps = rng.normal(size=(len(idx), cfg.latent_dim))
        bn = {}
        with Tape() as tape:
            t = vae._tensors(True)
            rec, kl = vae.elbo_terms(x, eps, cfg.obs_std, t, training=True, bn_updates=bn)
            loss = dc.mean(kl - rec)
        tape.backward(loss)
        opt.step([t[k].grad for k in names])
        for name, (m, v) in bn.items():
            rm, rv = vae.params[f"{name}.running_mean"], vae.params[f"{name}.running_var"]
            rm *= 1.0 - BN_MOMENTUM
            rm += (BN_MOMENTUM * m).astype(np.float32)
            rv *= 1.0 - BN_MOMENTUM
            rv += (BN_MOMENTUM * v).astype(np.float32)
        history["elbo"].append(-float(loss.data))
    history["elbo_end"] = vae.elbo(data, cfg.obs_std, seed=cfg.seed + 1)
    return vae, history, data


def train_vae(dataset, cfg, encoder_layers, decoder_layers):
    """Train a VAE on ``dataset`` and return its decoder as a :class:`GeneratorModel`."""
    vae, history, _ = fit_vae(dataset, cfg, encoder_layers, decoder_layers)
    meta = {
        "vae_config": asdict(cfg),
        "elbo_start": history["elbo_start"],
        "elbo_end": history["elbo_end"],
        "steps": len(history["elbo"]),
    }
    return vae.decoder_model(meta)
