"""Latent-space deblurring solvers: range projection, DD and DDS.

All solvers run their random restarts together as a leading batch axis.
Restart ``r`` draws its initialisation from ``default_rng([seed, r])``, so
the batched run is identical to running the restarts one at a time.  A
restart whose iterates stop being finite is frozen at its last finite
state and excluded from selection.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gendeblur import diffcore as dc
from gendeblur.blursynth import BlurKernel, Observation
from gendeblur.diffcore import Tape, Tensor
from gendeblur.errors import ConfigError, NumericError, ShapeError, SolverError
from gendeblur.generators.model import decode
from gendeblur.imageio import write_png
from gendeblur.metrics import evaluate
from gendeblur.optim import Adam, exp_decay


@dataclass(frozen=True)
class DDConfig:
    """Alternating gradient descent settings.

    The step size at iteration ``t`` is ``step_size * exp(-t / decay)``.
    """

    gamma: float = 0.01
    lambda_: float = 0.01
    steps: int = 6000
    step_size: float = 0.01
    decay: float = 1000.0
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma", "must be >= 0")
        if self.lambda_ < 0:
            raise ConfigError("lambda_", "must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.restarts < 1:
            raise ConfigError("restarts", "must be >= 1")
        if self.step_size <= 0 or self.decay <= 0:
            raise ConfigError("step_size", "step size and decay must be positive")


@dataclass(frozen=True)
class DDSConfig:
    tau: float = 100.0
    zeta: float = 0.5
    rho: float = 1e-3
    steps: int = 10000
    adam_lr: float = 0.005
    restarts: int = 10
    seed: int = 0
    image_init_mean: float = 0.5
    image_init_std: float = 0.1

    def __post_init__(self):
        for name in ("tau", "zeta", "rho", "image_init_std"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.restarts < 1:
            raise ConfigError("restarts", "must be >= 1")
        if self.adam_lr <= 0:
            raise ConfigError("adam_lr", "must be positive")


@dataclass
class SolveResult:
    """Chosen restart of a solve.

    ``loss_trace`` is ``(steps, 2)``: total objective and selection loss at
    the start of every iteration.  ``restart_losses`` holds the final
    selection loss of each restart (``inf`` for aborted ones).
    """

    method: str
    z_i_hat: np.ndarray
    z_k_hat: np.ndarray
    i_hat: np.ndarray
    k_hat: BlurKernel
    loss_trace: np.ndarray
    chosen_restart: int
    restart_losses: np.ndarray
    final_loss: float
    final_measurement_loss: float
    elapsed: float = 0.0
    diagnostics: list = field(default_factory=list)
    traces: np.ndarray | None = None


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _y_array(y):
    arr = y.y if isinstance(y, Observation) else y
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ShapeError(f"observation must be (H,W) or (H,W,C), got {arr.shape}")
    return arr


def _check_models(y, g_i, g_k):
    if tuple(g_i.output_shape) != tuple(y.shape):
        raise ShapeError(f"image generator emits {g_i.output_shape}, observation is {y.shape}")
    kh, kw = g_k.output_shape
    if kh > y.shape[0] or kw > y.shape[1]:
        raise ShapeError(f"kernel {kh}x{kw} larger than observation {y.shape[:2]}")


def _sqnorm(t):
    """Per-item squared norm over the trailing image axes."""
    return dc.tsum(dc.square(t), axis=(-3, -2, -1))


def _latent_sq(z):
    return dc.tsum(dc.square(z), axis=-1)


def dd_terms(y, z_i, z_k, models, gamma, lambda_):
    """``(total, measurement)`` of the DD objective, one entry per restart.

    With 1-D latents both are scalars.
    """
    g_i, g_k = models
    y = _y_array(y)
    img = decode(g_i, z_i)
    ker = decode(g_k, z_k)
    meas = _sqnorm(y - dc.conv2d_full(img, ker))
    total = meas + _latent_sq(z_i) * gamma + _latent_sq(z_k) * lambda_
    return total, meas


def dd_loss(y, z_i, z_k, models, gamma, lambda_):
    """``||y - G_I(z_i) (*) G_K(z_k)||^2 + gamma ||z_i||^2 + lambda ||z_k||^2``."""
    return dd_terms(y, z_i, z_k, models, gamma, lambda_)[0]


def dds_terms(y, i, z_i, z_k, models, tau, zeta, rho):
    """``(total, data term)`` of the slack objective, one entry per restart."""
    g_i, g_k = models
    return _dds_objective(_y_array(y), dc.as_tensor(i), decode(g_i, z_i), decode(g_k, z_k), tau, zeta, rho)


def _dds_objective(y, i, img, ker, tau, zeta, rho):
    """Slack objective from already decoded ``img = G_I(z_i)`` and ``ker = G_K(z_k)``."""
    data = _sqnorm(y - dc.conv2d_full(i, ker))
    total = data + _sqnorm(i - img) * tau + _sqnorm(y - dc.conv2d_full(img, ker)) * zeta + dc.tv_norm(i) * rho
    return total, data


def dds_loss(y, i, z_i, z_k, models, tau, zeta, rho):
    """``||y - i (*) G_K||^2 + tau ||i - G_I||^2 + zeta ||y - G_I (*) G_K||^2 + rho TV(i)``."""
    return dds_terms(y, i, z_i, z_k, models, tau, zeta, rho)[0]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _init_latents(seed, restarts, d_i, d_k):
    z_i = np.empty((restarts, d_i), dtype=dc.default_dtype())
    z_k = np.empty((restarts, d_k), dtype=dc.default_dtype())
    rngs = [np.random.default_rng([seed, r]) for r in range(restarts)]
    for r, rng in enumerate(rngs):
        z_i[r] = rng.normal(size=d_i)
        z_k[r] = rng.normal(size=d_k)
    return z_i, z_k, rngs


def _finite_rows(*arrays):
    ok = None
    for a in arrays:
        f = np.isfinite(a.reshape(a.shape[0], -1)).all(axis=1)
        ok = f if ok is None else ok & f
    return ok


def _grad_of(loss_vec, var):
    """Gradient of ``sum(loss_vec)`` with respect to the watched tensor ``var``."""
    tape = dc.active_tape()
    tape.backward(dc.tsum(loss_vec))
    return var.grad


def renormalize_kernel(k):
    """Copy of ``k`` (negatives dropped) scaled to sum 1, plus a success flag.

    An all-zero kernel becomes a centred delta and the flag is False.
    """
    k = np.clip(np.asarray(k, dtype=np.float64), 0.0, None)
    s = k.sum()
    if not np.isfinite(s) or s <= 0:
        k = np.zeros_like(k)
        k[k.shape[0] // 2, k.shape[1] // 2] = 1.0
        return BlurKernel(k.astype(np.float32), 0.0), False
    return BlurKernel((k / s).astype(np.float32), float("nan")), True


def _select(final_sel, alive):
    """Index of the smallest selection loss among live restarts; ties go to the lowest index."""
    cand = np.where(alive, final_sel, np.inf)
    if not np.isfinite(cand).any():
        return None
    return int(np.argmin(cand))


class _Freezer:
    """Tracks restarts that produced non-finite values."""

    def __init__(self, restarts):
        self.alive = np.ones(restarts, dtype=bool)
        self.notes = []

    def check(self, t, what, new_values, old_values):
        """Replace rows of ``new_values`` that are not finite by ``old_values`` and freeze them."""
        bad = ~_finite_rows(new_values) & self.alive
        if bad.any():
            for r in np.flatnonzero(bad):
                self.notes.append(f"restart {r}: non-finite {what} at step {t}; aborted")
            self.alive &= ~bad
        frozen = ~self.alive
        if frozen.any():
            new_values[frozen] = old_values[frozen]
        return new_values

    def screen(self, what, values):
        """Mark restarts with non-finite starting ``values`` as aborted and zero them."""
        bad = ~_finite_rows(values) & self.alive
        for r in np.flatnonzero(bad):
            self.notes.append(f"restart {r}: non-finite initial {what}; aborted")
        self.alive &= ~bad
        values[~self.alive] = 0.0
        return values

    def screen_outputs(self, t, method, img, ker, z_i, z_k):
        """Abort live restarts whose decoded ``img`` or ``ker`` is not finite.

        Their latents are zeroed in place.  Returns True when anything was
        aborted, in which case the outputs must be decoded again.
        """
        bad = ~(_finite_rows(img) & _finite_rows(ker)) & self.alive
        if not bad.any():
            return False
        for r in np.flatnonzero(bad):
            self.notes.append(f"restart {r}: non-finite decoder output at step {t}; aborted")
        self.alive &= ~bad
        z_i[~self.alive] = 0.0
        z_k[~self.alive] = 0.0
        self.require_any(method)
        return True

    def guard(self, t, method, fn, models, z_i, z_k):
        """Call ``fn``; if a decoder output overflowed, abort the restarts responsible and call again.

        ``z_i`` and ``z_k`` are zeroed in place for aborted restarts.
        """
        try:
            return fn()
        except NumericError:
            pass
        ok = _finite_rows(decode(models[0], z_i).data) & _finite_rows(decode(models[1], z_k).data)
        bad = ~ok & self.alive
        for r in np.flatnonzero(bad):
            self.notes.append(f"restart {r}: non-finite decoder output at step {t}; aborted")
        self.alive &= ~bad
        z_i[~self.alive] = 0.0
        z_k[~self.alive] = 0.0
        self.require_any(method)
        return fn()

    def require_any(self, method):
        if not self.alive.any():
            raise SolverError(f"{method}: every restart produced non-finite values; " + "; ".join(self.notes))


# ---------------------------------------------------------------------------
# Deep Deblur
# ---------------------------------------------------------------------------


# overflow in a diverging restart is detected and handled by _Freezer
_quiet = np.errstate(over="ignore", invalid="ignore")


class _Decoded:
    """A decoder output recorded on its own tape, so it can be reused by a later loss.

    Each DD half-step needs one decoder output with gradient and the other as
    a constant.  Both are recorded once per iteration: the constant of one
    half-step is the differentiated output of the next.
    """

    def __init__(self, model, z):
        self.tape = Tape()
        with self.tape:
            # a copy, so in-place optimiser updates cannot alias the recorded input
            self.z = Tensor(np.array(z), requires_grad=True)
            self.out = decode(model, self.z)


def _dd_half(y, var, other, block, gamma, lambda_):
    """``(total, measurement, gradient)`` with respect to ``var`` (block 0: z_i, block 1: z_k).

    ``other`` is the :class:`_Decoded` of the fixed block.
    """
    with var.tape:
        img, ker = (var.out, other.out.data) if block == 0 else (other.out.data, var.out)
        z_i, z_k = (var.z, other.z.data) if block == 0 else (other.z.data, var.z)
        meas = _sqnorm(y - dc.conv2d_full(img, ker))
        total = meas + _latent_sq(z_i) * gamma + _latent_sq(z_k) * lambda_
        g = _grad_of(total, var.z)
    return total, meas, g


@_quiet
def deep_deblur(y, g_i, g_k, cfg=DDConfig(), init=None, keep_traces=False):
    """Alternating gradient descent over ``(z_i, z_k)`` with random restarts.

    Each iteration takes a step in ``z_i`` with ``z_k`` fixed and then a step
    in ``z_k`` with the updated ``z_i``, each with a freshly computed
    gradient.  The restart with the smallest final measurement loss
    ``||y - G_I(z_i) (*) G_K(z_k)||^2`` is returned.

    Parameters
    ----------
    y : Observation or ndarray
        Blurry image ``(H, W, C)``; used unclipped.
    g_i, g_k : GeneratorModel
        Image and kernel decoders.
    cfg : DDConfig
    init : tuple of ndarray, optional
        ``(z_i, z_k)`` of shape ``(restarts, d)`` replacing the random start.
    keep_traces : bool
        Also return the traces of every restart in ``result.traces``.
    """
    start = time.perf_counter()
    y = _y_array(y)
    _check_models(y, g_i, g_k)
    models = (g_i, g_k)
    R = cfg.restarts
    if init is None:
        z_i, z_k, _ = _init_latents(cfg.seed, R, g_i.latent_dim, g_k.latent_dim)
    else:
        z_i = np.array(init[0], dtype=dc.default_dtype()).reshape(R, g_i.latent_dim)
        z_k = np.array(init[1], dtype=dc.default_dtype()).reshape(R, g_k.latent_dim)
    freezer = _Freezer(R)
    z_i = freezer.screen("z_i", z_i)
    z_k = freezer.screen("z_k", z_k)
    freezer.require_any("deep_deblur")
    traces = np.zeros((R, cfg.steps, 2))
    dec_i = dec_k = None

    for t in range(cfg.steps):
        eta = exp_decay(cfg.step_size, cfg.decay, t)
        dec_i = dec_i or _Decoded(g_i, z_i)
        dec_k = _Decoded(g_k, z_k)
        if freezer.screen_outputs(t, "deep_deblur", dec_i.out.data, dec_k.out.data, z_i, z_k):
            dec_i, dec_k = _Decoded(g_i, z_i), _Decoded(g_k, z_k)
        live = freezer.alive[:, None]
        total, meas, g = _dd_half(y, dec_i, dec_k, 0, cfg.gamma, cfg.lambda_)
        traces[:, t, 0] = total.data
        traces[:, t, 1] = meas.data
        z_i = freezer.check(t, "z_i", (z_i - eta * g * live).astype(z_i.dtype), z_i)
        dec_i = _Decoded(g_i, z_i)
        if freezer.screen_outputs(t, "deep_deblur", dec_i.out.data, dec_k.out.data, z_i, z_k):
            dec_i, dec_k = _Decoded(g_i, z_i), _Decoded(g_k, z_k)
        _, _, g = _dd_half(y, dec_k, dec_i, 1, cfg.gamma, cfg.lambda_)
        z_k = freezer.check(t, "z_k", (z_k - eta * g * freezer.alive[:, None]).astype(z_k.dtype), z_k)
        freezer.require_any("deep_deblur")

    total, meas = freezer.guard(cfg.steps, "deep_deblur",
                                lambda: dd_terms(y, z_i, z_k, models, cfg.gamma, cfg.lambda_), models, z_i, z_k)
    freezer.check(cfg.steps, "loss", meas.data.reshape(R, 1).copy(), np.full((R, 1), np.inf))
    freezer.require_any("deep_deblur")
    final_meas = np.where(freezer.alive, meas.data.astype(np.float64), np.inf)
    r = _select(final_meas, freezer.alive)
    i_hat = decode(g_i, z_i[r]).data
    k_raw = decode(g_k, z_k[r]).data
    k_hat, ok = renormalize_kernel(k_raw)
    notes = list(freezer.notes)
    if not ok:
        notes.append("decoded kernel was all zero; reporting a delta kernel")
    return SolveResult(
        method="dd",
        z_i_hat=z_i[r].copy(),
        z_k_hat=z_k[r].copy(),
        i_hat=i_hat,
        k_hat=k_hat,
        loss_trace=traces[r],
        chosen_restart=r,
        restart_losses=final_meas,
        final_loss=float(total.data[r]),
        final_measurement_loss=float(final_meas[r]),
        elapsed=time.perf_counter() - start,
        diagnostics=notes,
        traces=traces if keep_traces else None,
    )


# ---------------------------------------------------------------------------
# Deep Deblur with Slack
# ---------------------------------------------------------------------------


def _dds_block(y, img, dec_i, dec_k, block, args):
    """``(total, data term, gradient)`` with respect to ``z_i``, ``z_k`` or ``i`` (blocks 0, 1, 2)."""
    if block == 2:
        with Tape():
            v = Tensor(img, requires_grad=True)
            total, data = _dds_objective(y, v, dec_i.out.data, dec_k.out.data, *args)
            return total, data, _grad_of(total, v)
    var = (dec_i, dec_k)[block]
    with var.tape:
        g_img, ker = (dec_i.out, dec_k.out.data) if block == 0 else (dec_i.out.data, dec_k.out)
        total, data = _dds_objective(y, img, g_img, ker, *args)
        return total, data, _grad_of(total, var.z)


@_quiet
def deep_deblur_slack(y, g_i, g_k, cfg=DDSConfig(), keep_traces=False):
    """Cyclic Adam updates of ``z_i``, ``z_k`` and the free image ``i``.

    ``i`` starts at ``N(image_init_mean, image_init_std^2)`` per pixel.  The
    restart with the smallest final ``||y - i (*) G_K(z_k)||^2`` is returned;
    ``i_hat`` is that ``i`` clipped to [0, 1] and ``k_hat`` is its decoded
    kernel renormalised to sum 1.
    """
    start = time.perf_counter()
    y = _y_array(y)
    _check_models(y, g_i, g_k)
    models = (g_i, g_k)
    R = cfg.restarts
    z_i, z_k, rngs = _init_latents(cfg.seed, R, g_i.latent_dim, g_k.latent_dim)
    img = np.stack([rng.normal(cfg.image_init_mean, cfg.image_init_std, size=y.shape) for rng in rngs])
    img = img.astype(dc.default_dtype())
    opts = [Adam([z_i], cfg.adam_lr), Adam([z_k], cfg.adam_lr), Adam([img], cfg.adam_lr)]
    freezer = _Freezer(R)
    traces = np.zeros((R, cfg.steps, 2))
    args = (cfg.tau, cfg.zeta, cfg.rho)

    dec = [None, None]

    for t in range(cfg.steps):
        for block, opt in enumerate(opts):
            old = opt.params[0].copy()
            if dec[0] is None or freezer.screen_outputs(t, "deep_deblur_slack", dec[0].out.data, dec[1].out.data,
                                                        z_i, z_k):
                dec = [_Decoded(g_i, z_i), _Decoded(g_k, z_k)]
            total, data, g = _dds_block(y, img, dec[0], dec[1], block, args)
            if block == 0:
                traces[:, t, 0] = total.data
                traces[:, t, 1] = data.data
            g = np.where(freezer.alive.reshape((R,) + (1,) * (g.ndim - 1)), g, 0.0)
            opt.step([g])
            freezer.check(t, ("z_i", "z_k", "i")[block], opt.params[0], old)
            if block < 2:
                dec[block] = _Decoded((g_i, g_k)[block], opt.params[0])
        freezer.require_any("deep_deblur_slack")

    total, data = freezer.guard(cfg.steps, "deep_deblur_slack",
                                lambda: dds_terms(y, img, z_i, z_k, models, *args), models, z_i, z_k)
    freezer.check(cfg.steps, "loss", data.data.reshape(R, 1).copy(), np.full((R, 1), np.inf))
    freezer.require_any("deep_deblur_slack")
    final_data = np.where(freezer.alive, data.data.astype(np.float64), np.inf)
    r = _select(final_data, freezer.alive)
    k_hat, ok = renormalize_kernel(decode(g_k, z_k[r]).data)
    notes = list(freezer.notes)
    if not ok:
        notes.append("decoded kernel was all zero; reporting a delta kernel")
    return SolveResult(
        method="dds",
        z_i_hat=z_i[r].copy(),
        z_k_hat=z_k[r].copy(),
        i_hat=np.clip(img[r], 0.0, 1.0),
        k_hat=k_hat,
        loss_trace=traces[r],
        chosen_restart=r,
        restart_losses=final_data,
        final_loss=float(total.data[r]),
        final_measurement_loss=float(final_data[r]),
        elapsed=time.perf_counter() - start,
        diagnostics=notes,
        traces=traces if keep_traces else None,
    )


# ---------------------------------------------------------------------------
# range projection
# ---------------------------------------------------------------------------


def range_project(i_test, model, steps=6000, step_size=0.01, seed=0, restarts=1):
    """Closest generator output to ``i_test`` by plain gradient descent on ``||i_test - G(z)||^2``.

    Returns ``(z_test, i_range)``.  With several restarts the one with the
    smallest final residual is kept.  Works for kernel decoders as well,
    with ``i_test`` shaped like the decoder output.
    """
    target = np.asarray(i_test, dtype=np.float32)
    if model.kind == "image":
        target = _y_array(target)
    if tuple(model.output_shape) != tuple(target.shape):
        raise ShapeError(f"generator emits {model.output_shape}, target is {target.shape}")
    axes = tuple(range(1, target.ndim + 1))
    z = np.stack([np.random.default_rng([seed, r]).normal(size=model.latent_dim) for r in range(restarts)])
    z = z.astype(dc.default_dtype())
    for t in range(steps):
        with Tape():
            zt = Tensor(z, requires_grad=True)
            res = dc.tsum(dc.square(target - decode(model, zt)), axis=axes)
            g = _grad_of(res, zt)
        z = (z - step_size * g).astype(z.dtype)
        if not np.isfinite(z).all():
            raise SolverError(f"range_project: non-finite latent at step {t}")
    out = decode(model, z).data
    res = ((out.astype(np.float64) - target) ** 2).sum(axis=axes)
    if not np.isfinite(res).all():
        raise SolverError("range_project: non-finite residual")
    r = int(np.argmin(res))
    return z[r].copy(), out[r]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def result_record(result, config, truth_image=None, extra=None):
    """JSON-ready summary of a solve (no wall-clock fields, so reruns match)."""
    rec = {
        "method": result.method,
        "config": asdict(config),
        "chosen_restart": result.chosen_restart,
        "final_loss": result.final_loss,
        "final_measurement_loss": result.final_measurement_loss,
        "restart_losses": [None if not math.isfinite(v) else float(v) for v in result.restart_losses],
        "diagnostics": list(result.diagnostics),
    }
    if truth_image is not None:
        rec["metrics"] = evaluate(result.i_hat, truth_image).to_json()
    if extra:
        rec.update(extra)
    return rec


def save_result(result, config, out_dir, truth_image=None, extra=None):
    """Write ``i_hat.png``, ``k_hat.png``, ``result.json`` and ``trace.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "i_hat.png", np.clip(result.i_hat, 0.0, 1.0))
    k = result.k_hat.canvas
    write_png(out / "k_hat.png", k / max(float(k.max()), 1e-12))
    rec = result_record(result, config, truth_image, extra)
    (out / "result.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total_loss", "measurement_loss"])
        for t, (tot, meas) in enumerate(result.loss_trace):
            w.writerow([t, repr(float(tot)), repr(float(meas))])
    return rec
