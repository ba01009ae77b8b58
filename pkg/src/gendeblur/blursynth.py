"""Synthetic motion-blur kernels and simulated blurry observations.

Trajectories come from a unit-speed random walk whose heading is nudged by
Gaussian accelerations and occasionally flipped by large-angle impulses.
The path is scaled to the requested arc length, shrunk if needed so its
bounding box spans at most ``CANVAS - 1`` pixels, and translated so that
its arc-length centroid sits on the kernel centre ``(CANVAS // 2, CANVAS // 2)``
(or as close as the canvas allows).  Points are ``(row, col)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gendeblur import diffcore as dc
from gendeblur.errors import ModelFormatError, ShapeError

CANVAS = 28
LENGTH_RANGE = (5.0, 28.0)
N_VERTICES = 64


@dataclass(frozen=True, eq=False)
class BlurKernel:
    canvas: np.ndarray
    length: float

    def check(self, atol=1e-6):
        k = self.canvas
        return bool(
            k.shape == (CANVAS, CANVAS)
            and np.all(k >= 0)
            and np.isfinite(k).all()
            and abs(k.sum(dtype=np.float64) - 1.0) <= atol
        )


@dataclass(frozen=True, eq=False)
class Observation:
    """Blurry image ``y`` (unclipped, fed to solvers) plus its provenance."""

    y: np.ndarray
    y_clipped: np.ndarray
    truth: dict | None = field(default=None)


def _polyline(points):
    seg = np.sqrt((np.diff(points, axis=0) ** 2).sum(axis=1))
    return seg, float(seg.sum())


def random_trajectory(length, seed, canvas=CANVAS, n_vertices=N_VERTICES):
    """Random camera-shake path of arc length ``length`` (pixels) on the canvas.

    Returns an ``(n_vertices, 2)`` float64 array of ``(row, col)`` points.
    The arc length is exact unless the path had to be shrunk to fit.
    """
    if not 1.0 <= length <= canvas:
        raise ValueError(f"trajectory length {length} outside [1, {canvas}]")
    rng = np.random.default_rng(seed)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    jitter = rng.uniform(0.05, 0.5)
    impulse_rate = rng.uniform(0.0, 0.06)
    accel = rng.normal(size=(n_vertices, 2)) * jitter
    kicks = rng.random(n_vertices) < impulse_rate
    kick_angle = rng.uniform(0.5 * math.pi, math.pi, size=n_vertices) * rng.choice([-1.0, 1.0], size=n_vertices)

    v = np.array([math.sin(heading), math.cos(heading)])
    pts = np.zeros((n_vertices, 2))
    for t in range(1, n_vertices):
        if kicks[t]:
            c, s = math.cos(kick_angle[t]), math.sin(kick_angle[t])
            v = np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])
        v = v + accel[t]
        v /= math.hypot(v[0], v[1]) or 1.0
        pts[t] = pts[t - 1] + v

    _, arc = _polyline(pts)
    pts *= length / arc
    extent = np.ptp(pts, axis=0).max()
    if extent > canvas - 1:
        pts *= (canvas - 1) / extent
    return _centre(pts, canvas)


def _centre(pts, canvas):
    seg, arc = _polyline(pts)
    if arc > 0:
        centroid = ((pts[1:] + pts[:-1]) * 0.5 * seg[:, None]).sum(axis=0) / arc
    else:
        centroid = pts[0]
    pts = pts - centroid + canvas // 2
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pts = pts - np.minimum(lo, 0.0) - np.maximum(hi - (canvas - 1), 0.0)
    return pts


def sample_path(points):
    """One sample per unit of arc length, at the midpoints of equal arc cells."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty trajectory")
    seg, arc = _polyline(pts)
    if arc == 0.0:
        return pts[:1].copy()
    n = max(1, int(round(arc)))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = (np.arange(n) + 0.5) * (arc / n)
    return np.stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])], axis=1)


def rasterize(trajectory, length=None, canvas=CANVAS):
    """Bilinear splat of the path samples onto the canvas, normalised to sum 1."""
    samples = sample_path(trajectory)
    r0 = np.floor(samples[:, 0]).astype(int)
    c0 = np.floor(samples[:, 1]).astype(int)
    fr = samples[:, 0] - r0
    fc = samples[:, 1] - c0
    rows = np.concatenate([r0, r0, r0 + 1, r0 + 1])
    cols = np.concatenate([c0, c0 + 1, c0, c0 + 1])
    wts = np.concatenate([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    keep = wts > 0
    rows, cols, wts = rows[keep], cols[keep], wts[keep]
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= canvas or cols.max() >= canvas:
        raise ShapeError("trajectory does not fit the kernel canvas")
    k = np.bincount(rows * canvas + cols, weights=wts, minlength=canvas * canvas)
    k = (k / k.sum()).reshape(canvas, canvas)
    if length is None:
        length = _polyline(np.asarray(trajectory, dtype=np.float64).reshape(-1, 2))[1]
    return BlurKernel(k.astype(np.float32), float(length))


@dataclass(frozen=True, eq=False)
class KernelSet:
    kernels: np.ndarray  # (n, CANVAS, CANVAS) float32
    lengths: np.ndarray  # (n,)
    seeds: np.ndarray  # (n,) per-kernel index into the seed stream

    def __len__(self):
        return len(self.kernels)

    def __getitem__(self, i):
        return BlurKernel(self.kernels[i], float(self.lengths[i]))


@dataclass(frozen=True, eq=False)
class BlurDataset:
    train: KernelSet
    test: KernelSet
    seed: int
    length_range: tuple


def synthesize_kernel(length, seed):
    return rasterize(random_trajectory(length, seed), length=length)


def _make_set(indices, seed, length_range):
    lo, hi = length_range
    kernels = np.empty((len(indices), CANVAS, CANVAS), dtype=np.float32)
    lengths = np.empty(len(indices))
    for n, j in enumerate(indices):
        rng = np.random.default_rng([seed, int(j)])
        lengths[n] = rng.uniform(lo, hi)
        kernels[n] = synthesize_kernel(lengths[n], rng).canvas
    return KernelSet(kernels, lengths, np.asarray(indices, dtype=np.int64))


def generate_blur_dataset(count, length_range=LENGTH_RANGE, split=0.25, seed=0):
    """Seeded kernels split into train/test; kernel ``j`` uses stream ``(seed, j)``.

    A full-scale configuration is ``count=80000, split=0.25``, which
    holds out 20000 test kernels.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= split < 1.0:
        raise ValueError(f"invalid split fraction {split}")
    lo, hi = length_range
    if not 1.0 <= lo <= hi <= CANVAS:
        raise ValueError(f"length range {length_range} outside [1, {CANVAS}]")
    n_test = int(round(count * split))
    idx = np.arange(count)
    return BlurDataset(
        _make_set(idx[: count - n_test], seed, length_range),
        _make_set(idx[count - n_test:], seed, length_range),
        seed,
        (float(lo), float(hi)),
    )


def simulate_observation(image, kernel, noise_sigma, seed):
    """``y = image (*) kernel + n`` with ``n ~ N(0, noise_sigma^2 I)``."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    k = kernel.canvas if isinstance(kernel, BlurKernel) else np.asarray(kernel, dtype=np.float32)
    blurred = dc.conv2d_full(img, k).data.astype(np.float64)
    noise = np.random.default_rng(seed).normal(0.0, 1.0, size=blurred.shape) * noise_sigma
    y = (blurred + noise).astype(np.float32) if noise_sigma > 0 else blurred.astype(np.float32)
    truth = {"image": img, "kernel": k, "noise_sigma": float(noise_sigma), "seed": seed}
    return Observation(y, np.clip(y, 0.0, 1.0), truth)


def save_kernel_set(kset, path, **meta):
    from gendeblur.generators.io import write_container

    manifest = {"type": "kernel_dataset", "count": len(kset), "canvas": CANVAS, "meta": meta}
    arrays = {"kernels": kset.kernels, "lengths": kset.lengths, "seeds": kset.seeds.astype(np.float32)}
    return write_container(path, manifest, arrays)


def load_kernel_set(path):
    from gendeblur.generators.io import read_container

    manifest, arrays = read_container(path)
    if manifest.get("type") != "kernel_dataset":
        raise ModelFormatError(f"{path}: not a kernel dataset container")
    return KernelSet(arrays["kernels"], arrays["lengths"].astype(np.float64), arrays["seeds"].astype(np.int64))


def save_kernel_pngs(kset, directory, prefix="kernel"):
    """16-bit grayscale previews, each max-normalised; the container stays authoritative."""
    from gendeblur.imageio import write_png16

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, k in enumerate(kset.kernels):
        p = directory / f"{prefix}_{i:05d}.png"
        write_png16(p, k / max(float(k.max()), 1e-12))
        paths.append(p)
    return paths
