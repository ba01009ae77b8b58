"""Mode dispatch, sweeps and run manifests.

Every run writes ``manifest.json`` first (config echo, seeds, library
versions), so a failed solve still leaves a reproducible record.  Outputs
contain no timestamps or wall-clock values; rerunning a config on the same
platform reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

import gendeblur
from gendeblur import blursynth, metrics, solvers
from gendeblur.errors import ShapeError
from gendeblur.generators import (
    VaeConfig,
    blur_decoder_arch,
    blur_encoder_arch,
    fit_vae,
    image_decoder_arch,
    image_encoder_arch,
    load_model,
    save_model,
    toy_images,
)
from gendeblur.harness.config import check_paths, render, to_dict
from gendeblur.imageio import read_image_dir, read_png, write_png

RESULT_FIELDS = ["image_id", "method", "noise_sigma", "blur_length", "psnr_db", "ssim", "range_error", "seed"]
SUMMARY_FIELDS = ["noise_sigma", "blur_length", "method", "mean_psnr", "mean_ssim", "count", "n_infinite"]


def cell_seed(*parts):
    """Stable 63-bit seed from any JSON-serialisable parts."""
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


def _fmt(x):
    """Round-trippable text for CSV cells; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isinf(x):
            return repr(metrics.PSNR_CAP)
        return repr(x)
    return str(x)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def write_manifest(cfg, out, extra=None):
    manifest = {
        "config": to_dict(cfg),
        "seed": cfg.seed,
        "versions": {
            "gendeblur": gendeblur.__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    _write_json(out / "manifest.json", manifest)
    (out / "config.json").write_text(render(cfg))
    return manifest


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def _gen_blurs(cfg, out):
    ds = blursynth.generate_blur_dataset(cfg.count, (cfg.length_min, cfg.length_max), cfg.split, cfg.seed)
    blursynth.save_kernel_set(ds.train, out / "kernels_train.gdbc", seed=cfg.seed, split="train")
    blursynth.save_kernel_set(ds.test, out / "kernels_test.gdbc", seed=cfg.seed, split="test")
    if cfg.write_pngs:
        blursynth.save_kernel_pngs(ds.train, out / "png_train")
        blursynth.save_kernel_pngs(ds.test, out / "png_test")
    summary = {"train": len(ds.train), "test": len(ds.test),
               "all_valid": bool(all(k.check() for ks in (ds.train, ds.test) for k in ks))}
    _write_json(out / "summary.json", summary)
    return summary


def _load_images(cfg):
    if cfg.image_dir:
        ids, imgs = read_image_dir(cfg.image_dir)
        if not imgs:
            raise FileNotFoundError(f"image_dir: no PNG files in {cfg.image_dir}")
        return ids, imgs
    size = cfg.vae.image_size
    imgs = toy_images(cfg.toy_images, size, cfg.vae.channels, seed=cfg.seed)
    return [f"toy{j:04d}" for j in range(cfg.toy_images)], list(imgs)


def _train_vae(cfg, out):
    v = cfg.vae
    vcfg = VaeConfig(latent_dim=v.latent_dim, batch_size=v.batch_size, learning_rate=v.learning_rate,
                     epochs=v.epochs, seed=cfg.seed, steps=v.steps, obs_std=v.obs_std)
    if v.data == "kernels":
        data = blursynth.load_kernel_set(cfg.kernels).kernels
        enc, dec = blur_encoder_arch(), blur_decoder_arch()
    else:
        _, imgs = _load_images(cfg)
        data = np.stack(imgs)
        enc = image_encoder_arch(tuple(reversed(v.widths)), data.shape[1])
        dec = image_decoder_arch(v.widths, data.shape[-1], data.shape[1])
    vae, hist, _ = fit_vae(data, vcfg, enc, dec)
    model = vae.decoder_model({"vae_config": asdict(vcfg), "elbo_start": hist["elbo_start"],
                               "elbo_end": hist["elbo_end"], "steps": len(hist["elbo"])})
    save_model(model, out / "model.gdbc")
    _write_csv(out / "history.csv", ["step", "elbo"],
               [{"step": i, "elbo": float(e)} for i, e in enumerate(hist["elbo"])])
    summary = {"elbo_start": hist["elbo_start"], "elbo_end": hist["elbo_end"], "steps": len(hist["elbo"])}
    _write_json(out / "summary.json", summary)
    return summary


def _project(cfg, out):
    g_i = load_model(cfg.image_model)
    img = read_png(cfg.image)
    z, i_range = solvers.range_project(img, g_i, cfg.project_steps, cfg.project_step_size, cfg.seed)
    write_png(out / "i_range.png", i_range)
    rec = {"z_test": [float(v) for v in z], "range_error": metrics.range_error(img, i_range),
           "metrics": metrics.evaluate(i_range, img).to_json()}
    _write_json(out / "result.json", rec)
    return rec


def _kernel_for(cfg, index, length, seed):
    """Kernel from the configured container, or a fresh one of the requested length."""
    if cfg.kernels:
        ks = blursynth.load_kernel_set(cfg.kernels)
        return ks[index % len(ks)]
    return blursynth.synthesize_kernel(length, seed)


def _solve(method, obs, g_i, g_k, cfg, seed):
    if method == "dd":
        scfg = type(cfg.dd)(**{**asdict(cfg.dd), "seed": seed})
        return solvers.deep_deblur(obs, g_i, g_k, scfg), scfg
    scfg = type(cfg.dds)(**{**asdict(cfg.dds), "seed": seed})
    return solvers.deep_deblur_slack(obs, g_i, g_k, scfg), scfg


def _deblur(cfg, out, method):
    g_i, g_k = load_model(cfg.image_model), load_model(cfg.kernel_model)
    truth = None
    extra = {}
    if cfg.blurred:
        obs = read_png(cfg.blurred)
    else:
        truth = read_png(cfg.image)
        kidx = cfg.kernel_index or 0
        kernel = _kernel_for(cfg, kidx, cfg.blur_length, cell_seed(cfg.seed, "kernel"))
        sim = blursynth.simulate_observation(truth, kernel, cfg.noise_sigma, cell_seed(cfg.seed, "noise"))
        obs = sim.y
        write_png(out / "y.png", sim.y_clipped)
        extra = {"noise_sigma": cfg.noise_sigma, "kernel_index": kidx if cfg.kernels else None,
                 "blur_length": None if cfg.kernels else cfg.blur_length,
                 "blurred_metrics": metrics.evaluate(sim.y_clipped, truth).to_json()}
    if tuple(g_i.output_shape) != tuple(np.shape(obs)):
        raise ShapeError(f"image model emits {g_i.output_shape}, input image is {np.shape(obs)}")
    result, scfg = _solve(method, obs, g_i, g_k, cfg, cfg.seed)
    return solvers.save_result(result, scfg, out, truth_image=truth, extra=extra)


def _sweep_cell(cfg, g_i, g_k, image_id, index, image, method, sigma, length):
    # the observation seed leaves out the method so every method sees the same y
    obs_seed = cell_seed(cfg.seed, image_id, sigma, length)
    solve_seed = cell_seed(cfg.seed, image_id, method, sigma, length)
    kernel = _kernel_for(cfg, index, length, cell_seed(cfg.seed, image_id, "kernel", length))
    sim = blursynth.simulate_observation(image, kernel, sigma, obs_seed)
    result, _ = _solve(method, sim.y, g_i, g_k, cfg, solve_seed % (2 ** 32))
    rep = metrics.evaluate(result.i_hat, image)
    rerr = None
    if cfg.range_error:
        _, i_range = solvers.range_project(image, g_i, cfg.project_steps, cfg.project_step_size, obs_seed % (2 ** 32))
        rerr = metrics.range_error(image, i_range)
    return {"image_id": image_id, "method": method, "noise_sigma": float(sigma), "blur_length": float(length),
            "psnr_db": rep.psnr_db, "ssim": rep.ssim, "range_error": rerr, "seed": solve_seed % (2 ** 32)}


def summarize(rows):
    """Mean PSNR/SSIM per (sigma, length, method) cell, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["noise_sigma"], r["blur_length"], r["method"]), []).append(r)
    out = []
    for (sigma, length, method), rs in groups.items():
        s = metrics.aggregate([metrics.MetricReport(r["psnr_db"], r["ssim"], 0.0) for r in rs])
        out.append({"noise_sigma": sigma, "blur_length": length, "method": method, "mean_psnr": s.mean_psnr,
                    "mean_ssim": s.mean_ssim, "count": s.count, "n_infinite": s.n_infinite})
    return out


def _sweep(cfg, out):
    g_i, g_k = load_model(cfg.image_model), load_model(cfg.kernel_model)
    ids, imgs = _load_images(cfg)
    sigmas = cfg.noise_sigmas or (cfg.noise_sigma,)
    lengths = cfg.blur_lengths or (cfg.blur_length,)
    cells = [(ids[j], j, imgs[j], m, s, l) for s in sigmas for l in lengths for m in cfg.methods for j in range(len(ids))]
    cell_dir = out / "cells"
    cell_dir.mkdir(exist_ok=True)

    def work(n_cell):
        n, cell = n_cell
        row = _sweep_cell(cfg, g_i, g_k, *cell)
        # each worker writes only its own file
        _write_json(cell_dir / f"cell_{n:05d}.json", row)
        return n

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        list(pool.map(work, enumerate(cells)))
    rows = [json.loads((cell_dir / f"cell_{n:05d}.json").read_text()) for n in range(len(cells))]
    _write_csv(out / "results.csv", RESULT_FIELDS, rows)
    summary = summarize(rows)
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    write_manifest(cfg, out, {"image_ids": ids, "cell_seeds": [r["seed"] for r in rows]})
    return {"rows": len(rows), "image_ids": ids}


def sweep_noise(cfg, sigmas):
    """Sweep over noise levels only (blur from ``cfg.kernels`` or ``cfg.blur_length``)."""
    return run(replace(cfg, mode="sweep", noise_sigmas=tuple(sigmas), blur_lengths=()))


def sweep_blur_length(cfg, lengths):
    """Sweep over freshly synthesised kernels of the given lengths at ``cfg.noise_sigma``."""
    return run(replace(cfg, mode="sweep", blur_lengths=tuple(lengths), noise_sigmas=(), kernels=None))


_MODES = {
    "gen-blurs": _gen_blurs,
    "train-vae": _train_vae,
    "project": _project,
    "deblur-dd": lambda cfg, out: _deblur(cfg, out, "dd"),
    "deblur-dds": lambda cfg, out: _deblur(cfg, out, "dds"),
    "sweep": _sweep,
}


def run(cfg):
    """Execute ``cfg``; returns the mode's summary dict.

    Errors propagate to the caller after the manifest has been written.
    """
    check_paths(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(cfg, out)
    return _MODES[cfg.mode](cfg, out)
