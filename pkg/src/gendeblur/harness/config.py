"""Experiment configuration: parsing, validation and canonical rendering.

A config is a JSON object.  Top-level keys are the fields of
:class:`ExperimentConfig`; the ``dd``, ``dds`` and ``vae`` sections hold
solver and training settings.  ``render`` produces canonical JSON, and
``parse(render(c)) == c`` holds for every valid config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from gendeblur.errors import ConfigError
from gendeblur.solvers import DDConfig, DDSConfig

MODES = ("gen-blurs", "train-vae", "project", "deblur-dd", "deblur-dds", "sweep")
METHODS = ("dd", "dds")


@dataclass(frozen=True)
class VaeSection:
    """Training settings for ``train-vae``; ``data`` is ``kernels`` or ``images``."""

    data: str = "kernels"
    latent_dim: int = 50
    batch_size: int = 32
    learning_rate: float = 3e-4
    epochs: int = 20
    steps: int | None = None
    obs_std: float = 0.01
    widths: tuple = (32, 16, 8)
    channels: int = 1
    image_size: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    output_dir: str
    seed: int = 0
    # models and inputs
    image_model: str | None = None
    kernel_model: str | None = None
    image: str | None = None
    blurred: str | None = None
    image_dir: str | None = None
    toy_images: int = 0
    kernels: str | None = None
    kernel_index: int | None = None
    # blur dataset generation
    count: int = 1000
    split: float = 0.25
    length_min: float = 5.0
    length_max: float = 28.0
    write_pngs: bool = False
    # observation model
    blur_length: float = 15.0
    noise_sigma: float = 0.01
    # range projection
    project_steps: int = 6000
    project_step_size: float = 0.01
    # sweeps
    noise_sigmas: tuple = ()
    blur_lengths: tuple = ()
    methods: tuple = ("dd",)
    range_error: bool = False
    workers: int = 1
    # sections
    dd: DDConfig = field(default_factory=DDConfig)
    dds: DDSConfig = field(default_factory=DDSConfig)
    vae: VaeSection = field(default_factory=VaeSection)


_SECTIONS = {"dd": DDConfig, "dds": DDSConfig, "vae": VaeSection}
_TUPLES = {"noise_sigmas": float, "blur_lengths": float, "methods": str}


def _coerce(path, value, kind):
    """Check ``value`` against the annotation string ``kind`` and convert."""
    optional = kind.endswith("| None")
    base = kind.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "may not be null")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if base == "tuple":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(path, f"unsupported field type {kind}")


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")
    kwargs = {}
    for name, value in data.items():
        path = prefix + name
        if name in _SECTIONS and cls is ExperimentConfig:
            kwargs[name] = _build(_SECTIONS[name], value, path + ".")
            continue
        kwargs[name] = _coerce(path, value, known[name].type)
        if name in _TUPLES and cls is ExperimentConfig:
            kwargs[name] = tuple(_coerce(f"{path}[{i}]", v, _TUPLES[name].__name__) for i, v in enumerate(value))
        if name == "widths":
            kwargs[name] = tuple(_coerce(f"{path}[{i}]", v, "int") for i, v in enumerate(value))
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(prefix + exc.field, exc.message) from None
    except TypeError as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from None


def parse(data):
    """Validated :class:`ExperimentConfig` from a JSON-like dict."""
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg):
    """Structural checks; raises :class:`ConfigError` naming the field."""
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {', '.join(MODES)}")
    if not cfg.output_dir:
        raise ConfigError("output_dir", "required")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    if cfg.toy_images < 0:
        raise ConfigError("toy_images", "must be >= 0")
    if cfg.noise_sigma < 0 or any(s < 0 for s in cfg.noise_sigmas):
        raise ConfigError("noise_sigmas" if cfg.noise_sigmas else "noise_sigma", "must be >= 0")
    for i, length in enumerate(cfg.blur_lengths):
        if not 1.0 <= length <= 28.0:
            raise ConfigError(f"blur_lengths[{i}]", "must lie in [1, 28]")
    for i, m in enumerate(cfg.methods):
        if m not in METHODS:
            raise ConfigError(f"methods[{i}]", f"must be one of {', '.join(METHODS)}")
    if cfg.mode == "gen-blurs":
        if cfg.count < 1:
            raise ConfigError("count", "must be >= 1")
        if not 0.0 <= cfg.split < 1.0:
            raise ConfigError("split", "must lie in [0, 1)")
        if not 1.0 <= cfg.length_min <= cfg.length_max <= 28.0:
            raise ConfigError("length_min", "need 1 <= length_min <= length_max <= 28")
    if cfg.mode == "train-vae":
        if cfg.vae.data not in ("kernels", "images"):
            raise ConfigError("vae.data", "must be 'kernels' or 'images'")
        if cfg.vae.data == "kernels" and not cfg.kernels:
            raise ConfigError("kernels", "required to train a kernel VAE")
        if cfg.vae.data == "images" and not (cfg.image_dir or cfg.toy_images):
            raise ConfigError("image_dir", "train-vae on images needs image_dir or toy_images")
    if cfg.mode in ("project", "deblur-dd", "deblur-dds", "sweep") and not cfg.image_model:
        raise ConfigError("image_model", "required for this mode")
    if cfg.mode in ("deblur-dd", "deblur-dds", "sweep") and not cfg.kernel_model:
        raise ConfigError("kernel_model", "required for this mode")
    if cfg.mode == "project" and not cfg.image:
        raise ConfigError("image", "required for project")
    if cfg.mode in ("deblur-dd", "deblur-dds") and not (cfg.image or cfg.blurred):
        raise ConfigError("image", "deblurring needs a clean image to blur or a blurred input")
    if cfg.mode == "sweep":
        if not (cfg.image_dir or cfg.toy_images):
            raise ConfigError("image_dir", "sweep needs image_dir or toy_images")
        if not cfg.noise_sigmas and not cfg.blur_lengths:
            raise ConfigError("noise_sigmas", "sweep needs at least one non-empty axis")
        if not cfg.methods:
            raise ConfigError("methods", "must not be empty")
    if cfg.project_steps < 0 or cfg.project_step_size <= 0:
        raise ConfigError("project_steps", "steps must be >= 0 and step size > 0")
    return cfg


def check_paths(cfg):
    """Raise ``FileNotFoundError`` for referenced inputs that do not exist."""
    for name in ("image_model", "kernel_model", "image", "blurred", "image_dir", "kernels"):
        value = getattr(cfg, name)
        if value is not None and not Path(value).exists():
            raise FileNotFoundError(f"{name}: {value} does not exist")


def to_dict(cfg):
    d = asdict(cfg)
    for name in _TUPLES:
        d[name] = list(d[name])
    d["vae"]["widths"] = list(d["vae"]["widths"])
    return d


def render(cfg):
    """Canonical JSON text (sorted keys, two-space indent, trailing newline)."""
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return data


def merge(base, overrides):
    """Recursively overlay ``overrides`` (CLI values) on ``base`` (file values)."""
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def with_changes(cfg, **kw):
    return replace(cfg, **kw)
