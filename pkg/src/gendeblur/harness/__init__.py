"""Experiment runner and command line interface."""

from gendeblur.harness.config import ExperimentConfig, VaeSection, parse, render, validate
from gendeblur.harness.runner import cell_seed, run, summarize, sweep_blur_length, sweep_noise

__all__ = [
    "ExperimentConfig", "VaeSection", "cell_seed", "parse", "render", "run", "summarize",
    "sweep_blur_length", "sweep_noise", "validate",
]
