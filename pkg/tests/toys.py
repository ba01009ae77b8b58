"""Small random decoders for solver tests."""

import numpy as np

from gendeblur.generators.layers import L
from gendeblur.generators.model import random_model


def toy_image_decoder(latent_dim=2, size=8, hidden=16, seed=0):
    layers = [L("dense", units=hidden), L("relu"), L("dense", units=size * size),
              L("reshape", shape=(1, size, size)), L("sigmoid")]
    return random_model(latent_dim, layers, kind="image", seed=seed)


def toy_kernel_decoder(latent_dim=2, size=3, hidden=8, seed=1):
    layers = [L("dense", units=hidden), L("relu"), L("dense", units=size * size),
              L("reshape", shape=(1, size, size)), L("sigmoid")]
    return random_model(latent_dim, layers, kind="kernel", seed=seed)
