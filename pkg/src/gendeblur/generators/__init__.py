"""Decoder architectures, model files and VAE training."""

from gendeblur.generators.io import load_model, read_container, save_model, write_container
from gendeblur.generators.layers import (
    LayerSpec,
    blur_decoder_arch,
    blur_encoder_arch,
    image_decoder_arch,
    image_encoder_arch,
    infer_shapes,
)
from gendeblur.generators.model import GeneratorModel, decode, decode_array, random_model
from gendeblur.generators.toyimages import toy_images
from gendeblur.generators.vae import Vae, VaeConfig, fit_vae, kl_standard_normal, reparameterize, train_vae

__all__ = [
    "GeneratorModel", "LayerSpec", "Vae", "VaeConfig", "blur_decoder_arch", "blur_encoder_arch",
    "decode", "decode_array", "fit_vae", "image_decoder_arch", "image_encoder_arch", "infer_shapes",
    "kl_standard_normal", "load_model", "random_model", "read_container", "reparameterize",
    "save_model", "toy_images", "train_vae", "write_container",
]
