"""Blind image deblurring with pretrained generative priors."""

__version__ = "0.1.0"
