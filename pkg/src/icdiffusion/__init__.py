"""Desk-scale in-context image-to-image diffusion.

A denoising diffusion model conditioned on a vision-language prompt — an
example image pair, a query image, and text guidance — trained jointly on six
synthetic translation tasks and probed for generalization to held-out ones.
"""

__version__ = "0.1.0"
