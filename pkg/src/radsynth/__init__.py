"""Desk-scale workbench for synthesizing dental panoramic radiograph
crops with a WGAN-GP and evaluating the output objectively (FID, t-SNE)
and through an expert-rating protocol with nonparametric statistics."""

__version__ = "0.1.0"
