"""Desk-scale verification beds: synthetic surveillance videos and the MNIST toy ablation."""

from .synthetic import SynthConfig, gen_synthetic, make_video, render

__all__ = ["SynthConfig", "gen_synthetic", "make_video", "render"]
