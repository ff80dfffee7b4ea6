"""Diffusion bridge critics: bridge schedules, quantile losses, a small
numpy critic network, toy environments with return oracles and a CLI."""

__version__ = "0.1.0"
