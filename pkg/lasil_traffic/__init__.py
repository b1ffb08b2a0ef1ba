"""LASIL traffic simulator.

A desk-scale microscopic traffic simulator whose driving policy is learned
from recorded trajectories with learner-aware supervised imitation learning:
- Road networks with lane geometry, on-road projection and signals
- Graph attention policy predicting Gaussian future trajectories
- Conditional VAE augmentation of expert states toward learner states
- LQR smoothing and closed-loop simulation
- Microscopic and macroscopic realism metrics

Use `lasil-traffic --help` for the command line.
"""

from __future__ import annotations

from .const import VERSION

__version__ = VERSION
