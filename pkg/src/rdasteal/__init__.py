"""Prototype-guided, query-efficient stealing of black-box image encoders, with baselines,
output-perturbation defenses and the downstream evaluation protocol."""

__version__ = "0.1.0"
