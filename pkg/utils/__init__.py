"""
Federated SSL simulator - Utilities Package
Seed derivation, dataset archive codec and JSON record helpers.
"""
from .seeding import derive_seed, rng_for

__all__ = ['derive_seed', 'rng_for']
