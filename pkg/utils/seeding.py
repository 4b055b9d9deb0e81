"""
Deterministic seed derivation.

Every random stream in the simulator is keyed by the master seed plus a tuple of
tags (stage name, center id, round, ...), so streams never depend on execution order.
"""
import hashlib
from typing import Union

import numpy as np

Tag = Union[int, str]


def derive_seed(master: int, *tags: Tag) -> int:
    """
    Derive a 63-bit seed from a master seed and a tag path.

    Args:
        master: Experiment master seed
        *tags: Stage/center/round identifiers

    Returns:
        Non-negative integer usable by numpy.random.default_rng
    """
    text = "/".join([str(int(master))] + [_tag(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def rng_for(master: int, *tags: Tag) -> np.random.Generator:
    """numpy Generator seeded by derive_seed(master, *tags)."""
    return np.random.default_rng(derive_seed(master, *tags))


def _tag(tag: Tag) -> str:
    # numpy integers and Python ints must map to the same stream
    return f"s:{tag}" if isinstance(tag, str) else f"i:{int(tag)}"
