"""Named RNG substreams.

Every stochastic choice in the pipeline draws from a generator seeded by
hashing (root_seed, *labels). Two runs with the same root seed therefore
agree stream-for-stream, and ablation arms that share labels see identical
noise even when other arms consume a different number of draws.
"""

import hashlib

import numpy as np
import torch


def substream_seed(root_seed: int, *labels) -> int:
    """Derive a 63-bit seed from a root seed and a label path."""
    key = ":".join([str(int(root_seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    # 63 bits keeps the value positive for every consumer
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def torch_generator(root_seed: int, *labels) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(substream_seed(root_seed, *labels))
    return gen


def numpy_generator(root_seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root_seed, *labels))
