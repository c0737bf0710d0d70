"""Named random substreams derived from one run seed."""
import hashlib

import numpy as np
import torch


def substream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def torch_rng(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, name))
    return g
