"""
Reproducible random drivers.

A stream is identified by (master_seed, purpose tag, index). The id is turned
into a numpy SeedSequence that keys a counter-based Philox generator, so two
different ids give independent sequences and the same id always replays the
same draws, whichever process or worker asks for it.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np


def tag_key(tag: str) -> int:
    """Stable 64-bit integer for a purpose tag (Python's hash() is salted per process)."""
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


@dataclass
class DriverStream:
    master_seed: int
    tag: str
    index: int = 0
    position: int = field(default=0, init=False)
    _gen: np.random.Generator = field(default=None, init=False, repr=False)

    def __post_init__(self):
        seq = np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=(tag_key(self.tag), int(self.index)))
        self._gen = np.random.Generator(np.random.Philox(seq))

    @property
    def stream_id(self) -> tuple:
        return (int(self.master_seed), self.tag, int(self.index))

    @property
    def gen(self) -> np.random.Generator:
        self.position += 1
        return self._gen

    def child(self, tag: str, index: int = 0) -> "DriverStream":
        """Independent stream for a sub-purpose; the parent index is part of the new tag."""
        return DriverStream(self.master_seed, f"{self.tag}#{self.index}/{tag}", index)

    def replay(self) -> "DriverStream":
        return DriverStream(self.master_seed, self.tag, self.index)

    # convenience draws; every call advances the position counter
    def normal(self, n: int) -> np.ndarray:
        return self.gen.standard_normal(n)

    def uniform(self, n: int) -> np.ndarray:
        return self.gen.random(n)

    def poisson(self, lam) -> np.ndarray:
        return self.gen.poisson(lam)


def block_streams(master_seed: int, tag: str, replicates: int, block_size: int) -> list:
    """(stream, n_replicates) per block; the split depends only on the counts."""
    out = []
    for i, start in enumerate(range(0, replicates, block_size)):
        out.append((DriverStream(master_seed, tag, i), min(block_size, replicates - start)))
    return out
