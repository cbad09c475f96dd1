"""Deterministic workload generation for the KV benchmarks.

Key distributions: sequential, uniform, zipfian (alpha 0.99, whole key
population), zipfian-composite (the first three decimal digits of the
key index are zipfian, the rest uniform), and latest (zipfian over
recency, for read-latest mixes).  Keys are fixed-width decimal strings
so byte order equals numeric order; values are seeded random bytes.
"""

from __future__ import annotations

import random
from bisect import bisect_left
from dataclasses import dataclass, field

SIZE_PRESETS = {
    # average key+value byte sizes modeled on published production mixes
    "zippydb": (48, 43),
    "udb": (27, 127),
    "sys": (28, 396),
}

# op mixes: fractions of read / update / insert / scan / rmw
YCSB_MIXES = {
    "A": {"read": 0.5, "update": 0.5},
    "B": {"read": 0.95, "update": 0.05},
    "C": {"read": 1.0},
    "D": {"read": 0.95, "insert": 0.05},
    "E": {"scan": 0.95, "insert": 0.05},
    "F": {"read": 0.5, "rmw": 0.5},
}

YCSB_DISTRIBUTIONS = {"A": "zipfian", "B": "zipfian", "C": "zipfian",
                      "D": "latest", "E": "zipfian", "F": "zipfian"}


@dataclass
class WorkloadSpec:
    distribution: str = "zipfian"   # sequential|uniform|zipfian|zipfian-composite|latest
    ycsb: str | None = None         # A..F; overrides mix and distribution
    mix: dict = field(default_factory=lambda: {"read": 1.0})
    key_count: int = 100_000
    op_count: int = 100_000
    key_size: int = 27
    value_size: int = 127
    scan_length: int = 50
    threads: int = 1
    seed: int = 42

    def __post_init__(self):
        if self.ycsb:
            letter = self.ycsb.upper()
            if letter not in YCSB_MIXES:
                raise ValueError(f"unknown YCSB workload {self.ycsb!r}")
            self.mix = dict(YCSB_MIXES[letter])
            self.distribution = YCSB_DISTRIBUTIONS[letter]
        if self.key_size < 12:
            raise ValueError("key_size must fit the decimal key format")

    def params(self) -> dict:
        return {
            "distribution": self.distribution,
            "ycsb": self.ycsb or "-",
            "mix": "/".join(f"{k}:{v:g}" for k, v in sorted(self.mix.items())),
            "key_count": self.key_count,
            "op_count": self.op_count,
            "key_size": self.key_size,
            "value_size": self.value_size,
            "scan_length": self.scan_length,
            "threads": self.threads,
            "seed": self.seed,
        }


class ZipfSampler:
    """Zipf(alpha) over ranks 0..n-1 via a precomputed CDF."""

    def __init__(self, n: int, alpha: float = 0.99):
        self.n = n
        acc = 0.0
        cdf = []
        for i in range(1, n + 1):
            acc += 1.0 / (i ** alpha)
            cdf.append(acc)
        self._cdf = [c / acc for c in cdf]

    def sample(self, rng: random.Random) -> int:
        return bisect_left(self._cdf, rng.random())


class KeyChooser:
    """Maps a distribution name to key indexes, deterministically."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.population = spec.key_count  # grows with inserts
        dist = spec.distribution
        if dist in ("zipfian", "latest"):
            self._zipf = ZipfSampler(spec.key_count)
        elif dist == "zipfian-composite":
            self._zipf = ZipfSampler(min(1000, spec.key_count))
        else:
            self._zipf = None
        self._seq = 0

    def next_index(self, rng: random.Random) -> int:
        dist = self.spec.distribution
        n = self.population
        if dist == "sequential":
            i = self._seq % n
            self._seq += 1
            return i
        if dist == "uniform":
            return rng.randrange(n)
        if dist == "zipfian":
            return self._zipf.sample(rng) % n
        if dist == "latest":
            return (n - 1 - self._zipf.sample(rng)) % n
        if dist == "zipfian-composite":
            # First three decimal digits zipfian, remainder uniform.
            buckets = min(1000, n)
            bucket = self._zipf.sample(rng) % buckets
            span = max(1, n // buckets)
            return min(n - 1, bucket * span + rng.randrange(span))
        raise ValueError(f"unknown distribution {dist!r}")

    def new_index(self) -> int:
        i = self.population
        self.population += 1
        return i


def make_key(index: int, key_size: int) -> bytes:
    return b"%0*d" % (key_size, index)


def make_value(rng: random.Random, value_size: int) -> bytes:
    return rng.randbytes(value_size)
