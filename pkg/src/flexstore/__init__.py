"""flexstore: a storage engine built around a flexible address space.

The package has three layers plus a benchmark harness:

* ``flextree``  - in-memory extent index with O(log N) range shifts
* ``flexspace`` - persistent byte-addressed space: segmented data file,
  logical log, copy-on-write index checkpoints, GC
* ``flexdb``    - sorted key-value store kept entirely in one flexspace
* ``bench``     - workload generators, baseline indexes, crash harness
"""

from .errors import (
    CorruptionError,
    FlexStoreError,
    OutOfRangeError,
    RemapError,
    SpaceExhaustedError,
    StoreClosedError,
    UnrecoverableStoreError,
)
from .flextree import UNMAPPED, Extent, FlexTree, Run

__all__ = [
    "FlexTree",
    "Run",
    "Extent",
    "UNMAPPED",
    "FlexStoreError",
    "OutOfRangeError",
    "RemapError",
    "SpaceExhaustedError",
    "UnrecoverableStoreError",
    "CorruptionError",
    "StoreClosedError",
]

__version__ = "0.1.0"
