import math
from typing import Dict, Iterator, List

import numpy as np

from piobtree.exceptions import LsMapRangeError


class LsMap:
    """
    Per-leaf cache of the last leaf-segment id.

    Steady-state leaves keep their cursor in the upper half of the segments, so the
    map stores ``id - L // 2`` in ``ceil(log2(ceil(L / 2)))`` bits (at least one).
    """

    def __init__(self, leaf_segments: int):
        self.leaf_segments = leaf_segments
        self.offset = leaf_segments // 2
        self.bits = max(1, math.ceil(math.log2(math.ceil(leaf_segments / 2))))
        self._stored: Dict[int, int] = {}

    def __contains__(self, leaf: int) -> bool:
        return leaf in self._stored

    def __len__(self) -> int:
        return len(self._stored)

    def __iter__(self) -> Iterator[int]:
        return iter(self._stored)

    def clamp(self, last_segment: int) -> int:
        """Encodable cursor for a leaf whose true last segment may be in the lower half."""
        return max(last_segment, self.offset)

    def set(self, leaf: int, ls_id: int) -> None:
        if not self.offset <= ls_id <= self.leaf_segments - 1:
            raise LsMapRangeError(f'last LS id {ls_id} outside [{self.offset}, {self.leaf_segments - 1}]')
        stored = ls_id - self.offset
        if stored >= 1 << self.bits:
            raise LsMapRangeError(f'last LS id {ls_id} does not fit in {self.bits} bits')
        self._stored[leaf] = stored

    def get(self, leaf: int) -> int:
        return self._stored[leaf] + self.offset

    def stored(self, leaf: int) -> int:
        return self._stored[leaf]

    def discard(self, leaf: int) -> None:
        self._stored.pop(leaf, None)

    def clear(self) -> None:
        self._stored.clear()

    def encode(self, leaves: List[int]) -> bytes:
        """Bit-pack the stored values of ``leaves`` in the given order."""
        values = np.array([self._stored[leaf] for leaf in leaves], dtype=np.uint8)
        bits = np.unpackbits(values[:, None], axis=1, bitorder='little')[:, :self.bits]
        return np.packbits(bits.ravel(), bitorder='little').tobytes()

    def decode(self, leaves: List[int], data: bytes) -> None:
        """Load values packed by ``encode`` for the same leaf order."""
        count = len(leaves)
        needed = math.ceil(count * self.bits / 8)
        if len(data) < needed:
            raise LsMapRangeError(f'LSMap image holds {len(data)} bytes, {needed} needed')
        flat = np.unpackbits(np.frombuffer(data[:needed], dtype=np.uint8), bitorder='little')
        bits = flat[:count * self.bits].reshape(count, self.bits)
        weights = 1 << np.arange(self.bits)
        values = bits.astype(np.int64) @ weights
        self._stored = {leaf: int(v) for leaf, v in zip(leaves, values)}

    def encoded_size(self, count: int) -> int:
        return math.ceil(count * self.bits / 8)
