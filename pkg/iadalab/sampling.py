"""Class-balanced batch construction and the optimal per-class batch allocation."""
import logging
from dataclasses import dataclass

import numpy as np
import pyrsistent as pyr

from iadalab.domains import DomainError, largest_remainder, validate_proportions

logger = logging.getLogger(__name__)


class SamplingError(ValueError):
    """Raised for invalid allocations or batches that cannot be drawn."""


class ClassIndex:
    """Per-class sorted position arrays over a labeled sample set.

    Positions are 0-based row indices. Each class keeps its sorted positions
    from construction plus a persistent set of removed positions, so lookups
    (binary search plus a set lookup) and removals both cost O(log n_c) and a
    removal shares every array with its parent. Instances are immutable.

    Args:
        labels (array-like): Labels in {1..n_classes}.
        n_classes (int): Number of classes C.
    """

    def __init__(self, labels, n_classes):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 1 or labels.max() > n_classes):
            raise SamplingError(f"labels must lie in 1..{n_classes}")
        self.n_classes = n_classes
        self.n = labels.size
        base = []
        for c in range(n_classes):
            positions = np.flatnonzero(labels == c + 1)
            positions.setflags(write=False)
            base.append(positions)
        self._base = tuple(base)
        self._removed = pyr.pvector([pyr.pset() for _ in range(n_classes)])
        self.class_counts = self._counts()

    def _counts(self):
        counts = np.array([m.size - len(r) for m, r in zip(self._base, self._removed)], dtype=np.int64)
        counts.setflags(write=False)
        return counts

    def members(self, c):
        """Sorted positions of 0-based class ``c``."""
        m, removed = self._base[c], self._removed[c]
        if not removed:
            return m
        kept = m[~np.isin(m, np.fromiter(removed, dtype=np.int64, count=len(removed)))]
        kept.setflags(write=False)
        return kept

    def contains(self, c, position):
        m = self._base[c]
        i = np.searchsorted(m, position)
        return bool(i < m.size and m[i] == position and int(position) not in self._removed[c])

    def class_of(self, position):
        """Returns the 1-based label of a position, or raises if it is not indexed."""
        for c in range(self.n_classes):
            if self.contains(c, position):
                return c + 1
        raise SamplingError(f"position {position} is not indexed")

    def without(self, c, position):
        """A new index with ``position`` removed from class ``c``."""
        if not self.contains(c, position):
            raise SamplingError(f"position {position} is not in class {c + 1}")
        clone = object.__new__(ClassIndex)
        clone.n_classes = self.n_classes
        clone.n = self.n - 1
        clone._base = self._base
        clone._removed = self._removed.set(c, self._removed[c].add(int(position)))
        clone.class_counts = clone._counts()
        return clone


@dataclass(frozen=True)
class BatchAllocation:
    """Per-class batch sizes: ``b_raw`` from the formula, ``b`` as used, ``b_int`` as realized.

    ``b`` equals ``b_raw`` in raw mode and its rescaling to ``B`` in normalized mode.
    """
    b: np.ndarray
    b_int: np.ndarray
    B: int
    normalized: bool
    b_raw: np.ndarray

    @property
    def total(self):
        return int(self.b_int.sum())

    @property
    def budget_met(self):
        """Whether the unscaled formula itself sums to ``B``."""
        return bool(np.isclose(self.b_raw.sum(), self.B))


def allocate_batches(pi_s, pi_t, B, normalized=True):
    """Per-class batch sizes ``b_i = B * sqrt(w_i / sum_j w_j)`` with ``w_i = min(pi_s_i, pi_t_i)``.

    The raw formula does not generally sum to ``B``. In normalized mode ``b`` is
    rescaled by ``B / sum(b)`` and rounded by largest remainder, so the realized
    integers sum to ``B`` exactly; raw mode rounds each entry independently.
    Both modes floor every class at one sample.

    Args:
        pi_s (array-like): Source class proportions.
        pi_t (array-like): Target class proportions.
        B (int): Total batch budget.
        normalized (bool): Whether to enforce ``sum(b_int) == B``.

    Returns:
        BatchAllocation: The allocation.

    Raises:
        SamplingError: If ``B < C`` or the proportion vectors are invalid.
    """
    try:
        pi_s = validate_proportions(pi_s, "pi_s")
        pi_t = validate_proportions(pi_t, "pi_t")
    except DomainError as e:
        raise SamplingError(str(e)) from e
    if pi_s.shape != pi_t.shape:
        raise SamplingError(f"pi_s and pi_t differ in length: {pi_s.size} vs {pi_t.size}")
    C = pi_s.size
    B = int(B)
    if B < C:
        raise SamplingError(f"batch budget B={B} is smaller than the class count C={C}")
    w = np.minimum(pi_s, pi_t)
    b_raw = B * np.sqrt(w / w.sum())
    b = b_raw
    if normalized:
        b = b_raw * (B / b_raw.sum())
        b_int = largest_remainder(B, b)
        # minority classes must appear in every batch
        while np.any(b_int < 1):
            short = int(np.argmin(b_int))
            b_int[int(np.argmax(b_int))] -= 1
            b_int[short] += 1
    else:
        b_int = np.maximum(1, np.rint(b)).astype(np.int64)
        if not np.isclose(b.sum(), B):
            logger.warning(f"Raw allocation sums to {b.sum():.4f}, not the budget B={B}")
    return BatchAllocation(b=b, b_int=b_int, B=B, normalized=normalized, b_raw=b_raw)


def sample_balanced_batch(idx, alloc, rng):
    """Draws ``alloc.b_int[c]`` positions uniformly from each class ``c``.

    Within a batch a class is sampled without replacement when it has enough
    members, with replacement otherwise. Batches are independent draws.

    Args:
        idx (ClassIndex): The per-class index.
        alloc (BatchAllocation): Per-class counts.
        rng (np.random.Generator): The run's random stream.

    Returns:
        np.ndarray: Positions, grouped by class in class order.

    Raises:
        SamplingError: If a class with a positive allocation has no members.
    """
    if alloc.b_int.size != idx.n_classes:
        raise SamplingError(f"allocation has {alloc.b_int.size} classes, index has {idx.n_classes}")
    chosen = []
    for c, k in enumerate(alloc.b_int):
        if k == 0:
            continue
        members = idx.members(c)
        if members.size == 0:
            raise SamplingError(f"class {c + 1} has no samples but an allocation of {k}")
        chosen.append(rng.choice(members, size=int(k), replace=bool(k > members.size)))
    return np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)


def sample_uniform_batch(n, size, rng):
    """Uniform positions from an unlabeled pool (without replacement when possible)."""
    if n < 1:
        raise SamplingError("cannot sample from an empty pool")
    return rng.choice(n, size=int(size), replace=bool(size > n))
