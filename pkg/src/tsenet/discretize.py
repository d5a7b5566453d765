"""Height discretization (uniform, log-space, hierarchical bi-cut) and ordinal codes.

A scheme with ``N`` classes has ``N - 1`` interior cuts.  Intervals are
half-open, so a height equal to a cut belongs to the upper class.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

STRATEGIES = ("UD", "SID", "HBC")


@dataclass(frozen=True)
class BinScheme:
    strategy: str
    num_classes: int
    h_min: float
    h_max: float
    edges: tuple[float, ...]

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if len(self.edges) != self.num_classes - 1:
            raise ValueError(
                f"{self.strategy}: {self.num_classes} classes need {self.num_classes - 1} edges, "
                f"got {len(self.edges)}"
            )
        e = np.asarray(self.edges)
        if np.any(np.diff(e) <= 0):
            raise ValueError(f"{self.strategy}: edges are not strictly increasing: {list(e)}")
        if e[0] <= self.h_min or e[-1] > self.h_max:
            raise ValueError(
                f"{self.strategy}: edges {list(e)} fall outside ({self.h_min}, {self.h_max}]"
            )

    @property
    def num_cuts(self) -> int:
        return self.num_classes - 1

    def lower_bounds(self) -> np.ndarray:
        return np.concatenate([[self.h_min], self.edges])

    def upper_bounds(self) -> np.ndarray:
        return np.concatenate([self.edges, [self.h_max]])


def _check_range(h_min: float, h_max: float, n: int) -> None:
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    if not h_max > h_min:
        raise ValueError(f"degenerate height range [{h_min}, {h_max}]")


def ud_edges(h_min: float, h_max: float, n: int) -> BinScheme:
    """Evenly spaced cuts over ``[h_min, h_max]``."""
    _check_range(h_min, h_max, n)
    i = np.arange(1, n)
    edges = h_min + (h_max - h_min) * i / n
    return BinScheme("UD", n, float(h_min), float(h_max), tuple(float(v) for v in edges))


def sid_edges(h_min: float, h_max: float, n: int, offset: float | None = None) -> BinScheme:
    """Cuts evenly spaced in log-height.

    ``offset`` shifts heights before taking logs; by default 1 m is added when
    ``h_min`` is not positive, so ranges starting at ground level work.
    """
    _check_range(h_min, h_max, n)
    if offset is None:
        offset = 1.0 if h_min <= 0 else 0.0
    lo, hi = h_min + offset, h_max + offset
    if lo <= 0:
        raise ValueError(f"SID needs a positive lower bound, got h_min + offset = {lo}")
    i = np.arange(1, n)
    edges = np.exp(np.log(lo) + (np.log(hi) - np.log(lo)) * i / n) - offset
    return BinScheme("SID", n, float(h_min), float(h_max), tuple(float(v) for v in edges))


def hbc_level(i: int) -> float:
    """Cumulative probability below the i-th bi-cut point."""
    return 1.0 - 0.5 ** (i + 1)


def _bicut_point(distinct: np.ndarray, below: np.ndarray, level: float) -> float:
    # binary search over distinct values for the first v with P(h < v) >= level
    k = bisect.bisect_left(below, level)
    if k >= len(distinct):
        # the largest value carries more than 1 - level of the mass, so no v
        # reaches the level strictly; it is still the first v with P(h <= v) >= level
        return float(distinct[-1])
    if k == 0:
        return float(distinct[0])
    # linear interpolation of the step CDF between neighbouring distinct values
    u, v = distinct[k - 1], distinct[k]
    fu, fv = below[k - 1], below[k]
    return float(u + (level - fu) / (fv - fu) * (v - u))


def hbc_edges(samples, n: int) -> BinScheme:
    """Hierarchical bi-cut: cut i sits where ``P(h < Q_i) = 1 - 2**-(i+1)``.

    Cuts are located by binary search over the sorted distinct sample values
    and interpolated between neighbours, so ``P(h < Q_i) >= level`` always.

    Raises:
        ValueError: for empty samples, too few distinct values, or when ties
            collapse two cuts onto the same value.
    """
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    vals = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if vals.size == 0:
        raise ValueError("HBC needs a nonempty sample")
    distinct, first = np.unique(vals, return_index=True)
    if distinct.size < n:
        raise ValueError(
            f"HBC: {distinct.size} distinct sample values cannot separate {n} classes; lower N"
        )
    below = first / vals.size  # P(h < distinct[j])
    edges = [_bicut_point(distinct, below, hbc_level(i)) for i in range(n - 1)]
    if edges[0] <= vals[0] or np.any(np.diff(edges) <= 0):
        raise ValueError(f"HBC: tied samples collapse the cuts {edges}; lower N")
    return BinScheme("HBC", n, float(vals[0]), float(vals[-1]), tuple(edges))


def make_scheme(strategy: str, n: int, samples=None, h_min: float = 0.0, h_max: float = 100.0) -> BinScheme:
    if strategy == "UD":
        return ud_edges(h_min, h_max, n)
    if strategy == "SID":
        return sid_edges(h_min, h_max, n)
    if strategy == "HBC":
        if samples is None:
            raise ValueError("HBC needs height samples")
        return hbc_edges(samples, n)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def class_of(h, scheme: BinScheme):
    """Class index per height; out-of-range heights land in the boundary classes."""
    out = np.searchsorted(np.asarray(scheme.edges), h, side="right")
    return int(out) if np.ndim(out) == 0 else out


def encode_multihot(c, n: int) -> np.ndarray:
    """Ordinal code of length ``n - 1``: entry i is 1 iff i < c.

    Works on a scalar class or an array of classes (code on the last axis).
    """
    c = np.asarray(c)
    if np.any(c < 0) or np.any(c > n - 1):
        raise ValueError(f"class index out of range [0, {n - 1}]: {c}")
    return (np.arange(n - 1) < c[..., None]).astype(np.float64)


def class_probs(p) -> np.ndarray:
    """Per-class probabilities from per-cut exceedance probabilities (last axis).

    ``q_0 = 1 - p_0``, ``q_i = (1 - p_i) prod_{c<i} p_c`` and the tail class
    takes ``prod_c p_c``, so the vector sums to one.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("cut probabilities must lie strictly inside (0, 1)")
    lead = np.cumprod(p, axis=-1)
    prefix = np.concatenate([np.ones(p.shape[:-1] + (1,)), lead[..., :-1]], axis=-1)
    return np.concatenate([(1.0 - p) * prefix, lead[..., -1:]], axis=-1)


def decode_height(q, scheme: BinScheme):
    """Midpoint of the most probable class interval (lowest index wins ties)."""
    q = np.asarray(q)
    mids = 0.5 * (scheme.lower_bounds() + scheme.upper_bounds())
    return mids[np.argmax(q, axis=-1)]


def bin_table(scheme: BinScheme, heights) -> list[dict]:
    """Rows of (class, lower, upper, empirical mass) for reporting."""
    cls = class_of(np.asarray(heights).ravel(), scheme)
    counts = np.bincount(cls, minlength=scheme.num_classes)
    mass = counts / max(counts.sum(), 1)
    lo, hi = scheme.lower_bounds(), scheme.upper_bounds()
    return [
        {"class": i, "lower": float(lo[i]), "upper": float(hi[i]), "mass": float(mass[i])}
        for i in range(scheme.num_classes)
    ]
