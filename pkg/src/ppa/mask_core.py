"""Power-based partial attention (PPA) masks.

A query at position q attends a key at position k (k <= q) when either the
key falls inside the sliding window of the `window` most recent tokens, or
the relative distance j = q - k + 1 is a stride position: a j at which
floor(j**p) increments by one. Summing the increments telescopes, so token i
attends exactly floor(i**p) stride positions, and the whole sequence costs
O(L**(1+p)) attended entries.

Everything here is integer-exact where it can be: floor(j**p) goes through
integer n-th roots when p = 1/n (n <= 6) and through a relative-epsilon
guarded float pow otherwise, and every derived quantity (rows, counts, gaps,
dense masks) is built from that single floor so the telescoping identity
holds exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "P_GRID",
    "DEFAULT_WINDOW",
    "DENSE_MASK_CAP",
    "MaskConfig",
    "MaskRow",
    "PatternKind",
    "MaskDomainError",
    "MaskCapacityError",
    "floor_power",
    "stride_indicator",
    "is_attended",
    "stride_positions",
    "mask_row",
    "full_mask",
    "attended_count",
    "total_attended",
    "gap_stats",
    "max_gap",
    "fit_scaling_exponent",
    "pattern_mask",
    "reachable_set",
]

# The nine-point exponent grid used throughout the sweep harness.
P_GRID = (0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)

DEFAULT_WINDOW = 64

# Dense L x L masks exist for testing and rendering only.
DENSE_MASK_CAP = 8192

# Relative nudge applied before flooring float powers: pow(9, 0.5) may land
# infinitesimally below 3.0, which would silently drop a stride position.
_FLOOR_EPS = 1e-9

# p = 1/n for n up to this degree is routed through exact integer roots.
_MAX_EXACT_ROOT = 6


class MaskDomainError(ValueError):
    """Argument outside the mathematical domain of a mask operation."""


class MaskCapacityError(ValueError):
    """Requested dense mask exceeds the configured size cap."""


def _check_p(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise MaskDomainError(f"exponent p must lie in [0, 1], got {p!r}")


@dataclass(frozen=True)
class MaskConfig:
    """One PPA variant: exponent p plus the always-attended sliding window.

    `window` counts the most recent tokens including the current one, so
    window=1 means "self only" and the pure-stride pattern.
    """

    p: float
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        _check_p(self.p)
        if self.window < 1:
            raise MaskDomainError(f"window must be >= 1, got {self.window!r}")


@dataclass(frozen=True)
class MaskRow:
    """Sorted attended key positions for one query position."""

    query: int
    attended: np.ndarray  # strictly increasing int64 absolute key positions

    def __len__(self) -> int:
        return int(self.attended.size)


class PatternKind(Enum):
    """Mask families: fixed stride, length-scaled stride, incremental stride,
    and incremental stride unioned with the sliding window."""

    FIXED_STRIDE = "fixed"
    DYNAMIC_STRIDE = "dynamic"
    INCREMENTAL_STRIDE = "incremental"
    INCREMENTAL_PLUS_WINDOW = "incremental-window"


def _root_degree(p: float) -> int | None:
    """Degree n when p == 1/n for an integer n <= _MAX_EXACT_ROOT, else None."""
    if p <= 0.0:
        return None
    for n in range(2, _MAX_EXACT_ROOT + 1):
        if abs(p * n - 1.0) < 1e-12:
            return n
    return None


def _int_nth_root(x: int, n: int) -> int:
    """Exact floor(x ** (1/n)) for non-negative integer x."""
    if x == 0:
        return 0
    if n == 2:
        return math.isqrt(x)
    r = int(round(x ** (1.0 / n)))
    while r > 0 and r**n > x:
        r -= 1
    while (r + 1) ** n <= x:
        r += 1
    return r


def floor_power(j: int, p: float) -> int:
    """floor(j**p) under the conventions used by the stride indicator.

    0**p := 0 for every p in [0, 1] (so the current token, j=1, is always a
    stride position). p = 1/n with integer n <= 6 is computed by exact
    integer roots; other exponents use binary64 pow with a relative epsilon
    nudge before flooring.
    """
    _check_p(p)
    if j < 0:
        raise MaskDomainError(f"floor_power requires j >= 0, got {j}")
    if j == 0:
        return 0
    if p == 1.0:
        return j
    if p == 0.0:
        return 1
    n = _root_degree(p)
    if n is not None:
        return _int_nth_root(j, n)
    v = math.pow(j, p)
    return int(v + _FLOOR_EPS * v)  # int() truncates; v is positive


def stride_indicator(j: int, p: float) -> int:
    """1 when relative distance j is a stride-attended position, else 0.

    Defined as floor(j**p) - floor((j-1)**p), which telescopes: the first m
    distances contain exactly floor(m**p) stride positions.
    """
    if j < 1:
        raise MaskDomainError(f"relative distance j must be >= 1, got {j}")
    return floor_power(j, p) - floor_power(j - 1, p)


def is_attended(query: int, key: int, cfg: MaskConfig) -> bool:
    """Whether `query` attends `key` under `cfg` (window OR stride)."""
    if key > query:
        raise MaskDomainError(
            f"future key {key} > query {query}: causal masks never attend forward"
        )
    if key < 0 or query < 0:
        raise MaskDomainError("token positions are non-negative")
    if query - key < cfg.window:
        return True
    return stride_indicator(query - key + 1, cfg.p) == 1


def stride_positions(limit: int, p: float) -> np.ndarray:
    """All stride-attended relative distances j in [1, limit], ascending.

    These are the j at which floor(j**p) steps; there are floor(limit**p)
    of them. Window membership is not considered here.
    """
    _check_p(p)
    if limit < 1:
        return np.empty(0, dtype=np.int64)
    if p == 0.0:
        return np.array([1], dtype=np.int64)
    if p == 1.0:
        return np.arange(1, limit + 1, dtype=np.int64)
    n = _root_degree(p)
    if n is not None:
        r = _int_nth_root(limit, n)
        return np.arange(1, r + 1, dtype=np.int64) ** n
    pw = math.pow
    eps = _FLOOR_EPS
    floors = np.fromiter(
        (int((v := pw(j, p)) + eps * v) for j in range(1, limit + 1)),
        dtype=np.int64,
        count=limit,
    )
    steps = np.flatnonzero(np.diff(floors)) + 2  # j where floor steps, 1-based
    return np.concatenate(([1], steps)).astype(np.int64)


def mask_row(query: int, cfg: MaskConfig) -> MaskRow:
    """Attended key positions for one query: window suffix union stride set."""
    if query < 0:
        raise MaskDomainError(f"query must be >= 0, got {query}")
    js = stride_positions(query + 1, cfg.p)
    stride_keys = query + 1 - js
    window_keys = np.arange(max(0, query - cfg.window + 1), query + 1, dtype=np.int64)
    attended = np.union1d(stride_keys, window_keys)
    return MaskRow(query=query, attended=attended)


def _relative_attended(L: int, cfg: MaskConfig) -> np.ndarray:
    """Boolean vector a[r] = attended at relative offset r = q - k, r in [0, L)."""
    rel = np.zeros(L, dtype=bool)
    rel[: min(cfg.window, L)] = True
    js = stride_positions(L, cfg.p)
    rel[js - 1] = True
    return rel


def _toeplitz_causal(rel: np.ndarray) -> np.ndarray:
    """Expand a relative-offset attendance vector into a causal L x L mask."""
    L = rel.shape[0]
    offsets = np.arange(L)[:, None] - np.arange(L)[None, :]
    return (offsets >= 0) & rel[np.clip(offsets, 0, L - 1)]


def full_mask(L: int, cfg: MaskConfig, cap: int = DENSE_MASK_CAP) -> np.ndarray:
    """Dense boolean L x L mask; entry (q, k) = is_attended(q, k, cfg).

    Dense masks are O(L^2) memory and exist for testing and rendering, so
    lengths above `cap` raise MaskCapacityError.
    """
    if L < 1:
        raise MaskDomainError(f"sequence length must be >= 1, got {L}")
    if L > cap:
        raise MaskCapacityError(f"dense mask of length {L} exceeds cap {cap}")
    return _toeplitz_causal(_relative_attended(L, cfg))


def attended_count(i: int, cfg: MaskConfig) -> int:
    """Number of keys attended by the i-th token (1-based i).

    Closed form from the telescoping identity: floor(i**p) stride positions,
    plus the window suffix, minus the strides the window already covers.
    With window=1 this is exactly floor(i**p).
    """
    if i < 1:
        raise MaskDomainError(f"token index i is 1-based and must be >= 1, got {i}")
    w = min(cfg.window, i)
    return floor_power(i, cfg.p) + w - floor_power(w, cfg.p)


def total_attended(L: int, cfg: MaskConfig) -> int:
    """Sum of attended_count over the first L tokens, without a dense mask."""
    if L < 1:
        raise MaskDomainError(f"sequence length must be >= 1, got {L}")
    p, W = cfg.p, cfg.window
    total = 0
    fw = 0  # floor_power(min(W, i), p), constant once i >= W
    for i in range(1, L + 1):
        fi = floor_power(i, p)
        if i <= W:
            fw = fi
            total += i  # fi + i - fi
        else:
            total += fi + W - fw
    return total


def gap_stats(cfg: MaskConfig, L: int) -> tuple[int, np.ndarray]:
    """Gaps between consecutive stride positions within [1, L], window excluded.

    Returns (max_gap, gaps) where gaps[i] is the distance from the (i+1)-th
    to the (i+2)-th stride position; equivalently the gap arriving at stride
    index i+2. p=0 degenerates to the single position {1} and is a domain
    error; callers must branch.
    """
    if cfg.p == 0.0:
        raise MaskDomainError("gaps are undefined at p=0: the stride set is {1}")
    if L < 2:
        raise MaskDomainError(f"need L >= 2 to realize a gap, got {L}")
    js = stride_positions(L, cfg.p)
    gaps = np.diff(js)
    if gaps.size == 0:
        raise MaskDomainError(f"no realized gap: single stride position below L={L}")
    return int(gaps.max()), gaps


def max_gap(cfg: MaskConfig, L: int) -> int:
    """Largest distance between consecutive stride positions up to L."""
    return gap_stats(cfg, L)[0]


def fit_scaling_exponent(samples: list[tuple[int, int]]) -> float:
    """Least-squares slope of log(total_attended) against log(L).

    For the pure stride pattern (window=1) over a couple of decades of L the
    slope recovers 1+p to within a few hundredths.
    """
    if len(samples) < 3:
        raise MaskDomainError(f"need >= 3 samples to fit, got {len(samples)}")
    Ls = np.array([s[0] for s in samples], dtype=float)
    totals = np.array([s[1] for s in samples], dtype=float)
    if np.any(Ls <= 0) or np.any(totals <= 0):
        raise MaskDomainError("lengths and totals must be positive")
    if np.any(np.diff(Ls) <= 0):
        raise MaskDomainError("sample lengths must be strictly increasing")
    slope, _ = np.polyfit(np.log(Ls), np.log(totals), 1)
    return float(slope)


def pattern_mask(
    kind: PatternKind,
    L: int,
    cfg: MaskConfig,
    stride: int | None = None,
    cap: int = DENSE_MASK_CAP,
) -> np.ndarray:
    """Dense mask for one of the four pattern families.

    FIXED_STRIDE attends relative distances j with (j-1) % stride == 0 and
    requires stride >= 1. DYNAMIC_STRIDE renders the length-scaled variant
    with stride ceil(L**(1-p)); it is a visualization of an encoder-era
    pattern and is not deployable causally, but is drawn on causal support.
    INCREMENTAL_STRIDE is the stride indicator alone; INCREMENTAL_PLUS_WINDOW
    is identical to full_mask.
    """
    if L < 1:
        raise MaskDomainError(f"sequence length must be >= 1, got {L}")
    if L > cap:
        raise MaskCapacityError(f"dense mask of length {L} exceeds cap {cap}")
    if kind is PatternKind.FIXED_STRIDE:
        if stride is None or stride < 1:
            raise MaskDomainError("FIXED_STRIDE requires a stride k >= 1")
        rel = np.arange(L) % stride == 0
        return _toeplitz_causal(rel)
    if kind is PatternKind.DYNAMIC_STRIDE:
        s = max(1, math.ceil(math.pow(L, 1.0 - cfg.p)))
        rel = np.arange(L) % s == 0
        return _toeplitz_causal(rel)
    if kind is PatternKind.INCREMENTAL_STRIDE:
        rel = np.zeros(L, dtype=bool)
        rel[stride_positions(L, cfg.p) - 1] = True
        return _toeplitz_causal(rel)
    if kind is PatternKind.INCREMENTAL_PLUS_WINDOW:
        return full_mask(L, cfg, cap=cap)
    raise MaskDomainError(f"unknown pattern kind {kind!r}")


def reachable_set(query: int, layers: int, cfg: MaskConfig) -> set[int]:
    """Positions whose information can flow to `query` through `layers` hops.

    Transitive closure of is_attended applied `layers` times starting from
    {query}; monotone non-decreasing in layers. This is the diagnostic that
    shows why window-only attention cannot solve far recall: its reach grows
    by at most window-1 per layer.
    """
    if layers < 1:
        raise MaskDomainError(f"layers must be >= 1, got {layers}")
    reached: set[int] = {query}
    frontier = [query]
    for _ in range(layers):
        new: list[int] = []
        for q in frontier:
            for k in mask_row(q, cfg).attended.tolist():
                if k not in reached:
                    reached.add(k)
                    new.append(k)
        if not new:
            break
        frontier = new
    return reached
