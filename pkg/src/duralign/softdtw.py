"""Banded, differentiable Soft-DTW with an L1 frame cost and a warp penalty.

The DP runs over target frames ``i`` (rows) and predicted frames ``j``
(columns), both 1-based, with ``r[0, 0] = 0`` and every other border cell at
+inf. Each cell takes a soft minimum over its three predecessors::

    r[i, j] = softmin(r[i-1, j]   + c_vert  + warp,
                      r[i, j-1]   + c_horz  + warp,
                      r[i-1, j-1] + c_diag)

Two cost conventions are supported:

``paper``
    each branch pays the L1 distance of the cell it comes *from*
    (``|x[i-1] - y[j]|``, ``|x[i] - y[j-1]|``, ``|x[i-1] - y[j-1]|``).
    The entry move from ``(0, 0)`` into ``(1, 1)`` pays ``|x[1] - y[1]|``.
``symmetric``
    every branch pays the cost of the cell being entered, ``|x[i] - y[j]|``
    (the textbook Soft-DTW form).

Only cells within a diagonal band around the line from ``(1, 1)`` to
``(T_x, T_y)`` are evaluated; everything outside is +inf and dropped from the
soft minimum.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import Tensor, _node

COST_INDEXING = ("paper", "symmetric")


@dataclass(frozen=True)
class SoftDtwConfig:
    gamma: float = 0.05
    warp: float = 128.0
    band_half_width: int = 30
    cost_indexing: str = "paper"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.warp < 0:
            raise ValueError(f"warp must be >= 0, got {self.warp}")
        if self.band_half_width < 1:
            raise ValueError(f"band_half_width must be >= 1, got {self.band_half_width}")
        if self.cost_indexing not in COST_INDEXING:
            raise ValueError(f"cost_indexing must be one of {COST_INDEXING}, got {self.cost_indexing!r}")

    def full_band(self, tx: int, ty: int) -> "SoftDtwConfig":
        return SoftDtwConfig(self.gamma, self.warp, max(tx, ty, 1), self.cost_indexing)


@dataclass
class BandTable:
    """DP values r[i, j] for the cells inside the band.

    Row ``i`` (1..T_x) stores columns ``lo[i]..hi[i]`` at ``values[i, j - lo[i]]``;
    row 0 holds only the origin. ``cost`` has the same layout and holds the
    L1 distance of each in-band cell.
    """

    tx: int
    ty: int
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray
    cost: np.ndarray

    def get(self, i: int, j: int) -> float:
        if i == 0 and j == 0:
            return 0.0
        if i < 1 or i > self.tx or j < self.lo[i] or j > self.hi[i]:
            return math.inf
        return float(self.values[i, j - self.lo[i]])

    @property
    def cell_count(self) -> int:
        return int(np.sum(self.hi[1:] - self.lo[1:] + 1))


def band_limits(tx: int, ty: int, half_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row column limits of the band; rows are widened where needed to stay connected."""
    lo = np.zeros(tx + 1, dtype=np.int64)
    hi = np.zeros(tx + 1, dtype=np.int64)
    slope = (ty - 1) / (tx - 1) if tx > 1 else 0.0
    for i in range(1, tx + 1):
        center = 1.0 + (i - 1) * slope
        lo[i] = max(1, math.ceil(center - half_width - 1e-9))
        hi[i] = min(ty, math.floor(center + half_width + 1e-9))
    if tx == 1:
        hi[1] = ty
    for i in range(1, tx):
        # a path leaving row i at hi[i] must be able to step into row i + 1
        if lo[i + 1] > hi[i] + 1:
            hi[i] = lo[i + 1] - 1
    hi[tx] = ty
    lo[1] = 1
    return lo, hi


@numba.njit(cache=True)
def _softmin3(a, b, c, gamma):
    m = min(a, min(b, c))
    if m == np.inf:
        return np.inf
    s = 0.0
    if a != np.inf:
        s += math.exp(-(a - m) / gamma)
    if b != np.inf:
        s += math.exp(-(b - m) / gamma)
    if c != np.inf:
        s += math.exp(-(c - m) / gamma)
    return m - gamma * math.log(s)


@numba.njit(cache=True)
def _band_costs(x, y, lo, hi, width):
    tx = x.shape[0]
    f = x.shape[1]
    cost = np.full((tx + 1, width), np.inf)
    for i in range(1, tx + 1):
        for j in range(lo[i], hi[i] + 1):
            acc = 0.0
            for k in range(f):
                acc += abs(x[i - 1, k] - y[j - 1, k])
            cost[i, j - lo[i]] = acc
    return cost


@numba.njit(cache=True)
def _cell(table, lo, hi, i, j):
    if i == 0:
        return 0.0 if j == 0 else np.inf
    if j < lo[i] or j > hi[i]:
        return np.inf
    return table[i, j - lo[i]]


@numba.njit(cache=True)
def _branch_costs(cost, lo, hi, i, j, paper):
    here = cost[i, j - lo[i]]
    if not paper:
        return here, here, here
    if i == 1 and j == 1:
        return np.inf, np.inf, here
    cv = _cell(cost, lo, hi, i - 1, j) if i > 1 else np.inf
    ch = _cell(cost, lo, hi, i, j - 1) if j > 1 else np.inf
    cd = _cell(cost, lo, hi, i - 1, j - 1) if (i > 1 and j > 1) else np.inf
    return cv, ch, cd


@numba.njit(cache=True)
def _forward(cost, lo, hi, gamma, warp, warp_h, paper, hard):
    tx = cost.shape[0] - 1
    r = np.full(cost.shape, np.inf)
    for i in range(1, tx + 1):
        for j in range(lo[i], hi[i] + 1):
            cv, ch, cd = _branch_costs(cost, lo, hi, i, j, paper)
            a = _cell(r, lo, hi, i - 1, j) + cv + warp
            b = _cell(r, lo, hi, i, j - 1) + ch + warp_h
            c = _cell(r, lo, hi, i - 1, j - 1) + cd
            if hard:
                r[i, j - lo[i]] = min(a, min(b, c))
            else:
                r[i, j - lo[i]] = _softmin3(a, b, c, gamma)
    return r


@numba.njit(cache=True)
def _weights(r, cost, lo, hi, i, j, gamma, warp, warp_h, paper):
    """Soft-min weights of the vertical, horizontal and diagonal branches of cell (i, j)."""
    here = r[i, j - lo[i]]
    cv, ch, cd = _branch_costs(cost, lo, hi, i, j, paper)
    a = _cell(r, lo, hi, i - 1, j) + cv + warp
    b = _cell(r, lo, hi, i, j - 1) + ch + warp_h
    c = _cell(r, lo, hi, i - 1, j - 1) + cd
    wa = math.exp(-(a - here) / gamma) if a != np.inf else 0.0
    wb = math.exp(-(b - here) / gamma) if b != np.inf else 0.0
    wc = math.exp(-(c - here) / gamma) if c != np.inf else 0.0
    return wa, wb, wc


@numba.njit(cache=True)
def _backward(r, cost, lo, hi, gamma, warp, warp_h, paper):
    """Adjoint of r[T_x, T_y] wrt every in-band cell cost."""
    tx = r.shape[0] - 1
    ty = hi[tx]
    gr = np.zeros(r.shape)
    gcost = np.zeros(r.shape)
    gr[tx, ty - lo[tx]] = 1.0
    for i in range(tx, 0, -1):
        for j in range(hi[i], lo[i] - 1, -1):
            g = gr[i, j - lo[i]]
            if g == 0.0:
                continue
            wa, wb, wc = _weights(r, cost, lo, hi, i, j, gamma, warp, warp_h, paper)
            if i > 1 and j >= lo[i - 1] and j <= hi[i - 1]:
                gr[i - 1, j - lo[i - 1]] += g * wa
            if j > lo[i]:
                gr[i, j - 1 - lo[i]] += g * wb
            if i > 1 and j - 1 >= lo[i - 1] and j - 1 <= hi[i - 1]:
                gr[i - 1, j - 1 - lo[i - 1]] += g * wc
            if paper:
                if i == 1 and j == 1:
                    gcost[1, 1 - lo[1]] += g * wc
                else:
                    if wa != 0.0:
                        gcost[i - 1, j - lo[i - 1]] += g * wa
                    if wb != 0.0:
                        gcost[i, j - 1 - lo[i]] += g * wb
                    if wc != 0.0:
                        gcost[i - 1, j - 1 - lo[i - 1]] += g * wc
            else:
                gcost[i, j - lo[i]] += g * (wa + wb + wc)
    return gcost


@numba.njit(cache=True)
def _cost_grad_to_frames(x, y, lo, hi, gcost):
    """Chain d(loss)/d(cost) through |x_i - y_j|_1 onto y (sign(0) = 0)."""
    tx = x.shape[0]
    f = x.shape[1]
    gy = np.zeros(y.shape)
    for i in range(1, tx + 1):
        for j in range(lo[i], hi[i] + 1):
            g = gcost[i, j - lo[i]]
            if g == 0.0:
                continue
            for k in range(f):
                diff = x[i - 1, k] - y[j - 1, k]
                if diff > 0:
                    gy[j - 1, k] -= g
                elif diff < 0:
                    gy[j - 1, k] += g
    return gy


def _validate(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("soft_dtw expects 2-D (frames x features) inputs")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("soft_dtw: empty sequence")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"soft_dtw: feature dimension mismatch {x.shape[1]} vs {y.shape[1]}")
    return x, y


def _prepare(x, y, cfg: SoftDtwConfig):
    x, y = _validate(x, y)
    lo, hi = band_limits(x.shape[0], y.shape[0], cfg.band_half_width)
    width = int(np.max(hi[1:] - lo[1:] + 1))
    cost = _band_costs(x, y, lo, hi, width)
    return x, y, lo, hi, cost


def soft_min(values, gamma: float) -> float:
    """-gamma * log(sum(exp(-v / gamma))), shifted by the minimum; +inf entries are ignored."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("soft_min of an empty list")
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    finite = vals[np.isfinite(vals)]
    if finite.size == 0:
        return math.inf
    m = finite.min()
    return float(m - gamma * np.log(np.sum(np.exp(-(finite - m) / gamma))))


def soft_dtw(x, y, cfg: SoftDtwConfig = SoftDtwConfig(), _horizontal_warp_bias: float = 0.0) -> tuple[float, BandTable]:
    """Soft-DTW loss between target ``x`` (T_x x F) and prediction ``y`` (T_y x F).

    ``_horizontal_warp_bias`` is a mutation hook for self-checks; leave it at 0.
    """
    x, y, lo, hi, cost = _prepare(x, y, cfg)
    r = _forward(cost, lo, hi, cfg.gamma, cfg.warp, cfg.warp + _horizontal_warp_bias, cfg.cost_indexing == "paper",
                 False)
    table = BandTable(x.shape[0], y.shape[0], lo, hi, r, cost)
    return table.get(table.tx, table.ty), table


def soft_dtw_grad(x, y, cfg: SoftDtwConfig = SoftDtwConfig()) -> np.ndarray:
    """Gradient of :func:`soft_dtw` with respect to the prediction ``y``."""
    _, grad = soft_dtw_value_and_grad(x, y, cfg)
    return grad


def soft_dtw_value_and_grad(x, y, cfg: SoftDtwConfig = SoftDtwConfig()) -> tuple[float, np.ndarray]:
    x, y, lo, hi, cost = _prepare(x, y, cfg)
    paper = cfg.cost_indexing == "paper"
    r = _forward(cost, lo, hi, cfg.gamma, cfg.warp, cfg.warp, paper, False)
    gcost = _backward(r, cost, lo, hi, cfg.gamma, cfg.warp, cfg.warp, paper)
    tx = x.shape[0]
    return float(r[tx, hi[tx] - lo[tx]]), _cost_grad_to_frames(x, y, lo, hi, gcost)


def soft_dtw_loss(target, pred: Tensor, cfg: SoftDtwConfig = SoftDtwConfig()) -> Tensor:
    """Graph node: Soft-DTW of ``pred`` against a constant ``target``."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    value, grad = soft_dtw_value_and_grad(target, pred.data, cfg)
    grad = grad.astype(pred.dtype)

    def backward(g):
        pred._accum(g * grad)

    return _node(np.asarray(value, dtype=pred.dtype), (pred,), "soft_dtw", backward)


# ---------------------------------------------------------------- oracles

def hard_dtw_oracle(x, y, warp: float = 128.0, cost_indexing: str = "paper") -> float:
    """Full-table DTW with a hard minimum and the same branch costs."""
    x, y = _validate(x, y)
    if x.shape[0] * y.shape[0] > 10**6:
        raise ValueError("hard_dtw_oracle is limited to T_x * T_y <= 1e6")
    lo, hi = band_limits(x.shape[0], y.shape[0], max(x.shape[0], y.shape[0]))
    width = int(np.max(hi[1:] - lo[1:] + 1))
    cost = _band_costs(x, y, lo, hi, width)
    r = _forward(cost, lo, hi, 1.0, float(warp), float(warp), cost_indexing == "paper", True)
    tx = x.shape[0]
    return float(r[tx, hi[tx] - lo[tx]])


def _monotone_paths(tx: int, ty: int):
    """Yield every path from (1, 1) to (tx, ty) with unit right/down/diagonal steps."""
    stack = [((1, 1),)]
    while stack:
        path = stack.pop()
        i, j = path[-1]
        if (i, j) == (tx, ty):
            yield path
            continue
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni <= tx and nj <= ty:
                stack.append(path + ((ni, nj),))


def path_cost(x, y, path, warp: float, cost_indexing: str = "paper") -> float:
    """Total cost of one alignment path under the chosen branch-cost convention."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def d(i, j):
        return float(np.sum(np.abs(x[i - 1] - y[j - 1])))

    total = d(*path[0])
    for (pi, pj), (i, j) in itertools.pairwise(path):
        step_cost = d(pi, pj) if cost_indexing == "paper" else d(i, j)
        total += step_cost + (0.0 if (i - pi == 1 and j - pj == 1) else warp)
    return total


def path_enumeration_oracle(x, y, gamma: float, warp: float, cost_indexing: str = "paper") -> float:
    """Soft minimum over the costs of all monotone alignment paths (small inputs only)."""
    x, y = _validate(x, y)
    costs = [path_cost(x, y, p, warp, cost_indexing) for p in _monotone_paths(x.shape[0], y.shape[0])]
    return soft_min(costs, gamma)
