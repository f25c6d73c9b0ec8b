"""Fixed-lag Levenberg-Marquardt smoother over a chain of :class:`NavState` nodes.

The normal equations are assembled block-wise and solved with a banded
Cholesky factorisation; node keys give the (chain) ordering. Old nodes are
removed by Schur complement into a dense prior on the new oldest node.
"""
from __future__ import annotations

import functools
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from .factors import Factor, FactorKind, Key, NoiseModel, PriorFactor
from .manifold import normalize_rotation_batch, quat_from_rot, so3_exp_batch
from .state import STATE_DIM, NavState

log = logging.getLogger(__name__)

D = STATE_DIM


class GraphError(ValueError):
    pass


class UnobservableGraphError(GraphError):
    def __init__(self, keys: Iterable[Key], reason: str = "rank-deficient normal equations"):
        self.keys = sorted(set(keys))
        super().__init__(f"{reason}; offending node keys: {self.keys}")


@dataclass
class SolverConfig:
    max_iterations: int = 10
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_floor: float = 1e-12
    lambda_ceiling: float = 1e10
    rel_tolerance: float = 1e-6
    horizon: float = 5.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be > 0")


@dataclass
class MarginalPrior:
    key: Key
    mean: NavState
    covariance: np.ndarray

    def factor(self) -> PriorFactor:
        f = PriorFactor(self.key, self.mean, NoiseModel(self.covariance))
        f.marginal = True
        return f


@dataclass
class OptimizeResult:
    values: dict[Key, NavState]
    cost: float
    iterations: int
    converged: bool
    initial_cost: float = math.nan


@dataclass
class GraphWindow:
    horizon: float = 5.0
    nodes: dict[Key, tuple[float, NavState]] = field(default_factory=dict)
    factors: list[Factor] = field(default_factory=list)

    # keys are kept sorted: nodes are appended in key order and only ever
    # inserted in the middle through insert_node()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def keys(self) -> list[Key]:
        return list(self.nodes)

    @property
    def newest_key(self) -> Key | None:
        return next(reversed(self.nodes)) if self.nodes else None

    @property
    def oldest_key(self) -> Key | None:
        return next(iter(self.nodes)) if self.nodes else None

    def time(self, key: Key) -> float:
        return self.nodes[key][0]

    def value(self, key: Key) -> NavState:
        return self.nodes[key][1]

    def values(self) -> dict[Key, NavState]:
        return {k: v for k, (_, v) in self.nodes.items()}

    def add_node(self, key: Key, t: float, initial: NavState) -> GraphWindow:
        if key in self.nodes:
            raise GraphError(f"duplicate node key {key}")
        if self.nodes:
            last = self.newest_key
            if key < last:
                raise GraphError(f"key {key} precedes newest key {last}; use insert_node")
            if t < self.nodes[last][0]:
                raise GraphError(f"time regression: {t} < {self.nodes[last][0]}")
        self.nodes[key] = (float(t), initial)
        return self

    def insert_node(self, key: Key, t: float, initial: NavState) -> GraphWindow:
        """Insert a node between existing ones (delayed measurements)."""
        if key in self.nodes:
            raise GraphError(f"duplicate node key {key}")
        items = list(self.nodes.items())
        items.append((key, (float(t), initial)))
        items.sort(key=lambda kv: kv[0])
        times = [v[0] for _, v in items]
        if any(b < a for a, b in zip(times, times[1:])):
            raise GraphError(f"node {key} at t={t} breaks time ordering")
        self.nodes = dict(items)
        return self

    def add_factor(self, f: Factor) -> GraphWindow:
        missing = [k for k in f.keys if k not in self.nodes]
        if missing:
            raise GraphError(f"{f.kind.value} factor references missing node(s) {missing}")
        self.factors.append(f)
        return self

    def remove_factor(self, f: Factor) -> None:
        self.factors.remove(f)

    def set_values(self, values: dict[Key, NavState]) -> None:
        for k, v in values.items():
            t, _ = self.nodes[k]
            self.nodes[k] = (t, v)

    def copy(self) -> GraphWindow:
        # factors are immutable; node values are replaced, never mutated
        return GraphWindow(self.horizon, dict(self.nodes), list(self.factors))

    def span(self) -> float:
        if not self.nodes:
            return 0.0
        return self.time(self.newest_key) - self.time(self.oldest_key)

    def marginal_prior(self) -> PriorFactor | None:
        for f in self.factors:
            if getattr(f, "marginal", False):
                return f
        return None


# --------------------------------------------------------------------------- linear algebra


def _check_structure(g: GraphWindow) -> None:
    """Every connected component needs at least one unary factor."""
    parent = {k: k for k in g.nodes}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    anchored = set()
    for f in g.factors:
        if len(f.keys) == 1:
            anchored.add(f.keys[0])
        else:
            a = find(f.keys[0])
            for k in f.keys[1:]:
                parent[find(k)] = a
    roots_ok = {find(k) for k in anchored}
    bad = [k for k in g.nodes if find(k) not in roots_ok]
    if bad:
        raise UnobservableGraphError(bad, "no prior or unary factor reaches these nodes")


class _NormalEquations:
    def __init__(self, keys: list[Key]):
        self.index = {k: i for i, k in enumerate(keys)}
        self.n = len(keys)

    def bandwidth(self, factors: list[Factor]) -> int:
        span = 0
        idx = self.index
        for f in factors:
            if len(f.keys) > 1:
                ids = [idx[k] for k in f.keys]
                span = max(span, max(ids) - min(ids))
        return span

    def build(self, factors: list[Factor], values: dict[Key, NavState], nblock: int):
        n = self.n
        blocks = np.zeros((nblock + 1, n, D, D))
        grad = np.zeros((n, D))
        cost = 0.0
        idx = self.index
        for group in _group(factors):
            E, Js = type(group[0]).linearize_many(group, values)
            cost += float(np.sum(E * E))
            ids = np.array([[idx[k] for k in f.keys] for f in group])
            for p, Jp in enumerate(Js):
                a = ids[:, p]
                JpT = Jp.transpose(0, 2, 1)
                np.add.at(grad, a, (JpT @ E[:, :, None])[:, :, 0])
                for q in range(p, len(Js)):
                    b = ids[:, q]
                    H = JpT @ Js[q]
                    swap = a > b
                    if swap.any():
                        H[swap] = H[swap].transpose(0, 2, 1)
                    np.add.at(blocks, (np.abs(b - a), np.maximum(a, b)), H)
        return blocks, grad.ravel(), cost


def _group(factors: Iterable[Factor]) -> list[list[Factor]]:
    """Factors bucketed by (class, dimension), in order of first appearance."""
    groups: dict[tuple[type, int], list[Factor]] = {}
    for f in factors:
        groups.setdefault((type(f), f.dim), []).append(f)
    return list(groups.values())


@functools.lru_cache(maxsize=8)
def _band_indices(nblock: int, n: int):
    u = D * (nblock + 1) - 1
    r = np.arange(D)[:, None]
    c = np.arange(D)[None, :]
    out = []
    for d in range(nblock + 1):
        rows = np.broadcast_to(u - D * d + r - c, (n, D, D))
        cols = D * np.arange(n)[:, None, None] + c
        cols = np.broadcast_to(cols, (n, D, D))
        mask = (rows >= 0) & (rows <= u)
        if d == 0:
            mask &= np.broadcast_to(r <= c, (n, D, D))
        out.append((rows[mask], cols[mask], mask))
    return u, out


def _to_band(blocks: np.ndarray, layout) -> np.ndarray:
    u, parts = layout
    n = blocks.shape[1]
    ab = np.zeros((u + 1, n * D))
    for d, (rows, cols, mask) in enumerate(parts):
        ab[rows, cols] = blocks[d][mask]
    return ab


def _cholesky(ab: np.ndarray):
    try:
        return cholesky_banded(ab, lower=False, check_finite=False), None
    except LinAlgError as exc:
        m = re.search(r"(\d+)", str(exc))
        return None, (int(m.group(1)) - 1 if m else None)


def _check_rank(ab: np.ndarray, keys: list[Key]) -> None:
    u = ab.shape[0] - 1
    diag = ab[u].copy()
    scale = np.where(diag > 0, diag, 1.0)
    cf, bad = _cholesky(ab)
    if cf is None:
        raise UnobservableGraphError([keys[bad // D]] if bad is not None else keys)
    ratio = cf[u] ** 2 / scale
    weak = np.flatnonzero((ratio < 1e-12) | (diag <= 0))
    if weak.size:
        raise UnobservableGraphError({keys[i // D] for i in weak})


def total_cost(factors: Iterable[Factor], values: dict[Key, NavState]) -> float:
    return float(sum(type(g[0]).cost_many(g, values) for g in _group(factors)))


def optimize(g: GraphWindow, cfg: SolverConfig | None = None) -> OptimizeResult:
    """Levenberg-Marquardt on the manifold; updates ``g`` in place.

    Damping is additive (``H + lambda I``): a diagonal-scaled variant stalls
    on the weakly observable directions of long IMU chains. Raises
    :class:`UnobservableGraphError` when the undamped system is singular.
    """
    cfg = cfg or SolverConfig()
    if not g.nodes:
        return OptimizeResult({}, 0.0, 0, True, 0.0)
    _check_structure(g)
    keys = g.keys
    values = g.values()
    ne = _NormalEquations(keys)
    nblock = ne.bandwidth(g.factors)
    layout = _band_indices(nblock, ne.n)
    u = layout[0]

    lam = cfg.lambda_init
    iterations = 0
    converged = False
    blocks, grad, cost = ne.build(g.factors, values, nblock)
    initial_cost = cost
    ab = _to_band(blocks, layout)
    _check_rank(ab, keys)
    while iterations < cfg.max_iterations:
        iterations += 1
        if cost == 0.0:
            converged = True
            break
        accepted = False
        while True:
            damped = ab.copy()
            damped[u] += lam
            cf, _ = _cholesky(damped)
            if cf is not None:
                step = cho_solve_banded((cf, False), -grad, check_finite=False).reshape(ne.n, D)
                trial = _retract_all(values, keys, step)
                trial_cost = total_cost(g.factors, trial)
                if trial_cost <= cost:
                    accepted = True
                    break
            lam *= cfg.lambda_factor
            if lam > cfg.lambda_ceiling:
                break
        if not accepted:
            converged = True  # no descent direction left at this damping range
            break
        lam = max(lam / cfg.lambda_factor, cfg.lambda_floor)
        decrease = cost - trial_cost
        values, cost = trial, trial_cost
        if decrease <= cfg.rel_tolerance * max(cost + decrease, 1e-300):
            converged = True
            break
        if iterations < cfg.max_iterations:
            blocks, grad, cost = ne.build(g.factors, values, nblock)
            ab = _to_band(blocks, layout)
    g.set_values(values)
    return OptimizeResult(values, cost, iterations, converged, initial_cost)


# --------------------------------------------------------------------------- marginalisation


def _retract_all(values: dict[Key, NavState], keys: list[Key], step: np.ndarray) -> dict[Key, NavState]:
    """Batched :meth:`NavState.retract` over every node."""
    R = np.array([values[k].R for k in keys])
    R = normalize_rotation_batch(R @ so3_exp_batch(step[:, 0:3]))
    out = {}
    for i, k in enumerate(keys):
        s = values[k]
        out[k] = NavState(R[i], s.p + step[i, 3:6], s.v + step[i, 6:9], s.bg + step[i, 9:12], s.ba + step[i, 12:15])
    return out


def _find_cut(g: GraphWindow, cutoff: float) -> int:
    keys = g.keys
    pos = {k: i for i, k in enumerate(keys)}
    # a factor spanning [lo, hi] blocks every cut strictly inside (lo, hi)
    blocked = np.zeros(len(keys) + 1, dtype=int)
    for f in g.factors:
        if len(f.keys) > 1:
            ids = [pos[k] for k in f.keys]
            lo, hi = min(ids), max(ids)
            if hi - lo > 1:
                blocked[lo + 1] += 1
                blocked[hi] -= 1
    blocked = np.cumsum(blocked)
    for i, k in enumerate(keys):
        if g.time(k) >= cutoff and blocked[i] == 0:
            return i
    return 0


def trim_window(g: GraphWindow, now: float | None = None) -> GraphWindow:
    """Marginalise nodes older than ``now - horizon`` into a prior on the new
    oldest node. The cut is moved forward to the first node no factor
    straddles, so the window never exceeds the horizon."""
    if not g.nodes:
        return g
    now = g.time(g.newest_key) if now is None else now
    b = _find_cut(g, now - g.horizon)
    if b == 0:
        return g
    keys = g.keys
    removed = keys[:b]
    boundary = keys[b]
    removed_set = set(removed)
    touching = [f for f in g.factors if any(k in removed_set for k in f.keys)]
    local_keys = removed + [boundary]
    values = g.values()
    ne = _NormalEquations(local_keys)
    m = len(local_keys)
    H = np.zeros((m * D, m * D))
    grad = np.zeros(m * D)
    for f in touching:
        e, Js = f.linearize(values)
        ids = [ne.index[k] for k in f.keys]
        for a, Ja in zip(ids, Js):
            grad[a * D : (a + 1) * D] += Ja.T @ e
            for bb, Jb in zip(ids, Js):
                H[a * D : (a + 1) * D, bb * D : (bb + 1) * D] += Ja.T @ Jb
    r = slice(0, (m - 1) * D)
    s = slice((m - 1) * D, m * D)
    Hrr = H[r, r]
    try:
        X = np.linalg.solve(Hrr, np.hstack([H[r, s], grad[r, None]]))
    except np.linalg.LinAlgError:
        X = np.linalg.lstsq(Hrr, np.hstack([H[r, s], grad[r, None]]), rcond=None)[0]
    Hs = H[s, s] - H[s, r] @ X[:, :D]
    gs = grad[s] - H[s, r] @ X[:, D]
    Hs = 0.5 * (Hs + Hs.T)
    cov = np.linalg.inv(Hs)
    cov = 0.5 * (cov + cov.T)
    mean = values[boundary].retract(-cov @ gs)
    for f in touching:
        g.factors.remove(f)
    for k in removed:
        del g.nodes[k]
    prior = MarginalPrior(boundary, mean, cov).factor()
    g.factors.insert(0, prior)
    return g


# --------------------------------------------------------------------------- debugging dump


def dump_graph(g: GraphWindow, out: TextIO) -> None:
    """``NODE key t x y z qx qy qz qw vx vy vz bgx bgy bgz bax bay baz`` then
    ``FACTOR kind keys... [payload]`` lines."""
    for k, (t, s) in g.nodes.items():
        nums = [t, *s.p, *quat_from_rot(s.R), *s.v, *s.bg, *s.ba]
        out.write(f"NODE {k} " + " ".join(f"{x:.17g}" for x in nums) + "\n")
    for f in g.factors:
        kind = f.kind.value + ("/marginal" if getattr(f, "marginal", False) else "")
        extra = f.describe()
        out.write(f"FACTOR {kind} " + " ".join(str(k) for k in f.keys) + (f" {extra}" if extra else "") + "\n")


__all__ = [
    "GraphWindow",
    "SolverConfig",
    "MarginalPrior",
    "OptimizeResult",
    "GraphError",
    "UnobservableGraphError",
    "optimize",
    "trim_window",
    "total_cost",
    "dump_graph",
    "FactorKind",
]
