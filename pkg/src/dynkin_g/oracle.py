"""Independent brute-force references for the engine, at desk scale.

Everything here recomputes expectations from the lattice structure
directly: closed-form one-step solves instead of Picard, exhaustive
enumeration of stopping rules instead of envelopes, and path recursions
with true frozen tails.  Only the lattice module is shared with the
engine; that independence is the point.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .driver import DriverSpec, PeriodCoefficients
from .lattice import AdaptedProcess, Lattice, StoppingRule


class BudgetError(RuntimeError):
    """Enumeration would exceed the rule budget."""

    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


@dataclass(frozen=True)
class EnumerationBudget:
    """Cap on how many stopping rules an exhaustive sweep may touch."""

    max_rules: int = 2**20


def rule_count(lattice: Lattice) -> int:
    """Number of adapted stopping rules: 2^(non-terminal macro nodes)."""
    n_nt = int(lattice.macro_offsets[lattice.T])
    return 1 << n_nt


def _check_budget(lattice: Lattice, budget: EnumerationBudget | None, square: bool = False) -> int:
    budget = budget or EnumerationBudget()
    n = rule_count(lattice)
    load = n * n if square else n
    if load > budget.max_rules:
        raise BudgetError(
            f"enumeration needs {load} rule evaluations, budget is {budget.max_rules}",
            load,
        )
    return n


def enumerate_stopping_rules(
    lattice: Lattice, budget: EnumerationBudget | None = None
) -> Iterator[StoppingRule]:
    """Every adapted rule exactly once: all mark-subsets of the
    non-terminal macro nodes, horizon always marked."""
    n = _check_budget(lattice, budget)
    n_nt = int(lattice.macro_offsets[lattice.T])
    for mask in range(n):
        stop = np.zeros(lattice.n_macro_nodes, dtype=bool)
        for b in range(n_nt):
            if (mask >> b) & 1:
                stop[b] = True
        stop[lattice.macro_layer(lattice.T)] = True
        yield StoppingRule(lattice, stop)


def _mark_matrix(lattice: Lattice, masks: np.ndarray) -> np.ndarray:
    """Bool matrix (n_rules, n_macro) of marks for the given bitmasks."""
    n_nt = int(lattice.macro_offsets[lattice.T])
    bits = ((masks[:, None] >> np.arange(n_nt)[None, :]) & 1).astype(bool)
    marks = np.zeros((masks.shape[0], lattice.n_macro_nodes), dtype=bool)
    marks[:, :n_nt] = bits
    marks[:, lattice.macro_layer(lattice.T)] = True
    return marks


def batched_roots(
    lattice: Lattice,
    co: PeriodCoefficients,
    marks: np.ndarray,
    mark_values: np.ndarray,
) -> np.ndarray:
    """Root expectation values for a batch of terminal rules.

    Closed-form one-step solve (the driver family is linear in y), fully
    vectorized across the rule axis.
    """
    m, delta = lattice.m, lattice.delta
    p, dw = lattice.p, lattice.dw
    zw = p * dw / delta
    J = lattice.J
    if J:
        ind = (lattice.branch_jump[:, None] == np.arange(J)[None, :]).astype(np.float64)
        ellw = p[:, None] * (ind - lattice.lam_delta[None, :]) / lattice.lam_delta[None, :]

    sl_T = lattice.macro_layer(lattice.T)
    vals = np.array(mark_values[:, sl_T], dtype=np.float64)
    for i in range(lattice.n_micro - 1, -1, -1):
        k = i // m
        yc = vals[:, lattice.child_local[i]]  # (R, width_i, B)
        ey = yc @ p
        z = yc @ zw
        drift = float(co.c0[k]) + float(co.b[k]) * z + float(co.b_abs[k]) * np.abs(z)
        if J:
            drift = drift + (yc @ ellw) @ co.gn[k]
        y = (ey + delta * drift) / (1.0 - float(co.a[k]) * delta)
        if i % m == 0:
            sl = lattice.macro_layer(k)
            y = np.where(marks[:, sl], mark_values[:, sl], y)
        vals = y
    return vals[:, 0]


def _macro_transition_matrices(lattice: Lattice) -> list[np.ndarray]:
    mats = []
    for k in range(lattice.T):
        P = np.zeros((int(lattice.macro_widths[k]), int(lattice.macro_widths[k + 1])))
        for loc, trans in enumerate(lattice.macro_children(k)):
            for child, pr in trans:
                P[loc, child] = pr
        mats.append(P)
    return mats


def expected_stopping_times(lattice: Lattice, marks: np.ndarray) -> np.ndarray:
    """E[stopping time] per rule in a marks matrix (used for tie-breaking)."""
    mats = _macro_transition_matrices(lattice)
    R = marks.shape[0]
    alive = np.ones((R, int(lattice.macro_widths[0])), dtype=np.float64)
    et = np.zeros(R, dtype=np.float64)
    for k in range(lattice.T + 1):
        mk = marks[:, lattice.macro_layer(k)]
        stopped = np.where(mk, alive, 0.0)
        et += k * stopped.sum(axis=1)
        if k < lattice.T:
            alive = np.where(mk, 0.0, alive) @ mats[k]
    return et


def brute_force_value(
    lattice: Lattice,
    driver: DriverSpec,
    xi,
    budget: EnumerationBudget | None = None,
    chunk: int = 4096,
) -> tuple[float, StoppingRule]:
    """Exhaustive maximum of the root expectation over all stopping rules.

    Ties within 1e-12 of the maximum are broken toward the rule with the
    smallest expected stopping time (then the smallest bitmask).
    """
    n = _check_budget(lattice, budget)
    xi_m = xi.macro_values() if isinstance(xi, AdaptedProcess) else np.asarray(xi, dtype=np.float64)
    co = driver.coefficients(lattice.T)
    roots = np.empty(n, dtype=np.float64)
    for lo in range(0, n, chunk):
        masks = np.arange(lo, min(lo + chunk, n), dtype=np.int64)
        marks = _mark_matrix(lattice, masks)
        mv = np.broadcast_to(xi_m, marks.shape).copy()
        roots[lo : lo + masks.shape[0]] = batched_roots(lattice, co, marks, mv)
    best = float(roots.max())
    cand = np.nonzero(roots >= best - 1e-12)[0]
    marks_c = _mark_matrix(lattice, cand.astype(np.int64))
    ets = expected_stopping_times(lattice, marks_c)
    order = np.lexsort((cand, ets))
    winner = int(cand[order[0]])
    rule = StoppingRule(lattice, _mark_matrix(lattice, np.array([winner]))[0])
    return best, rule


@dataclass
class NashSearchResult:
    """Exhaustive equilibrium search: value matrices over all rule pairs."""

    lattice: Lattice
    j1: np.ndarray  # (n_rules, n_rules), j1[i, j] = player 1 value of (rule_i, rule_j)
    j2: np.ndarray
    pairs: list[tuple[int, int]]  # equilibrium index pairs
    tol: float

    def rule(self, mask: int) -> StoppingRule:
        return StoppingRule(self.lattice, _mark_matrix(self.lattice, np.array([mask]))[0])

    def rules(self) -> list[tuple[StoppingRule, StoppingRule]]:
        return [(self.rule(i), self.rule(j)) for i, j in self.pairs]

    def _index_of(self, rule: StoppingRule) -> int:
        n_nt = int(self.lattice.macro_offsets[self.lattice.T])
        marks = rule.minimal_marks()[:n_nt]
        return int(sum(1 << b for b in np.nonzero(marks)[0]))

    def contains(self, tau1: StoppingRule, tau2: StoppingRule) -> bool:
        """Is the (pathwise-normalized) pair among the equilibria found?"""
        want = (self._index_of(tau1), self._index_of(tau2))
        return want in set(self.pairs)


def brute_force_nash(game, budget: EnumerationBudget | None = None, tol: float = 1e-10) -> NashSearchResult:
    """All rule pairs from which no enumerated unilateral deviation improves.

    The budget applies to the pair count (square of the rule count).
    ``game`` provides lattice, payoff arrays x1/y1/x2/y2 and drivers f1/f2.
    """
    lattice: Lattice = game.lattice
    n = _check_budget(lattice, budget, square=True)
    masks = np.arange(n, dtype=np.int64)
    marks = _mark_matrix(lattice, masks)
    co1 = game.f1.coefficients(lattice.T)
    co2 = game.f2.coefficients(lattice.T)
    j1 = np.empty((n, n), dtype=np.float64)
    j2 = np.empty((n, n), dtype=np.float64)
    for j in range(n):
        union = marks | marks[j][None, :]
        mv1 = np.where(marks, game.x1[None, :], game.y1[None, :])
        j1[:, j] = batched_roots(lattice, co1, union, mv1)
    for i in range(n):
        union = marks | marks[i][None, :]
        mv2 = np.where(marks & ~marks[i][None, :], game.x2[None, :], game.y2[None, :])
        j2[i, :] = batched_roots(lattice, co2, union, mv2)
    best1 = j1.max(axis=0)  # per opponent rule j
    best2 = j2.max(axis=1)  # per opponent rule i
    pairs = [
        (int(i), int(j))
        for i, j in zip(*np.nonzero((j1 >= best1[None, :] - tol) & (j2 >= best2[:, None] - tol)))
    ]
    return NashSearchResult(lattice=lattice, j1=j1, j2=j2, pairs=pairs, tol=tol)


def classical_snell(lattice: Lattice, xi) -> AdaptedProcess:
    """Classical (zero-driver) envelope by plain dynamic programming.

    Deliberately written per node with explicit probability sums; this
    is the independent check on the engine's zero-driver reduction.
    """
    xi_m = xi.macro_values() if isinstance(xi, AdaptedProcess) else np.asarray(xi, dtype=np.float64)
    m = lattice.m
    vals = np.empty(lattice.n_nodes, dtype=np.float64)
    sl = slice(int(lattice.layer_offsets[lattice.n_micro]), lattice.n_nodes)
    vals[sl] = xi_m[lattice.macro_layer(lattice.T)]
    for i in range(lattice.n_micro - 1, -1, -1):
        off = int(lattice.layer_offsets[i])
        noff = int(lattice.layer_offsets[i + 1])
        for loc in range(int(lattice.layer_widths[i])):
            e = 0.0
            for b in range(lattice.B):
                e += float(lattice.p[b]) * vals[noff + int(lattice.child_local[i][loc, b])]
            if i % m == 0:
                k = i // m
                e = max(e, float(xi_m[int(lattice.macro_offsets[k]) + loc]))
            vals[off + loc] = e
    return AdaptedProcess(lattice, vals[lattice.macro_to_global], "macro")


def classical_conditional_expectation(lattice: Lattice, terminal_values) -> np.ndarray:
    """E[xi_T | node] on every micro layer, by plain probability sums."""
    xi_m = (
        terminal_values.macro_values()
        if isinstance(terminal_values, AdaptedProcess)
        else np.asarray(terminal_values, dtype=np.float64)
    )
    vals = np.empty(lattice.n_nodes, dtype=np.float64)
    sl = slice(int(lattice.layer_offsets[lattice.n_micro]), lattice.n_nodes)
    vals[sl] = xi_m[lattice.macro_layer(lattice.T)]
    for i in range(lattice.n_micro - 1, -1, -1):
        off = int(lattice.layer_offsets[i])
        noff = int(lattice.layer_offsets[i + 1])
        for loc in range(int(lattice.layer_widths[i])):
            e = 0.0
            for b in range(lattice.B):
                e += float(lattice.p[b]) * vals[noff + int(lattice.child_local[i][loc, b])]
            vals[off + loc] = e
    return vals


def zero_sum_value(lattice: Lattice, X, Y) -> tuple[float, np.ndarray]:
    """Classical zero-sum stopping game value by min-max dynamic programming.

    Payoff X to the maximizer when it stops first (ties included), Y when
    the minimizer stops strictly first; requires X <= Y, X_T = Y_T.
    """
    x = X.macro_values() if isinstance(X, AdaptedProcess) else np.asarray(X, dtype=np.float64)
    y = Y.macro_values() if isinstance(Y, AdaptedProcess) else np.asarray(Y, dtype=np.float64)
    v = x[lattice.macro_layer(lattice.T)].copy()
    out = np.empty(lattice.n_macro_nodes, dtype=np.float64)
    out[lattice.macro_layer(lattice.T)] = v
    for k in range(lattice.T - 1, -1, -1):
        cont = np.empty(int(lattice.macro_widths[k]))
        for loc, trans in enumerate(lattice.macro_children(k)):
            cont[loc] = sum(pr * v[child] for child, pr in trans)
        sl = lattice.macro_layer(k)
        v = np.minimum(y[sl], np.maximum(x[sl], cont))
        out[sl] = v
    return float(out[0]), out


class PeriodSolver:
    """One-macro-period expectation operators, solved by recursive descent.

    ``value`` applies the driver over the period's micro steps with a
    closed-form y-solve; ``classical`` is the plain conditional
    expectation through the aggregated macro transition.
    """

    def __init__(self, lattice: Lattice, driver: DriverSpec):
        self.lattice = lattice
        self.co = driver.coefficients(lattice.T)
        self._trans = _macro_transition_matrices(lattice)

    def classical(self, k: int, start_local: int, child_values: np.ndarray) -> float:
        return float(self._trans[k][start_local] @ child_values)

    def value(self, k: int, start_local: int, child_values: np.ndarray) -> float:
        lat, co = self.lattice, self.co
        delta = lat.delta
        i1 = lat.m * (k + 1)
        memo: dict[tuple[int, int], float] = {}

        def rec(i: int, loc: int) -> float:
            if i == i1:
                return float(child_values[loc])
            key = (i, loc)
            if key in memo:
                return memo[key]
            vals = np.array([rec(i + 1, int(lat.child_local[i][loc, b])) for b in range(lat.B)])
            ey = float(lat.p @ vals)
            z = float(lat.p @ (vals * lat.dw)) / delta
            drift = float(co.c0[k]) + float(co.b[k]) * z + float(co.b_abs[k]) * abs(z)
            for j in range(lat.J):
                ind = (lat.branch_jump == j).astype(np.float64)
                ld = float(lat.lam_delta[j])
                drift += float(co.gn[k, j]) * (float(lat.p @ (vals * (ind - ld))) / ld)
            y = (ey + delta * drift) / (1.0 - float(co.a[k]) * delta)
            memo[key] = y
            return y

        return rec(lat.m * k, start_local)


def pathwise_g_expectation_root(
    lattice: Lattice, driver: DriverSpec, rule: StoppingRule, xi
) -> float:
    """Root value of the stopped expectation computed on the macro path
    tree with true frozen tails (independent route for small lattices)."""
    xi_m = xi.macro_values() if isinstance(xi, AdaptedProcess) else np.asarray(xi, dtype=np.float64)
    solver = PeriodSolver(lattice, driver)
    memo: dict[tuple[int, int], float] = {}

    def val(k: int, loc: int) -> float:
        mi = lattice.macro_index(k, loc)
        if rule.stop[mi]:
            return float(xi_m[mi])
        key = (k, loc)
        if key in memo:
            return memo[key]
        width = int(lattice.macro_widths[k + 1])
        child_vals = np.zeros(width)
        for child, _ in lattice.macro_children(k)[loc]:
            child_vals[child] = val(k + 1, child)
        v = solver.value(k, loc, child_vals)
        memo[key] = v
        return v

    return val(0, 0)
