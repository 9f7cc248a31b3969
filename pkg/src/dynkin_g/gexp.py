"""Nonlinear conditional expectations by backward recursion of one-step solves.

The one-step scheme is implicit in y and explicit in the martingale
coefficients: given child values Y', the Brownian coefficient is the
projection z = E[Y' dW]/delta, the jump coefficients are the compensated
covariances ell_j = Cov(Y', dN_j)/(lambda_j delta), and y solves

    y = E[Y'] + g(t, y, z, ell) * delta

by Picard iteration from y0 = E[Y'] (contraction under K*delta < 1).

Stopping enters structurally: the backward pass overwrites marked macro
nodes with their terminal payoff, which freezes the value there exactly
as a killed driver would.  Values the recursion produces strictly below
a mark are restart values (the expectation of the subproblem starting
there); everything read at or above reachable marks is exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .driver import DriverSpec, PeriodCoefficients, StoppedDriver, evaluate, validate
from .lattice import AdaptedProcess, Lattice, StoppingRule
from .reporting import CheckReport

if os.environ.get("DYNKIN_G_FORCE_NUMPY"):
    from . import _kernels_py as _kernels
else:
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _kernels  # type: ignore[no-redef]

BACKEND = _kernels.BACKEND

PICARD_TOL = 1e-12
PICARD_MAX_ITER = 100


class SolverError(RuntimeError):
    """One-step solve failed to converge (validation was bypassed or wrong)."""


def _macro_array(lattice: Lattice, values) -> np.ndarray:
    if isinstance(values, AdaptedProcess):
        return values.macro_values()
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (lattice.n_macro_nodes,):
        raise ValueError(
            f"expected {lattice.n_macro_nodes} macro values, got {arr.shape}"
        )
    return arr


@dataclass
class OneStepSolution:
    """Solved node value plus its martingale representation coefficients."""

    y: float
    z: float
    ell: np.ndarray
    iterations: int


def one_step(
    lattice: Lattice,
    node: int,
    driver_eval,
    next_values: Sequence[float],
    tol: float = PICARD_TOL,
    max_iter: int = PICARD_MAX_ITER,
) -> OneStepSolution:
    """Reference per-node one-step solve; also the semantics the kernels mirror.

    ``driver_eval`` is a DriverSpec or a callable g(t, y, z, ell).
    """
    lattice.children(node)  # raises on terminal nodes
    vals = np.asarray(next_values, dtype=np.float64)
    if vals.shape != (lattice.B,):
        raise ValueError(f"expected {lattice.B} child values, got {vals.shape}")
    i = lattice.layer_of(node)
    t = i * lattice.delta
    if isinstance(driver_eval, DriverSpec):
        g = lambda tt, y, z, ell: evaluate(driver_eval, tt, y, z, ell)
    elif callable(driver_eval):
        g = driver_eval
    else:
        raise TypeError("driver_eval must be a DriverSpec or callable")

    p, dw = lattice.p, lattice.dw
    delta = lattice.delta
    ey = float(p @ vals)
    z = float(p @ (vals * dw)) / delta
    ell = np.zeros(lattice.J, dtype=np.float64)
    for j in range(lattice.J):
        ind = (lattice.branch_jump == j).astype(np.float64)
        ld = float(lattice.lam_delta[j])
        ell[j] = float(p @ (vals * (ind - ld))) / ld

    y = ey
    for it in range(1, max_iter + 1):
        y_new = ey + g(t, y, z, ell) * delta
        d = abs(y_new - y)
        y = y_new
        if d <= tol:
            return OneStepSolution(y=y, z=z, ell=ell, iterations=it)
    raise SolverError(
        f"one-step solve did not converge in {max_iter} iterations at node "
        f"{lattice.node_id(node)}"
    )


def _layer_slice(lattice: Lattice, i: int) -> slice:
    return slice(int(lattice.layer_offsets[i]), int(lattice.layer_offsets[i + 1]))


def backward_values(
    lattice: Lattice,
    co: PeriodCoefficients,
    marks: np.ndarray,
    mark_values: np.ndarray,
    running_payoff: np.ndarray | None = None,
    tol: float = PICARD_TOL,
    max_iter: int = PICARD_MAX_ITER,
) -> np.ndarray:
    """Shared backward pass over all micro layers.

    ``marks``/``mark_values``/``running_payoff`` are macro-node arrays.
    With ``running_payoff`` the pass is a Snell recursion: unmarked macro
    nodes take max(payoff, continuation); marked ones are overwritten
    with ``mark_values`` either way.  Horizon nodes must all be marked.
    """
    out = np.empty(lattice.n_nodes, dtype=np.float64)
    sl_T = lattice.macro_layer(lattice.T)
    if not marks[sl_T].all():
        raise ValueError("horizon macro nodes must all be marked")
    out[_layer_slice(lattice, lattice.n_micro)] = mark_values[sl_T]

    m = lattice.m
    try:
        for i in range(lattice.n_micro - 1, -1, -1):
            k = i // m
            y = _kernels.step_layer(
                np.ascontiguousarray(out[_layer_slice(lattice, i + 1)]),
                lattice.child_local[i],
                lattice.p,
                lattice.dw,
                lattice.branch_jump,
                lattice.lam_delta,
                lattice.delta,
                float(co.c0[k]),
                float(co.a[k]),
                float(co.b[k]),
                float(co.b_abs[k]),
                np.ascontiguousarray(co.gn[k]),
                tol,
                max_iter,
            )
            if i % m == 0:
                sl = lattice.macro_layer(k)
                if running_payoff is not None:
                    y = np.maximum(running_payoff[sl], y)
                mk = marks[sl]
                y[mk] = mark_values[sl][mk]
            out[_layer_slice(lattice, i)] = y
    except RuntimeError as exc:  # non-convergence surfaced by a kernel
        raise SolverError(str(exc)) from exc
    return out


@dataclass
class GExpectationProcess:
    """Backward-solved value process, on every micro layer."""

    lattice: Lattice
    driver: DriverSpec
    terminal_rule: StoppingRule
    micro_values: np.ndarray
    from_k: int = 0

    @property
    def process(self) -> AdaptedProcess:
        return AdaptedProcess(self.lattice, self.micro_values, "micro")

    def macro_values(self) -> np.ndarray:
        return self.micro_values[self.lattice.macro_to_global]

    def at_macro(self, k: int, local: int) -> float:
        return float(self.micro_values[self.lattice.macro_global(k, local)])

    @property
    def root(self) -> float:
        return float(self.micro_values[0])


def g_expectation(
    lattice: Lattice,
    driver: DriverSpec,
    terminal_rule: StoppingRule,
    terminal_values,
    from_k: int = 0,
    check: bool = True,
) -> GExpectationProcess:
    """Value process of the expectation with terminal time ``terminal_rule``.

    Marked macro nodes carry the terminal payoff; earlier nodes solve the
    one-step recursion.  The recursion is run to the root (layers below
    ``from_k`` are valid restart values and come for free).
    """
    if check:
        rep = validate(driver, lattice)
        if not rep.ok:
            raise ValueError(
                "driver failed validation: "
                + "; ".join(f"{c.name}: {c.detail}" for c in rep.failures())
            )
    xi = _macro_array(lattice, terminal_values)
    vals = backward_values(
        lattice,
        driver.coefficients(lattice.T),
        terminal_rule.stop,
        xi,
    )
    return GExpectationProcess(lattice, driver, terminal_rule, vals, from_k)


def risk_measure(proc: GExpectationProcess) -> AdaptedProcess:
    """Dynamic risk of the position: pointwise negation of the value process."""
    return AdaptedProcess(proc.lattice, -proc.micro_values, "micro")


def one_period_expectation(
    lattice: Lattice,
    driver: DriverSpec | PeriodCoefficients,
    k: int,
    next_values: np.ndarray,
) -> np.ndarray:
    """E^g_{k,k+1} of macro-layer-(k+1) values, per macro-layer-k node."""
    co = driver if isinstance(driver, PeriodCoefficients) else driver.coefficients(lattice.T)
    m = lattice.m
    y = np.asarray(next_values, dtype=np.float64)
    try:
        for i in range(m * (k + 1) - 1, m * k - 1, -1):
            y = _kernels.step_layer(
                np.ascontiguousarray(y),
                lattice.child_local[i],
                lattice.p,
                lattice.dw,
                lattice.branch_jump,
                lattice.lam_delta,
                lattice.delta,
                float(co.c0[k]),
                float(co.a[k]),
                float(co.b[k]),
                float(co.b_abs[k]),
                np.ascontiguousarray(co.gn[k]),
                PICARD_TOL,
                PICARD_MAX_ITER,
            )
    except RuntimeError as exc:
        raise SolverError(str(exc)) from exc
    return y


def check_supermartingale(
    lattice: Lattice,
    driver: DriverSpec | StoppedDriver,
    phi,
    tol: float = 1e-10,
) -> CheckReport:
    """One-step dominance check: phi_k >= E^g_{k,k+1}(phi_{k+1}) everywhere.

    With a :class:`StoppedDriver` the check covers the stopped process
    under the killed driver: marked macro nodes are frozen (their one
    step is the identity, an exact equality) and only unmarked nodes are
    tested against the base driver.
    """
    stop_rule = None
    base = driver
    if isinstance(driver, StoppedDriver):
        stop_rule = driver.horizon_rule
        base = driver.base
    phi_m = _macro_array(lattice, phi)
    co = base.coefficients(lattice.T)

    failures: list[str] = []
    n_checked = 0
    n_equal = 0
    max_gap = 0.0  # signed: positive means the inequality is violated
    max_abs = 0.0
    for k in range(lattice.T - 1, -1, -1):
        sl = lattice.macro_layer(k)
        nxt = phi_m[lattice.macro_layer(k + 1)]
        e = one_period_expectation(lattice, co, k, nxt)
        here = phi_m[sl]
        for loc in range(e.shape[0]):
            mi = int(lattice.macro_offsets[k]) + loc
            if stop_rule is not None and stop_rule.stop[mi]:
                n_equal += 1  # frozen step: identity, equality by construction
                continue
            gap = float(e[loc] - here[loc])
            n_checked += 1
            max_gap = max(max_gap, gap)
            max_abs = max(max_abs, abs(gap))
            if abs(gap) <= tol:
                n_equal += 1
            if gap > tol:
                failures.append(
                    f"node {lattice.node_id(lattice.macro_global(k, loc))}: "
                    f"E - phi = {gap:.3e}"
                )
    is_martingale = not failures and max_abs <= tol
    return CheckReport(
        name="supermartingale",
        passed=not failures,
        max_abs_gap=max_abs,
        n_checked=n_checked,
        failures=failures,
        extra={
            "is_martingale": bool(is_martingale),
            "n_equalities": n_equal,
            "worst_signed_gap": max_gap,
        },
    )


def check_optional_sampling(
    lattice: Lattice,
    driver: DriverSpec,
    phi,
    sigma: StoppingRule,
    tau: StoppingRule,
    martingale: bool = False,
    tol: float = 1e-10,
) -> CheckReport:
    """Sampling inequality E^g_{sigma,tau}(phi_tau) <= phi_sigma (= for martingales)."""
    if not sigma.pathwise_leq(tau):
        raise ValueError("optional sampling requires sigma <= tau on every path")
    phi_m = _macro_array(lattice, phi)
    proc = g_expectation(lattice, driver, tau, phi_m, check=False)
    vals = proc.macro_values()
    read = np.nonzero(sigma.minimal_marks())[0]
    failures: list[str] = []
    max_abs = 0.0
    for mi in read:
        gap = float(vals[mi] - phi_m[mi])
        max_abs = max(max_abs, abs(gap))
        bad = abs(gap) > tol if martingale else gap > tol
        if bad:
            k, loc = lattice.macro_of(int(mi))
            failures.append(
                f"node {lattice.node_id(lattice.macro_global(k, loc))}: gap {gap:.3e}"
            )
    return CheckReport(
        name="optional_sampling_martingale" if martingale else "optional_sampling",
        passed=not failures,
        max_abs_gap=max_abs,
        n_checked=len(read),
        failures=failures,
    )


def _descend_value(
    lattice: Lattice,
    co: PeriodCoefficients,
    node: int,
    terminal: np.ndarray,
    memo: dict[int, float],
) -> float:
    """Closed-form recursive solve below a node (independent of the kernels)."""
    if node in memo:
        return memo[node]
    i = lattice.layer_of(node)
    if i == lattice.n_micro:
        k_local = node - int(lattice.layer_offsets[i])
        v = float(terminal[int(lattice.macro_offsets[lattice.T]) + k_local])
        memo[node] = v
        return v
    vals = np.array(
        [_descend_value(lattice, co, c, terminal, memo) for _, c in lattice.children(node)]
    )
    k = i // lattice.m
    delta = lattice.delta
    ey = float(lattice.p @ vals)
    z = float(lattice.p @ (vals * lattice.dw)) / delta
    drift = float(co.c0[k]) + float(co.b[k]) * z + float(co.b_abs[k]) * abs(z)
    for j in range(lattice.J):
        ind = (lattice.branch_jump == j).astype(np.float64)
        ld = float(lattice.lam_delta[j])
        ell_j = float(lattice.p @ (vals * (ind - ld))) / ld
        drift += float(co.gn[k, j]) * ell_j
    y = (ey + delta * drift) / (1.0 - float(co.a[k]) * delta)
    memo[node] = y
    return y


def indicator_localization_check(
    lattice: Lattice,
    driver: DriverSpec,
    tau: StoppingRule,
    A,
    zeta,
    tol: float = 1e-10,
) -> CheckReport:
    """Localization identity 1_A E^g(zeta) = E^{g 1_A}(1_A zeta) at the stop nodes.

    ``A`` must be a union of reachable stop-node events of ``tau``.  The
    left side reads the engine's global backward pass; the right side is
    recomputed independently below each stop node (closed-form solves),
    with the killed driver and zero terminal outside ``A``.
    """
    minimal = tau.minimal_marks()
    if isinstance(A, np.ndarray) and A.dtype == bool:
        a_mask = A.copy()
    else:
        a_mask = np.zeros(lattice.n_macro_nodes, dtype=bool)
        a_mask[list(A)] = True
    if (a_mask & ~minimal).any():
        raise ValueError("A must be a union of reachable stop-node events of tau")

    zeta_m = _macro_array(lattice, zeta)
    horizon = StoppingRule.horizon(lattice)
    proc = g_expectation(lattice, driver, horizon, zeta_m, check=False)
    vals = proc.macro_values()
    co = driver.coefficients(lattice.T)
    memo: dict[int, float] = {}

    failures: list[str] = []
    max_abs = 0.0
    n = 0
    for mi in np.nonzero(minimal)[0]:
        k, loc = lattice.macro_of(int(mi))
        g = lattice.macro_global(k, loc)
        lhs = float(vals[mi]) if a_mask[mi] else 0.0
        rhs = _descend_value(lattice, co, g, zeta_m, memo) if a_mask[mi] else 0.0
        gap = abs(lhs - rhs)
        max_abs = max(max_abs, gap)
        n += 1
        if gap > tol:
            failures.append(f"node {lattice.node_id(g)}: |lhs - rhs| = {gap:.3e}")
    return CheckReport(
        name="indicator_localization",
        passed=not failures,
        max_abs_gap=max_abs,
        n_checked=n,
        failures=failures,
    )
