"""Optimal stopping of a payoff process under a nonlinear expectation.

The value process solves the backward max-recursion

    U_T = xi_T,   U_k = max(xi_k, E^g_{k,k+1}(U_{k+1})),

and the first time U touches xi (within a tolerance, ties resolved
toward stopping) is an optimal stopping time from any start date.  The
same pass also serves problems stopped at an exogenous rule mu: marked
nodes are frozen at a supplied payoff and the driver below them never
acts, which is what the game module's best responses need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .driver import DriverSpec, validate
from .gexp import backward_values, g_expectation, check_supermartingale, _macro_array
from .lattice import AdaptedProcess, Lattice, StoppingRule
from .reporting import CheckReport

CONTACT_TOL = 1e-10


@dataclass
class SnellResult:
    """Envelope values, contact set, and the optimal rules it induces."""

    lattice: Lattice
    U: AdaptedProcess
    contact: np.ndarray  # bool per macro node: U meets the payoff here
    V0: float
    payoff: np.ndarray = field(repr=False, default=None)

    def nu(self, k: int = 0) -> StoppingRule:
        """First-contact stopping rule for the problem started at date k."""
        lat = self.lattice
        stop = self.contact.copy()
        stop[: int(lat.macro_offsets[k])] = False
        stop[lat.macro_layer(lat.T)] = True
        return StoppingRule(lat, stop)


def snell_envelope(
    lattice: Lattice,
    driver: DriverSpec,
    xi,
    terminal_rule: StoppingRule | None = None,
    terminal_values=None,
    contact_tol: float = CONTACT_TOL,
    check: bool = True,
) -> SnellResult:
    """Backward max-recursion for the envelope of ``xi``.

    Without a ``terminal_rule`` the horizon is the only forced stop.
    With one, marked nodes are frozen at ``terminal_values`` (default:
    ``xi`` there), which computes the envelope of the payoff switched to
    its frozen tail from the rule on.
    """
    if check:
        rep = validate(driver, lattice)
        if not rep.ok:
            raise ValueError(
                "driver failed validation: "
                + "; ".join(f"{c.name}: {c.detail}" for c in rep.failures())
            )
    xi_m = _macro_array(lattice, xi)
    rule = terminal_rule if terminal_rule is not None else StoppingRule.horizon(lattice)
    frozen = xi_m if terminal_values is None else _macro_array(lattice, terminal_values)
    vals = backward_values(
        lattice,
        driver.coefficients(lattice.T),
        rule.stop,
        frozen,
        running_payoff=xi_m,
    )
    u = vals[lattice.macro_to_global]
    target = np.where(rule.stop, frozen, xi_m)
    contact = rule.stop | (np.abs(u - target) <= contact_tol)
    return SnellResult(
        lattice=lattice,
        U=AdaptedProcess(lattice, u, "macro"),
        contact=contact,
        V0=float(vals[0]),
        payoff=xi_m,
    )


def verify_optimality(
    lattice: Lattice,
    driver: DriverSpec,
    xi,
    result: SnellResult,
    k: int,
    tol: float = 1e-10,
    brute_force: bool = False,
    budget=None,
) -> CheckReport:
    """Check U_k = E^g_{k,nu_k}(xi_{nu_k}) at every date-k node.

    With ``brute_force`` the root value is also compared against the
    exhaustive maximum over all stopping rules (tiny lattices only).
    """
    xi_m = _macro_array(lattice, xi)
    rule = result.nu(k)
    proc = g_expectation(lattice, driver, rule, xi_m, check=False)
    vals = proc.macro_values()
    u = result.U.macro_values()
    sl = lattice.macro_layer(k)
    gaps = np.abs(vals[sl] - u[sl])
    failures = [
        f"node {lattice.node_id(lattice.macro_global(k, loc))}: gap {g:.3e}"
        for loc, g in enumerate(gaps)
        if g > tol
    ]
    extra = {}
    if brute_force and k == 0:
        from . import oracle

        bf_value, bf_rule = oracle.brute_force_value(lattice, driver, xi_m, budget=budget)
        extra["brute_force_value"] = bf_value
        if abs(bf_value - result.V0) > tol:
            failures.append(
                f"brute-force maximum {bf_value:.12g} differs from V0 {result.V0:.12g}"
            )
        nu_val = float(vals[lattice.macro_index(0, 0)])
        if abs(bf_value - nu_val) > tol:
            failures.append("exhaustive maximum is not attained at the contact rule")
    return CheckReport(
        name="snell_optimality",
        passed=not failures,
        max_abs_gap=float(gaps.max()) if gaps.size else 0.0,
        n_checked=int(gaps.size),
        failures=failures,
        extra=extra,
    )


def smallest_supermartingale_check(
    lattice: Lattice,
    driver: DriverSpec,
    xi,
    candidate,
    tol: float = 1e-10,
) -> CheckReport:
    """Check that a dominating supermartingale lies above the envelope.

    Precondition failures (candidate not a supermartingale, or not
    dominating the payoff) are reported, not raised.
    """
    xi_m = _macro_array(lattice, xi)
    cand = _macro_array(lattice, candidate)
    failures: list[str] = []
    sup = check_supermartingale(lattice, driver, cand, tol=tol)
    if not sup.passed:
        failures.append("precondition: candidate is not a supermartingale")
    if (cand < xi_m - tol).any():
        failures.append("precondition: candidate does not dominate the payoff")
    result = snell_envelope(lattice, driver, xi_m, check=False)
    u = result.U.macro_values()
    gap = u - cand  # positive where the candidate dips below the envelope
    worst = float(gap.max())
    if worst > tol:
        failures.append(f"candidate below envelope by {worst:.3e}")
    return CheckReport(
        name="smallest_supermartingale",
        passed=not failures,
        max_abs_gap=max(worst, 0.0),
        n_checked=int(cand.size),
        failures=failures,
        extra={"precondition_supermartingale": sup.passed},
    )
