"""Parametric Lipschitz drivers g(t, y, z, l) and their validation.

The family is

    g = c0 + a*y + b*z + b_abs*|z| + sum_j gamma_j * nu_j * l_j,

with every coefficient optionally piecewise-constant per macro period.
``gamma_j >= -1`` keeps the induced nonlinear expectation monotone, and
two step-size conditions (contraction of the implicit one-step solve,
monotonicity of the one-step map in each child value) gate admission to
the solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lattice import Lattice, StoppingRule


class DriverError(ValueError):
    """Malformed driver specification or argument mismatch."""


def _per_period(value, T: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.ndim != 1:
        raise DriverError(f"{name} must be a scalar or a 1-d sequence")
    if arr.shape[0] == 1:
        return np.repeat(arr, T)
    if arr.shape[0] != T:
        raise DriverError(f"{name} must have one entry per macro period ({T}), got {arr.shape[0]}")
    return arr.copy()


@dataclass(frozen=True)
class DriverSpec:
    """Coefficients of the parametric driver.

    Scalars apply to all macro periods; sequences give one value per
    period.  ``gamma`` has one coefficient per jump mark (or a per-period
    row of them) and ``nu`` carries the matching measure weights.
    """

    c0: float | Sequence[float] = 0.0
    a: float | Sequence[float] = 0.0
    b: float | Sequence[float] = 0.0
    b_abs: float | Sequence[float] = 0.0
    gamma: tuple = ()
    nu: tuple = ()

    @classmethod
    def for_lattice(cls, lattice: Lattice, c0=0.0, a=0.0, b=0.0, b_abs=0.0, gamma=None) -> "DriverSpec":
        """Build a spec whose jump dimension and nu weights match the lattice."""
        g = tuple(float(x) for x in (gamma if gamma is not None else (0.0,) * lattice.J))
        if len(g) != lattice.J:
            raise DriverError(f"gamma must have {lattice.J} entries, got {len(g)}")
        return cls(c0=c0, a=a, b=b, b_abs=b_abs, gamma=g, nu=tuple(float(x) for x in lattice.nu))

    @property
    def n_marks(self) -> int:
        return len(self.nu)

    def coefficients(self, T: int) -> "PeriodCoefficients":
        """Resolve to per-period arrays for a horizon of T macro periods."""
        J = self.n_marks
        g = np.asarray(self.gamma, dtype=np.float64)
        if g.ndim == 0:
            g = g.reshape(1)
        if g.ndim == 1:
            if g.shape[0] != J:
                raise DriverError(f"gamma must have {J} entries, got {g.shape[0]}")
            gm = np.tile(g, (T, 1))
        elif g.ndim == 2:
            if g.shape != (T, J):
                raise DriverError(f"per-period gamma must have shape ({T}, {J})")
            gm = g.copy()
        else:
            raise DriverError("gamma must be 1-d or 2-d")
        nu = np.asarray(self.nu, dtype=np.float64)
        return PeriodCoefficients(
            c0=_per_period(self.c0, T, "c0"),
            a=_per_period(self.a, T, "a"),
            b=_per_period(self.b, T, "b"),
            b_abs=_per_period(self.b_abs, T, "b_abs"),
            gamma=gm,
            nu=nu,
            gn=gm * nu[None, :],
        )


@dataclass(frozen=True)
class PeriodCoefficients:
    """Per-period coefficient arrays; ``gn[k, j] = gamma[k, j] * nu[j]``."""

    c0: np.ndarray
    a: np.ndarray
    b: np.ndarray
    b_abs: np.ndarray
    gamma: np.ndarray
    nu: np.ndarray
    gn: np.ndarray


def evaluate(driver: DriverSpec, t: float, y: float, z: float, ell: Sequence[float]) -> float:
    """g(t, y, z, l) with the period picked by floor(t), clipped to the last."""
    ell = np.asarray(ell, dtype=np.float64)
    if ell.shape != (driver.n_marks,):
        raise DriverError(f"ell must have {driver.n_marks} entries, got {ell.shape}")

    def pick(v) -> float:
        arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
        k = min(int(math.floor(t)), arr.shape[0] - 1)
        return float(arr[max(k, 0)])

    g = np.asarray(driver.gamma, dtype=np.float64)
    if g.ndim == 2:
        k = min(max(int(math.floor(t)), 0), g.shape[0] - 1)
        grow = g[k]
    else:
        grow = g
    nu = np.asarray(driver.nu, dtype=np.float64)
    jump_term = float(np.dot(grow * nu, ell)) if driver.n_marks else 0.0
    return pick(driver.c0) + pick(driver.a) * y + pick(driver.b) * z + pick(driver.b_abs) * abs(z) + jump_term


def lipschitz_constant(driver: DriverSpec) -> float:
    """K = max over periods of |a| + |b| + |b_abs| + sqrt(sum gamma_j^2 nu_j)."""
    c0 = np.atleast_1d(np.asarray(driver.c0, dtype=np.float64))
    T = max(
        c0.shape[0],
        np.atleast_1d(np.asarray(driver.a)).shape[0],
        np.atleast_1d(np.asarray(driver.b)).shape[0],
        np.atleast_1d(np.asarray(driver.b_abs)).shape[0],
        np.asarray(driver.gamma).shape[0] if np.asarray(driver.gamma).ndim == 2 else 1,
    )
    co = driver.coefficients(T)
    jump = np.sqrt((co.gamma**2 * co.nu[None, :]).sum(axis=1)) if driver.n_marks else np.zeros(T)
    return float((np.abs(co.a) + np.abs(co.b) + np.abs(co.b_abs) + jump).max())


@dataclass
class ValidationCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class ValidationReport:
    checks: list[ValidationCheck]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[ValidationCheck]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks
            ],
        }


def one_step_child_sensitivities(lattice: Lattice, co: PeriodCoefficients, k: int) -> float:
    """Smallest derivative factor of the one-step value in any child value.

    The solved one-step value is y = [E[Y'] + delta*(c0 + b z + b_abs|z|
    + sum gn_j l_j + a y)], so d y / d Y'_c = p_c * F_c / (1 - a*delta)
    with F_c enumerated over branches and both signs of z.  The one-step
    map is monotone in every child iff min_c F_c >= 0 (and a*delta < 1).
    """
    delta = lattice.delta
    worst = math.inf
    for bidx in range(lattice.B):
        dw = float(lattice.dw[bidx])
        o = int(lattice.branch_jump[bidx])
        jump_term = 0.0
        for j in range(lattice.J):
            ld = float(lattice.lam_delta[j])
            ind = 1.0 if o == j else 0.0
            jump_term += float(co.gn[k, j]) * delta * (ind - ld) / ld
        for sgn in (+1.0, -1.0):
            f = 1.0 + (float(co.b[k]) + float(co.b_abs[k]) * sgn) * dw + jump_term
            worst = min(worst, f)
    return worst


def validate(driver: DriverSpec, lattice: Lattice) -> ValidationReport:
    """Admission checks: mark arity, gamma lower bound, contraction, monotone step."""
    checks: list[ValidationCheck] = []
    if driver.n_marks != lattice.J:
        checks.append(
            ValidationCheck(
                "mark_arity",
                False,
                f"driver has {driver.n_marks} jump coefficients, lattice has {lattice.J} marks",
            )
        )
        return ValidationReport(checks)
    checks.append(ValidationCheck("mark_arity", True, f"{lattice.J} marks"))
    if driver.n_marks and not np.allclose(np.asarray(driver.nu), lattice.nu):
        checks.append(
            ValidationCheck("nu_weights", False, "driver nu weights differ from lattice marks")
        )
    else:
        checks.append(ValidationCheck("nu_weights", True, "consistent"))

    co = driver.coefficients(lattice.T)
    gmin = float(co.gamma.min()) if driver.n_marks else 0.0
    checks.append(
        ValidationCheck(
            "jump_coefficient_lower_bound",
            gmin >= -1.0,
            f"min gamma = {gmin:g} (monotonicity of the risk measure needs gamma >= -1)",
        )
    )

    K = lipschitz_constant(driver)
    kd = K * lattice.delta
    checks.append(
        ValidationCheck(
            "contraction",
            kd < 1.0,
            f"K*delta = {kd:g} (implicit one-step solve needs K*delta < 1)",
        )
    )

    admin = float(min(1.0 - co.a[k] * lattice.delta for k in range(lattice.T)))
    worst = min(one_step_child_sensitivities(lattice, co, k) for k in range(lattice.T))
    checks.append(
        ValidationCheck(
            "monotone_step",
            worst >= 0.0 and admin > 0.0,
            f"min child sensitivity factor = {worst:g}, min(1 - a*delta) = {admin:g}",
        )
    )
    return ValidationReport(checks)


@dataclass(frozen=True)
class StoppedDriver:
    """Driver killed from the stopping time on: g * 1{t <= tau}.

    On the tree this acts through the backward recursion: a period's
    micro steps use the base driver exactly when the governing macro node
    is not yet stopped.  ``active`` exposes that switch per macro node.
    """

    base: DriverSpec
    horizon_rule: StoppingRule

    def active(self, macro_index: int) -> bool:
        return not bool(self.horizon_rule.stop[macro_index])

    def evaluate_at(self, macro_index: int, t: float, y: float, z: float, ell) -> float:
        if not self.active(macro_index):
            return 0.0
        return evaluate(self.base, t, y, z, ell)


def stop_driver(driver: DriverSpec, tau: StoppingRule) -> StoppedDriver:
    return StoppedDriver(base=driver, horizon_rule=tau)
