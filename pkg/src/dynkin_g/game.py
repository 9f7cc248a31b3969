"""Two-player non-zero-sum stopping game and its best-response iteration.

Player 1 collects X1 when stopping first (ties go to player 1) and Y1
when player 2 stops strictly first; player 2 symmetrically collects X2
when strictly first and Y2 otherwise.  Each player values the stopped
payoff through their own nonlinear expectation (drivers f1, f2) and
maximizes it.

The equilibrium construction alternates best responses: against the
opponent's rule mu, a player's problem is the envelope of their X-payoff
switched to the frozen Y-payoff at mu, under the driver killed from mu
on.  The first-contact rule of that envelope is the raw best response;
the update keeps it where it strictly precedes the opponent and
otherwise falls back to the player's previous rule, which makes the odd
and even rule sequences non-increasing and forces stationarity on a
finite tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .driver import DriverSpec, validate
from .gexp import g_expectation, _macro_array
from .lattice import AdaptedProcess, Lattice, StoppingRule
from .oracle import EnumerationBudget, PeriodSolver, _check_budget, _mark_matrix, batched_roots
from .reporting import CheckReport
from .snell import SnellResult, snell_envelope


class IterationError(RuntimeError):
    """Best-response iteration failed to become stationary (a bug: carries the trace)."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class GameSpec:
    """Payoff quadruple and the two players' drivers.

    Requires X1 <= Y1 and X2 <= Y2 everywhere, with equality at the
    horizon (the Y - X spread is the early-cancellation penalty).
    """

    lattice: Lattice
    x1: np.ndarray
    y1: np.ndarray
    x2: np.ndarray
    y2: np.ndarray
    f1: DriverSpec
    f2: DriverSpec

    @classmethod
    def build(cls, lattice: Lattice, X1, Y1, X2, Y2, f1: DriverSpec, f2: DriverSpec) -> "GameSpec":
        x1, y1 = _macro_array(lattice, X1), _macro_array(lattice, Y1)
        x2, y2 = _macro_array(lattice, X2), _macro_array(lattice, Y2)
        spec = cls(lattice, x1, y1, x2, y2, f1, f2)
        spec.validate()
        return spec

    def validate(self) -> None:
        sl_T = self.lattice.macro_layer(self.lattice.T)
        for name, x, y in (("player 1", self.x1, self.y1), ("player 2", self.x2, self.y2)):
            if (x > y + 1e-12).any():
                raise ValueError(f"{name}: X must not exceed Y at any node")
            if not np.allclose(x[sl_T], y[sl_T], rtol=0.0, atol=1e-12):
                raise ValueError(f"{name}: X and Y must coincide at the horizon")
        for nm, d in (("f1", self.f1), ("f2", self.f2)):
            rep = validate(d, self.lattice)
            if not rep.ok:
                raise ValueError(
                    f"driver {nm} failed validation: "
                    + "; ".join(c.name for c in rep.failures())
                )

    def refine(self) -> tuple["GameSpec", np.ndarray]:
        """Same game on the path-refined tree, with the macro-node map back."""
        ref, mapping = self.lattice.refined_twin()
        game = GameSpec(
            ref,
            self.x1[mapping],
            self.y1[mapping],
            self.x2[mapping],
            self.y2[mapping],
            self.f1,
            self.f2,
        )
        return game, mapping


def payoff_terminal_first(
    game: GameSpec, tau1: StoppingRule, tau2: StoppingRule
) -> tuple[StoppingRule, np.ndarray]:
    """Settlement rule tau1 ^ tau2 and player 1's payoff at its stop nodes."""
    rule = tau1.union(tau2)
    values = np.where(tau1.stop, game.x1, game.y1)
    return rule, values


def payoff_terminal_second(
    game: GameSpec, tau1: StoppingRule, tau2: StoppingRule
) -> tuple[StoppingRule, np.ndarray]:
    rule = tau1.union(tau2)
    values = np.where(tau2.stop & ~tau1.stop, game.x2, game.y2)
    return rule, values


def J1(game: GameSpec, tau1: StoppingRule, tau2: StoppingRule) -> float:
    """Player 1's value of the strategy pair (root of the stopped expectation)."""
    rule, values = payoff_terminal_first(game, tau1, tau2)
    return g_expectation(game.lattice, game.f1, rule, values, check=False).root


def J2(game: GameSpec, tau1: StoppingRule, tau2: StoppingRule) -> float:
    rule, values = payoff_terminal_second(game, tau1, tau2)
    return g_expectation(game.lattice, game.f2, rule, values, check=False).root


@dataclass
class BestResponse:
    W: AdaptedProcess
    tau_tilde: StoppingRule
    W0: float
    envelope: SnellResult


def best_response_first(game: GameSpec, tau2: StoppingRule) -> BestResponse:
    """Envelope of X1 switched to frozen Y1 at tau2, driver killed from tau2 on."""
    res = snell_envelope(
        game.lattice, game.f1, game.x1, terminal_rule=tau2, terminal_values=game.y1, check=False
    )
    return BestResponse(W=res.U, tau_tilde=res.nu(0), W0=res.V0, envelope=res)


def best_response_second(game: GameSpec, tau1: StoppingRule) -> BestResponse:
    res = snell_envelope(
        game.lattice, game.f2, game.x2, terminal_rule=tau1, terminal_values=game.y2, check=False
    )
    return BestResponse(W=res.U, tau_tilde=res.nu(0), W0=res.V0, envelope=res)


_PRE = 1
_POST = 2


def _update_rule(
    tau_tilde: StoppingRule,
    opponent: StoppingRule,
    own_previous: StoppingRule,
    raw_form: bool,
) -> StoppingRule:
    """One rule update: stop at the best-response contact where it strictly
    precedes the opponent's stop; where the two collide, fall back to the
    player's previous rule from that node on.

    Implemented as a forward sweep carrying a per-node phase: ``pre``
    until the contact fires, ``post`` after a collision (then the
    previous rule's marks stop the path).  The raw form (first two
    updates) takes the contact set joined with the previous rule's marks
    before the comparison; afterwards that join is redundant.

    On a recombining tree a node can be reachable in both phases with
    conflicting decisions; the resulting rule is then not exactly the
    intended stopping time (the stop wins), and the returned flag says
    so.  On a path-refined tree each node carries one phase and the
    sweep is exact.

    Returns (rule, conflict_seen).
    """
    lat = tau_tilde.lattice
    hit = tau_tilde.stop | own_previous.stop if raw_form else tau_tilde.stop
    opp = opponent.stop
    prev = own_previous.stop

    state = np.zeros(lat.n_macro_nodes, dtype=np.uint8)
    state[lat.macro_index(0, 0)] = _PRE
    stop = np.zeros(lat.n_macro_nodes, dtype=bool)
    conflict = False
    for k in range(lat.T + 1):
        off = int(lat.macro_offsets[k])
        noff = int(lat.macro_offsets[k + 1]) if k < lat.T else 0
        for loc in range(int(lat.macro_widths[k])):
            mi = off + loc
            s = state[mi]
            if not s:
                continue
            switch = False
            pre_stop = False
            if s & _PRE and hit[mi]:
                if not opp[mi] or prev[mi]:
                    pre_stop = True
                else:
                    switch = True
            post_stop = bool(s & _POST) and bool(prev[mi])
            if (s & _PRE) and (s & _POST) and pre_stop != (bool(prev[mi])):
                conflict = True
            if pre_stop or post_stop:
                stop[mi] = True
                continue
            if k < lat.T:
                child_state = 0
                if s & _PRE:
                    child_state |= _POST if switch else _PRE
                if s & _POST:
                    child_state |= _POST
                for child, _ in lat.macro_children(k)[loc]:
                    state[noff + child] |= child_state
    stop[lat.macro_layer(lat.T)] = True
    return StoppingRule(lat, stop), conflict


@dataclass
class IterationRecord:
    """One update of the alternating construction (odd: player 1)."""

    n: int
    player: int
    tau_tilde: StoppingRule
    tau: StoppingRule
    w0: float


@dataclass
class NashResult:
    tau1_star: StoppingRule
    tau2_star: StoppingRule
    J1_star: float
    J2_star: float
    trace: list[IterationRecord]
    iterations: int
    verified: bool = False
    refined_game: "GameSpec | None" = None
    exact_trace: bool = True


def _iterate(
    game: GameSpec,
    max_iters: int,
    init: tuple[StoppingRule, StoppingRule] | None,
    update_form: str,
) -> tuple[StoppingRule, StoppingRule, list[IterationRecord], bool]:
    lat = game.lattice
    horizon = StoppingRule.horizon(lat)
    tau_odd = init[0] if init is not None else horizon
    tau_even = init[1] if init is not None else horizon

    trace: list[IterationRecord] = []
    conflict_seen = False
    n_update = 0
    for _ in range(max_iters):
        use_raw = update_form == "raw" or (update_form == "auto" and n_update < 2)
        br1 = best_response_first(game, tau_even)
        new_odd, c1 = _update_rule(br1.tau_tilde, tau_even, tau_odd, raw_form=use_raw)
        n_update += 1
        trace.append(IterationRecord(n_update + 2, 1, br1.tau_tilde, new_odd, br1.W0))

        use_raw = update_form == "raw" or (update_form == "auto" and n_update < 2)
        br2 = best_response_second(game, new_odd)
        new_even, c2 = _update_rule(br2.tau_tilde, new_odd, tau_even, raw_form=use_raw)
        n_update += 1
        trace.append(IterationRecord(n_update + 2, 2, br2.tau_tilde, new_even, br2.W0))

        conflict_seen = conflict_seen or c1 or c2
        stationary = new_odd.equivalent(tau_odd) and new_even.equivalent(tau_even)
        tau_odd, tau_even = new_odd, new_even
        if stationary:
            return tau_odd, tau_even, trace, conflict_seen
    raise IterationError(f"no stationary rule pair within {max_iters} iterations", trace)


def _project_rule(rule, base_lattice: Lattice, mapping: np.ndarray) -> StoppingRule:
    """Collapse a path-refined rule to marks on the recombining tree.

    Only decisions at nodes reachable without an earlier mark constrain
    the projection; if two such refined copies of one recombined node
    disagree, the stopping time is not a function of the recombined
    state and cannot be represented.
    """
    ru = rule.reachable_unstopped()
    stop = np.zeros(base_lattice.n_macro_nodes, dtype=bool)
    decided = np.zeros(base_lattice.n_macro_nodes, dtype=bool)
    for mi_ref in np.nonzero(ru)[0]:
        mi = int(mapping[mi_ref])
        s = bool(rule.stop[mi_ref])
        if decided[mi] and bool(stop[mi]) != s:
            raise IterationError(
                "equilibrium stopping rule is not a function of the recombined state",
                [],
            )
        decided[mi] = True
        stop[mi] = s
    stop[base_lattice.macro_layer(base_lattice.T)] = True
    return StoppingRule(base_lattice, stop)


def nep_iterate(
    game: GameSpec,
    max_iters: int | None = None,
    init: tuple[StoppingRule, StoppingRule] | None = None,
    update_form: str = "auto",
    verify: bool = False,
) -> NashResult:
    """Alternating best responses until the rule pair repeats.

    ``init`` overrides the starting pair (default: both players wait for
    the horizon).  ``update_form`` is "auto" (raw for the first two
    updates, simplified after), "raw", or "cor".

    Runs on the game's recombining tree first.  If any rule update hits a
    phase conflict there (the updated stopping time is not a function of
    the recombined state), the whole iteration reruns on the path-refined
    twin, where the update is exact, and the final pair is projected
    back; the returned trace then lives on the refined tree
    (``refined_game`` is set).
    """
    lat = game.lattice
    if max_iters is None:
        max_iters = 2 * lat.n_macro_nodes + 4
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if update_form not in ("auto", "raw", "cor"):
        raise ValueError("update_form must be 'auto', 'raw' or 'cor'")

    tau_odd, tau_even, trace, conflict = _iterate(game, max_iters, init, update_form)
    refined_game = None
    if conflict and not lat.refined:
        refined_game, mapping = game.refine()
        init_ref = None
        if init is not None:
            init_ref = (
                StoppingRule(refined_game.lattice, init[0].stop[mapping]),
                StoppingRule(refined_game.lattice, init[1].stop[mapping]),
            )
        max_ref = 2 * refined_game.lattice.n_macro_nodes + 4
        odd_ref, even_ref, trace, again = _iterate(
            refined_game, max_ref, init_ref, update_form
        )
        if again:
            raise IterationError("phase conflict on a path-refined tree", trace)
        tau_odd = _project_rule(odd_ref, lat, mapping)
        tau_even = _project_rule(even_ref, lat, mapping)

    result = NashResult(
        tau1_star=tau_odd,
        tau2_star=tau_even,
        J1_star=J1(game, tau_odd, tau_even),
        J2_star=J2(game, tau_odd, tau_even),
        trace=trace,
        iterations=len(trace),
        refined_game=refined_game,
    )
    if verify:
        result.verified = verify_nash(game, tau_odd, tau_even).passed
    return result


def verify_nash(
    game: GameSpec,
    tau1: StoppingRule,
    tau2: StoppingRule,
    exhaustive: bool = False,
    budget: EnumerationBudget | None = None,
    tol: float = 1e-10,
) -> CheckReport:
    """Equilibrium check: best-response values match, and optionally no
    enumerated unilateral deviation improves either player."""
    failures: list[str] = []
    j1 = J1(game, tau1, tau2)
    j2 = J2(game, tau1, tau2)
    w1 = best_response_first(game, tau2).W0
    w2 = best_response_second(game, tau1).W0
    gap1 = w1 - j1
    gap2 = w2 - j2
    if gap1 > tol:
        failures.append(f"player 1 can improve: best response {w1:.12g} vs J1 {j1:.12g}")
    if gap2 > tol:
        failures.append(f"player 2 can improve: best response {w2:.12g} vs J2 {j2:.12g}")
    extra = {"J1": j1, "J2": j2, "best_response_1": w1, "best_response_2": w2}
    max_gap = max(abs(gap1), abs(gap2))

    if exhaustive:
        lat = game.lattice
        n = _check_budget(lat, budget)
        masks = np.arange(n, dtype=np.int64)
        marks = _mark_matrix(lat, masks)
        co1 = game.f1.coefficients(lat.T)
        co2 = game.f2.coefficients(lat.T)
        union1 = marks | tau2.stop[None, :]
        mv1 = np.where(marks, game.x1[None, :], game.y1[None, :])
        dev1 = batched_roots(lat, co1, union1, mv1)
        union2 = marks | tau1.stop[None, :]
        mv2 = np.where(marks & ~tau1.stop[None, :], game.x2[None, :], game.y2[None, :])
        dev2 = batched_roots(lat, co2, union2, mv2)
        d1 = float(dev1.max() - j1)
        d2 = float(dev2.max() - j2)
        extra["exhaustive_gap_1"] = d1
        extra["exhaustive_gap_2"] = d2
        max_gap = max(max_gap, abs(d1), abs(d2))
        if d1 > tol:
            failures.append(
                f"exhaustive deviation improves player 1 by {d1:.3e} "
                f"(rule mask {int(dev1.argmax())})"
            )
        if d2 > tol:
            failures.append(
                f"exhaustive deviation improves player 2 by {d2:.3e} "
                f"(rule mask {int(dev2.argmax())})"
            )
    return CheckReport(
        name="nash_equilibrium",
        passed=not failures,
        max_abs_gap=max_gap,
        n_checked=2,
        failures=failures,
        extra=extra,
    )


def check_trace_invariants(game: GameSpec, result: NashResult, tol: float = 1e-10) -> CheckReport:
    """Pathwise structure of the iteration trace.

    Per path: the odd and even rule sequences are non-increasing; each
    raw best response precedes the opponent's rule and the own rule from
    two steps back; the update identity min(tau_{n+1}, tau_n) =
    tilde_{n+1} holds; a repeat of consecutive rules happens only where
    everything stops at the horizon.  Also checks that each recorded
    rule is optimal against the opponent's rule it answered (its value
    equals the recorded envelope root).

    When the iteration reran on the path-refined tree, the trace lives
    there and is checked there.
    """
    if result.refined_game is not None:
        game = result.refined_game
    lat = game.lattice
    horizon = StoppingRule.horizon(lat)
    taus = [horizon, horizon] + [rec.tau for rec in result.trace]  # taus[i] = tau_{i+1}
    tildes = [rec.tau_tilde for rec in result.trace]  # tildes[i] = tilde tau_{i+3}
    failures: list[str] = []
    n_paths = 0
    for path, _prob in lat.iter_macro_paths():
        n_paths += 1
        t = [r.stopping_time_of_path(path) for r in taus]
        tt = [r.stopping_time_of_path(path) for r in tildes]
        for i in range(2, len(t)):
            if t[i] > t[i - 2]:
                failures.append(f"path {path}: rule {i+1} stops after rule {i-1}")
        for i, rec in enumerate(result.trace):
            opp = t[i + 1]  # opponent rule tau_{i+2} answered by update i+3
            if tt[i] > opp:
                failures.append(f"path {path}: best response {rec.n} exceeds opponent")
            if tt[i] != min(t[i + 2], t[i + 1]):
                failures.append(f"path {path}: min-identity fails at update {rec.n}")
            if tt[i] > t[i]:
                failures.append(
                    f"path {path}: best response {rec.n} exceeds own rule two back"
                )
        for i in range(1, len(t)):
            if t[i] == t[i - 1] and any(t[m] != lat.T for m in range(i + 1)):
                failures.append(f"path {path}: consecutive repeat before the horizon")
        if len(failures) > 20:
            break

    for i, rec in enumerate(result.trace):
        opp_rule = taus[i + 1]
        val = (
            J1(game, rec.tau, opp_rule) if rec.player == 1 else J2(game, opp_rule, rec.tau)
        )
        if abs(val - rec.w0) > tol:
            failures.append(
                f"update {rec.n}: value {val:.12g} differs from envelope root {rec.w0:.12g}"
            )
    return CheckReport(
        name="trace_invariants",
        passed=not failures,
        max_abs_gap=0.0,
        n_checked=n_paths,
        failures=failures,
    )


def switch_equivalence_check(
    lattice: Lattice,
    driver: DriverSpec,
    X,
    Y,
    mu: StoppingRule,
    tol: float = 1e-12,
) -> CheckReport:
    """Strict-vs-large payoff switching leaves the envelope unchanged.

    The engine computes the envelope of X switched strictly at mu (frozen
    at Y from mu on).  An independent path recursion evaluates both the
    strict and the large switch with true frozen tails; all three must
    agree before the switch, and the frozen region must sit at the Y
    value captured where mu stopped.
    """
    x = _macro_array(lattice, X)
    y = _macro_array(lattice, Y)
    sl_T = lattice.macro_layer(lattice.T)
    if (x > y + 1e-12).any():
        raise ValueError("X must not exceed Y at any node")
    if not np.allclose(x[sl_T], y[sl_T], rtol=0.0, atol=1e-12):
        raise ValueError("X and Y must coincide at the horizon")

    res = snell_envelope(lattice, driver, x, terminal_rule=mu, terminal_values=y)
    u_eng = res.U.macro_values()
    solver = PeriodSolver(lattice, driver)
    memo: dict[tuple, float] = {}

    def val(k: int, loc: int, frozen: float | None, strict: bool) -> float:
        key = (k, loc, frozen, strict)
        if key in memo:
            return memo[key]
        mi = lattice.macro_index(k, loc)
        hit_now = frozen is None and bool(mu.stop[mi])
        fv = frozen if frozen is not None else (float(y[mi]) if hit_now else None)
        if strict:
            payoff = float(x[mi]) if fv is None else fv
        else:
            payoff = float(x[mi]) if (frozen is None) else fv
        if k == lattice.T:
            memo[key] = payoff
            return payoff
        width = int(lattice.macro_widths[k + 1])
        cv = np.zeros(width)
        for child, _ in lattice.macro_children(k)[loc]:
            cv[child] = val(k + 1, child, fv, strict)
        cont = solver.value(k, loc, cv) if fv is None else solver.classical(k, loc, cv)
        out = max(payoff, cont)
        memo[key] = out
        return out

    failures: list[str] = []
    max_gap = 0.0
    n = 0
    seen: set[tuple] = set()
    stack: list[tuple[int, int, float | None]] = [(0, 0, None)]
    while stack:
        k, loc, frozen = stack.pop()
        if (k, loc, frozen) in seen:
            continue
        seen.add((k, loc, frozen))
        n += 1
        mi = lattice.macro_index(k, loc)
        vs = val(k, loc, frozen, True)
        vl = val(k, loc, frozen, False)
        gap = abs(vs - vl)
        max_gap = max(max_gap, gap)
        if gap > tol:
            failures.append(f"strict/large mismatch at layer {k} node {loc}: {gap:.3e}")
        if frozen is None:
            gap2 = abs(vs - float(u_eng[mi]))
            max_gap = max(max_gap, gap2)
            if gap2 > tol:
                failures.append(f"engine/path mismatch at layer {k} node {loc}: {gap2:.3e}")
        else:
            gap3 = max(abs(vs - frozen), abs(vl - frozen))
            max_gap = max(max_gap, gap3)
            if gap3 > tol:
                failures.append(f"frozen region not flat at layer {k} node {loc}: {gap3:.3e}")
        if k < lattice.T:
            fv = frozen if frozen is not None else (float(y[mi]) if mu.stop[mi] else None)
            for child, _ in lattice.macro_children(k)[loc]:
                stack.append((k + 1, child, fv))
        if len(failures) > 20:
            break
    return CheckReport(
        name="switch_equivalence",
        passed=not failures,
        max_abs_gap=max_gap,
        n_checked=n,
        failures=failures,
    )
