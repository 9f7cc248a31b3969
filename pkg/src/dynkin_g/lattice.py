"""Finite event tree realizing a discrete Brownian-plus-jumps filtration.

Each unit macro period is cut into ``m`` micro Euler steps of size
``delta = 1/m``.  A micro step branches over the two-point Brownian
increment (+-sqrt(delta), probability 1/2 each) crossed with a categorical
jump outcome: no jump with probability ``1 - sum_j lambda_j*delta``, or
mark ``j`` with probability ``lambda_j*delta``.  The jump outcome is
independent of the Brownian sign within a step.

Nodes recombine on the key (micro index, Brownian displacement count,
jump-count vector), so adapted processes are arrays indexed by node and
stopping decisions attach to macro-layer nodes.  An auxiliary
multiplicative state walk ``S`` (up/down factor per Brownian sign, an
optional factor per jump mark) gives payoffs something concrete to be a
function of.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np


class LatticeError(ValueError):
    """Invalid lattice specification or node-level misuse."""


@dataclass(frozen=True)
class JumpMark:
    """One jump mark: arrival intensity, measure weight, optional state factor."""

    mark_id: str
    intensity: float
    nu_weight: float
    state_factor: float = 1.0


@dataclass(frozen=True)
class LatticeSpec:
    """Parameters of the event tree.

    macro_periods
        Horizon T; macro dates are 0, 1, ..., T.
    micro_per_period
        Euler steps m per unit period, so delta = 1/m.
    jump_marks
        Jump marks; marks with zero intensity are dropped at build time.
    state0, up_factor, down_factor
        Initial value and per-step factors of the multiplicative state walk.
    """

    macro_periods: int
    micro_per_period: int = 1
    jump_marks: tuple[JumpMark, ...] = ()
    state0: float = 10.0
    up_factor: float = 1.1
    down_factor: float = 0.9

    @property
    def delta(self) -> float:
        return 1.0 / self.micro_per_period

    def validate(self) -> None:
        if int(self.macro_periods) != self.macro_periods or self.macro_periods < 1:
            raise LatticeError("macro_periods must be an integer >= 1")
        if int(self.micro_per_period) != self.micro_per_period or self.micro_per_period < 1:
            raise LatticeError("micro_per_period must be an integer >= 1")
        if not (self.up_factor > 0.0 and self.down_factor > 0.0):
            raise LatticeError("state up/down factors must be > 0")
        if not math.isfinite(self.state0):
            raise LatticeError("state0 must be finite")
        seen = set()
        for mk in self.jump_marks:
            if mk.mark_id in seen:
                raise LatticeError(f"duplicate jump mark id {mk.mark_id!r}")
            seen.add(mk.mark_id)
            if mk.intensity < 0.0:
                raise LatticeError(f"mark {mk.mark_id!r}: intensity must be >= 0")
            if mk.nu_weight <= 0.0:
                raise LatticeError(f"mark {mk.mark_id!r}: nu_weight must be > 0")
            if mk.state_factor <= 0.0:
                raise LatticeError(f"mark {mk.mark_id!r}: state_factor must be > 0")
        lam_sum = sum(mk.intensity for mk in self.jump_marks)
        if self.delta * lam_sum >= 1.0:
            raise LatticeError(
                f"delta*sum(intensity) = {self.delta * lam_sum:g} >= 1 "
                "violates sub-distribution of one-step jump probabilities"
            )


class Branch(NamedTuple):
    """One micro-step outcome: probability, Brownian increment, jump mark (-1 = none)."""

    index: int
    prob: float
    dw: float
    jump: int


class Lattice:
    """Immutable event tree; build via :func:`build_lattice`.

    Nodes normally recombine on (micro index, displacement, jump counts).
    With ``refine=True`` every (parent, branch) pair gets its own child, so
    each node is reached by exactly one path; the game module uses this to
    represent stopping times that are not functions of the recombined
    state.
    """

    def __init__(self, spec: LatticeSpec, refine: bool = False):
        spec.validate()
        self.spec = spec
        self.refined = bool(refine)
        self.T = int(spec.macro_periods)
        self.m = int(spec.micro_per_period)
        self.delta = spec.delta
        self.n_micro = self.m * self.T
        self.marks = tuple(mk for mk in spec.jump_marks if mk.intensity > 0.0)
        self.J = len(self.marks)
        self.nu = np.array([mk.nu_weight for mk in self.marks], dtype=np.float64)
        self.lam = np.array([mk.intensity for mk in self.marks], dtype=np.float64)
        self.lam_delta = self.lam * self.delta

        # Branch layout: outcomes [none, mark 0, ..., mark J-1], each with +/- dW.
        sq = math.sqrt(self.delta)
        p_none = 1.0 - float(self.lam_delta.sum())
        probs, dws, jumps = [], [], []
        for o in range(-1, self.J):
            po = p_none if o < 0 else float(self.lam_delta[o])
            for s in (+1.0, -1.0):
                probs.append(0.5 * po)
                dws.append(s * sq)
                jumps.append(o)
        self.B = len(probs)
        self.p = np.array(probs, dtype=np.float64)
        self.dw = np.array(dws, dtype=np.float64)
        self.branch_jump = np.array(jumps, dtype=np.int64)

        self._build_layers()
        self._build_macro()
        self._macro_children_cache: list[list[list[tuple[int, float]]]] | None = None

    # -- construction -------------------------------------------------

    def _child_key(self, key: tuple, b: int) -> tuple[int, tuple[int, ...]]:
        d, c = key[0], key[1]
        nd = d + (1 if self.dw[b] > 0 else -1)
        o = int(self.branch_jump[b])
        nc = c if o < 0 else tuple(cj + (1 if j == o else 0) for j, cj in enumerate(c))
        return nd, nc

    def _build_layers(self) -> None:
        J = self.J
        key0 = (0, (0,) * J) if not self.refined else (0, (0,) * J, 0)
        layer_keys: list[list[tuple]] = [[key0]]
        child_local: list[np.ndarray] = []
        for i in range(self.n_micro):
            ch = np.empty((len(layer_keys[i]), self.B), dtype=np.int64)
            if self.refined:
                keys = []
                for n, key in enumerate(layer_keys[i]):
                    for b in range(self.B):
                        nd, nc = self._child_key(key, b)
                        ch[n, b] = len(keys)
                        keys.append((nd, nc, n * self.B + b))
            else:
                nxt = {self._child_key(key, b) for key in layer_keys[i] for b in range(self.B)}
                keys = sorted(nxt)
                index = {k: n for n, k in enumerate(keys)}
                for n, key in enumerate(layer_keys[i]):
                    for b in range(self.B):
                        ch[n, b] = index[self._child_key(key, b)]
            child_local.append(ch)
            layer_keys.append(keys)

        self.layer_keys = layer_keys
        self.child_local = child_local
        self.layer_widths = np.array([len(k) for k in layer_keys], dtype=np.int64)
        self.layer_offsets = np.concatenate(([0], np.cumsum(self.layer_widths)))
        self.n_nodes = int(self.layer_offsets[-1])

        self.disp = np.empty(self.n_nodes, dtype=np.int64)
        self.jumps = np.zeros((self.n_nodes, J), dtype=np.int64)
        self.state = np.empty(self.n_nodes, dtype=np.float64)
        u, dn, s0 = self.spec.up_factor, self.spec.down_factor, self.spec.state0
        jf = np.array([mk.state_factor for mk in self.marks], dtype=np.float64)
        for i, keys in enumerate(layer_keys):
            off = int(self.layer_offsets[i])
            for n, key in enumerate(keys):
                d, c = key[0], key[1]
                g = off + n
                self.disp[g] = d
                if J:
                    self.jumps[g] = c
                ups = (i + d) // 2
                downs = i - ups
                st = s0 * (u ** ups) * (dn ** downs)
                for j in range(J):
                    st *= jf[j] ** c[j]
                self.state[g] = st
        if not self.refined:
            self._key_index = {
                (i, key[0], key[1]): int(self.layer_offsets[i]) + n
                for i, keys in enumerate(layer_keys)
                for n, key in enumerate(keys)
            }
        else:
            self._key_index = {}

    def _build_macro(self) -> None:
        self.macro_micro = [self.m * k for k in range(self.T + 1)]
        self.macro_widths = np.array(
            [self.layer_widths[i] for i in self.macro_micro], dtype=np.int64
        )
        self.macro_offsets = np.concatenate(([0], np.cumsum(self.macro_widths)))
        self.n_macro_nodes = int(self.macro_offsets[-1])
        glob = []
        for k in range(self.T + 1):
            off = int(self.layer_offsets[self.macro_micro[k]])
            glob.extend(range(off, off + int(self.macro_widths[k])))
        self.macro_to_global = np.array(glob, dtype=np.int64)
        self.state_macro = self.state[self.macro_to_global]

    # -- node addressing ----------------------------------------------

    def layer_of(self, node: int) -> int:
        if not (0 <= node < self.n_nodes):
            raise LatticeError(f"node index {node} out of range")
        return int(np.searchsorted(self.layer_offsets, node, side="right") - 1)

    def node_key(self, node: int) -> tuple[int, int, tuple[int, ...]]:
        i = self.layer_of(node)
        key = self.layer_keys[i][node - int(self.layer_offsets[i])]
        return i, key[0], key[1]

    def node_id(self, node: int) -> str:
        i = self.layer_of(node)
        key = self.layer_keys[i][node - int(self.layer_offsets[i])]
        base = f"{i}-{key[0]:+d}"
        if self.J:
            base += "-" + ".".join(str(x) for x in key[1])
        if self.refined and i > 0:
            base += f"-p{key[2]}"
        return base

    def find_node(self, i: int, d: int, counts: tuple[int, ...] = ()) -> int:
        if self.refined:
            raise LatticeError("find_node is only available on recombining lattices")
        key = (i, d, tuple(counts))
        if key not in self._key_index:
            raise LatticeError(f"no node with key {key}")
        return self._key_index[key]

    def is_terminal(self, node: int) -> bool:
        return self.layer_of(node) == self.n_micro

    def macro_layer(self, k: int) -> slice:
        """Slice of macro-node indices for macro layer k."""
        return slice(int(self.macro_offsets[k]), int(self.macro_offsets[k + 1]))

    def macro_global(self, k: int, local: int) -> int:
        return int(self.layer_offsets[self.macro_micro[k]]) + local

    def macro_index(self, k: int, local: int) -> int:
        return int(self.macro_offsets[k]) + local

    def macro_of(self, mi: int) -> tuple[int, int]:
        k = int(np.searchsorted(self.macro_offsets, mi, side="right") - 1)
        return k, mi - int(self.macro_offsets[k])

    def macro_ids(self) -> list[str]:
        return [self.node_id(int(g)) for g in self.macro_to_global]

    # -- tree navigation -----------------------------------------------

    def children(self, node: int) -> list[tuple[Branch, int]]:
        i = self.layer_of(node)
        if i == self.n_micro:
            raise LatticeError(f"terminal node {self.node_id(node)} has no children")
        local = node - int(self.layer_offsets[i])
        off = int(self.layer_offsets[i + 1])
        out = []
        for b in range(self.B):
            br = Branch(b, float(self.p[b]), float(self.dw[b]), int(self.branch_jump[b]))
            out.append((br, off + int(self.child_local[i][local, b])))
        return out

    def macro_children(self, k: int) -> list[list[tuple[int, float]]]:
        """Aggregated one-macro-period transitions: per local node at macro
        layer k, a list of (child local index at k+1, probability)."""
        if self._macro_children_cache is None:
            self._macro_children_cache = [None] * self.T  # type: ignore[list-item]
        if self._macro_children_cache[k] is None:
            i0 = self.macro_micro[k]
            width0 = int(self.layer_widths[i0])
            result = []
            for n in range(width0):
                probs: dict[int, float] = {n: 1.0}
                for r in range(self.m):
                    nxt: dict[int, float] = {}
                    ch = self.child_local[i0 + r]
                    for loc, pr in probs.items():
                        for b in range(self.B):
                            c = int(ch[loc, b])
                            nxt[c] = nxt.get(c, 0.0) + pr * float(self.p[b])
                    probs = nxt
                result.append(sorted(probs.items()))
            self._macro_children_cache[k] = result
        return self._macro_children_cache[k]

    def iter_macro_paths(self) -> Iterator[tuple[tuple[int, ...], float]]:
        """All macro-level paths as tuples of local indices (one per macro
        layer), with path probabilities.  Exhaustive; desk scale only."""

        def rec(k: int, local: int, prefix: tuple[int, ...], prob: float):
            if k == self.T:
                yield prefix, prob
                return
            for child, pr in self.macro_children(k)[local]:
                yield from rec(k + 1, child, prefix + (child,), prob * pr)

        yield from rec(0, 0, (0,), 1.0)

    def refined_twin(self) -> tuple["Lattice", np.ndarray]:
        """Path-refined copy plus the map from its macro nodes to this
        lattice's macro node indices."""
        if self.refined:
            raise LatticeError("lattice is already refined")
        ref = Lattice(self.spec, refine=True)
        mapping = np.empty(ref.n_macro_nodes, dtype=np.int64)
        for k in range(ref.T + 1):
            i = ref.macro_micro[k]
            off_ref = int(ref.macro_offsets[k])
            for loc, key in enumerate(ref.layer_keys[i]):
                g = self._key_index[(i, key[0], key[1])]
                base_loc = g - int(self.layer_offsets[i])
                mapping[off_ref + loc] = int(self.macro_offsets[k]) + base_loc
        return ref, mapping

    def n_macro_paths(self) -> int:
        counts = np.ones(int(self.macro_widths[0]), dtype=np.int64)
        for k in range(self.T):
            nxt = np.zeros(int(self.macro_widths[k + 1]), dtype=np.int64)
            for loc, trans in enumerate(self.macro_children(k)):
                for child, _ in trans:
                    nxt[child] += counts[loc]
            counts = nxt
        return int(counts.sum())


def build_lattice(spec: LatticeSpec, refine: bool = False) -> Lattice:
    """Validate the spec and build the event tree."""
    return Lattice(spec, refine=refine)


def children(lattice: Lattice, node: int) -> list[tuple[Branch, int]]:
    return lattice.children(node)


def conditional_expectation(
    lattice: Lattice, node: int, child_values: Sequence[float]
) -> float:
    """Classical one-step conditional expectation sum_b p_b v_b at a node."""
    lattice.children(node)  # raises on terminal nodes
    if len(child_values) != lattice.B:
        raise LatticeError(
            f"expected {lattice.B} child values, got {len(child_values)}"
        )
    return float(np.dot(lattice.p, np.asarray(child_values, dtype=np.float64)))


# -- adapted processes ------------------------------------------------


class AdaptedProcess:
    """Real value per node, on either all macro layers or all micro layers."""

    def __init__(self, lattice: Lattice, values: np.ndarray | Sequence[float], level: str = "macro"):
        if level not in ("macro", "micro"):
            raise LatticeError("level must be 'macro' or 'micro'")
        n = lattice.n_macro_nodes if level == "macro" else lattice.n_nodes
        vals = np.asarray(values, dtype=np.float64).copy()
        if vals.shape != (n,):
            raise LatticeError(f"expected {n} values for level={level!r}, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise LatticeError("adapted process values must be finite")
        self.lattice = lattice
        self.level = level
        self.values = vals

    @classmethod
    def from_state_function(
        cls, lattice: Lattice, fn: Callable[[np.ndarray, int], np.ndarray]
    ) -> "AdaptedProcess":
        """Macro process with values fn(states_of_layer_k, k) per layer."""
        vals = np.empty(lattice.n_macro_nodes, dtype=np.float64)
        for k in range(lattice.T + 1):
            sl = lattice.macro_layer(k)
            vals[sl] = fn(lattice.state_macro[sl], k)
        return cls(lattice, vals, "macro")

    def macro_values(self) -> np.ndarray:
        if self.level == "macro":
            return self.values
        return self.values[self.lattice.macro_to_global]

    def at_macro(self, k: int, local: int) -> float:
        if self.level == "macro":
            return float(self.values[self.lattice.macro_index(k, local)])
        return float(self.values[self.lattice.macro_global(k, local)])

    def __neg__(self) -> "AdaptedProcess":
        return AdaptedProcess(self.lattice, -self.values, self.level)


# -- stopping rules ---------------------------------------------------


class StoppingRule:
    """Adapted stop/continue decision per macro node; horizon is forced stop.

    The stopping time of a path is the first macro date whose node is
    marked.  Marks shadowed by earlier marks on every path are harmless;
    :meth:`minimal_marks` strips them.
    """

    def __init__(self, lattice: Lattice, stop: np.ndarray | Sequence[bool]):
        arr = np.asarray(stop, dtype=bool).copy()
        if arr.shape != (lattice.n_macro_nodes,):
            raise LatticeError(
                f"expected {lattice.n_macro_nodes} macro decisions, got {arr.shape}"
            )
        if not arr[lattice.macro_layer(lattice.T)].all():
            raise LatticeError("every horizon node must be marked stop")
        self.lattice = lattice
        self.stop = arr

    # constructors

    @classmethod
    def horizon(cls, lattice: Lattice) -> "StoppingRule":
        stop = np.zeros(lattice.n_macro_nodes, dtype=bool)
        stop[lattice.macro_layer(lattice.T)] = True
        return cls(lattice, stop)

    @classmethod
    def everywhere(cls, lattice: Lattice) -> "StoppingRule":
        return cls(lattice, np.ones(lattice.n_macro_nodes, dtype=bool))

    @classmethod
    def at_layer(cls, lattice: Lattice, k: int) -> "StoppingRule":
        stop = np.zeros(lattice.n_macro_nodes, dtype=bool)
        stop[lattice.macro_layer(k)] = True
        stop[lattice.macro_layer(lattice.T)] = True
        return cls(lattice, stop)

    @classmethod
    def from_marks(cls, lattice: Lattice, marks: Sequence[int]) -> "StoppingRule":
        stop = np.zeros(lattice.n_macro_nodes, dtype=bool)
        stop[list(marks)] = True
        stop[lattice.macro_layer(lattice.T)] = True
        return cls(lattice, stop)

    # semantics

    def union(self, other: "StoppingRule") -> "StoppingRule":
        """Pathwise minimum of the two stopping times."""
        return StoppingRule(self.lattice, self.stop | other.stop)

    def reachable_unstopped(self) -> np.ndarray:
        """Per macro node: does some path reach it with no earlier mark?"""
        lat = self.lattice
        ru = np.zeros(lat.n_macro_nodes, dtype=bool)
        ru[lat.macro_index(0, 0)] = True
        for k in range(lat.T):
            off, noff = int(lat.macro_offsets[k]), int(lat.macro_offsets[k + 1])
            for loc, trans in enumerate(lat.macro_children(k)):
                mi = off + loc
                if ru[mi] and not self.stop[mi]:
                    for child, _ in trans:
                        ru[noff + child] = True
        return ru

    def minimal_marks(self) -> np.ndarray:
        return self.stop & self.reachable_unstopped()

    def equivalent(self, other: "StoppingRule") -> bool:
        """Same stopping time on every path."""
        return bool(np.array_equal(self.minimal_marks(), other.minimal_marks()))

    def pathwise_leq(self, other: "StoppingRule") -> bool:
        """True iff this stopping time is <= the other's on every path."""
        lat = self.lattice
        alive = np.zeros(lat.n_macro_nodes, dtype=bool)
        alive[lat.macro_index(0, 0)] = True
        for k in range(lat.T + 1):
            off = int(lat.macro_offsets[k])
            for loc in range(int(lat.macro_widths[k])):
                mi = off + loc
                if not alive[mi]:
                    continue
                if other.stop[mi] and not self.stop[mi]:
                    return False
                if self.stop[mi] or other.stop[mi]:
                    continue
                if k < lat.T:
                    noff = int(lat.macro_offsets[k + 1])
                    for child, _ in lat.macro_children(k)[loc]:
                        alive[noff + child] = True
        return True

    def stopping_time_of_path(self, path: Sequence[int]) -> int:
        """First macro date whose node on the path is marked.

        ``path`` is a sequence of local indices, one per macro layer.
        """
        lat = self.lattice
        for k, local in enumerate(path):
            if self.stop[lat.macro_index(k, int(local))]:
                return k
        raise LatticeError("path does not end at a marked horizon node")

    def stop_layers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        lat = self.lattice
        for k in range(lat.T + 1):
            sl = lat.macro_layer(k)
            locs = np.nonzero(self.stop[sl])[0]
            if locs.size:
                out[k] = [int(x) for x in locs]
        return out


def stopping_time_of_path(rule: StoppingRule, path: Sequence[int]) -> int:
    return rule.stopping_time_of_path(path)
