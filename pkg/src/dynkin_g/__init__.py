"""Nonlinear expectations, optimal stopping and stopping games on finite event trees."""

from .driver import (
    DriverSpec,
    StoppedDriver,
    ValidationReport,
    evaluate,
    lipschitz_constant,
    stop_driver,
    validate,
)
from .game import (
    GameSpec,
    IterationError,
    NashResult,
    J1,
    J2,
    best_response_first,
    best_response_second,
    check_trace_invariants,
    nep_iterate,
    payoff_terminal_first,
    payoff_terminal_second,
    switch_equivalence_check,
    verify_nash,
)
from .gexp import (
    BACKEND,
    GExpectationProcess,
    OneStepSolution,
    SolverError,
    check_optional_sampling,
    check_supermartingale,
    g_expectation,
    indicator_localization_check,
    one_step,
    risk_measure,
)
from .lattice import (
    AdaptedProcess,
    Branch,
    JumpMark,
    Lattice,
    LatticeError,
    LatticeSpec,
    StoppingRule,
    build_lattice,
    children,
    conditional_expectation,
    stopping_time_of_path,
)
from .oracle import (
    BudgetError,
    EnumerationBudget,
    brute_force_value,
    classical_snell,
    enumerate_stopping_rules,
    rule_count,
    zero_sum_value,
)
from .snell import (
    SnellResult,
    smallest_supermartingale_check,
    snell_envelope,
    verify_optimality,
)

__version__ = "0.1.0"
