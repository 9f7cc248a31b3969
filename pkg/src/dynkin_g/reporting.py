"""Uniform check-report container used by the verification operations."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class CheckReport:
    """Outcome of one verification: pass flag, worst gap, and failure notes."""

    name: str
    passed: bool
    max_abs_gap: float = 0.0
    n_checked: int = 0
    failures: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_abs_gap": self.max_abs_gap,
            "n_checked": self.n_checked,
            "failures": self.failures,
            "extra": self.extra,
        }
