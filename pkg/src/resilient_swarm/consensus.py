"""Scalar consensus updates: nominal averaging, the trimmed W-MSR variant, and run verdicts.

W-MSR (weighted mean-subsequence-reduced) discards up to ``F`` strictly
larger and up to ``F`` strictly smaller neighbor values before averaging,
which keeps each normal node's state inside the envelope of the values it
trusts even when up to ``F`` neighbors lie arbitrarily.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import RoleAssignment

__all__ = [
    "ConsensusConfig",
    "ConsensusVerdict",
    "linear_consensus_step",
    "wmsr_step",
    "malicious_broadcast",
    "check_resilient_consensus",
    "write_history_csv",
]

# Absolute-value scale of the envelope check slack; a uniform average of
# values inside a closed interval can exit it by a few ulps.
_ENVELOPE_SLACK = 1e-12


@dataclass(frozen=True)
class ConsensusConfig:
    """Parameters of the consensus layer.

    ``weight_floor`` is the guaranteed minimum weight each kept value
    receives; ``None`` means ``1/n``, which the uniform averaging used here
    always satisfies.
    """

    f: int
    tau2: float = 0.1
    weight_floor: float | None = None
    y_range: tuple[float, float] = (-500.0, 500.0)
    tol: float = 1e-3
    horizon: int = 400

    def __post_init__(self) -> None:
        if self.f < 0:
            raise ValueError(f"f must be nonnegative, got {self.f}")
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        if self.weight_floor is not None and not 0.0 < self.weight_floor < 1.0:
            raise ValueError(f"weight_floor must lie in (0, 1), got {self.weight_floor}")
        lo, hi = self.y_range
        if not lo <= hi:
            raise ValueError(f"y_range must be ordered, got {self.y_range}")
        if not self.tol > 0 or self.horizon < 1:
            raise ValueError("tol must be positive and horizon at least 1")


def linear_consensus_step(y_self: float, neighbor_values: Sequence[tuple[int, float]]) -> float:
    """Nominal update: uniform average of the node's own value and all neighbor values."""
    values = [y_self] + [float(v) for _, v in neighbor_values]
    return math.fsum(values) / len(values)


def wmsr_step(
    y_self: float,
    neighbor_values: Sequence[tuple[int, float]],
    f: int,
) -> tuple[float, frozenset[int]]:
    """One W-MSR update with parameter ``f``.

    Discards the ``f`` largest neighbor values strictly greater than the
    node's own (all of them when fewer exist), symmetrically for strictly
    smaller values, then returns the uniform average of the survivors plus
    the node's own value together with the discarded node set.  Equal
    values are never discarded, and ties among removal candidates are
    resolved by value then node id, so the result does not depend on the
    order of the neighbor list.
    """
    if f < 0:
        raise ValueError(f"f must be nonnegative, got {f}")
    larger = sorted((float(v), j) for j, v in neighbor_values if v > y_self)
    smaller = sorted((float(v), j) for j, v in neighbor_values if v < y_self)
    removed = set()
    if f:
        removed.update(j for _, j in larger[-f:])
        removed.update(j for _, j in smaller[:f])
    kept = [float(v) for j, v in neighbor_values if j not in removed]
    new_value = math.fsum([y_self] + kept) / (1 + len(kept))
    return new_value, frozenset(removed)


def malicious_broadcast(rng: np.random.Generator, cfg: ConsensusConfig) -> float:
    """Uniform draw from the configured broadcast range; reproducible under a fixed seed."""
    lo, hi = cfg.y_range
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class ConsensusVerdict:
    """Outcome of a consensus run over the normal nodes.

    ``converged`` means the final max-minus-min spread of normal values is
    within tolerance, in which case ``limit_estimate`` is their final mean.
    ``safety_held`` means every logged normal value stayed inside the
    closed envelope of the normal initial values; ``violation_step`` is the
    first offending step otherwise.
    """

    converged: bool
    limit_estimate: float | None
    safety_held: bool
    final_spread: float
    violation_step: int | None


def check_resilient_consensus(
    y_history,
    roles: RoleAssignment,
    tol: float = 1e-3,
) -> ConsensusVerdict:
    """Judge a consensus history of shape ``(steps, n)`` against the two required conditions."""
    hist = np.asarray(y_history, dtype=float)
    if hist.ndim != 2 or hist.shape[0] < 1:
        raise ValueError("history must be a nonempty (steps, n) array")
    if hist.shape[1] != roles.n:
        raise ValueError("history width does not match role assignment")
    if not roles.normal:
        raise ValueError("normal set must be nonempty")
    normal = sorted(roles.normal)
    ys = hist[:, normal]
    lo, hi = float(ys[0].min()), float(ys[0].max())
    slack = _ENVELOPE_SLACK * max(1.0, abs(lo), abs(hi))
    outside = (ys < lo - slack) | (ys > hi + slack)
    violation_step = int(np.argmax(outside.any(axis=1))) if outside.any() else None
    final_spread = float(ys[-1].max() - ys[-1].min())
    converged = final_spread <= tol
    return ConsensusVerdict(
        converged=converged,
        limit_estimate=float(ys[-1].mean()) if converged else None,
        safety_held=violation_step is None,
        final_spread=final_spread,
        violation_step=violation_step,
    )


def write_history_csv(path, y_history, roles: RoleAssignment, removed_counts=None) -> None:
    """Export a consensus history as rows of ``step,node,value,role,removed_count``."""
    hist = np.asarray(y_history, dtype=float)
    counts = None if removed_counts is None else np.asarray(removed_counts)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "node", "value", "role", "removed_count"])
        for step in range(hist.shape[0]):
            for node in range(hist.shape[1]):
                role = "malicious" if node in roles.malicious else "normal"
                removed = 0 if counts is None else int(counts[step, node])
                writer.writerow([step, node, repr(float(hist[step, node])), role, removed])
