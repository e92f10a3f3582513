"""Barrier-style degree and collision constraints, their gradients, and the per-robot box QP.

Each robot keeps two kinds of safety margins: a degree margin (its summed
adjacency weight minus the required neighbor count ``F'``) and pairwise
collision margins (squared distance minus the squared safety diameter).
The margins are composed through decaying exponentials into a per-robot
scalar ``phi_i`` whose nonnegativity certifies all of them, and the
controller solves a tiny quadratic program that deviates minimally from a
desired velocity while keeping ``phi_i`` from decaying faster than a
linear rate ``gamma * phi_i``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import (
    AdjacencyParams,
    GraphSnapshot,
    adjacency_weight,
    adjacency_weight_gradient,
)

__all__ = [
    "CbfWeights",
    "InputBox",
    "LocalView",
    "ConstraintRow",
    "ControlDecision",
    "InfeasibleConstraintError",
    "degree_cbf",
    "broadcast_degree_cbf",
    "collision_cbf",
    "composed_cbf",
    "local_phi",
    "constraint_row",
    "solve_box_qp",
    "qp_control",
    "cbf_qp_controller",
    "write_decision_csv",
]

logger = logging.getLogger(__name__)

# Constraint normals shorter than this are treated as degenerate.
_NORMAL_EPS = 1e-12
# Cap on exponent arguments so badly violated margins yield huge finite
# numbers instead of overflow.
_EXP_CAP = 700.0


def _bounded_exp(z: float) -> float:
    return math.exp(min(z, _EXP_CAP))


@dataclass(frozen=True)
class CbfWeights:
    """Composition weights: degree term ``w_r``, collision term ``w_c``, and linear gain ``gamma``."""

    w_r: float = 1.0
    w_c: float = 1.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if not (self.w_r > 0 and self.w_c > 0 and self.gamma > 0):
            raise ValueError(f"weights must all be positive, got {self}")


@dataclass(frozen=True)
class InputBox:
    """Per-axis closed velocity bounds.  Must contain 0 so a stationary robot is always feasible."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower and upper bounds must be nonempty and equally long")
        for lo, hi in zip(self.lower, self.upper):
            if not lo <= 0.0 <= hi:
                raise ValueError(f"box must contain 0 on every axis, got [{lo}, {hi}]")

    @classmethod
    def symmetric(cls, limit: float, dim: int = 2) -> "InputBox":
        if not limit > 0:
            raise ValueError(f"limit must be positive, got {limit}")
        return cls(lower=(-limit,) * dim, upper=(limit,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def clip(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)

    def contains(self, u, tol: float = 0.0) -> bool:
        arr = np.asarray(u, dtype=float)
        return bool(np.all(arr >= np.asarray(self.lower) - tol) and np.all(arr <= np.asarray(self.upper) + tol))


@dataclass(frozen=True)
class LocalView:
    """Everything robot ``i`` can sense or receive at one instant.

    Neighbor positions come from the robot's own sensing; neighbor
    connectivity levels are the latest received broadcasts and may be
    biased for malicious broadcasters.  ``self_connectivity`` is the
    robot's own connectivity level under its own update rule.
    """

    self_id: int
    self_position: np.ndarray
    neighbor_positions: tuple[tuple[int, np.ndarray], ...]
    neighbor_connectivity: tuple[tuple[int, float], ...]
    self_connectivity: float
    f_prime: int
    delta_d: float
    params: AdjacencyParams
    weights: CbfWeights

    def __post_init__(self) -> None:
        pos_ids = [j for j, _ in self.neighbor_positions]
        con_ids = [j for j, _ in self.neighbor_connectivity]
        if sorted(pos_ids) != sorted(con_ids):
            raise ValueError("neighbor positions and connectivity levels name different nodes")
        if len(set(pos_ids)) != len(pos_ids):
            raise ValueError("duplicate neighbor id")
        if self.self_id in pos_ids:
            raise ValueError("a robot cannot be its own neighbor")
        if self.delta_d <= 0:
            raise ValueError(f"delta_d must be positive, got {self.delta_d}")

    @property
    def neighbor_ids(self) -> tuple[int, ...]:
        return tuple(j for j, _ in self.neighbor_positions)


def degree_cbf(view: LocalView) -> float:
    """Degree margin from measured positions: summed adjacency weight minus ``F'``."""
    total = math.fsum(
        adjacency_weight(view.self_position, pj, view.params) for _, pj in view.neighbor_positions
    )
    return total - view.f_prime


def broadcast_degree_cbf(c_k: float, f_prime: int) -> float:
    """Degree margin reconstructed from a broadcast connectivity level: ``c_k - F'``."""
    return c_k - f_prime


def collision_cbf(xi, xj, delta_d: float) -> float:
    """Collision margin: squared distance minus the squared safety diameter."""
    diff = np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float)
    return float(diff @ diff) - delta_d * delta_d


def composed_cbf(
    positions,
    snapshot: GraphSnapshot,
    params: AdjacencyParams,
    weights: CbfWeights,
    f_prime: int,
    delta_d: float,
    connectivity: Sequence[float] | None = None,
) -> float:
    """Network-wide composed barrier (diagnostic, needs global state).

    ``1 - sum_i exp(-w_r h_i) - sum_edges exp(-w_c h_col)``; positive only
    when every degree margin and every collision margin is positive.  When
    ``connectivity`` is given the degree margins are reconstructed from
    those broadcast levels instead of the true positions.
    """
    pos = np.asarray(positions, dtype=float)
    if connectivity is not None:
        margins = [broadcast_degree_cbf(float(c), f_prime) for c in connectivity]
    else:
        margins = [
            math.fsum(adjacency_weight(pos[i], pos[j], params) for j in snapshot.neighbors[i]) - f_prime
            for i in range(snapshot.n)
        ]
    degree_part = math.fsum(_bounded_exp(-weights.w_r * h) for h in margins)
    collision_part = math.fsum(
        _bounded_exp(-weights.w_c * collision_cbf(pos[i], pos[j], delta_d))
        for i, j in snapshot.edges
    )
    return 1.0 - degree_part - collision_part


def local_phi(view: LocalView) -> float:
    """Per-robot composed barrier from local information only.

    ``1/n`` minus the broadcast-degree exponentials of the robot and its
    neighbors scaled by ``1/(F'+1)``, minus half the collision
    exponentials to its neighbors.  Nonnegative only when every broadcast
    degree margin in the closed neighborhood and every local collision
    margin is positive.
    """
    w = view.weights
    e_degree = _bounded_exp(-w.w_r * broadcast_degree_cbf(view.self_connectivity, view.f_prime))
    e_degree += math.fsum(
        _bounded_exp(-w.w_r * broadcast_degree_cbf(c, view.f_prime))
        for _, c in view.neighbor_connectivity
    )
    e_coll = math.fsum(
        _bounded_exp(-w.w_c * collision_cbf(view.self_position, pj, view.delta_d))
        for _, pj in view.neighbor_positions
    )
    return 1.0 / view.params.n - e_degree / (view.f_prime + 1) - e_coll / 2.0


@dataclass(frozen=True)
class ConstraintRow:
    """Halfplane ``normal @ u >= rhs`` restricting a robot's velocity."""

    normal: np.ndarray
    rhs: float


def constraint_row(view: LocalView) -> ConstraintRow:
    """Velocity constraint keeping the robot's local barrier from decaying too fast.

    The normal aggregates, for every node ``k`` in the closed neighborhood,
    the broadcast-degree exponential of ``k`` times the gradient of ``k``'s
    degree margin with respect to this robot's position, plus the collision
    exponentials times their gradients ``2 (x_i - x_j)``.  The right-hand
    side is ``-gamma * phi_i``.
    """
    w = view.weights
    x_i = np.asarray(view.self_position, dtype=float)
    conn = dict(view.neighbor_connectivity)
    e_self = _bounded_exp(-w.w_r * broadcast_degree_cbf(view.self_connectivity, view.f_prime))
    normal = np.zeros_like(x_i)
    for j, p_j in view.neighbor_positions:
        grad = adjacency_weight_gradient(x_i, p_j, view.params)
        e_j = _bounded_exp(-w.w_r * broadcast_degree_cbf(conn[j], view.f_prime))
        # grad is both d h_self / d x_i (summed over j) and d h_j / d x_i
        normal += w.w_r * (e_self + e_j) * grad
        e_col = _bounded_exp(-w.w_c * collision_cbf(x_i, p_j, view.delta_d))
        normal += w.w_c * e_col * 2.0 * (x_i - np.asarray(p_j, dtype=float))
    return ConstraintRow(normal=normal, rhs=-w.gamma * local_phi(view))


class InfeasibleConstraintError(RuntimeError):
    """The halfplane does not intersect the input box."""


def _box_max(normal: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    return float(np.where(normal > 0, normal * hi, normal * lo).sum())


def _constrained_velocity(
    u_des, normal, rhs: float, lo, hi
) -> tuple[np.ndarray, bool, bool]:
    """Shared decision core: ``(u, fallback, void_constraint)``.

    Implements the exact QP plus its two degradation rules: a degenerate
    normal drops the constraint (stopping instead when the barrier is
    already violated), and an infeasible halfplane yields the most
    restoring velocity in the box.
    """
    ud = np.asarray(u_des, dtype=float)
    a = np.asarray(normal, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if float(np.linalg.norm(a)) < _NORMAL_EPS:
        if rhs > 0.0:
            return np.zeros_like(ud), True, True
        return np.clip(ud, lo, hi), False, rhs > -1e-9
    clipped = np.clip(ud, lo, hi)
    if float(a @ clipped) >= rhs:
        return clipped, False, False
    if _box_max(a, lo, hi) < rhs:
        u = np.where(a > 0, hi, np.where(a < 0, lo, 0.0))
        return u, True, False
    if len(ud) == 2:
        return _project_onto_boundary_segment_2d(ud, a, rhs, lo, hi), False, False
    return _solve_active_halfplane(ud, a, rhs, lo, hi), False, False


def solve_box_qp(u_des, row: ConstraintRow, box: InputBox) -> np.ndarray:
    """Exact minimizer of ``|u - u_des|^2`` over the box intersected with the halfplane.

    If the box projection of ``u_des`` already satisfies the halfplane it is
    the answer; otherwise the halfplane is active at the optimum and the
    answer is the projection of ``u_des`` onto the segment where the
    constraint boundary crosses the box (closed form in 2-D, active-set
    enumeration in higher dimensions).  Raises
    :class:`InfeasibleConstraintError` when the halfplane misses the box,
    which can only happen with a positive right-hand side.
    """
    ud = np.asarray(u_des, dtype=float)
    lo = np.asarray(box.lower, dtype=float)
    hi = np.asarray(box.upper, dtype=float)
    if ud.shape != lo.shape:
        raise ValueError("u_des dimension does not match the box")
    a = np.asarray(row.normal, dtype=float)
    b = float(row.rhs)
    clipped = np.clip(ud, lo, hi)
    norm2 = float(a @ a)
    if norm2 == 0.0:
        if b <= 0.0:
            return clipped
        raise InfeasibleConstraintError("zero constraint normal with positive rhs")
    if float(a @ clipped) >= b:
        return clipped
    if _box_max(a, lo, hi) < b:
        raise InfeasibleConstraintError("halfplane does not intersect the input box")
    if len(ud) == 2:
        return _project_onto_boundary_segment_2d(ud, a, b, lo, hi)
    return _solve_active_halfplane(ud, a, b, lo, hi)


def _project_onto_boundary_segment_2d(ud, a, b, lo, hi) -> np.ndarray:
    """Project onto the segment of the line ``a @ u = b`` inside the box."""
    norm2 = float(a @ a)
    base = a * (b / norm2)
    direction = np.array([-a[1], a[0]])
    t_lo, t_hi = -math.inf, math.inf
    for k in range(2):
        if direction[k] == 0.0:
            # line parallel to this axis; `base` is already within the slab
            # whenever the segment exists, which the box-max test guarantees
            continue
        t0 = (lo[k] - base[k]) / direction[k]
        t1 = (hi[k] - base[k]) / direction[k]
        t_lo = max(t_lo, min(t0, t1))
        t_hi = min(t_hi, max(t0, t1))
    t_star = float((ud - base) @ direction) / norm2
    t_star = min(max(t_star, t_lo), t_hi)
    return base + t_star * direction


def _solve_active_halfplane(ud, a, b, lo, hi) -> np.ndarray:
    """Enumerate box-face activity patterns with the halfplane held active (general dimension)."""
    m = len(ud)
    best = None
    best_obj = math.inf
    for code in range(3**m):
        fixed = np.full(m, np.nan)
        free = []
        c = code
        for k in range(m):
            state = c % 3
            c //= 3
            if state == 1:
                fixed[k] = lo[k]
            elif state == 2:
                fixed[k] = hi[k]
            else:
                free.append(k)
        u = fixed.copy()
        residual = b - float(np.nansum(a * fixed))
        a_free = a[free]
        denom = float(a_free @ a_free)
        if free:
            if denom == 0.0:
                if abs(residual) > 1e-12:
                    continue
                u[free] = ud[free]
            else:
                lam = (residual - float(a_free @ ud[free])) / denom
                u[free] = ud[free] + lam * a_free
        elif abs(residual) > 1e-9:
            continue
        if np.any(u < lo - 1e-12) or np.any(u > hi + 1e-12):
            continue
        obj = float((u - ud) @ (u - ud))
        if obj < best_obj:
            best_obj = obj
            best = np.clip(u, lo, hi)
    if best is None:
        raise InfeasibleConstraintError("no feasible point on the constraint boundary")
    return best


@dataclass(frozen=True)
class ControlDecision:
    """Controller output with diagnostics: the input, barrier value, and degradation flags."""

    u: np.ndarray
    phi: float
    row: ConstraintRow
    fallback: bool = False
    void_constraint: bool = False


def qp_control(view: LocalView, u_des, box: InputBox) -> ControlDecision:
    """Full controller evaluation for one robot from its local view.

    Solves the minimal-deviation QP against the robot's velocity
    constraint.  A degenerate constraint normal with nonpositive right-hand
    side is vacuously satisfied and dropped; with a positive right-hand
    side (barrier already violated) the robot applies the most restoring
    velocity in the box, or stops when no direction helps.
    """
    row = constraint_row(view)
    phi = -row.rhs / view.weights.gamma
    u, fallback, void = _constrained_velocity(u_des, row.normal, row.rhs, box.lower, box.upper)
    if void:
        if fallback:
            logger.warning(
                "robot %d: degenerate constraint normal with violated barrier (phi=%.3g); stopping",
                view.self_id,
                phi,
            )
        else:
            logger.warning(
                "robot %d: degenerate constraint normal on the barrier boundary; constraint dropped",
                view.self_id,
            )
    return ControlDecision(u=u, phi=phi, row=row, fallback=fallback, void_constraint=void)


def cbf_qp_controller(view: LocalView, u_des, box: InputBox) -> np.ndarray:
    """Velocity command minimally deviating from ``u_des`` subject to the robot's constraint."""
    return qp_control(view, u_des, box).u


def write_decision_csv(path, rows) -> None:
    """Diagnostic dump of controller evaluations.

    ``rows`` yields ``(step, robot, u_des, decision)`` tuples; each becomes
    one CSV row with the barrier value, the constraint normal, the desired
    velocity, and the filtered velocity.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no decisions to dump")
    m = len(np.asarray(rows[0][2], dtype=float))
    header = (
        ["step", "robot", "phi"]
        + [f"normal{a}" for a in range(m)]
        + [f"u_des{a}" for a in range(m)]
        + [f"u{a}" for a in range(m)]
        + ["fallback", "void_constraint"]
    )
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for step, robot, u_des, decision in rows:
            writer.writerow(
                [step, robot, f"{decision.phi:.9g}"]
                + [f"{v:.9g}" for v in decision.row.normal]
                + [f"{float(v):.9g}" for v in np.asarray(u_des, dtype=float)]
                + [f"{v:.9g}" for v in decision.u]
                + [int(decision.fallback), int(decision.void_constraint)]
            )
