"""Deterministic discrete-time world: dynamics, broadcast schedules, attacks, and logging.

Robots are single integrators advanced by forward Euler.  Two broadcast
cadences run on top of the integration clock: every ``tau1`` seconds each
robot recomputes and shares its connectivity level (malicious robots add
their configured bias), and every ``tau2`` seconds consensus states are
exchanged, with normal robots applying the trimmed W-MSR update and
malicious robots broadcasting as their attack model dictates.  Every
``dt`` each robot evaluates the minimally-invasive velocity QP on its
local view of current positions and the latest held broadcasts.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .consensus import (
    ConsensusConfig,
    ConsensusVerdict,
    check_resilient_consensus,
    malicious_broadcast,
    wmsr_step,
    write_history_csv,
)
from .control import CbfWeights, InputBox, _constrained_velocity
from .graph import (
    AdjacencyParams,
    RoleAssignment,
    build_graph,
    connectivity_levels,
    required_degree_threshold,
)

__all__ = [
    "AttackModel",
    "DesiredControllerSpec",
    "WorldConfig",
    "WorldState",
    "TrajectoryLog",
    "ConfigError",
    "FormationError",
    "SimulationError",
    "scenario_config",
    "config_from_mapping",
    "desired_velocity",
    "initialize_formation",
    "initial_state",
    "step_world",
    "run_scenario",
]

SCENARIO_BIASES = {"nominal": 0.0, "understate": -2.5, "overstate": 3.5}
_SCENARIO_ALIASES = {"understating": "understate", "overstating": "overstate"}

_BEHAVIORS = ("wmsr", "random")
_SELF_CONNECTIVITY_MODES = ("sampled", "instant")
_DESIRED_KINDS = ("four_directions", "zero")


class ConfigError(ValueError):
    """Invalid or missing configuration value; carries the offending field name."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class FormationError(RuntimeError):
    """No admissible initial formation found within the sampling budget."""


class SimulationError(RuntimeError):
    """The integrated state became non-finite."""


@dataclass(frozen=True)
class AttackModel:
    """Behavior of malicious robots: a constant connectivity bias plus a consensus policy.

    ``connectivity_bias`` is added to every broadcast connectivity level
    (negative values understate, positive overstate).  The consensus
    behavior is either honest W-MSR updating or a fresh uniform draw from
    the consensus range at every exchange.
    """

    connectivity_bias: float = 0.0
    consensus_behavior: str = "random"

    def __post_init__(self) -> None:
        if self.consensus_behavior not in _BEHAVIORS:
            raise ValueError(f"consensus_behavior must be one of {_BEHAVIORS}")
        if not math.isfinite(self.connectivity_bias):
            raise ValueError("connectivity_bias must be finite")


@dataclass(frozen=True)
class DesiredControllerSpec:
    """Nominal controller each robot would follow unconstrained.

    ``four_directions`` sends odd-numbered robots of the first half toward
    (-scale, 0) and even ones toward (+scale, 0), and the second half
    likewise along the vertical axis, normalized to unit speed; it
    deliberately tears the network apart.  ``zero`` keeps robots still.
    """

    kind: str = "four_directions"
    scale: float = 100.0

    def __post_init__(self) -> None:
        if self.kind not in _DESIRED_KINDS:
            raise ValueError(f"kind must be one of {_DESIRED_KINDS}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def _is_multiple(a: float, b: float) -> bool:
    ratio = a / b
    return abs(ratio - round(ratio)) < 1e-6


@dataclass(frozen=True)
class WorldConfig:
    """Every scalar and policy the desk-scale study parameterizes.

    Defaults reproduce the 11-robot study: communication radius 3 m,
    safety diameter 0.3 m, two malicious robots, connectivity broadcasts
    every 5 ms, consensus exchanges every 100 ms, 10 s horizon.  The
    barrier weights ``w_r``/``w_c`` are free parameters; the defaults are
    calibrated so the initial sampler can find formations strictly inside
    the certified safe set at this scale.
    """

    n: int = 11
    f: int = 2
    m: int = 2
    radius: float = 3.0
    delta_d: float = 0.3
    q1: float | None = None
    q2: float = 1.0
    w_r: float = 3.0
    w_c: float = 20.0
    gamma: float = 0.12
    box: InputBox | None = None
    boxes: tuple[InputBox, ...] | None = None
    tau1: float = 0.005
    tau2: float = 0.1
    dt: float = 0.001
    t_end: float = 10.0
    seed: int = 1
    malicious: tuple[int, ...] | None = None
    attack: AttackModel = AttackModel()
    attack_overrides: tuple[tuple[int, AttackModel], ...] = ()
    desired: DesiredControllerSpec = DesiredControllerSpec()
    self_connectivity_mode: str = "sampled"
    consensus_tol: float = 1e-3
    consensus_horizon: int = 400
    y_range: tuple[float, float] = (-500.0, 500.0)
    init_radius: float = 1.25
    init_spacing: float = 0.55
    init_max_attempts: int = 4000
    scenario: str = "nominal"

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ConfigError("n", f"must be at least 2, got {self.n}")
        if self.f < 0 or self.f > (self.n - 1) // 2:
            raise ConfigError("f", f"must lie in [0, floor((n-1)/2)] = [0, {(self.n - 1) // 2}]")
        if self.m < 1:
            raise ConfigError("m", "must be at least 1")
        if not self.radius > 0:
            raise ConfigError("radius", "must be positive")
        if not 0 < self.delta_d < self.radius:
            raise ConfigError("delta_d", "must be positive and below the communication radius")
        if self.q1 is None:
            object.__setattr__(self, "q1", 2.0 + 0.5 / (self.n - 1))
        if self.box is None:
            object.__setattr__(self, "box", InputBox.symmetric(1.5, self.m))
        if self.box.dim != self.m:
            raise ConfigError("box", f"dimension {self.box.dim} does not match m={self.m}")
        if self.boxes is not None:
            if len(self.boxes) != self.n:
                raise ConfigError("boxes", f"need one box per robot ({self.n}), got {len(self.boxes)}")
            if any(b.dim != self.m for b in self.boxes):
                raise ConfigError("boxes", "every per-robot box must match the spatial dimension")
        if not self.dt > 0:
            raise ConfigError("dt", "must be positive")
        if not self.dt <= self.tau1 <= self.tau2:
            raise ConfigError("tau1", f"need dt <= tau1 <= tau2, got dt={self.dt} tau1={self.tau1} tau2={self.tau2}")
        for name, value in (("tau1", self.tau1), ("tau2", self.tau2), ("t_end", self.t_end)):
            if not _is_multiple(value, self.dt):
                raise ConfigError(name, f"must be an integer multiple of dt={self.dt}")
        if not self.t_end >= self.dt:
            raise ConfigError("t_end", "must cover at least one step")
        if self.malicious is not None:
            ids = tuple(self.malicious)
            if len(set(ids)) != len(ids) or any(not 0 <= i < self.n for i in ids):
                raise ConfigError("malicious", "ids must be unique and in range")
            if len(ids) > self.f:
                raise ConfigError("malicious", f"{len(ids)} ids exceed f={self.f}")
        for node, _model in self.attack_overrides:
            if not 0 <= node < self.n:
                raise ConfigError("attack_overrides", f"node {node} out of range")
        if self.self_connectivity_mode not in _SELF_CONNECTIVITY_MODES:
            raise ConfigError("self_connectivity_mode", f"must be one of {_SELF_CONNECTIVITY_MODES}")
        if self.desired.kind == "four_directions" and self.m != 2:
            raise ConfigError("desired", "four_directions requires m=2")
        if not self.init_spacing > self.delta_d:
            raise ConfigError("init_spacing", "must exceed delta_d so initial robots are separated")
        if not self.init_radius > 0 or self.init_max_attempts < 1:
            raise ConfigError("init_radius", "init_radius must be positive and init_max_attempts at least 1")
        lo, hi = self.y_range
        if not lo <= hi:
            raise ConfigError("y_range", "must be ordered")
        # constructing the derived parameter objects validates the rest
        _ = self.params
        _ = self.weights
        _ = self.consensus

    @property
    def f_prime(self) -> int:
        return required_degree_threshold(self.n, self.f)

    @property
    def params(self) -> AdjacencyParams:
        return AdjacencyParams(q1=self.q1, q2=self.q2, radius=self.radius, n=self.n)

    @property
    def weights(self) -> CbfWeights:
        return CbfWeights(w_r=self.w_r, w_c=self.w_c, gamma=self.gamma)

    @property
    def consensus(self) -> ConsensusConfig:
        return ConsensusConfig(
            f=self.f,
            tau2=self.tau2,
            y_range=self.y_range,
            tol=self.consensus_tol,
            horizon=self.consensus_horizon,
        )

    @property
    def tau1_steps(self) -> int:
        return round(self.tau1 / self.dt)

    @property
    def tau2_steps(self) -> int:
        return round(self.tau2 / self.dt)

    @property
    def steps_total(self) -> int:
        return round(self.t_end / self.dt)

    @cached_property
    def _box_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self.boxes is not None:
            lo = np.array([b.lower for b in self.boxes], dtype=float)
            hi = np.array([b.upper for b in self.boxes], dtype=float)
        else:
            lo = np.tile(np.asarray(self.box.lower, dtype=float), (self.n, 1))
            hi = np.tile(np.asarray(self.box.upper, dtype=float), (self.n, 1))
        return lo, hi

    def robot_box(self, i: int) -> InputBox:
        return self.boxes[i] if self.boxes is not None else self.box

    def attack_for(self, node: int) -> AttackModel:
        for i, model in self.attack_overrides:
            if i == node:
                return model
        return self.attack

    def resolve_roles(self, rng: np.random.Generator | None = None) -> RoleAssignment:
        """Fixed malicious ids when configured, else exactly ``f`` sampled from ``rng``."""
        if self.malicious is not None:
            return RoleAssignment.assign(self.n, self.f, self.malicious)
        if rng is None:
            raise ValueError("role sampling needs a generator when malicious ids are not fixed")
        return RoleAssignment.sample(self.n, self.f, rng)

    def to_dict(self) -> dict[str, Any]:
        """Flat JSON-serializable form; ``config_from_mapping`` on the result reproduces the config."""
        extras: dict[str, Any] = {}
        if self.boxes is not None:
            extras["boxes"] = [[list(pair) for pair in zip(b.lower, b.upper)] for b in self.boxes]
        if self.attack_overrides:
            extras["attack_overrides"] = [
                [node, {"epsilon": model.connectivity_bias, "consensus": model.consensus_behavior}]
                for node, model in self.attack_overrides
            ]
        return extras | {
            "scenario": self.scenario,
            "n": self.n,
            "f": self.f,
            "f_prime": self.f_prime,
            "m": self.m,
            "radius": self.radius,
            "delta_d": self.delta_d,
            "q1": self.q1,
            "q2": self.q2,
            "w_r": self.w_r,
            "w_c": self.w_c,
            "gamma": self.gamma,
            "box": [list(pair) for pair in zip(self.box.lower, self.box.upper)],
            "tau1": self.tau1,
            "tau2": self.tau2,
            "dt": self.dt,
            "t_end": self.t_end,
            "seed": self.seed,
            "malicious": None if self.malicious is None else sorted(self.malicious),
            "epsilon": self.attack.connectivity_bias,
            "attack_consensus": self.attack.consensus_behavior,
            "desired": self.desired.kind,
            "desired_scale": self.desired.scale,
            "self_connectivity_mode": self.self_connectivity_mode,
            "consensus_tol": self.consensus_tol,
            "consensus_horizon": self.consensus_horizon,
            "y_range": list(self.y_range),
            "init_radius": self.init_radius,
            "init_spacing": self.init_spacing,
            "init_max_attempts": self.init_max_attempts,
        }


_KEY_ALIASES = {
    "F": "f",
    "R": "radius",
    "T_end": "t_end",
    "consensus.tol": "consensus_tol",
    "consensus.horizon": "consensus_horizon",
    "consensus.y_range": "y_range",
    "attack.epsilon": "epsilon",
    "attack.connectivity_bias": "epsilon",
    "attack.consensus": "attack_consensus",
    "attack.consensus_behavior": "attack_consensus",
    "desired.kind": "desired",
    "desired.scale": "desired_scale",
    "init.radius": "init_radius",
    "init.spacing": "init_spacing",
    "init.max_attempts": "init_max_attempts",
}

_INT_KEYS = {"n", "f", "m", "seed", "consensus_horizon", "init_max_attempts"}
_FLOAT_KEYS = {
    "radius",
    "delta_d",
    "q1",
    "q2",
    "w_r",
    "w_c",
    "gamma",
    "tau1",
    "tau2",
    "dt",
    "t_end",
    "epsilon",
    "desired_scale",
    "consensus_tol",
    "init_radius",
    "init_spacing",
}
_STR_KEYS = {"scenario", "attack_consensus", "desired", "self_connectivity_mode"}


def _parse_box(value) -> InputBox:
    pairs = [(float(lo), float(hi)) for lo, hi in value]
    return InputBox(lower=tuple(lo for lo, _ in pairs), upper=tuple(hi for _, hi in pairs))


def config_from_mapping(mapping: Mapping[str, Any]) -> WorldConfig:
    """Build a :class:`WorldConfig` from flat key/value data, naming the field on any error.

    Accepts the canonical field names plus common aliases (``F``, ``R``,
    dotted section keys).  A ``scenario`` key seeds the attack model with
    the named preset before the remaining keys are applied; an explicit
    ``f_prime`` is checked against the derived value.
    """
    data: dict[str, Any] = {}
    for key, value in mapping.items():
        canon = _KEY_ALIASES.get(key, key)
        if canon in data:
            raise ConfigError(key, "duplicate field")
        data[canon] = value

    kwargs: dict[str, Any] = {}
    epsilon: float | None = None
    behavior: str | None = None
    desired_kind: str | None = None
    desired_scale: float | None = None
    expected_f_prime = data.pop("f_prime", None)

    scenario = data.pop("scenario", None)
    if scenario is not None:
        name = _SCENARIO_ALIASES.get(str(scenario), str(scenario))
        if name not in SCENARIO_BIASES:
            raise ConfigError("scenario", f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIO_BIASES)}")
        kwargs["scenario"] = name
        epsilon = SCENARIO_BIASES[name]

    for key, value in data.items():
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                if key == "epsilon":
                    epsilon = float(value)
                elif key == "desired_scale":
                    desired_scale = float(value)
                else:
                    kwargs[key] = float(value)
            elif key in _STR_KEYS:
                if key == "attack_consensus":
                    behavior = str(value)
                elif key == "desired":
                    desired_kind = str(value)
                else:
                    kwargs[key] = str(value)
            elif key == "malicious":
                kwargs[key] = None if value is None else tuple(int(v) for v in value)
            elif key == "y_range":
                lo, hi = value
                kwargs[key] = (float(lo), float(hi))
            elif key == "box":
                kwargs[key] = _parse_box(value)
            elif key == "boxes":
                kwargs[key] = None if value is None else tuple(_parse_box(b) for b in value)
            elif key == "attack_overrides":
                kwargs[key] = tuple(
                    (
                        int(node),
                        AttackModel(
                            connectivity_bias=float(model.get("epsilon", 0.0)),
                            consensus_behavior=str(model.get("consensus", "random")),
                        ),
                    )
                    for node, model in value
                )
            else:
                raise ConfigError(key, "unknown field")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"bad value {value!r} ({exc})") from exc

    if epsilon is not None or behavior is not None:
        kwargs["attack"] = AttackModel(
            connectivity_bias=0.0 if epsilon is None else epsilon,
            consensus_behavior=behavior or "random",
        )
    if desired_kind is not None or desired_scale is not None:
        kwargs["desired"] = DesiredControllerSpec(
            kind=desired_kind or "four_directions",
            scale=100.0 if desired_scale is None else desired_scale,
        )
    try:
        cfg = WorldConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from exc
    if expected_f_prime is not None and int(expected_f_prime) != cfg.f_prime:
        raise ConfigError("f_prime", f"stated {expected_f_prime} but n={cfg.n}, f={cfg.f} give {cfg.f_prime}")
    return cfg


def scenario_config(name: str, seed: int = 1, **overrides) -> WorldConfig:
    """Preset for one of the three studied attack scenarios at the default desk scale."""
    canon = _SCENARIO_ALIASES.get(name, name)
    if canon not in SCENARIO_BIASES:
        raise ConfigError("scenario", f"unknown scenario {name!r}; expected one of {sorted(SCENARIO_BIASES)}")
    attack = AttackModel(connectivity_bias=SCENARIO_BIASES[canon], consensus_behavior="random")
    return WorldConfig(seed=seed, scenario=canon, attack=attack, **overrides)


def desired_velocity(robot: int, x, n: int = 11, scale: float = 100.0) -> np.ndarray:
    """Unit-speed pull toward one of four far-away waypoints; ``robot`` is 1-based.

    Robots ``1..floor(n/2)`` head to ``((-1)^i * scale, 0)`` and the rest
    to ``(0, (-1)^i * scale)``, so roughly a quarter of the swarm pulls in
    each of four directions.  Returns the zero vector at the waypoint.
    """
    if not 1 <= robot <= n:
        raise ValueError(f"robot number must lie in 1..{n}, got {robot}")
    pos = np.asarray(x, dtype=float)
    sign = 1.0 if robot % 2 == 0 else -1.0
    if robot <= n // 2:
        target = np.array([sign * scale, 0.0])
    else:
        target = np.array([0.0, sign * scale])
    v = target - pos
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(pos)
    return v / norm


def _desired_targets(cfg: WorldConfig) -> np.ndarray | None:
    if cfg.desired.kind == "zero":
        return None
    targets = np.zeros((cfg.n, 2))
    for k in range(cfg.n):
        robot = k + 1
        sign = 1.0 if robot % 2 == 0 else -1.0
        if robot <= cfg.n // 2:
            targets[k] = (sign * cfg.desired.scale, 0.0)
        else:
            targets[k] = (0.0, sign * cfg.desired.scale)
    return targets


def _desired_all(positions: np.ndarray, targets: np.ndarray | None) -> np.ndarray:
    if targets is None:
        return np.zeros_like(positions)
    v = targets - positions
    norms = np.linalg.norm(v, axis=1)
    out = np.zeros_like(v)
    moving = norms > 0
    out[moving] = v[moving] / norms[moving, None]
    return out


def _uniform_in_ball(rng: np.random.Generator, m: int, radius: float) -> np.ndarray:
    if m == 2:
        r = radius * math.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        return np.array([r * math.cos(theta), r * math.sin(theta)])
    direction = rng.normal(size=m)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.uniform() ** (1.0 / m)


def _sample_spaced_points(
    rng: np.random.Generator, n: int, m: int, radius: float, spacing: float, tries_per_point: int = 200
) -> np.ndarray | None:
    points: list[np.ndarray] = []
    for _ in range(n):
        for _attempt in range(tries_per_point):
            candidate = _uniform_in_ball(rng, m, radius)
            if all(float(np.linalg.norm(candidate - p)) >= spacing for p in points):
                points.append(candidate)
                break
        else:
            return None
    return np.array(points)


def _phi_all(positions: np.ndarray, c_table: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    """Vectorized per-robot barrier with self terms taken from the broadcast table."""
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijm,ijm->ij", diff, diff)
    edge = (d2 <= cfg.radius**2) & ~np.eye(cfg.n, dtype=bool)
    h_hat = c_table - cfg.f_prime
    e_hat = np.exp(np.minimum(-cfg.w_r * h_hat, 700.0))
    e_col = np.where(edge, np.exp(np.minimum(-cfg.w_c * (d2 - cfg.delta_d**2), 700.0)), 0.0)
    return 1.0 / cfg.n - (e_hat + edge @ e_hat) / (cfg.f_prime + 1) - e_col.sum(axis=1) / 2.0


def initialize_formation(
    cfg: WorldConfig, rng: np.random.Generator, roles: RoleAssignment | None = None
) -> np.ndarray:
    """Rejection-sample an initial formation inside a disc.

    A draw is accepted only when every robot has at least ``F'`` neighbors,
    all pairwise distances exceed the safety diameter, and every robot's
    local barrier is strictly positive under truthful connectivity levels.
    When roles are given and the attack biases broadcasts, the barrier must
    also be positive under the biased levels so runs start inside the
    certified safe set that the controller renders invariant.
    """
    reasons: Counter[str] = Counter()
    for _ in range(cfg.init_max_attempts):
        pts = _sample_spaced_points(rng, cfg.n, cfg.m, cfg.init_radius, cfg.init_spacing)
        if pts is None:
            reasons["packing (init_spacing too tight for init_radius)"] += 1
            continue
        snapshot = build_graph(pts, cfg.radius)
        if min(snapshot.degrees()) < cfg.f_prime:
            reasons[f"degree (some robot below f_prime={cfg.f_prime})"] += 1
            continue
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = np.einsum("ijm,ijm->ij", diff, diff)
        np.fill_diagonal(d2, np.inf)
        if not d2.min() > cfg.delta_d**2:
            reasons["separation (pair at or below delta_d)"] += 1
            continue
        c_true = connectivity_levels(pts, cfg.params)
        if not _phi_all(pts, c_true, cfg).min() > 0.0:
            reasons["barrier (some phi_i nonpositive with truthful levels)"] += 1
            continue
        if roles is not None:
            c_biased = c_true.copy()
            for i in roles.malicious:
                c_biased[i] += cfg.attack_for(i).connectivity_bias
            if not np.array_equal(c_biased, c_true) and not _phi_all(pts, c_biased, cfg).min() > 0.0:
                reasons["barrier (some phi_i nonpositive with biased levels)"] += 1
                continue
        return pts
    detail = ", ".join(f"{name} x{count}" for name, count in reasons.most_common(3)) or "no attempts recorded"
    raise FormationError(
        f"no admissible formation in {cfg.init_max_attempts} attempts; unmet conditions: {detail}"
    )


@dataclass
class WorldState:
    """Mutable-by-replacement world snapshot between integration steps."""

    step: int
    positions: np.ndarray
    c_broadcast: np.ndarray
    y: np.ndarray
    roles: RoleAssignment
    rng_attack: np.random.Generator


@dataclass
class StepRecord:
    time: float
    positions: np.ndarray
    inputs: np.ndarray
    degrees: np.ndarray
    h_true: np.ndarray
    h_broadcast: np.ndarray
    phi: np.ndarray
    min_pairwise: float
    fallback_ids: tuple[int, ...]
    void_ids: tuple[int, ...]
    consensus: tuple[np.ndarray, np.ndarray] | None


def _broadcast_connectivity(positions: np.ndarray, cfg: WorldConfig, roles: RoleAssignment) -> np.ndarray:
    c = connectivity_levels(positions, cfg.params)
    for i in roles.malicious:
        c[i] += cfg.attack_for(i).connectivity_bias
    return c


def _evaluate_controls(
    positions: np.ndarray,
    c_broadcast: np.ndarray,
    cfg: WorldConfig,
    roles: RoleAssignment,
    targets: np.ndarray | None,
) -> tuple[np.ndarray, dict[str, Any]]:
    """Vectorized per-robot constraint construction plus the exact QP, for one instant."""
    n = cfg.n
    f_prime = cfg.f_prime
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijm,ijm->ij", diff, diff)
    off = ~np.eye(n, dtype=bool)
    edge = (d2 <= cfg.radius**2) & off
    z = np.where(edge, cfg.radius**2 - d2, 0.0)
    sig = 1.0 / (1.0 + np.exp(-cfg.q2 * z * z))
    weights_mat = np.where(edge, cfg.q1 * sig - 0.5 * cfg.q1, 0.0)
    grad_factor = np.where(edge, -4.0 * cfg.q1 * cfg.q2 * z * sig * (1.0 - sig), 0.0)

    degrees = edge.sum(axis=1)
    h_true = weights_mat.sum(axis=1) - f_prime
    h_hat = c_broadcast - f_prime
    e_hat = np.exp(np.minimum(-cfg.w_r * h_hat, 700.0))

    if cfg.self_connectivity_mode == "sampled":
        e_self = e_hat
    else:
        c_now = weights_mat.sum(axis=1)
        for i in roles.malicious:
            c_now[i] += cfg.attack_for(i).connectivity_bias
        e_self = np.exp(np.minimum(-cfg.w_r * (c_now - f_prime), 700.0))

    e_col = np.where(edge, np.exp(np.minimum(-cfg.w_c * (d2 - cfg.delta_d**2), 700.0)), 0.0)
    phi = 1.0 / n - (e_self + edge @ e_hat) / (f_prime + 1) - e_col.sum(axis=1) / 2.0

    coef = cfg.w_r * (e_self[:, None] + e_hat[None, :]) * grad_factor + 2.0 * cfg.w_c * e_col
    normals = np.einsum("ij,ijm->im", coef, diff)
    rhs = -cfg.gamma * phi

    u_des = _desired_all(positions, targets)
    lo, hi = cfg._box_arrays
    u = np.empty_like(positions)
    fallback_ids: list[int] = []
    void_ids: list[int] = []
    for i in range(n):
        u[i], fb, void = _constrained_velocity(u_des[i], normals[i], float(rhs[i]), lo[i], hi[i])
        if fb:
            fallback_ids.append(i)
        if void:
            void_ids.append(i)

    d2_off = np.where(off, d2, np.inf)
    diag = {
        "degrees": degrees,
        "h_true": h_true,
        "h_broadcast": h_hat,
        "phi": phi,
        "min_pairwise": float(math.sqrt(d2_off.min())),
        "fallback_ids": tuple(fallback_ids),
        "void_ids": tuple(void_ids),
    }
    return u, diag


def _advance(state: WorldState, cfg: WorldConfig, targets: np.ndarray | None, integrate: bool = True):
    """One ``dt`` step: broadcast ticks, consensus tick, control, Euler update."""
    k = state.step
    positions = state.positions
    if not np.all(np.isfinite(positions)):
        raise SimulationError(f"non-finite positions at step {k}")
    c = state.c_broadcast
    y = state.y
    roles = state.roles

    if k % cfg.tau1_steps == 0:
        c = _broadcast_connectivity(positions, cfg, roles)

    consensus_rec = None
    if k % cfg.tau2_steps == 0:
        y = y.copy()
        for i in sorted(roles.malicious):
            if cfg.attack_for(i).consensus_behavior == "random":
                y[i] = malicious_broadcast(state.rng_attack, cfg.consensus)
        shared = y.copy()
        snapshot = build_graph(positions, cfg.radius)
        removed_counts = np.zeros(cfg.n, dtype=int)
        new_y = shared.copy()
        for i in range(cfg.n):
            honest = i in roles.normal or cfg.attack_for(i).consensus_behavior == "wmsr"
            if honest:
                neighbor_values = [(j, float(shared[j])) for j in snapshot.neighbors[i]]
                new_y[i], removed = wmsr_step(float(shared[i]), neighbor_values, cfg.f)
                removed_counts[i] = len(removed)
        consensus_rec = (shared, removed_counts)
        y = new_y

    u, diag = _evaluate_controls(positions, c, cfg, roles, targets)
    record = StepRecord(
        time=k * cfg.dt,
        positions=positions.copy(),
        inputs=u,
        consensus=consensus_rec,
        **diag,
    )

    if integrate:
        lo, hi = cfg._box_arrays
        new_positions = positions + np.clip(u, lo, hi) * cfg.dt
        if not np.all(np.isfinite(new_positions)):
            raise SimulationError(f"non-finite positions at step {k}")
    else:
        new_positions = positions

    new_state = WorldState(
        step=k + 1,
        positions=new_positions,
        c_broadcast=c,
        y=y,
        roles=roles,
        rng_attack=state.rng_attack,
    )
    return new_state, record


def initial_state(cfg: WorldConfig) -> WorldState:
    """Seeded world at step 0: sampled roles, admissible formation, uniform consensus states."""
    children = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init, rng_roles, rng_consensus, rng_attack = (np.random.default_rng(s) for s in children)
    roles = cfg.resolve_roles(rng_roles)
    positions = initialize_formation(cfg, rng_init, roles)
    lo, hi = cfg.y_range
    y0 = rng_consensus.uniform(lo, hi, size=cfg.n)
    return WorldState(
        step=0,
        positions=positions,
        c_broadcast=np.zeros(cfg.n),
        y=y0,
        roles=roles,
        rng_attack=rng_attack,
    )


def step_world(state: WorldState, cfg: WorldConfig) -> WorldState:
    """Advance the world by one ``dt`` step (broadcasts, consensus, control, Euler)."""
    new_state, _ = _advance(state, cfg, _desired_targets(cfg))
    return new_state


@dataclass
class TrajectoryLog:
    """Dense per-step time series of one run plus the sparser consensus series."""

    times: np.ndarray
    positions: np.ndarray
    inputs: np.ndarray
    degrees: np.ndarray
    h_true: np.ndarray
    h_broadcast: np.ndarray
    phi: np.ndarray
    min_pairwise: np.ndarray
    consensus_times: np.ndarray
    consensus: np.ndarray
    removed_counts: np.ndarray
    roles: RoleAssignment
    events: list[tuple[int, int, str]] = field(default_factory=list)

    @classmethod
    def allocate(cls, cfg: WorldConfig, roles: RoleAssignment) -> "TrajectoryLog":
        steps = cfg.steps_total + 1
        ticks = cfg.steps_total // cfg.tau2_steps + 1
        return cls(
            times=np.zeros(steps),
            positions=np.zeros((steps, cfg.n, cfg.m)),
            inputs=np.zeros((steps, cfg.n, cfg.m)),
            degrees=np.zeros((steps, cfg.n), dtype=int),
            h_true=np.zeros((steps, cfg.n)),
            h_broadcast=np.zeros((steps, cfg.n)),
            phi=np.zeros((steps, cfg.n)),
            min_pairwise=np.zeros(steps),
            consensus_times=np.zeros(ticks),
            consensus=np.zeros((ticks, cfg.n)),
            removed_counts=np.zeros((ticks, cfg.n), dtype=int),
            roles=roles,
        )

    def _write(self, k: int, rec: StepRecord, tick_index: int | None) -> None:
        self.times[k] = rec.time
        self.positions[k] = rec.positions
        self.inputs[k] = rec.inputs
        self.degrees[k] = rec.degrees
        self.h_true[k] = rec.h_true
        self.h_broadcast[k] = rec.h_broadcast
        self.phi[k] = rec.phi
        self.min_pairwise[k] = rec.min_pairwise
        for robot in rec.fallback_ids:
            self.events.append((k, robot, "qp_fallback"))
        for robot in rec.void_ids:
            self.events.append((k, robot, "void_constraint"))
        if rec.consensus is not None and tick_index is not None:
            shared, removed = rec.consensus
            self.consensus_times[tick_index] = rec.time
            self.consensus[tick_index] = shared
            self.removed_counts[tick_index] = removed

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def fallback_event_count(self) -> int:
        return sum(1 for _, _, kind in self.events if kind == "qp_fallback")

    @property
    def void_event_count(self) -> int:
        return sum(1 for _, _, kind in self.events if kind == "void_constraint")

    def _role_columns(self, member: str) -> list[int]:
        ids = getattr(self.roles, member)
        return sorted(ids)

    def min_normal_h(self) -> float:
        return float(self.h_true[:, self._role_columns("normal")].min())

    def min_malicious_h(self) -> float | None:
        cols = self._role_columns("malicious")
        return float(self.h_true[:, cols].min()) if cols else None

    def min_distance(self) -> float:
        return float(self.min_pairwise.min())

    def mean_pairwise_distance(self, t_start: float | None = None, t_end: float | None = None) -> float:
        """Time average of the mean pairwise robot distance over ``[t_start, t_end]``."""
        lo = -math.inf if t_start is None else t_start
        hi = math.inf if t_end is None else t_end
        window = (self.times >= lo - 1e-12) & (self.times <= hi + 1e-12)
        pos = self.positions[window]
        if not len(pos):
            raise ValueError("empty time window")
        diff = pos[:, :, None, :] - pos[:, None, :, :]
        dist = np.sqrt(np.einsum("tijm,tijm->tij", diff, diff))
        iu = np.triu_indices(self.n, k=1)
        return float(dist[:, iu[0], iu[1]].mean())

    def spread_history(self) -> np.ndarray:
        cols = self._role_columns("normal")
        vals = self.consensus[:, cols]
        return vals.max(axis=1) - vals.min(axis=1)

    def to_csv(self, path) -> None:
        """One row per robot per step; ``min_pairwise`` repeats the per-step swarm minimum."""
        m = self.positions.shape[2]
        header = (
            ["step", "time", "robot", "role"]
            + [f"x{a}" for a in range(m)]
            + [f"u{a}" for a in range(m)]
            + ["degree", "h_true", "h_broadcast", "phi", "min_pairwise"]
        )
        malicious = self.roles.malicious
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(len(self.times)):
                for i in range(self.n):
                    writer.writerow(
                        [k, f"{self.times[k]:.6f}", i, "malicious" if i in malicious else "normal"]
                        + [f"{v:.9g}" for v in self.positions[k, i]]
                        + [f"{v:.9g}" for v in self.inputs[k, i]]
                        + [
                            int(self.degrees[k, i]),
                            f"{self.h_true[k, i]:.9g}",
                            f"{self.h_broadcast[k, i]:.9g}",
                            f"{self.phi[k, i]:.9g}",
                            f"{self.min_pairwise[k]:.9g}",
                        ]
                    )

    def summary(self, verdict: ConsensusVerdict) -> dict[str, Any]:
        return {
            "verdict": {
                "converged": verdict.converged,
                "limit_estimate": verdict.limit_estimate,
                "safety_held": verdict.safety_held,
                "final_spread": verdict.final_spread,
                "violation_step": verdict.violation_step,
            },
            "min_normal_h": self.min_normal_h(),
            "min_malicious_h": self.min_malicious_h(),
            "min_pairwise_distance": self.min_distance(),
            "fallback_events": self.fallback_event_count,
            "void_constraint_events": self.void_event_count,
            "spread_history": [float(v) for v in self.spread_history()],
        }

    def write_summary_json(self, path, verdict: ConsensusVerdict) -> None:
        Path(path).write_text(json.dumps(self.summary(verdict), indent=2) + "\n")

    def _write_wide_csv(self, path, times: np.ndarray, values: np.ndarray, prefix: str) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time"] + [f"{prefix}{i}" for i in range(self.n)])
            for t, row in zip(times, values):
                writer.writerow([f"{t:.6f}"] + [f"{v:.9g}" for v in row])

    def write_h_traces(self, path) -> None:
        """Wide CSV of the true degree margins, one column per robot."""
        self._write_wide_csv(path, self.times, self.h_true, "h")

    def write_consensus_traces(self, path) -> None:
        """Wide CSV of the consensus states at exchange times, one column per robot."""
        self._write_wide_csv(path, self.consensus_times, self.consensus, "y")

    def write_consensus_csv(self, path) -> None:
        write_history_csv(path, self.consensus, self.roles, self.removed_counts)


def _extended_consensus_history(state: WorldState, cfg: WorldConfig, log: TrajectoryLog) -> np.ndarray:
    """Continue consensus-only exchanges on the frozen final formation.

    Used when the spread has not met tolerance by ``t_end``: the verdict is
    allowed up to ``consensus_horizon`` total exchanges, with positions (and
    hence the graph) held at their final values.  The trajectory log itself
    is not extended.
    """
    snapshot = build_graph(state.positions, cfg.radius)
    y = state.y.copy()
    extra = []
    for _ in range(cfg.consensus_horizon + 1 - len(log.consensus_times)):
        for i in sorted(state.roles.malicious):
            if cfg.attack_for(i).consensus_behavior == "random":
                y[i] = malicious_broadcast(state.rng_attack, cfg.consensus)
        shared = y.copy()
        extra.append(shared)
        new_y = shared.copy()
        for i in range(cfg.n):
            if i in state.roles.normal or cfg.attack_for(i).consensus_behavior == "wmsr":
                neighbor_values = [(j, float(shared[j])) for j in snapshot.neighbors[i]]
                new_y[i], _ = wmsr_step(float(shared[i]), neighbor_values, cfg.f)
        y = new_y
    if not extra:
        return log.consensus
    return np.vstack([log.consensus, np.array(extra)])


def run_scenario(cfg: WorldConfig) -> tuple[TrajectoryLog, ConsensusVerdict]:
    """Run one seeded scenario to its horizon and judge the consensus outcome.

    The verdict is computed over the logged consensus exchanges; if the
    spread is still above tolerance at ``t_end`` the exchanges continue on
    the frozen final formation up to ``consensus_horizon`` total steps
    before judging.
    """
    state = initial_state(cfg)
    log = TrajectoryLog.allocate(cfg, state.roles)
    targets = _desired_targets(cfg)
    total = cfg.steps_total
    tick = 0
    for k in range(total + 1):
        state, rec = _advance(state, cfg, targets, integrate=k < total)
        tick_index = None
        if rec.consensus is not None:
            tick_index = tick
            tick += 1
        log._write(k, rec, tick_index)
    verdict = check_resilient_consensus(log.consensus, state.roles, cfg.consensus_tol)
    if not verdict.converged and len(log.consensus_times) <= cfg.consensus_horizon:
        history = _extended_consensus_history(state, cfg, log)
        verdict = check_resilient_consensus(history, state.roles, cfg.consensus_tol)
    return log, verdict
