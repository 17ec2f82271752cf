"""Assembly of the multi-vehicle game as one potential-minimization problem.

Players declare a dynamics model, a parametric player-specific cost, private
constraints, and input bounds. The builder eliminates states by substituting
each vehicle's rollout (single shooting), sums the player-specific costs with
the pairwise proximity cost into one potential over the stacked inputs, and
collects the coupling collision constraints between decision-making players
as the shared constraint list.

Everything that changes between solver calls (initial states, cost weights)
is a variable slot of the graph, so one build serves a whole closed-loop run:
each call just binds fresh parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import exprgraph as eg
from .collision import pair_constraint_scalars
from .dynamics import (
    ConstantVelocity,
    DynamicsModel,
    InputSample,
    KinematicBicycle,
    LongitudinalDoubleIntegrator,
    Stationary,
    VehicleGeometry,
    VehicleState,
    body_points_scalars,
    rollout_scalars,
)
from .exprgraph import Expr, ExprGraph, ExprLike, exp

THETA_MIN = 1e-3  # lower bound on cost weights; keeps stage terms bounded below


class ConfigurationError(ValueError):
    """Inconsistent player set, beliefs, bounds, or cost declaration."""


def input_channels(m: DynamicsModel) -> tuple[str, ...]:
    if isinstance(m, KinematicBicycle):
        return ("a", "delta")
    if isinstance(m, LongitudinalDoubleIntegrator):
        return ("a",)
    return ()


def _frozen_x0_components(m: DynamicsModel) -> tuple[str, ...]:
    """State components a model never changes; bound as constants at build."""
    if isinstance(m, Stationary):
        return ("px", "py", "psi", "v")
    if isinstance(m, LongitudinalDoubleIntegrator):
        return ("py", "psi")
    if isinstance(m, ConstantVelocity):
        return ("psi", "v")
    return ()


# -- player-specific cost families -------------------------------------------


@dataclass(frozen=True)
class LaneCenterCost:
    """Quadratic penalty on lateral offset, acceleration, and steering."""

    theta_dim = 3

    def stage(self, own_state, own_input, states, theta) -> ExprLike:
        py = own_state[1]
        a, delta = own_input[0], own_input[1]
        return theta[0] * py**2 + theta[1] * a**2 + theta[2] * delta**2

    def terminal(self, own_state, states, theta) -> ExprLike:
        return theta[0] * own_state[1] ** 2


@dataclass(frozen=True)
class GapTrackingCost:
    """Quadratic penalty on deviation from a desired gap behind a leader,
    plus acceleration effort."""

    follow_id: str
    desired_gap: float

    theta_dim = 2

    def _gap_error(self, own_state, states) -> ExprLike:
        return states[self.follow_id][0] - own_state[0] - self.desired_gap

    def stage(self, own_state, own_input, states, theta) -> ExprLike:
        err = self._gap_error(own_state, states)
        return theta[0] * err**2 + theta[1] * own_input[0] ** 2

    def terminal(self, own_state, states, theta) -> ExprLike:
        return theta[0] * self._gap_error(own_state, states) ** 2


def cost_family_from_descriptor(desc: Mapping) -> "CostFamily":
    kind = desc.get("kind")
    if kind == "lane_center":
        return LaneCenterCost()
    if kind == "gap_tracking":
        return GapTrackingCost(
            follow_id=desc["follow_id"], desired_gap=float(desc["desired_gap_m"])
        )
    raise ConfigurationError(f"unknown cost family {kind!r}")


CostFamily = LaneCenterCost | GapTrackingCost


# -- player and shared-cost declarations --------------------------------------


@dataclass(frozen=True)
class SharedCostSpec:
    """Gaussian proximity cost: kappa * exp(-0.5 * d' diag(k_diag) d)."""

    kappa: float
    k_diag: tuple[float, float]

    def __post_init__(self):
        if self.kappa < 0.0:
            raise ConfigurationError("kappa must be nonnegative")
        if min(self.k_diag) <= 0.0:
            raise ConfigurationError("proximity weights must be positive")


def proximity_cost_scalars(ax, ay, bx, by, spec: SharedCostSpec) -> ExprLike:
    if spec.kappa == 0.0:
        return 0.0
    dx = ax - bx
    dy = ay - by
    return spec.kappa * exp(-0.5 * (spec.k_diag[0] * dx**2 + spec.k_diag[1] * dy**2))


def proximity_cost(p_a, p_b, spec: SharedCostSpec) -> float:
    """Proximity penalty between two planar positions."""
    return float(proximity_cost_scalars(p_a[0], p_a[1], p_b[0], p_b[1], spec))


@dataclass(frozen=True)
class PlayerSpec:
    """One vehicle: role, model, footprint, cost, bounds, private constraints."""

    id: str
    role: str  # "gpg" | "scripted"
    model: DynamicsModel
    geometry: VehicleGeometry
    x0: VehicleState
    bounds_lo: tuple[float, ...] = ()
    bounds_hi: tuple[float, ...] = ()
    cost: CostFamily | None = None
    theta: tuple[float, ...] | None = None
    constraints: tuple[Mapping, ...] = ()
    learn: bool = False

    def __post_init__(self):
        if self.role not in ("gpg", "scripted"):
            raise ConfigurationError(f"unknown role {self.role!r} for player {self.id}")
        nu = self.model.input_dim
        if self.role == "scripted":
            if nu != 0:
                raise ConfigurationError(f"scripted player {self.id} must be input-free")
            if self.theta is not None:
                raise ConfigurationError(f"scripted player {self.id} carries cost weights")
            return
        if self.cost is None:
            raise ConfigurationError(f"gpg player {self.id} needs a cost family")
        if self.theta is None or len(self.theta) != self.cost.theta_dim:
            raise ConfigurationError(
                f"player {self.id} needs {self.cost.theta_dim} cost weights"
            )
        if min(self.theta) < THETA_MIN:
            raise ConfigurationError(f"cost weights of {self.id} below {THETA_MIN}")
        if len(self.bounds_lo) != nu or len(self.bounds_hi) != nu:
            raise ConfigurationError(f"player {self.id} needs {nu} bound pairs")
        if any(lo > hi for lo, hi in zip(self.bounds_lo, self.bounds_hi)):
            raise ConfigurationError(f"player {self.id} has lb > ub")


# -- assembled problem ---------------------------------------------------------


@dataclass
class GPGProblem:
    """Potential, shared and private constraint graphs over stacked inputs."""

    n: int
    ts: float
    players: tuple[PlayerSpec, ...]
    shared_cost: SharedCostSpec
    graph: ExprGraph
    potential: Expr
    shared: list[Expr]
    private: dict[str, list[Expr]]
    private_soft: dict[str, list[Expr]]  # avoidance values; penalty-imposed
    layout: tuple[tuple[str, int, str], ...]  # decision coordinate -> (player, step, channel)
    decision_slots: np.ndarray  # graph slot per decision coordinate
    lb: np.ndarray
    ub: np.ndarray
    x0_slots: dict[str, dict[str, int]]  # player -> component -> slot
    theta_slots: dict[str, np.ndarray]
    theta_values: dict[str, np.ndarray]  # builder's view (own truth + beliefs)
    base_values: np.ndarray = field(repr=False)  # full slot vector defaults

    def __post_init__(self):
        self.layout_index = {key: i for i, key in enumerate(self.layout)}
        if len(self.layout_index) != len(self.layout):
            raise ConfigurationError("layout keys are not unique")
        self.player_positions = {
            p.id: np.array(
                [i for i, (pid, _, _) in enumerate(self.layout) if pid == p.id],
                dtype=np.int64,
            )
            for p in self.players
            if p.role == "gpg"
        }

    @property
    def gpg_players(self) -> list[PlayerSpec]:
        return [p for p in self.players if p.role == "gpg"]

    @property
    def num_decisions(self) -> int:
        return len(self.layout)

    def assignment(
        self,
        u: np.ndarray | None = None,
        x0: Mapping[str, VehicleState] | None = None,
        theta: Mapping[str, Sequence[float]] | None = None,
    ) -> np.ndarray:
        """Full slot vector: defaults, overridden by the given u / x0 / theta."""
        full = self.base_values.copy()
        if u is not None:
            full[self.decision_slots] = u
        if x0 is not None:
            for pid, state in x0.items():
                comp = self.x0_slots[pid]
                for name, value in zip(("px", "py", "psi", "v"), state.as_tuple()):
                    if name in comp:
                        full[comp[name]] = value
        if theta is not None:
            for pid, vals in theta.items():
                full[self.theta_slots[pid]] = np.asarray(vals, dtype=float)
        return full

    def u_of(self, player_id: str, u: np.ndarray) -> np.ndarray:
        return u[self.player_positions[player_id]]

    def first_input(self, player_id: str, u: np.ndarray) -> InputSample:
        spec = next(p for p in self.players if p.id == player_id)
        channels = input_channels(spec.model)
        vals = {
            ch: u[self.layout_index[(player_id, 0, ch)]] for ch in channels
        }
        return InputSample(a=vals.get("a", 0.0), delta=vals.get("delta", 0.0))


@dataclass
class GameParts:
    """Raw graph pieces produced by one `build_parts` pass."""

    x0_exprs: dict[str, dict[str, Expr]]
    u_exprs: dict[str, list[list[Expr]]]
    states: dict[str, list]
    potential: Expr
    shared: list[Expr]
    private: dict[str, list[Expr]]
    private_soft: dict[str, list[Expr]]


def _road_bound_exprs(desc: Mapping, corners, theta: Sequence[ExprLike]) -> list[ExprLike]:
    """Corner-y road constraints; bounds may reference a learnable weight."""

    def resolve(value):
        if isinstance(value, Mapping) and "theta_index" in value:
            return theta[int(value["theta_index"])]
        return float(value)

    y_min = resolve(desc["y_min_m"])
    y_max = resolve(desc["y_max_m"])
    out: list[ExprLike] = []
    for _, cy in corners:
        out.append(y_min - cy)
        out.append(cy - y_max)
    return out


def build_parts(
    g: ExprGraph,
    players: Sequence[PlayerSpec],
    shared_cost: SharedCostSpec,
    theta_exprs: Mapping[str, Sequence[Expr]],
    n: int,
    ts: float,
    prefix: str = "",
    only_cost_of: str | None = None,
) -> GameParts:
    """Write one game instance into `g` under the given slot-name prefix.

    With `only_cost_of`, the potential is replaced by that single player's
    cost (common term plus own player-specific term), which is what the
    potential-condition check compares against.
    """
    gpg = [p for p in players if p.role == "gpg"]
    scripted = [p for p in players if p.role == "scripted"]

    x0_exprs: dict[str, dict[str, Expr]] = {}
    states: dict[str, list] = {}
    u_exprs: dict[str, list[list[Expr]]] = {}
    for p in players:
        frozen = set(_frozen_x0_components(p.model))
        comp: dict[str, Expr] = {}
        vals = dict(zip(("px", "py", "psi", "v"), p.x0.as_tuple()))
        state0 = []
        for name in ("px", "py", "psi", "v"):
            if name in frozen:
                state0.append(vals[name])
            else:
                e = g.var(f"{prefix}x0/{p.id}/{name}")
                comp[name] = e
                state0.append(e)
        x0_exprs[p.id] = comp
        channels = input_channels(p.model)
        inputs = [
            [g.var(f"{prefix}u/{p.id}/{k}/{ch}") for ch in channels] for k in range(n)
        ]
        u_exprs[p.id] = inputs
        states[p.id] = rollout_scalars(p.model, tuple(state0), inputs, ts)

    def positions_at(k: int) -> dict[str, tuple]:
        return {pid: (s[k][0], s[k][1]) for pid, s in states.items()}

    def proximity_at(k: int) -> ExprLike:
        total: ExprLike = 0.0
        pos = positions_at(k)
        for i, a in enumerate(gpg):
            for b in gpg[i + 1 :]:
                total = total + proximity_cost_scalars(*pos[a.id], *pos[b.id], shared_cost)
            for s in scripted:
                total = total + proximity_cost_scalars(*pos[a.id], *pos[s.id], shared_cost)
        return total

    def stage_sum(k: int, pids: Sequence[str]) -> ExprLike:
        total: ExprLike = 0.0
        for p in gpg:
            if p.id not in pids:
                continue
            total = total + p.cost.stage(
                states[p.id][k], u_exprs[p.id][k], {pid: s[k] for pid, s in states.items()},
                theta_exprs[p.id],
            )
        return total

    def terminal_sum(pids: Sequence[str]) -> ExprLike:
        total: ExprLike = 0.0
        for p in gpg:
            if p.id not in pids:
                continue
            total = total + p.cost.terminal(
                states[p.id][n], {pid: s[n] for pid, s in states.items()}, theta_exprs[p.id]
            )
        return total

    cost_ids = [only_cost_of] if only_cost_of else [p.id for p in gpg]
    potential: ExprLike = 0.0
    for k in range(n):
        potential = potential + stage_sum(k, cost_ids) + proximity_at(k)
    potential = potential + terminal_sum(cost_ids) + proximity_at(n)
    if not isinstance(potential, Expr):
        potential = g.const(potential)

    shared: list[Expr] = []
    for i, a in enumerate(gpg):
        for b in gpg[i + 1 :]:
            for k in range(1, n + 1):
                pose_a = (states[a.id][k][0], states[a.id][k][1], states[a.id][k][2])
                pose_b = (states[b.id][k][0], states[b.id][k][1], states[b.id][k][2])
                shared.extend(
                    _as_exprs(g, pair_constraint_scalars(pose_a, a.geometry, pose_b, b.geometry))
                )

    private: dict[str, list[Expr]] = {}
    private_soft: dict[str, list[Expr]] = {}
    for p in gpg:
        smooth: list[ExprLike] = []
        soft: list[ExprLike] = []
        for k in range(1, n + 1):
            pose = (states[p.id][k][0], states[p.id][k][1], states[p.id][k][2])
            corners = body_points_scalars(*pose, p.geometry)[:4]
            for desc in p.constraints:
                if desc.get("kind") == "road_y":
                    smooth.extend(_road_bound_exprs(desc, corners, theta_exprs[p.id]))
                else:
                    raise ConfigurationError(f"unknown constraint kind {desc.get('kind')!r}")
            for s in scripted:
                pose_s = (states[s.id][k][0], states[s.id][k][1], states[s.id][k][2])
                # Clamped-margin products; their gradient vanishes on the
                # boundary, so they are imposed through the quadratic penalty
                # (the multiplier loop would stall on them) while smooth
                # constraints above go through the multiplier loop.
                soft.extend(pair_constraint_scalars(pose, p.geometry, pose_s, s.geometry))
        private[p.id] = _prune_constant_constraints(g, smooth, p.id)
        private_soft[p.id] = _prune_constant_constraints(g, soft, p.id)

    return GameParts(
        x0_exprs=x0_exprs,
        u_exprs=u_exprs,
        states=states,
        potential=potential,
        shared=shared,
        private=private,
        private_soft=private_soft,
    )


def _as_exprs(g: ExprGraph, values: Sequence[ExprLike]) -> list[Expr]:
    return [v if isinstance(v, Expr) else g.const(v) for v in values]


def _prune_constant_constraints(g: ExprGraph, values: Sequence[ExprLike], pid: str) -> list[Expr]:
    """Drop constraints that fold to a satisfied constant (e.g. a pair of
    vehicles whose frozen lateral positions can never overlap)."""
    kept: list[Expr] = []
    for v in values:
        if isinstance(v, Expr) and g.is_const(v):
            v = g.const_value(v)
        if isinstance(v, Expr):
            kept.append(v)
        elif v > 0.0:
            raise ConfigurationError(
                f"private constraint of {pid} is violated for every input"
            )
    return kept


def build_gpg(
    players: Sequence[PlayerSpec],
    shared_cost: SharedCostSpec,
    beliefs: Mapping[str, Sequence[float]] | None,
    n: int,
    ts: float,
    ego: str | None = None,
) -> GPGProblem:
    """Assemble the potential problem as seen by `ego` (or by an omniscient
    observer when `ego` is None, which is what metric evaluation uses)."""
    players = tuple(players)
    gpg = [p for p in players if p.role == "gpg"]
    if not gpg:
        raise ConfigurationError("player set contains no decision-making players")
    ids = [p.id for p in players]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate player ids")
    if ego is not None and ego not in [p.id for p in gpg]:
        raise ConfigurationError(f"ego {ego!r} is not a gpg player")

    theta_values: dict[str, np.ndarray] = {}
    for p in gpg:
        if ego is None or p.id == ego:
            theta_values[p.id] = np.asarray(p.theta, dtype=float)
        else:
            if beliefs is None or p.id not in beliefs:
                raise ConfigurationError(f"missing belief about player {p.id}")
            belief = np.asarray(beliefs[p.id], dtype=float)
            if belief.shape != (p.cost.theta_dim,):
                raise ConfigurationError(f"belief about {p.id} has wrong length")
            theta_values[p.id] = belief

    g = ExprGraph()
    theta_exprs = {
        p.id: [g.var(f"theta/{p.id}/{i}") for i in range(p.cost.theta_dim)] for p in gpg
    }
    parts = build_parts(g, players, shared_cost, theta_exprs, n, ts)

    layout: list[tuple[str, int, str]] = []
    slots: list[int] = []
    lb: list[float] = []
    ub: list[float] = []
    for p in gpg:
        channels = input_channels(p.model)
        for k in range(n):
            for ci, ch in enumerate(channels):
                layout.append((p.id, k, ch))
                slots.append(g.slot_of(f"u/{p.id}/{k}/{ch}"))
                lb.append(p.bounds_lo[ci])
                ub.append(p.bounds_hi[ci])

    x0_slots = {
        pid: {name: g.slot_of(f"x0/{pid}/{name}") for name in comp}
        for pid, comp in parts.x0_exprs.items()
    }
    theta_slots = {
        pid: np.array([g.slot_of(f"theta/{pid}/{i}") for i in range(len(exprs))])
        for pid, exprs in theta_exprs.items()
    }

    base = np.zeros(g.num_vars)
    for p in players:
        vals = dict(zip(("px", "py", "psi", "v"), p.x0.as_tuple()))
        for name, slot in x0_slots[p.id].items():
            base[slot] = vals[name]
    for pid, vals in theta_values.items():
        base[theta_slots[pid]] = vals

    return GPGProblem(
        n=n,
        ts=ts,
        players=players,
        shared_cost=shared_cost,
        graph=g,
        potential=parts.potential,
        shared=parts.shared,
        private=parts.private,
        private_soft=parts.private_soft,
        layout=tuple(layout),
        decision_slots=np.asarray(slots, dtype=np.int64),
        lb=np.asarray(lb),
        ub=np.asarray(ub),
        x0_slots=x0_slots,
        theta_slots=theta_slots,
        theta_values=theta_values,
        base_values=base,
    )


def verify_potential_condition(
    p: GPGProblem,
    u: np.ndarray,
    player_id: str,
    x0: Mapping[str, VehicleState] | None = None,
) -> float:
    """Max |dP/du_own - dJ_own/du_own| over the player's input coordinates.

    J_own is rebuilt as a separate graph (common proximity term plus the
    player's own cost), so this is an independent check of the potential
    decomposition, not an identity of the builder.
    """
    full = p.assignment(u=u, x0=x0)
    ev = eg.Evaluator(p.graph)
    _, grad_full = ev.value_and_grad(full, p.potential.node)
    own_positions = p.player_positions[player_id]
    own_slots = p.decision_slots[own_positions]
    grad_p = grad_full[own_slots]

    gj = ExprGraph()
    spec_by_id = {pl.id: pl for pl in p.players}
    theta_exprs = {
        pl.id: [gj.var(f"theta/{pl.id}/{i}") for i in range(pl.cost.theta_dim)]
        for pl in p.gpg_players
    }
    parts = build_parts(
        gj, p.players, p.shared_cost, theta_exprs, p.n, p.ts, only_cost_of=player_id
    )
    names = p.graph.var_names
    packed = {name: full[p.graph.slot_of(name)] for name in names if name in gj._vars}
    xj = gj.pack(packed)
    _, grad_j_full = eg.Evaluator(gj).value_and_grad(xj, parts.potential.node)
    spec = spec_by_id[player_id]
    channels = input_channels(spec.model)
    # Same k-major coordinate order as the layout slice above.
    grad_j = np.array(
        [
            grad_j_full[gj.slot_of(f"u/{player_id}/{k}/{ch}")]
            for k in range(p.n)
            for ch in channels
        ]
    )
    return float(np.max(np.abs(grad_p - grad_j)))


def stage_potential(
    p: GPGProblem,
    states: Mapping[str, VehicleState],
    inputs: Mapping[str, InputSample | None],
) -> float:
    """One stage summand of the potential at realized states and inputs,
    always evaluated at the players' ground-truth cost weights."""
    gpg = p.gpg_players
    scripted = [pl for pl in p.players if pl.role == "scripted"]
    state_tuples = {pid: s.as_tuple() for pid, s in states.items()}
    total = 0.0
    for pl in gpg:
        u = inputs.get(pl.id)
        u_tuple = (0.0, 0.0) if u is None else u.as_tuple()
        total += float(
            pl.cost.stage(state_tuples[pl.id], u_tuple, state_tuples, np.asarray(pl.theta))
        )
    for i, a in enumerate(gpg):
        for b in gpg[i + 1 :]:
            total += proximity_cost(
                (states[a.id].px, states[a.id].py), (states[b.id].px, states[b.id].py), p.shared_cost
            )
        for s in scripted:
            total += proximity_cost(
                (states[a.id].px, states[a.id].py), (states[s.id].px, states[s.id].py), p.shared_cost
            )
    return total


def terminal_potential(p: GPGProblem, states: Mapping[str, VehicleState]) -> float:
    """Terminal summand of the potential at ground-truth cost weights."""
    gpg = p.gpg_players
    scripted = [pl for pl in p.players if pl.role == "scripted"]
    state_tuples = {pid: s.as_tuple() for pid, s in states.items()}
    total = 0.0
    for pl in gpg:
        total += float(pl.cost.terminal(state_tuples[pl.id], state_tuples, np.asarray(pl.theta)))
    for i, a in enumerate(gpg):
        for b in gpg[i + 1 :]:
            total += proximity_cost(
                (states[a.id].px, states[a.id].py), (states[b.id].px, states[b.id].py), p.shared_cost
            )
        for s in scripted:
            total += proximity_cost(
                (states[a.id].px, states[a.id].py), (states[s.id].px, states[s.id].py), p.shared_cost
            )
    return total
