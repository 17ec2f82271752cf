"""Online estimation of other drivers' cost weights from observed actions.

Each update solves a small NLP: choose parameters, a full input profile, and
multipliers so that the first-order optimality conditions of the penalized
potential problem hold as tightly as possible while the profile's first
stage matches what the other drivers actually did. The stationarity defect
enters the objective as a squared norm; primal feasibility and the
complementarity coupling are imposed by the same multiplier loop the
controller uses, and simple bounds (multiplier signs, weight floors) are
handled by projection.

The stationarity gradient is materialized symbolically (derivative nodes in
the same graph), so the NLP objective is an ordinary expression and the
whole estimation tape is built once per agent and re-bound every step.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import exprgraph as eg
from .dynamics import VehicleState
from .exprgraph import Expr, ExprGraph
from .game import THETA_MIN, GPGProblem, PlayerSpec, SharedCostSpec, build_parts, input_channels
from .solver import AlmTape, ConstrainedModel, SolverConfig, _alm_engine

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearningConfig:
    """Window length, regularization, and estimation-solver targets."""

    enabled: bool = True
    window: int = 1  # L: number of past observations kept
    xi: float = 0.5  # regularization weight on parameter changes
    tol: float = 1e-3
    feas: float = 1e-3  # primal feasibility target for g <= 0
    comp_tol: float = 1e-2  # complementarity equality target (scalar mode sums many terms)
    comp_mode: str = "scalar"  # "scalar" | "per-component"
    max_inner: int = 400
    max_outer: int = 4
    rho0: float = 10.0
    rho_factor: float = 10.0
    lbfgs_mem: int = 45
    accept_residual: float = 1e-3  # skip the solve when the window is
    # already this consistent (stationarity defect at the warm point)
    inactive_margin: float = 1e-2  # pin multipliers of constraints this far
    # inside the feasible region
    y_cap: float = 1e4  # box on multiplier estimates; the flat directions of
    # the stationarity system are otherwise unbounded
    theta_cap: float = 1e3  # upper box on learned weights

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.xi < 0.0:
            raise ValueError("xi must be nonnegative")
        if self.comp_mode not in ("scalar", "per-component"):
            raise ValueError(f"unknown comp_mode {self.comp_mode!r}")


@dataclass
class Observation:
    """What one agent saw at one step: the others' applied first inputs, the
    full state, and the penalty weights its own solve ended with."""

    t: int
    u_obs: dict[str, np.ndarray]
    x_t: dict[str, VehicleState]
    sigma_tilde: np.ndarray


@dataclass
class ParameterEstimate:
    """Current belief about the observed players plus the update window."""

    theta: dict[str, np.ndarray]
    window: deque = field(default_factory=deque)
    xi: dict[str, np.ndarray] = field(default_factory=dict)


class Estimator:
    """Estimation NLP for one observing agent, built once and re-bound.

    The tape holds `window` replicas of the penalized-game KKT system, each
    with its own input/multiplier/initial-state/penalty slots, sharing one
    set of parameter slots for the observed players.
    """

    def __init__(
        self,
        players: Sequence[PlayerSpec],
        shared_cost: SharedCostSpec,
        n: int,
        ts: float,
        ego: str,
        cfg: LearningConfig,
        reference: GPGProblem,
    ):
        self.players = tuple(players)
        self.cfg = cfg
        self.ego = ego
        self.n = n
        self.reference = reference
        gpg = [p for p in players if p.role == "gpg"]
        self.targets = [p for p in gpg if p.id != ego]
        if not self.targets:
            raise ValueError(f"agent {ego} has nobody to observe")

        for p in gpg:
            if not all(math.isfinite(v) for v in (*p.bounds_lo, *p.bounds_hi)):
                raise ValueError("estimation requires finite input bounds")

        g = ExprGraph()
        theta_exprs = {
            p.id: [g.var(f"theta/{p.id}/{i}") for i in range(p.cost.theta_dim)] for p in gpg
        }
        theta_prev = {
            p.id: [g.var(f"theta_prev/{p.id}/{i}") for i in range(p.cost.theta_dim)]
            for p in self.targets
        }

        objective = None
        self.entries = []
        ineq: list[Expr] = []
        eq: list[Expr] = []
        expected_sigma = len(reference.shared) + sum(
            len(reference.private_soft[p.id]) for p in gpg
        )
        for l in range(cfg.window):
            entry = self._build_entry(g, theta_exprs, shared_cost, n, ts, prefix=f"obs{l}/")
            if entry["sigma_slots"].size != expected_sigma:
                raise ValueError("estimation tape disagrees with the game problem")
            self.entries.append(entry)
            objective = entry["residual"] if objective is None else objective + entry["residual"]
            ineq.extend(entry["g_exprs"])
            if cfg.comp_mode == "scalar":
                eq.append(entry["comp_scalar"])
            else:
                eq.extend(entry["comp_terms"])

        for p in self.targets:
            for th, th_prev in zip(theta_exprs[p.id], theta_prev[p.id]):
                objective = objective + cfg.xi * (th - th_prev) ** 2
        self.objective = objective
        # The raw objective's magnitude swings by orders of magnitude with
        # the belief error; the solver minimizes a normalized copy so its
        # tolerances behave like relative ones.
        scale = g.var("est/objective_scale")
        scaled_objective = objective * scale

        # Decision order: target parameters, then per-entry free inputs, then
        # per-entry multipliers.
        dec_slots: list[int] = []
        lb: list[float] = []
        ub: list[float] = []
        self.theta_positions: dict[str, np.ndarray] = {}
        pos = 0
        for p in self.targets:
            idx = []
            for i in range(p.cost.theta_dim):
                dec_slots.append(g.slot_of(f"theta/{p.id}/{i}"))
                lb.append(THETA_MIN)
                ub.append(cfg.theta_cap)
                idx.append(pos)
                pos += 1
            self.theta_positions[p.id] = np.array(idx, dtype=np.int64)
        for entry in self.entries:
            entry["u_free_positions"] = np.arange(pos, pos + len(entry["u_free_slots"]))
            dec_slots.extend(entry["u_free_slots"])
            lb.extend(entry["u_free_lb"])
            ub.extend(entry["u_free_ub"])
            pos += len(entry["u_free_slots"])
        for entry in self.entries:
            entry["y_positions"] = np.arange(pos, pos + len(entry["y_slots"]))
            dec_slots.extend(entry["y_slots"])
            lb.extend([0.0] * len(entry["y_slots"]))
            ub.extend([cfg.y_cap] * len(entry["y_slots"]))
            pos += len(entry["y_slots"])

        self.model = ConstrainedModel(
            graph=g,
            objective=scaled_objective,
            ineq=ineq,
            eq=eq,
            decision_slots=np.asarray(dec_slots, dtype=np.int64),
            lb=np.asarray(lb),
            ub=np.asarray(ub),
        )
        self.tape = AlmTape(self.model, tag="est")
        self.scale_slot = g.slot_of("est/objective_scale")
        self.theta_slots = {
            p.id: np.array(
                [g.slot_of(f"theta/{p.id}/{i}") for i in range(p.cost.theta_dim)],
                dtype=np.int64,
            )
            for p in gpg
        }
        self.theta_prev_slots = {
            p.id: np.array(
                [g.slot_of(f"theta_prev/{p.id}/{i}") for i in range(p.cost.theta_dim)],
                dtype=np.int64,
            )
            for p in self.targets
        }
        self.full = np.zeros(g.num_vars)
        spec_by_id = {p.id: p for p in players}
        for pid, slots in self.theta_slots.items():
            if pid == ego:
                self.full[slots] = np.asarray(spec_by_id[pid].theta)

    def _build_entry(self, g, theta_exprs, shared_cost, n, ts, prefix):
        """One observation replica: game graphs, multipliers, KKT residual."""
        parts = build_parts(g, self.players, shared_cost, theta_exprs, n, ts, prefix=prefix)
        gpg = [p for p in self.players if p.role == "gpg"]
        ref = self.reference

        u_flat: list[Expr] = []
        u_slots: list[int] = []
        u_lb: list[float] = []
        u_ub: list[float] = []
        pinned_mask: list[bool] = []
        for p in gpg:
            channels = input_channels(p.model)
            for k in range(n):
                for ci, ch in enumerate(channels):
                    e = g.var(f"{prefix}u/{p.id}/{k}/{ch}")
                    u_flat.append(e)
                    u_slots.append(g.slot_of(f"{prefix}u/{p.id}/{k}/{ch}"))
                    u_lb.append(p.bounds_lo[ci])
                    u_ub.append(p.bounds_hi[ci])
                    pinned_mask.append(p.id != self.ego and k == 0)
        pinned = np.asarray(pinned_mask)
        u_slots_arr = np.asarray(u_slots, dtype=np.int64)

        penalized = list(parts.shared)
        for p in gpg:
            penalized.extend(parts.private_soft[p.id])
        sigma_exprs = [g.var(f"{prefix}sigma/{j}") for j in range(len(penalized))]
        pen = parts.potential
        for s_expr, h_expr in zip(sigma_exprs, penalized):
            pen = pen + 0.5 * s_expr * h_expr**2

        # g(u; theta): private smooth constraints, then both box faces.
        g_exprs: list[Expr] = []
        for p in gpg:
            g_exprs.extend(parts.private[p.id])
        for e, lo, hi in zip(u_flat, u_lb, u_ub):
            if math.isfinite(hi):
                g_exprs.append(e - hi)
        for e, lo, hi in zip(u_flat, u_lb, u_ub):
            if math.isfinite(lo):
                g_exprs.append(lo - e)

        y_exprs = [g.var(f"{prefix}y/{j}") for j in range(len(g_exprs))]
        lagrangian = pen
        for ye, ge in zip(y_exprs, g_exprs):
            lagrangian = lagrangian + ye * ge

        grad_u = g.grad_exprs(lagrangian, u_flat)
        residual = None
        for de in grad_u:
            term = de**2
            residual = term if residual is None else residual + term
        if not isinstance(residual, Expr):
            residual = g.const(residual)

        comp_terms = [ye * ge for ye, ge in zip(y_exprs, g_exprs)]
        comp_scalar = None
        for t in comp_terms:
            comp_scalar = t if comp_scalar is None else comp_scalar + t
        if not isinstance(comp_scalar, Expr):
            comp_scalar = g.const(0.0)

        free = ~pinned
        return {
            "prefix": prefix,
            "x0_names": {
                pid: dict(comp) for pid, comp in parts.x0_exprs.items()
            },
            "u_slots": u_slots_arr,
            "u_lb": np.asarray(u_lb),
            "u_ub": np.asarray(u_ub),
            "pinned": pinned,
            "u_free_slots": [s for s, m in zip(u_slots, pinned_mask) if not m],
            "u_free_lb": [v for v, m in zip(u_lb, pinned_mask) if not m],
            "u_free_ub": [v for v, m in zip(u_ub, pinned_mask) if not m],
            "free": free,
            "sigma_slots": np.array(
                [g.slot_of(f"{prefix}sigma/{j}") for j in range(len(penalized))],
                dtype=np.int64,
            ),
            "y_slots": [g.slot_of(f"{prefix}y/{j}") for j in range(len(g_exprs))],
            "num_private": sum(len(parts.private[p.id]) for p in gpg),
            "g_exprs": g_exprs,
            "comp_terms": comp_terms,
            "comp_scalar": comp_scalar,
            "residual": residual,
        }

    # -- binding helpers ---------------------------------------------------

    def _bind_entry(self, entry, obs: Observation) -> None:
        g = self.model.graph
        for pid, comps in entry["x0_names"].items():
            state = obs.x_t[pid]
            vals = dict(zip(("px", "py", "psi", "v"), state.as_tuple()))
            for name in comps:
                self.full[g.slot_of(f"{entry['prefix']}x0/{pid}/{name}")] = vals[name]
        sig = np.asarray(obs.sigma_tilde, dtype=float)
        if sig.shape != entry["sigma_slots"].shape:
            raise ValueError("sigma_tilde has wrong length for this problem")
        self.full[entry["sigma_slots"]] = sig

    def _pinned_values(self, entry, obs: Observation) -> np.ndarray:
        """Observed first inputs in layout order, clamped to bounds."""
        vals = np.zeros(int(np.sum(entry["pinned"])))
        i = 0
        gpg = [p for p in self.players if p.role == "gpg"]
        for p in gpg:
            if p.id == self.ego:
                continue
            u = np.asarray(obs.u_obs[p.id], dtype=float)
            lo = np.asarray(p.bounds_lo)
            hi = np.asarray(p.bounds_hi)
            clamped = np.clip(u, lo, hi)
            if not np.array_equal(clamped, u):
                log.warning("observed input of %s outside believed bounds; clamped", p.id)
            vals[i : i + u.size] = clamped
            i += u.size
        return vals

    def num_decisions(self) -> int:
        return int(self.model.decision_slots.size)

    # -- spec operations -----------------------------------------------------

    def residual_at(
        self,
        theta: Mapping[str, Sequence[float]],
        u: np.ndarray,
        y: np.ndarray,
        sigma_tilde: np.ndarray,
        x_t: Mapping[str, VehicleState],
    ) -> float:
        """Stationarity defect (squared norm of the input gradient of the
        penalized Lagrangian), excluding the regularizer."""
        entry = self.entries[0]
        obs = Observation(t=-1, u_obs={}, x_t=dict(x_t), sigma_tilde=np.asarray(sigma_tilde))
        self._bind_entry(entry, obs)
        for pid, vals in theta.items():
            self.full[self.theta_slots[pid]] = np.asarray(vals, dtype=float)
        self.full[entry["u_slots"]] = np.asarray(u, dtype=float)
        self.full[np.asarray(entry["y_slots"], dtype=np.int64)] = np.asarray(y, dtype=float)
        ev = self.tape.evaluator
        return float(ev.forward(self.full)[entry["residual"].node])

    def update(
        self,
        est: ParameterEstimate,
        warm_u: np.ndarray,
        warm_y: np.ndarray,
    ) -> dict[str, np.ndarray]:
        """One estimation solve over the current window; returns new belief.

        `warm_u` and `warm_y` come from the agent's own game solve at the
        newest observation (full multiplier vector: private constraints then
        upper and lower box faces).
        """
        if not est.window:
            raise ValueError("observation window is empty")
        cfg = self.cfg
        window = list(est.window)[-cfg.window :]
        # Bind every entry; when the window is still filling, repeat the
        # oldest observation so all replicas are well-defined.
        while len(window) < cfg.window:
            window = [window[0]] + window
        for entry, obs in zip(self.entries, window):
            self._bind_entry(entry, obs)
        for pid, vals in est.theta.items():
            self.full[self.theta_slots[pid]] = np.asarray(vals, dtype=float)
            self.full[self.theta_prev_slots[pid]] = np.asarray(vals, dtype=float)

        ndec = self.num_decisions()
        z0 = np.zeros(ndec)
        for pid, positions in self.theta_positions.items():
            z0[positions] = np.asarray(est.theta[pid], dtype=float)
        warm_u = np.asarray(warm_u, dtype=float)
        warm_y = np.asarray(warm_y, dtype=float)
        for entry, obs in zip(self.entries, window):
            pin_vals = self._pinned_values(entry, obs)
            u_entry = warm_u.copy()
            u_entry[entry["pinned"]] = pin_vals
            self.full[entry["u_slots"]] = u_entry
            z0[entry["u_free_positions"]] = u_entry[entry["free"]]
            if warm_y.shape != (len(entry["y_slots"]),):
                raise ValueError("warm multiplier vector has wrong length")
            z0[entry["y_positions"]] = np.maximum(warm_y, 0.0)

        solver_cfg = SolverConfig(
            tol=cfg.tol,
            feas=max(1.0, 10.0 * cfg.tol),  # no penalized block here; validation only
            alm_tol=max(cfg.feas, cfg.comp_tol),
            rho0=cfg.rho0,
            rho_factor=cfg.rho_factor,
            lbfgs_mem=cfg.lbfgs_mem,
            max_inner=cfg.max_inner,
            max_outer=cfg.max_outer,
        )
        ev = self.tape.evaluator
        obj_node = self.objective.node

        self.full[self.tape.rho_slot] = solver_cfg.rho0
        self.full[self.scale_slot] = 1.0
        self.full[self.model.decision_slots] = z0
        vals = ev.forward(self.full)
        f_warm = float(vals[obj_node])
        if f_warm <= cfg.accept_residual:
            # The window is already explained to solver precision.
            return {pid: np.asarray(v, dtype=float).copy() for pid, v in est.theta.items()}
        self.full[self.scale_slot] = 1.0 / (1.0 + abs(f_warm))

        # Multipliers of strictly inactive constraints are zero at any
        # consistent point near the warm trajectory; pin them.
        for entry in self.entries:
            g_vals = vals[[e.node for e in entry["g_exprs"]]]
            inactive = g_vals < -cfg.inactive_margin
            positions = entry["y_positions"][inactive]
            self.model.ub[positions] = 0.0
            self.model.ub[entry["y_positions"][~inactive]] = cfg.y_cap
            z0[positions] = 0.0

        result = _alm_engine(self.tape, self.full, z0, np.zeros(len(self.model.ineq)),
                             np.zeros(len(self.model.eq)), solver_cfg)
        self.full[self.model.decision_slots] = result.x
        f_final = float(ev.forward(self.full)[obj_node])

        if not math.isfinite(f_final) or f_final > f_warm + 1e-9:
            # Conservative fallback: keep the previous estimate.
            log.warning(
                "estimation solve did not improve the objective (%.3e > %.3e); keeping belief",
                f_final,
                f_warm,
            )
            return {pid: np.asarray(v, dtype=float).copy() for pid, v in est.theta.items()}

        out: dict[str, np.ndarray] = {}
        for pid, positions in self.theta_positions.items():
            out[pid] = np.maximum(result.x[positions], THETA_MIN)
        return out


def build_estimation_problem(
    players: Sequence[PlayerSpec],
    shared_cost: SharedCostSpec,
    n: int,
    ts: float,
    ego: str,
    cfg: LearningConfig,
    reference: GPGProblem,
) -> Estimator:
    """Assemble the estimation NLP for one observing agent."""
    return Estimator(players, shared_cost, n, ts, ego, cfg, reference)


def update_estimate(
    estimator: Estimator,
    est: ParameterEstimate,
    warm_u: np.ndarray,
    warm_y: np.ndarray,
) -> dict[str, np.ndarray]:
    """Solve the estimation NLP and advance the belief (window unchanged)."""
    return estimator.update(est, warm_u, warm_y)


def stack_multipliers(solution) -> np.ndarray:
    """Order a game Solution's multipliers the way the estimation tape
    expects: private constraints, then upper box faces, then lower."""
    return np.concatenate([solution.y_bar, solution.y_upper, solution.y_lower])
