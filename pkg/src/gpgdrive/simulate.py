"""Closed-loop receding-horizon simulation with per-agent beliefs, optional
online learning, metrics, and file outputs.

Each decision-making vehicle owns its view of the game (its own true cost
weights, its current belief about the others), solves the joint potential
problem each step, and applies only its own first input. Scripted vehicles
advance by their models. Observing agents then update their beliefs from the
others' applied inputs before the next step.

All randomness-free: a run is a pure function of the scenario configuration,
so repeated runs produce byte-identical outputs. Wall-clock timings are
recorded for diagnostics but kept out of the deterministic trajectory file.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .collision import pair_constraints
from .dynamics import InputSample, VehicleState, body_points, rollout, step
from .game import build_gpg, input_channels, stage_potential
from .learning import Estimator, Observation, ParameterEstimate, stack_multipliers
from .scenario import ScenarioConfig
from .solver import GPGSolver


@dataclass
class StepRecord:
    """Everything recorded at one executed step."""

    t: int
    states: dict[str, VehicleState]
    inputs: dict[str, InputSample | None]
    solve_s: dict[str, float]
    learn_s: dict[str, float]
    beliefs: dict[str, dict[str, np.ndarray]]
    violation: float  # max pairwise separation value between gpg players
    stage_cost: float  # realized stage summand of the potential
    status: dict[str, str]
    plans: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("step index must be nonnegative")


@dataclass
class RunResult:
    records: list[StepRecord]
    summary: dict


class Agent:
    """One decision-making vehicle: problem view, solver, optional learner."""

    def __init__(self, pid: str, cfg: ScenarioConfig):
        self.id = pid
        self.cfg = cfg
        self.problem = build_gpg(
            cfg.players, cfg.shared_cost, cfg.beliefs[pid], cfg.n, cfg.ts, ego=pid
        )
        self.solver = GPGSolver(self.problem, cfg.solver)
        self.belief = {k: np.asarray(v, dtype=float).copy() for k, v in cfg.beliefs[pid].items()}
        self.warm: tuple | None = None
        self.last_solution = None
        spec = next(p for p in cfg.players if p.id == pid)
        self.learns = cfg.learning.enabled and spec.learn and len(self.belief) > 0
        if self.learns:
            self.estimator = Estimator(
                cfg.players, cfg.shared_cost, cfg.n, cfg.ts, pid, cfg.learning, self.problem
            )
            self.estimate = ParameterEstimate(
                theta={k: v.copy() for k, v in self.belief.items()}
            )

    def solve(self, states: Mapping[str, VehicleState]):
        t0 = time.perf_counter()
        sol = self.solver.solve(warm=self.warm, x0=dict(states), theta=self.belief)
        wall = time.perf_counter() - t0
        self.last_solution = sol
        self.warm = self._shifted_warm(sol)
        return sol, wall

    def _shifted_warm(self, sol):
        """Shift the plan one stage (repeat the final input); keep y, sigma."""
        p = self.problem
        u = sol.u_bar.copy()
        for pl in p.gpg_players:
            pos = p.player_positions[pl.id]
            nu = len(input_channels(pl.model))
            blk = u[pos].reshape(p.n, nu).copy()
            blk[:-1] = blk[1:]
            u[pos] = blk.ravel()
        return (u, sol.y_bar, sol.sigma)

    def first_input(self) -> InputSample:
        return self.problem.first_input(self.id, self.last_solution.u_bar)

    def plan_positions(self, x0: VehicleState) -> np.ndarray:
        """Own predicted CM positions over the horizon, for rendering."""
        p = self.problem
        spec = next(pl for pl in p.players if pl.id == self.id)
        u = p.u_of(self.id, self.last_solution.u_bar)
        nu = len(input_channels(spec.model))
        seq = []
        for k in range(p.n):
            vals = u[k * nu : (k + 1) * nu]
            seq.append(InputSample(a=vals[0], delta=vals[1] if nu > 1 else 0.0))
        states = rollout(spec.model, x0, seq, p.ts)
        return np.array([[s.px, s.py] for s in states])

    def observe_and_learn(
        self, t: int, states: Mapping[str, VehicleState], applied: Mapping[str, InputSample]
    ) -> float:
        """Record the others' applied inputs and update the belief."""
        u_obs = {}
        for other in self.belief:
            spec = next(p for p in self.cfg.players if p.id == other)
            channels = input_channels(spec.model)
            u = applied[other]
            u_obs[other] = np.array([getattr(u, ch) for ch in channels])
        obs = Observation(
            t=t, u_obs=u_obs, x_t=dict(states), sigma_tilde=self.last_solution.sigma
        )
        self.estimate.window.append(obs)
        while len(self.estimate.window) > self.cfg.learning.window:
            self.estimate.window.popleft()
        t0 = time.perf_counter()
        theta_new = self.estimator.update(
            self.estimate, self.last_solution.u_bar, stack_multipliers(self.last_solution)
        )
        wall = time.perf_counter() - t0
        self.estimate.theta = theta_new
        self.belief = {k: v.copy() for k, v in theta_new.items()}
        return wall


def realized_violation(cfg: ScenarioConfig, states: Mapping[str, VehicleState]) -> float:
    """Worst pairwise separation value between decision-making vehicles."""
    gpg = [p for p in cfg.players if p.role == "gpg"]
    worst = 0.0
    for i, a in enumerate(gpg):
        for b in gpg[i + 1 :]:
            vals = pair_constraints(states[a.id], a.geometry, states[b.id], b.geometry)
            worst = max(worst, float(np.max(vals)))
    return worst


def run_closed_loop(cfg: ScenarioConfig, collect_plans: bool = False) -> RunResult:
    """Simulate `cfg.steps` receding-horizon steps; returns all records."""
    agents = [Agent(pid, cfg) for pid in cfg.gpg_ids()]
    metric_problem = build_gpg(cfg.players, cfg.shared_cost, None, cfg.n, cfg.ts, ego=None)
    spec_by_id = {p.id: p for p in cfg.players}

    states: dict[str, VehicleState] = {p.id: p.x0 for p in cfg.players}
    records: list[StepRecord] = []
    for t in range(cfg.steps):
        solve_s: dict[str, float] = {}
        status: dict[str, str] = {}
        plans: dict[str, np.ndarray] = {}
        applied: dict[str, InputSample] = {}
        for agent in agents:
            sol, wall = agent.solve(states)
            solve_s[agent.id] = wall
            status[agent.id] = sol.status
            applied[agent.id] = agent.first_input()
            if collect_plans:
                plans[agent.id] = agent.plan_positions(states[agent.id])

        inputs: dict[str, InputSample | None] = {
            p.id: applied.get(p.id) for p in cfg.players
        }
        record = StepRecord(
            t=t,
            states=dict(states),
            inputs=inputs,
            solve_s=solve_s,
            learn_s={},
            beliefs={a.id: {k: v.copy() for k, v in a.belief.items()} for a in agents},
            violation=realized_violation(cfg, states),
            stage_cost=stage_potential(metric_problem, states, inputs),
            status=status,
            plans=plans,
        )

        if cfg.learning.enabled:
            for agent in agents:
                if agent.learns:
                    record.learn_s[agent.id] = agent.observe_and_learn(t, states, applied)
        records.append(record)

        new_states = {}
        for p in cfg.players:
            new_states[p.id] = step(p.model, states[p.id], inputs[p.id], cfg.ts)
        states = new_states

    return RunResult(records=records, summary=metrics_summary(records))


def metrics_summary(records: list[StepRecord]) -> dict:
    """Aggregate a run: closed-loop potential, worst violation, timing."""
    potential = sum(r.stage_cost for r in records)
    violation = max((r.violation for r in records), default=0.0)
    gpg_times = [w for r in records for w in r.solve_s.values()]
    learn_times = [w for r in records for w in r.learn_s.values()]
    status = "ok"
    for r in records:
        if any(s != "kkt" for s in r.status.values()):
            status = "solver-degraded"
            break
    return {
        "closed_loop_potential": potential,
        "max_violation": violation,
        "gpg_ms": {
            "max": 1e3 * max(gpg_times, default=0.0),
            "avg": 1e3 * (sum(gpg_times) / len(gpg_times)) if gpg_times else 0.0,
        },
        "learn_ms": {
            "max": 1e3 * max(learn_times, default=0.0),
            "avg": 1e3 * (sum(learn_times) / len(learn_times)) if learn_times else 0.0,
        },
        "status": status,
    }


def metrics(run: RunResult) -> dict:
    """Recompute the summary from the records (pure aggregation)."""
    return metrics_summary(run.records)


# -- file outputs -------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_outputs(run: RunResult, out_dir: str | Path, cfg: ScenarioConfig, svg: bool = False) -> list[Path]:
    """Write trajectory.csv, timings.csv, metrics.json, estimates.csv and
    (optionally) SVG frames; returns the created paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []

        traj = out / "trajectory.csv"
        lines = ["t,id,px,py,psi,v,a,delta,violation"]
        for r in run.records:
            for p in cfg.players:
                s = r.states[p.id]
                u = r.inputs.get(p.id) or InputSample(0.0, 0.0)
                lines.append(
                    f"{r.t},{p.id},{_fmt(s.px)},{_fmt(s.py)},{_fmt(s.psi)},{_fmt(s.v)},"
                    f"{_fmt(u.a)},{_fmt(u.delta)},{_fmt(r.violation)}"
                )
        traj.write_text("\n".join(lines) + "\n")
        written.append(traj)

        # Wall-clock diagnostics live in their own file so the trajectory
        # stays byte-reproducible across runs.
        tim = out / "timings.csv"
        lines = ["t,agent,solve_ms,learn_ms"]
        for r in run.records:
            for aid, wall in r.solve_s.items():
                learn = r.learn_s.get(aid, 0.0)
                lines.append(f"{r.t},{aid},{1e3 * wall:.3f},{1e3 * learn:.3f}")
        tim.write_text("\n".join(lines) + "\n")
        written.append(tim)

        met = out / "metrics.json"
        met.write_text(json.dumps(run.summary, indent=2, sort_keys=True) + "\n")
        written.append(met)

        est = out / "estimates.csv"
        dim = 0
        for r in run.records:
            for block in r.beliefs.values():
                for vec in block.values():
                    dim = max(dim, len(vec))
        header = "t,agent,player" + "".join(f",theta_{i}" for i in range(dim))
        lines = [header]
        for r in run.records:
            for aid, block in r.beliefs.items():
                for pid, vec in block.items():
                    cells = [str(r.t), aid, pid] + [_fmt(v) for v in vec]
                    cells += [""] * (dim - len(vec))
                    lines.append(",".join(cells))
        est.write_text("\n".join(lines) + "\n")
        written.append(est)

        if svg:
            frames = out / "frames"
            frames.mkdir(exist_ok=True)
            for r in run.records:
                fp = frames / f"step_{r.t:04d}.svg"
                fp.write_text(render_frame(r, cfg))
                written.append(fp)
        return written
    except OSError as e:
        raise OSError(f"cannot write outputs under {out}: {e}") from e


_COLORS = {"red": "#d33", "yellow": "#db3", "blue": "#36c", "white": "#eee"}


def render_frame(record: StepRecord, cfg: ScenarioConfig) -> str:
    """Top-down SVG: road band, lane markings, footprints, open-loop plans."""
    xs = [s.px for s in record.states.values()]
    x_lo, x_hi = min(xs) - 10.0, max(xs) + 25.0
    road = cfg.road
    y_lo = float(road.get("y_min_m", -1.5))
    y_hi = float(road.get("y_max_m", 4.5))
    scale = 12.0
    width = (x_hi - x_lo) * scale
    height = (y_hi - y_lo + 4.0) * scale

    def sx(x):
        return (x - x_lo) * scale

    def sy(y):
        return height - (y - y_lo + 2.0) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0f}" height="{height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="#fafafa"/>',
        f'<rect x="0" y="{sy(y_hi):.1f}" width="{width:.0f}" height="{(y_hi - y_lo) * scale:.1f}" fill="#ddd"/>',
    ]
    for lane_y in road.get("lane_centers_m", []):
        half = float(road.get("lane_width_m", 3.0)) / 2.0
        for edge in (lane_y - half, lane_y + half):
            if y_lo < edge < y_hi:
                parts.append(
                    f'<line x1="0" y1="{sy(edge):.1f}" x2="{width:.0f}" y2="{sy(edge):.1f}" '
                    'stroke="#fff" stroke-width="1.5" stroke-dasharray="14 10"/>'
                )
    for pid, plan in record.plans.items():
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in plan)
        color = _COLORS.get(pid, "#888")
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2" opacity="0.7"/>'
        )
    spec_by_id = {p.id: p for p in cfg.players}
    for pid, state in record.states.items():
        corners = body_points(state, spec_by_id[pid].geometry)[:4]
        order = [0, 1, 3, 2]
        pts = " ".join(f"{sx(corners[i, 0]):.1f},{sy(corners[i, 1]):.1f}" for i in order)
        color = _COLORS.get(pid, "#888")
        parts.append(f'<polygon points="{pts}" fill="{color}" stroke="#333" stroke-width="1"/>')
    parts.append(
        f'<text x="8" y="16" font-family="monospace" font-size="12">t={record.t} '
        f"violation={record.violation:.4f}</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
