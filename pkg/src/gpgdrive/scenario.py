"""Scenario files: vehicles, costs, road, solver and learning settings.

A scenario is one JSON document with units spelled out in the field names.
Behavior presets map symbolic names (courteous, stubborn) onto parameter
vectors so the command line can swap the simulated behavior of a vehicle,
and an agent's belief about another player may name a preset or give the
numbers directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .dynamics import (
    ConstantVelocity,
    DynamicsModel,
    KinematicBicycle,
    LongitudinalDoubleIntegrator,
    Stationary,
    VehicleGeometry,
    VehicleState,
)
from .game import (
    ConfigurationError,
    PlayerSpec,
    SharedCostSpec,
    cost_family_from_descriptor,
    input_channels,
)
from .learning import LearningConfig
from .solver import SolverConfig


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario document."""


@dataclass
class ScenarioConfig:
    """Everything one closed-loop run needs."""

    n: int
    ts: float
    steps: int
    players: tuple[PlayerSpec, ...]
    shared_cost: SharedCostSpec
    road: dict
    solver: SolverConfig
    learning: LearningConfig
    beliefs: dict[str, dict[str, np.ndarray]]
    behavior_presets: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def gpg_ids(self) -> list[str]:
        return [p.id for p in self.players if p.role == "gpg"]


def _expect(doc: Mapping, key: str, path: str):
    if key not in doc:
        raise ScenarioError(f"missing field {path}/{key}")
    return doc[key]


def _model_from_doc(doc: Mapping, path: str) -> DynamicsModel:
    kind = _expect(doc, "kind", path)
    if kind == "kinematic_bicycle":
        return KinematicBicycle(
            lf=float(_expect(doc, "lf_m", path)),
            lr=float(_expect(doc, "lr_m", path)),
            mu=float(doc.get("mu_per_s", 0.0)),
        )
    if kind == "longitudinal_double_integrator":
        return LongitudinalDoubleIntegrator()
    if kind == "constant_velocity":
        return ConstantVelocity()
    if kind == "stationary":
        return Stationary()
    raise ScenarioError(f"unknown model kind {kind!r} at {path}")


_CHANNEL_FIELDS = {"a": "a_mps2", "delta": "delta_rad"}


def _player_from_doc(doc: Mapping, path: str) -> PlayerSpec:
    pid = _expect(doc, "id", path)
    role = _expect(doc, "role", path)
    model = _model_from_doc(_expect(doc, "model", path), f"{path}/model")
    gdoc = _expect(doc, "geometry", path)
    geometry = VehicleGeometry(
        lf=float(_expect(gdoc, "lf_m", f"{path}/geometry")),
        lr=float(_expect(gdoc, "lr_m", f"{path}/geometry")),
        width=float(_expect(gdoc, "width_m", f"{path}/geometry")),
    )
    xdoc = _expect(doc, "x0", path)
    x0 = VehicleState(
        px=float(_expect(xdoc, "px_m", f"{path}/x0")),
        py=float(_expect(xdoc, "py_m", f"{path}/x0")),
        psi=float(_expect(xdoc, "psi_rad", f"{path}/x0")),
        v=float(_expect(xdoc, "v_mps", f"{path}/x0")),
    )
    bounds_lo: list[float] = []
    bounds_hi: list[float] = []
    channels = input_channels(model)
    if channels:
        bdoc = _expect(doc, "bounds", path)
        for ch in channels:
            pair = _expect(bdoc, _CHANNEL_FIELDS[ch], f"{path}/bounds")
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                raise ScenarioError(f"{path}/bounds/{_CHANNEL_FIELDS[ch]} must be [lo, hi]")
            bounds_lo.append(float(pair[0]))
            bounds_hi.append(float(pair[1]))
    cost = None
    theta = None
    if role == "gpg":
        cost = cost_family_from_descriptor(_expect(doc, "cost", path))
        theta = tuple(float(v) for v in _expect(doc, "theta", path))
    constraints = tuple(doc.get("constraints", ()))
    try:
        return PlayerSpec(
            id=pid,
            role=role,
            model=model,
            geometry=geometry,
            x0=x0,
            bounds_lo=tuple(bounds_lo),
            bounds_hi=tuple(bounds_hi),
            cost=cost,
            theta=theta,
            constraints=constraints,
            learn=bool(doc.get("learn", False)),
        )
    except ConfigurationError as e:
        raise ScenarioError(f"{path}: {e}") from e


def _resolve_belief(value, presets: Mapping, target: str, path: str) -> np.ndarray:
    if isinstance(value, str):
        preset = presets.get(value)
        if preset is None or target not in preset:
            raise ScenarioError(f"{path}: preset {value!r} does not define {target}")
        return np.asarray(preset[target], dtype=float)
    return np.asarray(value, dtype=float)


def scenario_from_dict(doc: Mapping) -> ScenarioConfig:
    """Validate and resolve a parsed scenario document."""
    n = int(_expect(doc, "horizon_steps", ""))
    ts = float(_expect(doc, "sample_time_s", ""))
    steps = int(_expect(doc, "sim_steps", ""))
    if steps < 1:
        raise ScenarioError("sim_steps must be at least 1")
    if n < 1 or ts <= 0:
        raise ScenarioError("horizon_steps and sample_time_s must be positive")

    sdoc = _expect(doc, "shared_cost", "")
    kdiag = _expect(sdoc, "k_diag_inv_m2", "shared_cost")
    try:
        shared = SharedCostSpec(
            kappa=float(_expect(sdoc, "kappa", "shared_cost")),
            k_diag=(float(kdiag[0]), float(kdiag[1])),
        )
    except ConfigurationError as e:
        raise ScenarioError(f"shared_cost: {e}") from e

    players = tuple(
        _player_from_doc(p, f"players[{i}]") for i, p in enumerate(_expect(doc, "players", ""))
    )
    ids = [p.id for p in players]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate player ids")
    gpg_ids = [p.id for p in players if p.role == "gpg"]
    if not gpg_ids:
        raise ScenarioError("scenario needs at least one gpg player")

    solver_doc = dict(doc.get("solver", {}))
    try:
        solver = SolverConfig(**solver_doc)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"solver: {e}") from e
    learn_doc = dict(doc.get("learning", {}))
    try:
        learning = LearningConfig(**learn_doc)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"learning: {e}") from e

    presets = {
        name: {pid: [float(v) for v in vals] for pid, vals in block.items()}
        for name, block in doc.get("behavior_presets", {}).items()
    }

    beliefs: dict[str, dict[str, np.ndarray]] = {}
    bdoc = doc.get("beliefs", {})
    spec_by_id = {p.id: p for p in players}
    for agent in gpg_ids:
        block = bdoc.get(agent, {})
        beliefs[agent] = {}
        for other in gpg_ids:
            if other == agent:
                continue
            if other not in block:
                raise ScenarioError(f"beliefs/{agent}: missing belief about {other}")
            vec = _resolve_belief(block[other], presets, other, f"beliefs/{agent}/{other}")
            want = spec_by_id[other].cost.theta_dim
            if vec.shape != (want,):
                raise ScenarioError(
                    f"beliefs/{agent}/{other}: expected {want} values, got {vec.shape}"
                )
            beliefs[agent][other] = vec
    extra = set(bdoc) - set(gpg_ids)
    if extra:
        raise ScenarioError(f"beliefs given for non-gpg players {sorted(extra)}")

    road = dict(doc.get("road", {}))

    return ScenarioConfig(
        n=n,
        ts=ts,
        steps=steps,
        players=players,
        shared_cost=shared,
        road=road,
        solver=solver,
        learning=learning,
        beliefs=beliefs,
        behavior_presets=presets,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Read and validate a scenario file."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{p}: not valid JSON ({e})") from e
    return scenario_from_dict(doc)


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    """Inverse of scenario_from_dict, for round-trip serialization."""
    players = []
    for p in cfg.players:
        m = p.model
        if isinstance(m, KinematicBicycle):
            model = {"kind": "kinematic_bicycle", "lf_m": m.lf, "lr_m": m.lr, "mu_per_s": m.mu}
        elif isinstance(m, LongitudinalDoubleIntegrator):
            model = {"kind": "longitudinal_double_integrator"}
        elif isinstance(m, ConstantVelocity):
            model = {"kind": "constant_velocity"}
        else:
            model = {"kind": "stationary"}
        entry = {
            "id": p.id,
            "role": p.role,
            "model": model,
            "geometry": {"lf_m": p.geometry.lf, "lr_m": p.geometry.lr, "width_m": p.geometry.width},
            "x0": {"px_m": p.x0.px, "py_m": p.x0.py, "psi_rad": p.x0.psi, "v_mps": p.x0.v},
        }
        channels = input_channels(p.model)
        if channels:
            entry["bounds"] = {
                _CHANNEL_FIELDS[ch]: [p.bounds_lo[i], p.bounds_hi[i]]
                for i, ch in enumerate(channels)
            }
        if p.role == "gpg":
            c = p.cost
            if hasattr(c, "follow_id"):
                entry["cost"] = {
                    "kind": "gap_tracking",
                    "follow_id": c.follow_id,
                    "desired_gap_m": c.desired_gap,
                }
            else:
                entry["cost"] = {"kind": "lane_center"}
            entry["theta"] = list(p.theta)
        if p.constraints:
            entry["constraints"] = [dict(c) for c in p.constraints]
        if p.learn:
            entry["learn"] = True
        players.append(entry)
    lrn = cfg.learning
    slv = cfg.solver
    return {
        "horizon_steps": cfg.n,
        "sample_time_s": cfg.ts,
        "sim_steps": cfg.steps,
        "shared_cost": {"kappa": cfg.shared_cost.kappa, "k_diag_inv_m2": list(cfg.shared_cost.k_diag)},
        "road": dict(cfg.road),
        "solver": {
            "tol": slv.tol,
            "feas": slv.feas,
            "alm_tol": slv.alm_tol,
            "sigma0": slv.sigma0,
            "sigma_factor": slv.sigma_factor,
            "lbfgs_mem": slv.lbfgs_mem,
        },
        "learning": {
            "enabled": lrn.enabled,
            "window": lrn.window,
            "xi": lrn.xi,
        },
        "behavior_presets": {
            name: {pid: list(vals) for pid, vals in block.items()}
            for name, block in cfg.behavior_presets.items()
        },
        "beliefs": {
            agent: {other: list(map(float, vec)) for other, vec in block.items()}
            for agent, block in cfg.beliefs.items()
        },
    }


def packaged_scenario_path(name: str) -> Path:
    """Path of a scenario shipped inside the package (e.g. 'merging')."""
    here = Path(__file__).parent / "scenarios" / f"{name}.json"
    if not here.exists():
        raise FileNotFoundError(f"no packaged scenario named {name!r}")
    return here
