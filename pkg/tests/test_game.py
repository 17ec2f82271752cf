import dataclasses
import math

import numpy as np
import pytest

from gpgdrive import dynamics as dyn
from gpgdrive import exprgraph as eg
from gpgdrive import game

from conftest import GEOM, SHARED, merging_players, random_feasible_u


def test_variable_and_constraint_counts(merging_problem):
    p = merging_problem
    assert p.num_decisions == 15 * 2 + 15 * 1 == 45
    assert len(p.shared) == 15 * 10 == 150


def test_layout_bijective(merging_problem):
    p = merging_problem
    assert len(p.layout_index) == p.num_decisions
    for key, pos in p.layout_index.items():
        assert p.layout[pos] == key


def test_single_player_reduces_to_own_cost():
    red = merging_players()[0]
    p = game.build_gpg([red], SHARED, beliefs={}, n=5, ts=0.2, ego="red")
    assert p.shared == []
    rng = np.random.default_rng(0)
    u = random_feasible_u(p, rng)
    full = p.assignment(u=u)
    got = eg.Evaluator(p.graph).value(full, p.potential.node)
    # Independent evaluation: quadratic stage costs along the rollout.
    seq = [dyn.InputSample(u[2 * k], u[2 * k + 1]) for k in range(5)]
    states = dyn.rollout(red.model, red.x0, seq, 0.2)
    want = sum(
        0.05 * states[k].py**2 + 0.1 * seq[k].a**2 + 0.5 * seq[k].delta**2 for k in range(5)
    )
    want += 0.05 * states[5].py**2
    assert got == pytest.approx(want, rel=1e-12)


def test_zero_kappa_decouples_players():
    players = merging_players()
    shared0 = game.SharedCostSpec(kappa=0.0, k_diag=(4.0, 2.25))
    p = game.build_gpg(players, shared0, beliefs={"yellow": (0.02, 0.1)}, n=6, ts=0.2, ego="red")
    rng = np.random.default_rng(1)
    u = random_feasible_u(p, rng)
    ev = eg.Evaluator(p.graph)
    # Cross partials red x yellow vanish: perturbing yellow's input leaves
    # the red block of the gradient unchanged.
    full = p.assignment(u=u)
    _, g0 = ev.value_and_grad(full, p.potential.node)
    red_slots = p.decision_slots[p.player_positions["red"]]
    yellow_slots = p.decision_slots[p.player_positions["yellow"]]
    full2 = full.copy()
    full2[yellow_slots] += 0.25
    _, g1 = ev.value_and_grad(full2, p.potential.node)
    assert np.max(np.abs(g1[red_slots] - g0[red_slots])) <= 1e-9


def test_proximity_cost_values():
    assert game.proximity_cost((0, 0), (0, 0), SHARED) == 4.0
    assert game.proximity_cost((0, 0), (1000, 0), SHARED) == pytest.approx(0.0, abs=1e-300)
    assert game.proximity_cost((1, 0), (0, 0), SHARED) == pytest.approx(4 * math.exp(-2), rel=1e-12)


def test_potential_condition_holds(merging_problem):
    rng = np.random.default_rng(2)
    for _ in range(20):
        u = random_feasible_u(merging_problem, rng)
        for pid in ("red", "yellow"):
            assert game.verify_potential_condition(merging_problem, u, pid) <= 1e-9


def test_potential_condition_negative_control(merging_problem):
    p = merging_problem
    g2 = p.graph.copy()
    u_red = g2.var("u/red/0/a")
    u_yel = g2.var("u/yellow/0/a")
    tampered = dataclasses.replace(p, graph=g2, potential=eg.Expr(g2, p.potential.node) + u_red * u_yel)
    rng = np.random.default_rng(3)
    u = random_feasible_u(tampered, rng)
    assert game.verify_potential_condition(tampered, u, "red") > 1e-6


def test_theta_scaling_scales_own_gradient(merging_problem):
    p = merging_problem
    rng = np.random.default_rng(4)
    u = random_feasible_u(p, rng)
    ev = eg.Evaluator(p.graph)
    lam = 3.0

    def own_cost_grad(scale):
        theta = {"red": scale * np.array([0.05, 0.1, 0.5]), "yellow": np.zeros(2) + game.THETA_MIN}
        # kappa terms remain; subtract the kappa-only gradient to isolate
        # the player-specific part.
        full = p.assignment(u=u, theta=theta)
        _, g1 = ev.value_and_grad(full, p.potential.node)
        return g1

    base = own_cost_grad(1.0)
    scaled = own_cost_grad(lam)
    zero_theta = p.assignment(u=u, theta={"red": np.full(3, 1e-300), "yellow": np.full(2, 1e-300)})
    _, g_kappa = ev.value_and_grad(zero_theta, p.potential.node)
    red = p.player_positions["red"]
    red_slots = p.decision_slots[red]
    lhs = scaled[red_slots] - g_kappa[red_slots]
    rhs = lam * (base[red_slots] - g_kappa[red_slots])
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * (1.0 + np.max(np.abs(rhs)))


def test_stage_potential_sums_to_graph_value(merging_problem):
    p = merging_problem
    rng = np.random.default_rng(5)
    u = random_feasible_u(p, rng)
    spec_by_id = {pl.id: pl for pl in p.players}
    # Roll every vehicle out under this input profile.
    inputs_per_step = {pid: [] for pid in spec_by_id}
    for k in range(p.n):
        for pl in p.players:
            if pl.role == "gpg":
                channels = game.input_channels(pl.model)
                vals = {ch: u[p.layout_index[(pl.id, k, ch)]] for ch in channels}
                inputs_per_step[pl.id].append(
                    dyn.InputSample(a=vals.get("a", 0.0), delta=vals.get("delta", 0.0))
                )
            else:
                inputs_per_step[pl.id].append(None)
    rollouts = {
        pid: dyn.rollout(spec_by_id[pid].model, spec_by_id[pid].x0, inputs_per_step[pid], p.ts)
        for pid in spec_by_id
    }
    total = 0.0
    for k in range(p.n):
        states_k = {pid: rollouts[pid][k] for pid in rollouts}
        inputs_k = {pid: inputs_per_step[pid][k] for pid in rollouts}
        total += game.stage_potential(p, states_k, inputs_k)
    terminal = game.terminal_potential(p, {pid: rollouts[pid][p.n] for pid in rollouts})
    # The builder's view used red's beliefs; evaluate the graph at the
    # ground-truth weights to compare with the metric-side evaluation.
    truth = {pl.id: np.asarray(pl.theta) for pl in p.gpg_players}
    full = p.assignment(u=u, theta=truth)
    graph_value = eg.Evaluator(p.graph).value(full, p.potential.node)
    assert total + terminal == pytest.approx(graph_value, abs=1e-9)


def test_stage_potential_single_player_is_stage_cost():
    red = merging_players()[0]
    p = game.build_gpg([red], SHARED, beliefs={}, n=4, ts=0.2, ego="red")
    s = dyn.VehicleState(1.0, 2.0, 0.1, 5.0)
    u = dyn.InputSample(0.5, -0.05)
    got = game.stage_potential(p, {"red": s}, {"red": u})
    assert got == pytest.approx(0.05 * 4.0 + 0.1 * 0.25 + 0.5 * 0.0025, rel=1e-12)


def test_stage_potential_coincident_positions():
    players = merging_players()
    p = game.build_gpg(players, SHARED, beliefs={"yellow": (0.02, 0.1)}, n=4, ts=0.2, ego="red")
    s = dyn.VehicleState(0.0, 0.0, 0.0, 0.0)
    states = {pl.id: s for pl in players}
    inputs = {pl.id: dyn.InputSample(0, 0) if pl.role == "gpg" else None for pl in players}
    # All pairwise distances zero: every proximity term contributes kappa;
    # the only other nonzero term is yellow's gap cost at distance -3.
    pairs = 1 + 2 + 2  # red-yellow shared + red x scripted + yellow x scripted
    want = SHARED.kappa * pairs + 0.02 * (0.0 - 0.0 - 3.0) ** 2
    assert game.stage_potential(p, states, inputs) == pytest.approx(want, rel=1e-12)


def test_missing_belief_rejected():
    players = merging_players()
    with pytest.raises(game.ConfigurationError):
        game.build_gpg(players, SHARED, beliefs={}, n=5, ts=0.2, ego="red")


def test_scripted_only_rejected():
    players = [pl for pl in merging_players() if pl.role == "scripted"]
    with pytest.raises(game.ConfigurationError):
        game.build_gpg(players, SHARED, beliefs=None, n=5, ts=0.2)


def test_shared_constraints_agree_between_agents():
    players = merging_players()
    pr = game.build_gpg(players, SHARED, beliefs={"yellow": (0.02, 0.1)}, n=8, ts=0.2, ego="red")
    py = game.build_gpg(players, SHARED, beliefs={"red": (0.05, 0.1, 0.5)}, n=8, ts=0.2, ego="yellow")
    rng = np.random.default_rng(6)
    u = random_feasible_u(pr, rng)
    ev_r = eg.Evaluator(pr.graph)
    ev_y = eg.Evaluator(py.graph)
    vr = ev_r.forward(pr.assignment(u=u))[[e.node for e in pr.shared]].copy()
    vy = ev_y.forward(py.assignment(u=u))[[e.node for e in py.shared]].copy()
    assert np.max(np.abs(vr - vy)) <= 1e-12


def test_bounds_validation():
    red = merging_players()[0]
    with pytest.raises(game.ConfigurationError):
        dataclasses.replace(red, bounds_lo=(4.0, -0.5), bounds_hi=(-4.0, 0.5))


def test_theta_floor_validation():
    red = merging_players()[0]
    with pytest.raises(game.ConfigurationError):
        dataclasses.replace(red, theta=(0.0, 0.1, 0.5))


def test_learnable_road_bound_hook():
    # A constraint descriptor may bind one of its bounds to a cost weight.
    red = merging_players()[0]
    red = dataclasses.replace(
        red,
        constraints=({"kind": "road_y", "y_min_m": {"theta_index": 0}, "y_max_m": 4.5},),
    )
    p = game.build_gpg([red], SHARED, beliefs={}, n=3, ts=0.2, ego="red")
    assert len(p.private["red"]) == 3 * 4 * 2
    rng = np.random.default_rng(7)
    u = random_feasible_u(p, rng)
    ev = eg.Evaluator(p.graph)
    low = ev.forward(p.assignment(u=u, theta={"red": (0.05, 0.1, 0.5)}))[
        p.private["red"][0].node
    ]
    high = ev.forward(p.assignment(u=u, theta={"red": (2.9, 0.1, 0.5)}))[
        p.private["red"][0].node
    ]
    assert high == pytest.approx(low + (2.9 - 0.05), rel=1e-9)
