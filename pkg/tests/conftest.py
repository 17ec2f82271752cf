import math

import numpy as np
import pytest

from gpgdrive import dynamics as dyn
from gpgdrive import exprgraph as eg
from gpgdrive import game


@pytest.fixture(scope="session", autouse=True)
def warm_numba():
    """Compile (or load from cache) the tape kernels once per session."""
    eg.warmup()


GEOM = dyn.VehicleGeometry(lf=2.0, lr=2.0, width=2.0)


def merging_players(yellow_theta=(0.02, 0.1)):
    """The four-vehicle merging cast with a configurable yellow style."""
    red = game.PlayerSpec(
        id="red",
        role="gpg",
        model=dyn.KinematicBicycle(lf=2.0, lr=2.0, mu=0.0),
        geometry=GEOM,
        x0=dyn.VehicleState(3.0, 3.0, 0.0, 5.0),
        bounds_lo=(-4.0, -math.pi / 4),
        bounds_hi=(4.0, math.pi / 4),
        cost=game.LaneCenterCost(),
        theta=(0.05, 0.1, 0.5),
        constraints=({"kind": "road_y", "y_min_m": -1.5, "y_max_m": 4.5},),
        learn=True,
    )
    yellow = game.PlayerSpec(
        id="yellow",
        role="gpg",
        model=dyn.LongitudinalDoubleIntegrator(),
        geometry=GEOM,
        x0=dyn.VehicleState(0.0, 0.0, 0.0, 5.0),
        bounds_lo=(-4.0,),
        bounds_hi=(4.0,),
        cost=game.GapTrackingCost(follow_id="blue", desired_gap=3.0),
        theta=tuple(yellow_theta),
    )
    blue = game.PlayerSpec(
        id="blue",
        role="scripted",
        model=dyn.ConstantVelocity(),
        geometry=GEOM,
        x0=dyn.VehicleState(7.0, 0.0, 0.0, 5.0),
    )
    white = game.PlayerSpec(
        id="white",
        role="scripted",
        model=dyn.Stationary(),
        geometry=GEOM,
        x0=dyn.VehicleState(45.0, 3.0, 0.0, 0.0),
    )
    return [red, yellow, blue, white]


SHARED = game.SharedCostSpec(kappa=4.0, k_diag=(4.0, 2.25))


@pytest.fixture(scope="session")
def merging_problem():
    """Red's view of the merging game with a courteous belief."""
    return game.build_gpg(
        merging_players(), SHARED, beliefs={"yellow": (0.02, 0.1)}, n=15, ts=0.2, ego="red"
    )


def random_feasible_u(problem, rng):
    return rng.uniform(problem.lb, problem.ub)
