"""Interaction-aware MPC for automated driving as a generalized potential
game, solved online by a PANOC / augmented-Lagrangian / quadratic-penalty
stack, with online learning of other drivers' cost parameters."""

__version__ = "0.1.0"
