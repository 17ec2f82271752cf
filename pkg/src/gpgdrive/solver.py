"""Three-layer solve of the potential problem.

Inner layer: PANOC, a line-search method blending projected-gradient steps
with L-BFGS directions on the forward-backward envelope, for box-constrained
smooth subproblems. Middle layer: an augmented Lagrangian loop imposing the
players' private constraints through shifted quadratic penalties and
multiplier updates. Outer layer: a quadratic penalty loop that grows the
weights on the shared collision constraints until their violation meets the
feasibility target.

The augmented Lagrangian objective is materialized as graph nodes with the
multipliers and penalty parameters as variable slots, so one tape serves a
whole receding-horizon run and every inner evaluation is a single sweep.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence, TextIO

import numpy as np

from . import exprgraph as eg
from .exprgraph import Expr, ExprGraph, NumericError, plus
from .exprgraph import _forward as _tape_forward
from .exprgraph import _reverse as _tape_reverse
from .game import GPGProblem

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco


@dataclass(frozen=True)
class SolverConfig:
    """Targets and schedules for the PANOC / ALM / penalty stack."""

    tol: float = 1e-3  # fixed-point residual target
    feas: float = 1e-2  # shared-constraint violation target
    alm_tol: float = 1e-2  # private-constraint violation target
    sigma0: float = 10.0
    sigma_factor: float = 2.0
    sigma_max: float = 1e6
    rho0: float = 10.0
    rho_factor: float = 5.0
    rho_max: float = 1e6
    y_cap: float = 1e6
    lbfgs_mem: int = 45  # memory 10 roughly quadruples inner iterations here
    max_inner: int = 4000
    max_outer: int = 25
    max_penalty: int = 20
    sufficient_decrease: float = 0.25
    log_stream: TextIO | None = None

    def __post_init__(self):
        for name in (
            "tol", "feas", "alm_tol", "sigma0", "sigma_factor", "sigma_max",
            "rho0", "rho_factor", "rho_max", "y_cap",
        ):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.tol >= self.feas:
            raise ValueError("tol must be smaller than feas")


@dataclass
class Solution:
    """Primal point, multipliers, penalty weights, and solve statistics."""

    u_bar: np.ndarray
    y_bar: np.ndarray  # private-constraint multipliers, >= 0
    y_lower: np.ndarray  # recovered bound multipliers, lower faces
    y_upper: np.ndarray
    sigma: np.ndarray
    status: str  # "kkt" | "infeasibility-kkt" | "iteration-limit"
    stats: dict


class _LBFGS:
    """Two-loop recursion over the fixed-point residual mapping."""

    def __init__(self, mem: int, n: int):
        self.mem = mem
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []

    def reset(self):
        self.s.clear()
        self.y.clear()

    def push(self, s: np.ndarray, y: np.ndarray):
        sy = float(s @ y)
        if sy <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            return
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.mem:
            self.s.pop(0)
            self.y.pop(0)

    def direction(self, r: np.ndarray, gamma: float) -> np.ndarray:
        q = r.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            a = (s @ q) / (s @ y)
            alphas.append(a)
            q -= a * y
        if self.s:
            s, y = self.s[-1], self.y[-1]
            q *= (s @ y) / (y @ y)
        else:
            q *= gamma
        for (s, y), a in zip(zip(self.s, self.y), reversed(alphas)):
            b = (y @ q) / (s @ y)
            q += (a - b) * s
        return -q


@dataclass
class PanocResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    residual: float
    iterations: int
    fg_evals: int
    converged: bool


def _panoc_engine(
    fg: Callable[[np.ndarray], tuple[float, np.ndarray]],
    lb: np.ndarray,
    ub: np.ndarray,
    x0: np.ndarray,
    eps: float,
    lbfgs_mem: int = 10,
    max_iter: int = 4000,
) -> PanocResult:
    """PANOC on min f(x) s.t. lb <= x <= ub.

    Returns the proximal (projected) point, so active coordinates sit exactly
    on their bounds and the fixed-point residual is measured at the returned
    point itself.
    """
    x = np.clip(np.asarray(x0, dtype=float), lb, ub)
    n = x.size
    evals = 0

    def safe_fg(z):
        nonlocal evals
        evals += 1
        v, g = fg(z)
        return v, g

    fx, gx = safe_fg(x)
    if not math.isfinite(fx):
        raise NumericError("objective is not finite at the starting point")

    # Deterministic curvature probe along a fixed pseudo-random direction.
    rng = np.random.default_rng(12345)
    d0 = rng.standard_normal(n)
    d0 /= max(np.linalg.norm(d0), 1e-12)
    step = 1e-6 * (1.0 + float(np.linalg.norm(x)))
    _, g_probe = safe_fg(x + step * d0)
    lip = float(np.linalg.norm(g_probe - gx)) / step
    lip = min(max(lip, 1e-8), 1e12)
    gamma = 0.95 / lip
    sigma_coef = 0.01  # FBE sufficient-decrease margin; safe for gamma*L <= 0.95

    lbfgs = _LBFGS(lbfgs_mem, n)

    def fb_step(z, gz):
        zhat = np.clip(z - gamma * gz, lb, ub)
        return zhat, (z - zhat) / gamma

    def quad_bound_ok(fz, gz, z, fzhat, zhat):
        dz = zhat - z
        ub_val = fz + float(gz @ dz) + (0.5 / gamma) * float(dz @ dz)
        return fzhat <= ub_val + 1e-10 * (1.0 + abs(fz))

    best_x, best_res = x.copy(), math.inf
    it = 0
    r_prev = None
    x_prev = None
    while it < max_iter:
        it += 1
        xhat, r = fb_step(x, gx)
        fxhat, gxhat = safe_fg(xhat)
        # Adapt gamma until the local quadratic upper bound holds.
        shrink = 0
        while not quad_bound_ok(fx, gx, x, fxhat, xhat) and shrink < 60:
            gamma *= 0.5
            lbfgs.reset()
            r_prev = None
            xhat, r = fb_step(x, gx)
            fxhat, gxhat = safe_fg(xhat)
            shrink += 1

        res = float(np.max(np.abs(r))) if n else 0.0
        if res < best_res:
            best_res, best_x = res, xhat.copy()
        if res <= eps:
            # Contract is on the returned point: verify at xhat itself.
            xhh, rh = fb_step(xhat, gxhat)
            res_h = float(np.max(np.abs(rh))) if n else 0.0
            if res_h <= eps:
                return PanocResult(xhat, fxhat, gxhat, res_h, it, evals, True)
            x, fx, gx = xhat, fxhat, gxhat
            r_prev = None
            continue

        if r_prev is not None and x_prev is not None:
            lbfgs.push(x - x_prev, r - r_prev)
        x_prev, r_prev = x.copy(), r.copy()

        fbe_x = fx + float(gx @ (xhat - x)) + (0.5 / gamma) * float(np.sum((xhat - x) ** 2))
        d = lbfgs.direction(r, gamma)
        target = fbe_x - sigma_coef * gamma * float(r @ r)

        tau = 1.0
        accepted = False
        for _ in range(11):
            cand = x - (1.0 - tau) * gamma * r + tau * d
            fc, gc = safe_fg(cand)
            if math.isfinite(fc) and np.all(np.isfinite(gc)):
                chat, _ = fb_step(cand, gc)
                fbe_c = fc + float(gc @ (chat - cand)) + (0.5 / gamma) * float(
                    np.sum((chat - cand) ** 2)
                )
                if fbe_c <= target:
                    x, fx, gx = cand, fc, gc
                    accepted = True
                    break
            tau *= 0.5
        if not accepted:
            # Pure forward-backward fallback keeps the envelope decreasing.
            x, fx, gx = xhat, fxhat, gxhat

    fx, gx = safe_fg(best_x)
    xhat, r = fb_step(best_x, gx)
    best_res = float(np.max(np.abs(r))) if n else 0.0
    return PanocResult(best_x, fx, gx, best_res, it, evals, False)


@njit(cache=True, error_model="numpy")
def _panoc_tape_kernel(
    ops, aa, bb, payload, val, adj, full, dec_slots, dec_nodes, out_node,
    lb, ub, xinit, eps, mem, max_iter, probe,
):
    """PANOC specialized to tape-backed objectives; mirrors _panoc_engine.

    Runs entirely in compiled code: each objective evaluation is one forward
    (and, when the gradient is needed, one reverse) sweep over the tape.
    Returns (x, f, residual, iterations, evals, converged).
    """
    n = dec_slots.shape[0]
    x = np.empty(n)
    for i in range(n):
        v = xinit[i]
        if v < lb[i]:
            v = lb[i]
        elif v > ub[i]:
            v = ub[i]
        x[i] = v

    evals = 0

    def value_only(z):
        for i in range(n):
            full[dec_slots[i]] = z[i]
        _tape_forward(ops, aa, bb, payload, full, val)
        return val[out_node]

    def fg(z, gout):
        for i in range(n):
            full[dec_slots[i]] = z[i]
        _tape_forward(ops, aa, bb, payload, full, val)
        _tape_reverse(ops, aa, bb, payload, val, adj, out_node)
        for i in range(n):
            gout[i] = adj[dec_nodes[i]]
        return val[out_node]

    gx = np.empty(n)
    fx = fg(x, gx)
    evals += 1
    if not math.isfinite(fx):
        # Signalled by NaN residual; wrapper raises.
        return x, fx, np.nan, 0, evals, 0

    step = 0.0
    for i in range(n):
        step += x[i] * x[i]
    step = 1e-6 * (1.0 + math.sqrt(step))
    gp = np.empty(n)
    xp = np.empty(n)
    for i in range(n):
        xp[i] = x[i] + step * probe[i]
    fg(xp, gp)
    evals += 1
    lip = 0.0
    for i in range(n):
        d = gp[i] - gx[i]
        lip += d * d
    lip = math.sqrt(lip) / step
    if lip < 1e-8:
        lip = 1e-8
    elif lip > 1e12:
        lip = 1e12
    gamma = 0.95 / lip

    S = np.zeros((mem, n))
    Yb = np.zeros((mem, n))
    SY = np.zeros(mem)
    count = 0
    head = 0
    alpha = np.zeros(mem)

    xhat = np.empty(n)
    r = np.empty(n)
    d = np.empty(n)
    cand = np.empty(n)
    gc = np.empty(n)
    chat = np.empty(n)
    xprev = np.empty(n)
    rprev = np.empty(n)
    xprev_valid = False
    have_cached = False
    fxhat = 0.0

    best_res = 1e300
    best_x = x.copy()
    it = 0
    while it < max_iter:
        if gamma < 1e-14:
            # Step length underflow: stop rather than report a spurious
            # zero residual from frozen iterates.
            break
        it += 1
        if not have_cached:
            for i in range(n):
                v = x[i] - gamma * gx[i]
                if v < lb[i]:
                    v = lb[i]
                elif v > ub[i]:
                    v = ub[i]
                xhat[i] = v
            fxhat = value_only(xhat)
            evals += 1
        have_cached = False

        # Shrink gamma until the local quadratic upper bound holds.
        shrinks = 0
        while shrinks < 60:
            lin = 0.0
            sq = 0.0
            for i in range(n):
                dz = xhat[i] - x[i]
                lin += gx[i] * dz
                sq += dz * dz
            bound = fx + lin + 0.5 / gamma * sq
            if fxhat <= bound + 1e-10 * (1.0 + abs(fx)):
                break
            gamma *= 0.5
            count = 0
            head = 0
            xprev_valid = False
            for i in range(n):
                v = x[i] - gamma * gx[i]
                if v < lb[i]:
                    v = lb[i]
                elif v > ub[i]:
                    v = ub[i]
                xhat[i] = v
            fxhat = value_only(xhat)
            evals += 1
            shrinks += 1

        res = 0.0
        for i in range(n):
            r[i] = (x[i] - xhat[i]) / gamma
            av = abs(r[i])
            if av > res:
                res = av
        if res < best_res:
            best_res = res
            for i in range(n):
                best_x[i] = xhat[i]

        if res <= eps:
            fxh = fg(xhat, gc)
            evals += 1
            ok = math.isfinite(fxh)
            if ok:
                for i in range(n):
                    if not math.isfinite(gc[i]):
                        ok = False
                        break
            if not ok:
                gamma *= 0.5
                count = 0
                head = 0
                xprev_valid = False
                continue
            resh = 0.0
            for i in range(n):
                v = xhat[i] - gamma * gc[i]
                if v < lb[i]:
                    v = lb[i]
                elif v > ub[i]:
                    v = ub[i]
                av = abs(xhat[i] - v) / gamma
                if av > resh:
                    resh = av
            if resh <= eps:
                return xhat, fxh, resh, it, evals, 1
            for i in range(n):
                x[i] = xhat[i]
                gx[i] = gc[i]
            fx = fxh
            xprev_valid = False
            continue

        if xprev_valid:
            sy = 0.0
            ss = 0.0
            yy = 0.0
            for i in range(n):
                si = x[i] - xprev[i]
                yi = r[i] - rprev[i]
                S[head, i] = si
                Yb[head, i] = yi
                sy += si * yi
                ss += si * si
                yy += yi * yi
            if sy > 1e-12 * math.sqrt(ss) * math.sqrt(yy):
                SY[head] = sy
                head = (head + 1) % mem
                if count < mem:
                    count += 1
        for i in range(n):
            xprev[i] = x[i]
            rprev[i] = r[i]
        xprev_valid = True

        # Two-loop recursion: d = -H r.
        for i in range(n):
            d[i] = r[i]
        for j in range(count):
            idx = (head - 1 - j) % mem
            a_j = 0.0
            for i in range(n):
                a_j += S[idx, i] * d[i]
            a_j /= SY[idx]
            alpha[idx] = a_j
            for i in range(n):
                d[i] -= a_j * Yb[idx, i]
        if count > 0:
            idx = (head - 1) % mem
            yy = 0.0
            for i in range(n):
                yy += Yb[idx, i] * Yb[idx, i]
            scale = SY[idx] / yy
        else:
            scale = gamma
        for i in range(n):
            d[i] *= scale
        for j in range(count - 1, -1, -1):
            idx = (head - 1 - j) % mem
            b_j = 0.0
            for i in range(n):
                b_j += Yb[idx, i] * d[i]
            b_j /= SY[idx]
            for i in range(n):
                d[i] += (alpha[idx] - b_j) * S[idx, i]
        for i in range(n):
            d[i] = -d[i]

        lin = 0.0
        sq = 0.0
        rr = 0.0
        for i in range(n):
            dz = xhat[i] - x[i]
            lin += gx[i] * dz
            sq += dz * dz
            rr += r[i] * r[i]
        fbe_x = fx + lin + 0.5 / gamma * sq
        target = fbe_x - 0.01 * gamma * rr

        tau = 1.0
        accepted = False
        for _trial in range(11):
            for i in range(n):
                cand[i] = x[i] - (1.0 - tau) * gamma * r[i] + tau * d[i]
            fc = fg(cand, gc)
            evals += 1
            ok = math.isfinite(fc)
            if ok:
                for i in range(n):
                    if not math.isfinite(gc[i]):
                        ok = False
                        break
            if ok:
                for i in range(n):
                    v = cand[i] - gamma * gc[i]
                    if v < lb[i]:
                        v = lb[i]
                    elif v > ub[i]:
                        v = ub[i]
                    chat[i] = v
                fchat = value_only(chat)
                evals += 1
                lin = 0.0
                sq = 0.0
                for i in range(n):
                    dz = chat[i] - cand[i]
                    lin += gc[i] * dz
                    sq += dz * dz
                fbe_c = fc + lin + 0.5 / gamma * sq
                if fbe_c <= target:
                    for i in range(n):
                        x[i] = cand[i]
                        gx[i] = gc[i]
                        xhat[i] = chat[i]
                    fx = fc
                    fxhat = fchat
                    have_cached = True
                    accepted = True
                    break
            tau *= 0.5
        if not accepted:
            fxh = fg(xhat, gc)
            evals += 1
            ok = math.isfinite(fxh)
            if ok:
                for i in range(n):
                    if not math.isfinite(gc[i]):
                        ok = False
                        break
            if not ok:
                gamma *= 0.5
                count = 0
                head = 0
                xprev_valid = False
                continue
            for i in range(n):
                x[i] = xhat[i]
                gx[i] = gc[i]
            fx = fxh

    fx = fg(best_x, gx)
    evals += 1
    res = 0.0
    for i in range(n):
        v = best_x[i] - gamma * gx[i]
        if v < lb[i]:
            v = lb[i]
        elif v > ub[i]:
            v = ub[i]
        av = abs(best_x[i] - v) / gamma
        if av > res:
            res = av
    return best_x, fx, res, it, evals, 0


def _panoc_on_tape(
    tape: "AlmTape",
    full: np.ndarray,
    x0: np.ndarray,
    eps: float,
    lbfgs_mem: int,
    max_iter: int,
    out_node: int | None = None,
) -> PanocResult:
    """Run the compiled PANOC kernel on an AlmTape's objective."""
    ev = tape.evaluator
    node = tape.al_node if out_node is None else out_node
    rng = np.random.default_rng(12345)
    n = tape.decision_slots.shape[0]
    probe = rng.standard_normal(n)
    nrm = float(np.linalg.norm(probe))
    probe /= max(nrm, 1e-12)
    x, f, res, iters, evals, conv = _panoc_tape_kernel(
        ev._ops, ev._a, ev._b, ev._payload, ev._val, ev._adj, full,
        tape.decision_slots, tape.decision_nodes, node,
        tape.model.lb, tape.model.ub, np.asarray(x0, dtype=float),
        eps, lbfgs_mem, max_iter, probe,
    )
    if not math.isfinite(f) and math.isnan(res):
        raise NumericError("objective is not finite at the starting point")
    full[tape.decision_slots] = x
    ev.forward(full)
    grad = ev.grad_after_forward(node)[tape.decision_slots]
    return PanocResult(x, float(f), grad, float(res), int(iters), int(evals), bool(conv))


def panoc(
    f,
    box: tuple[Sequence[float], Sequence[float]],
    x0: Sequence[float],
    eps: float,
    lbfgs_mem: int = 10,
    max_iter: int = 4000,
) -> np.ndarray:
    """Solve min f over a box; `f` is an Expr, an ExprGraph (last node), or a
    callable returning (value, gradient)."""
    lb = np.asarray(box[0], dtype=float)
    ub = np.asarray(box[1], dtype=float)
    if isinstance(f, Expr):
        ev = eg.Evaluator(f.graph)
        node = f.node
        fg = lambda z: ev.value_and_grad(z, node)
    elif isinstance(f, ExprGraph):
        ev = eg.Evaluator(f)
        node = f.num_nodes - 1
        fg = lambda z: ev.value_and_grad(z, node)
    else:
        fg = f
    res = _panoc_engine(fg, lb, ub, np.asarray(x0, dtype=float), eps, lbfgs_mem, max_iter)
    return res.x


# -- augmented Lagrangian engine ----------------------------------------------


@dataclass
class ConstrainedModel:
    """Smooth objective with inequality/equality constraints over a subset of
    graph slots; everything else in the graph is a bound parameter."""

    graph: ExprGraph
    objective: Expr
    ineq: list[Expr]
    eq: list[Expr]
    decision_slots: np.ndarray
    lb: np.ndarray
    ub: np.ndarray


class AlmTape:
    """Constrained model with the shifted-penalty objective materialized."""

    def __init__(self, model: ConstrainedModel, tag: str = "alm"):
        g = model.graph
        self.model = model
        rho = g.var(f"{tag}/rho")
        y_exprs = [g.var(f"{tag}/y/{j}") for j in range(len(model.ineq))]
        z_exprs = [g.var(f"{tag}/z/{j}") for j in range(len(model.eq))]
        al = model.objective
        for h, y in zip(model.ineq, y_exprs):
            shifted = plus(h + y / rho)
            al = al + 0.5 * rho * (shifted**2 - (y / rho) ** 2)
        for c, z in zip(model.eq, z_exprs):
            al = al + 0.5 * rho * ((c + z / rho) ** 2 - (z / rho) ** 2)
        self.al_node = al.node if isinstance(al, Expr) else g.const(al).node
        self.obj_node = model.objective.node
        self.rho_slot = g.slot_of(f"{tag}/rho")
        self.y_slots = np.array([g.slot_of(f"{tag}/y/{j}") for j in range(len(model.ineq))], dtype=np.int64)
        self.z_slots = np.array([g.slot_of(f"{tag}/z/{j}") for j in range(len(model.eq))], dtype=np.int64)
        self.ineq_nodes = np.array([h.node for h in model.ineq], dtype=np.int64)
        self.eq_nodes = np.array([c.node for c in model.eq], dtype=np.int64)
        self.evaluator = eg.Evaluator(g)
        self.decision_slots = model.decision_slots
        self.decision_nodes = self.evaluator._var_nodes[model.decision_slots]

    def constraint_values(self, full: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        vals = self.evaluator.forward(full)
        return vals[self.ineq_nodes].copy(), vals[self.eq_nodes].copy()


@dataclass
class AlmResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    inner_iterations: int
    outer_iterations: int
    fg_evals: int
    final_residual: float
    final_violation: float


def _alm_engine(
    tape: AlmTape,
    full: np.ndarray,
    x0: np.ndarray,
    y0: np.ndarray,
    z0: np.ndarray,
    cfg: SolverConfig,
) -> AlmResult:
    """Multiplier loop: PANOC on the shifted-penalty objective, then update
    multipliers; stops at joint primal feasibility, complementarity, and
    inner stationarity."""
    model = tape.model
    x = np.clip(np.asarray(x0, dtype=float), model.lb, model.ub)
    y = np.maximum(np.asarray(y0, dtype=float), 0.0)
    z = np.asarray(z0, dtype=float)
    rho = cfg.rho0

    inner_total = 0
    evals_total = 0
    prev_viol = math.inf
    status = "iteration-limit"
    res = None
    viol = math.inf
    for outer in range(1, cfg.max_outer + 1):
        full[tape.rho_slot] = rho
        full[tape.y_slots] = y
        full[tape.z_slots] = z
        # Loose-to-tight inner tolerance; termination requires a tight solve.
        eps_k = max(cfg.tol, cfg.tol * 100.0 * 0.1 ** (outer - 1))
        pr = _panoc_on_tape(tape, full, x, eps_k, cfg.lbfgs_mem, cfg.max_inner)
        x = pr.x
        inner_total += pr.iterations
        evals_total += pr.fg_evals
        full[tape.decision_slots] = x
        h_vals, c_vals = tape.constraint_values(full)
        viol = 0.0
        if h_vals.size:
            viol = float(np.max(np.maximum(h_vals, 0.0)))
        if c_vals.size:
            viol = max(viol, float(np.max(np.abs(c_vals))))
        y = np.minimum(np.maximum(0.0, y + rho * h_vals), cfg.y_cap)
        z = np.clip(z + rho * c_vals, -cfg.y_cap, cfg.y_cap)
        comp_ok = True
        if h_vals.size:
            comp_ok = bool(
                np.all(np.abs(y * h_vals) <= 10.0 * cfg.alm_tol * (1.0 + np.abs(y)))
            )
        res = pr
        if viol <= cfg.alm_tol and pr.converged and comp_ok and eps_k <= cfg.tol:
            status = "kkt"
            break
        if viol > cfg.sufficient_decrease * prev_viol:
            if rho >= cfg.rho_max:
                status = "infeasibility-kkt"
                break
            rho = min(rho * cfg.rho_factor, cfg.rho_max)
        prev_viol = viol
    return AlmResult(
        x=x,
        y=y,
        z=z,
        status=status,
        inner_iterations=inner_total,
        outer_iterations=outer,
        fg_evals=evals_total,
        final_residual=res.residual if res else math.inf,
        final_violation=viol,
    )


def alm(
    f: Expr,
    h: Sequence[Expr],
    box: tuple[Sequence[float], Sequence[float]],
    x0: Sequence[float],
    cfg: SolverConfig | None = None,
) -> AlmResult:
    """Solve min f s.t. h <= 0 over a box; f and h share one graph whose
    variable slots are all decision variables. The result carries the primal
    point `x`, the multipliers `y`, and the termination `status`."""
    cfg = cfg or SolverConfig()
    g = f.graph.copy()
    f2 = Expr(g, f.node)
    h2 = [Expr(g, hi.node) for hi in h]
    nvars = len(box[0])
    if g.num_vars != nvars:
        raise ValueError("box dimension must match the graph's variable count")
    model = ConstrainedModel(
        graph=g,
        objective=f2,
        ineq=list(h2),
        eq=[],
        decision_slots=np.arange(nvars, dtype=np.int64),
        lb=np.asarray(box[0], dtype=float),
        ub=np.asarray(box[1], dtype=float),
    )
    tape = AlmTape(model)
    full = np.zeros(g.num_vars)
    return _alm_engine(
        tape, full, np.asarray(x0, dtype=float), np.zeros(len(h2)), np.zeros(0), cfg
    )


# -- full game solve -----------------------------------------------------------


class GPGSolver:
    """Persistent solver for one assembled problem; reuse across MPC steps."""

    def __init__(self, problem: GPGProblem, cfg: SolverConfig | None = None):
        self.problem = problem
        self.cfg = cfg or SolverConfig()
        g = problem.graph.copy()
        potential = Expr(g, problem.potential.node)
        # Penalized block: shared constraints first, then each player's
        # avoidance values against scripted vehicles (same mechanism; their
        # gradients vanish on the boundary so multipliers cannot hold them).
        penalized = [Expr(g, e.node) for e in problem.shared]
        for p in problem.gpg_players:
            penalized.extend(Expr(g, e.node) for e in problem.private_soft[p.id])
        self.h_keys: list[tuple[str, int]] = []
        ineq: list[Expr] = []
        for p in problem.gpg_players:
            for j, e in enumerate(problem.private[p.id]):
                ineq.append(Expr(g, e.node))
                self.h_keys.append((p.id, j))
        sigma_exprs = [g.var(f"pen/sigma/{i}") for i in range(len(penalized))]
        pen = potential
        for s_expr, h_expr in zip(sigma_exprs, penalized):
            pen = pen + 0.5 * s_expr * h_expr**2
        self.model = ConstrainedModel(
            graph=g,
            objective=pen,
            ineq=ineq,
            eq=[],
            decision_slots=problem.decision_slots,
            lb=problem.lb,
            ub=problem.ub,
        )
        self.tape = AlmTape(self.model)
        self.sigma_slots = np.array(
            [g.slot_of(f"pen/sigma/{i}") for i in range(len(penalized))], dtype=np.int64
        )
        self.penalized_nodes = np.array([e.node for e in penalized], dtype=np.int64)
        self.potential_node = potential.node
        self.num_shared = len(problem.shared)
        self.num_penalized = len(penalized)
        self.num_private = len(ineq)
        # Penalized Lagrangian pen + y'h, for bound-multiplier recovery.
        lag = pen
        for y_slot, h_expr in zip(self.tape.y_slots, ineq):
            lag = lag + g.var(g.var_names[y_slot]) * h_expr
        self.lagrangian_node = lag.node
        self.tape.evaluator = eg.Evaluator(g)
        self.tape.decision_nodes = self.tape.evaluator._var_nodes[problem.decision_slots]

    def solve(
        self,
        warm: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
        x0=None,
        theta=None,
    ) -> Solution:
        cfg = self.cfg
        p = self.problem
        t_start = time.perf_counter()
        if warm is not None:
            u0, y0, sigma = (np.asarray(w, dtype=float).copy() for w in warm)
            if u0.shape != (p.num_decisions,) or y0.shape != (self.num_private,) or sigma.shape != (self.num_penalized,):
                raise ValueError("warm start dimensions do not match the layout")
        else:
            u0 = np.zeros(p.num_decisions)
            y0 = np.zeros(self.num_private)
            sigma = np.full(self.num_penalized, cfg.sigma0)

        full_template = p.assignment(x0=x0, theta=theta)
        full = np.zeros(self.model.graph.num_vars)
        full[: full_template.size] = full_template

        # Interleaved outer loop: each round solves the box-constrained
        # smooth subproblem, then updates the private-constraint multipliers
        # and, where the penalized violations stagnate above target, grows
        # their penalty weights. Fixed point identical to nesting the two
        # loops, with far fewer subproblem solves on cold starts.
        status = "iteration-limit"
        inner_total = 0
        evals_total = 0
        x, y = u0, y0
        rho = cfg.rho0
        res = math.inf
        viol = math.inf
        prev_pen_viol = math.inf
        prev_alm_viol = math.inf
        ev = self.tape.evaluator
        for k_outer in range(1, cfg.max_outer + cfg.max_penalty + 1):
            full[self.sigma_slots] = sigma
            full[self.tape.rho_slot] = rho
            full[self.tape.y_slots] = y
            # Inner solves stay loose while the constraint schedule is still
            # moving; the final rounds run at the target tolerance.
            worst = max(prev_pen_viol if prev_pen_viol < math.inf else 1.0,
                        prev_alm_viol if prev_alm_viol < math.inf else 0.0)
            if worst <= max(cfg.feas, cfg.alm_tol):
                eps_k = cfg.tol
            else:
                eps_k = max(cfg.tol, min(1e-1, 0.3 * worst))
            pr = _panoc_on_tape(self.tape, full, x, eps_k, cfg.lbfgs_mem, cfg.max_inner)
            x = pr.x
            inner_total += pr.iterations
            evals_total += pr.fg_evals
            res = pr.residual
            full[self.model.decision_slots] = x
            vals = ev.forward(full)
            pen_vals = np.abs(vals[self.penalized_nodes])
            pen_viol = float(np.max(pen_vals)) if pen_vals.size else 0.0
            h_vals = vals[self.tape.ineq_nodes].copy()
            alm_viol = float(np.max(np.maximum(h_vals, 0.0))) if h_vals.size else 0.0
            y = np.minimum(np.maximum(0.0, y + rho * h_vals), cfg.y_cap)
            comp_ok = True
            if h_vals.size:
                comp_ok = bool(
                    np.all(np.abs(y * h_vals) <= 10.0 * cfg.alm_tol * (1.0 + np.abs(y)))
                )
            viol = pen_viol
            if cfg.log_stream is not None:
                cfg.log_stream.write(
                    f"outer {k_outer} inner {pr.iterations} f {vals[self.potential_node]:.6e} "
                    f"residual {res:.3e} shared_viol {pen_viol:.3e} private_viol {alm_viol:.3e}\n"
                )
            if (
                pen_viol <= cfg.feas
                and alm_viol <= cfg.alm_tol
                and comp_ok
                and pr.converged
                and eps_k <= cfg.tol
            ):
                status = "kkt"
                break
            if pen_viol > cfg.feas and pen_viol > cfg.sufficient_decrease * prev_pen_viol:
                grow = pen_vals > cfg.feas
                if np.all(sigma[grow] >= cfg.sigma_max):
                    status = "infeasibility-kkt"
                    break
                # Penalty-weight jump: sigma*|H| estimates the multiplier a
                # violated entry needs, so sigma*|H|/feas is roughly the
                # weight that brings it inside the target in one step.
                sigma = sigma.copy()
                implied = 1.2 * sigma[grow] * pen_vals[grow] / cfg.feas
                sigma[grow] = np.minimum(
                    np.maximum(sigma[grow] * cfg.sigma_factor, implied), cfg.sigma_max
                )
            if alm_viol > cfg.alm_tol and alm_viol > cfg.sufficient_decrease * prev_alm_viol:
                if rho >= cfg.rho_max:
                    status = "infeasibility-kkt"
                    break
                rho = min(rho * cfg.rho_factor, cfg.rho_max)
            prev_pen_viol = pen_viol
            prev_alm_viol = alm_viol
        k_pen = k_outer
        wall = time.perf_counter() - t_start

        # Bound multipliers from the projected-gradient decomposition at x.
        full[self.model.decision_slots] = x
        full[self.tape.rho_slot] = cfg.rho0
        full[self.tape.y_slots] = y
        self.tape.evaluator.forward(full)
        grad_full = self.tape.evaluator.grad_after_forward(self.lagrangian_node)
        grad = grad_full[self.model.decision_slots]
        at_lb = x <= self.model.lb
        at_ub = x >= self.model.ub
        y_lower = np.where(at_lb, np.maximum(grad, 0.0), 0.0)
        y_upper = np.where(at_ub, np.maximum(-grad, 0.0), 0.0)

        return Solution(
            u_bar=x,
            y_bar=y,
            y_lower=y_lower,
            y_upper=y_upper,
            sigma=sigma,
            status=status,
            stats={
                "inner_iterations": inner_total,
                "outer_iterations": k_outer,
                "penalty_iterations": k_pen,
                "wall_time_s": wall,
                "final_residual": res,
                "final_violation": viol,
                "fg_evals": evals_total,
            },
        )


def solve_gpg(
    p: GPGProblem,
    cfg: SolverConfig | None = None,
    warm: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> Solution:
    """One-shot solve; builds a transient tape (use GPGSolver for MPC loops)."""
    return GPGSolver(p, cfg).solve(warm=warm)


def kkt_residual(
    p: GPGProblem, u: np.ndarray, y: dict[str, np.ndarray] | np.ndarray, sigma: np.ndarray
) -> float:
    """Projected-gradient norm of the penalized Lagrangian at (u, y) plus the
    worst complementarity violation; 0 at an exact KKT point."""
    g = p.graph.copy()
    pen = Expr(g, p.potential.node)
    sigma = np.asarray(sigma, dtype=float)
    penalized = list(p.shared)
    for pl in p.gpg_players:
        penalized.extend(p.private_soft[pl.id])
    if sigma.shape != (len(penalized),):
        raise ValueError("sigma has wrong length")
    for i, e in enumerate(penalized):
        pen = pen + 0.5 * float(sigma[i]) * Expr(g, e.node) ** 2
    h_exprs: list[Expr] = []
    y_list: list[float] = []
    if isinstance(y, dict):
        for pl in p.gpg_players:
            vals = np.asarray(y.get(pl.id, np.zeros(len(p.private[pl.id]))), dtype=float)
            if vals.shape != (len(p.private[pl.id]),):
                raise ValueError(f"multiplier block for {pl.id} has wrong length")
            for e, yv in zip(p.private[pl.id], vals):
                h_exprs.append(Expr(g, e.node))
                y_list.append(float(yv))
    else:
        y = np.asarray(y, dtype=float)
        flat = [e for pl in p.gpg_players for e in p.private[pl.id]]
        if y.shape != (len(flat),):
            raise ValueError("multiplier vector has wrong length")
        h_exprs = [Expr(g, e.node) for e in flat]
        y_list = [float(v) for v in y]
    lag = pen
    for e, yv in zip(h_exprs, y_list):
        if yv != 0.0:
            lag = lag + yv * e
    full = p.assignment(u=np.asarray(u, dtype=float))
    full = np.concatenate([full, np.zeros(g.num_vars - full.size)])
    ev = eg.Evaluator(g)
    vals = ev.forward(full)
    grad = ev.grad_after_forward(lag.node)[p.decision_slots]
    at_lb = np.asarray(u) <= p.lb + 1e-12 * (1.0 + np.abs(p.lb))
    at_ub = np.asarray(u) >= p.ub - 1e-12 * (1.0 + np.abs(p.ub))
    proj = np.where(at_lb, np.minimum(grad, 0.0), np.where(at_ub, np.maximum(grad, 0.0), grad))
    stationarity = float(np.max(np.abs(proj))) if proj.size else 0.0
    comp = 0.0
    for e, yv in zip(h_exprs, y_list):
        comp = max(comp, abs(yv * float(vals[e.node])))
    return stationarity + comp
