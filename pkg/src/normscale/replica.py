"""Zero-temperature replica-symmetric saddle points for fixed-norm learning.

The free-energy density at zero temperature depends on two order parameters:
x (the rescaled response, beta*(1-q) in the underlying formalism) and the
teacher overlap R. For a margin potential V,

    e(x, R) = (1-R^2)/(2x) - 2 alpha < H(-R t / sqrt(1-R^2)) * M(t, x) >_t

with t a standard normal variable, H the Gaussian tail, and
M(t, x) = min_Delta [V(Delta) + (Delta-t)^2/(2x)] the Moreau envelope of V.
Saddle points extremize e; the generalization error follows from the overlap
as eps = arccos(R)/pi. The storage problem (random labels) pins R = 0.

Numerics: at large sharpness the saddle x grows exponentially (separable
data flattens the landscape bottom at scale exp(-2*lam*margin)), so the
solver works in u = log(x) with the scaled density e_hat(u, R) = x * e(x, R),
which stays O(1) across the whole representable range. In scaled form the
saddle conditions read d(e_hat)/du = e_hat and d(e_hat)/dR = 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .errors import AccuracyError, ConvergenceError, DegeneratePotentialError
from .potentials import MarginPotential
from .quadrature import QuadratureConfig, legendre_rule

__all__ = [
    "SaddleState", "SolverOptions", "ReplicaSolution", "SweepResult",
    "MarginLaw", "gaussian_tail", "generalization_error", "energy_density",
    "solve_saddle", "sweep_lambda", "extrapolate_sharpness_limit",
    "margin_law",
]

_R_MAX = 1.0 - 1e-9
_R_MIN = 1e-4   # teacher-student overlap floor; the true saddle has R > 0
# iterates are clipped a little below _R_MAX so the R finite-difference legs
# always have headroom inside the open box
_R_TOP = _R_MAX - 2e-6


def gaussian_tail(h):
    """H(h) = P(Z > h) for standard normal Z, via the complementary error
    function."""
    h = np.asarray(h, dtype=float)
    if not np.all(np.isfinite(h)):
        raise ValueError("gaussian_tail needs finite input")
    out = 0.5 * erfc(h / np.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


def generalization_error(R):
    """eps = arccos(R)/pi, the misclassification rate of a student at
    overlap R with the teacher."""
    R = float(R)
    if not -1.0 <= R <= 1.0:
        raise ValueError(f"overlap must lie in [-1, 1], got {R}")
    return float(np.arccos(R) / np.pi)


@dataclass(frozen=True)
class SaddleState:
    """Order-parameter pair (x, R). x > 0; R in [0, 1)."""

    x: float
    R: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and self.x > 0):
            raise ValueError(f"x must be finite and positive, got {self.x}")
        if not (0.0 <= self.R < 1.0):
            raise ValueError(f"R must lie in [0, 1), got {self.R}")


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iters: int = 100
    max_backtracks: int = 40
    fd_step: float = 1e-3       # stencil step in (log x, R) for Newton
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    check_quadrature: bool = True


@dataclass(frozen=True)
class ReplicaSolution:
    alpha: float
    sharpness: float | None     # None for the Hebbian potential
    state: SaddleState
    eps: float
    energy: float
    residual_norm: float        # max |partial of e| at the solution
    iterations: int
    mode: str                   # "teacher_student" or "storage"


@dataclass(frozen=True)
class SweepResult:
    alpha: float
    sharpness: np.ndarray
    eps: np.ndarray
    x: np.ndarray
    R: np.ndarray
    residual: np.ndarray
    lambda_opt: float
    eps_opt: float
    options: SolverOptions

    def solution_at(self, index: int) -> ReplicaSolution:
        return ReplicaSolution(
            alpha=self.alpha, sharpness=float(self.sharpness[index]),
            state=SaddleState(float(self.x[index]), float(self.R[index])),
            eps=float(self.eps[index]), energy=float("nan"),
            residual_norm=float(self.residual[index]), iterations=0,
            mode="teacher_student")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "lambda", "x", "R", "eps", "residual"])
            for s, xx, rr, ee, res in zip(self.sharpness, self.x, self.R,
                                          self.eps, self.residual):
                writer.writerow([repr(float(self.alpha)), repr(float(s)),
                                 repr(float(xx)), repr(float(rr)),
                                 repr(float(ee)), repr(float(res))])

    def to_json(self, path):
        doc = {
            "alpha": self.alpha,
            "lambda_opt": self.lambda_opt,
            "eps_opt": self.eps_opt,
            "grid": [
                {"lambda": float(s), "x": float(xx), "R": float(rr),
                 "eps": float(ee), "residual": float(res)}
                for s, xx, rr, ee, res in zip(self.sharpness, self.x, self.R,
                                              self.eps, self.residual)
            ],
            "solver_options": {
                "tol": self.options.tol,
                "max_iters": self.options.max_iters,
                "max_backtracks": self.options.max_backtracks,
                "fd_step": self.options.fd_step,
                "quad_nodes": self.options.quad.nodes,
            },
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class MarginLaw:
    """Distribution of margins Delta at a saddle point: the pushforward of a
    Gauss-Hermite t-grid through the proximal map, as a weighted sample plus
    a precomputed histogram."""

    mode: str
    deltas: np.ndarray          # sorted ascending
    weights: np.ndarray         # sum to 1
    bin_edges: np.ndarray
    bin_mass: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.deltas))

    @property
    def minimum(self) -> float:
        return float(self.deltas[0])


# ---------------------------------------------------------------------------
# scaled energy density


# below this sharpness the potential's constant offset log(2)/lam rivals or
# dwarfs the Delta-dependent part, so the solver works with the tilted
# potential there; above it x can be astronomically large and the offset is
# left in place to keep x * V(0) representable
_TILT_SHARPNESS_MAX = 3.0


def _tilt(pot: MarginPotential) -> float:
    """Additive constant removed from V inside the solver.

    At small sharpness the potential rides on the constant V(0) = log(2)/lam,
    which dwarfs the Delta-dependent part and poisons finite differences of
    the energy. Subtracting it shifts e by the known amount -alpha * V(0)
    (a constant in V averages against 2H, whose Gaussian mean is 1/2) and
    leaves all saddle quantities untouched. At large sharpness V(0) is tiny
    while x can be astronomically large, so there the shift is skipped to
    keep x * V(0) representable.
    """
    if pot.kind == "logistic" and pot.sharpness <= _TILT_SHARPNESS_MAX:
        return math.log(2.0) / pot.sharpness
    return 0.0


def _log_cosh(z):
    z = np.abs(np.asarray(z, dtype=float))
    out = np.where(z <= 20.0, np.log(np.cosh(np.minimum(z, 20.0))),
                   z - math.log(2.0) + np.log1p(np.exp(-2.0 * np.minimum(z, 40.0))))
    return out


def _scaled_envelope(pot: MarginPotential, t, x, log_x):
    """x * (M(t, x) - tilt) where M is the Moreau envelope of V:
    x*(V(D0) - tilt) + (D0-t)^2/2, with tilt = _tilt(pot).

    Finite for x up to the float64 range: at large sharpness the (untilted)
    logistic x*V(D0) term goes through a log-domain branch once
    exp(-2 lam D0) is tiny, which keeps the product accurate when x is huge
    and V correspondingly small.
    """
    d0 = pot.prox(t, x)
    dev = d0 - t
    if pot.kind == "hebbian":
        return x * (-d0) + 0.5 * dev * dev
    lam = pot.sharpness
    if lam <= _TILT_SHARPNESS_MAX:
        # tilted potential in the cancellation-free form -D + log(cosh)/lam
        xv = x * (-d0 + _log_cosh(lam * d0) / lam)
        return xv + 0.5 * dev * dev
    xv = np.empty_like(d0)
    pos = d0 >= 0
    z = 2.0 * lam * d0[pos]
    u = np.exp(-z)
    small = u < 1e-8
    xv_pos = np.empty_like(z)
    xv_pos[small] = np.exp(log_x - z[small]) * (1.0 - 0.5 * u[small]) / lam
    xv_pos[~small] = x * np.log1p(u[~small]) / lam
    xv[pos] = xv_pos
    neg = ~pos
    if neg.any():
        # the prox lands at negative Delta only when x is of order |t|, so
        # the direct product cannot overflow on this branch
        dn = d0[neg]
        xv[neg] = x * (-2.0 * dn + np.log1p(np.exp(2.0 * lam * dn)) / lam)
    return xv + 0.5 * dev * dev


_PANEL_SPAN = 9.0
_PANEL_ORDER = 16


def _uses_panels(pot: MarginPotential) -> bool:
    return pot.kind == "logistic"


def _build_panel_grid(lam: float, u: float, R: float, quad: QuadratureConfig):
    """Gauss-Legendre panel rule for the normal average over t.

    The envelope changes behaviour over a width of order 1/(2 lam) around
    the margin point v = log(1 + 4 lam x) / (2 lam), and at small x also
    around t = -x where the minimiser crosses zero; near R = 1 the
    2H(-Rt/c) weight adds a near-step of width c = sqrt(1 - R^2) at t = 0.
    A fixed Hermite rule needs a node count growing like sharpness^2 (and
    like 1/c) to resolve those layers, so the average uses unit panels on
    [-T, T] with dyadic cascades shrinking to the layer scale around each
    transition; at gentle sharpness the cascades collapse to a plain
    composite rule. The configured node count maps onto refinement: 200 is
    the base grid and every doubling splits each panel in two, so accuracy
    checks by node doubling keep their meaning.
    """
    T = _PANEL_SPAN
    x = math.exp(min(u, 700.0))
    v = float(np.logaddexp(0.0, math.log(4.0 * lam) + u)) / (2.0 * lam)
    cuts = {float(k) for k in range(-int(T), int(T) + 1)}

    def cascade(a, s):
        if not -T < a < T:
            return
        cuts.add(a)
        for sign in (-1.0, 1.0):
            d = s
            while d < 2.0:
                p = a + sign * d
                if -T < p < T:
                    cuts.add(p)
                d *= 2.0

    layer = 0.5 / lam
    cascade(v, layer)
    if x < T and (1.0 + x * lam) / lam < 1.0:
        cascade(-x, layer)
    c = math.sqrt(max(1.0 - R * R, 0.0))
    if 0.0 < c < 0.05:
        # the 2H(-Rt/c) factor is nearly a step at t = 0 when R -> 1
        cascade(0.0, c)
    edges = np.array(sorted(cuts))
    edges = edges[np.concatenate(([True], np.diff(edges) > 1e-9))]
    doublings = max(0, int(round(math.log2(quad.nodes / 200.0))))
    for _ in range(doublings):
        edges = np.sort(np.concatenate([edges, 0.5 * (edges[1:] + edges[:-1])]))
    zg, wg = legendre_rule(_PANEL_ORDER)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    t = (mid[:, None] + half[:, None] * zg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel() * np.exp(-0.5 * t * t)
    return t, w / math.sqrt(2.0 * math.pi)


def _cluster_grid(pot: MarginPotential, u: float, R: float,
                  quad: QuadratureConfig):
    """Quadrature grid shared by every evaluation in one stencil cluster.

    Freezing the panel layout across the cluster keeps finite differences
    clean: with per-point layouts the integration error would jump between
    neighbouring evaluations and contaminate the differences."""
    if _uses_panels(pot):
        return _build_panel_grid(pot.sharpness, u, R, quad)
    return None


def _scaled_energy(pot: MarginPotential, alpha: float, log_x: float, R: float,
                   quad: QuadratureConfig, grid=None) -> float:
    """e_hat(u, R) = x * (e(x, R) + alpha * tilt) at x = exp(u)."""
    x = math.exp(log_x)
    if _uses_panels(pot):
        z, w = grid if grid is not None else _build_panel_grid(
            pot.sharpness, log_x, R, quad)
    else:
        z, w = quad.rule()
    m_hat = _scaled_envelope(pot, z, x, log_x)
    if R == 0.0:
        avg = 0.5 * float(np.dot(w, m_hat))
    else:
        c = math.sqrt(1.0 - R * R)
        avg = float(np.dot(w * gaussian_tail(-R * z / c), m_hat))
    return 0.5 * (1.0 - R * R) - 2.0 * alpha * avg


def energy_density(pot: MarginPotential, alpha: float, state: SaddleState,
                   quad: QuadratureConfig | None = None, check: bool = False):
    """Zero-temperature free-energy density e(x, R).

    With check=True the value is recomputed at doubled node count and an
    AccuracyError raised if the two disagree by more than 1e-6.
    """
    if quad is None:
        quad = QuadratureConfig()
    if not (np.isfinite(alpha) and alpha > 0):
        raise ValueError(f"alpha must be positive, got {alpha}")
    if quad.nodes < 64:
        raise ValueError(f"need at least 64 quadrature nodes, got {quad.nodes}")
    if pot.kind == "hinge_limit":
        raise DegeneratePotentialError(
            "hard-margin limit has no Moreau envelope; use finite sharpness")
    log_x = math.log(state.x)
    shift = alpha * _tilt(pot)
    e = _scaled_energy(pot, alpha, log_x, state.R, quad) / state.x - shift
    if check:
        e2 = _scaled_energy(pot, alpha, log_x, state.R, quad.doubled()) / state.x - shift
        if abs(e2 - e) > 1e-6 * max(1.0, abs(e)):
            raise AccuracyError(
                f"quadrature not converged at {quad.nodes} nodes: "
                f"doubling moves e by {abs(e2 - e):.3e}",
                estimate=e, residual=abs(e2 - e))
    return e


# ---------------------------------------------------------------------------
# saddle solver
#
# Two difference scales: the residual (which decides convergence and gets
# reported) uses h = 1e-5, small enough that its O(h^2) truncation bias sits
# far below the 1e-8 tolerance; the Newton matrix uses h = opts.fd_step
# (1e-3), where second differences are still clean. A biased Jacobian only
# bends the search direction, a biased residual would move the solution.

_H_FINE = 1e-5


def _safe_hR(R, h):
    if R + h > _R_MAX:
        h = max(0.45 * (_R_MAX - R), 1e-9)
    return min(h, R) if R > 0 else h


def _fine_residual(pot, alpha, u, R, quad, pin_R):
    """Scaled saddle residual (d e_hat/du - e_hat, d e_hat/dR) by central
    differences at the fine step, plus the center value and the cluster's
    quadrature grid."""
    grid = _cluster_grid(pot, u, R, quad)
    e0 = _scaled_energy(pot, alpha, u, R, quad, grid)
    ep = _scaled_energy(pot, alpha, u + _H_FINE, R, quad, grid)
    em = _scaled_energy(pot, alpha, u - _H_FINE, R, quad, grid)
    r_u = (ep - em) / (2 * _H_FINE) - e0
    if pin_R:
        return np.array([r_u, 0.0]), e0, grid
    h_R = _safe_hR(R, _H_FINE * max(R, 0.1))
    eRp = _scaled_energy(pot, alpha, u, R + h_R, quad, grid)
    eRm = _scaled_energy(pot, alpha, u, R - h_R, quad, grid)
    r_R = (eRp - eRm) / (2 * h_R)
    return np.array([r_u, r_R]), e0, grid


def _coarse_jacobian(pot, alpha, u, R, quad, h_u, pin_R, e0, grid):
    """Jacobian of the scaled residual from a 9-point stencil at the coarse
    step (3-point in storage mode), reusing the center value e0."""
    if pin_R:
        ep = _scaled_energy(pot, alpha, u + h_u, R, quad, grid)
        em = _scaled_energy(pot, alpha, u - h_u, R, quad, grid)
        eu = (ep - em) / (2 * h_u)
        euu = (ep - 2 * e0 + em) / (h_u * h_u)
        return np.array([[euu - eu, 0.0], [0.0, 1.0]])
    h_R = _safe_hR(R, h_u * max(R, 0.1))
    ev = np.empty((3, 3))
    ev[1, 1] = e0
    for i, j in ((0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)):
        ev[i, j] = _scaled_energy(pot, alpha, u + (i - 1) * h_u,
                                  R + (j - 1) * h_R, quad, grid)
    eu = (ev[2, 1] - ev[0, 1]) / (2 * h_u)
    euu = (ev[2, 1] - 2 * e0 + ev[0, 1]) / (h_u * h_u)
    eR = (ev[1, 2] - ev[1, 0]) / (2 * h_R)
    eRR = (ev[1, 2] - 2 * e0 + ev[1, 0]) / (h_R * h_R)
    euR = (ev[2, 2] - ev[2, 0] - ev[0, 2] + ev[0, 0]) / (4 * h_u * h_R)
    return np.array([[euu - eu, euR - eR], [euR, eRR]])


def _converged(r, u, opts):
    # stationarity in scaled coordinates; where x < 1 the plain-coordinate
    # partials |de/dx| = |r_u|/x^2 and |de/dR| = |r_R|/x are the stricter
    # tests, so both conventions are enforced at once
    x = math.exp(u)
    ok_u = abs(r[0]) * max(1.0, 1.0 / (x * x)) < opts.tol
    ok_R = abs(r[1]) * max(1.0, 1.0 / x) < opts.tol
    return ok_u and ok_R


def _spec_residual(r, u, pin_R):
    """Residual in plain (x, R) coordinates: max(|de/dx|, |de/dR|)."""
    x = math.exp(u)
    if pin_R:
        return abs(r[0]) / (x * x)
    return max(abs(r[0]) / (x * x), abs(r[1]) / x)


def _default_init(alpha: float, mode: str) -> SaddleState:
    if mode == "storage":
        return SaddleState(1.0 / math.sqrt(alpha), 0.0)
    R0 = 1.0 / math.sqrt(1.0 + math.pi / (2.0 * alpha))
    x0 = math.sqrt((1.0 - R0 * R0) / alpha)
    return SaddleState(x0, R0)


def solve_saddle(pot: MarginPotential, alpha: float,
                 init: SaddleState | None = None,
                 opts: SolverOptions | None = None,
                 mode: str = "teacher_student") -> ReplicaSolution:
    """Find a stationary point of the energy density.

    Damped Newton on the scaled residual in (u, R) = (log x, R) coordinates,
    with backtracking on the residual norm and a Levenberg fallback when the
    stencil Jacobian is singular. Storage mode pins R = 0 and reduces to a
    1D root find in u.
    """
    if opts is None:
        opts = SolverOptions()
    if mode not in ("teacher_student", "storage"):
        raise ValueError(f"unknown mode {mode!r}")
    if pot.kind == "hinge_limit":
        raise DegeneratePotentialError(
            "hard-margin limit is not solvable; sweep sharpness and "
            "extrapolate instead")
    if not (np.isfinite(alpha) and alpha > 0):
        raise ValueError(f"alpha must be positive, got {alpha}")
    if opts.quad.nodes < 64:
        raise ValueError("need at least 64 quadrature nodes")
    pin_R = mode == "storage"
    if init is None:
        init = _default_init(alpha, mode)
    if pin_R:
        R = 0.0
    else:
        R = min(max(init.R, _R_MIN), _R_TOP)
    u = math.log(init.x)

    box_exits = 0
    r, e0, grid = _fine_residual(pot, alpha, u, R, opts.quad, pin_R)
    iters = 0
    clip_u, clip_sign = 5.0, 0.0
    for iters in range(1, opts.max_iters + 1):
        if _converged(r, u, opts):
            break
        J = _coarse_jacobian(pot, alpha, u, R, opts.quad, opts.fd_step,
                             pin_R, e0, grid)
        try:
            step = np.linalg.solve(J, -r)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            finite = np.abs(J[np.isfinite(J)])
            mu = max(1.0, float(finite.max()) if finite.size else 1.0)
            step = np.linalg.solve(np.nan_to_num(J) + mu * np.eye(2), -r)
        # distance to the saddle along u is judged by the one-dimensional
        # Newton step -r_u / J00 at frozen R, not by the u-component of the
        # joint step: far from the saddle the overlap equation often has no
        # root in the current slice, and eliminating it twists the joint
        # direction until it points the wrong way along u entirely
        J00 = float(J[0, 0])
        du = -float(r[0]) / J00 if np.isfinite(J00) and J00 != 0.0 else 0.0
        # a diagnosed distance far past the clip means a long walk in log x
        # toward a distant saddle; such a leg moves u alone and only asks the
        # u-residual to improve, because the R-residual can rise transiently
        # while the walk catches up. while full-length legs keep marching
        # the same way the clip doubles, so a cold start far from the saddle
        # costs a logarithmic number of legs rather than a linear one. a
        # rejected leg falls through to the ordinary damped joint step, which
        # is what re-polishes R whenever u alone cannot make progress
        accepted = False
        if abs(du) > 5.0:
            if math.copysign(1.0, du) != clip_sign:
                clip_u, clip_sign = 5.0, math.copysign(1.0, du)
            leg = math.copysign(min(abs(du), clip_u), du)
            u_try = max(min(u + leg, 700.0), -700.0)
            R_try = 0.0 if pin_R else R
            r_try, e_try, grid_try = _fine_residual(pot, alpha, u_try, R_try,
                                                    opts.quad, pin_R)
            if abs(r_try[0]) < abs(r[0]):
                u, r, e0, grid = u_try, r_try, e_try, grid_try
                accepted = True
                clip_u = (min(2.0 * clip_u, 160.0) if abs(leg) == clip_u
                          else 5.0)
            else:
                clip_u, clip_sign = 5.0, 0.0
        else:
            clip_u, clip_sign = 5.0, 0.0
        if not accepted:
            step = np.array([float(np.clip(step[0], -5.0, 5.0)),
                             float(np.clip(step[1], -0.2, 0.2))])
            norm0 = float(np.max(np.abs(r)))
            scale = 1.0
            left_box = False
            for _ in range(opts.max_backtracks):
                if scale < 1e-4:
                    break    # the direction is hopeless at any length
                u_try = u + scale * step[0]
                if abs(u_try) > 700.0:
                    u_try = math.copysign(700.0, u_try)
                if pin_R:
                    R_try = 0.0
                else:
                    R_try = R + scale * step[1]
                    if not _R_MIN <= R_try <= _R_TOP:
                        # a trial outside the box is shortened, not clipped
                        # onto the wall: iterates parked on the R ceiling sit
                        # where no in-slice stationary point need exist, and
                        # a walk stuck there can never leave
                        left_box = True
                        scale *= 0.5
                        continue
                r_try, e_try, grid_try = _fine_residual(
                    pot, alpha, u_try, R_try, opts.quad, pin_R)
                if float(np.max(np.abs(r_try))) < norm0:
                    u, R, r, e0, grid = u_try, R_try, r_try, e_try, grid_try
                    accepted = True
                    break
                scale *= 0.5
            if left_box:
                box_exits += 1
                if box_exits > opts.max_backtracks:
                    raise ConvergenceError(
                        "saddle iterate kept leaving the (x, R) box",
                        last_state=SaddleState(math.exp(u), R))
        if not accepted:
            # Levenberg ladder. Near a fold the two Jacobian rows turn almost
            # parallel and the solved direction can point uphill at every
            # length; blending toward the steepest descent of |r|^2 always
            # finds a downhill direction unless the walk sits at a stationary
            # point of the squared residual itself
            Jn = np.nan_to_num(J)
            A = Jn.T @ Jn
            gvec = Jn.T @ r
            norm2_0 = float(r @ r)
            mu = 1e-3 * max(float(np.trace(A)), 1e-300)
            for _ in range(16):
                lm = np.linalg.solve(A + mu * np.eye(2), -gvec)
                lm = np.array([float(np.clip(lm[0], -5.0, 5.0)),
                               float(np.clip(lm[1], -0.2, 0.2))])
                u_try = max(min(u + lm[0], 700.0), -700.0)
                R_try = 0.0 if pin_R else R + lm[1]
                if not pin_R and not _R_MIN <= R_try <= _R_TOP:
                    mu *= 10.0
                    continue
                r_try, e_try, grid_try = _fine_residual(
                    pot, alpha, u_try, R_try, opts.quad, pin_R)
                if float(r_try @ r_try) < norm2_0:
                    u, R, r, e0, grid = u_try, R_try, r_try, e_try, grid_try
                    accepted = True
                    break
                mu *= 10.0
        if not accepted:
            raise ConvergenceError(
                f"line search failed at residual "
                f"{float(np.max(np.abs(r))):.3e}",
                last_state=SaddleState(math.exp(u), R))
    else:
        raise ConvergenceError(
            f"no convergence in {opts.max_iters} iterations "
            f"(residual {float(np.max(np.abs(r))):.3e})",
            last_state=SaddleState(math.exp(u), R))

    state = SaddleState(math.exp(u), R)
    resid = _spec_residual(r, u, pin_R)
    if opts.check_quadrature:
        e_fine = _scaled_energy(pot, alpha, u, R, opts.quad.doubled())
        if abs(e_fine - e0) > 1e-6 * max(1.0, abs(e0)):
            raise AccuracyError(
                f"quadrature not converged at solution "
                f"(doubling moves e_hat by {abs(e_fine - e0):.3e})",
                estimate=e0, residual=abs(e_fine - e0))
    eps = 0.5 if pin_R else generalization_error(R)
    sharpness = pot.sharpness if pot.kind == "logistic" else None
    return ReplicaSolution(alpha=float(alpha), sharpness=sharpness, state=state,
                           eps=eps, energy=e0 / state.x - alpha * _tilt(pot),
                           residual_norm=resid, iterations=iters,
                           mode="storage" if pin_R else "teacher_student")


def sweep_lambda(alpha: float, sharpness_grid, opts: SolverOptions | None = None,
                 mode: str = "teacher_student") -> SweepResult:
    """Solve the saddle along an ascending sharpness grid by continuation.

    Each point warm-starts from the previous solution; the first point starts
    from the Hebbian closed form, which is where the small-sharpness branch
    lives. A failed point is retried from a perturbed warm start, from the
    default init, and through an intermediate half-step before the sweep
    gives up and reports every failed grid point.
    """
    grid = np.asarray(sharpness_grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 10:
        raise ValueError("sharpness grid needs at least 10 points")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("sharpness grid must be positive and sorted ascending")
    if grid[-1] / grid[0] < 100.0:
        raise ValueError("sharpness grid should span at least two decades")
    if opts is None:
        opts = SolverOptions()

    sols: list[ReplicaSolution] = []
    failed: list[tuple[float, str]] = []
    prev: ReplicaSolution | None = None
    for lam in grid:
        pot = MarginPotential.logistic(float(lam))
        attempts: list[SaddleState | None] = []
        if prev is not None:
            attempts.append(prev.state)
            attempts.append(SaddleState(prev.state.x * 2.0, prev.state.R * 0.95))
        attempts.append(None)

        sol = None
        err: Exception | None = None
        for init in attempts:
            try:
                sol = solve_saddle(pot, alpha, init=init, opts=opts, mode=mode)
                break
            except (ConvergenceError, AccuracyError) as exc:
                err = exc
        if sol is None and prev is not None and prev.sharpness is not None:
            # bridge through the geometric mean of the two sharpness values
            try:
                mid = MarginPotential.logistic(math.sqrt(prev.sharpness * lam))
                bridge = solve_saddle(mid, alpha, init=prev.state, opts=opts,
                                      mode=mode)
                sol = solve_saddle(pot, alpha, init=bridge.state, opts=opts,
                                   mode=mode)
            except (ConvergenceError, AccuracyError) as exc:
                err = exc
        if sol is None:
            failed.append((float(lam), str(err)))
        else:
            sols.append(sol)
            prev = sol

    if failed:
        points = ", ".join(f"{lam:g} ({msg})" for lam, msg in failed)
        raise ConvergenceError(f"sweep failed at sharpness {points}",
                               last_state=prev.state if prev else None,
                               failed_points=[lam for lam, _ in failed])

    eps = np.array([s.eps for s in sols])
    i_opt = int(np.argmin(eps))    # argmin returns the first = smallest lambda
    return SweepResult(
        alpha=float(alpha),
        sharpness=grid.copy(),
        eps=eps,
        x=np.array([s.state.x for s in sols]),
        R=np.array([s.state.R for s in sols]),
        residual=np.array([s.residual_norm for s in sols]),
        lambda_opt=float(grid[i_opt]),
        eps_opt=float(eps[i_opt]),
        options=opts,
    )


def extrapolate_sharpness_limit(sweep: SweepResult) -> float:
    """Infinite-sharpness error estimate: straight-line fit of eps against
    1/sharpness through the three largest grid points, read off at 0."""
    lam = sweep.sharpness[-3:]
    eps = sweep.eps[-3:]
    coeffs = np.polyfit(1.0 / lam, eps, 1)
    return float(coeffs[1])


def margin_law(pot: MarginPotential, solution: ReplicaSolution, mode: str,
               resolution: int = 400, bins: int = 60,
               opts: SolverOptions | None = None) -> MarginLaw:
    """Margin distribution P(Delta) at a saddle point.

    A Gauss-Hermite t-grid at the requested resolution is pushed through the
    proximal map at the saddle's x; weights are the quadrature weights times
    2 H(-R t / sqrt(1-R^2)), identically 1 in storage mode. Storage mode
    re-solves the saddle with R pinned to 0 at the solution's alpha,
    whatever the input solution's mode was.
    """
    if mode not in ("teacher_student", "storage"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "storage":
        sol = solve_saddle(pot, solution.alpha, opts=opts, mode="storage")
        x_bar, R_bar = sol.state.x, 0.0
    else:
        x_bar, R_bar = solution.state.x, solution.state.R
        if R_bar >= 1.0 - 1e-12:
            raise ValueError("overlap too close to 1; margin law degenerates")
    z, w = QuadratureConfig(resolution).rule()
    deltas = pot.prox(z, x_bar)
    if R_bar == 0.0:
        weights = w.copy()
    else:
        c = math.sqrt(1.0 - R_bar * R_bar)
        weights = w * 2.0 * gaussian_tail(-R_bar * z / c)
    total = float(weights.sum())
    if abs(total - 1.0) > 1e-6:
        raise AccuracyError(
            f"margin-law weights sum to {total!r}, expected 1",
            estimate=total, residual=abs(total - 1.0))
    order = np.argsort(deltas)
    deltas = deltas[order]
    weights = weights[order]
    edges = np.linspace(deltas[0], deltas[-1], bins + 1)
    mass, _ = np.histogram(deltas, bins=edges, weights=weights)
    return MarginLaw(mode=mode, deltas=deltas, weights=weights,
                     bin_edges=edges, bin_mass=mass)
