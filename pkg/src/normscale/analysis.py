"""Scaling-law analysis of norm-indexed learning curves.

The pipeline: locate each curve's optimum, rescale by it, fit the
descending branch as a power law eps = k1 lam^(-gamma1) + q1, fit the
optimum location as lam_opt = k2 P^(gamma2) + q2, and combine the two into
an end-of-training law

    eps(P) = k1 (k2 P^gamma2 + q2)^(-gamma1) + q1

whose exponent gamma1*gamma2 is predicted from the two partial fits and
checked against a direct fit, with errors propagated in quadrature.

Power-law windows are picked by a stated rule (the widest contiguous span
whose log-log residual stays small) rather than by eye, so every fit in a
report is reproducible from the raw curves.
"""
from __future__ import annotations

import json
import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import AccuracyError

__all__ = [
    "PowerLawFit", "CurveData", "Optimum", "CollapseResult",
    "ExponentPrediction", "CombinedCurve", "find_optimum", "fit_power_law",
    "collapse", "fit_lambda_opt", "predict_exponent", "combined_curve",
    "thresholds", "collapse_deviation",
]

_WINDOW_RMS = 0.02      # auto-window residual ceiling, in log units
_MIN_WINDOW = 4


@dataclass(frozen=True)
class PowerLawFit:
    """y = k x^(+-gamma) + q on a stated window of x."""

    k: float
    gamma: float
    q: float
    sigma_gamma: float
    window: tuple
    rms_log_residual: float

    def __post_init__(self):
        if not (self.k > 0):
            raise ValueError(f"k must be positive, got {self.k}")
        if self.sigma_gamma < 0:
            raise ValueError("sigma_gamma must be nonnegative")
        lo, hi = self.window
        if not lo < hi:
            raise ValueError("window must be a non-empty (x_min, x_max)")

    def as_dict(self) -> dict:
        return {"k": self.k, "gamma": self.gamma, "q": self.q,
                "sigma_gamma": self.sigma_gamma,
                "window": [self.window[0], self.window[1]],
                "rms_log_residual": self.rms_log_residual}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class CurveData:
    """One learning curve reduced to what the analysis needs: an index
    (P for trained networks, the sample ratio for solved ones), norms, and
    errors."""

    P: float
    lam: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        if self.lam.shape != self.eps.shape or self.lam.ndim != 1:
            raise ValueError("lam and eps must be matching 1-D arrays")
        if np.any(self.lam <= 0):
            raise ValueError("norms must be positive")


def _as_curve(curve) -> CurveData:
    if isinstance(curve, CurveData):
        return curve
    # duck-typed view of a trained learning curve
    return CurveData(P=float(curve.P), lam=np.asarray(curve.lam, float),
                     eps=np.asarray(curve.test_error, float))


Optimum = namedtuple("Optimum", ["lambda_opt", "eps_opt", "terminal"])


def find_optimum(curve) -> Optimum:
    """Global minimum of the error over snapshots; ties go to the smallest
    norm. `terminal` reports whether the minimum sits at the last
    snapshot (saturation) rather than an interior overfitting point."""
    c = _as_curve(curve)
    if len(c.lam) < 3:
        raise ValueError("need at least 3 snapshots to locate an optimum")
    best = float(np.min(c.eps))
    ties = np.flatnonzero(c.eps == best)
    at = ties[np.argmin(c.lam[ties])]
    return Optimum(lambda_opt=float(c.lam[at]), eps_opt=float(c.eps[at]),
                   terminal=bool(at == len(c.lam) - 1))


def _ols_loglog(logx, logy):
    """Slope, intercept, sigma_slope, rms residual of a straight-line fit."""
    n = len(logx)
    mx = logx.mean()
    sxx = float(np.sum((logx - mx) ** 2))
    if sxx == 0.0:
        raise ValueError("degenerate x-range: all abscissas equal")
    slope = float(np.sum((logx - mx) * (logy - logy.mean())) / sxx)
    intercept = float(logy.mean() - slope * mx)
    resid = logy - (intercept + slope * logx)
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if n > 2:
        sigma = float(np.sqrt(np.sum(resid ** 2) / (n - 2) / sxx))
    else:
        sigma = 0.0
    return slope, intercept, sigma, rms


def _auto_window(logx, logy):
    """Widest contiguous run of at least _MIN_WINDOW points whose log-log
    residual stays below _WINDOW_RMS; ties go to the smaller residual.

    The run must cover a strict majority of the points. A short run
    passing the residual ceiling inside scattered data is luck, not a
    power-law region, and fitting it would report a confident nonsense
    slope; rejecting it makes the caller fall back to the full span."""
    n = len(logx)
    # prefix sums make each candidate window an O(1) evaluation
    px = np.concatenate([[0.0], np.cumsum(logx)])
    py = np.concatenate([[0.0], np.cumsum(logy)])
    pxx = np.concatenate([[0.0], np.cumsum(logx * logx)])
    pxy = np.concatenate([[0.0], np.cumsum(logx * logy)])
    pyy = np.concatenate([[0.0], np.cumsum(logy * logy)])
    best = None
    for i in range(n - _MIN_WINDOW + 1):
        for j in range(i + _MIN_WINDOW, n + 1):
            m = j - i
            sx = px[j] - px[i]
            sy = py[j] - py[i]
            sxx = pxx[j] - pxx[i] - sx * sx / m
            sxy = pxy[j] - pxy[i] - sx * sy / m
            syy = pyy[j] - pyy[i] - sy * sy / m
            if sxx <= 0.0:
                continue
            rss = max(syy - sxy * sxy / sxx, 0.0)
            rms = math.sqrt(rss / m)
            if rms >= _WINDOW_RMS:
                continue
            key = (-m, rms, i)
            if best is None or key < best[0]:
                best = (key, i, j)
    if best is None or (best[2] - best[1]) * 2 <= n:
        raise AccuracyError(
            f"no contiguous majority window of {_MIN_WINDOW}+ points fits "
            f"a power law within rms {_WINDOW_RMS} in log space")
    return best[1], best[2]


def fit_power_law(xs, ys, offset_mode: str = "zero", window=None,
                  decreasing: bool = False,
                  q_resolution: int = 2001) -> PowerLawFit:
    """Least-squares power law in log space.

    offset_mode="zero" fits y = k x^s directly; "scan" fits y = k x^s + q
    by a 1-D grid over q (resolution configurable) refined locally, which
    is globally reliable for this one-bump family where a joint nonlinear
    fit is not. With decreasing=True the reported gamma is -s, matching
    the error-curve orientation eps = k lam^(-gamma) + q.

    window=None picks the span automatically: the widest contiguous run of
    points whose straight-line log-log residual stays below 0.02, judged
    on the raw (offset-free) values. The ceiling trims systematic
    curvature in clean data; when scatter makes it unsatisfiable every
    point is used. An explicit (x_min, x_max) overrides the rule.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be matching 1-D arrays")
    if np.any(xs <= 0):
        raise ValueError("xs must be positive")
    if window is not None:
        lo, hi = window
        keep = (xs >= lo) & (xs <= hi)
        xs, ys = xs[keep], ys[keep]
    order = np.argsort(xs)
    xs, ys = xs[order], ys[order]
    if len(xs) < _MIN_WINDOW:
        raise ValueError(f"need at least {_MIN_WINDOW} points, got {len(xs)}")
    if window is None and np.all(ys > 0):
        try:
            i, j = _auto_window(np.log(xs), np.log(ys))
        except AccuracyError:
            pass
        else:
            xs, ys = xs[i:j], ys[i:j]

    if offset_mode == "zero":
        q_best = 0.0
    elif offset_mode == "scan":
        ymin = float(ys.min())
        if ymin <= 0:
            raise ValueError("offset scan needs positive ys")
        logx = np.log(xs)

        def rms_at(q):
            shifted = ys - q
            if np.any(shifted <= 0):
                return math.inf
            try:
                return _ols_loglog(logx, np.log(shifted))[3]
            except ValueError:
                return math.inf

        qs = np.linspace(0.0, ymin * (1.0 - 1e-9), q_resolution)
        scores = np.array([rms_at(q) for q in qs])
        b = int(np.argmin(scores))
        lo_q = qs[max(b - 1, 0)]
        hi_q = qs[min(b + 1, len(qs) - 1)]
        if hi_q > lo_q:
            res = minimize_scalar(rms_at, bounds=(lo_q, hi_q),
                                  method="bounded",
                                  options={"xatol": 1e-14})
            q_best = float(res.x) if res.fun <= scores[b] else float(qs[b])
        else:
            q_best = float(qs[b])
    else:
        raise ValueError(f"offset_mode must be 'zero' or 'scan', "
                         f"got {offset_mode!r}")

    shifted = ys - q_best
    if np.any(shifted <= 0):
        raise ValueError("ys must exceed the offset everywhere in the window")
    slope, intercept, sigma, rms = _ols_loglog(np.log(xs), np.log(shifted))
    gamma = -slope if decreasing else slope
    return PowerLawFit(k=math.exp(intercept), gamma=gamma, q=q_best,
                       sigma_gamma=sigma,
                       window=(float(xs[0]), float(xs[-1])),
                       rms_log_residual=rms)


@dataclass(frozen=True)
class CollapseResult:
    """Curves rescaled by their own optima, with per-curve exponent fits."""

    optima: dict                 # P -> Optimum
    rescaled: dict               # P -> (lam/lam_opt, eps/eps_opt)
    gamma1_by_P: dict            # P -> per-curve exponent of the rise
    gamma1_mean: float
    gamma1_sem: float
    P_min_used: float

    def __post_init__(self):
        for P, (u, v) in self.rescaled.items():
            at = int(np.argmin(np.abs(u - 1.0)))
            if abs(u[at] - 1.0) > 1e-12 or abs(v[at] - 1.0) > 1e-12:
                raise ValueError(
                    f"rescaled curve P={P} misses (1,1) at its optimum")
        vals = np.array(sorted(self.gamma1_by_P.values()))
        sem = (float(np.std(vals, ddof=1)) / math.sqrt(len(vals))
               if len(vals) > 1 else 0.0)
        if not math.isclose(self.gamma1_sem, sem, rel_tol=1e-9, abs_tol=1e-300):
            raise ValueError("gamma1_sem must be the standard error of "
                             "the per-curve values")

    def rescaled_to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("P,lam_rescaled,eps_rescaled\n")
            for P in sorted(self.rescaled):
                u, v = self.rescaled[P]
                for a, b in zip(u, v):
                    fh.write(f"{float(P)!r},{float(a)!r},{float(b)!r}\n")


def _gamma1_of_curve(c: CurveData, opt: Optimum, fit_window):
    u = c.lam / opt.lambda_opt
    v = c.eps / opt.eps_opt
    keep = u < 1.0
    if fit_window is not None:
        keep &= (u >= fit_window[0]) & (u <= fit_window[1])
    if int(keep.sum()) < _MIN_WINDOW:
        raise ValueError(
            f"curve P={c.P} has {int(keep.sum())} points below its "
            f"optimum; need {_MIN_WINDOW}")
    u, v = u[keep], v[keep]
    # a confirmed window is used as given; otherwise the automatic rule
    explicit = (float(u.min()), float(u.max())) if fit_window is not None \
        else None
    fit = fit_power_law(u, v, offset_mode="zero", window=explicit,
                        decreasing=True)
    return fit.gamma


def collapse(curves, P_min=None, fit_window=None) -> CollapseResult:
    """Rescale every curve by its own optimum and fit the common rise.

    With P_min=None the cut is chosen by a stated rule: starting from the
    three largest P, smaller curves join as long as each inclusion moves
    the running mean exponent by less than one standard error.
    """
    data = sorted((_as_curve(c) for c in curves), key=lambda c: -c.P)
    if P_min is not None:
        data = [c for c in data if c.P >= P_min]
    if len(data) < 3:
        raise ValueError("need at least 3 curves at or above P_min")
    Ps = [c.P for c in data]
    if len(set(Ps)) != len(Ps):
        raise ValueError("duplicate P values in the curve set")

    opts = {c.P: find_optimum(c) for c in data}
    gammas = {c.P: _gamma1_of_curve(c, opts[c.P], fit_window) for c in data}

    if P_min is None:
        chosen = data[:3]
        vals = [gammas[c.P] for c in chosen]
        for c in data[3:]:
            mean_old = float(np.mean(vals))
            sem_old = float(np.std(vals, ddof=1)) / math.sqrt(len(vals))
            mean_new = float(np.mean(vals + [gammas[c.P]]))
            if abs(mean_new - mean_old) <= sem_old + 1e-12:
                chosen.append(c)
                vals.append(gammas[c.P])
            else:
                break
        data = chosen

    kept = {c.P for c in data}
    opts = {P: o for P, o in opts.items() if P in kept}
    gammas = {P: g for P, g in gammas.items() if P in kept}
    rescaled = {c.P: (c.lam / opts[c.P].lambda_opt,
                      c.eps / opts[c.P].eps_opt) for c in data}
    vals = np.array([gammas[P] for P in sorted(kept)])
    sem = (float(np.std(vals, ddof=1)) / math.sqrt(len(vals))
           if len(vals) > 1 else 0.0)
    return CollapseResult(
        optima=opts, rescaled=rescaled, gamma1_by_P=gammas,
        gamma1_mean=float(np.mean(vals)), gamma1_sem=sem,
        P_min_used=float(min(kept)))


def fit_lambda_opt(optima, offset_mode: str = "zero",
                   window=None) -> PowerLawFit:
    """Power law for the optimum location, lam_opt = k2 P^gamma2 + q2.

    `optima` maps P to lam_opt (or to an Optimum)."""
    Ps = np.array(sorted(optima), dtype=np.float64)
    if len(Ps) < _MIN_WINDOW:
        raise ValueError(f"need at least {_MIN_WINDOW} P values")
    lams = np.array([
        optima[P].lambda_opt if isinstance(optima[P], Optimum)
        else float(optima[P]) for P in sorted(optima)])
    return fit_power_law(Ps, lams, offset_mode=offset_mode, window=window,
                         decreasing=False)


@dataclass(frozen=True)
class ExponentPrediction:
    """gamma_pred = gamma1 * gamma2 with errors propagated in quadrature
    and compared against a directly fitted exponent."""

    gamma_pred: float
    sigma_pred: float
    gamma_meas: float
    sigma_meas: float
    sigma_combined: float
    agrees: bool

    def __post_init__(self):
        expect = math.sqrt(self.sigma_pred ** 2 + self.sigma_meas ** 2)
        if not math.isclose(self.sigma_combined, expect, rel_tol=1e-12,
                            abs_tol=1e-300):
            raise ValueError("sigma_combined must combine the two errors "
                             "in quadrature")


def predict_exponent(collapse_result, lambda_fit: PowerLawFit,
                     direct_fit: PowerLawFit) -> ExponentPrediction:
    """Predicted end-of-training exponent gamma1*gamma2 versus the direct
    fit, with sigma_pred = gamma_pred sqrt((s1/g1)^2 + (s2/g2)^2).

    The first argument is a CollapseResult or a bare (gamma1, sigma1)
    pair."""
    if isinstance(collapse_result, CollapseResult):
        g1, s1 = collapse_result.gamma1_mean, collapse_result.gamma1_sem
    else:
        g1, s1 = collapse_result
    g2, s2 = lambda_fit.gamma, lambda_fit.sigma_gamma
    if g1 == 0.0 or g2 == 0.0:
        raise ValueError("zero exponent makes the relative error undefined")
    gamma_pred = g1 * g2
    sigma_pred = abs(gamma_pred) * math.sqrt((s1 / g1) ** 2 + (s2 / g2) ** 2)
    gamma_meas = direct_fit.gamma
    sigma_meas = direct_fit.sigma_gamma
    sigma_combined = math.sqrt(sigma_pred ** 2 + sigma_meas ** 2)
    agrees = abs(gamma_pred - gamma_meas) <= 2.0 * sigma_combined
    return ExponentPrediction(
        gamma_pred=gamma_pred, sigma_pred=sigma_pred, gamma_meas=gamma_meas,
        sigma_meas=sigma_meas, sigma_combined=sigma_combined, agrees=agrees)


@dataclass(frozen=True)
class CombinedCurve:
    """The end-of-training law evaluated on a grid of P, with each point
    assigned to its regime: the small-P plateau, the scaling region, or
    the large-P saturation."""

    P: np.ndarray
    eps: np.ndarray
    P_minus: float | None
    P_plus: float | None
    regime: np.ndarray

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("P,eps,regime\n")
            for p, e, r in zip(self.P, self.eps, self.regime):
                fh.write(f"{float(p)!r},{float(e)!r},{r}\n")


def thresholds(fit1: PowerLawFit, fit2: PowerLawFit):
    """(P_minus, P_plus): where the scaling region begins and ends.

    P_minus = (q2/k2)^(1/gamma2) needs q2 > 0; P_plus =
    (k1 k2^(-gamma1) / q1)^(1/(gamma1 gamma2)) needs q1 > 0. A threshold
    whose offset is zero is reported as None: with no offset the
    corresponding plateau never forms."""
    P_minus = None
    if fit2.q > 0:
        P_minus = (fit2.q / fit2.k) ** (1.0 / fit2.gamma)
    P_plus = None
    if fit1.q > 0:
        P_plus = (fit1.k * fit2.k ** (-fit1.gamma) / fit1.q) ** (
            1.0 / (fit1.gamma * fit2.gamma))
    return P_minus, P_plus


def combined_curve(fit1: PowerLawFit, fit2: PowerLawFit,
                   P_grid) -> CombinedCurve:
    """eps(P) = k1 (k2 P^gamma2 + q2)^(-gamma1) + q1 on the grid."""
    P = np.asarray(P_grid, dtype=np.float64)
    if np.any(P <= 0):
        raise ValueError("P grid must be positive")
    lam = fit2.k * P ** fit2.gamma + fit2.q
    eps = fit1.k * lam ** (-fit1.gamma) + fit1.q
    P_minus, P_plus = thresholds(fit1, fit2)
    regime = np.full(P.shape, "scaling", dtype=object)
    if P_minus is not None:
        regime[P < P_minus] = "small_p"
    if P_plus is not None:
        regime[P > P_plus] = "large_p"
    return CombinedCurve(P=P, eps=eps, P_minus=P_minus, P_plus=P_plus,
                         regime=regime.astype(str))


def collapse_deviation(curves, abscissa_range, grid_points: int = 200) -> float:
    """Spread of rescaled curves: the worst (max-min)/median across curves
    after piecewise-linear interpolation in log-log onto a common grid.

    `curves` is a CollapseResult or an iterable of (lam_rescaled,
    eps_rescaled) pairs; `abscissa_range` restricts the comparison."""
    if isinstance(curves, CollapseResult):
        pairs = [curves.rescaled[P] for P in sorted(curves.rescaled)]
    else:
        pairs = [(np.asarray(u, float), np.asarray(v, float))
                 for u, v in curves]
    if len(pairs) < 2:
        raise ValueError("need at least 2 curves to measure their spread")
    lo = max(float(u.min()) for u, _ in pairs)
    hi = min(float(u.max()) for u, _ in pairs)
    lo = max(lo, float(abscissa_range[0]))
    hi = min(hi, float(abscissa_range[1]))
    if not lo < hi:
        raise ValueError("curves do not overlap on the requested range")
    grid = np.linspace(math.log(lo), math.log(hi), grid_points)
    rows = []
    for u, v in pairs:
        order = np.argsort(u)
        rows.append(np.interp(grid, np.log(u[order]), np.log(v[order])))
    vals = np.exp(np.array(rows))
    spread = (vals.max(axis=0) - vals.min(axis=0)) / np.median(vals, axis=0)
    return float(spread.max())
