"""Margin potentials for fixed-norm interpolation at zero temperature.

A potential V(Delta) scores the stability (signed margin) Delta of a single
pattern. The family implemented here is the sharpness-indexed logistic form

    V_lam(Delta) = -Delta + log(2 cosh(lam * Delta)) / lam
                 = log(1 + exp(-2 lam Delta)) / lam,

which interpolates between the Hebb rule (lam -> 0, up to an additive
constant log(2)/lam that cancels in every saddle-point quantity) and the
hard-margin limit V(Delta) = -2 Delta theta(-Delta) as lam -> infinity.
The hard limit is representable for plotting but is not smooth enough for
proximal steps or saddle solves.

All formulas are written in terms of u = exp(-2 lam |Delta|), which avoids
the catastrophic cancellation of tanh(z) - 1 at large z and keeps the
potential meaningful up to sharpness values where exp(-2 lam Delta) itself
leaves the float64 range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DegeneratePotentialError

__all__ = ["MarginPotential", "log2cosh"]

_PROX_GTOL = 1e-12
_PROX_MAX_ITERS = 200


def log2cosh(z):
    """log(2 cosh(z)), overflow-safe for large |z|."""
    z = np.abs(np.asarray(z, dtype=float))
    return z + np.log1p(np.exp(-2.0 * z))


def _logistic_value(lam, d):
    # log(1 + exp(-2 lam d)) / lam, split by sign for stability
    d = np.asarray(d, dtype=float)
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = np.log1p(np.exp(-2.0 * lam * d[pos])) / lam
    dn = d[~pos]
    out[~pos] = -2.0 * dn + np.log1p(np.exp(2.0 * lam * dn)) / lam
    return out


def _logistic_slope(lam, d):
    # V'(d) = tanh(lam d) - 1 = -2 / (1 + exp(2 lam d)), cancellation-free
    d = np.asarray(d, dtype=float)
    u = np.exp(-2.0 * lam * np.abs(d))
    return np.where(d >= 0, -2.0 * u / (1.0 + u), -2.0 / (1.0 + u))


def _logistic_curvature(lam, d):
    # V''(d) = lam * (1 - tanh^2) = 4 lam u / (1 + u)^2 with u = exp(-2 lam |d|)
    d = np.asarray(d, dtype=float)
    u = np.exp(-2.0 * lam * np.abs(d))
    return 4.0 * lam * u / (1.0 + u) ** 2


@dataclass(frozen=True)
class MarginPotential:
    """One member of the margin-potential family.

    kind is "logistic" (finite sharpness > 0), "hebbian" (the lam -> 0
    limit, V = -Delta) or "hinge_limit" (the lam -> infinity limit).
    sharpness is set only for the logistic kind.
    """

    kind: str
    sharpness: float | None = None

    def __post_init__(self):
        if self.kind not in ("logistic", "hebbian", "hinge_limit"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "logistic":
            if self.sharpness is None or not np.isfinite(self.sharpness) or self.sharpness <= 0:
                raise ValueError("logistic potential needs finite sharpness > 0")
        elif self.sharpness is not None:
            raise ValueError(f"{self.kind} potential takes no sharpness")

    @classmethod
    def logistic(cls, sharpness: float) -> "MarginPotential":
        return cls("logistic", float(sharpness))

    @classmethod
    def hebbian(cls) -> "MarginPotential":
        return cls("hebbian")

    @classmethod
    def hinge_limit(cls) -> "MarginPotential":
        return cls("hinge_limit")

    @property
    def is_smooth(self) -> bool:
        """True when V is differentiable everywhere (all kinds except the
        hard-margin limit, which has a kink at 0)."""
        return self.kind != "hinge_limit"

    def value(self, delta):
        """V(delta). Scalar in, float out; array in, array out."""
        d = np.asarray(delta, dtype=float)
        if self.kind == "logistic":
            out = _logistic_value(self.sharpness, d)
        elif self.kind == "hebbian":
            out = -d
        else:
            out = np.where(d < 0, -2.0 * d, 0.0)
        return float(out) if np.ndim(delta) == 0 else out

    def derivative(self, delta):
        """V'(delta). The hard-margin limit is not differentiable at 0."""
        d = np.asarray(delta, dtype=float)
        if self.kind == "logistic":
            out = _logistic_slope(self.sharpness, d)
        elif self.kind == "hebbian":
            out = np.full_like(d, -1.0)
        else:
            if np.any(d == 0.0):
                raise ValueError("hard-margin potential is not differentiable at delta = 0")
            out = np.where(d < 0, -2.0, 0.0)
        return float(out) if np.ndim(delta) == 0 else out

    def prox(self, t, x):
        """Proximal map: argmin over Delta of V(Delta) + (Delta - t)^2 / (2 x).

        The quadratic makes the objective strictly convex for x > 0, so the
        minimizer is unique. For the logistic kind the stationarity condition
        V'(Delta) + (Delta - t)/x = 0 is rewritten as
        log(-V'(Delta)) = log((Delta - t)/x) and solved by Newton steps on
        the log form, safeguarded with bisection. The log form matters: in
        the regime where -V' decays like exp(-2 lam Delta), plain Newton
        advances by a fixed 1/(2 lam) per step and can need hundreds of
        iterations, while the log residual is close to linear there. Since
        V' lies in (-2, 0) the root sits in (t, t + 2x); for large x the
        upper end is tightened to max(t, 0) + (log(1 + 4 lam x) + 5)/(2 lam),
        which still brackets the root but keeps the interval bisectable when
        x is huge.

        t may be a scalar or an array; x is a positive scalar.
        """
        x = float(x)
        if not np.isfinite(x) or x <= 0:
            raise ValueError(f"prox needs x > 0, got {x}")
        if self.kind == "hinge_limit":
            raise DegeneratePotentialError(
                "hard-margin limit has no smooth proximal map; use a large "
                "finite sharpness instead")
        scalar = np.ndim(t) == 0
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "hebbian":
            out = t_arr + x
            return float(out[0]) if scalar else out

        lam = self.sharpness
        lo = t_arr.copy()
        cap = np.maximum(t_arr, 0.0) + (np.log1p(4.0 * lam * x) + 5.0) / (2.0 * lam)
        hi = np.minimum(t_arr + 2.0 * x, cap)
        d = 0.5 * (lo + hi)
        log_x = math.log(x)
        # converge on the Newton step, not the residual: the envelope error
        # scales as x * V'' * (position error)^2, so position accuracy is
        # what the energy integrals actually need; a collapsed bracket counts
        # as converged too, since the root cannot hide in an empty interval
        for _ in range(_PROX_MAX_ITERS):
            s = 2.0 * lam * d
            t1 = np.exp(-np.abs(s))
            # q = log(-V'(d)) - log((d - t)/x), monotone decreasing in d;
            # d - t underflowing to zero sends q to +inf, which the bisection
            # fallback below absorbs
            with np.errstate(divide="ignore", invalid="ignore"):
                q = (math.log(2.0) - np.maximum(s, 0.0) - np.log1p(t1)
                     - np.log(d - t_arr) + log_x)
                inv1pu = np.where(s >= 0, 1.0 / (1.0 + t1), t1 / (1.0 + t1))
                step = q / (-2.0 * lam * inv1pu - 1.0 / (d - t_arr))
            ptol = _PROX_GTOL * np.maximum(1.0, np.abs(d))
            if ((np.abs(step) <= ptol) | (hi - lo <= ptol)).all():
                d = np.clip(np.where(np.isfinite(step), d - step, d), lo, hi)
                break
            lo = np.where(q > 0, d, lo)
            hi = np.where(q < 0, d, hi)
            d_new = d - step
            # bisect whenever Newton leaves the bracket or jumps by more
            # than half its width; the second clause breaks the two-cycles
            # Newton falls into on strongly curved stretches of q
            fallback = (~np.isfinite(d_new) | (d_new <= lo) | (d_new >= hi)
                        | (np.abs(step) > 0.5 * (hi - lo)))
            d = np.where(fallback, 0.5 * (lo + hi), d_new)
        else:
            g = _logistic_slope(lam, d) + (d - t_arr) / x
            raise ConvergenceError(
                f"proximal iteration stalled at residual {float(np.max(np.abs(g))):.3e}",
                last_state=d)
        return float(d[0]) if scalar else d

    def prox_objective(self, delta, t, x):
        """The proximal objective V(Delta) + (Delta - t)^2 / (2 x)."""
        d = np.asarray(delta, dtype=float)
        t = np.asarray(t, dtype=float)
        out = self.value(d) + (d - t) ** 2 / (2.0 * float(x))
        return float(out) if np.ndim(delta) == 0 and np.ndim(t) == 0 else out
