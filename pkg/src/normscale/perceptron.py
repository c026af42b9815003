"""Free-norm teacher-student perceptron at desk scale.

Synthetic classification instances with Rademacher inputs and a spherical
teacher, trained by full-batch gradient descent on the logistic margin loss
with the weight norm left free. The two classical reference solutions
bracket the trajectory: the Hebbian sum (where training starts pointing)
and the maximally stable direction (where the implicit bias of gradient
descent ends up). Everything is seeded and replays exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import svds

from .errors import AccuracyError, ConvergenceError

__all__ = [
    "TeacherStudentInstance", "Trajectory", "generate_instance", "train_gd",
    "analytic_eps", "hebbian_solution", "max_margin_solve",
    "stability_threshold",
]

_CHUNK_ROWS = 2048      # int8 inputs are cast to float in slices this tall


@dataclass(frozen=True)
class TeacherStudentInstance:
    """One synthetic dataset: N-dimensional Rademacher inputs, labels from
    the sign of a hidden teacher of squared norm N."""

    N: int
    P: int
    teacher: np.ndarray
    inputs: np.ndarray          # int8, shape (P, N), entries +-1
    labels: np.ndarray          # int8, shape (P,), entries +-1
    seed: int = 0

    def __post_init__(self):
        if self.N < 2 or self.P < 1:
            raise ValueError(f"need N >= 2 and P >= 1, got N={self.N} P={self.P}")
        if self.teacher.shape != (self.N,):
            raise ValueError("teacher must have shape (N,)")
        if self.inputs.shape != (self.P, self.N):
            raise ValueError("inputs must have shape (P, N)")
        if self.labels.shape != (self.P,):
            raise ValueError("labels must have shape (P,)")
        if not np.all(np.abs(self.inputs) == 1):
            raise ValueError("inputs must be +-1")
        if not np.all(np.abs(self.labels) == 1):
            raise ValueError("labels must be +-1")
        nrm2 = float(self.teacher @ self.teacher)
        if abs(nrm2 - self.N) > 1e-9 * self.N:
            raise ValueError(f"teacher squared norm is {nrm2}, expected {self.N}")
        m = self.margins(self.teacher)     # y (x . w*) / sqrt(N)
        if np.any(m < 0.0) or np.any(self.labels[m == 0.0] != 1):
            raise ValueError("labels are inconsistent with the teacher")

    @property
    def alpha(self) -> float:
        return self.P / self.N

    def margins(self, w: np.ndarray) -> np.ndarray:
        """Per-sample margins y * (x . w) / sqrt(N), in float64."""
        w = np.asarray(w, dtype=np.float64)
        out = np.empty(self.P)
        # chunked cast keeps the int8 input matrix as the only large array
        for lo in range(0, self.P, _CHUNK_ROWS):
            hi = min(lo + _CHUNK_ROWS, self.P)
            out[lo:hi] = self.inputs[lo:hi].astype(np.float64) @ w
        return self.labels * out / math.sqrt(self.N)


def generate_instance(N: int, alpha: float, seed: int) -> TeacherStudentInstance:
    """Draw a teacher uniformly on the radius-sqrt(N) sphere, Rademacher
    inputs, and labels y = sign(x . w*), with sign(0) resolved to +1."""
    if N < 2:
        raise ValueError(f"need N >= 2, got {N}")
    P = int(round(alpha * N))
    if P < 1:
        raise ValueError(f"alpha N rounds to {P}, need at least one sample")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal(N)
    teacher *= math.sqrt(N) / math.sqrt(float(teacher @ teacher))
    inputs = (2 * rng.integers(0, 2, size=(P, N), dtype=np.int8) - 1).astype(np.int8)
    fields = np.empty(P)
    for lo in range(0, P, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, P)
        fields[lo:hi] = inputs[lo:hi].astype(np.float64) @ teacher
    labels = np.where(fields >= 0.0, 1, -1).astype(np.int8)
    return TeacherStudentInstance(N=N, P=P, teacher=teacher, inputs=inputs,
                                  labels=labels, seed=int(seed))


@dataclass(frozen=True)
class Trajectory:
    """Snapshots of one gradient-descent run, ordered by step, plus the
    final weight vector."""

    steps: np.ndarray           # int64, strictly increasing
    norm: np.ndarray            # |w(t)|
    overlap: np.ndarray         # cosine with the teacher
    eps: np.ndarray             # arccos(overlap) / pi
    train_loss: np.ndarray
    final_w: np.ndarray
    lr: float
    total_steps: int
    schedule: np.ndarray
    seed: int

    def __post_init__(self):
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("snapshot steps must be strictly increasing")
        if not np.allclose(self.eps, np.arccos(self.overlap) / np.pi,
                           rtol=0, atol=1e-12):
            raise ValueError("eps snapshots must equal arccos(overlap)/pi")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "norm", "overlap", "eps", "train_loss"])
            for i in range(len(self.steps)):
                writer.writerow([int(self.steps[i]), repr(float(self.norm[i])),
                                 repr(float(self.overlap[i])),
                                 repr(float(self.eps[i])),
                                 repr(float(self.train_loss[i]))])

    def to_json(self, path):
        doc = {
            "config": {
                "lr": self.lr,
                "steps": self.total_steps,
                "schedule": [int(s) for s in self.schedule],
                "seed": self.seed,
            },
            "snapshots": [
                {"step": int(self.steps[i]), "norm": float(self.norm[i]),
                 "overlap": float(self.overlap[i]), "eps": float(self.eps[i]),
                 "train_loss": float(self.train_loss[i])}
                for i in range(len(self.steps))
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def analytic_eps(w, instance: TeacherStudentInstance) -> float:
    """Generalization error of student w against the instance's teacher,
    eps = arccos(cos(w, w*)) / pi. The norm of w is irrelevant."""
    w = np.asarray(w, dtype=np.float64)
    nw = float(np.linalg.norm(w))
    if not np.isfinite(nw) or nw == 0.0:
        raise ValueError("student vector must be finite and nonzero")
    cosine = float(w @ instance.teacher) / (nw * math.sqrt(instance.N))
    return float(np.arccos(np.clip(cosine, -1.0, 1.0)) / np.pi)


def hebbian_solution(instance: TeacherStudentInstance) -> np.ndarray:
    """The Hebbian student sum_mu y_mu x_mu, rescaled to squared norm N."""
    w = np.zeros(instance.N)
    y = instance.labels.astype(np.float64)
    for lo in range(0, instance.P, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, instance.P)
        w += y[lo:hi] @ instance.inputs[lo:hi].astype(np.float64)
    nrm = float(np.linalg.norm(w))
    if nrm == 0.0:
        raise ValueError("Hebbian sum vanished; degenerate instance")
    return w * (math.sqrt(instance.N) / nrm)


def _margin_matrix(instance: TeacherStudentInstance) -> np.ndarray:
    """Z with rows y_mu x_mu / sqrt(N), float32; margins(w) = Z @ w."""
    Z = instance.inputs.astype(np.float32)
    Z *= instance.labels[:, None].astype(np.float32)
    Z /= np.float32(math.sqrt(instance.N))
    return Z


def stability_threshold(instance: TeacherStudentInstance) -> float:
    """Largest learning rate with guaranteed non-increasing full-batch loss.

    The loss sum_mu V(Delta_mu) has curvature at most V'' <= 1 per sample,
    so its Hessian is bounded by Z^T Z and gradient descent descends for
    lr <= 1 / sigma_max(Z)^2 (one extra factor of 2 is left as margin).
    """
    Z = _margin_matrix(instance).astype(np.float64)
    k = min(Z.shape) - 1
    if k < 1:
        sigma = float(np.linalg.norm(Z, 2))
    else:
        v0 = np.ones(min(Z.shape)) / math.sqrt(min(Z.shape))
        sigma = float(svds(Z, k=1, v0=v0, return_singular_vectors=False)[0])
    return 1.0 / (sigma * sigma)


def _logistic_loss(delta):
    # V(d) = log(1 + exp(-2 d)) = log1p(exp(-2|d|)) + max(-2 d, 0), stable
    # on both tails
    d = np.asarray(delta)
    return np.log1p(np.exp(-2.0 * np.abs(d))) + 2.0 * np.maximum(-d, 0.0)


def _default_schedule(steps: int) -> np.ndarray:
    pts = np.unique(np.round(np.geomspace(1.0, max(steps, 1), 200)).astype(np.int64))
    return np.concatenate([[0], pts[pts <= steps]])


def train_gd(instance: TeacherStudentInstance, lr: float | None = None,
             steps: int = 10 ** 6, schedule=None, seed: int = 0) -> Trajectory:
    """Full-batch gradient descent on sum_mu V(Delta_mu) at unit sharpness,
    with the norm left free.

    w(0) is drawn uniformly on the sphere of squared norm N from the given
    seed. lr defaults to 0.1/sqrt(N); the snapshot schedule defaults to 200
    log-spaced steps (norm growth is roughly logarithmic in time). Snapshot
    statistics are computed in float64; the descent itself runs in float32
    BLAS, which is what makes a million full-batch steps affordable.
    """
    if lr is None:
        lr = 0.1 / math.sqrt(instance.N)
    if not (np.isfinite(lr) and lr > 0):
        raise ValueError(f"learning rate must be positive, got {lr}")
    if steps < 1:
        raise ValueError(f"need at least one step, got {steps}")
    if schedule is None:
        schedule = _default_schedule(steps)
    schedule = np.unique(np.asarray(schedule, dtype=np.int64))
    if len(schedule) == 0 or schedule[0] < 0 or schedule[-1] > steps:
        raise ValueError("snapshot schedule must lie within [0, steps]")

    rng = np.random.default_rng(seed)
    w64 = rng.standard_normal(instance.N)
    w64 *= math.sqrt(instance.N) / math.sqrt(float(w64 @ w64))

    Z = _margin_matrix(instance)
    w = w64.astype(np.float32)
    lr32 = np.float32(lr)
    snap_at = set(int(s) for s in schedule)
    rec = {k: [] for k in ("steps", "norm", "overlap", "eps", "train_loss")}

    def record(k, wvec):
        wd = wvec.astype(np.float64)
        delta = instance.margins(wd)
        total = float(_logistic_loss(delta).sum())
        if not np.isfinite(total):
            raise AccuracyError(f"non-finite loss at step {k}", estimate=total)
        nrm = float(np.linalg.norm(wd))
        cosine = float(wd @ instance.teacher) / (nrm * math.sqrt(instance.N))
        cosine = float(np.clip(cosine, -1.0, 1.0))
        rec["steps"].append(k)
        rec["norm"].append(nrm)
        rec["overlap"].append(cosine)
        rec["eps"].append(float(np.arccos(cosine) / np.pi))
        rec["train_loss"].append(total)

    if 0 in snap_at:
        record(0, w)
    for k in range(1, steps + 1):
        delta = Z @ w
        u = np.exp(-2.0 * np.abs(delta))
        slope = np.where(delta >= 0, -2.0 * u / (1.0 + u), -2.0 / (1.0 + u))
        grad = slope @ Z
        if not np.all(np.isfinite(grad)):
            raise AccuracyError(f"non-finite gradient at step {k}")
        w = w - lr32 * grad
        if k in snap_at:
            record(k, w)

    return Trajectory(
        steps=np.array(rec["steps"], dtype=np.int64),
        norm=np.array(rec["norm"]), overlap=np.array(rec["overlap"]),
        eps=np.array(rec["eps"]), train_loss=np.array(rec["train_loss"]),
        final_w=w.astype(np.float64), lr=float(lr), total_steps=int(steps),
        schedule=schedule, seed=int(seed))


def _gram_norm(Z: np.ndarray, iters: int = 120) -> float:
    """sigma_max(Z)^2 by power iteration on Z^T Z, inflated by 5% so it
    stays a valid Lipschitz bound: the top of the squared-singular-value
    bulk is not isolated for these matrices, so the iteration approaches
    it from below only algebraically."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(Z.shape[1]).astype(Z.dtype)
    v /= Z.dtype.type(np.linalg.norm(v))
    lam = 0.0
    for _ in range(iters):
        s = Z @ v
        v = s @ Z
        lam = float(np.linalg.norm(v))
        v /= Z.dtype.type(lam)
    return 1.05 * lam


def max_margin_solve(instance: TeacherStudentInstance, tol: float = 1e-4,
                     max_iters: int = 200_000) -> np.ndarray:
    """Maximally stable student: the direction maximizing the minimum
    margin, returned at squared norm N.

    Solves min |w|^2 subject to margins >= 1 through its nonnegative dual
    (accelerated projected gradient with adaptive restart), and certifies
    the answer with the duality gap: the rescaled primal iterate achieves a
    minimum margin within tol (relative) of the best any direction can do.
    Separability is guaranteed by the teacher construction, so the primal
    is feasible. The iteration runs in float32, which bounds the certified
    gap well below the default tolerance; the returned vector is rebuilt
    from the dual weights in float64.
    """
    if not (np.isfinite(tol) and 1e-6 <= tol < 1):
        # below 1e-6 the working-precision gap estimate is all noise
        raise ValueError(f"tol must lie in [1e-6, 1), got {tol}")
    Z = _margin_matrix(instance)
    # small problems run in double; at scale the iteration runs in single
    # precision (it is memory-bound) and every candidate answer is
    # re-certified exactly below before it can be returned
    if Z.size >= 1_000_000:
        dt = np.float32
    else:
        dt = np.float64
        Z = Z.astype(np.float64)
    P = instance.P
    lip = dt(_gram_norm(Z))

    def certify(avec):
        # rebuild w = Z^T a in float64 straight from the integer inputs;
        # the resulting duality-gap bound is exact for this iterate
        coeff = avec.astype(np.float64) * instance.labels
        wt = np.zeros(instance.N)
        for lo in range(0, P, _CHUNK_ROWS):
            hi = min(lo + _CHUNK_ROWS, P)
            wt += coeff[lo:hi] @ instance.inputs[lo:hi].astype(np.float64)
        wt /= math.sqrt(instance.N)
        m_min = float(instance.margins(wt).min())
        dual = float(avec.sum(dtype=np.float64)) - 0.5 * float(wt @ wt)
        if m_min <= 0.0 or dual <= 0.0:
            return math.inf, wt
        # w/m_min is feasible, so |w|^2/m_min^2 upper-bounds the primal
        # optimum and dual lower-bounds it; the achieved minimum margin is
        # within sqrt(primal/dual) - 1 of the best possible
        primal = 0.5 * float(wt @ wt) / (m_min * m_min)
        return math.sqrt(primal / dual) - 1.0, wt

    one, zero = dt(1.0), dt(0.0)
    a = np.zeros(P, dtype=dt)
    y_acc = a
    t_acc = 1.0
    check_every = 50
    last_certify = -10 ** 9
    gap = math.inf
    for it in range(1, max_iters + 1):
        grad = y_acc @ Z
        a_new = np.maximum(y_acc + (one - (Z @ grad)) / lip, zero)
        if float((y_acc - a_new) @ (a_new - a)) > 0.0:
            # momentum points uphill; restart it (this is what turns the
            # 1/k^2 rate into a linear one once the support has settled)
            t_new = 1.0
            y_acc = a_new
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc))
            y_acc = a_new + dt((t_acc - 1.0) / t_new) * (a_new - a)
        a, t_acc = a_new, t_new
        if it % check_every == 0 or it == max_iters:
            w = a @ Z
            margins = Z @ w
            m_min = float(margins.min())
            dual = float(a.sum(dtype=np.float64)) - 0.5 * float(w @ w)
            if m_min <= 0.0 or dual <= 0.0:
                continue
            primal = 0.5 * float(w @ w) / (m_min * m_min)
            quick = math.sqrt(primal / dual) - 1.0
            # the in-loop estimate steers; only the exact certificate can
            # declare success (working precision may sit right at tol)
            if quick <= 3.0 * tol and it - last_certify >= 250:
                last_certify = it
                gap, wt = certify(a)
                if gap <= tol:
                    return wt * (math.sqrt(instance.N)
                                 / math.sqrt(float(wt @ wt)))
    gap, wt = certify(a)
    if gap <= tol:
        return wt * (math.sqrt(instance.N) / math.sqrt(float(wt @ wt)))
    raise ConvergenceError(
        f"margin optimization hit the {max_iters}-iteration cap with "
        f"relative margin gap {gap:.3e} (tolerance {tol:g})")
