"""Desk-scale deep training with norm-indexed learning curves.

Dense and residual-dense MLPs with ReLU activations and softmax
cross-entropy, trained by adaptive-moment gradient descent with zero
weight decay. Gradients are hand-written reverse mode (exact, finite-
difference checked in the tests). Every snapshot records the spectral
complexity of the live weights, so a learning curve can be read either
against time or against the norm.

A residual layer here is an ordinary matmul whose weight matrix is
initialized near the identity and measured against the identity by the
complexity norm; writing A = I + W makes z = A h and z = h + W h the same
statement, so the forward and backward passes need no special casing.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceError, DegenerateLayerError, ParseError
from .specnorm import Layer, LayeredNetwork, save_network, spectral_complexity

__all__ = [
    "Dataset", "TrainConfig", "LearningCurve", "load_idx", "write_idx",
    "synth_teacher_dataset", "train", "margin_histogram", "run_grid",
    "network_forward",
]

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Inputs scaled to [0,1], integer class labels, and a provenance tag
    describing where the samples came from."""

    inputs: np.ndarray          # samples x features, float32 in [0,1]
    labels: np.ndarray          # int64 class ids
    n_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        x, y = self.inputs, self.labels
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("inputs must be a non-empty samples x features matrix")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("labels must lie in [0, n_classes)")
        if float(x.min()) < 0.0 or float(x.max()) > 1.0:
            raise ValueError("inputs must be scaled to [0,1]")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    """Architecture and optimizer settings. Weight decay is identically
    zero and deliberately absent: the learning-curve analysis needs the
    norm left free to grow."""

    widths: tuple
    residual: tuple = None
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.001
    seed: int = 0
    cadence: int = None    # None: every epoch for 50, then every 5

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError("widths must list input, hidden..., output sizes")
        res = self.residual
        res = (False,) * (len(widths) - 1) if res is None else tuple(map(bool, res))
        object.__setattr__(self, "residual", res)
        if len(res) != len(widths) - 1:
            raise ValueError("need one residual flag per weight matrix")
        for i, flag in enumerate(res):
            if flag and widths[i] != widths[i + 1]:
                raise ValueError(f"residual layer {i} must be square")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.cadence is not None and self.cadence < 1:
            raise ValueError("cadence must be a positive epoch count")

    def config_hash(self) -> str:
        doc = {"widths": list(self.widths), "residual": list(self.residual),
               "epochs": self.epochs, "batch_size": self.batch_size,
               "lr": self.lr, "seed": self.seed, "cadence": self.cadence}
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def snapshot_epochs(self):
        if self.cadence is not None:
            marks = list(range(0, self.epochs + 1, self.cadence))
        else:
            marks = list(range(0, min(self.epochs, 50) + 1))
            marks += list(range(55, self.epochs + 1, 5))
        if marks[-1] != self.epochs:
            marks.append(self.epochs)
        return marks


@dataclass(frozen=True)
class LearningCurve:
    """One training run: the norm, errors, and loss at each snapshot."""

    P: int
    seed: int
    epochs: np.ndarray
    lam: np.ndarray             # spectral complexity of the live weights
    train_error: np.ndarray
    test_error: np.ndarray
    train_loss: np.ndarray
    config_hash: str

    def __post_init__(self):
        if np.any(np.diff(self.epochs) <= 0):
            raise ValueError("snapshot epochs must be strictly increasing")

    def lambda_monotone(self, rel_tol: float = 0.01) -> bool:
        """True when the norm never drops by more than rel_tol of its
        overall range between consecutive snapshots."""
        lam = self.lam
        slack = rel_tol * (float(lam.max()) - float(lam.min()))
        return bool(np.all(np.diff(lam) >= -slack))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["P", "seed", "epoch", "lambda", "train_error",
                             "test_error", "train_loss"])
            for i in range(len(self.epochs)):
                writer.writerow([
                    self.P, self.seed, int(self.epochs[i]),
                    repr(float(self.lam[i])), repr(float(self.train_error[i])),
                    repr(float(self.test_error[i])),
                    repr(float(self.train_loss[i]))])

    @classmethod
    def from_csv(cls, path, config_hash=""):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["P", "seed", "epoch", "lambda",
                                   "train_error", "test_error", "train_loss"]:
            raise ParseError(f"{path}: unexpected learning-curve header")
        body = rows[1:]
        if not body:
            raise ParseError(f"{path}: empty learning curve")
        cols = list(zip(*body))
        return cls(P=int(cols[0][0]), seed=int(cols[1][0]),
                   epochs=np.array([int(e) for e in cols[2]]),
                   lam=np.array([float(v) for v in cols[3]]),
                   train_error=np.array([float(v) for v in cols[4]]),
                   test_error=np.array([float(v) for v in cols[5]]),
                   train_loss=np.array([float(v) for v in cols[6]]),
                   config_hash=config_hash)


def _read_exact(fh, n, path, what):
    raw = fh.read(n)
    if len(raw) != n:
        raise ParseError(f"{path}: truncated while reading {what}")
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (big-endian headers, magic 0x803 and
    0x801) and scale pixels to [0,1]."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(
            ">iiii", _read_exact(fh, 16, images_path, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise ParseError(
                f"{images_path}: image magic is {magic:#010x}, "
                f"expected {_IDX_IMAGES_MAGIC:#010x}")
        raw = _read_exact(fh, count * rows * cols, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(
            ">ii", _read_exact(fh, 8, labels_path, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise ParseError(
                f"{labels_path}: label magic is {magic:#010x}, "
                f"expected {_IDX_LABELS_MAGIC:#010x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path,
                                           "label data"), dtype=np.uint8)
    if n_labels != count:
        raise ParseError(
            f"label count {n_labels} does not match image count {count}")
    return Dataset(
        inputs=(images.astype(np.float32) / np.float32(255.0)),
        labels=labels.astype(np.int64),
        n_classes=int(labels.max()) + 1,
        provenance={"kind": "idx", "images": str(images_path),
                    "labels": str(labels_path)})


def write_idx(images: np.ndarray, labels: np.ndarray, images_path,
              labels_path) -> None:
    """Write uint8 images (samples x rows x cols, or samples x features
    with square feature count) and labels as an IDX pair."""
    images = np.asarray(images)
    if images.ndim == 2:
        side = int(round(images.shape[1] ** 0.5))
        if side * side != images.shape[1]:
            raise ValueError("flat images need a square feature count")
        images = images.reshape(images.shape[0], side, side)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("images must be uint8 with shape (n, rows, cols)")
    labels = np.asarray(labels)
    if labels.shape != (images.shape[0],):
        raise ValueError("labels must have one entry per image")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", _IDX_IMAGES_MAGIC, images.shape[0],
                             images.shape[1], images.shape[2]))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", _IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def synth_teacher_dataset(n_features: int, n_classes: int, n_samples: int,
                          margin_noise: float = 0.0,
                          seed: int = 0) -> Dataset:
    """Multiclass linear-teacher data: Gaussian inputs labeled by the
    argmax of a fixed random linear map, with label-flip noise, then
    mapped affinely onto [0,1] (a global affine map, so the teacher stays
    exactly linear in the stored coordinates)."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= margin_noise < 1.0:
        raise ValueError("margin_noise must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal((n_classes, n_features))
    x = rng.standard_normal((n_samples, n_features))
    labels = np.argmax(x @ teacher.T, axis=1).astype(np.int64)
    if margin_noise > 0.0:
        flip = rng.random(n_samples) < margin_noise
        shift = rng.integers(1, n_classes, size=n_samples)
        labels[flip] = (labels[flip] + shift[flip]) % n_classes
    lo, hi = float(x.min()), float(x.max())
    x01 = ((x - lo) / (hi - lo)).astype(np.float32)
    return Dataset(inputs=x01, labels=labels, n_classes=n_classes,
                   provenance={"kind": "synthetic", "n_features": n_features,
                               "n_classes": n_classes, "n_samples": n_samples,
                               "margin_noise": margin_noise, "seed": seed})


def _init_params(config: TrainConfig, rng):
    params = []
    for i in range(len(config.widths) - 1):
        fan_in, fan_out = config.widths[i], config.widths[i + 1]
        W = rng.standard_normal((fan_out, fan_in)).astype(np.float32)
        W *= np.float32((2.0 / fan_in) ** 0.5)
        if config.residual[i]:
            W = 0.1 * W + np.eye(fan_out, dtype=np.float32)
        params.append([W, np.zeros(fan_out, dtype=np.float32)])
    return params


def _forward(params, X):
    """Returns (activations per layer, pre-activations) with ReLU between
    layers and raw logits at the end."""
    hs, zs = [X], []
    h = X
    for i, (W, b) in enumerate(params):
        z = h @ W.T + b
        zs.append(z)
        h = np.maximum(z, np.float32(0.0)) if i < len(params) - 1 else z
        hs.append(h)
    return hs, zs


def _loss_and_grads(params, X, y):
    """Mean softmax cross-entropy and exact reverse-mode gradients."""
    B = X.shape[0]
    hs, zs = _forward(params, X)
    logits = hs[-1].astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    p = expl / expl.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(p[np.arange(B), y] + 1e-300)))
    dlogits = p.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits = (dlogits / B).astype(np.float32)

    grads = [None] * len(params)
    dh = dlogits
    for i in range(len(params) - 1, -1, -1):
        W, _ = params[i]
        dz = dh if i == len(params) - 1 else dh * (zs[i] > 0)
        grads[i] = [dz.T @ hs[i], dz.sum(axis=0)]
        if i > 0:
            dh = dz @ W
    return loss, grads


def _as_network(params, config: TrainConfig) -> LayeredNetwork:
    layers = []
    for i, (W, b) in enumerate(params):
        kind = "residual_dense" if config.residual[i] else "dense"
        layers.append(Layer(kind=kind, weights=W.astype(np.float64),
                            bias=b.astype(np.float64)))
    return LayeredNetwork(tuple(layers))


def network_forward(network: LayeredNetwork, X) -> np.ndarray:
    """Logits of a checkpointed network: ReLU between layers, biases used
    when the checkpoint carries them."""
    h = np.asarray(X, dtype=np.float64)
    for i, layer in enumerate(network.layers):
        z = h @ layer.weights.T
        if layer.bias is not None:
            z = z + layer.bias
        h = np.maximum(z, 0.0) if i < len(network.layers) - 1 else z
    return h


def _select_subset(data: Dataset, P: int, rng):
    # every class must appear in the training subset; resample rather
    # than stratify so the subset stays an honest uniform draw
    for _ in range(1000):
        idx = rng.choice(data.n_samples, size=P, replace=False)
        if P < data.n_classes:
            return idx
        if len(np.unique(data.labels[idx])) == data.n_classes:
            return idx
    raise ConvergenceError(
        f"could not draw a subset of {P} samples covering all "
        f"{data.n_classes} classes")


def _split_train_test(data: Dataset, test_split, seed):
    if isinstance(test_split, Dataset):
        return data, test_split
    frac = float(test_split)
    if not 0.0 < frac < 1.0:
        raise ValueError("test_split must be a Dataset or a fraction in (0,1)")
    # the reserved indices depend only on the dataset size and seed
    rng = np.random.default_rng(seed ^ 0x5EED)
    perm = rng.permutation(data.n_samples)
    n_test = max(1, int(round(frac * data.n_samples)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    mk = lambda idx: Dataset(inputs=data.inputs[idx], labels=data.labels[idx],
                             n_classes=data.n_classes,
                             provenance=data.provenance)
    return mk(train_idx), mk(test_idx)


def _error_rate(params, X, y, batch=4096):
    wrong = 0
    for lo in range(0, X.shape[0], batch):
        logits = _forward(params, X[lo:lo + batch])[0][-1]
        wrong += int(np.sum(np.argmax(logits, axis=1) != y[lo:lo + batch]))
    return wrong / X.shape[0]


def _mean_loss(params, X, y, batch=4096):
    total = 0.0
    for lo in range(0, X.shape[0], batch):
        Xb, yb = X[lo:lo + batch], y[lo:lo + batch]
        logits = _forward(params, Xb)[0][-1].astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        total += float(-logp[np.arange(len(yb)), yb].sum())
    return total / X.shape[0]


def train(config: TrainConfig, data: Dataset, P: int, test_split,
          checkpoint_dir=None) -> LearningCurve:
    """Train on a random P-sample subset and record a norm-indexed curve.

    test_split is either a held-out Dataset or a fraction reserved from
    `data` by a seed-stable split. Snapshots follow config.snapshot_epochs;
    each one evaluates errors, loss, and the spectral complexity of the
    live weights. With checkpoint_dir set, weights are also persisted per
    snapshot in the layered-checkpoint format.
    """
    train_pool, test_set = _split_train_test(data, test_split, config.seed)
    if P > train_pool.n_samples:
        raise ValueError(
            f"P={P} exceeds the {train_pool.n_samples} available samples")
    if train_pool.n_features != config.widths[0]:
        raise ValueError("first width must match the feature count")
    if test_set.n_classes != data.n_classes:
        raise ValueError("train and test label spaces differ")
    if test_set.n_features != train_pool.n_features:
        raise ValueError("train and test feature counts differ")
    if config.widths[-1] != data.n_classes:
        raise ValueError("last width must match the class count")

    rng = np.random.default_rng(config.seed)
    idx = _select_subset(train_pool, P, rng)
    X = train_pool.inputs[idx]
    y = train_pool.labels[idx]
    params = _init_params(config, rng)

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    v = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    t = 0

    marks = set(config.snapshot_epochs())
    rec = {k: [] for k in ("epoch", "lam", "tr_err", "te_err", "tr_loss")}

    def snapshot(epoch):
        net = _as_network(params, config)
        lam = spectral_complexity(net).R_A
        rec["epoch"].append(epoch)
        rec["lam"].append(lam)
        rec["tr_err"].append(_error_rate(params, X, y))
        rec["te_err"].append(_error_rate(params, test_set.inputs,
                                         test_set.labels))
        rec["tr_loss"].append(_mean_loss(params, X, y))
        if checkpoint_dir is not None:
            save_network(net, os.path.join(checkpoint_dir,
                                           f"epoch_{epoch:04d}"))

    if 0 in marks:
        snapshot(0)
    lr32 = np.float32(config.lr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(P)
        for lo in range(0, P, config.batch_size):
            sel = order[lo:lo + config.batch_size]
            loss, grads = _loss_and_grads(params, X[sel], y[sel])
            if not np.isfinite(loss):
                raise ConvergenceError(
                    f"training diverged at epoch {epoch}: loss {loss}")
            t += 1
            c1 = np.float32(1.0 / (1.0 - beta1 ** t))
            c2 = np.float32(1.0 / (1.0 - beta2 ** t))
            for i in range(len(params)):
                for j in (0, 1):
                    g = grads[i][j]
                    m[i][j] = beta1 * m[i][j] + np.float32(1 - beta1) * g
                    v[i][j] = beta2 * v[i][j] + np.float32(1 - beta2) * g * g
                    params[i][j] = params[i][j] - lr32 * (m[i][j] * c1) / (
                        np.sqrt(v[i][j] * c2) + np.float32(eps))
        if epoch in marks:
            snapshot(epoch)

    return LearningCurve(
        P=P, seed=config.seed, epochs=np.array(rec["epoch"]),
        lam=np.array(rec["lam"]), train_error=np.array(rec["tr_err"]),
        test_error=np.array(rec["te_err"]),
        train_loss=np.array(rec["tr_loss"]),
        config_hash=config.config_hash())


def margin_histogram(network: LayeredNetwork, data: Dataset, bins: int = 60):
    """Histogram of per-sample margins normalized by the spectral
    complexity: (f(x)_y - max_{j!=y} f(x)_j) / R_A.

    Returns (counts, edges, mean, minimum).
    """
    if bins < 1:
        raise ValueError("bins must be positive")
    R_A = spectral_complexity(network).R_A
    if R_A == 0.0:
        raise DegenerateLayerError(
            "network sits exactly at its reference; margins cannot be "
            "normalized by a zero norm")
    logits = network_forward(network, data.inputs)
    n = data.n_samples
    true = logits[np.arange(n), data.labels]
    masked = logits.copy()
    masked[np.arange(n), data.labels] = -np.inf
    runner_up = masked.max(axis=1)
    margins = (true - runner_up) / R_A
    counts, edges = np.histogram(margins, bins=bins)
    return counts, edges, float(margins.mean()), float(margins.min())


def run_grid(config: TrainConfig, data: Dataset, P_list, seeds, out_dir,
             test_split=0.2):
    """Train the full P x seed grid, streaming each curve to disk as soon
    as it finishes (atomic per-run writes, so partial grids stay usable).
    A failed run leaves an error record and the grid keeps going.

    Runs are mutually independent; this implementation executes them
    sequentially.
    """
    os.makedirs(out_dir, exist_ok=True)
    curves = []
    for P in P_list:
        for seed in seeds:
            stem = os.path.join(out_dir, f"curve_P{int(P)}_s{int(seed)}")
            run_cfg = replace(config, seed=int(seed))
            try:
                curve = train(run_cfg, data, int(P), test_split)
            except Exception as exc:
                doc = {"P": int(P), "seed": int(seed), "error": str(exc),
                       "config_hash": run_cfg.config_hash()}
                _atomic_write_text(stem + ".error.json",
                                   json.dumps(doc, indent=2) + "\n")
                continue
            tmp = stem + ".csv.tmp"
            curve.to_csv(tmp)
            os.replace(tmp, stem + ".csv")
            manifest = {
                "P": int(P), "seed": int(seed),
                "config": {"widths": list(run_cfg.widths),
                           "residual": list(run_cfg.residual),
                           "epochs": run_cfg.epochs,
                           "batch_size": run_cfg.batch_size,
                           "lr": run_cfg.lr, "seed": int(seed),
                           "cadence": run_cfg.cadence},
                "config_hash": run_cfg.config_hash(),
                "provenance": data.provenance,
                "snapshots": len(curve.epochs),
            }
            _atomic_write_text(stem + ".json",
                               json.dumps(manifest, indent=2,
                                          sort_keys=True) + "\n")
            curves.append(curve)
    return curves


def _atomic_write_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
