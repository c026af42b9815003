"""Spectral complexity of layered networks.

For weight matrices A_1..A_L with activation Lipschitz constants rho_i and
per-layer reference matrices M_i (zero for dense layers, identity for
residual ones), the complexity norm is

    R_A = (prod_i rho_i |A_i|_sig)
          * (sum_i (|A_i^T - M_i^T|_{2,1} / |A_i|_sig)^(2/3))^(3/2)

where |.|_sig is the largest singular value and |.|_{2,1} averages the
column norms of its argument. Spectral norms come from seeded power
iteration so that norms measured along a training run replay bit-for-bit.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import AccuracyError, DegenerateLayerError, ParseError

__all__ = [
    "Layer", "LayeredNetwork", "SpectralReport", "spectral_norm", "norm21",
    "spectral_complexity", "save_network", "load_network",
]

_KINDS = ("dense", "residual_dense")


@dataclass(frozen=True)
class Layer:
    """One layer: a weight matrix (out x in), the Lipschitz constant of the
    activation that follows it, and an optional bias that the complexity
    norm ignores."""

    kind: str
    weights: np.ndarray
    activation_lipschitz: float = 1.0
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        w = self.weights
        if w.ndim != 2 or w.size == 0:
            raise ValueError("weights must be a non-empty matrix")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if self.kind == "residual_dense" and w.shape[0] != w.shape[1]:
            raise ValueError("residual layers must be square")
        rho = self.activation_lipschitz
        if not (np.isfinite(rho) and rho > 0):
            raise ValueError(f"activation_lipschitz must be positive, got {rho}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ValueError("bias length must match the output dimension")

    @property
    def reference(self) -> np.ndarray:
        if self.kind == "residual_dense":
            return np.eye(self.weights.shape[0])
        return np.zeros(self.weights.shape)


@dataclass(frozen=True)
class LayeredNetwork:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for i, layer in enumerate(layers):
            if not isinstance(layer, Layer):
                raise TypeError(f"layer {i} is not a Layer")
        for i in range(len(layers) - 1):
            out_i = layers[i].weights.shape[0]
            in_next = layers[i + 1].weights.shape[1]
            if out_i != in_next:
                raise ValueError(
                    f"layer {i} outputs {out_i} features but layer {i + 1} "
                    f"expects {in_next}")

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class SpectralReport:
    """Per-layer norms and the assembled complexity value."""

    spectral_norms: np.ndarray
    ref_distances_21: np.ndarray
    ratio_terms: np.ndarray
    product_term: float
    correction_term: float
    R_A: float

    def __post_init__(self):
        if np.any(self.spectral_norms < 0):
            raise ValueError("spectral norms must be nonnegative")
        expect = self.product_term * self.correction_term
        if abs(self.R_A - expect) > 1e-12 * max(abs(expect), 1e-300):
            raise ValueError("R_A must equal product_term * correction_term")

    def as_dict(self) -> dict:
        return {
            "spectral_norms": [float(s) for s in self.spectral_norms],
            "ref_distances_21": [float(d) for d in self.ref_distances_21],
            "ratio_terms": [float(r) for r in self.ratio_terms],
            "product_term": self.product_term,
            "correction_term": self.correction_term,
            "R_A": self.R_A,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def spectral_norm(matrix, tol: float = 1e-8, max_iters: int = 10_000,
                  seed: int = 0) -> float:
    """Largest singular value by power iteration with a seeded start.

    Converged when the singular-value estimate stagnates across three
    successive iterations to relative tol. Deterministic for fixed seed.
    """
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ValueError("matrix must be a non-empty 2-D array")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix entries must be finite")
    if not (np.isfinite(tol) and 0 < tol < 1):
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    if A.shape[0] < A.shape[1]:
        A = A.T                  # iterate on the smaller Gram side
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    prev = (-1.0, -1.0)
    sigma = 0.0
    for _ in range(max_iters):
        s = A @ v
        sigma = float(np.linalg.norm(s))
        if sigma == 0.0:
            # the start vector lies in the null space; for a nonzero
            # matrix this has probability zero, for a zero matrix it is
            # the answer
            if not A.any():
                return 0.0
            v = np.random.default_rng(seed + 1).standard_normal(A.shape[1])
            v /= np.linalg.norm(v)
            continue
        if (abs(sigma - prev[0]) <= tol * sigma
                and abs(prev[0] - prev[1]) <= tol * sigma):
            return sigma
        prev = (sigma, prev[0])
        v = s @ A
        v /= np.linalg.norm(v)
    raise AccuracyError(
        f"power iteration did not stagnate in {max_iters} iterations",
        estimate=sigma, residual=abs(sigma - prev[1]) / max(sigma, 1e-300))


def norm21(matrix, convention: str = "mean") -> float:
    """(2,1) group norm: the mean of the column 2-norms, or their sum when
    convention="sum"."""
    B = np.asarray(matrix, dtype=np.float64)
    if B.ndim != 2 or B.size == 0:
        raise ValueError("matrix must be a non-empty 2-D array")
    col = np.linalg.norm(B, axis=0)
    if convention == "mean":
        return float(col.mean())
    if convention == "sum":
        return float(col.sum())
    raise ValueError(f"convention must be 'mean' or 'sum', got {convention!r}")


def spectral_complexity(network: LayeredNetwork, tol: float = 1e-8,
                        max_iters: int = 10_000,
                        convention: str = "mean") -> SpectralReport:
    """Assemble the complexity norm of a network from per-layer pieces.

    Each layer is compared against its reference matrix (zero for dense
    layers, identity for residual ones). Power iteration is seeded by the
    layer index, so repeated calls agree exactly.
    """
    sigmas, dists, ratios = [], [], []
    product = 1.0
    for i, layer in enumerate(network.layers):
        sigma = spectral_norm(layer.weights, tol=tol, max_iters=max_iters,
                              seed=i)
        if sigma == 0.0:
            raise DegenerateLayerError(
                f"layer {i} has zero spectral norm; the complexity norm "
                f"divides by it")
        diff = layer.weights - layer.reference
        dist = norm21(diff.T, convention=convention)
        sigmas.append(sigma)
        dists.append(dist)
        ratios.append((dist / sigma) ** (2.0 / 3.0))
        product *= layer.activation_lipschitz * sigma
    correction = float(sum(ratios)) ** 1.5
    return SpectralReport(
        spectral_norms=np.array(sigmas), ref_distances_21=np.array(dists),
        ratio_terms=np.array(ratios), product_term=float(product),
        correction_term=float(correction), R_A=float(product * correction))


def save_network(network: LayeredNetwork, directory) -> None:
    """Write a checkpoint: manifest.json plus one little-endian float64
    row-major blob per layer. Biases are not part of the format; the
    checkpoint captures exactly what the complexity norm consumes."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, layer in enumerate(network.layers):
        blob = f"layer_{i:03d}.bin"
        rows, cols = layer.weights.shape
        entries.append({"kind": layer.kind, "rows": rows, "cols": cols,
                        "activation_lipschitz": layer.activation_lipschitz,
                        "blob": blob})
        with open(os.path.join(directory, blob), "wb") as fh:
            fh.write(np.ascontiguousarray(layer.weights,
                                          dtype="<f8").tobytes())
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump({"layers": entries}, fh, indent=2)
        fh.write("\n")


def load_network(directory) -> LayeredNetwork:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"no manifest.json in {directory}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest.json is not valid JSON: {exc}")
    entries = doc.get("layers")
    if not isinstance(entries, list) or not entries:
        raise ParseError("manifest field 'layers' must be a non-empty list")
    layers = []
    for i, entry in enumerate(entries):
        for key in ("kind", "rows", "cols", "activation_lipschitz", "blob"):
            if key not in entry:
                raise ParseError(f"layer {i} is missing field '{key}'")
        rows, cols = int(entry["rows"]), int(entry["cols"])
        blob_path = os.path.join(directory, entry["blob"])
        try:
            raw = np.fromfile(blob_path, dtype="<f8")
        except FileNotFoundError:
            raise ParseError(f"layer {i}: blob '{entry['blob']}' not found")
        if raw.size != rows * cols:
            raise ParseError(
                f"layer {i}: blob '{entry['blob']}' holds {raw.size} values, "
                f"expected rows*cols = {rows * cols}")
        layers.append(Layer(
            kind=entry["kind"],
            weights=raw.astype(np.float64).reshape(rows, cols),
            activation_lipschitz=float(entry["activation_lipschitz"])))
    return LayeredNetwork(layers=tuple(layers))
