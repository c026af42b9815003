"""Tests for the spectral complexity norm.

The reference implementation inside this file computes every quantity
straight from full SVDs, independently of the power iteration used by the
module.
"""
import json

import numpy as np
import pytest

from normscale.errors import AccuracyError, DegenerateLayerError, ParseError
from normscale.specnorm import (
    Layer, LayeredNetwork, SpectralReport, load_network, norm21,
    save_network, spectral_complexity, spectral_norm,
)


def _svd_sigma(A):
    return float(np.linalg.svd(A, compute_uv=False)[0])


def _straight_line_RA(triples, convention="mean"):
    """(W, rho, M) triples -> R_A via full SVD, term by term."""
    prod, total = 1.0, 0.0
    for W, rho, M in triples:
        sig = _svd_sigma(W)
        prod *= rho * sig
        cols = np.linalg.norm((W - M).T, axis=0)
        d = float(cols.mean() if convention == "mean" else cols.sum())
        total += (d / sig) ** (2.0 / 3.0)
    return prod * total ** 1.5


def test_identity_spectral_norm():
    assert spectral_norm(np.eye(7)) == pytest.approx(1.0, rel=1e-12)


def test_diagonal_spectral_norm():
    assert spectral_norm(np.diag([3.0, 1.0, 0.5])) == pytest.approx(3.0,
                                                                    rel=1e-8)


def test_spectral_norm_matches_svd_oracle():
    A = np.random.default_rng(3).standard_normal((50, 30))
    assert spectral_norm(A) == pytest.approx(_svd_sigma(A), rel=1e-7)
    assert spectral_norm(A.T) == pytest.approx(_svd_sigma(A), rel=1e-7)
    B = np.random.default_rng(4).standard_normal((40, 40))
    assert spectral_norm(B) == pytest.approx(_svd_sigma(B), rel=1e-7)


def test_spectral_norm_is_deterministic():
    A = np.random.default_rng(9).standard_normal((20, 25))
    assert spectral_norm(A, seed=5) == spectral_norm(A, seed=5)


def test_spectral_norm_zero_matrix():
    assert spectral_norm(np.zeros((4, 6))) == 0.0


def test_spectral_norm_validation():
    with pytest.raises(ValueError):
        spectral_norm(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        spectral_norm(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        spectral_norm(np.full((3, 3), np.nan))
    with pytest.raises(ValueError):
        spectral_norm(np.eye(3), tol=0.0)


def test_spectral_norm_iteration_cap():
    A = np.random.default_rng(0).standard_normal((30, 30))
    with pytest.raises(AccuracyError) as err:
        spectral_norm(A, max_iters=2)
    assert err.value.estimate > 0
    assert err.value.residual >= 0


def test_norm21_conventions():
    assert norm21(np.eye(5)) == pytest.approx(1.0)
    assert norm21(np.zeros((3, 4))) == 0.0
    assert norm21(2.5 * np.eye(4)) == pytest.approx(2.5)
    assert norm21(np.eye(5), convention="sum") == pytest.approx(5.0)
    B = np.arange(6.0).reshape(2, 3)
    expect = np.linalg.norm(B, axis=0)
    assert norm21(B) == pytest.approx(expect.mean())
    assert norm21(B, convention="sum") == pytest.approx(expect.sum())
    with pytest.raises(ValueError):
        norm21(B, convention="rows")


def test_single_layer_reference_points():
    dense_eye = LayeredNetwork((Layer("dense", np.eye(6)),))
    assert spectral_complexity(dense_eye).R_A == pytest.approx(1.0, rel=1e-10)
    dense_scaled = LayeredNetwork((Layer("dense", 4.2 * np.eye(6)),))
    assert spectral_complexity(dense_scaled).R_A == pytest.approx(4.2,
                                                                  rel=1e-10)
    residual_eye = LayeredNetwork((Layer("residual_dense", np.eye(6)),))
    assert spectral_complexity(residual_eye).R_A == 0.0


def test_three_layer_matches_straight_line():
    rng = np.random.default_rng(42)
    Ws = [rng.standard_normal((16, 20)), rng.standard_normal((12, 16)),
          rng.standard_normal((8, 12))]
    net = LayeredNetwork(tuple(Layer("dense", W) for W in Ws))
    report = spectral_complexity(net)
    expect = _straight_line_RA([(W, 1.0, np.zeros_like(W)) for W in Ws])
    assert report.R_A == pytest.approx(expect, rel=1e-6)
    for i, W in enumerate(Ws):
        assert report.spectral_norms[i] == pytest.approx(_svd_sigma(W),
                                                         rel=1e-7)


def test_residual_layers_match_straight_line():
    rng = np.random.default_rng(7)
    W1 = rng.standard_normal((10, 10))
    W2 = np.eye(10) + 0.1 * rng.standard_normal((10, 10))
    W3 = rng.standard_normal((4, 10))
    net = LayeredNetwork((
        Layer("dense", W1),
        Layer("residual_dense", W2, activation_lipschitz=0.7),
        Layer("dense", W3, activation_lipschitz=1.3),
    ))
    expect = _straight_line_RA([
        (W1, 1.0, np.zeros((10, 10))), (W2, 0.7, np.eye(10)),
        (W3, 1.3, np.zeros((4, 10)))])
    assert spectral_complexity(net).R_A == pytest.approx(expect, rel=1e-6)


def test_sum_convention_flag():
    rng = np.random.default_rng(11)
    Ws = [rng.standard_normal((8, 10)), rng.standard_normal((5, 8))]
    net = LayeredNetwork(tuple(Layer("dense", W) for W in Ws))
    expect = _straight_line_RA([(W, 1.0, np.zeros_like(W)) for W in Ws],
                               convention="sum")
    got = spectral_complexity(net, convention="sum").R_A
    assert got == pytest.approx(expect, rel=1e-6)
    assert got > spectral_complexity(net).R_A     # sum >= mean columnwise


def test_positive_homogeneity():
    rng = np.random.default_rng(5)
    Ws = [rng.standard_normal((9, 12)), rng.standard_normal((7, 9))]
    base = LayeredNetwork(tuple(Layer("dense", W) for W in Ws))
    c = 3.7
    scaled = LayeredNetwork((Layer("dense", c * Ws[0]),
                             Layer("dense", Ws[1])))
    assert spectral_complexity(scaled).R_A == pytest.approx(
        c * spectral_complexity(base).R_A, rel=1e-10)


def test_permutation_invariance():
    rng = np.random.default_rng(13)
    W1 = rng.standard_normal((8, 6))
    W2 = rng.standard_normal((5, 8))
    perm = rng.permutation(8)
    base = LayeredNetwork((Layer("dense", W1), Layer("dense", W2)))
    permuted = LayeredNetwork((Layer("dense", W1[perm, :].copy()),
                               Layer("dense", W2[:, perm].copy())))
    assert spectral_complexity(permuted).R_A == pytest.approx(
        spectral_complexity(base).R_A, rel=1e-10)


def test_sigma_bounded_by_frobenius():
    rng = np.random.default_rng(17)
    for shape in [(10, 10), (30, 5), (4, 25)]:
        A = rng.standard_normal(shape)
        assert spectral_norm(A) <= np.linalg.norm(A) * (1 + 1e-10)


def test_zero_complexity_requires_every_layer_at_reference():
    # one layer away from its reference keeps the sum positive
    partial = LayeredNetwork((
        Layer("residual_dense", np.eye(4)),
        Layer("dense", np.ones((3, 4)))))
    assert spectral_complexity(partial).R_A > 0.0
    full = LayeredNetwork((
        Layer("residual_dense", np.eye(4)),
        Layer("residual_dense", np.eye(4))))
    assert spectral_complexity(full).R_A == 0.0


def test_zero_layer_rejected():
    net = LayeredNetwork((Layer("dense", np.eye(4)),
                          Layer("dense", np.zeros((3, 4)))))
    with pytest.raises(DegenerateLayerError, match="layer 1"):
        spectral_complexity(net)


def test_report_consistency_enforced():
    with pytest.raises(ValueError, match="product_term"):
        SpectralReport(spectral_norms=np.array([1.0]),
                       ref_distances_21=np.array([1.0]),
                       ratio_terms=np.array([1.0]),
                       product_term=2.0, correction_term=3.0, R_A=5.0)
    with pytest.raises(ValueError, match="nonnegative"):
        SpectralReport(spectral_norms=np.array([-1.0]),
                       ref_distances_21=np.array([1.0]),
                       ratio_terms=np.array([1.0]),
                       product_term=2.0, correction_term=3.0, R_A=6.0)


def test_report_json_export(tmp_path):
    net = LayeredNetwork((Layer("dense", np.diag([2.0, 1.0])),))
    report = spectral_complexity(net)
    path = tmp_path / "report.json"
    report.to_json(path)
    with open(path) as fh:
        doc = json.load(fh)
    assert doc["R_A"] == report.R_A
    assert doc["spectral_norms"] == [pytest.approx(2.0)]
    assert doc["product_term"] * doc["correction_term"] == pytest.approx(
        doc["R_A"], rel=1e-12)


def test_network_validation():
    with pytest.raises(ValueError, match="outputs"):
        LayeredNetwork((Layer("dense", np.eye(4)),
                        Layer("dense", np.zeros((2, 5)) + 1.0)))
    with pytest.raises(ValueError, match="square"):
        Layer("residual_dense", np.ones((3, 4)))
    with pytest.raises(ValueError, match="kind"):
        Layer("conv", np.eye(3))
    with pytest.raises(ValueError, match="positive"):
        Layer("dense", np.eye(3), activation_lipschitz=0.0)
    with pytest.raises(ValueError, match="bias"):
        Layer("dense", np.eye(3), bias=np.zeros(4))
    with pytest.raises(ValueError, match="at least one"):
        LayeredNetwork(())
    with pytest.raises(ValueError, match="finite"):
        Layer("dense", np.full((2, 2), np.inf))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(23)
    net = LayeredNetwork((
        Layer("dense", rng.standard_normal((6, 8))),
        Layer("residual_dense", rng.standard_normal((6, 6)),
              activation_lipschitz=0.5),
        Layer("dense", rng.standard_normal((2, 6)), activation_lipschitz=2.0),
    ))
    ckpt = tmp_path / "ckpt"
    save_network(net, ckpt)
    with open(ckpt / "manifest.json") as fh:
        manifest = json.load(fh)
    assert [e["kind"] for e in manifest["layers"]] == [
        "dense", "residual_dense", "dense"]
    assert manifest["layers"][0] == {
        "kind": "dense", "rows": 6, "cols": 8, "activation_lipschitz": 1.0,
        "blob": "layer_000.bin"}
    # blobs are little-endian float64, row-major
    raw = np.frombuffer((ckpt / "layer_000.bin").read_bytes(), dtype="<f8")
    assert np.array_equal(raw.reshape(6, 8), net.layers[0].weights)

    back = load_network(ckpt)
    assert len(back) == 3
    for a, b in zip(net.layers, back.layers):
        assert a.kind == b.kind
        assert a.activation_lipschitz == b.activation_lipschitz
        assert np.array_equal(a.weights, b.weights)
    assert spectral_complexity(back).R_A == spectral_complexity(net).R_A


def test_checkpoint_validation(tmp_path):
    with pytest.raises(ParseError, match="manifest"):
        load_network(tmp_path / "missing")
    ckpt = tmp_path / "bad"
    ckpt.mkdir()
    (ckpt / "manifest.json").write_text("{not json")
    with pytest.raises(ParseError, match="JSON"):
        load_network(ckpt)
    (ckpt / "manifest.json").write_text(json.dumps({"layers": []}) + "\n")
    with pytest.raises(ParseError, match="layers"):
        load_network(ckpt)
    (ckpt / "manifest.json").write_text(json.dumps({"layers": [
        {"kind": "dense", "rows": 2, "cols": 2, "blob": "w.bin"}]}) + "\n")
    with pytest.raises(ParseError, match="activation_lipschitz"):
        load_network(ckpt)
    (ckpt / "manifest.json").write_text(json.dumps({"layers": [
        {"kind": "dense", "rows": 2, "cols": 2, "activation_lipschitz": 1.0,
         "blob": "w.bin"}]}) + "\n")
    with pytest.raises(ParseError, match="not found"):
        load_network(ckpt)
    (ckpt / "w.bin").write_bytes(np.zeros(3).tobytes())
    with pytest.raises(ParseError, match="holds 3"):
        load_network(ckpt)
