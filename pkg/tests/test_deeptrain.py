"""Tests for the desk-scale deep trainer: data plumbing, exact gradients,
snapshot bookkeeping, and the norm-indexed learning curves."""
import json

import numpy as np
import pytest

from normscale.deeptrain import (
    Dataset, LearningCurve, TrainConfig, load_idx, margin_histogram,
    network_forward, run_grid, synth_teacher_dataset, train, write_idx,
    _init_params, _forward, _loss_and_grads, _select_subset,
)
from normscale.errors import (ConvergenceError, DegenerateLayerError,
                              ParseError)
from normscale.specnorm import Layer, LayeredNetwork


def test_dataset_validation():
    x = np.random.default_rng(0).random((10, 4)).astype(np.float32)
    Dataset(inputs=x, labels=np.zeros(10, dtype=np.int64), n_classes=2)
    with pytest.raises(ValueError, match="labels"):
        Dataset(inputs=x, labels=np.full(10, 5), n_classes=2)
    with pytest.raises(ValueError, match=r"\[0,1\]"):
        Dataset(inputs=x + 3, labels=np.zeros(10, dtype=np.int64),
                n_classes=2)
    with pytest.raises(ValueError, match="two classes"):
        Dataset(inputs=x, labels=np.zeros(10, dtype=np.int64), n_classes=1)
    with pytest.raises(ValueError, match="one entry per sample"):
        Dataset(inputs=x, labels=np.zeros(9, dtype=np.int64), n_classes=2)


def test_synth_dataset_is_deterministic():
    a = synth_teacher_dataset(12, 3, 500, margin_noise=0.05, seed=7)
    b = synth_teacher_dataset(12, 3, 500, margin_noise=0.05, seed=7)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    assert a.provenance["kind"] == "synthetic"


def test_synth_dataset_realizable_when_underdetermined():
    # with fewer samples than features and no label noise, an affine
    # classifier interpolates the one-hot targets exactly
    data = synth_teacher_dataset(40, 4, 30, margin_noise=0.0, seed=3)
    X = np.hstack([data.inputs.astype(np.float64),
                   np.ones((data.n_samples, 1))])
    onehot = np.eye(4)[data.labels]
    coef, *_ = np.linalg.lstsq(X, onehot, rcond=None)
    pred = np.argmax(X @ coef, axis=1)
    assert np.array_equal(pred, data.labels)


def test_synth_label_flip_fraction():
    clean = synth_teacher_dataset(10, 3, 10_000, margin_noise=0.0, seed=9)
    noisy = synth_teacher_dataset(10, 3, 10_000, margin_noise=0.1, seed=9)
    frac = float(np.mean(clean.labels != noisy.labels))
    assert abs(frac - 0.1) < 0.01


def test_synth_inputs_cover_unit_interval():
    data = synth_teacher_dataset(8, 2, 1000, seed=0)
    assert float(data.inputs.min()) == 0.0
    assert float(data.inputs.max()) == 1.0


def test_idx_roundtrip(tmp_path):
    images = np.random.default_rng(1).integers(0, 256, (3, 4, 4),
                                               dtype=np.uint8)
    images[0, 0, 0] = 0
    images[1, 0, 0] = 255
    labels = np.array([0, 2, 1], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    data = load_idx(ip, lp)
    assert data.n_samples == 3 and data.n_features == 16
    assert data.n_classes == 3
    back = np.round(data.inputs * 255).astype(np.uint8)
    assert np.array_equal(back, images.reshape(3, 16))
    assert np.array_equal(data.labels, labels.astype(np.int64))
    assert data.inputs.max() == 1.0 and data.inputs.min() == 0.0


def test_idx_error_reporting(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)

    bad_magic = bytearray(ip.read_bytes())
    bad_magic[3] = 0x99
    (tmp_path / "badmagic.idx").write_bytes(bytes(bad_magic))
    with pytest.raises(ParseError, match="image magic"):
        load_idx(tmp_path / "badmagic.idx", lp)
    with pytest.raises(ParseError, match="label magic"):
        load_idx(ip, ip)
    (tmp_path / "trunc.idx").write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(ParseError, match="truncated"):
        load_idx(tmp_path / "trunc.idx", lp)
    # three images, two labels
    write_idx(np.zeros((3, 2, 2), dtype=np.uint8),
              np.zeros(3, dtype=np.uint8), tmp_path / "img3.idx",
              tmp_path / "lab3.idx")
    with pytest.raises(ParseError, match="count"):
        load_idx(tmp_path / "img3.idx", lp)


def _fd_check(params, X, y, h=1e-5):
    _, grads = _loss_and_grads(params, X, y)
    worst = 0.0
    for i in range(len(params)):
        for j in (0, 1):
            arr = params[i][j]
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                k = it.multi_index
                orig = arr[k]
                arr[k] = orig + h
                lp = _loss_and_grads(params, X, y)[0]
                arr[k] = orig - h
                lm = _loss_and_grads(params, X, y)[0]
                arr[k] = orig
                fd = (lp - lm) / (2 * h)
                if abs(fd) > 1e-8:
                    worst = max(worst, abs(float(grads[i][j][k]) - fd) / abs(fd))
    return worst


def test_gradient_matches_finite_differences_single_layer():
    rng = np.random.default_rng(0)
    cfg = TrainConfig(widths=(8, 8), epochs=1)
    params = [[W.astype(np.float64), b.astype(np.float64)]
              for W, b in _init_params(cfg, rng)]
    X = rng.random((20, 8))
    y = rng.integers(0, 8, 20)
    assert _fd_check(params, X, y) < 1e-4


def test_gradient_matches_finite_differences_deep_residual():
    # seed chosen so every pre-activation sits well clear of the ReLU
    # kink; a finite difference striding across a kink would blame the
    # exact gradient for its own bias
    cfg = TrainConfig(widths=(6, 10, 10, 4), residual=(False, True, False),
                      epochs=1)
    params = [[W.astype(np.float64), b.astype(np.float64)]
              for W, b in _init_params(cfg, np.random.default_rng(1))]
    X = np.random.default_rng(101).random((15, 6))
    y = np.random.default_rng(102).integers(0, 4, 15)
    _, zs = _forward(params, X)
    assert min(float(np.abs(z).min()) for z in zs[:-1]) > 1e-3
    assert _fd_check(params, X, y) < 1e-4


def test_config_validation_and_hash():
    with pytest.raises(ValueError):
        TrainConfig(widths=(8,))
    with pytest.raises(ValueError, match="square"):
        TrainConfig(widths=(8, 6, 4), residual=(True, False))
    with pytest.raises(ValueError, match="one residual flag"):
        TrainConfig(widths=(8, 6, 4), residual=(True,))
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(widths=(8, 4), lr=0.0)
    with pytest.raises(ValueError, match="cadence"):
        TrainConfig(widths=(8, 4), cadence=0)
    a = TrainConfig(widths=(8, 4), seed=0)
    b = TrainConfig(widths=(8, 4), seed=0)
    c = TrainConfig(widths=(8, 4), seed=1)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_snapshot_cadence():
    short = TrainConfig(widths=(4, 2), epochs=7)
    assert short.snapshot_epochs() == list(range(8))
    staged = TrainConfig(widths=(4, 2), epochs=63)
    marks = staged.snapshot_epochs()
    assert marks[:52] == list(range(51)) + [55]
    assert marks[-2:] == [60, 63]
    fixed = TrainConfig(widths=(4, 2), epochs=100, cadence=40)
    assert fixed.snapshot_epochs() == [0, 40, 80, 100]


def test_subset_covers_all_classes():
    # class 2 has a single representative; a uniform draw of 30 from 101
    # usually misses it, the resampling loop must not
    x = np.random.default_rng(0).random((101, 3)).astype(np.float32)
    labels = np.zeros(101, dtype=np.int64)
    labels[:50] = 1
    labels[100] = 2
    data = Dataset(inputs=x, labels=labels, n_classes=3)
    for trial in range(5):
        idx = _select_subset(data, 30, np.random.default_rng(trial))
        assert set(np.unique(data.labels[idx])) == {0, 1, 2}


def test_train_validation():
    data = synth_teacher_dataset(6, 3, 100, seed=1)
    cfg = TrainConfig(widths=(6, 8, 3), epochs=1)
    with pytest.raises(ValueError, match="exceeds"):
        train(cfg, data, P=1000, test_split=0.2)
    with pytest.raises(ValueError, match="first width"):
        train(TrainConfig(widths=(5, 3), epochs=1), data, P=10,
              test_split=0.2)
    with pytest.raises(ValueError, match="last width"):
        train(TrainConfig(widths=(6, 4), epochs=1), data, P=10,
              test_split=0.2)
    with pytest.raises(ValueError, match="test_split"):
        train(cfg, data, P=10, test_split=1.5)


def test_train_learns_and_replays():
    data = synth_teacher_dataset(16, 4, 2000, margin_noise=0.0, seed=5)
    cfg = TrainConfig(widths=(16, 12, 4), epochs=300, seed=2, batch_size=64,
                      cadence=25)
    curve = train(cfg, data, P=400, test_split=0.2)
    assert curve.epochs[0] == 0 and curve.epochs[-1] == 300
    assert curve.train_error[-1] < curve.train_error[0] - 0.3
    assert curve.test_error[-1] < curve.test_error[0] - 0.3
    assert np.all(np.diff(curve.train_loss) < 0)
    assert curve.lambda_monotone()
    assert curve.lam[-1] > curve.lam[0]
    again = train(cfg, data, P=400, test_split=0.2)
    assert np.array_equal(curve.lam, again.lam)
    assert np.array_equal(curve.test_error, again.test_error)
    assert curve.config_hash == cfg.config_hash()


def test_divergent_run_raises_at_epoch():
    data = synth_teacher_dataset(6, 4, 200, seed=1)
    cfg = TrainConfig(widths=(6, 8, 4), epochs=3, seed=0, lr=1e30)
    with pytest.raises(ConvergenceError, match="epoch"):
        with np.errstate(over="ignore", invalid="ignore"):
            train(cfg, data, P=50, test_split=0.25)


def test_checkpoints_persisted(tmp_path):
    data = synth_teacher_dataset(8, 3, 300, seed=4)
    cfg = TrainConfig(widths=(8, 6, 3), epochs=4, seed=1, cadence=2)
    curve = train(cfg, data, P=60, test_split=0.2,
                  checkpoint_dir=tmp_path)
    from normscale.specnorm import load_network, spectral_complexity
    for epoch in (0, 2, 4):
        net = load_network(tmp_path / f"epoch_{epoch:04d}")
        i = list(curve.epochs).index(epoch)
        assert spectral_complexity(net).R_A == pytest.approx(curve.lam[i],
                                                             rel=1e-12)


def test_margin_histogram_single_sample():
    net = LayeredNetwork((Layer("dense", np.eye(2)),))
    data = Dataset(inputs=np.array([[0.9, 0.1]], dtype=np.float32),
                   labels=np.array([0]), n_classes=2)
    counts, edges, mean, minimum = margin_histogram(net, data, bins=10)
    assert counts.sum() == 1
    assert minimum > 0 and mean > 0
    assert edges.shape == (11,)


def test_margin_histogram_random_init_centers_on_zero():
    data = synth_teacher_dataset(10, 2, 4000, seed=11)
    means = []
    for seed in range(10):
        cfg = TrainConfig(widths=(10, 8, 2), epochs=1, seed=seed)
        params = _init_params(cfg, np.random.default_rng(seed))
        from normscale.deeptrain import _as_network
        net = _as_network(params, cfg)
        _, _, mean, _ = margin_histogram(net, data)
        means.append(mean)
    se = np.std(means, ddof=1) / np.sqrt(len(means))
    assert abs(np.mean(means)) < 3 * se + 1e-12


def test_margin_histogram_rejects_zero_norm():
    net = LayeredNetwork((Layer("residual_dense", np.eye(3)),))
    data = Dataset(inputs=np.random.default_rng(0).random((5, 3)).astype(
        np.float32), labels=np.zeros(5, dtype=np.int64), n_classes=3)
    with pytest.raises(DegenerateLayerError):
        margin_histogram(net, data)


def test_network_forward_uses_bias():
    W = np.eye(2)
    with_bias = LayeredNetwork((Layer("dense", W, bias=np.array([1.0, 0.0])),))
    without = LayeredNetwork((Layer("dense", W),))
    x = np.array([[0.5, 0.5]])
    assert network_forward(with_bias, x)[0, 0] == pytest.approx(1.5)
    assert network_forward(without, x)[0, 0] == pytest.approx(0.5)


def test_run_grid_streams_files(tmp_path):
    data = synth_teacher_dataset(8, 3, 400, seed=2)
    cfg = TrainConfig(widths=(8, 6, 3), epochs=3, cadence=1)
    curves = run_grid(cfg, data, P_list=[30, 60], seeds=[0, 1],
                      out_dir=tmp_path)
    assert len(curves) == 4
    for P in (30, 60):
        for seed in (0, 1):
            csv_path = tmp_path / f"curve_P{P}_s{seed}.csv"
            man_path = tmp_path / f"curve_P{P}_s{seed}.json"
            assert csv_path.exists() and man_path.exists()
            manifest = json.loads(man_path.read_text())
            assert manifest["P"] == P and manifest["seed"] == seed
            back = LearningCurve.from_csv(csv_path,
                                          manifest["config_hash"])
            match = [c for c in curves if c.P == P and c.seed == seed][0]
            assert np.array_equal(back.lam, match.lam)
            assert back.config_hash == match.config_hash
    # same cell rerun reproduces the same bytes
    before = (tmp_path / "curve_P30_s0.csv").read_bytes()
    run_grid(cfg, data, P_list=[30], seeds=[0], out_dir=tmp_path)
    assert (tmp_path / "curve_P30_s0.csv").read_bytes() == before


def test_run_grid_records_failures(tmp_path):
    data = synth_teacher_dataset(8, 3, 100, seed=2)
    cfg = TrainConfig(widths=(8, 6, 3), epochs=2, cadence=1)
    curves = run_grid(cfg, data, P_list=[20, 5000], seeds=[0],
                      out_dir=tmp_path)
    assert len(curves) == 1
    err = json.loads((tmp_path / "curve_P5000_s0.error.json").read_text())
    assert "exceeds" in err["error"]
    assert (tmp_path / "curve_P20_s0.csv").exists()


def test_curve_csv_header_and_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ParseError, match="header"):
        LearningCurve.from_csv(bad)
    empty = tmp_path / "empty.csv"
    empty.write_text("P,seed,epoch,lambda,train_error,test_error,train_loss\n")
    with pytest.raises(ParseError, match="empty"):
        LearningCurve.from_csv(empty)


def test_lambda_monotone_tolerance():
    base = dict(P=10, seed=0, train_error=np.zeros(3),
                test_error=np.zeros(3), train_loss=np.zeros(3),
                config_hash="x")
    dip = LearningCurve(epochs=np.array([0, 1, 2]),
                        lam=np.array([1.0, 1.999, 2.0]), **base)
    assert dip.lambda_monotone()
    small_dip = LearningCurve(epochs=np.array([0, 1, 2]),
                              lam=np.array([1.0, 2.0, 1.995]), **base)
    assert small_dip.lambda_monotone()
    big_dip = LearningCurve(epochs=np.array([0, 1, 2]),
                            lam=np.array([1.0, 2.0, 1.5]), **base)
    assert not big_dip.lambda_monotone()
    with pytest.raises(ValueError, match="increasing"):
        LearningCurve(epochs=np.array([0, 0, 2]),
                      lam=np.array([1.0, 2.0, 3.0]), **base)
