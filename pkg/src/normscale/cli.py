"""Command-line pipeline: sweeps, training runs, norm audits, and fits.

Every command reads a flat JSON config (with a `version` field), writes its
data files into one output directory, and finishes by writing
`manifest.json`. The manifest lists every data file the command produced,
so its presence signals a completed run and its absence marks an
interrupted one. Data files are a pure function of (config, input files,
seeds): reruns produce byte-identical CSV/JSON outputs. The manifest also
records the wall-clock duration, so it is the one file allowed to differ
between reruns.

Exit codes: 0 success, 1 fatal (bad config, unusable inputs), 3 partial
(some work items failed; their errors are recorded in the outputs).
"""
from __future__ import annotations

import argparse
import csv
import glob as globmod
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .analysis import (CurveData, collapse, collapse_deviation,
                       fit_lambda_opt, fit_power_law, predict_exponent,
                       thresholds)
from .deeptrain import (Dataset, LearningCurve, TrainConfig, load_idx,
                        run_grid, synth_teacher_dataset)
from .errors import (AccuracyError, ConvergenceError, DegenerateLayerError,
                     ParseError)
from .perceptron import generate_instance, train_gd
from .potentials import MarginPotential
from .replica import SolverOptions, sweep_lambda
from .specnorm import load_network, spectral_complexity

__all__ = ["RunManifest", "cmd_replica_sweep", "cmd_perceptron", "cmd_norm",
           "cmd_train_grid", "cmd_analyze", "main"]

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 3

_OUT_ENV = "NORMSCALE_OUT"


# ------------------------------------------------------------- plumbing

@dataclass
class RunManifest:
    """Completion record: what ran, on what inputs, producing which files."""

    command: str
    config: dict
    seeds: list
    version: str
    input_hashes: dict
    outputs: list
    duration_s: float

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, "manifest.json")
        doc = {"command": self.command, "config": self.config,
               "seeds": self.seeds, "version": self.version,
               "input_hashes": self.input_hashes, "outputs": self.outputs,
               "duration_s": self.duration_s}
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path, schema: dict) -> dict:
    """Read and validate a flat JSON config against {key: (required,
    default)}. Strict about unknown keys so typos fail fast instead of
    silently falling back to defaults."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError("config must be a JSON object")
    if raw.get("version") != 1:
        raise ParseError("config must declare \"version\": 1")
    allowed = set(schema) | {"version", "out_dir"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ParseError(f"unknown config keys: {unknown}")
    missing = sorted(k for k, (req, _) in schema.items()
                     if req and k not in raw)
    if missing:
        raise ParseError(f"missing config keys: {missing}")
    cfg = {k: raw.get(k, default) for k, (_, default) in schema.items()}
    cfg["out_dir"] = raw.get("out_dir")
    return cfg


def _resolve_out(flag_value, cfg, command: str) -> str:
    if flag_value:
        return flag_value
    if cfg and cfg.get("out_dir"):
        return cfg["out_dir"]
    root = os.environ.get(_OUT_ENV)
    if root:
        return os.path.join(root, command)
    return f"./{command.replace('-', '_')}_out"


def _say(verbose: bool, message: str) -> None:
    if verbose:
        print(f"[normscale] {message}", file=sys.stderr)


def _warn(message: str) -> None:
    print(f"[normscale] warning: {message}", file=sys.stderr)


def _fail(message: str) -> int:
    print(f"[normscale] error: {message}", file=sys.stderr)
    return EXIT_FATAL


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -------------------------------------------------------- replica-sweep

_SWEEP_SCHEMA = {
    "alphas": (True, None),
    "lambda_min": (True, None),
    "lambda_max": (True, None),
    "lambda_points": (False, 40),
    "potential": (False, "logistic"),
    "tol": (False, None),
    "max_iters": (False, None),
}


def cmd_replica_sweep(config_path, out=None, seed=None, workers=1,
                      verbose=False) -> int:
    """Solve the fixed-norm error curve over a sharpness grid per alpha.

    Writes one CSV per alpha plus summary.json with the located optima;
    failed alphas are flagged in the summary and turn the exit partial.
    """
    t0 = time.monotonic()
    try:
        cfg = _load_config(config_path, _SWEEP_SCHEMA)
        alphas = [float(a) for a in cfg["alphas"]]
        if not alphas or any(a <= 0 for a in alphas):
            raise ValueError("alphas must be a non-empty list of positives")
        lo, hi = float(cfg["lambda_min"]), float(cfg["lambda_max"])
        npts = int(cfg["lambda_points"])
        if not (0 < lo < hi) or npts < 10:
            raise ValueError("need 0 < lambda_min < lambda_max and "
                             "at least 10 grid points")
        if cfg["potential"] != "logistic":
            raise ValueError("only the logistic potential has a sharpness "
                             "to sweep")
    except (ParseError, ValueError, TypeError) as exc:
        return _fail(str(exc))

    out_dir = _resolve_out(out, cfg, "replica-sweep")
    os.makedirs(out_dir, exist_ok=True)
    opts = SolverOptions()
    if cfg["tol"] is not None:
        opts = SolverOptions(tol=float(cfg["tol"]))
    if cfg["max_iters"] is not None:
        opts = SolverOptions(tol=opts.tol, max_iters=int(cfg["max_iters"]))
    grid = np.geomspace(lo, hi, npts)

    outputs, rows, failed = [], [], []
    for a in alphas:
        _say(verbose, f"sweeping alpha={a:g} over {npts} points")
        try:
            sweep = sweep_lambda(a, grid, opts)
        except (ConvergenceError, AccuracyError, ValueError) as exc:
            _warn(f"alpha={a:g} failed: {exc}")
            failed.append({"alpha": a, "error": str(exc)})
            continue
        name = f"sweep_alpha{a:g}.csv"
        sweep.to_csv(os.path.join(out_dir, name))
        outputs.append(name)
        rows.append({"alpha": a, "lambda_opt": sweep.lambda_opt,
                     "eps_opt": sweep.eps_opt, "csv": name})
    summary = {"grid": {"lambda_min": lo, "lambda_max": hi, "points": npts},
               "alphas": rows, "failed": failed}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    outputs.append("summary.json")

    RunManifest(command="replica-sweep", config=cfg, seeds=[],
                version=__version__,
                input_hashes={config_path: _sha256(config_path)},
                outputs=outputs,
                duration_s=round(time.monotonic() - t0, 3)).write(out_dir)
    return EXIT_PARTIAL if failed else EXIT_OK


# ----------------------------------------------------------- perceptron

_PERC_SCHEMA = {
    "N": (True, None),
    "alpha": (True, None),
    "steps": (True, None),
    "seeds": (True, None),
    "lr": (False, None),
    "schedule": (False, None),
    "sweep_file": (False, None),
}


def _load_sweep_curve(path):
    """(lambda, eps) from a sweep CSV or its JSON summary-with-grid."""
    if path.endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        pts = doc.get("grid")
        if not pts:
            raise ParseError(f"{path} has no grid entries")
        lam = np.array([float(p["lambda"]) for p in pts])
        eps = np.array([float(p["eps"]) for p in pts])
    else:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or \
                    not {"lambda", "eps"} <= set(reader.fieldnames):
                raise ParseError(f"{path} lacks lambda/eps columns")
            lam, eps = [], []
            for row in reader:
                lam.append(float(row["lambda"]))
                eps.append(float(row["eps"]))
        lam, eps = np.array(lam), np.array(eps)
    order = np.argsort(lam)
    return lam[order], eps[order]


def cmd_perceptron(config_path, out=None, seed=None, workers=1,
                   verbose=False) -> int:
    """Gradient-descent trajectories on the free-norm problem, one CSV per
    seed; with a sweep file, an overlay CSV pairs each snapshot's
    (norm, error) with the fixed-norm curve at the matching norm."""
    t0 = time.monotonic()
    try:
        cfg = _load_config(config_path, _PERC_SCHEMA)
        N, alpha, steps = int(cfg["N"]), float(cfg["alpha"]), int(cfg["steps"])
        seeds = [int(seed)] if seed is not None \
            else [int(s) for s in cfg["seeds"]]
        if not seeds:
            raise ValueError("seeds must be non-empty")
        schedule = None if cfg["schedule"] is None \
            else np.asarray(cfg["schedule"], dtype=np.int64)
    except (ParseError, ValueError, TypeError) as exc:
        return _fail(str(exc))

    replica_curve = None
    sweep_path = cfg["sweep_file"]
    if sweep_path is not None:
        if os.path.exists(sweep_path):
            try:
                replica_curve = _load_sweep_curve(sweep_path)
            except (ParseError, ValueError, KeyError) as exc:
                _warn(f"cannot read sweep file {sweep_path}: {exc}; "
                      f"overlay skipped")
        else:
            _warn(f"sweep file {sweep_path} not found; overlay skipped")

    out_dir = _resolve_out(out, cfg, "perceptron")
    os.makedirs(out_dir, exist_ok=True)
    outputs, failed = [], []
    for s in seeds:
        _say(verbose, f"training seed {s}: N={N}, alpha={alpha:g}, "
                      f"{steps} steps")
        try:
            inst = generate_instance(N, alpha, seed=s)
            traj = train_gd(inst, lr=cfg["lr"], steps=steps,
                            schedule=schedule, seed=s)
        except (ConvergenceError, AccuracyError, ValueError) as exc:
            _warn(f"seed {s} failed: {exc}")
            failed.append({"seed": s, "error": str(exc)})
            continue
        name = f"traj_s{s}.csv"
        traj.to_csv(os.path.join(out_dir, name))
        outputs.append(name)
        if replica_curve is not None:
            lam_r, eps_r = replica_curve
            inside = (traj.norm >= lam_r[0]) & (traj.norm <= lam_r[-1])
            matched = np.interp(traj.norm, lam_r, eps_r)
            matched[~inside] = math.nan
            oname = f"overlay_s{s}.csv"
            with open(os.path.join(out_dir, oname), "w") as fh:
                fh.write("step,lambda,eps,eps_replica\n")
                for k in range(len(traj.steps)):
                    fh.write(f"{int(traj.steps[k])},{float(traj.norm[k])!r},"
                             f"{float(traj.eps[k])!r},"
                             f"{float(matched[k])!r}\n")
            outputs.append(oname)
    if failed:
        _write_json(os.path.join(out_dir, "failed.json"), failed)
        outputs.append("failed.json")

    hashes = {config_path: _sha256(config_path)}
    if replica_curve is not None:
        hashes[sweep_path] = _sha256(sweep_path)
    RunManifest(command="perceptron", config=cfg, seeds=seeds,
                version=__version__, input_hashes=hashes, outputs=outputs,
                duration_s=round(time.monotonic() - t0, 3)).write(out_dir)
    return EXIT_PARTIAL if failed else EXIT_OK


# ----------------------------------------------------------------- norm

def _find_checkpoints(spec: str):
    if os.path.isdir(spec):
        if os.path.exists(os.path.join(spec, "manifest.json")):
            return [spec]
        subs = sorted(
            os.path.join(spec, d) for d in os.listdir(spec)
            if os.path.isdir(os.path.join(spec, d)))
        return [d for d in subs
                if os.path.exists(os.path.join(d, "manifest.json"))]
    return [p for p in sorted(globmod.glob(spec)) if os.path.isdir(p)]


def cmd_norm(checkpoints, out=None, seed=None, workers=1,
             verbose=False) -> int:
    """Audit checkpoint directories: one spectral report JSON each plus a
    series CSV of the complexity over checkpoint index. Unreadable or
    degenerate checkpoints are flagged and the rest continue."""
    t0 = time.monotonic()
    dirs = _find_checkpoints(checkpoints)
    if not dirs:
        return _fail(f"no checkpoint directories match {checkpoints!r}")
    out_dir = _resolve_out(out, None, "norm")
    os.makedirs(out_dir, exist_ok=True)

    outputs, results, failed = [], [], []
    for i, ckpt in enumerate(dirs):
        _say(verbose, f"auditing {ckpt}")
        try:
            report = spectral_complexity(load_network(ckpt))
        except (ParseError, DegenerateLayerError, AccuracyError,
                ValueError) as exc:
            _warn(f"{ckpt}: {exc}")
            failed.append({"checkpoint": ckpt, "error": str(exc)})
            continue
        name = f"report_{i:03d}.json"
        report.to_json(os.path.join(out_dir, name))
        outputs.append(name)
        results.append((i, ckpt, report))

    if results:
        width = max(len(r.spectral_norms) for _, _, r in results)
        name = "series.csv"
        with open(os.path.join(out_dir, name), "w") as fh:
            cols = ",".join(f"sigma_{j}" for j in range(width))
            fh.write(f"index,checkpoint,R_A,{cols}\n")
            for i, ckpt, rep in results:
                sig = [repr(float(v)) for v in rep.spectral_norms]
                sig += [""] * (width - len(sig))
                fh.write(f"{i},{ckpt},{rep.R_A!r},{','.join(sig)}\n")
        outputs.append(name)
    if failed:
        _write_json(os.path.join(out_dir, "failures.json"), failed)
        outputs.append("failures.json")

    hashes = {os.path.join(d, "manifest.json"):
              _sha256(os.path.join(d, "manifest.json")) for d in dirs
              if os.path.exists(os.path.join(d, "manifest.json"))}
    RunManifest(command="norm", config={"checkpoints": checkpoints},
                seeds=[], version=__version__, input_hashes=hashes,
                outputs=outputs,
                duration_s=round(time.monotonic() - t0, 3)).write(out_dir)
    if not results:
        return EXIT_FATAL
    return EXIT_PARTIAL if failed else EXIT_OK


# ----------------------------------------------------------- train-grid

_GRID_SCHEMA = {
    "dataset": (True, None),
    "widths": (True, None),
    "P_list": (True, None),
    "seeds": (True, None),
    "epochs": (True, None),
    "residual": (False, None),
    "batch_size": (False, 128),
    "lr": (False, 0.001),
    "cadence": (False, None),
    "test_split": (False, 0.2),
}


def _build_dataset(spec: dict):
    """(train Dataset, test_split argument, list of input files read)."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ParseError("dataset must be an object with a \"kind\"")
    kind = spec["kind"]
    if kind == "synth":
        data = synth_teacher_dataset(
            n_features=int(spec["n_features"]),
            n_classes=int(spec["n_classes"]),
            n_samples=int(spec["n_samples"]),
            margin_noise=float(spec.get("margin_noise", 0.0)),
            seed=int(spec.get("seed", 0)))
        return data, None, []
    if kind == "idx":
        files = [spec["images"], spec["labels"]]
        data = load_idx(spec["images"], spec["labels"])
        test = None
        if "test_images" in spec or "test_labels" in spec:
            files += [spec["test_images"], spec["test_labels"]]
            test = load_idx(spec["test_images"], spec["test_labels"])
        return data, test, files
    raise ParseError(f"unknown dataset kind {kind!r}")


def cmd_train_grid(config_path, out=None, seed=None, workers=1,
                   verbose=False) -> int:
    """Train the P x seed grid, streaming each learning curve to disk as
    it completes; failed cells leave error records and the grid goes on."""
    t0 = time.monotonic()
    try:
        cfg = _load_config(config_path, _GRID_SCHEMA)
        data, test_ds, in_files = _build_dataset(cfg["dataset"])
        seeds = [int(seed)] if seed is not None \
            else [int(s) for s in cfg["seeds"]]
        P_list = [int(p) for p in cfg["P_list"]]
        if not seeds or not P_list:
            raise ValueError("P_list and seeds must be non-empty")
        train_cfg = TrainConfig(
            widths=tuple(int(w) for w in cfg["widths"]),
            residual=None if cfg["residual"] is None
            else tuple(bool(r) for r in cfg["residual"]),
            epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
            lr=float(cfg["lr"]), seed=0,
            cadence=None if cfg["cadence"] is None else int(cfg["cadence"]))
        test_split = test_ds if test_ds is not None \
            else float(cfg["test_split"])
    except (ParseError, ValueError, TypeError, KeyError, OSError) as exc:
        return _fail(str(exc))

    out_dir = _resolve_out(out, cfg, "train-grid")
    _say(verbose, f"grid: P in {P_list}, seeds {seeds}, "
                  f"widths {list(train_cfg.widths)}")
    run_grid(train_cfg, data, P_list, seeds, out_dir, test_split)

    outputs, failed = [], []
    for P in P_list:
        for s in seeds:
            stem = f"curve_P{P}_s{s}"
            for ext in (".csv", ".json", ".error.json"):
                if os.path.exists(os.path.join(out_dir, stem + ext)):
                    outputs.append(stem + ext)
                    if ext == ".error.json":
                        failed.append(stem)

    hashes = {config_path: _sha256(config_path)}
    for f in in_files:
        hashes[f] = _sha256(f)
    RunManifest(command="train-grid", config=cfg, seeds=seeds,
                version=__version__, input_hashes=hashes, outputs=outputs,
                duration_s=round(time.monotonic() - t0, 3)).write(out_dir)
    return EXIT_PARTIAL if failed else EXIT_OK


# -------------------------------------------------------------- analyze

_ANALYZE_SCHEMA = {
    "curves": (True, None),
    "P_min": (False, None),
    "fit_window": (False, None),
    "lambda_offset_mode": (False, "zero"),
    "direct_offset_mode": (False, "zero"),
    "eps_offset_mode": (False, "zero"),
    "deviation_range": (False, None),
}


def _read_curve_file(path):
    """One curve file -> (P, seed or None, epochs or None, lam, eps)."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
    if header.startswith("P,seed,epoch"):
        c = LearningCurve.from_csv(path)
        return (float(c.P), int(c.seed), np.asarray(c.epochs),
                np.asarray(c.lam, float), np.asarray(c.test_error, float))
    if header.startswith("alpha,lambda"):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ParseError(f"{path} has no data rows")
        lam = np.array([float(r["lambda"]) for r in rows])
        eps = np.array([float(r["eps"]) for r in rows])
        return float(rows[0]["alpha"]), None, None, lam, eps
    raise ParseError(f"{path} is neither a learning-curve nor a sweep CSV")


def _gather_curves(specs):
    paths = []
    for spec in specs:
        if globmod.has_magic(spec):
            paths.extend(sorted(globmod.glob(spec)))
        else:
            paths.append(spec)
    seen, ordered = set(), []
    for p in paths:
        if p not in seen:
            seen.add(p)
            ordered.append(p)
    return ordered


def _aggregate_by_P(records):
    """Average same-P curves over seeds, pointwise on the shared snapshot
    grid. Curves measured at the same P are repeats of one experiment;
    their mean curve is what the collapse consumes."""
    groups: dict = {}
    for P, seed, epochs, lam, eps in records:
        groups.setdefault(P, []).append((seed, epochs, lam, eps))
    curves, seeds = [], set()
    for P in sorted(groups):
        members = groups[P]
        first_epochs = members[0][1]
        for _, epochs, lam, _ in members:
            if len(lam) != len(members[0][2]):
                raise ParseError(f"P={P:g}: snapshot counts differ "
                                 f"across seeds")
            if first_epochs is not None and epochs is not None \
                    and not np.array_equal(epochs, first_epochs):
                raise ParseError(f"P={P:g}: snapshot epochs differ "
                                 f"across seeds")
        lam = np.mean([m[2] for m in members], axis=0)
        eps = np.mean([m[3] for m in members], axis=0)
        curves.append(CurveData(P=float(P), lam=lam, eps=eps))
        seeds.update(m[0] for m in members if m[0] is not None)
    return curves, sorted(seeds)


def cmd_analyze(config_path, out=None, seed=None, workers=1,
                verbose=False) -> int:
    """Collapse the curves, fit both power laws, predict the combined
    exponent, and emit a report JSON plus plot-ready CSVs."""
    t0 = time.monotonic()
    try:
        cfg = _load_config(config_path, _ANALYZE_SCHEMA)
        specs = cfg["curves"]
        if isinstance(specs, str):
            specs = [specs]
        paths = _gather_curves(specs)
        if not paths:
            raise ParseError("no curve files matched the config")
        records = [_read_curve_file(p) for p in paths]
        curves, curve_seeds = _aggregate_by_P(records)
    except (ParseError, ValueError, TypeError, OSError) as exc:
        return _fail(str(exc))

    fit_window = None if cfg["fit_window"] is None \
        else (float(cfg["fit_window"][0]), float(cfg["fit_window"][1]))
    try:
        if len(curves) < 3:
            raise ValueError(f"insufficient curves: {len(curves)} found, "
                             f"collapse needs 3")
        res = collapse(curves, P_min=cfg["P_min"], fit_window=fit_window)
        if len(res.optima) < 4:
            raise ValueError(
                f"insufficient curves: {len(res.optima)} optima, the "
                f"location fit needs 4")
        lam_fit = fit_lambda_opt(res.optima,
                                 offset_mode=cfg["lambda_offset_mode"])
        Ps = np.array(sorted(res.optima))
        eps_opt = np.array([res.optima[P].eps_opt for P in Ps])
        direct = fit_power_law(Ps, eps_opt,
                               offset_mode=cfg["direct_offset_mode"],
                               decreasing=True)
        pred = predict_exponent(res, lam_fit, direct)
    except (ValueError, AccuracyError) as exc:
        return _fail(str(exc))

    # Regime thresholds need the error-vs-norm law in original units
    # (k1, gamma1, q1), which the rescaled collapse cannot supply; fit it
    # on the pre-optimum branch of the largest-P curve kept.
    P_big = max(res.optima)
    big = next(c for c in curves if c.P == P_big)
    mask = big.lam < res.optima[P_big].lambda_opt
    eps_fit = None
    P_minus, P_plus = None, None
    try:
        eps_fit = fit_power_law(big.lam[mask], big.eps[mask],
                                offset_mode=cfg["eps_offset_mode"],
                                decreasing=True)
        P_minus, P_plus = thresholds(eps_fit, lam_fit)
    except (ValueError, AccuracyError) as exc:
        _warn(f"threshold fit on P={P_big:g} failed: {exc}; "
              f"thresholds omitted")

    out_dir = _resolve_out(out, cfg, "analyze")
    os.makedirs(out_dir, exist_ok=True)
    outputs = []

    res.rescaled_to_csv(os.path.join(out_dir, "rescaled.csv"))
    outputs.append("rescaled.csv")

    # plot columns: measured optima, the direct fit, and the predicted
    # slope anchored at the largest-P optimum
    anchor = eps_opt[-1] * Ps[-1] ** pred.gamma_pred
    with open(os.path.join(out_dir, "scaling.csv"), "w") as fh:
        fh.write("P,lambda_opt,eps_opt,eps_direct_fit,eps_predicted\n")
        for i, P in enumerate(Ps):
            fit_val = direct.k * P ** (-direct.gamma) + direct.q
            pred_val = anchor * P ** (-pred.gamma_pred)
            fh.write(f"{float(P)!r},{float(res.optima[P].lambda_opt)!r},"
                     f"{float(eps_opt[i])!r},{float(fit_val)!r},"
                     f"{float(pred_val)!r}\n")
    outputs.append("scaling.csv")

    report = {
        "n_curves": len(curves),
        "P_values": [float(P) for P in Ps],
        "P_min_used": res.P_min_used,
        "gamma1_mean": res.gamma1_mean,
        "gamma1_sem": res.gamma1_sem,
        "gamma1_by_P": [{"P": float(P), "gamma1": res.gamma1_by_P[P]}
                        for P in Ps],
        "lambda_fit": lam_fit.as_dict(),
        "direct_fit": direct.as_dict(),
        "prediction": {"gamma_pred": pred.gamma_pred,
                       "sigma_pred": pred.sigma_pred,
                       "gamma_meas": pred.gamma_meas,
                       "sigma_meas": pred.sigma_meas,
                       "sigma_combined": pred.sigma_combined,
                       "agrees": pred.agrees},
        "eps_fit": None if eps_fit is None else eps_fit.as_dict(),
        "thresholds": {"P_minus": P_minus, "P_plus": P_plus},
    }
    if cfg["deviation_range"] is not None:
        lo, hi = (float(v) for v in cfg["deviation_range"])
        report["collapse_deviation"] = collapse_deviation(res, (lo, hi))
    _write_json(os.path.join(out_dir, "report.json"), report)
    outputs.append("report.json")
    _say(verbose, f"gamma_pred={pred.gamma_pred:.4f} "
                  f"gamma_meas={pred.gamma_meas:.4f} agrees={pred.agrees}")

    hashes = {config_path: _sha256(config_path)}
    for p in paths:
        hashes[p] = _sha256(p)
    RunManifest(command="analyze", config=cfg, seeds=curve_seeds,
                version=__version__, input_hashes=hashes, outputs=outputs,
                duration_s=round(time.monotonic() - t0, 3)).write(out_dir)
    return EXIT_OK


# ----------------------------------------------------------------- main

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="normscale",
        description="Norm-indexed learning curves: solve, train, audit, "
                    "and fit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True,
                           help="path to the JSON config")
        p.add_argument("--out", help="output directory (overrides config "
                                     f"and ${_OUT_ENV})")
        p.add_argument("--seed", type=int,
                       help="single seed overriding the config's list")
        p.add_argument("--workers", type=int, default=1,
                       help="reserved; this build runs work items "
                            "sequentially for determinism")
        p.add_argument("--verbose", action="store_true")

    common(sub.add_parser(
        "replica-sweep", help="error curve over a sharpness grid per alpha"))
    common(sub.add_parser(
        "perceptron", help="gradient-descent trajectories, optional "
                           "fixed-norm overlay"))
    p_norm = sub.add_parser(
        "norm", help="spectral complexity reports for checkpoints")
    p_norm.add_argument("checkpoints",
                        help="checkpoint directory, directory of "
                             "checkpoints, or glob")
    common(p_norm, config=False)
    common(sub.add_parser(
        "train-grid", help="train a P x seed grid, streaming curves"))
    common(sub.add_parser(
        "analyze", help="collapse curves, fit power laws, predict the "
                        "combined exponent"))

    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be >= 1")

    kwargs = dict(out=args.out, seed=args.seed, workers=args.workers,
                  verbose=args.verbose)
    if args.command == "norm":
        return cmd_norm(args.checkpoints, **kwargs)
    dispatch = {"replica-sweep": cmd_replica_sweep,
                "perceptron": cmd_perceptron,
                "train-grid": cmd_train_grid,
                "analyze": cmd_analyze}
    return dispatch[args.command](args.config, **kwargs)


if __name__ == "__main__":
    raise SystemExit(main())
