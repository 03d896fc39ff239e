"""Command-line interface: ``cbartgp {simulate,fit,predict,replicate}``.

Data files are CSV with a header row.  1-D data use columns ``idx, x, y``
and spatial data ``s1, s2, x, y``; any further columns other than these
labels are taken as extra covariates.  Every run writes ``manifest.json``
into its output directory.  Exit codes: 0 success, 2 usage or schema error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__
from .cbart import CbartConfig, predict_f, run_cbart
from .covariance import (
    CovarianceKind,
    CovarianceModel,
    FactorizationError,
    build_ar_precision,
    build_spatial_covariance,
)
from .experiments import EXPERIMENTS, run_replicates, summarize
from .gp import krige
from .simgen import gen_ar1_cubic, gen_spatial
from .twostage import DEFAULT_WEIGHTS, fit_iid, run_two_stage

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LABEL_COLUMNS = ("idx", "s1", "s2")
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------- file io

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, columns: dict) -> None:
    """Write equal-length columns; floats use the shortest round-trip repr."""
    names = list(columns)
    cols = [np.asarray(columns[c]) for c in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> dict:
    """Read a numeric CSV into a dict of float arrays, keyed by header."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise SchemaError(f"{path}: missing header")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names")
    body = [r for r in rows[1:] if r]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric or ragged rows ({exc})") from exc
    if not np.all(np.isfinite(data)):
        raise SchemaError(f"{path}: missing or non-finite values are not supported")
    return {h: data[:, i] for i, h in enumerate(header)}


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, CovarianceKind):
        return obj.value
    return obj


class Dataset(SimpleNamespace):
    """Parsed data file: ``X``, ``y`` (or None), labels and column names."""


def load_dataset(path: Path, require_y: bool = True) -> Dataset:
    cols = read_csv(path)
    spatial = "s1" in cols or "s2" in cols
    if spatial and not ("s1" in cols and "s2" in cols):
        raise SchemaError(f"{path}: spatial data need both s1 and s2")
    if not spatial and "idx" not in cols:
        raise SchemaError(f"{path}: expected an idx column (1-D) or s1, s2 columns (spatial)")
    xnames = [c for c in cols if c not in LABEL_COLUMNS and c != "y"]
    if not xnames:
        raise SchemaError(f"{path}: no covariate columns")
    if require_y and "y" not in cols:
        raise SchemaError(f"{path}: missing y column")
    n = len(cols[xnames[0]])
    if n == 0:
        raise SchemaError(f"{path}: no data rows")
    X = np.column_stack([cols[c] for c in xnames])
    if spatial:
        labels = np.column_stack([cols["s1"], cols["s2"]])
    else:
        labels = cols["idx"]
        if np.any(labels != np.round(labels)) or np.any(labels < 1):
            raise SchemaError(f"{path}: idx must hold positive integers")
    return Dataset(X=X, y=cols.get("y"), labels=labels, spatial=spatial, xnames=xnames, n=n, path=str(path))


def _label_columns(ds: Dataset) -> dict:
    if ds.spatial:
        return {"s1": ds.labels[:, 0], "s2": ds.labels[:, 1]}
    return {"idx": ds.labels.astype(np.int64)}


def save_forests(path: Path, fit) -> None:
    """Store every kept ensemble of a fit as one flat node table."""
    forests = fit.forests
    sizes = np.array([len(f[0]) for f in forests], dtype=np.int64)
    n_roots = np.array([len(f[5]) for f in forests], dtype=np.int64)
    np.savez(
        path,
        var=np.concatenate([f[0] for f in forests]),
        cut=np.concatenate([f[1] for f in forests]),
        left=np.concatenate([f[2] for f in forests]),
        right=np.concatenate([f[3] for f in forests]),
        mu=np.concatenate([f[4] for f in forests]),
        roots=np.concatenate([f[5] for f in forests]),
        sizes=sizes,
        n_roots=n_roots,
        y_offset=fit.y_offset,
        y_scale=fit.y_scale,
    )


def load_forests(path: Path) -> SimpleNamespace:
    """Inverse of :func:`save_forests`; the result works with :func:`predict_f`."""
    with np.load(path) as z:
        d = {k: z[k] for k in z.files}
    node_off = np.concatenate(([0], np.cumsum(d["sizes"])))
    root_off = np.concatenate(([0], np.cumsum(d["n_roots"])))
    forests = []
    for i in range(len(d["sizes"])):
        a, b = node_off[i], node_off[i + 1]
        forests.append((d["var"][a:b], d["cut"][a:b], d["left"][a:b], d["right"][a:b], d["mu"][a:b],
                        d["roots"][root_off[i]:root_off[i + 1]]))
    return SimpleNamespace(forests=forests, y_offset=float(d["y_offset"]), y_scale=float(d["y_scale"]))


def write_manifest(out: Path, command: str, config: dict, seed, t0: float, outputs: list, warnings=()) -> None:
    write_json(out / "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "timings": {"wall_seconds": time.perf_counter() - t0},
        "outputs": sorted(outputs),
        "warnings": list(warnings),
    })


# ---------------------------------------------------------------- commands

def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise SchemaError(f"cannot write to {out}: {exc}") from exc
    return out


def _cbart_config(args, seed) -> CbartConfig:
    return CbartConfig(m=args.m_trees, n_iter=args.n_iter, burn_in=args.burn_in, k=args.tau_k, rng_seed=seed)


def _weights(text: str):
    try:
        w = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise SchemaError(f"bad --weights {text!r}") from exc
    if not w or any(not 0.0 <= v <= 1.0 for v in w):
        raise SchemaError("--weights must be a nonempty comma list of values in [0, 1]")
    return w


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    if args.design == "ar1":
        if not 0.0 <= args.rho < 1.0 or not args.sigma > 0.0 or args.n < 2:
            raise SchemaError("ar1 needs 0 <= rho < 1, sigma > 0, n >= 2")
        data = gen_ar1_cubic(n=args.n, rho=args.rho, sigma=args.sigma, seed=args.seed)
        x = data.X[:, 0]
        idx = np.arange(1, data.n + 1)
        write_csv(out / "train.csv", {"idx": idx, "x": x, "y": data.y})
        write_csv(out / "test.csv", {"idx": idx[:0], "x": x[:0], "y": data.y[:0]})
        write_csv(out / "truth.csv", {"idx": idx, "x": x, "f_true": data.f_true, "eta": data.eta})
    else:
        theta = _floats(args.theta, 3, "--theta")
        if args.n_train < 2 or args.n_test < 0 or min(theta) < 0:
            raise SchemaError("spatial needs n_train >= 2, n_test >= 0 and nonnegative theta")
        data = gen_spatial(args.scenario, args.n_train, args.n_test, theta, seed=args.seed)
        for name, part in (("train", data.train()), ("test", data.test())):
            write_csv(out / f"{name}.csv", {"s1": part.locations[:, 0], "s2": part.locations[:, 1],
                                            "x": part.X[:, 0], "y": part.y})
        split = np.zeros(data.n, dtype=np.int64)
        split[data.test_idx] = 1
        write_csv(out / "truth.csv", {"s1": data.locations[:, 0], "s2": data.locations[:, 1],
                                      "x": data.X[:, 0], "f_true": data.f_true, "z": data.z,
                                      "eta": data.eta, "is_test": split})
    config = {"design": args.design, "truth": data.truth}
    write_manifest(out, "simulate", config, args.seed, t0, ["train.csv", "test.csv", "truth.csv"])
    print(f"wrote {out}/train.csv ({len(data.train_idx)} rows)")
    return 0


def _floats(text: str, k: int, flag: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise SchemaError(f"bad {flag} {text!r}") from exc
    if len(vals) != k:
        raise SchemaError(f"{flag} needs {k} comma-separated values")
    return vals


def _data_paths(arg: str):
    p = Path(arg)
    if p.is_dir():
        return p / "train.csv", p
    return p, p.parent


def _truth_precision(ds: Dataset, data_dir: Path):
    man = data_dir / "manifest.json"
    if not man.is_file():
        raise SchemaError(f"--sigma-inv-from truth needs {man}")
    truth = json.loads(man.read_text())["config"]["truth"]
    if truth["kind"] == "ar1":
        if ds.spatial:
            raise SchemaError("AR(1) truth does not match spatial data")
        return build_ar_precision(truth["rho"], truth["sigma"], ds.n), truth
    if not ds.spatial:
        raise SchemaError("spatial truth does not match 1-D data")
    model = CovarianceModel("exp", {"sigma2": truth["sigma2"], "phi": truth["phi"], "tau2": truth["tau2"]},
                            ds.labels)
    return build_spatial_covariance(model, ds.labels)[1], truth


def _f_true_for(ds: Dataset, data_dir: Path):
    truth_csv = data_dir / "truth.csv"
    if not truth_csv.is_file():
        return None
    cols = read_csv(truth_csv)
    if ds.spatial:
        key = {(a, b): f for a, b, f in zip(cols["s1"], cols["s2"], cols["f_true"])}
        vals = [key.get((a, b)) for a, b in ds.labels]
    else:
        key = dict(zip(cols["idx"], cols["f_true"]))
        vals = [key.get(i) for i in ds.labels]
    return None if any(v is None for v in vals) else np.array(vals)


def _order_for_ar(ds: Dataset):
    if np.any(np.diff(ds.labels) <= 0):
        raise SchemaError("1-D data must be sorted by increasing idx")


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    data_path, data_dir = _data_paths(args.data)
    ds = load_dataset(data_path)
    cfg = _cbart_config(args, args.seed)
    result = {"model": args.model, "n": ds.n, "covariates": ds.xnames}
    warnings = []
    outputs = ["fit.json", "fhat.csv", "forest.npz"]
    if args.model == "cbart":
        if args.sigma_inv_from == "truth":
            prec, truth = _truth_precision(ds, data_dir)
            if not ds.spatial:
                _order_for_ar(ds)
            fit = run_cbart(ds.y, ds.X, prec, cfg)
            result["sigma_source"] = {"from": "truth", **truth}
        else:
            fit = fit_iid(ds.y, ds.X, cfg)
            result["sigma_source"] = {"from": "iid"}
            result["sigma_hat"] = float(np.mean(fit.sigma_draws))
        result["acceptance_rates"] = fit.acceptance_rates
        save_forests(out / "forest.npz", fit)
    else:
        kind = args.gp_kind or ("exp" if ds.spatial else "ar1")
        if CovarianceKind(kind).is_spatial != ds.spatial:
            raise SchemaError(f"--gp-kind {kind} does not match the data labels")
        if not ds.spatial:
            _order_for_ar(ds)
        res = run_two_stage(ds.y, ds.X, ds.labels, gp_kind=kind, weights=_weights(args.weights),
                            cbart_config=cfg, nu=args.nu)
        fit = res.selected.cbart_fit
        rows = []
        for r in res.records:
            rows.append({"w": r.w, "theta_hat": r.theta_hat, "ss_eta_w": r.ss_eta_w,
                         "ss_eta_cbart": r.ss_eta_cbart, "ss_delta": r.ss_delta, "converged": r.converged,
                         "gp_loglik": r.gp_fit.loglik, "acceptance_rates": r.cbart_fit.acceptance_rates})
            if not r.converged:
                warnings.append(f"GP fit at w={r.w} did not converge")
        k = res.selected_k
        result.update(gp_kind=kind, nu=args.nu, records=rows, selected_k=k, selected_w=res.selected.w,
                      theta_hat=res.selected.theta_hat, interior_minimum=0 < k < len(rows) - 1,
                      iid_sigma_hat=float(np.mean(res.iid_fit.sigma_draws)),
                      acceptance_rates=fit.acceptance_rates)
        with open(out / "sstable.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row"] + [f"k{i + 1}" for i in range(len(rows))])
            w.writerow(["w"] + [_fmt(r["w"]) for r in rows])
            w.writerow(["ss_delta"] + [_fmt(r["ss_delta"]) for r in rows])
        outputs += ["sstable.csv", "forest_iid.npz", "gp_state.npz"]
        save_forests(out / "forest.npz", fit)
        save_forests(out / "forest_iid.npz", res.iid_fit)
        np.savez(out / "gp_state.npz", residuals=ds.y - fit.posterior_mean_f, locations=ds.labels)
    cols = {**_label_columns(ds)}
    for i, name in enumerate(ds.xnames):
        cols[name] = ds.X[:, i]
    cols["fhat"] = fit.posterior_mean_f
    f_true = _f_true_for(ds, data_dir)
    if f_true is not None:
        cols["f_true"] = f_true
        result["mse_f"] = float(np.mean((fit.posterior_mean_f - f_true) ** 2))
    write_csv(out / "fhat.csv", cols)
    result["warnings"] = warnings
    write_json(out / "fit.json", result)
    config = {"model": args.model, "data": str(data_path), "cbart": asdict(cfg), "weights": args.weights,
              "gp_kind": args.gp_kind, "nu": args.nu, "sigma_inv_from": args.sigma_inv_from}
    write_manifest(out, "fit", config, args.seed, t0, outputs, warnings)
    for msg in warnings:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"wrote {out}/fit.json")
    return 0


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    fit_dir = Path(args.fit_dir)
    fit_json = fit_dir / "fit.json"
    if not fit_json.is_file() or not (fit_dir / "forest.npz").is_file():
        raise SchemaError(f"{fit_dir} does not hold fit artifacts")
    info = json.loads(fit_json.read_text())
    ds = load_dataset(Path(args.new), require_y=False)
    if ds.xnames != info["covariates"]:
        raise SchemaError(f"covariates {ds.xnames} do not match the fit's {info['covariates']}")
    forest = load_forests(fit_dir / "forest.npz")
    fhat = predict_f(forest, ds.X)
    zhat = np.zeros(ds.n)
    if info["model"] == "twostage":
        state = np.load(fit_dir / "gp_state.npz")
        kind = CovarianceKind(info["gp_kind"])
        if kind.is_spatial != ds.spatial:
            raise SchemaError("new-point labels do not match the fitted GP")
        params = dict(info["theta_hat"])
        model = CovarianceModel(kind, params, state["locations"] if kind.is_spatial else None)
        zhat = krige(model, state["residuals"], state["locations"], ds.labels)
    yhat = fhat + zhat
    cols = {**_label_columns(ds)}
    for i, name in enumerate(ds.xnames):
        cols[name] = ds.X[:, i]
    cols.update(fhat=fhat, zhat=zhat, yhat=yhat)
    write_csv(out / "predictions.csv", cols)
    summary = {}
    if ds.y is not None:
        summary["mse_yhat"] = float(np.mean((yhat - ds.y) ** 2))
        print(f"MSE(yhat) = {summary['mse_yhat']:.6g}")
        if (fit_dir / "forest_iid.npz").is_file():
            base = predict_f(load_forests(fit_dir / "forest_iid.npz"), ds.X)
            summary["mse_yhat_iid_bart"] = float(np.mean((base - ds.y) ** 2))
            print(f"MSE(yhat, iid BART) = {summary['mse_yhat_iid_bart']:.6g}")
    outputs = ["predictions.csv"]
    if summary:
        write_json(out / "predict_summary.json", summary)
        outputs.append("predict_summary.json")
    write_manifest(out, "predict", {"fit_dir": str(fit_dir), "new": str(args.new)}, None, t0, outputs)
    return 0


def cmd_replicate(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    if not 1 <= args.seeds <= 100:
        raise SchemaError("--seeds must lie in 1..100")
    seeds = list(range(args.seed, args.seed + args.seeds))
    cfg = _cbart_config(args, None)
    kwargs = {}
    if args.experiment in ("sec32", "sim1d", "spatial"):
        kwargs["weights"] = _weights(args.weights)
    if args.experiment == "spatial":
        kwargs["scenario"] = args.scenario
        kwargs["gp_kind"] = args.gp_kind or "exp"
    records = run_replicates(args.experiment, seeds, cfg, **kwargs)
    report = {"summary": summarize(args.experiment, records), "records": records}
    write_json(out / "report.json", report)
    long = {"seed": [], "model": [], "metric": [], "value": []}
    metric_map = {
        "mse_cbart": ("cbart", "mse_f"), "mse_bart": ("bart", "mse_f"),
        "est_mse_cbart": ("cbart", "mse_f"), "est_mse_bart": ("bart", "mse_f"),
        "pred_mse_cbart_gp": ("cbart_gp", "mse_y"), "pred_mse_bart": ("bart", "mse_y"),
    }
    for rec in records:
        for key, (model, metric) in metric_map.items():
            if key in rec:
                long["seed"].append(rec["seed"])
                long["model"].append(model)
                long["metric"].append(metric)
                long["value"].append(rec[key])
    with open(out / "boxplot.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(long))
        for row in zip(*long.values()):
            w.writerow([row[0], row[1], row[2], _fmt(row[3])])
    config = {"experiment": args.experiment, "seeds": seeds, "cbart": asdict(cfg), "weights": args.weights,
              "scenario": args.scenario, "gp_kind": args.gp_kind}
    write_manifest(out, "replicate", config, args.seed, t0, ["report.json", "boxplot.csv"])
    print(json.dumps(_jsonable(report["summary"]), indent=2))
    return 0


# ---------------------------------------------------------------- parser

def _mcmc_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-iter", type=int, default=1000, help="kept MCMC iterations")
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--m-trees", type=int, default=50)
    p.add_argument("--tau-k", type=float, default=2.0, help="leaf prior sd is 0.5 / (k sqrt(m)) on scaled y")
    p.add_argument("--weights", default=",".join(str(w) for w in DEFAULT_WEIGHTS))
    p.add_argument("--gp-kind", choices=["ar1", "exp", "matern"], default=None)
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbartgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("design", choices=["ar1", "spatial"])
    sim.add_argument("--n", type=int, default=200)
    sim.add_argument("--rho", type=float, default=0.8)
    sim.add_argument("--sigma", type=float, default=0.1)
    sim.add_argument("--scenario", type=int, choices=[1, 2, 3], default=3)
    sim.add_argument("--n-train", type=int, default=200)
    sim.add_argument("--n-test", type=int, default=100)
    sim.add_argument("--theta", default="3,6,1", help="sigma2,phi,tau2")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out-dir", required=True)
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit CBART or the two-stage CBART-GP")
    fit.add_argument("model", choices=["cbart", "twostage"])
    fit.add_argument("--data", required=True, help="train.csv or a directory holding it")
    fit.add_argument("--sigma-inv-from", choices=["iid", "truth"], default="iid",
                     help="cbart only: i.i.d. errors with estimated variance, or the generating covariance")
    fit.add_argument("--nu", type=float, default=0.5, help="Matern smoothness")
    _mcmc_flags(fit)
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="predict at new points from a fit directory")
    pred.add_argument("--fit-dir", required=True)
    pred.add_argument("--new", required=True, help="CSV of new points (same schema, y optional)")
    pred.add_argument("--out-dir", required=True)
    pred.set_defaults(func=cmd_predict)

    rep = sub.add_parser("replicate", help="run a seeded simulation study")
    rep.add_argument("experiment", choices=sorted(EXPERIMENTS))
    rep.add_argument("--seeds", type=int, default=20, help="number of replicates (max 100)")
    rep.add_argument("--scenario", type=int, choices=[1, 2, 3], default=3)
    _mcmc_flags(rep)
    rep.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FactorizationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
