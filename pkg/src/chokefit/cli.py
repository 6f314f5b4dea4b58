"""Command-line front end: synthetic data generation, model fitting,
evaluation, regularization sweeps, and hyperparameter search.

Every command writes into a timestamped subdirectory of --out containing the
fully resolved config echo, the result files, the delimited exports, and the
rendered figures. Exit codes: 0 success, 2 configuration error, 3 data error,
4 training failure.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import data, estimation, figures, nnet, physics
from .config import RunConfig, load_run_config
from .data import Dataset, SchemaConfig
from .estimation import FitResult
from .exceptions import ChokefitError, ConfigError, DataError, SchemaError, TrainingError

EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_TRAINING_ERROR = 4


def _fail(exc: Exception) -> int:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG_ERROR
    if isinstance(exc, (DataError, SchemaError, FileNotFoundError)):
        return EXIT_DATA_ERROR
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING_ERROR
    return 1


def _run_dir(out: str, command: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(out)
    base.mkdir(parents=True, exist_ok=True)
    candidate = base / f"{stamp}-{command}"
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = base / f"{stamp}-{command}-{suffix}"
    candidate.mkdir()
    return candidate


def _echo_config(cfg: RunConfig, run_dir: Path) -> None:
    with open(run_dir / "config.json", "w") as fh:
        json.dump(cfg.resolved_dict(), fh, indent=1)


def _parse_fixes(fix: tuple) -> dict:
    fixed = {}
    for item in fix:
        if "=" not in item:
            raise ConfigError(f"--fix expects name=value, got {item!r}")
        name, _, value = item.partition("=")
        try:
            fixed[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--fix {name}: {value!r} is not a number") from None
    return fixed


def _summary_table(result: FitResult) -> str:
    """Min/median/max table of errors and parameters across restarts."""
    summary = result.summary()
    rows = [("metric/param", "min", "median", "max")]
    for key in ["test_mae", "test_mape"] + list(result.ok_records[0].params.names):
        entry = summary[key]
        rows.append((key, f"{entry['min']:.6g}", f"{entry['median']:.6g}",
                     f"{entry['max']:.6g}"))
    for name, value in result.fit.fixed_params.items():
        rows.append((f"{name} (fixed)", f"{value:.6g}", f"{value:.6g}", f"{value:.6g}"))
    widths = [max(len(str(r[i])) for r in rows) for i in range(4)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 6))
    n_div = sum(1 for r in result.records if r.diverged)
    lines.append(f"restarts: {len(result.records)} ({n_div} diverged), "
                 f"train rows: {result.n_train}, test rows: {result.n_test}")
    return "\n".join(lines)


def _write_loss_traces(result: FitResult, run_dir: Path) -> None:
    with open(run_dir / "loss_traces.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + [f"restart_{r.index}" for r in result.records])
        n_epochs = max((len(r.loss_trace) for r in result.records), default=0)
        for e in range(n_epochs):
            row = [e + 1]
            for r in result.records:
                row.append(format(float(r.loss_trace[e]), ".17g")
                           if e < len(r.loss_trace) else "")
            writer.writerow(row)
    figures.save_loss_traces(
        run_dir / "loss_traces.png",
        {f"restart {r.index}": r.loss_trace for r in result.records})


def _write_parity(result: FitResult, test_ds: Dataset, run_dir: Path, stem: str) -> None:
    rec = result.median_record()
    pred, ok = estimation.predict_dataset(test_ds, rec.params, rec.mlp,
                                          result.constants, result.area_spec)
    with open(run_dir / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y_true", "y_pred", "evaluable"])
        for yt, yp, okay in zip(test_ds.y, pred, ok):
            writer.writerow([format(float(yt), ".17g"),
                             format(float(yp), ".17g") if okay else "",
                             int(okay)])
    figures.save_parity(run_dir / f"{stem}.png", test_ds.y[ok], pred[ok],
                        title=f"median restart ({result.mode})")


def _load_datasets(cfg: RunConfig, data_path: str, test_path: str | None):
    """Train/test pair: an explicit test file wins, otherwise the configured
    chronological split applies."""
    ds = data.load_csv(data_path, cfg.schema)
    if test_path is not None:
        return ds, data.load_csv(test_path, cfg.schema)
    return data.chronological_split(ds, test_fraction=cfg.split.test_fraction,
                                    cutoff=cfg.split.cutoff)


@click.group()
def main():
    """Gray-box choke-flow modeling: generate data, fit, evaluate, sweep, search."""


@main.command()
@click.option("--config", "config_path", type=str, default=None,
              help="JSON run configuration.")
@click.option("--out", "out", type=str, default="runs", show_default=True,
              help="Parent directory for the run directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--mismatch", is_flag=True,
              help="Generate with the structurally different area curve.")
def generate(config_path, out, seed, mismatch):
    """Write a synthetic train/test dataset pair plus a summary."""
    try:
        cfg = load_run_config(config_path, {"seed": seed})
        run_dir = _run_dir(out, "generate")
        _echo_config(cfg, run_dir)

        syn = cfg.synthetic
        test_cfg = replace(syn, n_points=cfg.n_test, seed=syn.seed + 1)
        if mismatch:
            train_ds = data.generate_mismatch_synthetic(syn, cfg.mismatch_shape)
            test_ds = data.generate_mismatch_synthetic(test_cfg, cfg.mismatch_shape)
        else:
            train_ds = data.generate_synthetic(syn)
            test_ds = data.generate_synthetic(test_cfg)
        train_ds.to_csv(run_dir / "dataset.csv")
        test_ds.to_csv(run_dir / "test.csv")

        truth, area = train_ds.generator_truth
        lines = [
            f"rows: {len(train_ds)} train, {len(test_ds)} test",
            f"generator truth: " + ", ".join(
                f"{n}={v:.6g}" for n, v in zip(truth.names, truth.to_vector())),
            f"generating area: a_max={area.a_max:.6g} shape={area.shape}",
            f"target range [m3/h]: {train_ds.y.min():.4g} .. {train_ds.y.max():.4g}",
        ]
        (run_dir / "summary.txt").write_text("\n".join(lines) + "\n")
        click.echo("\n".join(lines))
        click.echo(f"written to {run_dir}")
    except ChokefitError as exc:
        sys.exit(_fail(exc))


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--data", "data_path", type=str, required=True,
              help="Training dataset CSV.")
@click.option("--test", "test_path", type=str, default=None,
              help="Separate test CSV; default splits --data chronologically.")
@click.option("--out", type=str, default="runs", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--mode", type=click.Choice(["mm", "hm"]), default=None,
              help="Override the configured model type.")
@click.option("--no-reg", is_flag=True, help="Disable parameter regularization.")
@click.option("--fix", multiple=True, metavar="NAME=VALUE",
              help="Hold a physical parameter constant (repeatable).")
def fit(config_path, data_path, test_path, out, seed, mode, no_reg, fix):
    """Train the mechanistic or hybrid model and report restart statistics."""
    try:
        cfg = load_run_config(config_path, {
            "seed": seed, "mode": mode, "no_reg": no_reg,
            "fixed_params": _parse_fixes(fix),
        })
        train_ds, test_ds = _load_datasets(cfg, data_path, test_path)
        run_dir = _run_dir(out, "fit")
        _echo_config(cfg, run_dir)

        result = estimation.train(train_ds, test_ds, cfg.priors,
                                  cfg.regularization, cfg.fit,
                                  cfg.constants, cfg.synthetic.area)
        estimation.save_fit_result(result, run_dir / "fit_result.json")
        _write_loss_traces(result, run_dir)
        _write_parity(result, test_ds, run_dir, "parity")
        table = _summary_table(result)
        (run_dir / "summary.txt").write_text(table + "\n")
        click.echo(table)
        click.echo(f"written to {run_dir}")
    except ChokefitError as exc:
        sys.exit(_fail(exc))


@main.command()
@click.option("--result", "result_path", type=str, required=True,
              help="fit_result.json of a previous run.")
@click.option("--data", "data_path", type=str, required=True,
              help="Dataset CSV to evaluate on (no splitting).")
@click.option("--config", "config_path", type=str, default=None,
              help="Config providing the CSV schema, if non-default.")
@click.option("--out", type=str, default="runs", show_default=True)
def evaluate(result_path, data_path, config_path, out):
    """Recompute metrics of a stored fit on a dataset."""
    try:
        cfg = load_run_config(config_path, {})
        if not Path(result_path).exists():
            raise DataError(f"result file not found: {result_path}")
        try:
            result = estimation.load_fit_result(result_path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ds = data.load_csv(data_path, cfg.schema)
        run_dir = _run_dir(out, "evaluate")
        _echo_config(cfg, run_dir)

        rows = []
        for rec in result.ok_records:
            pred, ok = estimation.predict_dataset(ds, rec.params, rec.mlp,
                                                  result.constants, result.area_spec)
            m = estimation.metrics(ds.y[ok], pred[ok])
            rows.append({"restart": rec.index, "mae": m.mae, "mape": m.mape,
                         "n_rows": int(ok.sum()), "n_failed": int((~ok).sum()),
                         "stored_test_mae": rec.test_mae,
                         "stored_test_mape": rec.test_mape})
        doc = {
            "result_file": str(result_path),
            "dataset": str(data_path),
            "per_restart": rows,
            "median_mae": float(np.median([r["mae"] for r in rows])),
            "median_mape": float(np.median([r["mape"] for r in rows])),
        }
        with open(run_dir / "metrics.json", "w") as fh:
            json.dump(doc, fh, indent=1)
        _write_parity(result, ds, run_dir, "parity")
        lines = [f"restart {r['restart']}: MAE {r['mae']:.6g}  MAPE {r['mape']:.6g}%"
                 for r in rows]
        lines.append(f"median: MAE {doc['median_mae']:.6g}  "
                     f"MAPE {doc['median_mape']:.6g}%")
        (run_dir / "metrics.txt").write_text("\n".join(lines) + "\n")
        click.echo("\n".join(lines))
        click.echo(f"written to {run_dir}")
    except ChokefitError as exc:
        sys.exit(_fail(exc))


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--data", "data_path", type=str, required=True)
@click.option("--test", "test_path", type=str, default=None)
@click.option("--out", type=str, default="runs", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--sigma-eps", "sigma_eps", multiple=True, type=float,
              help="Regularization strengths to sweep (repeatable); "
                   "defaults to the config's sweep.sigma_eps list.")
def sweep(config_path, data_path, test_path, out, seed, sigma_eps):
    """Train the hybrid model per regularization setting and export the
    learned area curves on a 101-point opening grid."""
    try:
        cfg = load_run_config(config_path, {"seed": seed, "mode": "hm"})
        values = tuple(sigma_eps) if sigma_eps else cfg.sweep.sigma_eps
        train_ds, test_ds = _load_datasets(cfg, data_path, test_path)
        run_dir = _run_dir(out, "sweep")
        _echo_config(cfg, run_dir)

        u_grid = np.linspace(0.0, 1.0, 101)
        mech = cfg.synthetic.area.area(u_grid)
        curves = {}
        for value in values:
            reg = replace(cfg.regularization, sigma_eps=value, enabled=True)
            result = estimation.train(train_ds, test_ds, cfg.priors, reg,
                                      cfg.fit, cfg.constants, cfg.synthetic.area)
            label = f"sigma_eps_{value:g}"
            estimation.save_fit_result(result, run_dir / f"fit_{label}.json")
            curves[label] = nnet.batch_forward(u_grid, result.median_record().mlp)
            click.echo(f"{label}: median test MAPE "
                       f"{result.summary()['test_mape']['median']:.4g}%")

        with open(run_dir / "area_curves.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["u", "mechanistic"] + list(curves))
            for i, u in enumerate(u_grid):
                writer.writerow([format(float(u), ".17g"),
                                 format(float(mech[i]), ".17g")]
                                + [format(float(curves[k][i]), ".17g") for k in curves])
        figures.save_area_curves(run_dir / "area_curves.png", u_grid, curves,
                                 reference=mech)
        for label, curve in curves.items():
            dev = float(np.max(np.abs(curve - mech)))
            click.echo(f"{label}: max |learned - mechanistic| = {dev:.6g} m2")
        click.echo(f"written to {run_dir}")
    except ChokefitError as exc:
        sys.exit(_fail(exc))


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--data", "data_path", type=str, required=True)
@click.option("--test", "test_path", type=str, default=None,
              help="Validation CSV; default splits --data chronologically.")
@click.option("--out", type=str, default="runs", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--budget", type=int, default=None,
              help="Number of random-search trials; defaults to the config.")
def search(config_path, data_path, test_path, out, seed, budget):
    """Random search for the learning rate and weight decay."""
    try:
        cfg = load_run_config(config_path, {"seed": seed})
        train_ds, val_ds = _load_datasets(cfg, data_path, test_path)
        run_dir = _run_dir(out, "search")
        _echo_config(cfg, run_dir)

        result = estimation.hyperparameter_search(
            train_ds, val_ds, cfg.priors, cfg.regularization, cfg.fit,
            cfg.search.space, budget or cfg.search.budget, cfg.seed,
            cfg.search.trial_restarts, cfg.constants, cfg.synthetic.area)

        with open(run_dir / "trials.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["trial", "learning_rate", "lambda", "val_mae", "error"])
            for t in result.trials:
                writer.writerow([t.index, format(t.learning_rate, ".17g"),
                                 format(t.lam, ".17g"),
                                 format(t.val_mae, ".17g"), t.error])
        best = {"learning_rate": result.best_learning_rate,
                "lambda": result.best_lam, "val_mae": result.best_val_mae}
        with open(run_dir / "best.json", "w") as fh:
            json.dump(best, fh, indent=1)
        click.echo(f"best: lr={best['learning_rate']:.6g} "
                   f"lambda={best['lambda']:.6g} val MAE={best['val_mae']:.6g}")
        click.echo(f"written to {run_dir}")
    except ChokefitError as exc:
        sys.exit(_fail(exc))


if __name__ == "__main__":
    main()
