"""Command-line entry points for runs, comparisons, ablations and checks."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import harness, models, theory
from .errors import ToolkitError


def _load(config_path, seeds, out):
    config = harness.load_config(config_path)
    if seeds:
        config = dataclasses.replace(config, seeds=tuple(seeds))
    return config, (out if out else config.output_dir)


@click.group()
def main():
    """N:M sparsity training recipes under Adam, with switch detection tooling."""


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", "seeds", multiple=True, type=int, help="Override config seeds.")
@click.option("--out", type=click.Path(), default=None, help="Override output directory.")
@click.option("--jobs", type=int, default=1, show_default=True)
def run_cmd(config_path, seeds, out, jobs):
    """Train every seed of a config and write trajectories plus a summary."""
    config, out_dir = _load(config_path, seeds, out)
    summary = harness.run(config, output_dir=out_dir, jobs=jobs)
    flat = summary.to_flat_dict()
    click.echo(f"seeds: {flat['seeds']}")
    click.echo(f"sparse eval loss: {flat['sparse_eval_loss_mean']:.6f} "
               f"+/- {flat['sparse_eval_loss_std']:.6f}")
    click.echo(f"dense eval loss:  {flat['dense_eval_loss_mean']:.6f} "
               f"+/- {flat['dense_eval_loss_std']:.6f}")
    click.echo(f"switched at: {flat['switched_at']}")
    click.echo(f"outputs in {out_dir}")


@main.command("compare-switch")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@click.option("--criteria", default="autoswitch,relative,staleness", show_default=True,
              help="Comma-separated criterion kinds to score.")
def compare_switch_cmd(config_path, out, criteria):
    """Profile dense runs and score switch criteria by later variance change."""
    config, out_dir = _load(config_path, (), out)
    wanted = [c.strip() for c in criteria.split(",") if c.strip()]
    defaults = {c.kind: c for c in harness.default_comparison_criteria(config.total_steps)}
    chosen = []
    for kind in wanted:
        if kind not in defaults:
            raise click.BadParameter(f"unknown criterion {kind!r}")
        chosen.append(defaults[kind])
    rows = harness.compare_switch(config, chosen, output_dir=out_dir)
    for row in rows:
        metric = "n/a" if row["avg_change_metric"] is None else f"{row['avg_change_metric']:.6e}"
        click.echo(f"seed={row['seed']} {row['criterion']:<28} t0={row['t0']} "
                   f"metric={metric} {row['note']}")


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--kind", required=True, type=click.Choice(harness.ABLATION_KINDS))
@click.option("--out", type=click.Path(), default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
def ablate_cmd(config_path, kind, out, jobs):
    """Run one ablation matrix over the config's seeds."""
    config, out_dir = _load(config_path, (), out)
    rows = harness.ablation(kind, config, output_dir=out_dir, jobs=jobs)
    for row in rows:
        click.echo(f"{row['cell']:<24} seed={row['seed']} "
                   f"sparse={row['sparse_eval_loss']:.6f} dense={row['dense_eval_loss']:.6f} "
                   f"switched_at={row['switched_at']}")


@main.command("validate-theorem")
@click.option("--stream", type=click.Choice(theory.STREAM_KINDS), default="bernoulli", show_default=True)
@click.option("--g", "bound_g", type=float, default=1.0, show_default=True)
@click.option("--dim", type=int, default=1, show_default=True)
@click.option("--level", type=float, default=None, help="Constant stream value.")
@click.option("--p", type=float, default=0.5, show_default=True, help="Bernoulli keep probability.")
@click.option("--sigma", type=float, default=None, help="Pre-truncation scale of the squared Gaussian.")
@click.option("--beta2", type=float, default=0.999, show_default=True)
@click.option("--t0", type=int, default=2000, show_default=True)
@click.option("--t", type=int, default=12000, show_default=True)
@click.option("--delta", type=float, default=0.01, show_default=True)
@click.option("--trials", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def validate_theorem_cmd(stream, bound_g, dim, level, p, sigma, beta2, t0, t, delta,
                         trials, seed, out):
    """Monte Carlo check of the variance-drift concentration bound."""
    s = theory.StationaryStream(kind=stream, bound=bound_g, dim=dim, seed=seed,
                                level=level, p=p, sigma=sigma)
    report = theory.validate_theorem(s, beta2, t0, t, delta, trials)
    flat = report.to_flat_dict()
    for key, value in flat.items():
        click.echo(f"{key}: {value}")
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "bound_report.json", "w") as fh:
            json.dump(flat, fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(f"report written to {out_dir / 'bound_report.json'}")
    if not report.per_step_bound_ok:
        sys.exit(1)


@main.command("fd-check")
@click.option("--kind", type=click.Choice(models.MODEL_KINDS), default="mlp_classifier", show_default=True)
@click.option("--layer-sizes", default="3,5,3", show_default=True)
@click.option("--activation", type=click.Choice(models.ACTIVATIONS), default="tanh", show_default=True)
@click.option("--batch", type=int, default=8, show_default=True)
@click.option("--instances", type=int, default=20, show_default=True)
@click.option("--h", type=float, default=1e-5, show_default=True)
@click.option("--tol", type=float, default=1e-5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def fd_check_cmd(kind, layer_sizes, activation, batch, instances, h, tol, seed):
    """Finite-difference check of the gradient engine on random instances."""
    sizes = tuple(int(s) for s in layer_sizes.split(","))
    spec = models.ModelSpec(kind=kind, layer_sizes=sizes, activation=activation)
    rng = np.random.default_rng(seed)
    worst = 0.0
    failed = 0
    for i in range(instances):
        params = models.init_params(spec, (seed, i))
        inputs = rng.standard_normal((batch, sizes[0]))
        if kind == "mlp_classifier":
            targets = rng.integers(0, sizes[-1], batch).astype(float)
        else:
            targets = rng.standard_normal((batch, sizes[-1]))
        report = models.finite_difference_check(spec, params, (inputs, targets), h=h, tol=tol)
        worst = max(worst, report.max_rel_error)
        status = "ok" if report.passed else "FAIL"
        click.echo(f"instance {i}: max_rel_error={report.max_rel_error:.3e} {status}")
        if not report.passed:
            failed += 1
            for name, idx, err in report.offenders[:5]:
                click.echo(f"  offender {name}[{idx}] rel_error={err:.3e}")
    click.echo(f"worst max_rel_error over {instances} instances: {worst:.3e}")
    if failed:
        sys.exit(1)


def entry():
    try:
        main()
    except ToolkitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    entry()
