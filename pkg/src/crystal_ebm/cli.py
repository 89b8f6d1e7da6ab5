"""Command-line interface: ``crystal-ebm <command>``.

Usage errors exit with status 2 (click's convention); runtime failures print
a one-line JSON object ``{"error": ..., "message": ...}`` to stderr and exit
with status 1.
"""

from __future__ import annotations

import csv
import ctypes
import functools
import io as _io
import json
import logging
import sys
from collections import defaultdict

import click
import numpy as np

from .elements import atomic_number
from .errors import CrystalEBMError
from .evaluator import MatchTolerances, displacement_energy_scan, evaluate_csp, spearman
from .gradients import finite_diff_check
from .io import (
    atomic_write,
    load_checkpoint,
    read_config,
    read_records,
    save_dataset,
    split_config,
)
from .model import ModelConfig, init_params
from .sampler import AnnealSchedule, sample_many
from .trainer import TrainConfig, train

log = logging.getLogger("crystal_ebm")

SUITES = ("invariance", "continuity", "gradients", "sampler", "matcher")
# small network for the finite-difference suite, see run_gradient_suite
GRADIENT_SUITE_CONFIG = ModelConfig(node_dim=6, edge_dim=8, conv_layers=2)


def tune_allocator(threshold: int = 256 * 1024 * 1024):
    """Raise glibc's mmap threshold so large temporaries are reused rather
    than mapped and unmapped on every call; a no-op elsewhere."""
    try:
        ctypes.CDLL("libc.so.6").mallopt(-3, threshold)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


def runtime_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (CrystalEBMError, OSError, ValueError) as exc:
            message = json.dumps({"error": type(exc).__name__, "message": str(exc)})
            click.echo(message, err=True)
            sys.exit(1)
    return wrapper


def parse_species(text: str) -> list[int]:
    """``"Na,Cl"`` or ``"Na2,Cl2"`` style lists of element symbols."""
    out = []
    for token in text.split(","):
        token = token.strip()
        symbol = token.rstrip("0123456789")
        count = token[len(symbol):]
        if not symbol or not symbol.isalpha():
            raise click.BadParameter(f"malformed species token {token!r}")
        try:
            z = atomic_number(symbol)
        except CrystalEBMError as exc:
            raise click.BadParameter(str(exc)) from None
        k = int(count) if count else 1
        if k < 1:
            raise click.BadParameter(f"count must be positive in {token!r}")
        out.extend([z] * k)
    return out


def _write_csv(path, header, rows):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue())


def _fmt(x):
    return "" if x is None else repr(float(x))


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for info, -vv for debug logging.")
def main(verbose):
    """Energy-based crystal structure prediction."""
    tune_allocator()
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--val", "val_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path.")
@click.option("--seed", type=int, default=None, help="Overrides the configured seed.")
@click.option("--diagnostics", type=click.Path(dir_okay=False),
              help="Diagnostics CSV (default: OUT.diagnostics.csv).")
@click.option("--max-steps", type=click.IntRange(min=1), default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False))
@runtime_errors
def train_cmd(data_path, val_path, config_path, out, seed, diagnostics, max_steps, resume):
    """Train a model and write a checkpoint after every epoch."""
    values = read_config(config_path) if config_path else {}
    model_kw, train_kw, sched_kw = split_config(values, (ModelConfig, TrainConfig, AnnealSchedule))
    if seed is not None:
        train_kw["seed"] = seed
    train_cfg = TrainConfig.from_dict(train_kw)
    resumed = load_checkpoint(resume) if resume else None
    model_cfg = resumed.model_config if resumed else ModelConfig(**model_kw)
    sched = None
    if sched_kw:
        sched_kw.setdefault("steps", train_cfg.train_chain_steps)
        sched = AnnealSchedule(**sched_kw)
    data = [r.unit for r in read_records(data_path)]
    val = [r.unit for r in read_records(val_path)] if val_path else []
    ckpt = train(data, val, model_cfg, train_cfg, resume=resumed, checkpoint_path=out,
                 diagnostics=diagnostics or f"{out}.diagnostics.csv", max_steps=max_steps,
                 sched=sched)
    click.echo(f"trained {ckpt.step} steps over {ckpt.epoch} epochs -> {out}")


@main.command("sample")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--species", "species_text", required=True, help='Element list, e.g. "Na,Cl".')
@click.option("--num", type=click.IntRange(min=1), default=20)
@click.option("--steps", type=click.IntRange(min=1), default=1000)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@runtime_errors
def sample_cmd(ckpt, species_text, num, steps, seed, out):
    """Draw annealed samples for one composition."""
    species = parse_species(species_text)
    model = load_checkpoint(ckpt)
    sched = AnnealSchedule(steps=steps)
    result = sample_many([species] * num, model.params, model.model_config, sched, seed=seed)
    kept = [(k, u) for k, u in enumerate(result.units) if u is not None]
    for k, message in sorted(result.errors.items()):
        log.warning("chain %d failed: %s", k, message)
    save_dataset([u for _, u in kept], out, ids=[f"sample{k}" for k, _ in kept])
    click.echo(f"wrote {len(kept)} of {num} samples to {out}")


def _presampled(path, items, per_crystal):
    """Sampler replaying stored units: records whose id is ``ID`` or starts
    with ``ID/`` belong to test crystal ``ID``."""
    groups = defaultdict(list)
    for r in read_records(path):
        groups[r.id.split("/", 1)[0]].append(r.unit)

    def run(species_list, seed):
        out = []
        for ident, _ in items:
            stored = groups.get(ident, [])[:per_crystal]
            out.extend(stored + [None] * (per_crystal - len(stored)))
        return out
    return run


@main.command("evaluate")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", type=click.IntRange(min=1), default=20, help="Samples per crystal.")
@click.option("--steps", type=click.IntRange(min=1), default=1000, help="Chain length.")
@click.option("--stol", type=float, default=0.5)
@click.option("--ltol", type=float, default=0.3)
@click.option("--angle-tol", type=float, default=10.0)
@click.option("--seed", type=int, default=0)
@click.option("--samples-from", type=click.Path(exists=True, dir_okay=False),
              help="Score stored samples (dataset records) instead of sampling.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@runtime_errors
def evaluate_cmd(ckpt, test_path, samples, steps, stol, ltol, angle_tol, seed, samples_from, out):
    """Match rate and rmse on a test set; writes id,matched,rms."""
    if ckpt is None and samples_from is None:
        raise click.UsageError("either --ckpt or --samples-from is required")
    tol = MatchTolerances(stol=stol, ltol=ltol, angle_tol=angle_tol)
    items = [(r.id, r.unit) for r in read_records(test_path)]
    if samples_from is not None:
        params, cfg = None, ModelConfig()
        sampler = _presampled(samples_from, items, samples)
    else:
        model = load_checkpoint(ckpt)
        params, cfg, sampler = model.params, model.model_config, None
    result = evaluate_csp(items, params, cfg, samples_per_crystal=samples, seed=seed,
                          sched=AnnealSchedule(steps=steps), tol=tol, sampler=sampler)
    _write_csv(out, ("id", "matched", "rms"),
               [(o.id, int(o.matched), _fmt(o.rms)) for o in result.outcomes])
    rmse = "nan" if result.rmse is None else f"{result.rmse:.6g}"
    click.echo(f"match_rate {result.match_rate:.2f}")
    click.echo(f"rmse {rmse}")


@main.command("perturb")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--index", type=click.IntRange(min=0), default=0, help="Record to perturb.")
@click.option("--atom", type=click.IntRange(min=0), default=None)
@click.option("--sigma", type=click.FloatRange(min=0, min_open=True), default=0.1)
@click.option("--trials", type=click.IntRange(min=2), default=1000)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@runtime_errors
def perturb_cmd(ckpt, input_path, index, atom, sigma, trials, seed, out):
    """Energy against single-atom Gaussian displacement."""
    model = load_checkpoint(ckpt)
    records = read_records(input_path)
    if index >= len(records):
        raise click.BadParameter(f"{input_path} has {len(records)} records", param_hint="--index")
    unit = records[index].unit
    if atom is not None and atom >= unit.n:
        raise click.BadParameter(f"unit has {unit.n} atoms", param_hint="--atom")
    disp, energy, atom = displacement_energy_scan(unit, model.params, model.model_config,
                                                  sigma=sigma, trials=trials, seed=seed, atom=atom)
    _write_csv(out, ("displacement_angstrom", "energy"),
               [(repr(float(d)), repr(float(e))) for d, e in zip(disp, energy)])
    click.echo(f"atom {atom}: {len(disp)} trials, spearman {spearman(disp, energy):.4f}")


@main.command("check")
@click.option("--suite", required=True, type=click.Choice(SUITES))
@click.option("--seed", type=int, default=0)
@click.option("--json", "as_json", is_flag=True, help="Print the machine-readable summary.")
@runtime_errors
def check_cmd(suite, seed, as_json):
    """Run a property suite against random parameters."""
    from . import properties as props

    cfg = GRADIENT_SUITE_CONFIG if suite == "gradients" else ModelConfig()
    params = init_params(cfg, seed)
    if suite == "invariance":
        rng = np.random.default_rng(seed)
        cases = []
        for k in range(100):
            unit = props.random_unit(rng)
            cases.extend(props.gen_redescriptions(unit, count=1, seed=[seed, k])[1:])
        report = props.run_invariance_suite(params, cfg, cases)
    elif suite == "continuity":
        report = props.run_continuity_suite(params, cfg, seed=seed)
    elif suite == "gradients":
        report = props.run_gradient_suite(params, cfg, seed=seed)
    elif suite == "sampler":
        report = props.run_sampler_suite(seed=seed, params=params, cfg=cfg)
    else:
        report = props.run_matcher_suite(seed=seed)
    for line in report.lines():
        click.echo(line)
    if as_json:
        click.echo(json.dumps(report.summary()))
    sys.exit(0 if report.passed else 1)


@main.command("gradcheck")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--h", type=click.FloatRange(min=0, min_open=True), default=1e-4)
@click.option("--max-scalars", type=click.IntRange(min=1), default=200,
              help="Parameter entries checked per unit.")
@click.option("--tol", type=float, default=1e-5)
@click.option("--order", type=click.Choice(["2", "4"]), default="4", help="Central stencil points.")
@runtime_errors
def gradcheck_cmd(ckpt, data_path, h, max_scalars, tol, order):
    """Finite-difference report for the gradients of a checkpoint."""
    model = load_checkpoint(ckpt)
    worst = 0.0
    for k, r in enumerate(read_records(data_path)):
        errs = {t: finite_diff_check(t, r.unit, model.params, model.model_config, h=h,
                                     max_scalars=max_scalars, seed=k, rel_floor=1e-6,
                                     order=int(order))
                for t in ("coords", "lattice", "params")}
        worst = max(worst, *errs.values())
        click.echo(f"{r.id}: " + " ".join(f"{t}={e:.3g}" for t, e in errs.items()))
    status = "PASS" if worst <= tol else "FAIL"
    click.echo(f"{status} worst relative error {worst:.3g} (tol {tol:g})")
    sys.exit(0 if worst <= tol else 1)


if __name__ == "__main__":  # pragma: no cover
    main()
