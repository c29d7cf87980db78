"""``addlab`` command line: one subcommand per pipeline stage plus experiment recipes.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click

from . import analysis, experiments
from .dataset import build_image_set, read_packed, write_packed
from .errors import AddlabError
from .glyphs import AdditionKey, RenderConfig, render_formula, write_pgm
from .nn import grad_check, toy_spec
from .runlog import RunRecorder, atomic_write
from .splits import (
    COMMUTATIVITY,
    EXCLUSION,
    RANDOM_PAIR,
    UNIFORM_RANDOM,
    SplitProtocol,
    load_manifest,
    make_split,
    parse_intervals,
    save_manifest,
)
from .training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_result,
    run_trials,
    save_checkpoint,
    save_result,
    train,
    trials_csv,
)

PROTOCOL_ALIASES = {
    "commutativity": COMMUTATIVITY,
    "random-pair": RANDOM_PAIR,
    "random_pair": RANDOM_PAIR,
    "uniform": UNIFORM_RANDOM,
    "uniform-random": UNIFORM_RANDOM,
    "uniform_random": UNIFORM_RANDOM,
    "exclusion": EXCLUSION,
}


def default_workers() -> int:
    env = os.environ.get("ADDLAB_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


class AddlabGroup(click.Group):
    def parse_args(self, ctx, args):
        ctx.meta["argv"] = [ctx.info_name or "addlab", *args]
        return super().parse_args(ctx, args)

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (AddlabError, ValueError, KeyError, OSError) as exc:
            message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            click.echo(f"addlab: error: {message}", err=True)
            ctx.exit(1)


def _recorder(config, **kw) -> RunRecorder:
    argv = click.get_current_context().meta.get("argv")
    return RunRecorder(config, command_line=argv, **kw)


def _load_config(ctx, param, value):
    if value:
        doc = json.loads(Path(value).read_text())
        ctx.default_map = {**(ctx.default_map or {}), **doc}
    return value


@click.group(cls=AddlabGroup, context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_load_config,
              is_eager=True, expose_value=False,
              help='JSON file of per-command defaults, e.g. {"train": {"epochs": 20}}.')
@click.option("--workers", type=click.IntRange(min=1), default=None,
              help="Parallel trial workers (default: $ADDLAB_WORKERS or CPU count).")
@click.pass_context
def main(ctx, workers):
    """Arithmetic-addition image classification laboratory."""
    ctx.ensure_object(dict)
    ctx.obj["workers"] = workers or default_workers()


def _render_cfg(size, margin, ink, background) -> RenderConfig:
    extra = {} if margin is None else {"margin": margin}
    return RenderConfig.square(size, ink=ink, background=background, **extra)


def _train_options(f):
    options = [
        click.option("--epochs", type=click.IntRange(min=1), default=50, show_default=True),
        click.option("--batch-size", type=click.IntRange(min=1), default=32, show_default=True),
        click.option("--optimizer", type=click.Choice(["adam", "sgd"]), default="adam", show_default=True),
        click.option("--lr", type=float, default=1e-3, show_default=True),
        click.option("--momentum", type=float, default=0.9, show_default=True),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True),
        click.option("--early-stop/--no-early-stop", default=True, show_default=True),
        click.option("--patience", type=click.IntRange(min=1), default=3, show_default=True),
        click.option("--deterministic/--nondeterministic", default=True, show_default=True),
        click.option("--hidden", type=click.IntRange(min=1), default=experiments.DEFAULT_HIDDEN, show_default=True),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _train_config(kw) -> TrainConfig:
    return TrainConfig(
        epochs=kw["epochs"], batch_size=kw["batch_size"], optimizer=kw["optimizer"], lr=kw["lr"],
        momentum=kw["momentum"], seed=kw["seed"], early_stop=kw["early_stop"], patience=kw["patience"],
        deterministic=kw["deterministic"],
    )


def _protocol(name, train_frac, test_frac, intervals) -> SplitProtocol:
    name = PROTOCOL_ALIASES[name]
    if name == EXCLUSION:
        if not intervals:
            raise click.UsageError("--intervals is required for the exclusion protocol")
        return SplitProtocol.exclusion(parse_intervals(intervals))
    if name == UNIFORM_RANDOM:
        if test_frac is None:
            if train_frac is None:
                raise click.UsageError("uniform protocol needs --test-frac or --train-frac")
            test_frac = round(1.0 - train_frac, 12)
        return SplitProtocol.uniform_random(test_frac)
    if name == COMMUTATIVITY:
        return SplitProtocol.commutativity(0.5 if train_frac is None else train_frac)
    if train_frac is None:
        raise click.UsageError("--train-frac is required for the random-pair protocol")
    return SplitProtocol.random_pair(train_frac)


_protocol_choice = click.Choice(sorted(PROTOCOL_ALIASES))


@main.command()
@click.option("--n-max", type=click.IntRange(min=1), required=True)
@click.option("--size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--margin", type=click.IntRange(min=0), default=None)
@click.option("--ink", type=click.IntRange(0, 255), default=0, show_default=True)
@click.option("--background", type=click.IntRange(0, 255), default=255, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def gen(n_max, size, margin, ink, background, out):
    """Render the full image set for N into a packed .apack file."""
    rec = _recorder(dict(cmd="gen", n_max=n_max, size=size, margin=margin, ink=ink, background=background))
    image_set = build_image_set(n_max, _render_cfg(size, margin, ink, background))
    write_packed(image_set, out)
    rec.output(out)
    rec.write_beside(out)
    click.echo(f"wrote {len(image_set)} records to {out}")


@main.command()
@click.option("--n", "n", type=click.IntRange(min=0), required=True)
@click.option("--m", "m", type=click.IntRange(min=0), required=True)
@click.option("--n-max", type=click.IntRange(min=1), default=None, help="Set whose glyph scale to use.")
@click.option("--size", type=click.IntRange(min=1), default=224, show_default=True)
@click.option("--margin", type=click.IntRange(min=0), default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def render(n, m, n_max, size, margin, out):
    """Write one formula image as a binary PGM."""
    rec = _recorder(dict(cmd="render", n=n, m=m, n_max=n_max, size=size, margin=margin))
    image = render_formula(AdditionKey(n, m), _render_cfg(size, margin, 0, 255), n_max)
    write_pgm(image, out)
    rec.output(out)
    rec.write_beside(out)


@main.command()
@click.option("--protocol", type=_protocol_choice, required=True)
@click.option("--train-frac", type=float, default=None)
@click.option("--test-frac", type=float, default=None)
@click.option("--intervals", default=None, help='Excluded integers, e.g. "33-37,62-68".')
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
@click.option("--omega", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def split(protocol, train_frac, test_frac, intervals, seed, omega, out):
    """Partition an image set into training and test keys."""
    proto = _protocol(protocol, train_frac, test_frac, intervals)
    image_set = read_packed(omega)
    manifest = make_split(image_set, proto, seed)
    rec = _recorder(dict(cmd="split", protocol=proto.to_json()), seeds=[seed])
    rec.input(omega)
    if out:
        save_manifest(manifest, out)
        rec.output(out)
        rec.write_beside(out)
    click.echo(f"train {len(manifest.train)}  test {len(manifest.test)}")


@main.command("train")
@click.option("--omega", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path.")
@click.option("--results", type=click.Path(dir_okay=False), default=None, help="Prediction dump (JSON).")
@click.option("--verbose", "-v", is_flag=True)
@_train_options
def train_cmd(omega, split_path, out, results, verbose, **kw):
    """Train one network on a split and write its checkpoint."""
    cfg = _train_config(kw)
    image_set = read_packed(omega)
    manifest = load_manifest(split_path)
    spec = experiments.default_spec(image_set, kw["hidden"])
    log = (lambda msg: click.echo(msg, err=True)) if verbose else None
    ckpt, result = train(image_set, manifest, spec, cfg, log=log)
    rec = _recorder(dict(cmd="train", train=asdict(cfg), spec=spec.to_json()), seeds=[cfg.seed],
                      deterministic=cfg.deterministic)
    rec.input(omega)
    rec.input(split_path)
    save_checkpoint(ckpt, out)
    rec.output(out)
    results = results or str(Path(out).with_suffix(".predictions.json"))
    save_result(result, results)
    rec.output(results)
    rec.write_beside(out)
    click.echo(f"epochs {result.epochs_run}  train_top1 {result.train_top1:.4f}  test_top1 {_fmt(result.test_top1)}")


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--omega", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--role", type=click.Choice(["test", "train", "all"]), default="test", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def eval_cmd(ckpt, omega, split_path, role, out):
    """Top-1 accuracy of a checkpoint over a key subset."""
    image_set = read_packed(omega)
    checkpoint = load_checkpoint(ckpt)
    if split_path is None or role == "all":
        keys = image_set.keys
    else:
        manifest = load_manifest(split_path)
        keys = manifest.test if role == "test" else manifest.train
    rows, acc = evaluate(checkpoint, image_set, keys)
    click.echo(f"{role} top1 {acc:.4f} over {len(rows)} keys")
    if out:
        rec = _recorder(dict(cmd="eval", role=role))
        for p in (ckpt, omega, split_path):
            rec.input(p)
        doc = {"accuracy": acc, "rows": [{"key": list(r.key), "label": r.label, "predicted": r.predicted,
                                          "correct": r.correct, "p_top1": r.p_top1} for r in rows]}
        atomic_write(out, analysis.dumps_json(doc))
        rec.output(out)
        rec.write_beside(out)


@main.command()
@click.option("--omega", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--protocol", type=_protocol_choice, required=True)
@click.option("--train-frac", type=float, default=None)
@click.option("--test-frac", type=float, default=None)
@click.option("--intervals", default=None)
@click.option("--trials", "n_trials", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@_train_options
@click.pass_context
def trials(ctx, omega, protocol, train_frac, test_frac, intervals, n_trials, out_dir, **kw):
    """Repeat training T times with derived seeds; write per-trial artifacts and a CSV."""
    proto = _protocol(protocol, train_frac, test_frac, intervals)
    cfg = _train_config(kw)
    image_set = read_packed(omega)
    spec = experiments.default_spec(image_set, kw["hidden"])
    summary = run_trials(image_set, proto, spec, cfg, n_trials, ctx.obj["workers"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = _recorder(dict(cmd="trials", protocol=proto.to_json(), train=asdict(cfg), trials=n_trials),
                      seeds=[t.seed for t in summary.trials], deterministic=cfg.deterministic,
                      workers=ctx.obj["workers"])
    rec.input(omega)
    for path in experiments.write_trial_artifacts(summary, out):
        rec.output(path)
    rec.write(out / "run.json")
    click.echo(f"mean {_fmt(summary.mean)}  min {_fmt(summary.min)}  max {_fmt(summary.max)}")


@main.command()
@click.option("--omega", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--family", type=click.Choice(["commutativity", "random-pair", "uniform"]), required=True)
@click.option("--fractions", required=True, help="Training fractions of the whole set, e.g. 0.5,0.7,0.86")
@click.option("--trials", "n_trials", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--target", type=float, default=0.9, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_train_options
@click.pass_context
def sweep(ctx, omega, family, fractions, n_trials, target, out, **kw):
    """Accuracy versus training fraction; reports the smallest fraction reaching --target."""
    fracs = [float(f) for f in fractions.split(",") if f.strip()]
    cfg = _train_config(kw)
    image_set = read_packed(omega)
    spec = experiments.default_spec(image_set, kw["hidden"])
    rows = analysis.sweep_train_fraction(image_set, PROTOCOL_ALIASES[family], fracs, spec, cfg,
                                         n_trials, ctx.obj["workers"])
    rec = _recorder(dict(cmd="sweep", family=family, fractions=fracs, train=asdict(cfg), trials=n_trials),
                      seeds=[cfg.seed], deterministic=cfg.deterministic)
    rec.input(omega)
    atomic_write(out, analysis.sweep_csv(rows))
    rec.output(out)
    rec.write_beside(out)
    best = analysis.find_min_fraction(rows, target)
    click.echo(f"min fraction reaching {target}: {'none' if best is None else best}")


@main.command("map")
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--results", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cell", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def map_cmd(split_path, results, cell, out):
    """Render the train/test x right/wrong learning map as PPM."""
    lmap = analysis.learning_map(load_manifest(split_path), load_result(results))
    rec = _recorder(dict(cmd="map", cell=cell))
    rec.input(split_path)
    rec.input(results)
    atomic_write(out, analysis.render_map(lmap, cell=cell))
    rec.output(out)
    rec.write_beside(out)
    counts = lmap.counts()
    click.echo("  ".join(f"{s.name.lower()} {counts[s]}" for s in analysis.CellState))


@main.command()
@click.option("--results", type=click.Path(exists=True, dir_okay=False), required=True, multiple=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def hist(results, out):
    """Accumulate test errors per true label over trials (CSV label,count)."""
    h = analysis.error_histogram([load_result(p) for p in results])
    rec = _recorder(dict(cmd="hist"))
    for p in results:
        rec.input(p)
    atomic_write(out, h.to_csv())
    rec.output(out)
    rec.write_beside(out)
    click.echo(f"{h.total} test errors over {h.trials} trials")


@main.command()
@click.option("--results", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def carry(results, out):
    """Histogram of predicted - true over wrong test predictions."""
    report = analysis.carry_loss_report(load_result(results))
    click.echo(f"errors {report.total_errors}  lost_ten {report.lost_ten}  diffs {report.diff_histogram}")
    if out:
        rec = _recorder(dict(cmd="carry"))
        rec.input(results)
        atomic_write(out, analysis.dumps_json(report.to_json()))
        rec.output(out)
        rec.write_beside(out)


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--omega", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--n", "n", type=click.IntRange(min=0), required=True)
@click.option("--m", "m", type=click.IntRange(min=0), required=True)
@click.option("--top", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def probe(ckpt, omega, n, m, top, out):
    """Full sorted class-probability table for one formula."""
    image_set = read_packed(omega)
    report = analysis.probe(load_checkpoint(ckpt), image_set, (n, m))
    click.echo(report.table(top), nl=False)
    if out:
        rec = _recorder(dict(cmd="probe", n=n, m=m))
        rec.input(ckpt)
        rec.input(omega)
        atomic_write(out, analysis.dumps_json(report.to_json()))
        rec.output(out)
        rec.write_beside(out)


@main.command()
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def coverage(split_path, out):
    """Training members of each sum class; flags classes with none."""
    rows = analysis.class_coverage(load_manifest(split_path))
    zero = [r.label for r in rows if r.zero]
    click.echo(f"{len(rows)} classes, zero coverage: {zero}")
    if out:
        rec = _recorder(dict(cmd="coverage"))
        rec.input(split_path)
        atomic_write(out, analysis.dumps_json(analysis.coverage_json(rows)))
        rec.output(out)
        rec.write_beside(out)


@main.command()
@click.option("--seeds", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--precision", type=click.Choice(["float32", "float64"]), default="float32", show_default=True)
@click.option("--eps", type=float, default=None, help="Default 1e-3 (float32) or 1e-5 (float64).")
@click.option("--size", type=click.IntRange(min=2), default=8, show_default=True)
def gradcheck(seeds, precision, eps, size):
    """Compare backprop with central differences on the toy network."""
    eps = eps or (1e-3 if precision == "float32" else 1e-5)
    bound = 1e-3 if precision == "float32" else 1e-6
    spec = toy_spec(size)
    worst = 0.0
    for seed in range(seeds):
        err = grad_check(spec, seed, eps, precision)
        worst = max(worst, err)
        click.echo(f"seed {seed}: max rel err {err:.3e}")
    verdict = "PASS" if worst < bound else "FAIL"
    click.echo(f"{verdict}: worst {worst:.3e} (bound {bound:g})")
    if worst >= bound:
        sys.exit(1)


@main.command()
@click.argument("experiment", type=click.Choice(sorted(experiments.RECIPES)))
@click.option("--scale", type=click.Choice(["desk", "full"]), default="desk", show_default=True)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="runs", show_default=True)
@click.option("--verbose", "-v", is_flag=True)
@click.pass_context
def repro(ctx, experiment, scale, seed, out_dir, verbose):
    """Run one of the bundled experiment recipes end to end."""
    if scale == "full":
        click.echo("warning: full scale trains at 224x224 on up to 10,000 images; expect many CPU hours",
                   err=True)
    log = (lambda msg: click.echo(msg, err=True)) if verbose else None
    run_dir = experiments.run_recipe(experiment, scale, seed, Path(out_dir), ctx.obj["workers"], log=log)
    click.echo(str(run_dir))


if __name__ == "__main__":
    main()
