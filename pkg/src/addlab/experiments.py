"""End-to-end recipes for the five experiments, at desk or full scale.

Each recipe writes into ``<out>/<name>-<scale>-<digest>/`` where the digest
covers the recipe parameters and seed, so reruns land in the same directory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__, analysis
from .dataset import build_image_set, write_packed
from .glyphs import RenderConfig
from .nn import small_cnn
from .runlog import RunRecorder, atomic_write, config_digest
from .splits import SplitProtocol, save_manifest
from .training import TrainConfig, TrialSummary, run_trials, save_checkpoint, save_result, trials_csv

DEFAULT_HIDDEN = 128


def default_spec(image_set, hidden: int = DEFAULT_HIDDEN):
    h, w = image_set.pixels.shape[1:]
    if h != w:
        raise ValueError("the default network expects square images")
    return small_cnn(h, image_set.num_classes, hidden=hidden)


@dataclass(frozen=True)
class Recipe:
    n_max: int
    size: int
    trials: int
    protocols: tuple  # (tag, SplitProtocol) pairs; a sweep when ``fractions`` is set
    train: TrainConfig = field(default_factory=TrainConfig)
    family: str = ""
    fractions: tuple = ()
    target: float = 0.9


def _recipes():
    desk = TrainConfig()
    comm = SplitProtocol.commutativity(0.5)
    twin_bands = SplitProtocol.exclusion([(33, 37), (62, 68)])
    collapse = SplitProtocol.exclusion([(60, 69)])
    return {
        "exp1": {
            "desk": Recipe(29, 64, 3, (("commutativity", comm),), desk),
            "full": Recipe(99, 224, 10, (("commutativity", comm),), desk),
        },
        "exp2": {
            "desk": Recipe(29, 64, 2, (), desk, "random_pair", (0.5, 0.7, 0.86)),
            "full": Recipe(99, 224, 10, (), desk, "random_pair", (0.2, 0.4, 0.6, 0.8, 0.86)),
        },
        "exp3": {
            "desk": Recipe(29, 64, 2, (), desk, "uniform_random", (0.3, 0.5, 0.7, 0.85)),
            "full": Recipe(99, 224, 10, (), desk, "uniform_random", (0.15, 0.3, 0.5, 0.7, 0.85)),
        },
        "exp4": {
            "desk": Recipe(29, 64, 1, (("exclude-13", SplitProtocol.exclusion([(13, 13)])),), desk),
            "full": Recipe(99, 224, 10, (("exclude-42", SplitProtocol.exclusion([(42, 42)])),), desk),
        },
        "exp5": {
            "desk": Recipe(99, 64, 1, (("twin-bands", twin_bands), ("collapse", collapse)), replace(desk, epochs=10)),
            "full": Recipe(99, 224, 10, (("twin-bands", twin_bands), ("collapse", collapse)), desk),
        },
    }


RECIPES = _recipes()


def recipe_doc(name: str, scale: str, seed: int) -> dict:
    r = RECIPES[name][scale]
    return {
        "experiment": name,
        "scale": scale,
        "seed": seed,
        "artifact_version": __version__,
        "n_max": r.n_max,
        "size": r.size,
        "trials": r.trials,
        "protocols": [[tag, p.to_json()] for tag, p in r.protocols],
        "family": r.family,
        "fractions": list(r.fractions),
        "target": r.target,
        "train": asdict(r.train),
        "hidden": DEFAULT_HIDDEN,
    }


def write_trial_artifacts(summary: TrialSummary, out: Path, prefix: str = "") -> list[Path]:
    """Split, checkpoint, predictions and learning map per trial, plus the shared reports."""
    written = []

    def emit(path, data):
        atomic_write(path, data)
        written.append(path)

    for t in summary.trials:
        stem = f"{prefix}t{t.index}"
        save_manifest(t.manifest, out / f"{stem}.split.json")
        save_checkpoint(t.checkpoint, out / f"{stem}.ckpt")
        save_result(t.result, out / f"{stem}.predictions.json")
        written += [out / f"{stem}.split.json", out / f"{stem}.ckpt", out / f"{stem}.predictions.json"]
        lmap = analysis.learning_map(t.manifest, t.result)
        emit(out / f"{stem}.map.ppm", analysis.render_map(lmap))
        emit(out / f"{stem}.carry.json", analysis.dumps_json(analysis.carry_loss_report(t.result).to_json()))
    emit(out / f"{prefix}trials.csv", trials_csv(summary))
    emit(out / f"{prefix}hist.csv", analysis.error_histogram([t.result for t in summary.trials]).to_csv())
    rows = analysis.class_coverage(summary.trials[0].manifest)
    emit(out / f"{prefix}coverage.json", analysis.dumps_json(analysis.coverage_json(rows)))
    return written


def _diagonal_accuracy(result) -> float | None:
    rows = [p for k, p in result.predictions.items() if k.n == k.m]
    return sum(p.correct for p in rows) / len(rows) if rows else None


def _excluded_tens_accuracy(result, intervals) -> float | None:
    """Accuracy on test keys with an excluded operand.

    For a decade such as [60, 69] these are exactly the keys where one operand has tens digit 6.
    """
    excluded = {v for lo, hi in intervals for v in range(lo, hi + 1)}
    rows = [p for k, p in result.predictions.items()
            if p.role == "test" and (k.n in excluded or k.m in excluded)]
    return sum(p.correct for p in rows) / len(rows) if rows else None


def run_recipe(name: str, scale: str, seed: int, out_root: Path, workers: int = 1, log=None) -> Path:
    recipe = RECIPES[name][scale]
    doc = recipe_doc(name, scale, seed)
    run_dir = Path(out_root) / f"{name}-{scale}-{config_digest(doc)[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = replace(recipe.train, seed=seed)
    rec = RunRecorder(doc, seeds=[seed], deterministic=cfg.deterministic, workers=workers)

    image_set = build_image_set(recipe.n_max, RenderConfig.square(recipe.size))
    write_packed(image_set, run_dir / "omega.apack")
    rec.output(run_dir / "omega.apack")
    spec = default_spec(image_set)
    summary_doc = {"experiment": name, "scale": scale, "seed": seed, "runs": {}}

    if recipe.fractions:
        rows = analysis.sweep_train_fraction(image_set, recipe.family, recipe.fractions, spec, cfg,
                                             recipe.trials, workers, log=log)
        atomic_write(run_dir / "sweep.csv", analysis.sweep_csv(rows))
        rec.output(run_dir / "sweep.csv")
        summary_doc["runs"]["sweep"] = {
            "family": recipe.family,
            "rows": [asdict(r) for r in rows],
            "min_fraction_for_target": analysis.find_min_fraction(rows, recipe.target),
            "target": recipe.target,
        }
    for tag, protocol in recipe.protocols:
        if log:
            log(f"{name}/{tag}: {recipe.trials} trial(s) at N={recipe.n_max}")
        summary = run_trials(image_set, protocol, spec, cfg, recipe.trials, workers)
        for path in write_trial_artifacts(summary, run_dir, prefix=f"{tag}."):
            rec.output(path)
        entry = {
            "protocol": protocol.to_json(),
            "mean_test_top1": summary.mean,
            "min_test_top1": summary.min,
            "max_test_top1": summary.max,
            "train_top1": [t.result.train_top1 for t in summary.trials],
            "test_top1": [t.result.test_top1 for t in summary.trials],
            "epochs_run": [t.result.epochs_run for t in summary.trials],
            "diagonal_top1": [_diagonal_accuracy(t.result) for t in summary.trials],
            "lost_ten": [analysis.carry_loss_report(t.result).lost_ten for t in summary.trials],
        }
        if protocol.name == "exclusion":
            entry["excluded_top1"] = [
                _excluded_tens_accuracy(t.result, protocol.params["intervals"]) for t in summary.trials
            ]
        summary_doc["runs"][tag] = entry
        if log:
            log(f"{name}/{tag}: mean test top-1 {summary.mean}")
    atomic_write(run_dir / "summary.json", json.dumps(summary_doc, indent=2, sort_keys=True) + "\n")
    rec.output(run_dir / "summary.json")
    rec.write(run_dir / "run.json")
    return run_dir
