"""Reports derived from trained trials: learning maps, error histograms,
carry-loss tables, probability probes, class coverage and fraction sweeps."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import all_keys, class_size
from .errors import AddlabError, CheckpointError
from .glyphs import AdditionKey
from .nn import forward, softmax
from .splits import (
    COMMUTATIVITY,
    RANDOM_PAIR,
    UNIFORM_RANDOM,
    SplitManifest,
    SplitProtocol,
    make_split,
)
from .training import run_trials, trial_seed


class CellState(IntEnum):
    TRAIN_RIGHT = 0
    TRAIN_WRONG = 1
    TEST_RIGHT = 2
    TEST_WRONG = 3


MAP_COLORS = {
    CellState.TRAIN_RIGHT: (200, 200, 200),
    CellState.TRAIN_WRONG: (255, 0, 0),
    CellState.TEST_RIGHT: (135, 206, 250),
    CellState.TEST_WRONG: (0, 0, 139),
}


class CoverageMismatch(AddlabError):
    pass


@dataclass
class LearningMap:
    n_max: int
    cells: np.ndarray  # (N+1, N+1) of CellState values, indexed [n, m]

    def state(self, n: int, m: int) -> CellState:
        return CellState(int(self.cells[n, m]))

    def counts(self) -> dict:
        return {s: int((self.cells == s).sum()) for s in CellState}


def _check_trial_covers(trial, n_max: int) -> None:
    if trial.n_max != n_max or set(trial.predictions) != set(all_keys(n_max)):
        raise CoverageMismatch(f"trial predictions do not cover the N={n_max} image set")


def learning_map(manifest: SplitManifest, trial) -> LearningMap:
    _check_trial_covers(trial, manifest.n_max)
    roles = manifest.roles()
    cells = np.zeros((manifest.n_max + 1, manifest.n_max + 1), dtype=np.uint8)
    for key, p in trial.predictions.items():
        if p.role != roles[key]:
            raise CoverageMismatch(f"key {list(key)} is {roles[key]} in the manifest but {p.role} in the trial")
        if p.role == "train":
            state = CellState.TRAIN_RIGHT if p.correct else CellState.TRAIN_WRONG
        else:
            state = CellState.TEST_RIGHT if p.correct else CellState.TEST_WRONG
        cells[key.n, key.m] = state
    return LearningMap(manifest.n_max, cells)


def render_map(lmap: LearningMap, path=None, cell: int = 4) -> bytes:
    """PPM (P6) image: n grows rightward, m upward, origin (0, 0) bottom-left."""
    palette = np.array([MAP_COLORS[s] for s in CellState], dtype=np.uint8)
    # rows of the image run from m = N at the top down to m = 0
    grid = lmap.cells.T[::-1]
    rgb = palette[grid]
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    h, w = rgb.shape[:2]
    data = f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()
    if path is not None:
        Path(path).write_bytes(data)
    return data


@dataclass
class ErrorHistogram:
    n_max: int
    counts: dict  # label -> errors accumulated over trials
    trials: int

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "count"])
        for label in range(2 * self.n_max + 1):
            writer.writerow([label, self.counts.get(label, 0)])
        return buf.getvalue()


def error_histogram(trials) -> ErrorHistogram:
    trials = list(trials)
    if not trials:
        raise AddlabError("no trials to accumulate")
    n_max = trials[0].n_max
    keys = set(trials[0].predictions)
    counts = Counter()
    for t in trials:
        if t.n_max != n_max or set(t.predictions) != keys:
            raise AddlabError("inconsistent trials: differing N or key sets")
        for key, p in t.errors("test"):
            counts[p.label] += 1
    return ErrorHistogram(n_max, dict(sorted(counts.items())), len(trials))


@dataclass
class CarryReport:
    total_errors: int
    diff_histogram: dict  # predicted - true -> count
    lost_ten: int
    errors: list = field(default_factory=list)  # (n, m, label, predicted)

    def to_json(self) -> dict:
        return {
            "total_errors": self.total_errors,
            "lost_ten": self.lost_ten,
            "diff_histogram": {str(k): v for k, v in sorted(self.diff_histogram.items())},
            "errors": [list(e) for e in self.errors],
        }


def carry_loss_report(trial) -> CarryReport:
    """Tabulate predicted - true over wrong test predictions; -10 is a dropped carry."""
    diffs = Counter()
    errors = []
    for key, p in trial.errors("test"):
        diffs[p.predicted - p.label] += 1
        errors.append((key.n, key.m, p.label, p.predicted))
    return CarryReport(len(errors), dict(sorted(diffs.items())), diffs.get(-10, 0), errors)


@dataclass
class ProbeReport:
    key: AdditionKey
    label: int
    ranking: list  # (class, probability), descending
    true_rank: int  # 1-based

    @property
    def predicted(self) -> int:
        return self.ranking[0][0]

    def table(self, k: int = 10) -> str:
        lines = [f"{self.key.n}+{self.key.m}  true={self.label}  predicted={self.predicted}  true_rank={self.true_rank}",
                 "rank  class  probability"]
        for r, (c, p) in enumerate(self.ranking[:k], start=1):
            lines.append(f"{r:>4}  {c:>5}  {p:.8f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "key": [self.key.n, self.key.m],
            "label": self.label,
            "predicted": self.predicted,
            "true_rank": self.true_rank,
            "probabilities": [[c, p] for c, p in self.ranking],
        }


def probe(ckpt, image_set, key) -> ProbeReport:
    key = AdditionKey(*key)
    idx = image_set.index_of(key)
    if ckpt.n_max != image_set.n_max or ckpt.render_digest != image_set.digest():
        raise CheckpointError("checkpoint/set mismatch: trained on a different rendered image set")
    logits, _ = forward(ckpt.spec, ckpt.params, image_set.inputs([idx]))
    probs = softmax(logits[0].astype(np.float64))
    order = np.argsort(-probs, kind="stable")
    ranking = [(int(c), float(probs[c])) for c in order]
    label = int(image_set.labels[idx])
    true_rank = 1 + next(i for i, (c, _) in enumerate(ranking) if c == label)
    return ProbeReport(key, label, ranking, true_rank)


@dataclass(frozen=True)
class CoverageRow:
    label: int
    train_combos: tuple
    class_size: int

    @property
    def coverage(self) -> int:
        return len(self.train_combos)

    @property
    def ratio(self) -> float:
        return self.coverage / self.class_size

    @property
    def zero(self) -> bool:
        return not self.train_combos


def class_coverage(manifest: SplitManifest, n_max: int | None = None) -> list[CoverageRow]:
    """Which training formulas feed each sum class."""
    n_max = manifest.n_max if n_max is None else n_max
    if n_max != manifest.n_max:
        raise CoverageMismatch(f"manifest is for N={manifest.n_max}, not {n_max}")
    by_label = {k: [] for k in range(2 * n_max + 1)}
    for key in manifest.train:
        by_label[key.n + key.m].append(key)
    return [CoverageRow(k, tuple(by_label[k]), class_size(k, n_max)) for k in range(2 * n_max + 1)]


def coverage_json(rows) -> list:
    return [
        {
            "label": r.label,
            "train_combos": [list(k) for k in r.train_combos],
            "coverage": r.coverage,
            "class_size": r.class_size,
            "ratio": r.ratio,
            "zero_coverage": r.zero,
        }
        for r in rows
    ]


# --- fraction sweeps -----------------------------------------------------

SWEEP_FAMILIES = (COMMUTATIVITY, RANDOM_PAIR, UNIFORM_RANDOM)


def protocol_for_fraction(family: str, train_fraction: float) -> SplitProtocol:
    if family == COMMUTATIVITY:
        return SplitProtocol.commutativity(train_fraction)
    if family == RANDOM_PAIR:
        return SplitProtocol.random_pair(train_fraction)
    if family == UNIFORM_RANDOM:
        return SplitProtocol.uniform_random(round(1.0 - train_fraction, 12))
    raise AddlabError(f"sweeps support {', '.join(SWEEP_FAMILIES)}; got {family!r}")


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    train_ratio: float
    test_ratio: float
    mean_test_top1: Optional[float]
    trial_test_top1: tuple = ()


def sweep_train_fraction(image_set, family, fractions, spec, cfg, trials, workers=1, log=None) -> list[SweepRow]:
    """Mean test accuracy over ``trials`` runs at each training fraction (measured against the whole set)."""
    fractions = list(fractions)
    if fractions != sorted(fractions):
        raise AddlabError("fractions must be sorted ascending")
    protocols = [protocol_for_fraction(family, f) for f in fractions]
    # feasibility of every fraction before any training starts
    manifests = [make_split(image_set, p, trial_seed(cfg.seed, 0)) for p in protocols]
    rows = []
    total = len(image_set)
    for f, protocol, manifest in zip(fractions, protocols, manifests):
        summary = run_trials(image_set, protocol, spec, cfg, trials, workers)
        accs = tuple(t.result.test_top1 for t in summary.trials if t.result.test_top1 is not None)
        rows.append(SweepRow(f, len(manifest.train) / total, len(manifest.test) / total, summary.mean, accs))
        if log:
            log(f"fraction {f}: mean test top-1 {summary.mean}")
    return rows


def find_min_fraction(rows, target_acc: float) -> Optional[float]:
    for row in sorted(rows, key=lambda r: r.fraction):
        if row.mean_test_top1 is not None and row.mean_test_top1 >= target_acc:
            return row.fraction
    return None


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fraction", "train_ratio", "test_ratio", "mean_test_top1"])
    for r in rows:
        writer.writerow([repr(r.fraction), repr(r.train_ratio), repr(r.test_ratio),
                         "" if r.mean_test_top1 is None else repr(r.mean_test_top1)])
    return buf.getvalue()


def dumps_json(doc) -> str:
    return json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n"
