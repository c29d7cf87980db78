"""Minibatch training on the training split, evaluation, checkpoints and trial I/O.

Checkpoint layout (little-endian)::

    "ADDN" | u16 version=1 | u32 header_len | header JSON (utf-8)
    per parameter, in header order: u8 rank | rank x u32 dims | f32 values
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import ImageSet
from .errors import CheckpointError, DivergenceError, EmptyKeySet, ShapeError, SplitError
from .glyphs import AdditionKey
from .nn import NetworkSpec, backward, forward, init_params, loss_softmax_xent, softmax
from .rng import SplitMix64, derive_seed
from .splits import SplitManifest, SplitProtocol, make_split

CKPT_MAGIC = b"ADDN"
CKPT_VERSION = 1
EVAL_BATCH = 256

# lanes of a trial seed
_INIT_LANE = 0
_SHUFFLE_LANE = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    early_stop: bool = True
    train_acc_target: float = 1.0
    patience: int = 3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def digest(self) -> str:
        return _sha256_json(asdict(self))


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[name] -= step.astype(params[name].dtype)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(cfg.lr, cfg.momentum)


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    n_max: int
    render_digest: str
    train_digest: str
    epoch: int


@dataclass(frozen=True)
class Prediction:
    label: int
    predicted: int
    p_top1: float
    p_digest: str
    role: str

    @property
    def correct(self) -> bool:
        return self.label == self.predicted


@dataclass
class TrialResult:
    seed: int
    n_max: int
    predictions: dict  # AdditionKey -> Prediction, canonical key order
    train_top1: float
    test_top1: Optional[float]
    epochs_run: int
    epoch_history: list = field(default_factory=list)  # (epoch, loss, train_acc)
    test_keys_in_loss: int = 0

    def errors(self, role: str = "test"):
        return [(k, p) for k, p in self.predictions.items() if p.role == role and not p.correct]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "n_max": self.n_max,
            "epochs_run": self.epochs_run,
            "train_top1": self.train_top1,
            "test_top1": self.test_top1,
            "test_keys_in_loss": self.test_keys_in_loss,
            "epoch_history": [list(h) for h in self.epoch_history],
            "predictions": [
                {
                    "key": [k.n, k.m],
                    "role": p.role,
                    "label": p.label,
                    "predicted": p.predicted,
                    "p_top1": p.p_top1,
                    "p_digest": p.p_digest,
                }
                for k, p in self.predictions.items()
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrialResult":
        preds = {}
        for row in doc["predictions"]:
            key = AdditionKey(*row["key"])
            if key in preds:
                raise ValueError(f"duplicate prediction for {list(key)}")
            preds[key] = Prediction(
                row["label"], row["predicted"], row["p_top1"], row.get("p_digest", ""), row["role"]
            )
        return cls(
            seed=doc["seed"],
            n_max=doc["n_max"],
            predictions=preds,
            train_top1=doc["train_top1"],
            test_top1=doc["test_top1"],
            epochs_run=doc["epochs_run"],
            epoch_history=[tuple(h) for h in doc.get("epoch_history", [])],
            test_keys_in_loss=doc.get("test_keys_in_loss", 0),
        )


def _sha256_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _accuracy(preds, role) -> Optional[float]:
    rows = [p for p in preds.values() if p.role == role]
    if not rows:
        return None
    return sum(p.correct for p in rows) / len(rows)


def _check_compatible(image_set: ImageSet, spec: NetworkSpec, manifest: SplitManifest | None = None):
    if manifest is not None and manifest.n_max != image_set.n_max:
        raise SplitError(f"manifest is for N={manifest.n_max}, image set for N={image_set.n_max}")
    if spec.num_classes != image_set.num_classes:
        raise ShapeError(
            f"network emits {spec.num_classes} classes, N={image_set.n_max} needs {image_set.num_classes}"
        )
    h, w = image_set.pixels.shape[1:]
    if spec.input_shape != (1, h, w):
        raise ShapeError(f"network input {spec.input_shape} does not match images (1, {h}, {w})")


def _logits(spec, params, image_set, indices) -> np.ndarray:
    out = []
    for start in range(0, len(indices), EVAL_BATCH):
        idx = indices[start : start + EVAL_BATCH]
        out.append(forward(spec, params, image_set.inputs(idx))[0])
    return np.concatenate(out) if out else np.zeros((0, spec.num_classes), dtype=np.float32)


def _predict_all(spec, params, image_set, manifest) -> dict:
    roles = manifest.roles()
    indices = np.arange(len(image_set))
    probs = softmax(_logits(spec, params, image_set, indices)).astype(np.float32)
    predicted = probs.argmax(axis=1)
    preds = {}
    for i, key in enumerate(image_set.keys):
        row = probs[i]
        preds[key] = Prediction(
            label=int(image_set.labels[i]),
            predicted=int(predicted[i]),
            p_top1=float(row[predicted[i]]),
            p_digest=hashlib.sha256(row.tobytes()).hexdigest()[:16],
            role=roles[key],
        )
    return preds


def train(image_set: ImageSet, manifest: SplitManifest, spec: NetworkSpec, cfg: TrainConfig, log=None):
    """Fit ``spec`` on the manifest's training keys only; predict every key of the set."""
    _check_compatible(image_set, spec, manifest)
    if not manifest.train:
        raise SplitError("empty training set")
    with threadpool_limits(1 if cfg.deterministic else None):
        return _train(image_set, manifest, spec, cfg, log)


def _train(image_set, manifest, spec, cfg, log):
    params = init_params(spec, derive_seed(cfg.seed, _INIT_LANE))
    shuffler = SplitMix64(derive_seed(cfg.seed, _SHUFFLE_LANE))
    opt = make_optimizer(cfg)
    train_idx = np.array([image_set.index_of(k) for k in manifest.train], dtype=np.int64)
    test_rows = {image_set.index_of(k) for k in manifest.test}
    history = []
    streak = 0
    test_in_loss = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[shuffler.permutation(len(train_idx))]
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            test_in_loss += sum(int(i) in test_rows for i in idx)
            labels = image_set.labels[idx]
            logits, cache = forward(spec, params, image_set.inputs(idx))
            loss, dlogits = loss_softmax_xent(logits, labels)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch} batch {b}")
            correct += int((logits.argmax(axis=1) == labels).sum())
            loss_sum += loss * len(idx)
            opt.step(params, backward(spec, params, cache, dlogits))
        train_acc = correct / len(order)
        history.append((epoch, loss_sum / len(order), train_acc))
        if log:
            log(f"epoch {epoch}: loss {loss_sum / len(order):.4f} train_acc {train_acc:.4f}")
        streak = streak + 1 if train_acc >= cfg.train_acc_target else 0
        if cfg.early_stop and streak >= cfg.patience:
            break
    preds = _predict_all(spec, params, image_set, manifest)
    result = TrialResult(
        seed=cfg.seed,
        n_max=image_set.n_max,
        predictions=preds,
        train_top1=_accuracy(preds, "train"),
        test_top1=_accuracy(preds, "test"),
        epochs_run=epoch,
        epoch_history=history,
        test_keys_in_loss=test_in_loss,
    )
    ckpt = Checkpoint(spec, params, image_set.n_max, image_set.digest(), cfg.digest(), epoch)
    return ckpt, result


@dataclass(frozen=True)
class EvalRow:
    key: AdditionKey
    label: int
    predicted: int
    correct: bool
    p_top1: float


def evaluate(ckpt: Checkpoint, image_set: ImageSet, keys) -> tuple[list[EvalRow], float]:
    keys = [AdditionKey(*k) for k in keys]
    if not keys:
        raise EmptyKeySet("empty key set: accuracy is undefined")
    if ckpt.n_max != image_set.n_max or ckpt.render_digest != image_set.digest():
        raise CheckpointError("checkpoint/set mismatch: trained on a different rendered image set")
    idx = np.array([image_set.index_of(k) for k in keys], dtype=np.int64)
    probs = softmax(_logits(ckpt.spec, ckpt.params, image_set, idx))
    pred = probs.argmax(axis=1)
    rows = [
        EvalRow(k, int(image_set.labels[i]), int(p), int(image_set.labels[i]) == int(p), float(pr[p]))
        for k, i, p, pr in zip(keys, idx, pred, probs)
    ]
    return rows, sum(r.correct for r in rows) / len(rows)


# --- trials --------------------------------------------------------------


@dataclass
class Trial:
    index: int
    seed: int
    manifest: SplitManifest
    checkpoint: Checkpoint
    result: TrialResult


@dataclass
class TrialSummary:
    trials: list
    mean: Optional[float]
    min: Optional[float]
    max: Optional[float]


def trial_seed(master_seed: int, t: int) -> int:
    return derive_seed(master_seed, t)


def _run_one(args):
    image_set, protocol, manifest, spec, cfg, t = args
    seed = trial_seed(cfg.seed, t)
    if manifest is None:
        manifest = make_split(image_set, protocol, seed)
    ckpt, result = train(image_set, manifest, spec, replace(cfg, seed=seed))
    return Trial(t, seed, manifest, ckpt, result)


def run_trials(
    image_set: ImageSet,
    protocol: SplitProtocol,
    spec: NetworkSpec,
    cfg: TrainConfig,
    trials: int,
    workers: int = 1,
    manifest: SplitManifest | None = None,
) -> TrialSummary:
    """T independent trainings; trial t re-splits (if randomized) and inits from derive_seed(cfg.seed, t).

    A fixed ``manifest`` may be passed instead to reuse one partition for every trial.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if manifest is None and not protocol.randomized:
        manifest = make_split(image_set, protocol, cfg.seed)
    jobs = [(image_set, protocol, manifest, spec, cfg, t) for t in range(trials)]
    if workers > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=min(workers, trials)) as pool:
            done = list(pool.map(_run_one, jobs))
    else:
        done = [_run_one(job) for job in jobs]
    accs = [t.result.test_top1 for t in done if t.result.test_top1 is not None]
    if not accs:
        return TrialSummary(done, None, None, None)
    return TrialSummary(done, sum(accs) / len(accs), min(accs), max(accs))


def trials_csv(summary: TrialSummary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["trial", "seed", "epochs_run", "train_top1", "test_top1"])
    for t in summary.trials:
        r = t.result
        writer.writerow([t.index, t.seed, r.epochs_run, repr(r.train_top1),
                         "" if r.test_top1 is None else repr(r.test_top1)])
    return buf.getvalue()


def dumps_result(result: TrialResult) -> str:
    return json.dumps(result.to_json(), separators=(",", ":")) + "\n"


def save_result(result: TrialResult, path) -> None:
    Path(path).write_text(dumps_result(result))


def load_result(path) -> TrialResult:
    return TrialResult.from_json(json.loads(Path(path).read_text()))


# --- checkpoints ---------------------------------------------------------


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "spec": ckpt.spec.to_json(),
        "n_max": ckpt.n_max,
        "render_digest": ckpt.render_digest,
        "train_digest": ckpt.train_digest,
        "epoch": ckpt.epoch,
        "params": list(ckpt.params),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(head)), head]
    for name in ckpt.params:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def decode_checkpoint(data: bytes, spec: NetworkSpec | None = None) -> Checkpoint:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(data) < 14:
        raise CheckpointError("truncated checkpoint")
    version, head_len = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {CKPT_VERSION}")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if stored != zlib.crc32(data[:-4]):
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    header = json.loads(data[10 : 10 + head_len])
    file_spec = NetworkSpec.from_json(header["spec"])
    expected = (spec or file_spec).param_shapes()
    params = {}
    pos = 10 + head_len
    for name in header["params"]:
        (rank,) = struct.unpack_from("<B", data, pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
        pos += 1 + 4 * rank
        count = int(np.prod(dims)) if dims else 1
        if name not in expected or tuple(dims) != expected[name]:
            layer = name.split(".")[0]
            raise ShapeError(
                f"layer {layer}: checkpoint parameter {name} has shape {tuple(dims)}, "
                f"spec expects {expected.get(name)}"
            )
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    if pos != len(data) - 4 or set(params) != set(expected):
        raise CheckpointError("checkpoint parameter table does not match its spec")
    return Checkpoint(
        spec or file_spec, params, header["n_max"], header["render_digest"], header["train_digest"], header["epoch"]
    )


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), spec)
