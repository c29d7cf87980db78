"""Train/test partitions of the image set under the four experiment protocols.

Manifests are JSON::

    {"schema_version": 1, "n_max": N, "protocol": {"name": ..., "params": {...}},
     "seed": s, "train": [[n, m], ...], "test": [[n, m], ...]}

with both key lists sorted lexicographically.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from .dataset import all_keys
from .errors import (
    DuplicateKey,
    IncompleteCover,
    KeyOutOfRange,
    SchemaMismatch,
    SplitError,
)
from .glyphs import AdditionKey
from .rng import SplitMix64

SCHEMA_VERSION = 1

COMMUTATIVITY = "commutativity"
RANDOM_PAIR = "random_pair"
UNIFORM_RANDOM = "uniform_random"
EXCLUSION = "exclusion"
PROTOCOLS = (COMMUTATIVITY, RANDOM_PAIR, UNIFORM_RANDOM, EXCLUSION)


@dataclass(frozen=True)
class SplitProtocol:
    name: str
    params: dict = field(default_factory=dict)

    @property
    def randomized(self) -> bool:
        return self.name != EXCLUSION

    def to_json(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}

    @classmethod
    def from_json(cls, doc: dict) -> "SplitProtocol":
        name = doc["name"]
        if name not in PROTOCOLS:
            raise SchemaMismatch(f"unknown protocol {name!r}")
        params = dict(doc.get("params", {}))
        if "intervals" in params:
            params["intervals"] = [tuple(iv) for iv in params["intervals"]]
        return cls(name, params)

    @classmethod
    def commutativity(cls, train_fraction: float = 0.5) -> "SplitProtocol":
        return cls(COMMUTATIVITY, {"train_fraction": train_fraction})

    @classmethod
    def random_pair(cls, train_fraction: float) -> "SplitProtocol":
        return cls(RANDOM_PAIR, {"train_fraction": train_fraction})

    @classmethod
    def uniform_random(cls, test_fraction: float) -> "SplitProtocol":
        return cls(UNIFORM_RANDOM, {"test_fraction": test_fraction})

    @classmethod
    def exclusion(cls, intervals) -> "SplitProtocol":
        return cls(EXCLUSION, {"intervals": [tuple(iv) for iv in intervals]})


@dataclass(frozen=True)
class SplitManifest:
    n_max: int
    protocol: SplitProtocol
    seed: int
    train: tuple[AdditionKey, ...]
    test: tuple[AdditionKey, ...]

    def __post_init__(self):
        _check_cover(self.n_max, self.train, self.test)

    @cached_property
    def train_set(self) -> frozenset:
        return frozenset(self.train)

    def role(self, key) -> str:
        return "train" if tuple(key) in self.train_set else "test"

    def roles(self) -> dict:
        out = {k: "train" for k in self.train}
        out.update({k: "test" for k in self.test})
        return out

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_max": self.n_max,
            "protocol": self.protocol.to_json(),
            "seed": self.seed,
            "train": [list(k) for k in self.train],
            "test": [list(k) for k in self.test],
        }


def _make_manifest(n_max, protocol, seed, train_keys) -> SplitManifest:
    train = set(train_keys)
    keys = all_keys(n_max)
    return SplitManifest(
        n_max,
        protocol,
        seed,
        tuple(k for k in keys if k in train),
        tuple(k for k in keys if k not in train),
    )


def _check_cover(n_max, train, test) -> None:
    seen = set()
    for key in list(train) + list(test):
        n, m = key
        if not (0 <= n <= n_max and 0 <= m <= n_max):
            raise KeyOutOfRange(f"key {list(key)} outside [0,{n_max}]^2")
        if key in seen:
            raise DuplicateKey(f"duplicate key {list(key)}")
        seen.add(key)
    if len(seen) != (n_max + 1) ** 2:
        missing = next(k for k in all_keys(n_max) if k not in seen)
        raise IncompleteCover(f"incomplete cover: key {list(missing)} missing")
    if not train:
        raise SplitError("empty training set")


def round_half_up(x: float) -> int:
    # tolerance absorbs binary noise such as 0.86 * 900 = 773.999...
    return math.floor(x + 0.5 + 1e-9)


def _unordered_pairs(n_max: int) -> list[AdditionKey]:
    return [AdditionKey(n, m) for n in range(n_max + 1) for m in range(n + 1, n_max + 1)]


def commutativity_split(image_set, train_fraction: float = 0.5, seed: int = 0) -> SplitManifest:
    """One orientation of a seeded sample of off-diagonal pairs trains; duals and n+n test.

    Half the set is the ceiling, so fractions are capped at the N(N+1)/2
    available pairs rather than rejected.
    """
    if not 0 < train_fraction <= 0.5:
        max_keys = image_set.n_max * (image_set.n_max + 1) // 2
        raise SplitError(
            f"train_fraction {train_fraction} must be in (0, 0.5]; "
            f"at most {max_keys} keys (one per off-diagonal pair) can train"
        )
    n_max = image_set.n_max
    pairs = _unordered_pairs(n_max)
    wanted = min(round_half_up(train_fraction * (n_max + 1) ** 2), len(pairs))
    if wanted == 0:
        raise SplitError("train_fraction selects no keys")
    rng = SplitMix64(seed)
    chosen = rng.shuffle(pairs)[:wanted]
    coins = rng.block(len(chosen)) >> 63
    train = [p if c == 0 else AdditionKey(p.m, p.n) for p, c in zip(chosen, coins.tolist())]
    return _make_manifest(n_max, SplitProtocol.commutativity(train_fraction), seed, train)


def random_pair_split(image_set, train_fraction: float, seed: int = 0) -> SplitManifest:
    """Both orientations of a seeded sample of off-diagonal pairs train; the rest test."""
    n_max = image_set.n_max
    total = (n_max + 1) ** 2
    pairs = _unordered_pairs(n_max)
    n_pairs = round_half_up(train_fraction * total) // 2
    if not 0 < train_fraction < 1 or n_pairs < 1 or n_pairs >= len(pairs):
        raise SplitError(
            f"train_fraction {train_fraction} infeasible for N={n_max}: need between "
            f"{2 / total:.6f} and {2 * (len(pairs) - 1) / total:.6f} "
            f"(1..{len(pairs) - 1} of {len(pairs)} pairs, leaving a test pair)"
        )
    chosen = SplitMix64(seed).shuffle(pairs)[:n_pairs]
    train = [k for p in chosen for k in (p, AdditionKey(p.m, p.n))]
    return _make_manifest(n_max, SplitProtocol.random_pair(train_fraction), seed, train)


def uniform_random_split(image_set, test_fraction: float, seed: int = 0) -> SplitManifest:
    n_max = image_set.n_max
    keys = all_keys(n_max)
    n_test = round_half_up(test_fraction * len(keys))
    if not 0 <= test_fraction < 1 or n_test >= len(keys):
        raise SplitError(f"test_fraction {test_fraction} must be in [0, 1) and leave a training key")
    test = set(SplitMix64(seed).shuffle(keys)[:n_test])
    train = [k for k in keys if k not in test]
    return _make_manifest(n_max, SplitProtocol.uniform_random(test_fraction), seed, train)


def parse_intervals(text: str) -> list[tuple[int, int]]:
    """"33-37,62-68,13" -> [(33, 37), (62, 68), (13, 13)]"""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        out.append((int(lo), int(hi) if sep else int(lo)))
    return out


def validate_intervals(intervals, n_max: int) -> list[tuple[int, int]]:
    ivs = [tuple(int(v) for v in iv) for iv in intervals]
    if not ivs:
        raise SplitError("no excluded intervals given")
    prev_hi = -1
    for lo, hi in ivs:
        if not 0 <= lo <= hi <= n_max:
            raise SplitError(f"interval [{lo},{hi}] not within [0,{n_max}]")
        if lo <= prev_hi:
            raise SplitError("intervals must be sorted and non-overlapping")
        prev_hi = hi
    return ivs


def integer_exclusion_split(image_set, intervals, seed: int = 0) -> SplitManifest:
    """Every formula touching an excluded integer tests; everything else trains.

    ``seed`` is recorded only; the split is deterministic.
    """
    n_max = image_set.n_max
    ivs = validate_intervals(intervals, n_max)
    excluded = {v for lo, hi in ivs for v in range(lo, hi + 1)}
    if len(excluded) == n_max + 1:
        raise SplitError("empty training set: intervals cover every integer")
    train = [k for k in all_keys(n_max) if k.n not in excluded and k.m not in excluded]
    return _make_manifest(n_max, SplitProtocol.exclusion(ivs), seed, train)


def make_split(image_set, protocol: SplitProtocol, seed: int = 0) -> SplitManifest:
    p = protocol.params
    if protocol.name == COMMUTATIVITY:
        return commutativity_split(image_set, p.get("train_fraction", 0.5), seed)
    if protocol.name == RANDOM_PAIR:
        return random_pair_split(image_set, p["train_fraction"], seed)
    if protocol.name == UNIFORM_RANDOM:
        return uniform_random_split(image_set, p["test_fraction"], seed)
    if protocol.name == EXCLUSION:
        return integer_exclusion_split(image_set, p["intervals"], seed)
    raise SplitError(f"unknown protocol {protocol.name!r}")


def dumps_manifest(manifest: SplitManifest) -> str:
    return json.dumps(manifest.to_json(), separators=(",", ":")) + "\n"


def save_manifest(manifest: SplitManifest, path) -> None:
    Path(path).write_text(dumps_manifest(manifest))


def loads_manifest(text: str) -> SplitManifest:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(
            f"schema mismatch: got {doc.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )
    try:
        n_max = int(doc["n_max"])
        protocol = SplitProtocol.from_json(doc["protocol"])
        train = tuple(AdditionKey(int(n), int(m)) for n, m in doc["train"])
        test = tuple(AdditionKey(int(n), int(m)) for n, m in doc["test"])
        seed = int(doc["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"schema mismatch: {exc}") from None
    _check_cover(n_max, train, test)
    train_set = set(train)
    keys = all_keys(n_max)
    return SplitManifest(
        n_max,
        protocol,
        seed,
        tuple(k for k in keys if k in train_set),
        tuple(k for k in keys if k not in train_set),
    )


def load_manifest(path) -> SplitManifest:
    return loads_manifest(Path(path).read_text())
