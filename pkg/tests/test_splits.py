import itertools
import json
from types import SimpleNamespace

import pytest
from hypothesis import given, settings, strategies as st

from addlab.errors import DuplicateKey, IncompleteCover, KeyOutOfRange, SchemaMismatch, SplitError
from addlab.splits import (
    SplitProtocol,
    commutativity_split,
    dumps_manifest,
    integer_exclusion_split,
    load_manifest,
    loads_manifest,
    make_split,
    parse_intervals,
    random_pair_split,
    save_manifest,
    uniform_random_split,
)


def keyset(n_max):
    # splits only read n_max, so a stand-in avoids rendering large sets
    return SimpleNamespace(n_max=n_max)


def omega(n_max):
    return set(itertools.product(range(n_max + 1), repeat=2))


def assert_partition(manifest):
    train, test = set(manifest.train), set(manifest.test)
    assert not train & test
    assert train | test == omega(manifest.n_max)
    assert len(manifest.train) + len(manifest.test) == (manifest.n_max + 1) ** 2
    assert list(manifest.train) == sorted(manifest.train)
    assert list(manifest.test) == sorted(manifest.test)


# commutativity


def test_commutativity_n9_counts_by_enumeration():
    m = commutativity_split(keyset(9), 0.5, seed=0)
    unordered = {frozenset(k) for k in omega(9) if k[0] != k[1]}
    assert len(m.train) == len(unordered) == 45
    assert len(m.test) == 55
    assert all((n, n) in set(m.test) for n in range(10))
    assert_partition(m)


def test_commutativity_dual_coupling_exhaustive():
    for seed in range(20):
        m = commutativity_split(keyset(9), 0.5, seed=seed)
        train = m.train_set
        for n, k in omega(9):
            if (n, k) in train:
                assert n != k
                assert (k, n) not in train


def test_commutativity_n99_capped_at_pair_count():
    m = commutativity_split(keyset(99), 0.5, seed=3)
    assert len(m.train) == 99 * 100 // 2
    assert_partition(m)


def test_commutativity_smaller_fraction():
    m = commutativity_split(keyset(29), 0.25, seed=1)
    assert len(m.train) == 225


@pytest.mark.parametrize("f", [0.0, 0.51, 1.0, -0.1])
def test_commutativity_rejects_fraction(f):
    with pytest.raises(SplitError, match="at most 45"):
        commutativity_split(keyset(9), f)


def test_commutativity_orientations_are_mixed():
    m = commutativity_split(keyset(29), 0.5, seed=0)
    upper = sum(1 for n, k in m.train if n < k)
    assert 150 < upper < 285


# random pair


def test_random_pair_86_percent_of_n29():
    m = random_pair_split(keyset(29), 0.86, seed=5)
    assert len(m.train) == 774
    assert_partition(m)


def test_random_pair_coupling_and_diagonal():
    m = random_pair_split(keyset(29), 0.5, seed=2)
    train = m.train_set
    for n, k in omega(29):
        if n == k:
            assert (n, k) not in train
        else:
            assert ((n, k) in train) == ((k, n) in train)


def test_random_pair_rounds_down_to_even():
    # 0.3 * 100 = 30 keys, 0.31 * 100 = 31 keys -> 15 pairs
    assert len(random_pair_split(keyset(9), 0.31, seed=0).train) == 30


def test_random_pair_all_off_diagonal_rejected():
    off_diagonal = sum(1 for n, k in omega(9) if n != k)
    assert off_diagonal == 90
    with pytest.raises(SplitError, match="infeasible"):
        random_pair_split(keyset(9), 0.9)


def test_random_pair_too_small_rejected():
    with pytest.raises(SplitError):
        random_pair_split(keyset(9), 0.01)


# uniform


def test_uniform_zero_fraction_is_everything():
    m = uniform_random_split(keyset(9), 0.0)
    assert len(m.train) == 100 and m.test == ()


def test_uniform_large_set_count():
    m = uniform_random_split(keyset(299), 0.85, seed=0)
    assert len(m.train) == 13_500
    assert len(m.test) == 76_500


def test_uniform_determinism_and_seed_sensitivity():
    a = uniform_random_split(keyset(9), 0.2, seed=4)
    b = uniform_random_split(keyset(9), 0.2, seed=4)
    c = uniform_random_split(keyset(9), 0.2, seed=5)
    assert dumps_manifest(a) == dumps_manifest(b)
    assert a.test != c.test
    assert len(a.test) == 20


def test_uniform_rejects_full_test():
    with pytest.raises(SplitError):
        uniform_random_split(keyset(9), 1.0)


# exclusion


def brute_exclusion_count(n_max, excluded):
    return sum(1 for n, m in omega(n_max) if n in excluded or m in excluded)


@pytest.mark.parametrize(
    "text, expected",
    [("42", 199), ("33-37,62-68", 2256), ("60-69", 1900)],
)
def test_exclusion_counts(text, expected):
    ivs = parse_intervals(text)
    excluded = {v for lo, hi in ivs for v in range(lo, hi + 1)}
    m = integer_exclusion_split(keyset(99), ivs)
    assert len(m.test) == brute_exclusion_count(99, excluded) == expected
    assert_partition(m)
    for n, k in m.train:
        assert n not in excluded and k not in excluded


def test_exclusion_closed_forms():
    assert 2 * 100 - 1 == 199
    assert 100**2 - 88**2 == 2256
    assert 100**2 - 90**2 == 1900


def test_parse_intervals():
    assert parse_intervals("33-37,62-68,13") == [(33, 37), (62, 68), (13, 13)]


@pytest.mark.parametrize("ivs", [[(5, 3)], [(0, 100)], [(3, 6), (5, 8)], [(8, 9), (1, 2)], []])
def test_exclusion_rejects_bad_intervals(ivs):
    with pytest.raises(SplitError):
        integer_exclusion_split(keyset(99), ivs)


def test_exclusion_everything_rejected():
    with pytest.raises(SplitError, match="empty training set"):
        integer_exclusion_split(keyset(9), [(0, 9)])


# manifests


def test_manifest_json_layout():
    m = integer_exclusion_split(keyset(2), [(1, 1)], seed=7)
    doc = json.loads(dumps_manifest(m))
    assert doc == {
        "schema_version": 1,
        "n_max": 2,
        "protocol": {"name": "exclusion", "params": {"intervals": [[1, 1]]}},
        "seed": 7,
        "train": [[0, 0], [0, 2], [2, 0], [2, 2]],
        "test": [[0, 1], [1, 0], [1, 1], [1, 2], [2, 1]],
    }


@pytest.mark.parametrize(
    "protocol",
    [
        SplitProtocol.commutativity(0.5),
        SplitProtocol.random_pair(0.6),
        SplitProtocol.uniform_random(0.2),
        SplitProtocol.exclusion([(3, 4)]),
    ],
)
def test_manifest_round_trip(tmp_path, protocol):
    m = make_split(keyset(9), protocol, seed=11)
    path = tmp_path / "split.json"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back == m
    assert dumps_manifest(back) == path.read_text()


def _doc():
    return json.loads(dumps_manifest(uniform_random_split(keyset(9), 0.2, seed=1)))


def test_manifest_missing_key():
    doc = _doc()
    for part in ("train", "test"):
        if [3, 4] in doc[part]:
            doc[part].remove([3, 4])
    with pytest.raises(IncompleteCover, match="incomplete cover"):
        loads_manifest(json.dumps(doc))


def test_manifest_duplicate_key():
    doc = _doc()
    doc["test"].append(doc["train"][0])
    with pytest.raises(DuplicateKey, match="duplicate"):
        loads_manifest(json.dumps(doc))


def test_manifest_out_of_range():
    doc = _doc()
    doc["test"].append([10, 0])
    with pytest.raises(KeyOutOfRange):
        loads_manifest(json.dumps(doc))


def test_manifest_schema_version():
    doc = _doc()
    doc["schema_version"] = 2
    with pytest.raises(SchemaMismatch):
        loads_manifest(json.dumps(doc))


# properties

protocols = st.one_of(
    st.builds(SplitProtocol.commutativity, st.sampled_from([0.1, 0.25, 0.4, 0.5])),
    st.builds(SplitProtocol.random_pair, st.sampled_from([0.2, 0.5, 0.7])),
    st.builds(SplitProtocol.uniform_random, st.sampled_from([0.0, 0.2, 0.5, 0.8])),
)


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 30), protocols, st.integers(0, 2**64 - 1))
def test_every_protocol_partitions(n_max, protocol, seed):
    m = make_split(keyset(n_max), protocol, seed=seed)
    assert_partition(m)
    assert m.train
    again = make_split(keyset(n_max), protocol, seed=seed)
    assert dumps_manifest(again) == dumps_manifest(m)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.data())
def test_exclusion_property(n_max, data):
    lo = data.draw(st.integers(0, n_max))
    hi = data.draw(st.integers(lo, n_max))
    if lo == 0 and hi == n_max:
        return
    m = integer_exclusion_split(keyset(n_max), [(lo, hi)])
    assert_partition(m)
    touching = {(n, k) for n, k in omega(n_max) if lo <= n <= hi or lo <= k <= hi}
    assert set(m.test) == touching
