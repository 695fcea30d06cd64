import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbadapt.errors import ContractError
from bbadapt.nets import SourceNet, train_source_net
from bbadapt.predictors import (
    CachedPredictor,
    InProcessPredictor,
    TopK,
    ada_ls,
    disclose_row,
    hard_to_prob,
    init_teacher,
    quantize_probs,
    read_cache,
    teacher_row,
    write_cache,
)

from conftest import make_blobs


def naive_ada_ls(p, r):
    """Brute-force reference: sort indices by (-prob, index), keep top r,
    spread the leftover mass uniformly."""
    k = len(p)
    order = sorted(range(k), key=lambda i: (-p[i], i))
    kept = order[:r]
    if r == k:
        return [p[i] for i in range(k)]
    kept_mass = sum(p[i] for i in kept)
    rest = max(0.0, 1.0 - kept_mass) / (k - r)
    out = [rest] * k
    for i in kept:
        out[i] = p[i]
    return out


def test_quantize_probs_nine_digits():
    row = np.array([1.0 / 3.0, 2.0 / 3.0])
    q = quantize_probs(row)
    assert q[0] == 0.333333333
    assert q[1] == 0.666666667
    # idempotent
    assert np.array_equal(quantize_probs(q), q)


def test_quantize_preserves_shape(rng):
    row = rng.dirichlet(np.ones(4), size=3)
    q = quantize_probs(row)
    assert q.shape == row.shape


def test_disclose_row_full_soft_sorted_desc():
    rec = disclose_row([0.2, 0.5, 0.3], "full-soft", 0)
    assert rec.classes == (1, 2, 0)
    assert rec.probs == (0.5, 0.3, 0.2)
    assert rec.r == 3 and rec.k == 3


def test_disclose_row_tie_prefers_lower_index():
    rec = disclose_row([0.4, 0.2, 0.4], "top-r", 1)
    assert rec.classes == (0,)
    rec = disclose_row([0.25, 0.25, 0.25, 0.25], "full-soft", 0)
    assert rec.classes == (0, 1, 2, 3)


def test_disclose_row_hard_sentinel():
    rec = disclose_row([0.1, 0.7, 0.2], "hard", 0)
    assert rec == TopK((1,), (1.0,), 0, 3)


def test_disclose_row_validation():
    with pytest.raises(ContractError):
        disclose_row([0.5, 0.5], "soft", 1)
    with pytest.raises(ContractError):
        disclose_row([0.5, 0.5], "top-r", 0)
    with pytest.raises(ContractError):
        disclose_row([0.5, 0.5], "top-r", 3)


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_ada_ls_matches_naive_oracle(k):
    gen = np.random.default_rng(k)
    for _ in range(200):
        p = gen.dirichlet(np.ones(k) * gen.uniform(0.2, 3.0))
        for r in range(1, k + 1):
            got = ada_ls(p, r)
            want = naive_ada_ls(list(p), r)
            assert got.r == r
            assert np.max(np.abs(got.probs - np.array(want))) < 1e-9
            assert abs(got.probs.sum() - 1.0) < 1e-9


def test_ada_ls_full_r_is_identity(rng):
    p = rng.dirichlet(np.ones(5))
    out = ada_ls(p, 5).probs
    assert np.array_equal(out, p)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_ada_ls_preserves_argmax(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(6))
    top = np.sort(p)
    if top[-1] - top[-2] < 1e-12:
        return
    for r in (1, 2, 5):
        assert int(np.argmax(ada_ls(p, r).probs)) == int(np.argmax(p))


def test_ada_ls_from_topk_matches_vector_path(rng):
    p = quantize_probs(rng.dirichlet(np.ones(4)))
    p = p / p.sum()
    p = quantize_probs(p)
    for r in (1, 2, 3):
        rec = disclose_row(p, "top-r", r)
        via_rec = ada_ls(rec, r).probs
        via_vec = ada_ls(p, r).probs
        assert np.max(np.abs(via_rec - via_vec)) < 1e-9


def test_ada_ls_rejects_bad_inputs():
    with pytest.raises(ContractError):
        ada_ls(np.array([0.5, 0.6]), 1)
    with pytest.raises(ContractError):
        ada_ls(np.array([[0.5, 0.5]]), 1)
    with pytest.raises(ContractError):
        ada_ls(np.array([0.5, 0.5]), 0)
    hard = TopK((1,), (1.0,), 0, 3)
    with pytest.raises(ContractError):
        ada_ls(hard, 1)
    truncated = TopK((2, 0), (0.6, 0.3), 2, 4)
    with pytest.raises(ContractError):
        ada_ls(truncated, 1)


def test_ada_ls_full_disclosure_any_r():
    rec = disclose_row([0.1, 0.6, 0.3], "full-soft", 0)
    out = ada_ls(rec, 1).probs
    assert np.allclose(out, [0.2, 0.6, 0.2], atol=1e-12)


def test_hard_to_prob_values():
    assert np.array_equal(hard_to_prob(2, 4, "onehot"), [0.0, 0.0, 1.0, 0.0])
    assert np.allclose(hard_to_prob(0, 2, "ls"), [0.95, 0.05], atol=1e-15)
    out = hard_to_prob(1, 5, "ls")
    assert abs(out[1] - (0.9 + 0.02)) < 1e-15
    assert np.allclose(np.delete(out, 1), 0.02, atol=1e-15)
    with pytest.raises(ContractError):
        hard_to_prob(5, 4)
    with pytest.raises(ContractError):
        hard_to_prob(0, 4, "soft")


def test_teacher_row_dispatch():
    hard = TopK((2,), (1.0,), 0, 4)
    assert np.array_equal(teacher_row(hard, 1, "onehot"), [0.0, 0.0, 1.0, 0.0])
    assert np.allclose(teacher_row(hard, 1, "ls"), hard_to_prob(2, 4, "ls"))
    soft = disclose_row([0.1, 0.6, 0.2, 0.1], "top-r", 1)
    assert np.allclose(teacher_row(soft, 1), ada_ls(soft, 1).probs)


class StubHandle:
    def __init__(self, rows, r, num_classes, fail_at=None):
        self.rows = rows
        self.r = r
        self.num_classes = num_classes
        self.disclosure = "top-r"
        self.predictor_id = "stub"
        self.fail_at = fail_at

    def query(self, features):
        if self.fail_at is not None:
            raise ContractError("stub failure")
        return [disclose_row(row, "top-r", self.r) for row in self.rows]


def test_init_teacher_matches_naive_mean(rng):
    k, n, r = 4, 7, 2
    rows_a = rng.dirichlet(np.ones(k), size=n)
    rows_b = rng.dirichlet(np.ones(k), size=n)
    handles = [StubHandle(rows_a, r, k), StubHandle(rows_b, r, k)]
    bank = init_teacher(handles, np.zeros((n, 2)), r=r)

    for i in range(n):
        want = [
            (a + b) / 2.0
            for a, b in zip(
                naive_ada_ls(list(quantize_probs(rows_a[i])), r),
                naive_ada_ls(list(quantize_probs(rows_b[i])), r),
            )
        ]
        assert np.max(np.abs(bank.rows[i] - np.array(want))) < 1e-9


def test_init_teacher_validation(rng):
    rows = rng.dirichlet(np.ones(3), size=4)
    with pytest.raises(ContractError):
        init_teacher([], np.zeros((4, 2)), r=1)
    mixed = [StubHandle(rows, 1, 3), StubHandle(rows, 1, 4)]
    with pytest.raises(ContractError):
        init_teacher(mixed, np.zeros((4, 2)), r=1)
    short = StubHandle(rows[:2], 1, 3)
    with pytest.raises(ContractError):
        init_teacher([short], np.zeros((4, 2)), r=1)


def test_init_teacher_aborts_on_failure(rng):
    rows = rng.dirichlet(np.ones(3), size=4)
    bad = StubHandle(rows, 1, 3, fail_at=0)
    with pytest.raises(ContractError):
        init_teacher([StubHandle(rows, 1, 3), bad], np.zeros((4, 2)), r=1)


def _trained_net(rng):
    x, y = make_blobs(40, [(-2.0, 0.0), (2.0, 0.0), (0.0, 2.5)], 0.4, rng)
    net = SourceNet(2, 3, hidden=(16,), rng=np.random.default_rng(0))
    train_source_net(net, x, y, epochs=5, batch_size=32, seed=1)
    return net, x


def test_in_process_predictor_snapshot_isolated(rng):
    net, x = _trained_net(rng)
    handle = InProcessPredictor(net, disclosure="full-soft")
    before = handle.query(x[:5])
    # training the original after handle creation must not leak through
    net.head.weight.data += 10.0
    after = handle.query(x[:5])
    assert before == after


def test_in_process_predictor_r_resolution(rng):
    net, _ = _trained_net(rng)
    assert InProcessPredictor(net, disclosure="full-soft").r == 3
    assert InProcessPredictor(net, disclosure="hard").r == 0
    assert InProcessPredictor(net, disclosure="top-r", r=2).r == 2
    with pytest.raises(ContractError):
        InProcessPredictor(net, disclosure="top-r")
    with pytest.raises(ContractError):
        InProcessPredictor(net, disclosure="soft")


def test_predict_shapes_by_disclosure(rng):
    net, x = _trained_net(rng)
    full = InProcessPredictor(net, disclosure="full-soft").predict(x[0])
    assert isinstance(full, np.ndarray) and full.shape == (3,)
    assert abs(full.sum() - 1.0) < 1e-6
    pairs = InProcessPredictor(net, disclosure="top-r", r=2).predict(x[0])
    assert len(pairs) == 2 and pairs[0][1] >= pairs[1][1]
    hard = InProcessPredictor(net, disclosure="hard").predict(x[0])
    assert hard == int(np.argmax(full))
    with pytest.raises(ContractError):
        InProcessPredictor(net, disclosure="hard").predict(x[:2])


def test_predictions_are_quantized(rng):
    net, x = _trained_net(rng)
    handle = InProcessPredictor(net, disclosure="full-soft")
    for rec in handle.query(x[:10]):
        for p in rec.probs:
            assert p == float("%.9g" % p)


def test_cached_predictor_positional(rng):
    net, x = _trained_net(rng)
    records = InProcessPredictor(net, disclosure="top-r", r=1).query(x[:6])
    cache = CachedPredictor(records, 3, "c")
    assert len(cache) == 6
    assert cache.query(x[:6]) == records
    assert cache.query(None) == records
    assert cache.lookup(2) == records[2]
    with pytest.raises(ContractError):
        cache.query(x[:4])
    with pytest.raises(ContractError):
        cache.predict(x[0])


def test_cached_predictor_validation():
    with pytest.raises(ContractError):
        CachedPredictor([], 3, "c")
    mixed = [TopK((0,), (0.9,), 1, 3), TopK((0, 1), (0.6, 0.3), 2, 3)]
    with pytest.raises(ContractError):
        CachedPredictor(mixed, 3, "c")


def test_cached_predictor_disclosure_inference():
    hard = [TopK((1,), (1.0,), 0, 3)]
    assert CachedPredictor(hard, 3, "c").disclosure == "hard"
    full = [TopK((0, 1, 2), (0.5, 0.3, 0.2), 3, 3)]
    assert CachedPredictor(full, 3, "c").disclosure == "full-soft"
    top = [TopK((0,), (0.5,), 1, 3)]
    assert CachedPredictor(top, 3, "c").disclosure == "top-r"


def test_cache_file_round_trip(tmp_path, rng):
    net, x = _trained_net(rng)
    handle = InProcessPredictor(net, disclosure="top-r", r=2, predictor_id="src0")
    path = tmp_path / "cache.ndjson"
    count = write_cache(str(path), handle, x)
    assert count == x.shape[0]
    cache = read_cache(str(path), 3)
    assert cache.predictor_id == "src0"
    assert cache.query(x) == handle.query(x)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"sample_id", "classes", "probs", "r", "predictor_id"}


def test_read_cache_requires_full_coverage(tmp_path):
    lines = [
        {"sample_id": 0, "classes": [1], "probs": [0.8], "r": 1, "predictor_id": "c"},
        {"sample_id": 2, "classes": [0], "probs": [0.7], "r": 1, "predictor_id": "c"},
    ]
    path = tmp_path / "gap.ndjson"
    path.write_text("\n".join(json.dumps(obj) for obj in lines) + "\n")
    with pytest.raises(ContractError):
        read_cache(str(path), 3)
