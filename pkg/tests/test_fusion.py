import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eul.errors import AlignmentError, ChecksumError, ContractError, FormatError, SingularSystemError
from eul.fusion import GramRecord, decode_gram, fuse, load_gram, record_gram, save_gram
from eul.model import copy_adapter_set

from .conftest import random_adapters, tiny_records
from .helpers import stacked_lstsq, synthetic_fusion


def weights(fused):
    return [(a.w_down.data, a.b_down.data, a.w_up.data, a.b_up.data) for a in fused.adapters]


class TestRecordGram:
    def test_trace_counts_squared_norms(self, tiny_model, tiny_cfg):
        adapters = random_adapters(tiny_cfg, 0)
        recs = tiny_records(0, 5, "e")
        g = record_gram(tiny_model, adapters, recs, "q")
        assert g.sample_count == sum(len(r.tokens) for r in recs)
        tiny_model.set_adapters(adapters)
        cap = {}
        tiny_model.encode(np.array([r.tokens for r in recs]), capture=cap)
        for i in (0, 1):
            x = cap[i].reshape(-1, 8)
            assert np.trace(g.gram(i, "down")) == pytest.approx((x ** 2).sum(), rel=1e-12)
            z = adapters[i].bottleneck(x)
            np.testing.assert_allclose(g.gram(i, "up"), z.T @ z, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(g.cross(i, "down"), g.gram(i, "down") @ adapters[i].w_down.data,
                                       rtol=1e-12)

    def test_pad_excluded_and_chunking(self, tiny_model, tiny_cfg):
        adapters = random_adapters(tiny_cfg, 1)
        recs = tiny_records(0, 4, "e", length=8) + tiny_records(3, 3, "e", length=5)
        a = record_gram(tiny_model, adapters, recs, chunk=256)
        b = record_gram(tiny_model, adapters, recs, chunk=2)
        assert a.sample_count == 4 * 8 + 3 * 5
        for i in (0, 1):
            np.testing.assert_allclose(a.gram(i, "down"), b.gram(i, "down"), rtol=1e-10)

    def test_restores_model_adapters(self, tiny_model, tiny_cfg):
        record_gram(tiny_model, random_adapters(tiny_cfg, 1), tiny_records(0, 2, "e"))
        assert tiny_model.adapters == [None, None]

    def test_symmetric(self, tiny_model, tiny_cfg):
        g = record_gram(tiny_model, random_adapters(tiny_cfg, 1), tiny_records(0, 3, "e"))
        for i in g.layer_indices:
            for sub in ("down", "up"):
                assert np.array_equal(g.gram(i, sub), g.gram(i, sub).T)

    def test_empty(self, tiny_model, tiny_cfg):
        with pytest.raises(ContractError):
            record_gram(tiny_model, random_adapters(tiny_cfg, 1), [])
        with pytest.raises(ContractError):
            record_gram(tiny_model, [None, None], tiny_records(0, 3, "e"))


class TestFuse:
    def test_matches_stacked_lstsq(self):
        rng = np.random.default_rng(0)
        recs, sets, inputs = synthetic_fusion(rng, 3, 6, 3, n_layers=2)
        fused = fuse(recs, sets, ridge_scale=0.0)
        for i in (0, 1):
            np.testing.assert_allclose(fused.adapters[i].w_down.data,
                                       stacked_lstsq(inputs, sets, i, "down"), atol=1e-9)
            np.testing.assert_allclose(fused.adapters[i].w_up.data,
                                       stacked_lstsq(inputs, sets, i, "up"), atol=1e-9)

    def test_single_adapter_fixed_point(self):
        recs, sets, _ = synthetic_fusion(np.random.default_rng(1), 1, 5, 2)
        for ridge in (0.0, 1e-6, 1.0):
            got = fuse(recs, sets, ridge).adapters[0]
            assert got.equals(sets[0][0]) or np.allclose(got.w_down.data, sets[0][0].w_down.data,
                                                         atol=1e-8, rtol=0)

    def test_rank_one_grams_need_ridge(self):
        rng = np.random.default_rng(2)
        recs, sets, _ = synthetic_fusion(rng, 2, 4, 2, rows=1)
        with pytest.raises(SingularSystemError):
            fuse(recs, sets, ridge_scale=0.0)
        fused = fuse(recs, sets, ridge_scale=1e-3)
        assert np.isfinite(fused.adapters[0].w_down.data).all()

    def test_biases_are_sample_weighted(self):
        recs, sets, _ = synthetic_fusion(np.random.default_rng(3), 2, 4, 2)
        n = np.array([r.sample_count for r in recs], float)
        got = fuse(recs, sets).adapters[0].b_up.data
        expect = (n[0] * sets[0][0].b_up.data + n[1] * sets[1][0].b_up.data) / n.sum()
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_mapping_and_order(self):
        recs, sets, _ = synthetic_fusion(np.random.default_rng(4), 3, 5, 2)
        ref = weights(fuse(recs, sets))
        for perm in itertools.permutations(range(3)):
            mapping = {recs[k].request_id: sets[k] for k in perm}
            got = weights(fuse([recs[k] for k in perm], mapping))
            assert all(np.array_equal(a, b) for x, y in zip(ref, got) for a, b in zip(x, y))

    def test_ridge_reported(self):
        recs, sets, _ = synthetic_fusion(np.random.default_rng(5), 2, 4, 2)
        fused = fuse(recs, sets, ridge_scale=1e-3)
        gram = recs[0].gram(0, "down") + recs[1].gram(0, "down")
        assert fused.ridge["0.down"] == pytest.approx(1e-3 * np.trace(gram) / 4)
        assert fused.request_ids == ["req0", "req1"]

    def test_alignment_errors(self):
        recs, sets, _ = synthetic_fusion(np.random.default_rng(6), 2, 4, 2)
        with pytest.raises(AlignmentError):
            fuse(recs, sets[::-1])                      # cross terms do not match
        with pytest.raises(AlignmentError):
            fuse(recs, sets[:1])
        with pytest.raises(AlignmentError):
            fuse(recs, {"req0": sets[0], "other": sets[1]})
        with pytest.raises(AlignmentError):
            fuse([recs[0], recs[0]], [sets[0], sets[0]])
        with pytest.raises(AlignmentError):
            fuse(recs, [sets[0], sets[1] + [None]])

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            fuse([], [])
        recs, sets, _ = synthetic_fusion(np.random.default_rng(7), 1, 3, 2)
        with pytest.raises(ContractError):
            fuse(recs, sets, ridge_scale=-1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 4), d=st.integers(2, 8))
def test_identical_adapters_merge_to_themselves(seed, n, d):
    rng = np.random.default_rng(seed)
    recs, sets, _ = synthetic_fusion(rng, n, d, 2)
    shared = sets[0]
    recs = [GramRecord(r.request_id, r.sample_count,
                       {0: {s: (r.gram(0, s), r.gram(0, s) @ (shared[0].w_down.data if s == "down"
                                                            else shared[0].w_up.data))
                            for s in ("down", "up")}}) for r in recs]
    got = fuse(recs, [copy_adapter_set(shared) for _ in recs]).adapters[0]
    np.testing.assert_allclose(got.w_down.data, shared[0].w_down.data, atol=1e-8)
    np.testing.assert_allclose(got.w_up.data, shared[0].w_up.data, atol=1e-8)
    np.testing.assert_allclose(got.b_down.data, shared[0].b_down.data, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 4))
def test_merge_idempotent(seed, n):
    rng = np.random.default_rng(seed)
    recs, sets, inputs = synthetic_fusion(rng, n, 4, 2)
    merged = fuse(recs, sets, 0.0).adapters
    # re-recording the merged adapter on the union of inputs and fusing again changes nothing
    x = np.vstack([a[0]["down"] for a in inputs])
    z = np.vstack([a[0]["up"] for a in inputs])
    rec = GramRecord("all", sum(r.sample_count for r in recs),
                     {0: {"down": (x.T @ x, x.T @ x @ merged[0].w_down.data),
                          "up": (z.T @ z, z.T @ z @ merged[0].w_up.data)}})
    again = fuse([rec], [merged], 0.0).adapters[0]
    np.testing.assert_allclose(again.w_down.data, merged[0].w_down.data, atol=1e-8)


class TestGramFile:
    def test_round_trip_bitwise(self, tmp_path, tiny_model, tiny_cfg):
        g = record_gram(tiny_model, random_adapters(tiny_cfg, 0), tiny_records(0, 4, "e"), "req-é")
        save_gram(g, tmp_path / "g.bin")
        back = load_gram(tmp_path / "g.bin")
        assert back.equals(g) and back.request_id == "req-é"
        save_gram(back, tmp_path / "h.bin")
        assert (tmp_path / "g.bin").read_bytes() == (tmp_path / "h.bin").read_bytes()

    def test_truncated(self, tmp_path):
        recs, _, _ = synthetic_fusion(np.random.default_rng(0), 1, 3, 2)
        save_gram(recs[0], tmp_path / "g.bin")
        data = (tmp_path / "g.bin").read_bytes()
        with pytest.raises(ChecksumError):
            decode_gram(data[:-5])
        flipped = bytearray(data)
        flipped[60] ^= 1
        with pytest.raises(ChecksumError):
            decode_gram(bytes(flipped))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_gram(b"NOTAGRAM" + bytes(100))

    def test_partial_set(self, tmp_path, tiny_model, tiny_cfg):
        adapters = random_adapters(tiny_cfg, 0)
        adapters[0] = None
        g = record_gram(tiny_model, adapters, tiny_records(0, 2, "e"))
        save_gram(g, tmp_path / "g.bin")
        assert load_gram(tmp_path / "g.bin").layer_indices == [1]
