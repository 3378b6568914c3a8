import numpy as np
import pytest

import groupcast.tensor as T
from groupcast.attention import ISAB, MAB, PMA, SAB, AttentionConfig, MultiheadAttention
from groupcast.errors import DimensionError, EmptySetError
from groupcast.seeding import make_rng
from groupcast.tensor import count_flops


CFG = AttentionConfig(d_model=64, n_heads=4)


def t(a):
    return T.as_tensor(np.asarray(a, dtype=float))


class TestMultiheadAttention:
    def test_single_key_is_projection_of_value(self):
        rng = make_rng(31)
        mha = MultiheadAttention(CFG, rng, "mha")
        q = t(rng.standard_normal((3, 64)))
        kv = t(rng.standard_normal((1, 64)))
        out = mha(q, kv, kv).data
        # softmax over a singleton puts weight 1 on the only row
        expected = (mha.wv(kv).data @ mha.wo.weight.data) + mha.wo.bias.data
        assert np.allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)

    def test_duplicated_keys_do_not_change_output(self):
        rng = make_rng(32)
        mha = MultiheadAttention(CFG, rng, "mha")
        q = t(rng.standard_normal((2, 64)))
        kv = rng.standard_normal((4, 64))
        out_once = mha(q, t(kv), t(kv)).data
        dup = np.concatenate([kv, kv], axis=0)
        out_dup = mha(q, t(dup), t(dup)).data
        assert np.max(np.abs(out_once - out_dup)) < 1e-12

    def test_joint_key_value_permutation_invariance(self):
        rng = make_rng(33)
        mha = MultiheadAttention(CFG, rng, "mha")
        q = t(rng.standard_normal((3, 64)))
        kv = rng.standard_normal((6, 64))
        perm = rng.permutation(6)
        out = mha(q, t(kv), t(kv)).data
        out_p = mha(q, t(kv[perm]), t(kv[perm])).data
        assert np.max(np.abs(out - out_p)) < 1e-12

    def test_empty_key_set_rejected(self):
        rng = make_rng(34)
        mha = MultiheadAttention(CFG, rng, "mha")
        q = t(np.zeros((2, 64)))
        with pytest.raises(EmptySetError):
            mha(q, t(np.zeros((0, 64))), t(np.zeros((0, 64))))

    def test_wrong_width_rejected(self):
        rng = make_rng(35)
        mha = MultiheadAttention(CFG, rng, "mha")
        with pytest.raises(DimensionError):
            mha(t(np.zeros((2, 32))), t(np.zeros((2, 32))), t(np.zeros((2, 32))))

    def test_head_divisibility_enforced(self):
        with pytest.raises(DimensionError):
            AttentionConfig(d_model=30, n_heads=4)


class TestSAB:
    def test_singleton_set(self):
        rng = make_rng(41)
        sab = SAB(CFG, rng, "sab")
        out = sab(t(rng.standard_normal((1, 64))))
        assert out.shape == (1, 64)

    def test_row_swap_equivariance(self):
        rng = make_rng(42)
        sab = SAB(CFG, rng, "sab")
        x = rng.standard_normal((5, 64))
        swapped = x.copy()
        swapped[[1, 2]] = swapped[[2, 1]]
        out = sab(t(x)).data
        out_s = sab(t(swapped)).data
        expected = out.copy()
        expected[[1, 2]] = expected[[2, 1]]
        assert np.max(np.abs(out_s - expected)) <= 1e-9

    def test_variable_set_sizes_one_weight_set(self):
        rng = make_rng(43)
        sab = SAB(CFG, rng, "sab")
        for n in range(2, 11):
            out = sab(t(rng.standard_normal((n, 64))))
            assert out.shape == (n, 64)

    def test_empty_set_rejected(self):
        sab = SAB(CFG, make_rng(44), "sab")
        with pytest.raises(EmptySetError):
            sab(t(np.zeros((0, 64))))

    def test_equivariance_property_50_draws(self):
        rng = make_rng(45)
        sab = SAB(CFG, rng, "sab")
        for trial in range(50):
            n = int(rng.integers(2, 9))
            x = rng.standard_normal((n, 64))
            p = rng.permutation(n)
            out = sab(t(x)).data
            out_p = sab(t(x[p])).data
            assert np.max(np.abs(out_p - out[p])) <= 1e-9, f"trial {trial}"


class TestISAB:
    def test_equivariance_property_50_draws(self):
        rng = make_rng(51)
        isab = ISAB(CFG, rng, "isab", m=4)
        for trial in range(50):
            n = int(rng.integers(2, 9))
            x = rng.standard_normal((n, 64))
            p = rng.permutation(n)
            out = isab(t(x)).data
            out_p = isab(t(x[p])).data
            assert np.max(np.abs(out_p - out[p])) <= 1e-9, f"trial {trial}"

    def test_single_inducing_point_valid(self):
        rng = make_rng(52)
        isab = ISAB(CFG, rng, "isab", m=1)
        out = isab(t(rng.standard_normal((5, 64))))
        assert out.shape == (5, 64)
        assert np.std(out.data, axis=0).max() > 0  # rows still differ via queries

    def test_linear_cost_in_set_size(self):
        # flop ratio per doubling of n should be ~2 when inducing-side
        # constants are small relative to the per-row terms
        cfg = AttentionConfig(d_model=16, n_heads=4)
        rng = make_rng(53)
        isab = ISAB(cfg, rng, "isab", m=1)
        totals = {}
        for n in (8, 16, 32):
            x = t(rng.standard_normal((n, 16)))
            with count_flops() as fc:
                with T.no_grad():
                    isab(x)
            totals[n] = fc.total
        r1 = totals[16] / totals[8]
        r2 = totals[32] / totals[16]
        assert abs(r1 - 2.0) <= 0.2, totals
        assert abs(r2 - 2.0) <= 0.2, totals

    def test_empty_set_rejected(self):
        isab = ISAB(CFG, make_rng(54), "isab", m=2)
        with pytest.raises(EmptySetError):
            isab(t(np.zeros((0, 64))))


class TestPMA:
    def test_invariance_property_50_draws(self):
        rng = make_rng(61)
        pma = PMA(CFG, rng, "pma", k=1)
        for trial in range(50):
            n = int(rng.integers(1, 9))
            x = rng.standard_normal((n, 64))
            p = rng.permutation(n)
            out = pma(t(x)).data
            out_p = pma(t(x[p])).data
            assert np.max(np.abs(out_p - out)) <= 1e-9, f"trial {trial}"

    def test_singleton_set(self):
        rng = make_rng(62)
        pma = PMA(CFG, rng, "pma", k=1)
        out = pma(t(rng.standard_normal((1, 64))))
        assert out.shape == (1, 64)

    def test_duplicate_rows_equal_weight_split(self):
        rng = make_rng(63)
        pma = PMA(CFG, rng, "pma", k=1)
        x = rng.standard_normal((3, 64))
        doubled = np.concatenate([x, x], axis=0)
        out = pma(t(x)).data
        out_d = pma(t(doubled)).data
        assert np.max(np.abs(out - out_d)) < 1e-12

    def test_empty_set_rejected(self):
        pma = PMA(CFG, make_rng(64), "pma", k=1)
        with pytest.raises(EmptySetError):
            pma(t(np.zeros((0, 64))))


class TestBatchedLeadingAxes:
    def test_batched_matches_per_set(self):
        rng = make_rng(71)
        sab = SAB(CFG, rng, "sab")
        xs = rng.standard_normal((6, 4, 64))
        batched = sab(t(xs)).data
        for i in range(6):
            single = sab(t(xs[i])).data
            assert np.allclose(batched[i], single, atol=1e-12)

    def test_mab_gradients_flow(self):
        rng = make_rng(72)
        mab = MAB(CFG, rng, "mab")
        x = t(rng.standard_normal((2, 3, 64)))
        loss = T.tsum(mab(x, x))
        T.backward(loss)
        assert all(np.any(p.grad != 0) for p in mab.params())
