"""Attention blocks: masking, permutation symmetry, gradients."""

import numpy as np
import pytest

import dac.tensor as T
from dac.blocks import ISAB, MAB, PMA, ISABStack, MultiheadAttention, SetBatch
from dac.errors import ContractError
from dac.gradcheck import check_gradients
from dac.tensor import Tape, Tensor


D, HEADS, M_IND = 16, 4, 4


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def random_set(rng, b=2, n=7, d=D, mask=None):
    return SetBatch(Tensor(rng.normal(size=(b, n, d))), mask)


def permuted(x: SetBatch, perm):
    vals = x.values.data[:, perm, :]
    mask = None if x.mask is None else x.mask[:, perm]
    return SetBatch(Tensor(vals), mask)


class TestMha:
    def test_single_live_key_weight_is_one(self, rng):
        mha = MultiheadAttention(D, HEADS, rng)
        q = random_set(rng, b=1, n=3)
        kv_vals = rng.normal(size=(1, 5, D))
        mask = np.zeros((1, 5), dtype=bool)
        mask[0, 2] = True
        out = mha(q, SetBatch(Tensor(kv_vals), mask)).values.data
        # with one live key the attention mix is exactly that key's value row
        v = T.linear(Tensor(kv_vals[:, 2:3, :]), mha.wv.w, mha.wv.b)
        expected = T.linear(v, mha.wo.w, mha.wo.b).data
        np.testing.assert_allclose(out, np.repeat(expected, 3, axis=1), rtol=1e-5, atol=1e-6)

    def test_key_permutation_invariance(self, rng):
        mha = MultiheadAttention(D, HEADS, rng)
        q = random_set(rng, b=2, n=4)
        kv = random_set(rng, b=2, n=9)
        perm = rng.permutation(9)
        a = mha(q, kv).values.data
        b = mha(q, permuted(kv, perm)).values.data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_masked_key_equals_deleted_key(self, rng):
        with T.use_dtype(np.float64):
            mha = MultiheadAttention(D, HEADS, rng)
            q = random_set(rng, b=1, n=4)
            kv_vals = rng.normal(size=(1, 6, D))
            mask = np.array([[True, True, False, True, False, True]])
            masked = mha(q, SetBatch(Tensor(kv_vals), mask)).values.data
            deleted = mha(q, SetBatch(Tensor(kv_vals[:, mask[0]]), None)).values.data
            np.testing.assert_allclose(masked, deleted, atol=1e-6)

    def test_all_keys_masked_rejected(self, rng):
        mha = MultiheadAttention(D, HEADS, rng)
        q = random_set(rng, b=1, n=2)
        kv = random_set(rng, b=1, n=3, mask=np.zeros((1, 3), dtype=bool))
        with pytest.raises(ContractError):
            mha(q, kv)

    def test_width_not_divisible_by_heads(self, rng):
        with pytest.raises(ContractError):
            MultiheadAttention(10, 4, rng)


class TestMab:
    def test_query_permutation_equivariance(self, rng):
        mab = MAB(D, HEADS, rng)
        x = random_set(rng, b=2, n=6)
        y = random_set(rng, b=2, n=5)
        perm = rng.permutation(6)
        a = mab(x, y).values.data[:, perm, :]
        b = mab(permuted(x, perm), y).values.data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_key_permutation_invariance(self, rng):
        mab = MAB(D, HEADS, rng)
        x = random_set(rng, b=2, n=6)
        y = random_set(rng, b=2, n=5)
        perm = rng.permutation(5)
        np.testing.assert_allclose(mab(x, y).values.data,
                                   mab(x, permuted(y, perm)).values.data, atol=1e-5)

    def test_zeroed_ff_and_output_projection_is_identity(self, rng):
        mab = MAB(D, HEADS, rng)
        mab.mha.wo.w.data[:] = 0.0
        mab.mha.wo.b.data[:] = 0.0
        for ff in (mab.ff_inner, mab.ff_outer):
            ff.fc2.w.data[:] = 0.0
            ff.fc2.b.data[:] = 0.0
        x = random_set(rng, b=2, n=6)
        y = random_set(rng, b=2, n=5)
        np.testing.assert_allclose(mab(x, y).values.data, x.values.data, atol=1e-6)

    def test_gradients_match_finite_differences(self, rng):
        with T.use_dtype(np.float64):
            mab = MAB(8, 2, rng)
            params = [p for _, p in mab.named_params("mab")]
            x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
            y = Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)

            def f():
                out = mab(SetBatch(x), SetBatch(y))
                return T.tsum(T.square(out.values))

            check_gradients(f, params + [x, y])


class TestIsab:
    def test_permutation_equivariance(self, rng):
        stack = ISABStack(2, D, HEADS, M_IND, rng)
        x = random_set(rng, b=2, n=8)
        perm = rng.permutation(8)
        a = stack(x).values.data[:, perm, :]
        b = stack(permuted(x, perm)).values.data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_output_shape_matches_input(self, rng):
        stack = ISABStack(1, D, HEADS, M_IND, rng)
        x = random_set(rng, b=3, n=5)
        assert stack(x).values.shape == (3, 5, D)

    def test_masked_rows_do_not_influence_live_rows(self, rng):
        isab = ISAB(D, HEADS, M_IND, rng)
        vals = rng.normal(size=(1, 6, D))
        mask = np.array([[True, True, True, False, False, True]])
        out1 = isab(SetBatch(Tensor(vals), mask)).values.data[0, mask[0]]
        vals2 = vals.copy()
        vals2[0, ~mask[0]] = rng.normal(size=(2, D)) * 50
        out2 = isab(SetBatch(Tensor(vals2), mask)).values.data[0, mask[0]]
        np.testing.assert_allclose(out1, out2, atol=1e-5)

    def test_mask_equals_physical_deletion(self, rng):
        with T.use_dtype(np.float64):
            isab = ISAB(D, HEADS, M_IND, rng)
            vals = rng.normal(size=(1, 7, D))
            mask = np.array([[True, False, True, True, False, True, True]])
            masked = isab(SetBatch(Tensor(vals), mask)).values.data[0, mask[0]]
            deleted = isab(SetBatch(Tensor(vals[:, mask[0]]), None)).values.data[0]
            np.testing.assert_allclose(masked, deleted, atol=1e-6)

    def test_gradients(self, rng):
        with T.use_dtype(np.float64):
            isab = ISAB(8, 2, 3, rng)
            params = [p for _, p in isab.named_params("isab")]
            x = Tensor(rng.normal(size=(1, 5, 8)), requires_grad=True)
            check_gradients(lambda: T.tsum(T.square(isab(SetBatch(x)).values)), params + [x])


class TestPma:
    def test_permutation_invariance(self, rng):
        pma = PMA(D, HEADS, 1, rng)
        x = random_set(rng, b=2, n=9)
        perm = rng.permutation(9)
        np.testing.assert_allclose(pma(x).data, pma(permuted(x, perm)).data, atol=1e-5)

    def test_singleton_set_is_deterministic_function_of_point(self, rng):
        pma = PMA(D, HEADS, 2, rng)
        x = random_set(rng, b=1, n=1)
        a = pma(x).data
        b = pma(SetBatch(Tensor(x.values.data.copy()))).data
        assert a.shape == (1, 2, D)
        np.testing.assert_array_equal(a, b)

    def test_duplicating_every_point_leaves_pool_unchanged(self, rng):
        pma = PMA(D, HEADS, 1, rng)
        vals = rng.normal(size=(2, 6, D))
        doubled = np.concatenate([vals, vals], axis=1)
        a = pma(SetBatch(Tensor(vals))).data
        b = pma(SetBatch(Tensor(doubled))).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_no_live_points_rejected(self, rng):
        pma = PMA(D, HEADS, 1, rng)
        x = random_set(rng, b=1, n=4, mask=np.zeros((1, 4), dtype=bool))
        with pytest.raises(ContractError):
            pma(x)

    def test_gradients(self, rng):
        with T.use_dtype(np.float64):
            pma = PMA(8, 2, 1, rng)
            params = [p for _, p in pma.named_params("pma")]
            x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
            check_gradients(lambda: T.tsum(T.square(pma(SetBatch(x)))), params + [x])


def test_forward_passes_need_no_tape(rng):
    stack = ISABStack(1, D, HEADS, M_IND, rng)
    x = random_set(rng)
    out = stack(x)
    assert out.values.requires_grad is False


def test_parameters_have_unique_names(rng):
    stack = ISABStack(2, D, HEADS, M_IND, rng)
    names = [n for n, _ in stack.named_params("enc")]
    assert len(names) == len(set(names))
