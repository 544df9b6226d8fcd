import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from undial_lab.aux_unlearn import (AuxMethod, AuxSpec, DecodeTimeModel, build_aux_model,
                                    contrastive_decode_probs, dp_decode_probs,
                                    task_arithmetic_merge, train_memo_model)
from undial_lab.errors import IncompatibleCheckpointError, InvalidArgumentError, ShapeError
from undial_lab.metrics import memorization_accuracy_batch
from undial_lab.model import LmConfig, TinyLM
from undial_lab.objectives import nll_loss
from undial_lab.tensor import _softmax_np

SMALL = LmConfig(vocab_size=20, d_model=16, n_layers=1, n_heads=2, context_len=12)
logit_rows = arrays(np.float64, st.integers(2, 30), elements=st.floats(-20, 20))


class TestSpec:
    def test_parse_method(self):
        assert AuxSpec(method="DP", coeff=0.3).method is AuxMethod.DP

    @pytest.mark.parametrize("kw", [{"method": "nope"}, {"method": "dp", "coeff": 1.5},
                                    {"method": "ta", "coeff": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            AuxSpec(**kw)

    def test_needs_memo(self):
        assert not AuxSpec(method="dp").needs_memo
        assert AuxSpec(method="cd_plain").needs_memo


class TestDP:
    def test_anchor(self):
        np.testing.assert_allclose(dp_decode_probs([2.0, 0.0], 0.5), [0.6904, 0.3096], atol=1e-4)

    @given(logit_rows)
    def test_lambda_endpoints(self, z):
        np.testing.assert_array_equal(dp_decode_probs(z, 0.0), _softmax_np(z))
        u = dp_decode_probs(z, 1.0)
        assert np.all(u == 1.0 / len(z))

    @given(logit_rows, st.floats(0, 1))
    def test_floor_and_normalised(self, z, lam):
        p = dp_decode_probs(z, lam)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= lam / len(z) * (1 - 1e-12))

    @given(logit_rows, st.floats(0, 1))
    def test_literal_is_temperature(self, z, lam):
        # adding a constant before softmax is a no-op, so only the scale survives
        np.testing.assert_allclose(dp_decode_probs(z, lam, "literal"), _softmax_np((1 - lam) * z),
                                   rtol=1e-9, atol=1e-15)

    def test_bad_args(self):
        with pytest.raises(InvalidArgumentError):
            dp_decode_probs([1.0, 2.0], 1.1)
        with pytest.raises(InvalidArgumentError):
            dp_decode_probs([1.0, 2.0], 0.5, "other")


class TestCD:
    @given(logit_rows, logit_rows)
    def test_alpha_zero(self, z, zm):
        zm = np.resize(zm, z.shape)
        for form in ("plain", "relu"):
            np.testing.assert_array_equal(contrastive_decode_probs(z, zm, 0.0, form), _softmax_np(z))

    @given(logit_rows, st.floats(0, 10))
    def test_relu_identity_bitwise(self, z, alpha):
        assert np.array_equal(contrastive_decode_probs(z, z, alpha, "relu"), _softmax_np(z))

    @given(logit_rows, st.floats(0, 0.99))
    def test_plain_self_is_rescale(self, z, alpha):
        np.testing.assert_allclose(contrastive_decode_probs(z, z, alpha, "plain"),
                                   _softmax_np((1 - alpha) * z), rtol=1e-9, atol=1e-15)

    @given(logit_rows, st.floats(0.1, 5))
    def test_relu_only_suppresses_memo_favoured(self, z, alpha):
        zm = z.copy()
        zm[0] += 5.0
        p = contrastive_decode_probs(z, zm, alpha, "relu")
        assert p[0] <= _softmax_np(z)[0] + 1e-15

    def test_errors(self):
        with pytest.raises(ShapeError):
            contrastive_decode_probs([1.0, 2.0], [1.0], 1.0)
        with pytest.raises(InvalidArgumentError):
            contrastive_decode_probs([1.0], [1.0], -1.0)
        with pytest.raises(InvalidArgumentError):
            contrastive_decode_probs([1.0], [1.0], 1.0, "bad")


class TestTA:
    def setup_method(self):
        self.base = TinyLM(SMALL)
        self.memo = TinyLM(LmConfig(**{**SMALL.to_dict(), "seed": 1}))

    def test_beta_zero_bit_identical(self):
        for mode in ("raw", "delta"):
            merged = task_arithmetic_merge(self.base, self.memo, 0.0, mode)
            for k, p in merged.params.items():
                assert np.array_equal(p.data, self.base.params[k].data)
                assert p.data is not self.base.params[k].data

    def test_delta_with_identical_memo(self):
        merged = task_arithmetic_merge(self.base, self.base.copy(), 2.5, "delta")
        for k, p in merged.params.items():
            assert np.array_equal(p.data, self.base.params[k].data)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0, 3), st.floats(0, 3))
    def test_linear_in_beta(self, a, b):
        ma = task_arithmetic_merge(self.base, self.memo, a)
        mb = task_arithmetic_merge(self.base, self.memo, b)
        mab = task_arithmetic_merge(self.base, self.memo, a + b)
        for k in ma.params:
            th = self.base.params[k].data.astype(np.float64)
            lhs = mab.params[k].data - th
            rhs = (ma.params[k].data - th) + (mb.params[k].data - th)
            np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_raw_mode(self):
        merged = task_arithmetic_merge(self.base, self.memo, 1.0, "raw")
        k = "head.w"
        np.testing.assert_allclose(merged.params[k].data,
                                   self.base.params[k].data - self.memo.params[k].data, atol=1e-7)

    def test_mismatch(self):
        other = TinyLM(LmConfig(**{**SMALL.to_dict(), "d_model": 8}))
        with pytest.raises(IncompatibleCheckpointError):
            task_arithmetic_merge(self.base, other, 1.0)
        with pytest.raises(InvalidArgumentError):
            task_arithmetic_merge(self.base, self.memo, 1.0, "weird")


class TestMemo:
    def setup_method(self):
        self.base = TinyLM(SMALL)
        self.forget = np.random.default_rng(0).integers(0, 20, (8, 12))

    def test_zero_steps_is_copy(self):
        memo = train_memo_model(self.base, self.forget, 0)
        assert memo.meta["memo"]
        for k, p in memo.params.items():
            assert np.array_equal(p.data, self.base.params[k].data)

    def test_memorises(self):
        losses = []
        memo = train_memo_model(self.base, self.forget, 60, lr=1e-2, log=lambda s, l: losses.append(l))
        assert len(losses) == 60 and losses[-1] < losses[0]
        assert nll_loss(memo.forward(self.forget), self.forget).item() < \
            nll_loss(self.base.forward(self.forget), self.forget).item()
        assert memorization_accuracy_batch(memo, self.forget, stride=1).mean() >= \
            memorization_accuracy_batch(self.base, self.forget, stride=1).mean()

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            train_memo_model(self.base, np.zeros((0, 12), int), 5)


class TestDecodeTimeModel:
    def setup_method(self):
        self.base = TinyLM(SMALL)
        self.memo = TinyLM(LmConfig(**{**SMALL.to_dict(), "seed": 2}))
        self.toks = np.random.default_rng(3).integers(0, 20, (3, 10))

    def test_dp_matches_row_function(self):
        model = DecodeTimeModel(self.base, AuxSpec(method="dp", coeff=0.4))
        got = np.exp(model.logits(self.toks))
        z = self.base.logits(self.toks)
        np.testing.assert_allclose(got[1, 4], dp_decode_probs(z[1, 4], 0.4), rtol=1e-5)

    @pytest.mark.parametrize("method,form", [("cd_plain", "plain"), ("cd_relu", "relu")])
    def test_cd_matches_row_function(self, method, form):
        model = build_aux_model(self.base, AuxSpec(method=method, coeff=0.7), self.memo)
        got = np.exp(model.logits(self.toks))
        z, zm = self.base.logits(self.toks), self.memo.logits(self.toks)
        np.testing.assert_allclose(got[2, 7], contrastive_decode_probs(z[2, 7], zm[2, 7], 0.7, form),
                                   rtol=1e-4)

    def test_forward_shape_and_normalised(self):
        model = DecodeTimeModel(self.base, AuxSpec(method="cd_relu", coeff=1.0), self.memo)
        out = model.forward(self.toks)
        assert out.shape == (3, 10, 20)
        np.testing.assert_allclose(np.exp(out.data).sum(-1), 1.0, rtol=1e-5)

    def test_memo_required(self):
        with pytest.raises(InvalidArgumentError):
            DecodeTimeModel(self.base, AuxSpec(method="cd_plain"))
        with pytest.raises(InvalidArgumentError):
            build_aux_model(self.base, AuxSpec(method="ta"))

    def test_ta_builds_plain_model(self):
        model = build_aux_model(self.base, AuxSpec(method="ta", coeff=0.5), self.memo)
        assert isinstance(model, TinyLM) and model.meta["merged"] == "delta"
