import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from undial_lab import tensor as T
from undial_lab.errors import InvalidArgumentError, ShapeError
from undial_lab.gradcheck import gradcheck
from undial_lab.model import LmConfig, OptimizerState, TinyLM, adamw_update, train_step
from undial_lab.objectives import (Method, RetainReg, TeacherSnapshot, UnlearnSpec, adjust_logits,
                                   adjusted_distribution, fundial_loss, ga_objective, kl_regularizer,
                                   make_objective, nll_loss, npo_loss, retain_regularizer, undial_loss)
from undial_lab.tensor import GradTape, Tensor, backward


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestAdjustLogits:
    def test_single_index(self):
        np.testing.assert_array_equal(adjust_logits([2.0, 1.0, 0.0], 0, 2.0), [0.0, 1.0, 0.0])

    def test_zero_gamma_identity(self):
        row = np.array([0.3, -1.2, 4.0])
        np.testing.assert_array_equal(adjust_logits(row, 1, 0.0), row)

    def test_input_not_mutated(self):
        row = np.array([1.0, 2.0])
        adjust_logits(row, 1, 5.0)
        np.testing.assert_array_equal(row, [1.0, 2.0])

    def test_softmax_anchor(self):
        # oracle: exp(-1) / (exp(-1) + 2 e) = 0.063379 (mpmath)
        p = T.softmax(adjust_logits(np.array([3.0, 1.0, 1.0]), 0, 4.0)).data
        np.testing.assert_allclose(p, [0.0633789, 0.4683106, 0.4683106], atol=1e-6)

    @pytest.mark.parametrize("tid", [-1, 3])
    def test_out_of_range(self, tid):
        with pytest.raises(InvalidArgumentError):
            adjust_logits([0.0, 0.0, 0.0], tid, 1.0)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.data())
    def test_monotone_de_emphasis(self, row, data):
        row = np.array(row)
        t = data.draw(st.integers(0, len(row) - 1))
        g1 = data.draw(st.floats(0, 10))
        g2 = g1 + data.draw(st.floats(0.1, 5))
        p1 = adjusted_distribution(row[None], np.array([t]), g1)[0]
        p2 = adjusted_distribution(row[None], np.array([t]), g2)[0]
        assert p2[t] < p1[t]
        others = np.arange(len(row)) != t
        assert np.all(p2[others] > p1[others])

    def test_argmax_flip(self):
        row = np.array([5.0, 3.5, 1.0, 0.0])
        assert np.argmax(adjust_logits(row, 0, 1.0)) == 0
        assert np.argmax(adjust_logits(row, 0, 1.6)) == 1


class TestUndialLoss:
    def test_closed_form_two_tokens(self):
        # teacher row [1, 0], target 0, gamma 1 -> p_adj = [0.5, 0.5]; student [0, 0] -> ln 2
        teacher = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        student = t64([[[0.0, 0.0], [9.0, -9.0]]])
        loss = undial_loss(student, teacher, np.array([[1, 0]]), 1.0)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_entropy_at_equality(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(2, 5, 7))
        targets = rng.integers(0, 7, size=(2, 5))
        loss = undial_loss(t64(z), z, targets, 0.0).item()
        p = T.softmax(z[:, :-1]).data
        assert loss == pytest.approx(float(-(p * np.log(p)).sum(-1).mean()), rel=1e-10)

    def test_causal_shift(self):
        # position t is scored against token t+1, the last logit row is unused
        rng = np.random.default_rng(1)
        z = rng.normal(size=(1, 4, 5))
        tg = np.array([[0, 1, 2, 3]])
        a = undial_loss(t64(z), z, tg, 3.0).item()
        z2 = z.copy()
        z2[0, -1] += 100.0
        assert undial_loss(t64(z2), z2, tg, 3.0).item() == pytest.approx(a, abs=1e-12)
        tg2 = tg.copy()
        tg2[0, 0] = 4
        assert undial_loss(t64(z), z, tg2, 3.0).item() == pytest.approx(a, abs=1e-12)

    def test_shape_errors(self):
        z = np.zeros((1, 3, 4))
        with pytest.raises(ShapeError):
            undial_loss(t64(z), np.zeros((1, 3, 5)), np.zeros((1, 3), int), 1.0)
        with pytest.raises(ShapeError):
            undial_loss(t64(z), z, np.zeros((1, 2), int), 1.0)
        with pytest.raises(ShapeError):
            undial_loss(t64(z), z, np.zeros((1, 3), int), 1.0, key_mask=np.ones((1, 2)))

    def test_mask_all_zero(self):
        rng = np.random.default_rng(2)
        z = t64(rng.normal(size=(2, 4, 5)), grad=True)
        with GradTape() as tape:
            loss = fundial_loss(z, rng.normal(size=(2, 4, 5)), rng.integers(0, 5, (2, 4)), 10.0,
                                np.zeros((2, 4)))
        backward(tape, loss)
        assert loss.item() == 0.0
        assert not np.any(z.grad)

    def test_masked_positions_get_no_gradient(self):
        rng = np.random.default_rng(3)
        zt = rng.normal(size=(2, 6, 5))
        tg = rng.integers(0, 5, (2, 6))
        mask = rng.random((2, 6)) < 0.5
        mask[0, 1] = True
        z = t64(rng.normal(size=(2, 6, 5)), grad=True)
        with GradTape() as tape:
            loss = fundial_loss(z, zt, tg, 10.0, mask)
        backward(tape, loss)
        # row t feeds target t+1, so gradient is zero wherever mask[t+1] is false
        dead = ~mask[:, 1:]
        assert np.all(z.grad[:, :-1][dead] == 0.0)
        assert np.all(z.grad[:, -1] == 0.0)
        assert np.any(z.grad[:, :-1][~dead] != 0.0)

    def test_all_ones_mask_bit_identical(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 8, 11)).astype(np.float32)
        zt = rng.normal(size=(3, 8, 11)).astype(np.float32)
        tg = rng.integers(0, 11, (3, 8))
        a, b = Tensor(z, requires_grad=True), Tensor(z.copy(), requires_grad=True)
        with GradTape() as t1:
            la = undial_loss(a, zt, tg, 10.0)
        with GradTape() as t2:
            lb = fundial_loss(b, zt, tg, 10.0, np.ones((3, 8), bool))
        backward(t1, la)
        backward(t2, lb)
        assert la.item() == lb.item()
        assert np.array_equal(a.grad, b.grad)

    def test_weighted_mean_over_masked_positions(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(1, 5, 4))
        zt = rng.normal(size=(1, 5, 4))
        tg = rng.integers(0, 4, (1, 5))
        mask = np.array([[False, True, False, True, False]])
        p = adjusted_distribution(zt[:, :-1], tg[:, 1:], 2.0)
        ce = -(p * T.log_softmax(z[:, :-1]).data).sum(-1)
        expected = (ce * mask[:, 1:]).sum() / mask[:, 1:].sum()
        assert fundial_loss(t64(z), zt, tg, 2.0, mask).item() == pytest.approx(expected, rel=1e-10)

    def test_finite_at_large_logits(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            z = rng.uniform(-50, 50, size=(2, 4, 6)).astype(np.float32)
            zt = rng.uniform(-50, 50, size=(2, 4, 6)).astype(np.float32)
            tg = rng.integers(0, 6, (2, 4))
            for loss in (undial_loss(Tensor(z), zt, tg, 10.0), ga_objective(Tensor(z), tg),
                         npo_loss(Tensor(z), zt, tg), kl_regularizer(Tensor(z), zt),
                         nll_loss(Tensor(z), tg)):
                assert math.isfinite(loss.item())


def free_logit_fixed_point(steps=500, seed=0):
    """Adam on a bare logit table (started at the teacher) under undial_loss.

    Returns the per-position KL(p_adjusted || p_student) after ``steps`` updates.
    """
    rng = np.random.default_rng(seed)
    teacher = rng.normal(size=(4, 9, 16)) * 3
    targets = rng.integers(0, 16, (4, 9))
    z = Tensor(teacher.copy(), requires_grad=True, dtype=np.float64)
    # a short second-moment memory keeps steps large while gradients shrink
    opt = OptimizerState(lr=0.1, beta2=0.9)
    for _ in range(steps):
        with GradTape() as tape:
            loss = undial_loss(z, teacher, targets, 10.0)
        backward(tape, loss)
        adamw_update({"z": z}, opt)
    p_adj = adjusted_distribution(teacher[:, :-1], targets[:, 1:], 10.0)
    return T.kl_rows(np.log(p_adj), T.log_softmax(z.data[:, :-1]).data)


@pytest.mark.parametrize("seed", range(5))
def test_distillation_fixed_point(seed):
    assert free_logit_fixed_point(seed=seed).max() <= 1e-4


class TestBaselines:
    def test_ga_perfect_model(self):
        z = np.full((1, 3, 2), -30.0)
        tg = np.array([[0, 1, 0]])
        z[0, 0, 1] = z[0, 1, 0] = 30.0
        assert ga_objective(t64(z), tg).item() == pytest.approx(0.0, abs=1e-12)

    def test_ga_uniform(self):
        assert ga_objective(t64(np.zeros((2, 4, 7))), np.zeros((2, 4), int)).item() == pytest.approx(-math.log(7))

    def test_ga_closed_form(self):
        # V=2, p(target) = 0.25 -> objective = ln 0.25
        z = np.array([[[0.0, math.log(3)], [0.0, 0.0]]])
        assert ga_objective(t64(z), np.array([[1, 0]])).item() == pytest.approx(-1.3862944, abs=1e-6)

    def test_npo_at_equality(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(2, 5, 6))
        loss = npo_loss(t64(z), z, rng.integers(0, 6, (2, 5)), 0.1).item()
        assert loss == pytest.approx(20 * math.log(2), abs=1e-9)
        assert loss == pytest.approx(13.8629, abs=1e-3)

    def test_npo_limit(self):
        z_ref = np.zeros((1, 2, 3))
        z = np.zeros((1, 2, 3))
        z[0, 0, 1] = -200.0
        assert npo_loss(t64(z), z_ref, np.array([[0, 1]]), 0.1).item() < 1e-6

    @settings(max_examples=50)
    @given(st.floats(-20, 20), st.floats(0.01, 5))
    def test_npo_positive(self, shift, beta):
        z_ref = np.zeros((1, 2, 3))
        z = z_ref.copy()
        z[0, 0, 1] = shift
        assert npo_loss(t64(z), z_ref, np.array([[0, 1]]), beta).item() > 0

    def test_npo_beta_must_be_positive(self):
        z = np.zeros((1, 2, 3))
        with pytest.raises(InvalidArgumentError):
            npo_loss(t64(z), z, np.zeros((1, 2), int), 0.0)

    def test_klr_zero_at_equality(self):
        z = np.random.default_rng(0).normal(size=(2, 3, 4))
        assert retain_regularizer(t64(z), z, None, "klr").item() == pytest.approx(0.0, abs=1e-12)

    def test_klr_anchor(self):
        # oracle (mpmath): KL([s, 1-s] || [0.5, 0.5]) with s = sigmoid(1) is 0.1109441
        ref = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        out = retain_regularizer(t64(np.zeros((1, 2, 2))), ref, None, RetainReg.KLR).item()
        assert out == pytest.approx(0.11094407, abs=1e-7)

    def test_gdr_perfect(self):
        z = np.full((1, 2, 2), -40.0)
        z[0, 0, 1] = 40.0
        assert retain_regularizer(t64(z), None, np.array([[0, 1]]), "gdr").item() == pytest.approx(0, abs=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(InvalidArgumentError):
            retain_regularizer(t64(np.zeros((1, 2, 2))), None, np.zeros((1, 2), int), "l2")


def _loss_fns():
    rng = np.random.default_rng(11)
    zt = rng.normal(size=(2, 4, 5))
    tg = rng.integers(0, 5, (2, 4))
    mask = rng.random((2, 4)) < 0.6
    return {
        "undial": lambda z: undial_loss(z, zt, tg, 3.0),
        "fundial": lambda z: fundial_loss(z, zt, tg, 3.0, mask),
        "ga": lambda z: ga_objective(z, tg),
        "npo": lambda z: npo_loss(z, zt, tg, 0.1),
        "gdr": lambda z: retain_regularizer(z, zt, tg, "gdr"),
        "klr": lambda z: retain_regularizer(z, zt, tg, "klr"),
    }


@pytest.mark.parametrize("name", sorted(_loss_fns()))
def test_loss_gradients(name):
    fn = _loss_fns()[name]
    rng = np.random.default_rng(7)
    worst = max(gradcheck(fn, [rng.uniform(-2, 2, size=(2, 4, 5))]) for _ in range(100))
    assert worst <= 1e-3


class TestSpec:
    def test_invariants(self):
        with pytest.raises(InvalidArgumentError):
            UnlearnSpec(strength=0)
        with pytest.raises(InvalidArgumentError):
            UnlearnSpec(steps=0)
        with pytest.raises(InvalidArgumentError):
            UnlearnSpec(method="sgd")

    def test_string_coercion(self):
        spec = UnlearnSpec(method="FUNDIAL", retain_reg="klr")
        assert spec.method is Method.FUNDIAL and spec.retain_reg is RetainReg.KLR
        assert UnlearnSpec(**spec.to_dict()) == spec


def test_teacher_snapshot_is_frozen():
    cfg = LmConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, context_len=8)
    model = TinyLM(cfg)
    teacher = TeacherSnapshot(model)
    toks = np.random.default_rng(0).integers(0, 16, (4, 8))
    before = teacher.logits(toks).copy()
    spec = UnlearnSpec(method="undial", retain_reg="klr")
    obj = make_objective(spec, teacher)
    opt = OptimizerState.for_model(model, lr=1e-2)
    for _ in range(3):
        train_step(model, opt, {"tokens": toks, "key_mask": np.ones_like(toks, bool),
                                "retain_tokens": toks}, obj)
    assert np.array_equal(teacher.logits(toks), before)
    assert not np.array_equal(model.logits(toks), before)
