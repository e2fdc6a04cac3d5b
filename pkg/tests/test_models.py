"""Model-core behavior: init scheme, forward, gradients, SGD, masks."""

import math

import numpy as np
import pytest

from fedsim.models import (
    AdapterComposite,
    Batch,
    Logistic,
    Mlp,
    ModelError,
    SoftPrompt,
    finite_diff_grad,
    forward,
    init_params,
    layout_for,
    loss_and_grad,
    predict,
    sgd_epoch,
    trainable_mask,
    validate_spec,
)
from fedsim.params import ParameterVector

from conftest import rel_error


def random_batch(spec, rng, rows=6):
    from fedsim.models import feature_dim, num_classes
    X = rng.normal(size=(rows, feature_dim(spec)))
    y = rng.integers(0, num_classes(spec), rows)
    return Batch(X, y)


class TestSpecValidation:
    def test_rejects_bad_dimensions(self):
        with pytest.raises(ModelError):
            validate_spec(Logistic(d=0, classes=2))
        with pytest.raises(ModelError):
            validate_spec(Logistic(d=3, classes=1))
        with pytest.raises(ModelError):
            validate_spec(Mlp(d=3, hidden=0, classes=2))
        with pytest.raises(ModelError):
            validate_spec(SoftPrompt(inner=Logistic(d=2, classes=2), prompt_len=2))

    def test_rejects_nested_composites(self):
        adapter = AdapterComposite(backbone=Logistic(d=3, classes=2), head_classes=2)
        with pytest.raises(ModelError):
            validate_spec(AdapterComposite(backbone=adapter, head_classes=2))
        with pytest.raises(ModelError):
            validate_spec(SoftPrompt(inner=adapter, prompt_len=1))


class TestInitParams:
    def test_deterministic_in_seed(self):
        spec = Logistic(d=2, classes=2)
        assert init_params(spec, 7).allequal(init_params(spec, 7))
        assert not init_params(spec, 7).allequal(init_params(spec, 8))

    @pytest.mark.parametrize("spec", [
        Logistic(d=3, classes=4),
        Mlp(d=4, hidden=3, classes=2),
        AdapterComposite(backbone=Mlp(d=4, hidden=3, classes=2), head_classes=2),
        SoftPrompt(inner=Logistic(d=5, classes=3), prompt_len=2),
    ])
    def test_biases_and_prompt_exactly_zero(self, spec):
        params = init_params(spec, 3)
        for seg in params.layout.segments:
            if len(seg.shape) == 1:
                assert np.all(params.segment(seg.name) == 0.0)

    def test_weights_within_glorot_bound(self):
        spec = Mlp(d=4, hidden=3, classes=2)
        params = init_params(spec, 1)
        for name, (fan_out, fan_in) in [("W1", (3, 4)), ("W2", (2, 3))]:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            seg = params.segment(name)
            assert np.all(np.abs(seg) <= bound)
            assert np.any(seg != 0.0)


class TestForward:
    def test_zero_params_zero_scores(self):
        spec = Logistic(d=3, classes=4)
        params = ParameterVector(np.zeros(layout_for(spec).size), layout_for(spec))
        assert np.all(forward(spec, params, np.array([1.0, -2.0, 3.0])) == 0.0)

    def test_direct_linear_map(self):
        spec = Logistic(d=1, classes=2)
        params = ParameterVector(np.array([1.0, -1.0, 0.0, 0.0]), layout_for(spec))
        out = forward(spec, params, np.array([2.0]))
        assert out.tolist() == [2.0, -2.0]

    def test_mlp_matches_hand_written_evaluation(self):
        # independent oracle: explicit scalar loops, no shared code
        spec = Mlp(d=2, hidden=2, classes=2)
        rng = np.random.default_rng(9)
        params = init_params(spec, 4)
        for _ in range(20):
            x = rng.normal(size=2)
            W1 = params.segment("W1"); b1 = params.segment("b1")
            W2 = params.segment("W2"); b2 = params.segment("b2")
            hidden = []
            for i in range(2):
                acc = b1[i]
                for j in range(2):
                    acc += W1[i, j] * x[j]
                hidden.append(max(acc, 0.0))
            expected = []
            for c in range(2):
                acc = b2[c]
                for i in range(2):
                    acc += W2[c, i] * hidden[i]
                expected.append(acc)
            got = forward(spec, params, x)
            assert np.allclose(got, expected, rtol=1e-12, atol=1e-12)

    def test_dimension_mismatch_reports_dimensions(self):
        spec = Logistic(d=3, classes=2)
        params = init_params(spec, 0)
        with pytest.raises(ModelError, match="width 3"):
            forward(spec, params, np.array([1.0, 2.0]))


class TestPredict:
    def test_argmax_and_tie_break(self):
        spec = Logistic(d=1, classes=2)
        params = ParameterVector(np.array([1.0, -1.0, 0.0, 0.0]), layout_for(spec))
        assert predict(spec, params, np.array([2.0])) == 0
        zero = ParameterVector(np.zeros(4), layout_for(spec))
        assert predict(spec, zero, np.array([5.0])) == 0

    def test_matches_forward_argmax_oracle(self):
        spec = Mlp(d=3, hidden=4, classes=3)
        rng = np.random.default_rng(2)
        params = init_params(spec, 2)
        for _ in range(100):
            x = rng.normal(size=3)
            assert predict(spec, params, x) == int(np.argmax(forward(spec, params, x)))


class TestLossAndGrad:
    def test_uniform_softmax_loss_is_ln2(self):
        spec = Logistic(d=3, classes=2)
        params = ParameterVector(np.zeros(layout_for(spec).size), layout_for(spec))
        batch = Batch(np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]), np.array([0, 1]))
        loss, _ = loss_and_grad(spec, params, batch)
        assert loss == math.log(2.0)

    def test_loss_equals_ln_classes_at_zero_params(self):
        for classes in (2, 3, 5):
            spec = Logistic(d=2, classes=classes)
            params = ParameterVector(np.zeros(layout_for(spec).size), layout_for(spec))
            batch = Batch(np.random.default_rng(0).normal(size=(7, 2)),
                          np.arange(7) % classes)
            loss, _ = loss_and_grad(spec, params, batch)
            assert loss == pytest.approx(math.log(classes), rel=1e-15)

    def test_adapter_backbone_grads_exactly_zero(self):
        spec = AdapterComposite(backbone=Mlp(d=3, hidden=4, classes=3), head_classes=3)
        params = init_params(spec, 5)
        batch = random_batch(spec, np.random.default_rng(1))
        _, grad = loss_and_grad(spec, params, batch)
        for name in ("backbone.W1", "backbone.b1", "backbone.W2", "backbone.b2"):
            assert np.all(grad.segment(name) == 0.0)

    def test_soft_prompt_only_prompt_nonzero(self):
        spec = SoftPrompt(inner=Mlp(d=6, hidden=3, classes=2), prompt_len=2)
        params = init_params(spec, 6)
        batch = random_batch(spec, np.random.default_rng(2))
        _, grad = loss_and_grad(spec, params, batch)
        mask = trainable_mask(spec)
        assert np.all(grad.values[~mask] == 0.0)
        assert np.any(grad.segment("prompt") != 0.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(ModelError):
            Batch(np.empty((0, 2)), np.empty(0, dtype=int))

    @pytest.mark.parametrize("spec,tol", [
        (Logistic(d=5, classes=3), 1e-6),
        (Mlp(d=4, hidden=3, classes=3), 1e-5),
        (AdapterComposite(backbone=Mlp(d=4, hidden=3, classes=3), head_classes=3), 1e-5),
        (SoftPrompt(inner=Logistic(d=6, classes=3), prompt_len=2), 1e-5),
        (SoftPrompt(inner=Mlp(d=6, hidden=4, classes=3), prompt_len=2), 1e-5),
    ])
    def test_gradient_matches_finite_differences(self, spec, tol):
        import zlib
        rng = np.random.default_rng(zlib.crc32(repr(spec).encode()))
        for trial in range(25):
            params = init_params(spec, trial)
            params = params.with_values(
                params.values + 0.05 * rng.normal(size=len(params))
            )
            batch = random_batch(spec, rng, rows=int(rng.integers(1, 9)))
            _, grad = loss_and_grad(spec, params, batch)
            fd = finite_diff_grad(spec, params, batch, h=1e-6)
            assert rel_error(grad.values, fd.values) < tol


class TestLossPositivity:
    def test_loss_non_negative_over_random_draws(self):
        rng = np.random.default_rng(8)
        spec = Mlp(d=4, hidden=3, classes=3)
        for trial in range(50):
            params = init_params(spec, trial)
            params = params.with_values(
                params.values + rng.normal(size=len(params))
            )
            batch = random_batch(spec, rng, rows=int(rng.integers(1, 12)))
            loss, _ = loss_and_grad(spec, params, batch)
            assert loss >= 0.0


class TestSgdEpoch:
    def test_single_example_single_step_matches_oracle(self):
        spec = Logistic(d=3, classes=2)
        params = init_params(spec, 1)
        batch = Batch(np.array([[0.5, -1.0, 2.0]]), np.array([1]))
        lr = 0.37
        stepped = sgd_epoch(spec, params, batch, lr, batch_size=1, seed=0)
        _, grad = loss_and_grad(spec, params, batch)
        expected = params.values - lr * grad.values
        assert np.array_equal(stepped.values, expected)

    def test_deterministic_in_seed(self, blobs3):
        spec = Logistic(d=6, classes=3)
        params = init_params(spec, 2)
        data = blobs3.full_shard().batch()
        a = sgd_epoch(spec, params, data, 0.1, 16, seed=13)
        b = sgd_epoch(spec, params, data, 0.1, 16, seed=13)
        assert a.allequal(b)
        c = sgd_epoch(spec, params, data, 0.1, 16, seed=14)
        assert not a.allequal(c)

    def test_converges_on_separable_pair(self):
        spec = Logistic(d=2, classes=2)
        params = init_params(spec, 0)
        batch = Batch(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]))
        w = params
        for epoch in range(500):
            w = sgd_epoch(spec, w, batch, lr=0.5, batch_size=2, seed=epoch)
        hits = sum(
            predict(spec, w, batch.features[i]) == batch.labels[i] for i in range(2)
        )
        assert hits == 2

    @pytest.mark.parametrize("spec", [
        AdapterComposite(backbone=Mlp(d=6, hidden=4, classes=3), head_classes=3),
        SoftPrompt(inner=Logistic(d=8, classes=3), prompt_len=2),
    ])
    def test_frozen_segments_bit_identical_after_epochs(self, spec, blobs3):
        params = init_params(spec, 3)
        data = blobs3.full_shard().batch()
        w = params
        for epoch in range(4):
            w = sgd_epoch(spec, w, data, 0.2, 8, seed=epoch)
        mask = trainable_mask(spec)
        assert np.array_equal(w.values[~mask], params.values[~mask])
        assert np.any(w.values[mask] != params.values[mask])

    def test_rejects_bad_arguments(self, blobs3):
        spec = Logistic(d=6, classes=3)
        params = init_params(spec, 0)
        data = blobs3.full_shard().batch()
        with pytest.raises(ModelError):
            sgd_epoch(spec, params, data, lr=0.0, batch_size=4, seed=0)
        with pytest.raises(ModelError):
            sgd_epoch(spec, params, data, lr=0.1, batch_size=0, seed=0)


class TestFiniteDiff:
    def test_matches_analytic_at_zero_params(self):
        spec = Logistic(d=2, classes=2)
        params = ParameterVector(np.zeros(layout_for(spec).size), layout_for(spec))
        batch = Batch(np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0, 1]))
        fd = finite_diff_grad(spec, params, batch, h=1e-6)
        _, grad = loss_and_grad(spec, params, batch)
        assert np.max(np.abs(fd.values - grad.values)) < 1e-8

    def test_slope_of_locally_linear_coordinate(self):
        # At zero params with one example, dloss/db_c = p_c - 1[c == y],
        # and the loss is smooth, so the central difference recovers the
        # slope to O(h^2).
        spec = Logistic(d=1, classes=2)
        params = ParameterVector(np.zeros(4), layout_for(spec))
        batch = Batch(np.array([[0.0]]), np.array([0]))
        fd = finite_diff_grad(spec, params, batch, h=1e-5)
        assert fd.segment("b")[0] == pytest.approx(-0.5, abs=1e-9)
        assert fd.segment("b")[1] == pytest.approx(0.5, abs=1e-9)

    def test_non_trainable_coordinates_exactly_zero(self):
        spec = AdapterComposite(backbone=Logistic(d=3, classes=2), head_classes=2)
        params = init_params(spec, 1)
        batch = random_batch(spec, np.random.default_rng(3))
        fd = finite_diff_grad(spec, params, batch, h=1e-6)
        assert np.all(fd.segment("backbone.W") == 0.0)
        assert np.all(fd.segment("backbone.b") == 0.0)
