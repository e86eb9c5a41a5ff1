"""Model substrate: shapes, gradients, determinism, persistence."""

import numpy as np
import pytest

from unpoison.data import Dataset
from unpoison.errors import (ConfigurationError, InputError,
                             TrainingDivergedError, UnsupportedOperationError)
from unpoison.models import (REGISTRY, ArchSpec, TrainConfig, activations,
                             batch_activations, cnn_s, evaluate_accuracy,
                             load_checkpoint, logistic, loss_and_grad, mlp1,
                             network_for, predict, save_checkpoint, train,
                             with_predicted_label)


def _registry_archs():
    return [logistic((1, 16, 16), 3), mlp1((1, 16, 16), 3, hidden=10),
            cnn_s((1, 16, 16), 3)]


class TestArchSpec:
    def test_param_count_closed_form(self):
        for arch in _registry_archs():
            assert arch.param_count() == network_for(arch).param_count

    def test_round_trip_dict(self):
        arch = cnn_s((1, 28, 28), 5)
        assert ArchSpec.from_dict(arch.to_dict()) == arch

    def test_dense_requires_flat_input(self):
        with pytest.raises(ConfigurationError):
            network_for(ArchSpec("bad", (1, 16, 16), 3, (("dense", 3),)))

    def test_unknown_tier(self):
        assert set(REGISTRY) == {"logistic", "mlp1", "cnn-s"}


class TestGradients:
    @pytest.mark.parametrize("arch", _registry_archs(), ids=lambda a: a.name)
    def test_finite_difference_check(self, arch):
        """Central differences at 1e-4 agree to 1e-4 relative error."""
        net = network_for(arch)
        g = np.random.default_rng(0)
        x = g.uniform(0, 1, (4,) + arch.input_shape)
        y = g.integers(0, 3, 4)
        params = net.init_params(1)
        _, grad = net.loss_and_grad_sum(params, x, y)
        coords = g.choice(net.param_count, 100, replace=False)
        step = 1e-4
        for c in coords:
            up, down = params.copy(), params.copy()
            up[c] += step
            down[c] -= step
            fd = (net.losses(up, x, y).sum() - net.losses(down, x, y).sum()) / (2 * step)
            assert abs(fd - grad[c]) / max(abs(grad[c]), 1e-8) <= 1e-4

    def test_loss_at_symmetric_point(self):
        """Zero head weights give uniform logits, so loss is ln K."""
        arch = logistic((1, 4, 4), 3)
        net = network_for(arch)
        params = np.zeros(net.param_count)
        g = np.random.default_rng(0)
        losses = net.losses(params, g.uniform(0, 1, (6, 1, 4, 4)),
                            g.integers(0, 3, 6))
        assert np.allclose(losses, np.log(3), atol=1e-12)

    def test_per_example_grad_is_not_batch_averaged(self, small_split):
        train_set, _ = small_split
        arch = mlp1((1, 16, 16), 3, hidden=6)
        net = network_for(arch)
        params = net.init_params(0)
        ex = train_set.example(0)
        single = net.per_example_grads(params, ex.image[None],
                                       np.array([ex.label]))
        doubled = net.per_example_grads(
            params, np.stack([ex.image, ex.image]),
            np.array([ex.label, ex.label]))
        assert np.allclose(doubled[0], single[0])
        assert np.allclose(doubled[1], single[0])

    def test_loss_and_grad_shapes(self, tiny_mlp_fit):
        _, train_set, ckpt = tiny_mlp_fit
        loss, grad = loss_and_grad(ckpt, train_set.example(3))
        assert grad.shape == (ckpt.params.size,)
        assert loss >= 0.0


class TestTraining:
    def test_determinism_bit_identical(self, small_split):
        train_set, _ = small_split
        arch = mlp1((1, 16, 16), 3, hidden=8)
        cfg = TrainConfig(epochs=3, batch_size=32, learning_rate=0.05, seed=4)
        a = train(arch, train_set, cfg)
        b = train(arch, train_set, cfg)
        assert np.array_equal(a.params, b.params)
        assert a.digest() == b.digest()

    def test_separable_logistic_fits_perfectly(self, separable_logistic):
        arch, ds, ckpt = separable_logistic
        assert evaluate_accuracy(ckpt, ds) == 1.0

    def test_divergence_reported_with_epoch(self, small_split):
        train_set, _ = small_split
        arch = mlp1((1, 16, 16), 3, hidden=8)
        cfg = TrainConfig(epochs=2, batch_size=32, learning_rate=1e9, seed=0)
        with pytest.raises(TrainingDivergedError) as err:
            train(arch, train_set, cfg)
        assert err.value.epoch >= 0

    def test_shape_mismatch(self, small_split):
        train_set, _ = small_split
        with pytest.raises(InputError):
            train(logistic((1, 8, 8), 3), train_set, TrainConfig(epochs=1, seed=0))


class TestEvaluate:
    def test_single_correct_example(self, separable_logistic):
        _, ds, ckpt = separable_logistic
        one = ds.take(np.array([0]))
        assert evaluate_accuracy(ckpt, one) in (0.0, 1.0)

    def test_random_model_near_chance(self, small_shapes):
        """Untrained heads hover near 1/K accuracy across seeds."""
        arch = mlp1((1, 16, 16), 3, hidden=8)
        net = network_for(arch)
        accs = []
        for seed in range(10):
            params = net.init_params(seed)
            from unpoison.models.train import Checkpoint
            ckpt = Checkpoint(arch, params, dict(net.layer_offsets), "", seed)
            accs.append(evaluate_accuracy(ckpt, small_shapes))
        assert abs(np.mean(accs) - 1 / 3) < 0.1

    def test_predicted_label_attachment(self, tiny_mlp_fit):
        _, train_set, ckpt = tiny_mlp_fit
        ex = with_predicted_label(ckpt, train_set.example(0))
        assert ex.label == int(predict(ckpt, ex.image[None])[0])


class TestActivations:
    def test_logistic_has_no_hidden_layer(self, separable_logistic):
        _, ds, ckpt = separable_logistic
        with pytest.raises(UnsupportedOperationError):
            activations(ckpt, ds.images[0])

    def test_dimension_matches_penultimate_width(self, tiny_mlp_fit):
        _, train_set, ckpt = tiny_mlp_fit
        vec = activations(ckpt, train_set.images[0])
        assert vec.shape == (8,)

    def test_identical_images_identical_activations(self, tiny_mlp_fit):
        _, train_set, ckpt = tiny_mlp_fit
        img = train_set.images[0]
        acts = batch_activations(ckpt, np.stack([img, img]))
        assert np.array_equal(acts[0], acts[1])

    def test_nonnegative_after_relu(self, tiny_mlp_fit):
        _, train_set, ckpt = tiny_mlp_fit
        acts = batch_activations(ckpt, train_set.images[:16])
        assert acts.min() >= 0.0


class TestCheckpointPersistence:
    def test_round_trip_byte_identical(self, tiny_mlp_fit, tmp_path):
        _, _, ckpt = tiny_mlp_fit
        save_checkpoint(ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert np.array_equal(loaded.params, ckpt.params)
        assert loaded.digest() == ckpt.digest()
        save_checkpoint(loaded, tmp_path / "ck2")
        assert (tmp_path / "ck" / "params.f64").read_bytes() == \
               (tmp_path / "ck2" / "params.f64").read_bytes()
