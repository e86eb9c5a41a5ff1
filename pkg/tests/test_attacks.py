"""Attack construction, payload invariants, campaign persistence."""

import numpy as np
import pytest

from unpoison.attacks import (FrequencyPayload, apply_campaign,
                              frequency_pattern, load_campaign,
                              matching_cosine, poison_badnet, poison_smooth,
                              poison_witches_brew, save_campaign,
                              stamp_trigger)
from unpoison.data import LabeledExample
from unpoison.errors import ConfigurationError, UnsupportedOperationError
from unpoison.models import loss_and_grad, mlp1, network_for, train, TrainConfig


class TestBadnet:
    def test_counts_and_labels(self, small_split):
        train_set, _ = small_split
        poisoned, campaign = poison_badnet(train_set, victim=0, target=1,
                                           count=12, seed=3)
        changed = poisoned.labels != train_set.labels
        assert changed.sum() == 12
        assert np.all(poisoned.labels[changed] == 1)
        assert campaign.poison_ids == frozenset(
            int(i) for i in train_set.ids[changed])

    def test_stamp_idempotent(self, small_split):
        train_set, _ = small_split
        _, campaign = poison_badnet(train_set, 0, 1, count=5, seed=0)
        once = stamp_trigger(train_set.images[0], campaign)
        twice = stamp_trigger(once, campaign)
        assert np.array_equal(once, twice)

    def test_patch_touches_only_checker_pixels(self, small_split):
        train_set, _ = small_split
        _, campaign = poison_badnet(train_set, 0, 1, count=5, seed=0)
        image = np.full((1, 16, 16), 0.7)
        stamped = stamp_trigger(image, campaign)
        diff = np.nonzero(stamped != image)
        assert len(diff[0]) == 5  # checkerboard corners + center
        assert np.all(stamped[diff] == 0.0)

    def test_non_poison_rows_bit_identical(self, small_split):
        train_set, _ = small_split
        poisoned, campaign = poison_badnet(train_set, 0, 1, count=8, seed=1)
        untouched = ~np.isin(train_set.ids, sorted(campaign.poison_ids))
        assert np.array_equal(poisoned.images[untouched],
                              train_set.images[untouched])
        assert np.array_equal(poisoned.labels[untouched],
                              train_set.labels[untouched])

    def test_count_exceeds_population(self, small_split):
        train_set, _ = small_split
        with pytest.raises(ConfigurationError):
            poison_badnet(train_set, 0, 1, count=10_000, seed=0)

    def test_victim_equals_target_rejected(self, small_split):
        train_set, _ = small_split
        with pytest.raises(ConfigurationError):
            poison_badnet(train_set, 1, 1, count=3, seed=0)


class TestSmooth:
    def test_pattern_peak_equals_amplitude(self):
        payload = FrequencyPayload(amplitude=6 / 255)
        field = frequency_pattern(payload, 16, 16)
        assert np.isclose(np.abs(field).max(), 6 / 255)

    def test_pattern_spans_whole_image(self):
        field = frequency_pattern(FrequencyPayload(amplitude=0.1), 16, 16)
        assert (np.abs(field) > 1e-6).mean() > 0.9

    def test_labels_flip_and_pixels_clip(self, small_split):
        train_set, _ = small_split
        poisoned, campaign = poison_smooth(train_set, 0, 2, count=10,
                                           amplitude=8 / 255, seed=2)
        changed = np.isin(train_set.ids, sorted(campaign.poison_ids))
        assert np.all(poisoned.labels[changed] == 2)
        assert poisoned.images.min() >= 0 and poisoned.images.max() <= 1

    def test_stamp_adds_clipped_pattern(self, small_split):
        train_set, _ = small_split
        _, campaign = poison_smooth(train_set, 0, 2, count=5, seed=2)
        image = train_set.images[0]
        field = frequency_pattern(campaign.payload, 16, 16)
        assert np.allclose(stamp_trigger(image, campaign),
                           np.clip(image + field, 0, 1))

    def test_zero_amplitude_rejected(self, small_split):
        train_set, _ = small_split
        with pytest.raises(ConfigurationError):
            poison_smooth(train_set, 0, 1, count=5, amplitude=0.0, seed=0)


class TestWitchesBrew:
    @pytest.fixture(scope="class")
    def brew_setup(self, small_split):
        train_set, test_set = small_split
        arch = mlp1((1, 16, 16), 3, hidden=8)
        ckpt = train(arch, train_set,
                     TrainConfig(epochs=10, batch_size=32,
                                 learning_rate=0.05, seed=1))
        target_pos = int(np.nonzero(test_set.labels == 0)[0][0])
        target = test_set.example(target_pos)
        return train_set, ckpt, target

    def test_zero_steps_zero_deltas(self, brew_setup):
        train_set, ckpt, target = brew_setup
        poisoned, campaign = poison_witches_brew(train_set, ckpt, target,
                                                 adversarial_label=1, count=6,
                                                 eps=16 / 255, steps=0, seed=0)
        assert np.allclose(campaign.payload.deltas, 0.0)
        assert np.array_equal(poisoned.images, train_set.images)

    def test_clean_label_invariant(self, brew_setup):
        train_set, ckpt, target = brew_setup
        poisoned, _ = poison_witches_brew(train_set, ckpt, target, 1, count=6,
                                          eps=16 / 255, steps=10, seed=0)
        assert np.array_equal(poisoned.labels, train_set.labels)

    def test_budget_enforced_exactly(self, brew_setup):
        train_set, ckpt, target = brew_setup
        eps = 16 / 255
        poisoned, campaign = poison_witches_brew(train_set, ckpt, target, 1,
                                                 count=6, eps=eps, steps=25,
                                                 seed=0)
        positions = [train_set.position_of(i)
                     for i in sorted(campaign.poison_ids)]
        deltas = poisoned.images[positions] - train_set.images[positions]
        assert np.abs(deltas).max() <= eps + 1e-15
        assert poisoned.images.min() >= 0 and poisoned.images.max() <= 1

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_cosine_improves(self, brew_setup, seed):
        """Crafting strictly improves gradient alignment (3 seeds)."""
        train_set, ckpt, target = brew_setup
        adversarial = LabeledExample(target.id, target.image, 1)
        _, target_grad = loss_and_grad(ckpt, adversarial)
        positions_of = lambda c: [train_set.position_of(i)
                                  for i in sorted(c.poison_ids)]
        _, camp0 = poison_witches_brew(train_set, ckpt, target, 1, count=6,
                                       eps=16 / 255, steps=0, seed=seed)
        poisoned, camp = poison_witches_brew(train_set, ckpt, target, 1,
                                             count=6, eps=16 / 255, steps=60,
                                             seed=seed)
        base_imgs, labels = train_set.batch(np.array(positions_of(camp0)))
        crafted_imgs, _ = poisoned.batch(np.array(positions_of(camp)))
        before = matching_cosine(ckpt, base_imgs, labels, target_grad)
        after = matching_cosine(ckpt, crafted_imgs, labels, target_grad)
        assert after > before

    def test_target_class_must_differ(self, brew_setup):
        train_set, ckpt, target = brew_setup
        with pytest.raises(ConfigurationError):
            poison_witches_brew(train_set, ckpt, target,
                                adversarial_label=target.label, count=4,
                                eps=0.1, steps=1, seed=0)

    def test_no_test_time_trigger(self, brew_setup):
        train_set, ckpt, target = brew_setup
        _, campaign = poison_witches_brew(train_set, ckpt, target, 1, count=4,
                                          eps=0.1, steps=0, seed=0)
        with pytest.raises(UnsupportedOperationError):
            stamp_trigger(train_set.images[0], campaign)


class TestPersistence:
    def test_round_trip_all_kinds(self, small_split, tmp_path):
        train_set, test_set = small_split
        arch = mlp1((1, 16, 16), 3, hidden=8)
        ckpt = train(arch, train_set, TrainConfig(epochs=2, batch_size=32,
                                                  learning_rate=0.05, seed=1))
        target = test_set.example(0)
        adversarial = (target.label + 1) % 3
        campaigns = [
            poison_badnet(train_set, 0, 1, count=4, seed=0)[1],
            poison_smooth(train_set, 0, 2, count=4, seed=0)[1],
            poison_witches_brew(train_set, ckpt, target, adversarial,
                                count=4, eps=0.05, steps=3, seed=0)[1],
        ]
        for i, campaign in enumerate(campaigns):
            save_campaign(campaign, tmp_path / f"c{i}")
            loaded = load_campaign(tmp_path / f"c{i}")
            assert loaded.kind == campaign.kind
            assert loaded.poison_ids == campaign.poison_ids
            assert np.array_equal(apply_campaign(train_set, loaded).images,
                                  apply_campaign(train_set, campaign).images)
