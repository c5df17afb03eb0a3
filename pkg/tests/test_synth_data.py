import numpy as np
import numpy.testing as npt
import pytest

from Errors import ConfigError
from PortableRandom import BLOCK, PortableRandom, splitmix64
from SynthData import (HIDDEN_INTENSITY, TEST, TRAIN, SynthConfig, bayes_ceiling, generate, generate_sample,
                       sample_seed)


def small(**kwargs):
    base = dict(height=12, width=10, num_classes=5, regions=8, train_size=4, test_size=2, seed=3)
    base.update(kwargs)
    return SynthConfig(**base)


class TestPortableRandom:
    def test_splitmix_reference_value(self):
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_block_draws_match_sequential_stream(self):
        blocked = PortableRandom(42).raw(BLOCK + 5)
        sequential = PortableRandom(42)
        assert [int(v) for v in blocked] == [sequential.next_u64() for _ in range(BLOCK + 5)]

    def test_uniform_range(self):
        u = PortableRandom(7).uniform(10_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.02

    def test_normal_moments(self):
        z = PortableRandom(9).normal(20_001)
        assert z.shape == (20_001,)
        assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03

    def test_integers_stay_below_high(self):
        values = PortableRandom(1).integers(1000, 5)
        assert set(values.tolist()) == {0, 1, 2, 3, 4}


def test_generation_is_bit_identical():
    cfg = small()
    (train_a, test_a), (train_b, test_b) = generate(cfg), generate(cfg)
    npt.assert_array_equal(train_a.inputs, train_b.inputs)
    npt.assert_array_equal(train_a.labels, train_b.labels)
    npt.assert_array_equal(test_a.inputs, test_b.inputs)
    assert train_a.inputs.dtype == np.float32 and train_a.labels.dtype == np.uint8
    assert train_a.inputs.shape == (4, 2, 12, 10)


def test_streams_differ_by_split_and_seed():
    assert sample_seed(3, TRAIN, 0) != sample_seed(3, TEST, 0)
    train, test = generate(small())
    assert not np.array_equal(train.inputs[0], test.inputs[0])
    other, _ = generate(small(seed=4))
    assert not np.array_equal(train.inputs, other.inputs)


def test_default_visibility_assigns_class_to_next_modality():
    sets = small().visible_sets()
    assert sets == [frozenset({1, 3}), frozenset({0, 2, 4})]


def test_noise_free_intensities():
    cfg = small(noise=0.0)
    inputs, labels = generate_sample(cfg, 11)
    means = cfg.means()
    for s in range(2):
        npt.assert_array_equal(inputs[s], means[s][labels].astype(np.float32))
    hidden = ~np.isin(labels, sorted(cfg.visible_sets()[0]))
    npt.assert_array_equal(inputs[0][hidden], HIDDEN_INTENSITY)


def test_gain_and_offset_are_applied_after_noise():
    plain, _ = generate(small(noise=0.1))
    scaled, _ = generate(small(noise=0.1, gains=(1.0, 3.0), offsets=(0.0, -1.0)))
    npt.assert_array_equal(scaled.inputs[:, 0], plain.inputs[:, 0])
    npt.assert_allclose(scaled.inputs[:, 1], 3.0 * plain.inputs[:, 1].astype(np.float64) - 1.0,
                        rtol=0, atol=1e-5)


def test_single_modality_without_noise_is_separable_by_threshold():
    cfg = small(modalities=1, noise=0.0, num_classes=4)
    train, _ = generate(cfg)
    guess = np.rint(train.inputs[:, 0].astype(np.float64) * 4).astype(np.int64) - 1
    npt.assert_array_equal(guess, train.labels)


def test_batch_and_modality_views():
    train, _ = generate(small())
    inputs, labels = train.batch(np.array([2, 0]))
    assert [x.shape for x in inputs] == [(2, 1, 12, 10)] * 2
    assert inputs[0].dtype == np.float64 and labels.dtype == np.int64
    npt.assert_array_equal(labels[1], train.labels[0])
    view = train.modality(1)
    assert view.modalities == 1
    npt.assert_array_equal(view.inputs[:, 0], train.inputs[:, 1])
    assert train.sample(1).inputs[0].shape == (1, 1, 12, 10)


class TestBayesCeiling:
    def test_noise_free_limits(self):
        ceiling = bayes_ceiling(small(noise=0.0))
        assert ceiling.per_modality == pytest.approx([3 / 5, 4 / 5])
        assert ceiling.fused == pytest.approx(1.0)

    def test_low_noise_approaches_limits(self):
        ceiling = bayes_ceiling(small(noise=0.01))
        assert ceiling.per_modality[0] == pytest.approx(0.6, abs=1e-3)

    def test_fusion_beats_every_modality(self):
        ceiling = bayes_ceiling(small(noise=0.05))
        assert ceiling.fused > max(ceiling.per_modality) + 0.1
        assert ceiling.fused <= 1.0 + 1e-6

    def test_three_modalities_use_sampling(self):
        ceiling = bayes_ceiling(small(modalities=3, noise=0.05))
        assert len(ceiling.per_modality) == 3
        assert max(ceiling.per_modality) <= ceiling.fused <= 1.0


class TestValidation:
    def test_too_many_regions(self):
        with pytest.raises(ConfigError):
            small(regions=121).validate()

    def test_class_visible_nowhere(self):
        with pytest.raises(ConfigError):
            small(visibility=((0, 1), (2, 3))).validate()

    def test_gain_count(self):
        with pytest.raises(ConfigError):
            small(gains=(1.0,)).validate()

    def test_negative_noise(self):
        with pytest.raises(ConfigError):
            generate(small(noise=-0.1))


def test_config_round_trip():
    cfg = small(visibility=[[0, 1], [2, 3, 4]], gains=[1, 2])
    assert cfg.visibility == ((0, 1), (2, 3, 4)) and cfg.gains == (1.0, 2.0)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
