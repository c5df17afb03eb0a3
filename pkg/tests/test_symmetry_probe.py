import numpy as np
import pytest

from Errors import UnknownBlockError
from SymmetryProbe import (ASYMMETRIC_WITNESS, INCONCLUSIVE, SYMMETRIC_CONSTRUCTIVE,
                           refute_symmetry_by_search, verify_symmetric_by_construction)

SEEDS = range(20)


@pytest.mark.parametrize('block', ['average', 'add', 'concat', 'attention'])
def test_constructive_blocks_are_symmetric(block):
    for seed in SEEDS:
        verdict = verify_symmetric_by_construction(block, trials=20, seed=seed)
        assert verdict.verdict == SYMMETRIC_CONSTRUCTIVE, (block, seed, verdict.max_abs)
        assert verdict.residual < 1e-9


def test_average_uses_the_same_pointwise_map():
    verdict = verify_symmetric_by_construction('average', trials=20, seed=0)
    assert verdict.max_abs == 0.0


def test_concat_swap_is_tight():
    assert verify_symmetric_by_construction('concat', trials=20, seed=3).residual < 1e-12


def test_channel_shuffle_has_witness():
    for seed in SEEDS:
        verdict = refute_symmetry_by_search('channel_shuffle', sample_count=256, seed=seed, split_point=6)
        assert verdict.verdict == ASYMMETRIC_WITNESS
        assert verdict.residual > 0.1
        assert verdict.witness is not None
        assert np.asarray(verdict.witness['x1']).shape == (8, 8, 8)


def test_shift_fuse_with_zero_first_input_has_witness():
    for seed in SEEDS:
        verdict = refute_symmetry_by_search('shift_fuse', sample_count=256, seed=seed, zero_first=True)
        assert verdict.verdict == ASYMMETRIC_WITNESS
        assert verdict.residual > 0.1


@pytest.mark.parametrize('block', ['average', 'add'])
def test_refuter_control_recovers_symmetric_map(block):
    verdict = refute_symmetry_by_search(block, sample_count=64, seed=1)
    assert verdict.verdict == INCONCLUSIVE
    assert verdict.residual < 1e-9
    assert verdict.witness is None


def test_explicit_pointwise_map(rng):
    c1 = (rng.normal(size=(8, 16)), rng.normal(size=8))
    verdict = verify_symmetric_by_construction('concat', c1=c1, trials=5)
    assert verdict.verdict == SYMMETRIC_CONSTRUCTIVE


def test_unknown_blocks():
    with pytest.raises(UnknownBlockError):
        verify_symmetric_by_construction('channel_shuffle')
    with pytest.raises(UnknownBlockError):
        refute_symmetry_by_search('attention')


def test_verdict_record_is_plain():
    record = verify_symmetric_by_construction('add', trials=2).to_record()
    assert record['block'] == 'add'
    assert record['verdict'] == SYMMETRIC_CONSTRUCTIVE
