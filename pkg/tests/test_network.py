from dataclasses import replace

import numpy.testing as npt
import pytest

from Errors import ConfigError, DimensionError
from Network import (INDIVIDUAL, SHARED_NORMS, NetConfig, branch_checksums, build, distillation_loss,
                     forward_multimodal, predict, unfused)
from ParamCounter import preset
from Tensor import Graph, softmax_ce, sum_scalars


def inputs_for(rng, cfg, n=2, size=8):
    return [rng.normal(size=(n, cfg.in_channels, size, size)) for _ in range(cfg.modalities)]


@pytest.mark.parametrize('sharing', ['private', SHARED_NORMS])
@pytest.mark.parametrize('train', [False, True])
def test_unfused_branches_match_unimodal_networks(rng, tiny_cfg, sharing, train):
    cfg = replace(unfused(tiny_cfg), sharing=sharing, classifier_init='normal')
    multi = build(cfg)
    single = build(replace(cfg, modalities=1))
    xs = inputs_for(rng, cfg)
    out = multi.forward_multimodal(xs, train=train)
    for s, x in enumerate(xs):
        alone = single.forward_multimodal([x], train=train)
        npt.assert_array_equal(out.logits[s].data, alone.logits[0].data)


def test_identical_inputs_give_identical_branches(rng, tiny_cfg):
    cfg = replace(tiny_cfg, classifier_init='normal')
    x = inputs_for(rng, cfg)[0]
    for train in (True, False):
        out = build(cfg).forward_multimodal([x, x], train=train)
        npt.assert_array_equal(out.logits[0].data, out.logits[1].data)


def test_single_block_stages_downsample_before_shift(rng):
    cfg = NetConfig()
    assert cfg.blocks == (1, 1, 1) and cfg.shift
    net = build(cfg)
    assert net.stages[1][0].layers['conv1'].stride == 2
    assert net.stages[1][0].layers['conv2'].stride == 1
    for train in (False, True):
        out = net.forward_multimodal(inputs_for(rng, cfg, size=32), train=train)
        assert out.ensemble.shape == (2, cfg.num_classes, 32, 32)
        assert [f[0].shape[2] for f in out.features] == [32, 16, 8]


def test_toy_preset_forward_shape(rng):
    cfg, _ = preset('toy')
    out = forward_multimodal(build(cfg), inputs_for(rng, cfg, n=1, size=16), mode='eval')
    assert out.ensemble.shape == (1, cfg.num_classes, 16, 16)
    assert all(z.shape == (1, cfg.num_classes, 16, 16) for z in out.logits)


class TestEnsemble:
    def test_equal_weights_average(self, rng, tiny_cfg):
        out = build(replace(tiny_cfg, classifier_init='normal')).forward_multimodal(inputs_for(rng, tiny_cfg))
        npt.assert_array_equal(out.alpha.data, [0.5, 0.5])
        npt.assert_allclose(out.ensemble.data, (out.probs[0].data + out.probs[1].data) / 2, rtol=1e-15)

    def test_saturated_weights_select_first_modality(self, rng, tiny_cfg):
        net = build(replace(tiny_cfg, classifier_init='normal'))
        net.ensemble.logits.assign([30.0, -30.0])
        out = net.forward_multimodal(inputs_for(rng, tiny_cfg))
        npt.assert_allclose(out.ensemble.data, out.probs[0].data, rtol=0, atol=1e-9)

    def test_probabilities_sum_to_one(self, rng, tiny_cfg):
        net = build(replace(tiny_cfg, classifier_init='normal'))
        net.ensemble.logits.assign([0.3, -1.1])
        out = net.forward_multimodal(inputs_for(rng, tiny_cfg), train=True)
        npt.assert_allclose(out.ensemble.data.sum(axis=1), 1.0, rtol=1e-12)

    def test_zero_classifier_predicts_uniformly(self, rng, tiny_cfg):
        out = build(tiny_cfg).forward_multimodal(inputs_for(rng, tiny_cfg))
        npt.assert_allclose(out.ensemble.data, 1.0 / tiny_cfg.num_classes, rtol=1e-15)


class TestDistillationLoss:
    def test_zero_lambda_is_sum_of_cross_entropies(self, rng, tiny_cfg):
        out = build(replace(tiny_cfg, classifier_init='normal')).forward_multimodal(inputs_for(rng, tiny_cfg))
        labels = rng.integers(0, tiny_cfg.num_classes, size=(2, 8, 8))
        total, parts = distillation_loss(out, labels, lam=0.0)
        assert total.item() == pytest.approx(parts['ce'] + parts['ensemble_ce'], rel=1e-12)
        ce = sum(softmax_ce(z, labels)[1].item() for z in out.logits)
        assert parts['ce'] == pytest.approx(ce, rel=1e-12)

    def test_kl_vanishes_when_modalities_agree(self, rng, tiny_cfg):
        x = inputs_for(rng, tiny_cfg)[0]
        out = build(replace(tiny_cfg, classifier_init='normal')).forward_multimodal([x, x])
        labels = rng.integers(0, tiny_cfg.num_classes, size=(2, 8, 8))
        assert distillation_loss(out, labels)[1]['kl'] == pytest.approx(0.0, abs=1e-12)

    def test_kl_is_non_negative(self, rng, tiny_cfg):
        for seed in range(5):
            net = build(replace(tiny_cfg, classifier_init='normal', seed=seed))
            out = net.forward_multimodal(inputs_for(rng, tiny_cfg), train=True)
            labels = rng.integers(0, tiny_cfg.num_classes, size=(2, 8, 8))
            assert distillation_loss(out, labels)[1]['kl'] >= 0.0

    def test_ensemble_gets_no_gradient_through_kl(self, rng, tiny_cfg):
        net = build(replace(tiny_cfg, classifier_init='normal'))
        labels = rng.integers(0, tiny_cfg.num_classes, size=(2, 8, 8))
        xs = inputs_for(rng, tiny_cfg)
        grads = []
        for lam in (0.0, 0.7):
            with Graph() as g:
                out = net.forward_multimodal(xs, train=True)
                loss, _ = distillation_loss(out, labels, lam=lam)
            grads.append(g.backward(loss)[net.ensemble.logits.value])
        npt.assert_allclose(grads[0], grads[1], rtol=1e-12, atol=1e-15)


def test_shared_conv_gradient_is_sum_over_branches(rng, tiny_cfg):
    cfg = replace(unfused(tiny_cfg), classifier_init='normal')
    multi = build(cfg)
    xs = inputs_for(rng, cfg)
    labels = rng.integers(0, cfg.num_classes, size=(2, 8, 8))
    with Graph() as g:
        out = multi.forward_multimodal(xs, train=True)
        loss = sum_scalars(*[softmax_ce(z, labels)[1] for z in out.logits])
    grads = g.backward(loss)

    expected = {}
    for x in xs:
        single = build(replace(cfg, modalities=1))
        with Graph() as g1:
            loss1 = softmax_ce(single.forward_multimodal([x], train=True).logits[0], labels)[1]
        grads1 = g1.backward(loss1)
        for name, p in single.named_parameters().items():
            if name.startswith(('enc.', 'dec.')) and '.bn' not in name and 'proj_bn' not in name:
                expected[name] = expected.get(name, 0.0) + grads1[p.value]
    params = multi.named_parameters()
    for name, value in expected.items():
        npt.assert_allclose(grads[params[name].value], value, rtol=1e-10, atol=1e-14)


def test_unidirectional_donor_branch_is_unfused(rng, tiny_cfg):
    xs = inputs_for(rng, tiny_cfg)
    twin = branch_checksums(build(unfused(tiny_cfg)), xs)
    two_to_one = branch_checksums(build(replace(tiny_cfg, direction='2to1')), xs)
    one_to_two = branch_checksums(build(replace(tiny_cfg, direction='1to2')), xs)
    assert two_to_one[1] == twin[1] and two_to_one[0] != twin[0]
    assert one_to_two[0] == twin[0] and one_to_two[1] != twin[1]


@pytest.mark.parametrize('method', ['concat', 'average', 'attention'])
def test_symmetric_methods_build_and_run(rng, tiny_cfg, method):
    cfg = replace(tiny_cfg, method=method, shuffle=False, shift=False)
    out = build(cfg).forward_multimodal(inputs_for(rng, cfg), train=True)
    assert out.ensemble.shape == (2, cfg.num_classes, 8, 8)


def test_individual_convs_are_copied(tiny_cfg):
    names = build(replace(tiny_cfg, sharing=INDIVIDUAL)).named_parameters()
    assert 'enc.stem.conv.weight.m0' in names and 'enc.stem.conv.weight.m1' in names
    npt.assert_array_equal(names['dec.classifier.weight'].value.data, 0.0)


def test_init_is_per_layer(tiny_cfg):
    fused = build(tiny_cfg).named_parameters()
    plain = build(unfused(tiny_cfg)).named_parameters()
    for name, p in plain.items():
        npt.assert_array_equal(fused[name].value.data, p.value.data)


def test_predict_shapes(rng, tiny_cfg):
    fused, single = predict(build(replace(tiny_cfg, classifier_init='normal')), inputs_for(rng, tiny_cfg, n=5),
                            batch_size=2)
    assert fused.shape == (5, 8, 8)
    assert [p.shape for p in single] == [(5, 8, 8), (5, 8, 8)]


class TestValidation:
    def test_shift_needs_widths_divisible_by_four(self, tiny_cfg):
        with pytest.raises(ConfigError):
            build(replace(tiny_cfg, widths=(6, 8)))

    def test_symmetric_method_rejects_shuffle(self, tiny_cfg):
        with pytest.raises(ConfigError):
            replace(tiny_cfg, method='average').validate()

    def test_unknown_sharing(self, tiny_cfg):
        with pytest.raises(ConfigError):
            replace(tiny_cfg, sharing='half').validate()

    def test_single_stage_rejected(self, tiny_cfg):
        with pytest.raises(ConfigError):
            replace(tiny_cfg, widths=(4,), blocks=(1,)).validate()

    def test_modality_count_mismatch(self, rng, tiny_cfg):
        with pytest.raises(DimensionError):
            build(tiny_cfg).forward_multimodal(inputs_for(rng, tiny_cfg)[:1])

    def test_spatial_mismatch(self, rng, tiny_cfg):
        xs = [rng.normal(size=(1, 1, 8, 8)), rng.normal(size=(1, 1, 8, 6))]
        with pytest.raises(DimensionError):
            build(tiny_cfg).forward_multimodal(xs)

    def test_unknown_mode(self, rng, tiny_cfg):
        with pytest.raises(ConfigError):
            forward_multimodal(build(tiny_cfg), inputs_for(rng, tiny_cfg), mode='infer')


def test_config_round_trip(tiny_cfg):
    assert NetConfig.from_dict(tiny_cfg.to_dict()) == tiny_cfg
