import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalora import oracles
from metalora.adapters import ConvLoRA, MatrixLoRA, init_adapter
from metalora.meta_net import Layer, MappingNet, init_mapping_net, make_extractor
from metalora.model import AdaptedModel, batched_forward, forward_adapted, init_base, reference_forward
from metalora.tensor_core import ShapeMismatchError

CASES = [("lora", "head"), ("lora", "conv"), ("conv_lora", "conv"), ("meta_cp", "head"), ("meta_cp", "conv"),
         ("meta_tr", "head"), ("meta_tr", "conv"), ("conv_meta_cp", "conv"), ("conv_meta_tr", "conv")]


def _base(rng):
    b = init_base(3, 2, 4, 3, rng)
    return dataclasses.replace(b, conv_bias=0.1 * rng.standard_normal(4), head_bias=0.1 * rng.standard_normal(3))


def _model(variant, target, rng, zero_last=False, net=None, seed_mode="per_sample"):
    base = _base(rng)
    shape = base.conv.shape if target == "conv" else base.head.shape
    if not variant.startswith("conv_") and target == "conv":
        shape = (int(np.prod(shape[:3])), shape[3])
    a = init_adapter(variant, shape, 2, rng, zero_last=zero_last)
    if not a.is_meta:
        return AdaptedModel(base, (a,), target)
    fe = make_extractor("pooled-conv", (5, 5, 2), rng, features=3)
    net = net or init_mapping_net(fe.output_dim, a.seed_shape, rng, output_gain=1.0)
    return AdaptedModel(base, (a,), target, mapping_net=net, extractor=fe, seed_mode=seed_mode)


@pytest.mark.parametrize("variant,target", CASES)
def test_tape_matches_straight_line_oracle(variant, target):
    rng = np.random.default_rng(hash((variant, target)) % 2**32)
    model = _model(variant, target, rng)
    X = rng.standard_normal((4, 5, 5, 2))
    lt, et = forward_adapted(model, X)
    lr, er = reference_forward(model, X)
    assert oracles.rel_error(lt, lr) <= 1e-12 and oracles.rel_error(et, er) <= 1e-12


@pytest.mark.parametrize("variant,target", CASES)
def test_zero_initialized_adapter_keeps_base_logits(variant, target):
    rng = np.random.default_rng(7)
    model = _model(variant, target, rng, zero_last=True)
    X = rng.standard_normal((3, 5, 5, 2))
    want, _ = forward_adapted(AdaptedModel(model.base), X)
    got, _ = forward_adapted(model, X)
    assert oracles.rel_error(got, want) <= 1e-12


@pytest.mark.parametrize("variant,target", [c for c in CASES if "meta" in c[0]])
def test_zero_network_keeps_base_logits(variant, target):
    def zero_net(d, shape):
        n = int(np.prod(shape))
        return MappingNet((Layer(np.zeros((n, d)), np.zeros(n)),), shape)

    rng = np.random.default_rng(8)
    probe = _model(variant, target, np.random.default_rng(8))
    model = dataclasses.replace(probe, mapping_net=zero_net(probe.extractor.output_dim, probe.adapters[0].seed_shape))
    X = rng.standard_normal((3, 5, 5, 2))
    want, _ = reference_forward(AdaptedModel(model.base), X)
    assert oracles.rel_error(forward_adapted(model, X)[0], want) <= 1e-12
    assert oracles.rel_error(reference_forward(model, X)[0], want) <= 1e-12


@pytest.mark.parametrize("meta,static,target", [("meta_cp", MatrixLoRA, "head"), ("conv_meta_cp", ConvLoRA, "conv")])
def test_all_ones_seed_matches_static_logits(meta, static, target):
    rng = np.random.default_rng(9)
    probe = _model(meta, target, rng)
    a = probe.adapters[0]
    n = a.seed_shape[0]
    ones = MappingNet((Layer(np.zeros((n, probe.extractor.output_dim)), np.ones(n)),), a.seed_shape)
    model = dataclasses.replace(probe, mapping_net=ones)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        st_model = AdaptedModel(probe.base, (static(a.A, a.B),), target)
    X = rng.standard_normal((3, 5, 5, 2))
    assert np.array_equal(reference_forward(model, X)[0], reference_forward(st_model, X)[0])


def test_batch_mean_seed_mode_matches_reference():
    rng = np.random.default_rng(10)
    model = _model("conv_meta_tr", "conv", rng, seed_mode="batch_mean")
    X = rng.standard_normal((4, 5, 5, 2))
    assert oracles.rel_error(forward_adapted(model, X)[0], reference_forward(model, X)[0]) <= 1e-12


def test_routed_adapters_use_task_ids():
    rng = np.random.default_rng(11)
    base = _base(rng)
    ads = tuple(init_adapter("conv_lora", base.conv.shape, 1, rng, zero_last=False) for _ in range(3))
    model = AdaptedModel(base, ads, "conv", routed=True)
    X = rng.standard_normal((4, 5, 5, 2))
    tids = np.array([2, 0, 1, 2])
    got, _ = forward_adapted(model, X, tids)
    for n in range(4):
        single = AdaptedModel(base, (ads[tids[n]],), "conv")
        assert oracles.rel_error(got[n], forward_adapted(single, X[n])[0]) <= 1e-12
    with pytest.raises(ValueError):
        forward_adapted(model, X)


def test_single_image_and_batching_agree():
    rng = np.random.default_rng(12)
    model = _model("meta_tr", "head", rng)
    X = rng.standard_normal((5, 5, 5, 2))
    lb, eb = batched_forward(model, X, batch_size=2)
    l0, e0 = forward_adapted(model, X[0])
    assert oracles.rel_error(lb[0], l0) <= 1e-12 and eb.shape == (5, 4)


def test_misconfiguration_is_rejected():
    rng = np.random.default_rng(13)
    base = _base(rng)
    with pytest.raises(ShapeMismatchError):
        AdaptedModel(base, (init_adapter("lora", (5, 3), 1, rng),), "head")
    with pytest.raises(ShapeMismatchError):
        AdaptedModel(base, (init_adapter("conv_lora", base.conv.shape, 1, rng),), "head")
    with pytest.raises(ValueError):
        AdaptedModel(base, (init_adapter("meta_cp", (4, 3), 1, rng),), "head")
    with pytest.raises(ValueError):
        AdaptedModel(base, tuple(init_adapter("lora", (4, 3), 1, rng) for _ in range(2)), "head")
