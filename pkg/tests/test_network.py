"""Network structure: output shapes and ranges, attention behavior at the
zero-gate initialization, parameter liveness, and symmetry properties."""

import numpy as np
import pytest

import owpsnet.tensor as T
from owpsnet.model import (ModelConfig, OWPSNet, build_model, SpatialAttention,
                           ChannelAttention, ParamStore)
from owpsnet.norm import NormConfig
from owpsnet.tensor import Tensor, ShapeError, backward


def small_cfg(**kw):
    base = dict(depth=2, base_channels=8, norm=NormConfig(variant="IN"))
    base.update(kw)
    return ModelConfig(**base)


def rand_input(rng, n=2, c=3, hw=16):
    return Tensor(rng.uniform(size=(n, c, hw, hw)).astype(np.float32))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=1).validate()
    with pytest.raises(ValueError):
        ModelConfig(base_channels=2).validate()


def test_forward_shapes_and_range(rng):
    model = build_model(small_cfg(), seed=0)
    region, edge = model.forward(rand_input(rng), train=True)
    assert region.shape == (2, 1, 16, 16)
    assert edge.shape == (2, 1, 16, 16)
    for prob in (region, edge):
        assert prob.data.min() > 0.0
        assert prob.data.max() < 1.0


def test_region_only_variant_returns_no_edge_map(rng):
    model = build_model(small_cfg(edge_branch=False), seed=0)
    region, edge = model.forward(rand_input(rng), train=True)
    assert region.shape == (2, 1, 16, 16)
    assert edge is None


def test_input_validation(rng):
    model = build_model(small_cfg(), seed=0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((2, 4, 16, 16), np.float32)), train=True)
    with pytest.raises(ShapeError):   # 18 is not a multiple of 2**depth
        model.forward(Tensor(np.zeros((1, 3, 18, 18), np.float32)), train=True)


def test_refine_adds_parameters(rng):
    with_refine = build_model(small_cfg(), seed=0)
    without = build_model(small_cfg(refine_enabled=False), seed=0)
    assert with_refine.params.parameter_count() > without.params.parameter_count()


def test_edge_branch_adds_parameters():
    dual = build_model(small_cfg(refine_enabled=False), seed=0)
    single = build_model(small_cfg(refine_enabled=False, edge_branch=False), seed=0)
    assert dual.params.parameter_count() > single.params.parameter_count()


def test_seed_determinism():
    a = build_model(small_cfg(), seed=5)
    b = build_model(small_cfg(), seed=5)
    c = build_model(small_cfg(), seed=6)
    names = [n for n, _ in a.params.named_parameters()]
    assert names == [n for n, _ in b.params.named_parameters()]
    for (_, pa), (_, pb) in zip(a.params.named_parameters(), b.params.named_parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data)
               for (_, pa), (_, pc) in zip(a.params.named_parameters(),
                                           c.params.named_parameters()))


def test_zero_gate_makes_refine_transparent(rng):
    """At init both attention gates are zero, so refined features equal the
    mixed convolution output bit-exactly and attention cannot destabilize
    early training."""
    model = build_model(small_cfg(), seed=3)
    refine = model.refine
    assert model.params["refine.spatial.gate"].data[0] == 0.0
    assert model.params["refine.channel.gate"].data[0] == 0.0

    enc = Tensor(rng.normal(size=(1, 8, 16, 16)).astype(np.float32))
    dec = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
    refined = refine(enc, dec, train=True)
    # replay just the mixing stage with the same layers
    mixed = refine.norm(refine.mix(T.concat_channels(enc, dec)), train=True).relu()
    assert np.array_equal(refined.data, mixed.data)

    # a nonzero gate breaks the identity
    model.params["refine.spatial.gate"].data[0] = 0.5
    changed = refine(enc, dec, train=True)
    assert not np.array_equal(changed.data, refine.norm(
        refine.mix(T.concat_channels(enc, dec)), train=True).relu().data)


def test_spatial_affinity_rows_sum_to_one(rng):
    store = ParamStore()
    att = SpatialAttention(store, "att", np.random.default_rng(0), channels=8)
    f = Tensor(rng.normal(size=(2, 8, 5, 5)).astype(np.float32))
    rows = att.affinity(f).data
    assert rows.shape == (2, 25, 25)
    assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-5)


def test_spatial_attention_needs_enough_channels():
    with pytest.raises(ValueError):
        SpatialAttention(ParamStore(), "att", np.random.default_rng(0), channels=4)


def test_channel_attention_zero_gate_is_identity(rng):
    store = ParamStore()
    att = ChannelAttention(store, "catt")
    f = Tensor(rng.normal(size=(2, 8, 5, 5)).astype(np.float32))
    assert np.array_equal(att(f).data, f.data)


def test_no_dead_parameters(rng):
    """Every registered parameter receives a gradient from the total loss."""
    model = build_model(small_cfg(), seed=0)
    x = rand_input(rng, n=2)
    region, edge = model.forward(x, train=True)
    target = Tensor((rng.uniform(size=region.shape) < 0.5).astype(np.float32))
    loss = T.reduce_sum(T.square(region - target)) + T.reduce_sum(T.square(edge - target))
    backward(loss)
    dead = [name for name, p in model.params.named_parameters() if p.grad is None]
    assert dead == []
    # gate gradients exist even at the zero init
    assert model.params["refine.spatial.gate"].grad is not None


def test_no_dead_parameters_without_refine(rng):
    model = build_model(small_cfg(refine_enabled=False), seed=0)
    region, edge = model.forward(rand_input(rng), train=True)
    backward(T.reduce_sum(T.square(region)) + T.reduce_sum(T.square(edge)))
    dead = [name for name, p in model.params.named_parameters() if p.grad is None]
    assert dead == []


def test_batch_invariance_in_eval_mode(rng):
    """IN-normalized eval forward treats batch items independently."""
    model = build_model(small_cfg(), seed=1)
    a = rand_input(rng, n=1)
    b = rand_input(rng, n=1)
    both = Tensor(np.concatenate([a.data, b.data], axis=0))
    ra, _ = model.forward(a, train=False)
    rb, _ = model.forward(b, train=False)
    rboth, _ = model.forward(both, train=False)
    assert np.allclose(rboth.data[0], ra.data[0], atol=1e-6)
    assert np.allclose(rboth.data[1], rb.data[0], atol=1e-6)


def test_duplicate_parameter_name_rejected():
    store = ParamStore()
    store.add_param("w", Tensor(np.zeros(3, np.float32)))
    with pytest.raises(ValueError):
        store.add_param("w", Tensor(np.zeros(3, np.float32)))


def test_parameter_count_matches_manual_sum():
    model = build_model(small_cfg(), seed=0)
    total = sum(p.data.size for _, p in model.params.named_parameters())
    assert model.params.parameter_count() == total


def test_depth_three_halves_resolution_three_times(rng):
    model = build_model(small_cfg(depth=3), seed=0)
    region, edge = model.forward(rand_input(rng, hw=24), train=True)
    assert region.shape == (2, 1, 24, 24)
