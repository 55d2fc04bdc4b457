import numpy as np
import pytest

from conftest import random_tree
from skelgait.gradcheck import check_gradients
from skelgait.graph import PARTITION_STRATEGIES, SkeletonLayout, normalized_adjacency
from skelgait.nn import (
    NetworkConfig,
    SequenceTooShortError,
    StgcnUnit,
    build_network,
    embed,
    literal_st_conv_reference,
    spatial_graph_conv,
)
from skelgait.tensor import Tensor, backward, temporal_conv, tsum


def _scalar_channels(f):
    return Tensor(np.asarray(f, dtype=float).reshape(1, 1, 1, -1))


def test_spatial_conv_chain_example(chain3):
    pa = normalized_adjacency(chain3, "spatial")
    out = spatial_graph_conv(_scalar_channels([1, 2, 3]), pa, Tensor(np.ones((3, 1, 1))))
    np.testing.assert_allclose(out.data.ravel(), [3, 4, 5])


def test_spatial_conv_uniform_is_neighbourhood_mean():
    layout = random_tree(np.random.default_rng(5), 7)
    pa = normalized_adjacency(layout, "uniform")
    f = np.random.default_rng(6).normal(size=(1, 2, 3, 7))
    out = spatial_graph_conv(Tensor(f), pa, Tensor(np.eye(2)[None])).data
    adj = layout.adjacency()
    for i in range(7):
        members = [i] + list(np.flatnonzero(adj[i]))
        np.testing.assert_allclose(out[..., i], f[..., members].mean(axis=-1), rtol=1e-12)


def test_spatial_conv_zero_weights(chain3):
    pa = normalized_adjacency(chain3, "distance")
    out = spatial_graph_conv(_scalar_channels([1, 2, 3]), pa, Tensor(np.zeros((2, 4, 1))))
    np.testing.assert_array_equal(out.data, 0)


def test_spatial_conv_label_mismatch(chain3):
    pa = normalized_adjacency(chain3, "spatial")
    with pytest.raises(ValueError):
        spatial_graph_conv(_scalar_channels([1, 2, 3]), pa, Tensor(np.ones((2, 1, 1))))


@pytest.mark.parametrize("strategy", PARTITION_STRATEGIES)
@pytest.mark.parametrize("seed", range(3))
def test_spatial_conv_gradcheck(seed, strategy):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    pa = normalized_adjacency(random_tree(rng, n), strategy)
    x = Tensor(rng.normal(size=(2, 3, 4, n)), requires_grad=True)
    w = Tensor(rng.normal(size=(pa.num_labels, 2, 3)), requires_grad=True)
    assert max(check_gradients(lambda a, b: spatial_graph_conv(a, pa, b), [x, w])) < 1e-4


# ---------------------------------------------------------------- literal oracle


def test_literal_two_node_example():
    layout = SkeletonLayout(2, ((0, 1),), 0)
    x = np.array([[1.0], [3.0]]).T.reshape(1, 1, 2)
    out = literal_st_conv_reference(x, np.eye(1)[None], layout, "uniform", 1)
    np.testing.assert_allclose(out.reshape(-1), [2, 2])


def factorized_forward(x, layout, strategy, w_s, u):
    pa = normalized_adjacency(layout, strategy)
    h = spatial_graph_conv(Tensor(x[None]), pa, Tensor(w_s))
    return temporal_conv(h, Tensor(u)).data[0]


def combine(w_s, u):
    s, g = w_s.shape[0], u.shape[2]
    return np.stack([u[:, :, d] @ w_s[l] for d in range(g) for l in range(s)])


@pytest.mark.parametrize("strategy", PARTITION_STRATEGIES)
def test_literal_gamma_one_equals_spatial_conv(strategy):
    rng = np.random.default_rng(0)
    layout = random_tree(rng, 5)
    x = rng.normal(size=(2, 3, 5))
    w_s = rng.normal(size=(len(normalized_adjacency(layout, strategy).matrices), 4, 2))
    lit = literal_st_conv_reference(x, w_s, layout, strategy, 1)
    pa = normalized_adjacency(layout, strategy)
    np.testing.assert_allclose(lit, spatial_graph_conv(Tensor(x[None]), pa, Tensor(w_s)).data[0], atol=1e-12)


@pytest.mark.parametrize("strategy", PARTITION_STRATEGIES)
def test_literal_matches_factorized(strategy):
    rng = np.random.default_rng(42)
    layout = random_tree(rng, 5)
    s = normalized_adjacency(layout, strategy).num_labels
    x = rng.normal(size=(3, 6, 5))
    w_s = rng.normal(size=(s, 4, 3))
    u = rng.normal(size=(4, 4, 5))
    lit = literal_st_conv_reference(x, combine(w_s, u), layout, strategy, 5)
    np.testing.assert_allclose(lit, factorized_forward(x, layout, strategy, w_s, u), atol=1e-10, rtol=0)


def test_literal_even_kernel_rejected(chain3):
    with pytest.raises(ValueError):
        literal_st_conv_reference(np.zeros((1, 2, 3)), np.zeros((6, 1, 1)), chain3, "spatial", 2)


# ---------------------------------------------------------------- units


def _unit(c_in, c_out, stride, n=5, residual=True, norm=True, seed=0, strategy="spatial"):
    rng = np.random.default_rng(seed)
    layout = random_tree(rng, n)
    pa = normalized_adjacency(layout, strategy)
    unit = StgcnUnit(c_in, c_out, stride, pa.num_labels, n, 3, rng, residual=residual, norm=norm)
    return unit, pa


def test_unit_stride_two_halves_time():
    unit, pa = _unit(3, 6, 2)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 8, 5)))
    assert unit(x, pa).shape == (2, 6, 4, 5)


def test_unit_zero_conv_weights_passes_relu_of_input():
    unit, pa = _unit(4, 4, 1, norm=False)
    unit.spatial_weight.data[:] = 0
    unit.temporal_weight.data[:] = 0
    x = np.random.default_rng(2).normal(size=(2, 4, 6, 5))
    np.testing.assert_array_equal(unit(Tensor(x), pa).data, np.maximum(x, 0))


@pytest.mark.parametrize("seed", range(5))
def test_stride_two_residual_reaches_every_frame(seed):
    rng = np.random.default_rng(seed)
    unit, pa = _unit(3, 6, 2, seed=seed)
    t = int(rng.integers(4, 12))
    x = Tensor(rng.normal(size=(2, 3, t, 5)), requires_grad=True)
    out = unit(x, pa)
    backward(tsum(out * Tensor(rng.normal(size=out.shape))))
    per_frame = np.abs(x.grad).sum(axis=(0, 1, 3))
    assert np.all(per_frame > 0)


@pytest.mark.parametrize("case", [(3, 4, 1, False), (4, 4, 1, True), (3, 5, 2, True), (4, 4, 2, True)])
@pytest.mark.parametrize("training", [True, False])
def test_unit_gradcheck(case, training):
    c_in, c_out, stride, residual = case
    unit, pa = _unit(c_in, c_out, stride, n=4, residual=residual, seed=c_in + stride)
    rng = np.random.default_rng(7)
    for _, bn in unit.norm_states():
        bn.running_mean[:] = rng.normal(size=bn.shape)
        bn.running_var[:] = rng.uniform(0.5, 2.0, size=bn.shape)
    x = Tensor(rng.normal(size=(3, c_in, 5, 4)), requires_grad=True)
    params = [p for _, p in unit.named_parameters()]

    def f(x_, *ps):
        return unit(x_, pa, training)

    assert max(check_gradients(f, [x] + params)) < 1e-4


# ---------------------------------------------------------------- network


@pytest.mark.parametrize("depth,units", [("normal", 10), ("shallow", 7), ("deeper", 12)])
def test_network_depths(depth, units):
    net = build_network(NetworkConfig(depth=depth))
    assert len(net.units) == units
    assert sum(u.stride == 2 for u in net.units) == 2
    assert net.units[0].residual == "none"


def test_normal_channel_trace():
    net = build_network(NetworkConfig())
    assert net.channel_trace() == [3, 64, 64, 64, 64, 128, 128, 128, 256, 256, 256]


@pytest.mark.parametrize("t", [4, 30, 60])
def test_embedding_length(t):
    net = build_network(NetworkConfig(depth="shallow", dtype="float32"))
    x = np.random.default_rng(t).normal(size=(3, t, 18))
    assert embed(net, x).shape == (256,)


def test_embed_deterministic_and_short_input():
    net = build_network(NetworkConfig(depth="shallow", dtype="float32"), seed=3)
    x = np.random.default_rng(0).normal(size=(3, 12, 18))
    assert embed(net, x).tobytes() == embed(net, x.copy()).tobytes()
    with pytest.raises(SequenceTooShortError):
        embed(net, x[:, :3])


def test_every_parameter_gets_gradient():
    layout = random_tree(np.random.default_rng(9), 6)
    net = build_network(NetworkConfig(depth="shallow"), layout, seed=1)
    rng = np.random.default_rng(2)
    net.zero_grad()
    out = net.forward(rng.normal(size=(4, 3, 8, 6)), training=True)
    backward(tsum(out * Tensor(rng.normal(size=out.shape))), net.parameters())
    dead = [name for name, p in net.named_parameters().items() if not np.any(p.grad != 0)]
    assert dead == []


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(depth="huge")
    with pytest.raises(ValueError):
        NetworkConfig(partition="random")
    with pytest.raises(ValueError):
        NetworkConfig(temporal_kernel=4)
