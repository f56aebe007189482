import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tgtbench.diffcore import Tape, Tensor, backward, ops
from tgtbench.netgen import ChannelBatch, ChannelInstance, gen_dataset
from tgtbench.tgt import (
    TgtConfig,
    attention_maps,
    encode_batch,
    encode_graph,
    forward,
    forward_encoded,
    init_params,
    load_params,
    num_params,
    param_shapes,
    predict_batch,
    save_params,
    tgt_layer,
    trainable_count_from_checkpoint,
    write_model_card,
)
from tgtbench.train import loss


def jittered(config, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    for t in params.tensors.values():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    params.buffers["node_bn.running_mean"][:] = rng.standard_normal(config.d) * 0.1
    params.buffers["edge_bn.running_var"][:] = rng.uniform(0.5, 2.0, config.d)
    return params


def channel_first(e, heads):
    """(B, n, n, d) edge embedding -> (d/H, B, H, n, n) per-head layout."""
    B, n, _, d = e.shape
    return np.ascontiguousarray(e.reshape(B, n, n, heads, d // heads).transpose(4, 0, 3, 1, 2))


# -- encoding ------------------------------------------------------------


def test_encoding_normalizes_to_unit_max():
    H = np.array([[5.0, 1.0], [2.0, 4.0]])
    enc = encode_graph(ChannelInstance(H))
    assert enc.edge_feats.max() == 1.0 and enc.norm_scale == 5.0


def test_encoding_hand_instance():
    H = np.array([[2.0, 1.0], [0.5, 4.0]])
    enc = encode_graph(ChannelInstance(H, weights=np.array([1.0, 0.5])))
    np.testing.assert_array_equal(enc.node_feats, [[0.5, 1.0], [1.0, 0.5]])
    np.testing.assert_array_equal(enc.edge_feats[..., 0], [[0.5, 0.25], [0.125, 1.0]])
    np.testing.assert_array_equal(enc.edge_feats[..., 1], [[0.5, 0.125], [0.25, 1.0]])
    # self-edges carry [h_ii, h_ii]
    np.testing.assert_array_equal(enc.edge_feats[1, 1], [1.0, 1.0])


def test_encoding_symmetric_channel():
    A = np.random.default_rng(0).uniform(0.1, 1, (4, 4))
    enc = encode_graph(ChannelInstance(A + A.T))
    np.testing.assert_array_equal(enc.edge_feats[..., 0], enc.edge_feats[..., 1])


def test_encoding_rejects_zero_channel():
    with pytest.raises(ValueError):
        encode_batch(np.zeros((1, 2, 2)), np.ones((1, 2)))


# -- parameters ----------------------------------------------------------


def test_default_parameter_count():
    config = TgtConfig()
    assert num_params(config) == 1408
    assert sum(int(np.prod(s)) for s in param_shapes(config).values()) == 1408


def test_unshared_triples_only_qkv():
    shared, unshared = TgtConfig(), TgtConfig(share_qkv=False)
    qkv = 3 * shared.heads * shared.head_dim**2
    assert num_params(unshared) - num_params(shared) == 2 * qkv


def test_count_matches_checkpoint_enumeration(tmp_path):
    config = TgtConfig(d=4, heads=2)
    params = init_params(config, np.random.default_rng(0))
    save_params(tmp_path / "m.ckpt", params, seed=0, epoch=0)
    assert trainable_count_from_checkpoint(tmp_path / "m.ckpt") == num_params(config) == params.count()


def test_config_validation():
    with pytest.raises(ValueError):
        TgtConfig(d=10, heads=3)
    with pytest.raises(ValueError):
        TgtConfig(layers=0)


def test_init_deterministic_and_gains():
    a = init_params(TgtConfig(d=8, heads=4), np.random.default_rng(3))
    b = init_params(TgtConfig(d=8, heads=4), np.random.default_rng(3))
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)
    for name, t in a.tensors.items():
        if name.endswith(".gain"):
            np.testing.assert_array_equal(t.data, 1.0)
    bound = 1 / math.sqrt(2)
    assert np.all(np.abs(a.tensors["node_embed.weight"].data) <= bound)


def test_checkpoint_round_trip(tmp_path):
    params = jittered(TgtConfig(d=8, heads=4))
    save_params(tmp_path / "m.ckpt", params, seed=1, epoch=3)
    back, header = load_params(tmp_path / "m.ckpt")
    assert header["epoch"] == 3 and back.config == params.config
    inst = gen_dataset([5], 1, 1, seed=0).instances[0]
    np.testing.assert_array_equal(forward(inst, back).p, forward(inst, params).p)


def test_forward_rejects_mismatched_config():
    params = init_params(TgtConfig(d=8, heads=4), np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(gen_dataset([3], 1, 1).instances[0], params, TgtConfig())


def test_model_card(tmp_path):
    params = init_params(TgtConfig(), np.random.default_rng(0))
    write_model_card(tmp_path / "card.txt", params, ["seed: 0"])
    text = (tmp_path / "card.txt").read_text()
    assert "trainable_parameters: 1408" in text and "seed: 0" in text


# -- layer oracles -------------------------------------------------------


def loop_layer(x, e, Q, K, V, gain, bias, slope, scale_dim):
    """Element-by-element evaluation of one attention round."""
    n, d = x.shape
    H, dh, _ = Q.shape
    out = np.zeros((n, d))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        q = [x[i, sl] @ Q[h] for i in range(n)]
        k = [x[j, sl] @ K[h] for j in range(n)]
        v = [x[j, sl] @ V[h] for j in range(n)]
        for i in range(n):
            logits = []
            for j in range(n):
                s = sum(q[i][c] * (k[j][c] + e[i, j, sl][c]) for c in range(dh)) / math.sqrt(scale_dim)
                logits.append(s if s >= 0 else slope * s)
            m = max(logits)
            w = [math.exp(s - m) for s in logits]
            total = sum(w)
            for j in range(n):
                out[i, sl] += (w[j] / total) * v[j]
    z = out + x
    mu = z.mean(-1, keepdims=True)
    var = ((z - mu) ** 2).mean(-1, keepdims=True)
    return (z - mu) / np.sqrt(var + 1e-5) * gain + bias


@pytest.mark.parametrize("d,heads", [(2, 1), (4, 2)])
def test_layer_matches_loop_oracle(d, heads):
    rng = np.random.default_rng(d)
    config = TgtConfig(d=d, heads=heads, layers=1)
    params = jittered(config, seed=d)
    x = rng.standard_normal((3, d))
    e = rng.standard_normal((3, 3, d))
    t = params.tensors
    expected = loop_layer(
        x, e, t["attn.q"].data, t["attn.k"].data, t["attn.v"].data,
        t["layer0.ln.gain"].data, t["layer0.ln.bias"].data, config.leaky_slope, d,
    )
    for fused in (True, False):
        got = tgt_layer(Tensor(x[None]), Tensor(channel_first(e[None], heads)), params, 0, fused=fused).data[0]
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_uniform_attention_for_identical_nodes():
    config = TgtConfig(d=4, heads=2, layers=1)
    params = jittered(config)
    maps = []
    x = np.tile(np.random.default_rng(0).standard_normal(4), (5, 1))[None]
    tgt_layer(Tensor(x), Tensor(np.zeros((2, 1, 2, 5, 5))), params, 0, capture=maps)
    np.testing.assert_allclose(maps[0], 0.2, rtol=1e-14)


def test_single_node_layer():
    config = TgtConfig(d=4, heads=2, layers=1)
    params = jittered(config)
    x = np.random.default_rng(1).standard_normal((1, 1, 4))
    e = np.random.default_rng(2).standard_normal((2, 1, 2, 1, 1))
    got = tgt_layer(Tensor(x), Tensor(e), params, 0).data
    V = params.tensors["attn.v"].data
    vx = np.concatenate([x[0, 0, :2] @ V[0], x[0, 0, 2:] @ V[1]])
    ref = ops.layer_norm(Tensor(vx + x[0, 0]), params.tensors["layer0.ln.gain"], params.tensors["layer0.ln.bias"]).data
    np.testing.assert_allclose(got[0, 0], ref, rtol=1e-13)


def test_fused_forward_matches_composed():
    config = TgtConfig(d=8, heads=4)
    params = jittered(config)
    batch = ChannelBatch.stack(gen_dataset([6], 1, 3, seed=1).instances)
    enc = encode_batch(batch.H, batch.weights)
    for training in (True, False):
        a = forward_encoded(enc, params, training=training, update_stats=False).data
        b = forward_encoded(enc, params, training=training, update_stats=False, fused=False).data
        np.testing.assert_allclose(a, b, rtol=1e-12)


# -- whole-model properties ----------------------------------------------


def test_zero_final_features_give_half_power():
    config = TgtConfig(d=8, heads=4, pmax=2.0)
    params = jittered(config)
    params.tensors["layer2.ln.gain"].data[:] = 0.0
    params.tensors["layer2.ln.bias"].data[:] = 0.0
    p = forward(ChannelInstance(gen_dataset([5], 1, 1).instances[0].H, pmax=2.0), params).p
    np.testing.assert_array_equal(p, 1.0)


def test_init_output_is_half():
    # unit layer-norm gains and zero biases sum to exactly zero
    params = init_params(TgtConfig(), np.random.default_rng(0))
    p = forward(gen_dataset([7], 1, 1).instances[0], params).p
    np.testing.assert_allclose(p, 0.5, atol=1e-12)


@given(seed=st.integers(0, 1000), n=st.integers(2, 9))
def test_permutation_equivariance(seed, n):
    params = jittered(TgtConfig(d=8, heads=4), seed=seed % 7)
    inst = gen_dataset([n], 1, 1, seed=seed).instances[0]
    perm = np.random.default_rng(seed).permutation(n)
    base = forward(inst, params).p
    np.testing.assert_allclose(forward(inst.permute(perm), params).p, base[perm], rtol=0, atol=1e-9)


def test_permutation_equivariance_training_mode():
    params = jittered(TgtConfig(d=8, heads=4))
    inst = gen_dataset([6], 1, 1, seed=3).instances[0]
    perm = np.array([5, 3, 1, 0, 2, 4])
    a = forward_encoded(encode_graph(inst), params, training=True, update_stats=False).data[0]
    b = forward_encoded(encode_graph(inst.permute(perm)), params, training=True, update_stats=False).data[0]
    np.testing.assert_allclose(b, a[perm], atol=1e-9)


def test_attention_rows_sum_to_one():
    params = jittered(TgtConfig())
    maps = attention_maps(gen_dataset([12], 1, 1, seed=2).instances[0], params)
    assert len(maps) == 3
    for m in maps:
        assert m.shape == (32, 12, 12)
        assert np.all(m >= 0)
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-12)


@given(seed=st.integers(0, 500))
def test_output_strictly_inside_box(seed):
    params = jittered(TgtConfig(d=8, heads=4, pmax=3.0), seed=seed % 5, scale=1.0)
    inst = ChannelInstance(gen_dataset([5], 1, 1, seed=seed).instances[0].H, pmax=3.0)
    p = forward(inst, params).p
    assert np.all(p > 0) and np.all(p < 3.0)


@pytest.mark.parametrize("factor", [2.0, 0.5, 1024.0, 2.0**-20])
def test_scale_invariance_exact_for_binary_scales(factor):
    params = jittered(TgtConfig(d=8, heads=4))
    inst = gen_dataset([6], 1, 1, seed=4).instances[0]
    np.testing.assert_array_equal(encode_graph(inst.scaled(factor)).edge_feats, encode_graph(inst).edge_feats)
    np.testing.assert_array_equal(forward(inst.scaled(factor), params).p, forward(inst, params).p)


@pytest.mark.parametrize("factor", [3.7, 1e-3, 12345.6])
def test_scale_invariance_general(factor):
    params = jittered(TgtConfig(d=8, heads=4))
    inst = gen_dataset([6], 1, 1, seed=4).instances[0]
    np.testing.assert_allclose(forward(inst.scaled(factor), params).p, forward(inst, params).p, rtol=1e-12)


def test_shared_gradient_is_sum_over_layers():
    shared_cfg = TgtConfig(d=4, heads=2)
    shared = jittered(shared_cfg, seed=5)
    unshared_cfg = TgtConfig(d=4, heads=2, share_qkv=False)
    state = {k: v.data.copy() for k, v in shared.tensors.items() if not k.startswith("attn.")}
    for layer in range(3):
        for m in "qkv":
            state[f"layer{layer}.attn.{m}"] = shared.tensors[f"attn.{m}"].data.copy()
    state.update(shared.buffers)
    from tgtbench.tgt import TgtParams

    unshared = TgtParams.from_state_dict(unshared_cfg, state)
    batch = ChannelBatch.stack(gen_dataset([5], 1, 2, seed=0).instances)
    grads = []
    for params in (shared, unshared):
        params.zero_grad()
        with Tape() as tape:
            value = loss(batch, params, training=True, update_stats=False)
        backward(tape, value)
        grads.append(params)
    for m in "qkv":
        total = sum(unshared.tensors[f"layer{l}.attn.{m}"].grad for l in range(3))
        np.testing.assert_allclose(shared.tensors[f"attn.{m}"].grad, total, rtol=1e-10, atol=1e-14)


def test_predict_batch_scales_with_pmax():
    params = jittered(TgtConfig(d=8, heads=4))
    H = gen_dataset([4], 1, 1, seed=0).instances[0].H
    unit = forward(ChannelInstance(H), params).p
    doubled = forward(ChannelInstance(H, pmax=2.0), params).p
    np.testing.assert_allclose(doubled, 2.0 * unit, rtol=1e-15)


def test_eval_batching_invariance():
    params = jittered(TgtConfig(d=8, heads=4))
    ds = gen_dataset([5], 2, 3, seed=9)
    batch = predict_batch(ChannelBatch.stack(ds.instances), params)
    for inst, p in zip(ds.instances, batch):
        np.testing.assert_array_equal(forward(inst, params).p, p)
