"""Truncated Graph Transformer for interference-channel power allocation.

The model sees each channel instance as a fully connected graph with self
loops. Node ``i`` carries ``[h_ii, w_i]``, edge ``(i, j)`` carries
``[h_ij, h_ji]`` (after scaling H so its largest entry is 1). Both are lifted
to width ``d`` by an affine map followed by batch norm, then run through
``layers`` rounds of multi-head cross attention that share one set of
per-head query/key/value maps. Each round ends with a residual layer norm.
The final node features are summed and squashed by a sigmoid into a power.

Weight matrices are stored input-major (``x @ W``), i.e. ``W = Q^T``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import ops
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .diffcore.tensor import Tensor
from .netgen import ChannelBatch, ChannelInstance
from .objective import PowerAllocation, pair_rates

NODE_FEATURES = 2
EDGE_FEATURES = 2


@dataclass(frozen=True)
class TgtConfig:
    d: int = 64
    heads: int = 32
    layers: int = 3
    leaky_slope: float = 0.2
    share_qkv: bool = True
    pmax: float = 1.0

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be at least 1")
        if not self.pmax > 0:
            raise ValueError("pmax must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class GraphEncoding:
    node_feats: np.ndarray  # (..., n, 2)
    edge_feats: np.ndarray  # (..., n, n, 2)
    norm_scale: np.ndarray | float


def encode_batch(H: np.ndarray, weights: np.ndarray) -> GraphEncoding:
    """Encode stacked channels (B, n, n) with weights (B, n)."""
    scale = H.max(axis=(-2, -1))
    if np.any(scale <= 0):
        raise ValueError("cannot encode an all-zero channel matrix")
    Hn = H / scale[..., None, None]
    direct = np.diagonal(Hn, axis1=-2, axis2=-1)
    node = np.stack([direct, weights], axis=-1)
    edge = np.stack([Hn, np.swapaxes(Hn, -1, -2)], axis=-1)
    return GraphEncoding(node, edge, scale)


def encode_graph(instance: ChannelInstance) -> GraphEncoding:
    enc = encode_batch(instance.H[None], instance.weights[None])
    return GraphEncoding(enc.node_feats[0], enc.edge_feats[0], float(enc.norm_scale[0]))


# -- parameters ----------------------------------------------------------


def _qkv_names(config: TgtConfig) -> list[str]:
    if config.share_qkv:
        return [f"attn.{m}" for m in "qkv"]
    return [f"layer{l}.attn.{m}" for l in range(config.layers) for m in "qkv"]


def param_shapes(config: TgtConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh = config.d, config.heads, config.head_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for part, fan_in in (("node", NODE_FEATURES), ("edge", EDGE_FEATURES)):
        shapes[f"{part}_embed.weight"] = (fan_in, d)
        shapes[f"{part}_embed.bias"] = (d,)
        shapes[f"{part}_bn.gain"] = (d,)
        shapes[f"{part}_bn.bias"] = (d,)
    for name in _qkv_names(config):
        shapes[name] = (h, dh, dh)
    for l in range(config.layers):
        shapes[f"layer{l}.ln.gain"] = (d,)
        shapes[f"layer{l}.ln.bias"] = (d,)
    return shapes


def num_params(config: TgtConfig) -> int:
    """Trainable parameter count, in closed form."""
    d, h, dh, L = config.d, config.heads, config.head_dim, config.layers
    embeds = 2 * (NODE_FEATURES * d + d + 2 * d)
    qkv = (1 if config.share_qkv else L) * 3 * h * dh * dh
    norms = 2 * d * L
    return embeds + qkv + norms


BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class TgtParams:
    config: TgtConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "TgtParams":
        return TgtParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
            {k: b.copy() for k, b in self.buffers.items()},
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.tensors.items()}
        state.update(self.buffers)
        return state

    @classmethod
    def from_state_dict(cls, config: TgtConfig, state: dict[str, np.ndarray]) -> "TgtParams":
        shapes = param_shapes(config)
        missing = set(shapes) - set(state)
        if missing:
            raise ValueError(f"state is missing tensors {sorted(missing)}")
        tensors = {}
        for name, shape in shapes.items():
            if tuple(state[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {state[name].shape}")
            tensors[name] = Tensor(np.array(state[name], dtype=np.float64), requires_grad=True, name=name)
        buffers = {k: np.array(v, dtype=np.float64) for k, v in state.items() if k.endswith(BUFFER_SUFFIXES)}
        return cls(config, tensors, buffers)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_params(config: TgtConfig, rng: np.random.Generator) -> TgtParams:
    """Affine weights ~ U(+-1/sqrt(fan_in)); norm gains 1, biases 0; running stats 0/1."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("_bn.gain", ".ln.gain")):
            data = np.ones(shape)
        elif name.endswith(("_bn.bias", ".ln.bias")):
            data = np.zeros(shape)
        elif "_embed." in name:
            bound = 1.0 / math.sqrt(NODE_FEATURES if name.startswith("node") else EDGE_FEATURES)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / math.sqrt(config.head_dim)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    buffers = {}
    for part in ("node", "edge"):
        buffers[f"{part}_bn.running_mean"] = np.zeros(config.d)
        buffers[f"{part}_bn.running_var"] = np.ones(config.d)
    return TgtParams(config, tensors, buffers)


# -- forward -------------------------------------------------------------


def _embed(feats, params: TgtParams, part: str, training: bool, update_stats: bool, fused: bool = True) -> Tensor:
    t = params.tensors
    if fused:
        return ops.affine_batch_norm(
            feats,
            t[f"{part}_embed.weight"],
            t[f"{part}_embed.bias"],
            t[f"{part}_bn.gain"],
            t[f"{part}_bn.bias"],
            params.buffers[f"{part}_bn.running_mean"],
            params.buffers[f"{part}_bn.running_var"],
            training=training,
            momentum=ops.BN_MOMENTUM if update_stats else None,
        )
    z = ops.add(ops.matmul(feats, t[f"{part}_embed.weight"]), t[f"{part}_embed.bias"])
    return ops.batch_norm(
        z,
        t[f"{part}_bn.gain"],
        t[f"{part}_bn.bias"],
        params.buffers[f"{part}_bn.running_mean"],
        params.buffers[f"{part}_bn.running_var"],
        training=training,
        momentum=ops.BN_MOMENTUM if update_stats else None,
    )


def tgt_layer(
    x: Tensor,
    edges: Tensor,
    params: TgtParams,
    layer: int,
    capture: list | None = None,
    fused: bool = True,
) -> Tensor:
    """One attention round.

    ``x`` is (B, n, d); ``edges`` is the edge embedding split per head and
    laid out channel-first, shape (d/H, B, H, n, n). ``fused=False`` routes through the generic
    primitives instead of the fused attention kernel.
    """
    config = params.config
    B, n, d = x.shape
    H, dh = config.heads, config.head_dim
    prefix = "attn" if config.share_qkv else f"layer{layer}.attn"
    t = params.tensors

    xh = ops.transpose(ops.reshape(x, (B, n, H, dh)), (0, 2, 1, 3))
    q = ops.matmul(xh, t[f"{prefix}.q"])
    k = ops.matmul(xh, t[f"{prefix}.k"])
    v = ops.matmul(xh, t[f"{prefix}.v"])
    if fused:
        heads_out = ops.edge_attention(q, k, v, edges, 1.0 / math.sqrt(d), config.leaky_slope, capture)
    else:
        # q_i . (k_j + e_ij) = q_i . k_j + q_i . e_ij
        node_term = ops.einsum("bhid,bhjd->bhij", q, k)
        edge_term = ops.einsum("bhid,dbhij->bhij", q, edges)
        logits = ops.mul(ops.add(node_term, edge_term), 1.0 / math.sqrt(d))
        if not np.all(np.isfinite(logits.data)):
            raise FloatingPointError(f"non-finite attention logits in layer {layer}")
        attn = ops.softmax(ops.leaky_relu(logits, config.leaky_slope), axis=-1)
        if capture is not None:
            capture.append(attn.data)
        heads_out = ops.matmul(attn, v)
    merged = ops.reshape(ops.transpose(heads_out, (0, 2, 1, 3)), (B, n, d))
    return ops.layer_norm(ops.add(merged, x), t[f"layer{layer}.ln.gain"], t[f"layer{layer}.ln.bias"])


def forward_encoded(
    enc: GraphEncoding,
    params: TgtParams,
    training: bool = False,
    update_stats: bool = True,
    capture: list | None = None,
    fused: bool = True,
) -> Tensor:
    """Batched forward pass on encoded graphs; returns powers of shape (B, n)."""
    config = params.config
    node = np.asarray(enc.node_feats)
    edge = np.asarray(enc.edge_feats)
    if node.ndim == 2:
        node, edge = node[None], edge[None]
    B, n, _ = node.shape
    H, dh = config.heads, config.head_dim

    x = _embed(Tensor(node), params, "node", training, update_stats, fused)
    e = _embed(Tensor(edge), params, "edge", training, update_stats, fused)
    edges = ops.transpose(ops.reshape(e, (B, n, n, H, dh)), (4, 0, 3, 1, 2))
    for layer in range(config.layers):
        x = tgt_layer(x, edges, params, layer, capture, fused)
    return ops.mul(ops.sigmoid(ops.sum(x, axis=-1)), config.pmax)


def check_compatible(params: TgtParams, config: TgtConfig) -> None:
    if params.config != config:
        raise ValueError("params were built for a different configuration")
    shapes = param_shapes(config)
    if set(shapes) != set(params.tensors) or any(params.tensors[k].shape != s for k, s in shapes.items()):
        raise ValueError("parameter tensors do not match the configuration")


def predict_batch(batch: ChannelBatch, params: TgtParams) -> np.ndarray:
    """Eval-mode powers for stacked instances, (B, n)."""
    p = forward_encoded(encode_batch(batch.H, batch.weights), params, training=False).data
    return p * (batch.pmax / params.config.pmax)[:, None]


def forward(instance: ChannelInstance, params: TgtParams, config: TgtConfig | None = None) -> PowerAllocation:
    if config is not None:
        check_compatible(params, config)
    p = predict_batch(ChannelBatch.stack([instance]), params)[0]
    return PowerAllocation(p, pair_rates(instance, p))


def attention_maps(instance: ChannelInstance, params: TgtParams) -> list[np.ndarray]:
    """Attention weights of every layer, each (H, n, n)."""
    maps: list[np.ndarray] = []
    forward_encoded(encode_graph(instance), params, training=False, capture=maps)
    return [m[0] for m in maps]


# -- persistence ---------------------------------------------------------


def save_params(path, params: TgtParams, seed: int | None = None, epoch: int | None = None, **extra) -> None:
    header = {
        "config": params.config.to_dict(),
        "config_hash": params.config.digest(),
        "seed": seed,
        "epoch": epoch,
        "buffers": sorted(params.buffers),
        **extra,
    }
    save_checkpoint(path, params.state_dict(), header)


def load_params(path) -> tuple[TgtParams, dict]:
    state, header = load_checkpoint(path)
    config = TgtConfig(**header["config"])
    if config.digest() != header.get("config_hash"):
        raise ValueError("checkpoint config hash does not match its stored config")
    return TgtParams.from_state_dict(config, state), header


def trainable_count_from_checkpoint(path) -> int:
    state, header = load_checkpoint(path)
    buffers = set(header.get("buffers", []))
    return sum(arr.size for name, arr in state.items() if name not in buffers)


def write_model_card(path, params: TgtParams, lines: Sequence[str] = ()) -> None:
    body = [
        "TGT model card",
        f"config: {json.dumps(params.config.to_dict(), sort_keys=True)}",
        f"config_hash: {params.config.digest()}",
        f"trainable_parameters: {num_params(params.config)}",
        *lines,
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(body) + "\n")
