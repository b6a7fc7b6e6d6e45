"""Hierarchical attention network over tabular features.

Pipeline for one input row ``x`` (length ``d``):

* per-feature tokens ``h_i = x_i * emb_i + pos_i`` (``k_embed`` wide), with
  the identity embedding stored as ``pos_i = pos_scale * feat_pos_i``;
* local attention inside contiguous groups of ``group_size`` features, scored
  by ``tanh(h_i . w_a1 + b_a1)`` and softmaxed within the group;
* global scaled dot-product self-attention across the group vectors,
  followed by a tanh scorer that pools the mixed group tokens;
* cross attention of the pooled vector against every feature token;
* sigmoid feature gates;
* a one-hidden-layer classifier on ``[pooled | sum_i a_i g_i h_i | E(x~)]``
  where ``a`` is the hierarchical (global x local) feature distribution and
  ``E(x~) = relu(W_e x~ + b_e)`` embeds the attention-scaled input
  ``x~_i = d * a_i * x_i`` (equal to ``x`` under uniform attention).

A feature's identity embedding only receives gradient through its own
attention weight, which is about ``1/d``. ``pos_scale`` (default
``sqrt(d) / 2``) multiplies the stored table so that plain SGD moves those
rows at a rate comparable to the dense weights; initial effective values are
unchanged. The cross-attention projections only learn through the small
consistency term, whose gradient per score is also about ``1/d``; they are
stored divided by ``cross_scale`` (default ``2 sqrt(d)``) for the same reason.

Everything is batched: ``x`` may be ``(d,)`` or ``(B, d)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .numerics import Rng, Tensor


@dataclass(frozen=True)
class HainConfig:
    d: int
    n_classes: int
    k_embed: int = 8
    group_size: int = 16
    d_k: int = 8
    hidden: int = 32
    d_embed: int = 16
    seed: int = 0
    pos_scale: float | None = None
    cross_scale: float | None = None

    def __post_init__(self):
        if self.pos_scale is None:
            object.__setattr__(self, "pos_scale", math.sqrt(self.d) / 2.0)
        if self.cross_scale is None:
            object.__setattr__(self, "cross_scale", 2.0 * math.sqrt(self.d))
        if not (self.pos_scale > 0 and self.cross_scale > 0):
            raise ContractError("pos_scale and cross_scale must be positive")
        if self.d < 1 or self.group_size < 1 or self.n_classes < 2:
            raise ContractError(f"invalid HainConfig: {self}")
        if min(self.k_embed, self.d_k, self.hidden, self.d_embed) < 1:
            raise ContractError(f"invalid HainConfig widths: {self}")

    @property
    def n_groups(self) -> int:
        return math.ceil(self.d / self.group_size)

    def group_of(self) -> np.ndarray:
        """Group index of every feature (contiguous blocks)."""
        return np.arange(self.d) // self.group_size

    def to_dict(self) -> dict:
        return asdict(self)


# name -> (shape builder, (fan_in, fan_out) builder); None fans mark biases
def _param_layout(cfg: HainConfig) -> dict:
    k, dk = cfg.k_embed, cfg.d_k
    head_in = 2 * k + cfg.d_embed
    return {
        "W_e": ((cfg.d_embed, cfg.d), (cfg.d, cfg.d_embed)),
        "b_e": ((cfg.d_embed,), None),
        # embedding tables map a scalar feature value to k dims, hence fan (1, k)
        "feat_emb": ((cfg.d, k), (1, k)),
        "feat_pos": ((cfg.d, k), (1, k)),
        "w_a1": ((k,), (k, 1)),
        "b_a1": ((1,), None),
        "W_q2": ((k, dk), (k, dk)),
        "W_k2": ((k, dk), (k, dk)),
        "W_v2": ((k, k), (k, k)),
        "w_a2": ((k,), (k, 1)),
        "b_a2": ((1,), None),
        "W_q3": ((k, dk), (k, dk)),
        "W_k3": ((k, dk), (k, dk)),
        "w_g": ((k,), (k, 1)),
        "b_g": ((1,), None),
        "W_h": ((head_in, cfg.hidden), (head_in, cfg.hidden)),
        "b_h": ((cfg.hidden,), None),
        "W_out": ((cfg.hidden, cfg.n_classes), (cfg.hidden, cfg.n_classes)),
        "b_out": ((cfg.n_classes,), None),
    }


PARAM_NAMES = tuple(_param_layout(HainConfig(d=1, n_classes=2)).keys())


@dataclass
class HainParams:
    """Named float64 arrays, in a fixed canonical order."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "HainParams":
        return HainParams({k: v.copy() for k, v in self.arrays.items()})

    def bit_equal(self, other: "HainParams") -> bool:
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(v, other.arrays[k]) and v.tobytes() == other.arrays[k].tobytes()
            for k, v in self.arrays.items())

    def validate(self, cfg: HainConfig) -> None:
        layout = _param_layout(cfg)
        if list(layout) != list(self.arrays):
            raise ShapeError(f"parameter names {list(self.arrays)} do not match layout")
        for name, (shape, _) in layout.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.arrays[name].shape}")
            if not np.all(np.isfinite(self.arrays[name])):
                raise ContractError(f"{name} has non-finite entries")


def _stored_scale(cfg: HainConfig, name: str) -> float:
    """Factor applied to a stored array in the forward pass (1 for most)."""
    if name == "feat_pos":
        return cfg.pos_scale
    if name in ("W_q3", "W_k3"):
        return cfg.cross_scale
    return 1.0


def glorot_bound(fans) -> float:
    fan_in, fan_out = fans
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(cfg: HainConfig, rng: Rng | None = None) -> HainParams:
    """Glorot-uniform weights, zero biases; one RNG sub-stream per matrix."""
    rng = rng if rng is not None else Rng(cfg.seed)
    arrays = {}
    for name, (shape, fans) in _param_layout(cfg).items():
        if fans is None:
            arrays[name] = np.zeros(shape)
        else:
            a = glorot_bound(fans)
            a /= _stored_scale(cfg, name)
            arrays[name] = rng.stream("init", name).uniform(-a, a, size=shape)
    return HainParams(arrays)


def param_bounds(cfg: HainConfig) -> dict[str, float]:
    """Init bound per stored array (0.0 for biases)."""
    out = {name: (0.0 if fans is None else glorot_bound(fans))
           for name, (_, fans) in _param_layout(cfg).items()}
    return {name: a / _stored_scale(cfg, name) for name, a in out.items()}


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------

@dataclass
class AttentionTrace:
    """Attention distributions of one forward pass (batched on axis 0)."""

    alpha_local: np.ndarray      # (B, d) local weights, each group a simplex
    alpha_global: np.ndarray     # (B, G)
    alpha_cross: np.ndarray      # (B, d)
    alpha_combined: np.ndarray   # (B, d)
    gates: np.ndarray            # (B, d)
    global_matrix: np.ndarray    # (B, G, G) row-stochastic

    def row(self, i: int) -> "AttentionTrace":
        return AttentionTrace(*(getattr(self, f)[i] for f in self.__dataclass_fields__))


@dataclass
class ForwardOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    trace: AttentionTrace
    embedded: np.ndarray


class Graph:
    """Tensors of one forward episode, keyed by role."""

    def __init__(self, cfg: HainConfig, tensors: dict[str, Tensor], x: Tensor,
                 params: dict[str, Tensor]):
        self.cfg = cfg
        self.t = tensors
        self.x = x
        self.params = params

    def __getitem__(self, key: str) -> Tensor:
        return self.t[key]

    def output(self, squeeze: bool = False) -> ForwardOutput:
        t = self.t
        pick = (lambda a: a[0]) if squeeze else (lambda a: a)
        trace = AttentionTrace(
            alpha_local=pick(t["alpha_local"].value),
            alpha_global=pick(t["alpha_global"].value),
            alpha_cross=pick(t["alpha_cross"].value),
            alpha_combined=pick(t["alpha_combined"].value),
            gates=pick(t["gates"].value),
            global_matrix=pick(t["A2"].value),
        )
        return ForwardOutput(
            logits=pick(t["logits"].value),
            probabilities=pick(t["probs"].value),
            trace=trace,
            embedded=pick(t["embedded"].value),
        )


def param_tensors(params: HainParams, requires_grad: bool = False) -> dict[str, Tensor]:
    make = nx.variable if requires_grad else nx.constant
    return {k: make(v) for k, v in params.items()}


def embed_tensor(p: dict[str, Tensor], x: Tensor) -> Tensor:
    return nx.relu(nx.matmul(x, nx.swapaxes(p["W_e"], 0, 1)) + p["b_e"])


def local_attention_tensor(cfg: HainConfig, p, H: Tensor):
    """Group-wise softmax of tanh scores; returns (alpha_local (B,d), group vectors (B,G,k))."""
    B, d, k = H.shape
    G, m = cfg.n_groups, cfg.group_size
    pad = G * m - d
    scores = nx.tanh(nx.matmul(H, p["w_a1"]) + p["b_a1"])            # (B, d)
    Hp = H
    if pad:
        scores = nx.concat([scores, nx.constant(np.zeros((B, pad)))], axis=1)
        Hp = nx.concat([H, nx.constant(np.zeros((B, pad, k)))], axis=1)
    valid = (np.arange(G * m) < d).reshape(G, m)
    alpha = nx.softmax(nx.reshape(scores, (B, G, m)), axis=-1, mask=valid)
    groups = nx.tsum(nx.expand_dims(alpha, -1) * nx.reshape(Hp, (B, G, m, k)), axis=2)
    alpha_flat = nx.reshape(alpha, (B, G * m))
    if pad:
        alpha_flat = alpha_flat[:, :d]
    return alpha_flat, groups


def global_attention_tensor(cfg: HainConfig, p, groups: Tensor, mask=None):
    """Self-attention across group tokens then tanh-scored pooling."""
    scale = 1.0 / math.sqrt(cfg.d_k)
    q = nx.matmul(groups, p["W_q2"])
    kk = nx.matmul(groups, p["W_k2"])
    v = nx.matmul(groups, p["W_v2"])
    A2 = nx.softmax(nx.matmul(q, nx.swapaxes(kk, -1, -2)) * scale, axis=-1, mask=mask)
    mixed = nx.matmul(A2, v)                                          # (B, G, k)
    alpha_global = nx.softmax(nx.tanh(nx.matmul(mixed, p["w_a2"]) + p["b_a2"]), axis=-1)
    pooled = nx.tsum(nx.expand_dims(alpha_global, -1) * mixed, axis=1)  # (B, k)
    return A2, mixed, alpha_global, pooled


def cross_attention_tensor(cfg: HainConfig, p, pooled: Tensor, H: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(cfg.d_k)
    c = cfg.cross_scale
    q = nx.matmul(pooled, p["W_q3"] * c)                              # (B, dk)
    keys = nx.matmul(H, p["W_k3"] * c)                                # (B, d, dk)
    scores = nx.matmul(keys, nx.expand_dims(q, -1))                   # (B, d, 1)
    scores = nx.reshape(scores, scores.shape[:2]) * scale
    return nx.softmax(scores, axis=-1)


def build_graph(cfg: HainConfig, p: dict[str, Tensor], x: Tensor,
                global_mask: np.ndarray | None = None) -> Graph:
    """Record the full forward pass for a batch ``x`` of shape (B, d)."""
    if x.ndim != 2 or x.shape[1] != cfg.d:
        raise ShapeError(f"expected input of shape (B, {cfg.d}), got {x.shape}")
    B, d = x.shape
    t: dict[str, Tensor] = {}
    H = nx.expand_dims(x, -1) * p["feat_emb"] + p["feat_pos"] * cfg.pos_scale  # (B, d, k)
    t["H"] = H
    t["alpha_local"], groups = local_attention_tensor(cfg, p, H)
    t["A2"], _, t["alpha_global"], pooled = global_attention_tensor(cfg, p, groups, global_mask)
    t["pooled"] = pooled
    t["alpha_cross"] = cross_attention_tensor(cfg, p, pooled, H)

    spread = t["alpha_global"][:, cfg.group_of()] * t["alpha_local"]
    t["alpha_combined"] = spread / nx.tsum(spread, axis=1, keepdims=True)
    t["gates"] = nx.sigmoid(nx.matmul(H, p["w_g"]) + p["b_g"])        # (B, d)

    # relevance is 1 per feature under uniform attention
    t["relevance"] = t["alpha_combined"] * float(d)
    t["embedded"] = embed_tensor(p, x * t["relevance"])
    weights = nx.expand_dims(t["alpha_combined"] * t["gates"], -1)
    attended = nx.tsum(weights * H, axis=1)                           # (B, k)
    z = nx.concat([pooled, attended, t["embedded"]], axis=1)
    hidden = nx.relu(nx.matmul(z, p["W_h"]) + p["b_h"])
    t["logits"] = nx.matmul(hidden, p["W_out"]) + p["b_out"]
    t["probs"] = nx.softmax(t["logits"], axis=-1)
    return Graph(cfg, t, x, p)


def _as_batch(cfg: HainConfig, x) -> tuple[np.ndarray, bool]:
    x = nx.as_array(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.d:
        raise ShapeError(f"expected input of length {cfg.d}, got shape {x.shape}")
    return x, single


def forward(cfg: HainConfig, params: HainParams, x, global_mask=None) -> ForwardOutput:
    xb, single = _as_batch(cfg, x)
    g = build_graph(cfg, param_tensors(params), nx.constant(xb), global_mask)
    return g.output(squeeze=single)


def embed(cfg: HainConfig, params: HainParams, x) -> np.ndarray:
    """Dense embedding ``relu(W_e x + b_e)`` of one row or a batch."""
    xb, single = _as_batch(cfg, x)
    out = embed_tensor(param_tensors(params), nx.constant(xb)).value
    return out[0] if single else out


def local_attention(cfg: HainConfig, params: HainParams, feature_embeddings):
    """Local attention for one row's feature tokens (d, k_embed)."""
    H = nx.constant(nx.as_array(feature_embeddings)[None])
    alpha, groups = local_attention_tensor(cfg, param_tensors(params), H)
    return alpha.value[0], groups.value[0]


def global_attention(cfg: HainConfig, params: HainParams, group_vectors, mask=None):
    """Returns (A2, alpha_global, pooled) for one row's group vectors (G, k_embed)."""
    gv = nx.constant(nx.as_array(group_vectors)[None])
    A2, _, ag, pooled = global_attention_tensor(cfg, param_tensors(params), gv, mask)
    return A2.value[0], ag.value[0], pooled.value[0]


def cross_attention(cfg: HainConfig, params: HainParams, pooled, feature_embeddings):
    H = nx.constant(nx.as_array(feature_embeddings)[None])
    q = nx.constant(nx.as_array(pooled)[None])
    return cross_attention_tensor(cfg, param_tensors(params), q, H).value[0]


def feature_tokens(cfg: HainConfig, params: HainParams, x) -> np.ndarray:
    """Per-feature hidden tokens ``h_i = x_i * emb_i + pos_i``."""
    x = nx.as_array(x)
    return x[..., None] * params["feat_emb"] + params["feat_pos"] * cfg.pos_scale


def logit_input_gradient(cfg: HainConfig, params: HainParams, x, target) -> tuple[ForwardOutput, np.ndarray]:
    """Forward pass plus d logit[target] / d x for every row of ``x``.

    ``target`` is a class index or one index per row. Rows are independent,
    so one backward pass over the summed target logits yields all of them.
    """
    xb, single = _as_batch(cfg, x)
    xt = nx.variable(xb)
    g = build_graph(cfg, param_tensors(params), xt)
    target = np.broadcast_to(np.asarray(target, dtype=int), (xb.shape[0],))
    selector = np.zeros(g["logits"].shape)
    selector[np.arange(xb.shape[0]), target] = 1.0
    nx.backward(nx.tsum(g["logits"] * selector))
    out = g.output(squeeze=single)
    grads = xt.grad if xt.grad is not None else np.zeros_like(xb)
    return out, (grads[0] if single else grads)
