"""Sequence encoder mapping a user's recent items to one or more boxes.

Pipeline: embedding lookup -> bidirectional LSTM -> self-attention whose
values are the raw embeddings -> masked pooling -> (dropout) -> key-value
memory read -> dense heads. Centers come from the pooled vector, offsets
from the memory readout through a relu.

All stages work on a batch of windows ``(B, L)`` of item ids where id 0 is
padding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Graph, Tensor
from .errors import InvalidArgumentError
from .geometry import MODES, BoxSet, DistanceParams

POOLINGS = ("mean", "sum", "min", "max")
ABLATIONS = ("none", "no-nn")
PAD = 0


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture plus the scoring settings a trained model is tied to."""

    d: int = 100
    L: int = 5
    M: int = 1
    mode: str = "single"
    N: int = 20
    pooling: str = "mean"
    dropout_rate: float = 0.0
    ablation: str = "none"
    freeze_offsets: bool = False
    gamma: float = 0.5
    alpha: float = 200.0
    use_additional: bool = False
    init_std: float = 0.1

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise InvalidArgumentError("d must be an even integer >= 2")
        if self.L < 1 or self.N < 1 or self.M < 1:
            raise InvalidArgumentError("L, N and M must be >= 1")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        if self.mode == "single" and self.M != 1:
            raise InvalidArgumentError("single mode requires M=1")
        if self.pooling not in POOLINGS:
            raise InvalidArgumentError(f"pooling must be one of {POOLINGS}")
        if self.ablation not in ABLATIONS:
            raise InvalidArgumentError(f"ablation must be one of {ABLATIONS}")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1)")
        # validates gamma/alpha
        self.distance_params

    @property
    def hidden(self):
        return self.d // 2

    @property
    def n_centers(self):
        return 1 if self.mode in ("single", "concentric") else self.M

    @property
    def distance_params(self):
        return DistanceParams(self.gamma, self.alpha, self.use_additional)


def param_shapes(config: EncoderConfig, n_items: int) -> dict[str, tuple]:
    """Parameter names and shapes; ``n_items`` excludes the padding row."""
    d, h, N, M = config.d, config.hidden, config.N, config.M
    shapes = {"item_embeddings": (n_items + 1, d)}
    for direction in ("fwd", "bwd"):
        shapes[f"lstm_{direction}_wx"] = (d, 4 * h)
        shapes[f"lstm_{direction}_wh"] = (h, 4 * h)
        shapes[f"lstm_{direction}_b"] = (4 * h,)
    shapes["attn_w"] = (d, d)
    shapes["attn_b"] = (d,)
    shapes["key_matrix"] = (d, N)
    shapes["memory_matrix"] = (d, N)
    shapes["center_w"] = (d, config.n_centers * d)
    shapes["center_b"] = (config.n_centers * d,)
    shapes["offset_w"] = (d, M * d)
    shapes["offset_b"] = (M * d,)
    return shapes


def init_params(config: EncoderConfig, n_items: int, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    """Normal initialization; biases start at zero, the padding row stays zero."""
    params = {}
    for name, shape in param_shapes(config, n_items).items():
        if name.endswith("_b"):
            value = np.zeros(shape)
        elif name == "item_embeddings":
            value = rng.normal(0.0, config.init_std, size=shape)
            value[PAD] = 0.0
        else:
            value = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.value.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


def pad_window(items, L: int) -> np.ndarray:
    """Last ``L`` ids of ``items``, left-padded with the padding id."""
    items = list(items)[-L:]
    if not items:
        raise InvalidArgumentError("a window needs at least one interaction")
    return np.array([PAD] * (L - len(items)) + items, dtype=np.int64)


# -- stages -------------------------------------------------------------------


def embed_sequence(g: Graph, windows, params) -> Tensor:
    """``(B, L)`` ids -> ``(B, L, d)`` embeddings (zero rows for padding)."""
    return g.gather_rows(params["item_embeddings"], np.asarray(windows))


def _lstm_direction(g: Graph, S: Tensor, params, direction: str, reverse: bool) -> list:
    wx = params[f"lstm_{direction}_wx"]
    wh = params[f"lstm_{direction}_wh"]
    b = params[f"lstm_{direction}_b"]
    h_width = wh.shape[0]
    L = S.shape[-2]
    batch = S.shape[:-2]
    h = g._wrap(np.zeros(batch + (h_width,), dtype=S.dtype))
    c = h
    outputs = [None] * L
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        x_t = g.slice(S, (Ellipsis, t, slice(None)))
        z = g.add(g.add(g.matmul(x_t, wx), g.matmul(h, wh)), b)
        i = g.sigmoid(g.slice(z, (Ellipsis, slice(0, h_width))))
        f = g.sigmoid(g.slice(z, (Ellipsis, slice(h_width, 2 * h_width))))
        o = g.sigmoid(g.slice(z, (Ellipsis, slice(2 * h_width, 3 * h_width))))
        cand = g.tanh(g.slice(z, (Ellipsis, slice(3 * h_width, 4 * h_width))))
        c = g.add(g.mul(f, c), g.mul(i, cand))
        h = g.mul(o, g.tanh(c))
        outputs[t] = h
    return outputs


def bilstm(g: Graph, S: Tensor, params) -> Tensor:
    """``(B, L, d)`` -> ``(B, L, d)``: forward and backward halves of width d/2."""
    fwd = _lstm_direction(g, S, params, "fwd", reverse=False)
    bwd = _lstm_direction(g, S, params, "bwd", reverse=True)
    steps = [g.concat([hf, hb], axis=-1) for hf, hb in zip(fwd, bwd)]
    return g.stack(steps, axis=-2)


def self_attention(g: Graph, S_prime: Tensor, S: Tensor, params, valid=None) -> Tensor:
    """Scaled dot-product attention; queries/keys from tanh(affine(S')), values are S.

    Returns the attended sequence. Padding columns are masked out of every
    row, so each attention row is a distribution over valid positions.
    """
    weights = attention_weights(g, S_prime, params, valid)
    return g.matmul(weights, S)


def attention_weights(g: Graph, S_prime: Tensor, params, valid=None) -> Tensor:
    """Row-stochastic ``(B, L, L)`` attention matrix."""
    d = S_prime.shape[-1]
    f = g.tanh(g.add(g.matmul(S_prime, params["attn_w"]), params["attn_b"]))
    logits = g.scale(g.matmul(f, g.transpose(f)), 1.0 / math.sqrt(d))
    mask = None if valid is None else np.broadcast_to(np.asarray(valid)[..., None, :], logits.shape)
    return g.softmax_rows(logits, mask=mask)


def pool(g: Graph, a: Tensor, pooling: str, valid) -> Tensor:
    """Pool ``(B, L, d)`` over valid rows only -> ``(B, d)``."""
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != a.shape[:-1]:
        raise InvalidArgumentError(f"mask {valid.shape} does not match rows {a.shape[:-1]}")
    counts = valid.sum(axis=-1)
    if np.any(counts == 0):
        raise InvalidArgumentError("pooling needs at least one valid row")
    if pooling in ("mean", "sum"):
        weights = valid.astype(a.dtype)
        if pooling == "mean":
            weights = weights / counts[..., None].astype(a.dtype)
        return g.reduce_sum(g.mul(a, weights[..., None]), axis=-2)
    mask = np.broadcast_to(valid[..., None], a.shape)
    if pooling == "min":
        return g.reduce_min(a, axis=-2, mask=mask)
    if pooling == "max":
        return g.reduce_max(a, axis=-2, mask=mask)
    raise InvalidArgumentError(f"unknown pooling {pooling!r}")


def memory_read(g: Graph, s: Tensor, params) -> tuple[Tensor, Tensor]:
    """Attentive read: ``k = softmax(s K)``, ``m = k memory^T``. Returns (m, k)."""
    k = g.softmax_rows(g.matmul(s, params["key_matrix"]))
    m = g.matmul(k, g.transpose(params["memory_matrix"]))
    return m, k


@dataclass
class EncodedBoxes:
    """Graph-side boxes: ``centers`` is (B, n_centers, d), ``offsets`` (B, M, d)."""

    centers: Tensor
    offsets: Tensor
    mode: str

    def to_boxsets(self) -> list[BoxSet]:
        c = self.centers.value.astype(np.float64)
        f = self.offsets.value.astype(np.float64)
        return [BoxSet.from_arrays(self.mode, ci, fi) for ci, fi in zip(c, f)]


def build_boxes(g: Graph, s: Tensor, m: Tensor, config: EncoderConfig, params) -> EncodedBoxes:
    batch = s.shape[:-1]
    d = config.d
    centers = g.add(g.matmul(s, params["center_w"]), params["center_b"])
    centers = g.reshape(centers, batch + (config.n_centers, d))
    if config.freeze_offsets:
        offsets = g._wrap(np.zeros(batch + (config.M, d), dtype=s.dtype))
    else:
        offsets = g.relu(g.add(g.matmul(m, params["offset_w"]), params["offset_b"]))
        offsets = g.reshape(offsets, batch + (config.M, d))
    return EncodedBoxes(centers, offsets, config.mode)


def encode_user(g: Graph, windows, config: EncoderConfig, params, train=False,
                rng: np.random.Generator | None = None) -> EncodedBoxes:
    """Full pipeline for a batch of padded windows ``(B, L)``."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    valid = windows != PAD
    if np.any(valid.sum(axis=-1) == 0):
        raise InvalidArgumentError("every window needs at least one interaction")
    S = embed_sequence(g, windows, params)
    if config.ablation == "no-nn":
        s = pool(g, S, "mean", valid)
    else:
        S_prime = bilstm(g, S, params)
        a = self_attention(g, S_prime, S, params, valid)
        s = pool(g, a, config.pooling, valid)
    s = g.dropout_mask(s, config.dropout_rate, rng, train)
    m, _ = memory_read(g, s, params)
    return build_boxes(g, s, m, config, params)


def point_view(config: EncoderConfig) -> EncoderConfig:
    """Same parameters, offsets forced to zero at encode time."""
    return replace(config, freeze_offsets=True)


# -- differentiable distances ---------------------------------------------------


def box_distances(g: Graph, boxes: EncodedBoxes, items: Tensor, params: DistanceParams) -> Tensor:
    """Distances from each user's boxes to ``items`` of shape (B, P, d) -> (B, P)."""
    B, P, d = items.shape
    c = g.reshape(boxes.centers, (B, 1) + boxes.centers.shape[1:])
    f = g.reshape(boxes.offsets, (B, 1) + boxes.offsets.shape[1:])
    v = g.reshape(items, (B, P, 1, d))
    lower = g.sub(c, f)
    upper = g.add(c, f)
    p = g.clamp(v, lower, upper)
    out = g.squared_norm(g.sub(p, v), axis=-1)
    inside = g.squared_norm(g.sub(p, c), axis=-1)
    if boxes.mode == "concentric":
        dist = g.add(g.reduce_sum(out, axis=-1), g.scale(g.reduce_min(inside, axis=-1), params.gamma))
    else:
        per_box = g.add(out, g.scale(inside, params.gamma))
        dist = g.reduce_min(per_box, axis=-1)
    if params.use_additional:
        spread = g.squared_norm(f, axis=-1)
        gate = g.scale(g.sub(g.sigmoid(g.scale(out, params.alpha)), 0.5), 2.0)
        extra = g.reduce_max(g.mul(gate, spread), axis=-1)
        dist = g.add(dist, extra)
    return dist
