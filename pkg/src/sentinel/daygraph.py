"""Temporal day graph and a two-layer GraphSAGE trained with weighted BCE.

Nodes are days. Edges run forward in time, ``t -> t+1`` and ``t -> t+7``, and
each node aggregates from its in-neighbours (past days), so nothing leaks from
the future. Forward and backward passes are written out by hand in numpy.

Two aggregators are available:

``mean``
    one ``W_neigh`` applied to the mean over all in-neighbours.
``typed``
    one ``W_neigh`` per edge kind (next-day, weekly), each applied to the mean
    over in-neighbours of that kind. Because every day has at most one
    in-neighbour of each kind this keeps "which day carried the signal"
    visible to the model; the plain mean cannot tell ``t-1`` from ``t-7``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CacheReadError, ContractError, DivergenceError

NEXT_DAY, WEEKLY = 0, 1
AGGREGATORS = ("mean", "typed")


@dataclass(frozen=True)
class DayGraph:
    n: int
    features: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)  # (E, 2) rows of (src, dst)
    kinds: np.ndarray = field(repr=False)  # (E,) NEXT_DAY or WEEKLY

    @property
    def in_dim(self) -> int:
        return self.features.shape[1]

    def relations(self, aggregator: str) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(src, dst, in-degree per node) for each neighbour relation the aggregator uses."""
        if aggregator == "mean":
            masks = [np.ones(len(self.kinds), dtype=bool)]
        elif aggregator == "typed":
            masks = [self.kinds == NEXT_DAY, self.kinds == WEEKLY]
        else:
            raise ContractError(f"unknown aggregator {aggregator!r}")
        out = []
        for m in masks:
            src, dst = self.edges[m, 0], self.edges[m, 1]
            deg = np.bincount(dst, minlength=self.n).astype(float)
            out.append((src, dst, deg))
        return out


def build_day_graph(features: np.ndarray) -> DayGraph:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError("need an n x d feature matrix with n >= 1")
    n = features.shape[0]
    nxt = [(t, t + 1) for t in range(n - 1)]
    wk = [(t, t + 7) for t in range(n - 7)]
    edges = np.array(nxt + wk, dtype=np.int64).reshape(-1, 2)
    kinds = np.array([NEXT_DAY] * len(nxt) + [WEEKLY] * len(wk), dtype=np.int8)
    return DayGraph(n, features, edges, kinds)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class SageLayer:
    w_self: np.ndarray   # (out, in)
    w_neigh: np.ndarray  # (relations, out, in)
    bias: np.ndarray     # (out,)


@dataclass
class SageParams:
    layers: list[SageLayer]
    head_w: np.ndarray   # (embed,)
    head_b: np.ndarray   # shape (1,) so it can be updated in place
    aggregator: str = "typed"

    @property
    def in_dim(self) -> int:
        return self.layers[0].w_self.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].w_self.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[1].w_self.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.w_self, layer.w_neigh, layer.bias]
        return out + [self.head_w, self.head_b]

    def copy(self) -> "SageParams":
        return SageParams(
            [SageLayer(l.w_self.copy(), l.w_neigh.copy(), l.bias.copy()) for l in self.layers],
            self.head_w.copy(),
            self.head_b.copy(),
            self.aggregator,
        )

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "SageParams":
        a = list(arrays)
        layers = [SageLayer(a[0], a[1], a[2]), SageLayer(a[3], a[4], a[5])]
        return SageParams(layers, a[6], a[7], self.aggregator)


def n_relations(aggregator: str) -> int:
    return {"mean": 1, "typed": 2}[aggregator]


def init_params(in_dim: int, hidden_dim: int, embed_dim: int, seed: int, aggregator: str = "typed") -> SageParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    r = n_relations(aggregator)

    def glorot(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    layers = []
    for fan_in, fan_out in ((in_dim, hidden_dim), (hidden_dim, embed_dim)):
        layers.append(SageLayer(
            glorot((fan_out, fan_in), fan_in, fan_out),
            glorot((r, fan_out, fan_in), fan_in, fan_out),
            np.zeros(fan_out),
        ))
    return SageParams(layers, glorot((embed_dim,), embed_dim, 1), np.zeros(1), aggregator)


def zero_params(in_dim: int, hidden_dim: int, embed_dim: int, aggregator: str = "typed") -> SageParams:
    r = n_relations(aggregator)
    layers = [
        SageLayer(np.zeros((hidden_dim, in_dim)), np.zeros((r, hidden_dim, in_dim)), np.zeros(hidden_dim)),
        SageLayer(np.zeros((embed_dim, hidden_dim)), np.zeros((r, embed_dim, hidden_dim)), np.zeros(embed_dim)),
    ]
    return SageParams(layers, np.zeros(embed_dim), np.zeros(1), aggregator)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _aggregate(h: np.ndarray, src: np.ndarray, dst: np.ndarray, deg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(h)
    np.add.at(out, dst, h[src])
    nz = deg > 0
    out[nz] /= deg[nz, None]
    return out


def _aggregate_T(g: np.ndarray, src: np.ndarray, dst: np.ndarray, deg: np.ndarray) -> np.ndarray:
    scaled = np.zeros_like(g)
    nz = deg > 0
    scaled[nz] = g[nz] / deg[nz, None]
    out = np.zeros_like(g)
    np.add.at(out, src, scaled[dst])
    return out


def _check_dims(g: DayGraph, p: SageParams) -> None:
    if g.in_dim != p.in_dim:
        raise ContractError(f"graph features have dim {g.in_dim}, params expect {p.in_dim}")
    if p.layers[1].w_self.shape[1] != p.hidden_dim or p.head_w.shape != (p.embed_dim,):
        raise ContractError("inconsistent parameter shapes")
    r = n_relations(p.aggregator)
    for layer in p.layers:
        if layer.w_neigh.shape != (r,) + layer.w_self.shape:
            raise ContractError(f"w_neigh shape {layer.w_neigh.shape} does not match aggregator {p.aggregator!r}")


def _forward(g: DayGraph, p: SageParams):
    _check_dims(g, p)
    rels = g.relations(p.aggregator)
    h = g.features
    cache = []
    for layer in p.layers:
        aggs = [_aggregate(h, *rel) for rel in rels]
        z = h @ layer.w_self.T + layer.bias
        for r, m in enumerate(aggs):
            z = z + m @ layer.w_neigh[r].T
        cache.append((h, aggs, z))
        h = np.maximum(z, 0.0)
    logits = h @ p.head_w + p.head_b[0]
    return h, logits, (rels, cache)


def sage_forward(g: DayGraph, p: SageParams) -> tuple[np.ndarray, np.ndarray]:
    """Node embeddings (n x embed_dim) and logits (n,)."""
    h, logits, _ = _forward(g, p)
    return h, logits


def node_embeddings(g: DayGraph, p: SageParams) -> np.ndarray:
    return sage_forward(g, p)[0]


def _backward(p: SageParams, h_out: np.ndarray, dlogits: np.ndarray, state) -> list[np.ndarray]:
    rels, cache = state
    grads_head_w = h_out.T @ dlogits
    grads_head_b = np.array([dlogits.sum()])
    dh = np.outer(dlogits, p.head_w)
    layer_grads = []
    for layer, (h_in, aggs, z) in zip(reversed(p.layers), reversed(cache)):
        dz = dh * (z > 0)
        dw_self = dz.T @ h_in
        dw_neigh = np.stack([dz.T @ m for m in aggs])
        db = dz.sum(axis=0)
        dh = dz @ layer.w_self
        for r, rel in enumerate(rels):
            dh = dh + _aggregate_T(dz @ layer.w_neigh[r], *rel)
        layer_grads.append([dw_self, dw_neigh, db])
    out = []
    for lg in reversed(layer_grads):
        out += lg
    return out + [grads_head_w, grads_head_b]


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _mask_indices(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ContractError("training mask is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise ContractError("training mask index out of range")
    return idx


def weighted_bce(logits, y, train_mask, pos_weight: float = 1.0) -> float:
    """Mean over masked nodes of pos_weight*y*softplus(-z) + (1-y)*softplus(z)."""
    logits = np.asarray(logits, dtype=float)
    idx = _mask_indices(train_mask, len(logits))
    z, t = logits[idx], np.asarray(y, dtype=float)[idx]
    return float(np.mean(pos_weight * t * _softplus(-z) + (1.0 - t) * _softplus(z)))


def _bce_grad(logits: np.ndarray, y: np.ndarray, idx: np.ndarray, pos_weight: float) -> np.ndarray:
    d = np.zeros_like(logits)
    z, t = logits[idx], y[idx]
    d[idx] = (-pos_weight * t * _sigmoid(-z) + (1.0 - t) * _sigmoid(z)) / len(idx)
    return d


def loss_and_grads(g: DayGraph, p: SageParams, y, train_mask, pos_weight: float = 1.0) -> tuple[float, list[np.ndarray]]:
    y = np.asarray(y, dtype=float)
    idx = _mask_indices(train_mask, g.n)
    h, logits, state = _forward(g, p)
    loss = weighted_bce(logits, y, idx, pos_weight)
    return loss, _backward(p, h, _bce_grad(logits, y, idx, pos_weight), state)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 64
    embed_dim: int = 32
    learning_rate: float = 1e-2
    epochs: int = 300
    pos_weight: float | None = None
    seed: int = 0
    aggregator: str = "typed"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.pos_weight is not None and not self.pos_weight > 0:
            raise ContractError("pos_weight must be > 0")
        if self.aggregator not in AGGREGATORS:
            raise ContractError(f"aggregator must be one of {AGGREGATORS}")


@dataclass
class TrainResult:
    params: SageParams
    losses: list[float]
    pos_weight: float


def default_pos_weight(y, train_mask) -> float:
    y = np.asarray(y)
    idx = _mask_indices(train_mask, len(y))
    pos = int(np.sum(y[idx] == 1))
    neg = len(idx) - pos
    if pos == 0 or neg == 0:
        raise ContractError("training mask needs at least one positive and one negative label")
    return neg / pos


def train_sage(g: DayGraph, y, train_mask, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Full-batch Adam on the masked weighted BCE. ``losses[0]`` is the initial loss."""
    pos_weight = default_pos_weight(y, train_mask) if cfg.pos_weight is None else cfg.pos_weight
    p = init_params(g.in_dim, cfg.hidden_dim, cfg.embed_dim, cfg.seed, cfg.aggregator)
    params = p.arrays()
    m = [np.zeros_like(a) for a in params]
    v = [np.zeros_like(a) for a in params]
    losses = []
    for epoch in range(cfg.epochs):
        loss, grads = loss_and_grads(g, p, y, train_mask, pos_weight)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, "loss")
        if not all(np.all(np.isfinite(gr)) for gr in grads):
            raise DivergenceError(epoch, "gradient")
        losses.append(loss)
        step = epoch + 1
        c1 = 1.0 - cfg.beta1**step
        c2 = 1.0 - cfg.beta2**step
        for a, gr, mi, vi in zip(params, grads, m, v):
            mi *= cfg.beta1
            mi += (1.0 - cfg.beta1) * gr
            vi *= cfg.beta2
            vi += (1.0 - cfg.beta2) * gr * gr
            a -= cfg.learning_rate * (mi / c1) / (np.sqrt(vi / c2) + cfg.adam_eps)
    final = weighted_bce(sage_forward(g, p)[1], y, train_mask, pos_weight)
    if not np.isfinite(final):
        raise DivergenceError(cfg.epochs, "loss")
    losses.append(final)
    return TrainResult(p, losses, pos_weight)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

GradFn = Callable[[DayGraph, SageParams, np.ndarray, np.ndarray, float], list[np.ndarray]]


def grad_check(g: DayGraph, p: SageParams, y, mask, eps: float = 1e-4, pos_weight: float = 1.0,
               grad_fn: GradFn | None = None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on exactly-zero gradients from reading as a large ratio.
    """
    if grad_fn is None:
        analytic = loss_and_grads(g, p, y, mask, pos_weight)[1]
    else:
        analytic = grad_fn(g, p, np.asarray(y), np.asarray(mask), pos_weight)
    base = [a.copy() for a in p.arrays()]
    worst = 0.0
    for k, arr in enumerate(base):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = weighted_bce(sage_forward(g, p.with_arrays(base))[1], y, mask, pos_weight)
            flat[i] = orig - eps
            minus = weighted_bce(sage_forward(g, p.with_arrays(base))[1], y, mask, pos_weight)
            flat[i] = orig
            num = (plus - minus) / (2 * eps)
            a = float(analytic[k].reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# params file
# --------------------------------------------------------------------------

PARAMS_MAGIC = b"SNTLSAGE"
PARAMS_VERSION = 1


def write_params(path: Path, p: SageParams, seed: int = 0, epochs: int = 0) -> None:
    agg = p.aggregator.encode("ascii")
    header = PARAMS_MAGIC + struct.pack("<H", PARAMS_VERSION) + struct.pack("<H", len(agg)) + agg
    header += struct.pack("<IIIIqI", p.in_dim, p.hidden_dim, p.embed_dim, n_relations(p.aggregator), seed, epochs)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in p.arrays())
    Path(path).write_bytes(header + body)


def read_params(path: Path) -> tuple[SageParams, int, int]:
    """Returns (params, seed, epochs)."""
    data = Path(path).read_bytes()
    if not data.startswith(PARAMS_MAGIC):
        raise CacheReadError(f"{path}: not a GraphSAGE params file")
    pos = len(PARAMS_MAGIC)
    version, alen = struct.unpack_from("<HH", data, pos)
    if version != PARAMS_VERSION:
        raise CacheReadError(f"{path}: params version {version}, expected {PARAMS_VERSION}")
    pos += 4
    aggregator = data[pos : pos + alen].decode("ascii")
    pos += alen
    d, hdim, edim, r, seed, epochs = struct.unpack_from("<IIIIqI", data, pos)
    pos += struct.calcsize("<IIIIqI")
    template = zero_params(d, hdim, edim, aggregator)
    arrays = []
    for a in template.arrays():
        nbytes = 8 * a.size
        if pos + nbytes > len(data):
            raise CacheReadError(f"{path}: truncated params file")
        arrays.append(np.frombuffer(data[pos : pos + nbytes], dtype="<f8").astype(np.float64).reshape(a.shape))
        pos += nbytes
    return template.with_arrays(arrays), seed, epochs
