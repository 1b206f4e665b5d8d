"""Stacked spatiotemporal-semantic layers.

Each layer applies, in order:

* MSA — multi-head self-attention over the category axis, independently per
  (region, time) cell, to mix signal across anomaly types;
* TRR — a gated recurrent scan over the time axis, independently per
  (region, category), for short-range temporal structure;
* DSA — graph attention over the region network paired with
  positionally-encoded cross-attention between each region's sequence and
  every neighbor's sequence, for spatial and long-range temporal structure.

All three preserve the (N, T, C, d) feature shape, so layers stack; an
optional leading batch axis carries independent windows through the same
graph of operations.

Conventions. Projections use the column form y = W x (implemented as
``x @ W.T``). Per-head projection matrices are stored stacked as
(H, d/H, d). Attention heads are concatenated and multiplied by the output
matrix. The spatial softmax runs over the aggregation neighborhood N+ of the
target region — neighbors plus, by default, the region itself — and is
exactly zero elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .graph import RegionGraph, dsa_pairs

__all__ = [
    "StcLayerParams",
    "LayerTrace",
    "AttentionTrace",
    "init_layer_params",
    "msa_forward",
    "trr_forward",
    "gat_weights",
    "nta_forward",
    "dsa_forward",
    "stc_layer",
    "stc_stack",
    "ABLATIONS",
]

ABLATIONS = ("none", "-MSA", "-TRR", "-DSA", "-MTP")

_DSA_ACTIVATIONS = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "identity": lambda t: t,
}


@dataclass
class StcLayerParams:
    """Learnable matrices of one layer; heads stacked on the leading axis."""

    msa_wq: Tensor  # (H, d/H, d)
    msa_wk: Tensor  # (H, d/H, d)
    msa_wv: Tensor  # (H, d/H, d)
    msa_wo: Tensor  # (d, d)
    trr_wr: Tensor  # (d, 2d)
    trr_wz: Tensor  # (d, 2d)
    trr_wh: Tensor  # (d, 2d)
    trr_wo: Tensor  # (d, d)
    gat_w: Tensor  # (d, d)
    gat_a: Tensor  # (2d,)
    nta_wq: Tensor  # (H, d/H, d)
    nta_wk: Tensor  # (H, d/H, d)
    nta_wv: Tensor  # (H, d/H, d)
    nta_wo: Tensor  # (d, d)

    @property
    def width(self) -> int:
        return self.msa_wo.shape[0]

    @property
    def n_heads(self) -> int:
        return self.msa_wq.shape[0]

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for field_name in (
            "msa_wq",
            "msa_wk",
            "msa_wv",
            "msa_wo",
            "trr_wr",
            "trr_wz",
            "trr_wh",
            "trr_wo",
            "gat_w",
            "gat_a",
            "nta_wq",
            "nta_wk",
            "nta_wv",
            "nta_wo",
        ):
            yield f"{prefix}{field_name}", getattr(self, field_name)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    scale = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def init_layer_params(d: int, n_heads: int, rng: np.random.Generator) -> StcLayerParams:
    """Symmetric-uniform initialization scaled by 1/sqrt(fan_in)."""
    if d % n_heads != 0:
        raise ConfigError(f"hidden size d={d} must be divisible by n_heads={n_heads}")
    dh = d // n_heads
    return StcLayerParams(
        msa_wq=_uniform(rng, (n_heads, dh, d), d),
        msa_wk=_uniform(rng, (n_heads, dh, d), d),
        msa_wv=_uniform(rng, (n_heads, dh, d), d),
        msa_wo=_uniform(rng, (d, d), d),
        trr_wr=_uniform(rng, (d, 2 * d), 2 * d),
        trr_wz=_uniform(rng, (d, 2 * d), 2 * d),
        trr_wh=_uniform(rng, (d, 2 * d), 2 * d),
        trr_wo=_uniform(rng, (d, d), d),
        gat_w=_uniform(rng, (d, d), d),
        gat_a=_uniform(rng, (2 * d,), 2 * d),
        nta_wq=_uniform(rng, (n_heads, dh, d), d),
        nta_wk=_uniform(rng, (n_heads, dh, d), d),
        nta_wv=_uniform(rng, (n_heads, dh, d), d),
        nta_wo=_uniform(rng, (d, d), d),
    )


# -- shape plumbing -------------------------------------------------------


def _as_batched(e: Tensor) -> tuple[Tensor, bool]:
    """Promote (N, T, C, d) to (1, N, T, C, d); batched input passes through."""
    if e.ndim == 5:
        return e, True
    if e.ndim == 4:
        return ad.reshape(e, (1,) + e.shape), False
    raise ShapeError(f"expected rank-4 or rank-5 feature tensor; got shape {e.shape}")


def _project_heads(x2: Tensor, w: Tensor) -> Tensor:
    """(M, d) through per-head (H, d/H, d) matrices -> (H, M, d/H)."""
    proj = ad.matmul(w, ad.transpose(x2))  # (H, d/H, M)
    return ad.transpose(proj, (0, 2, 1))


def _project_qkv(x2: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """All three head projections in one stacked matmul."""
    h = wq.shape[0]
    stacked = ad.concat([wq, wk, wv], axis=0)  # (3H, d/H, d)
    proj = ad.transpose(ad.matmul(stacked, ad.transpose(x2)), (0, 2, 1))  # (3H, M, d/H)
    return (
        ad.narrow(proj, 0, 0, h),
        ad.narrow(proj, 0, h, h),
        ad.narrow(proj, 0, 2 * h, h),
    )


def _merge_heads(ctx: Tensor) -> Tensor:
    """(H, ..., d/H) -> (..., H*d/H): concatenation of head outputs."""
    ndim = ctx.ndim
    order = tuple(range(1, ndim - 1)) + (0, ndim - 1)
    moved = ad.transpose(ctx, order)
    h, dh = ctx.shape[0], ctx.shape[-1]
    return ad.reshape(moved, moved.shape[:-2] + (h * dh,))


# -- multi-head semantic self-attention -----------------------------------


def msa_forward(e: Tensor, p: StcLayerParams) -> tuple[Tensor, np.ndarray]:
    """Attention over categories within each (region, time) cell.

    Returns the transformed features (same shape as ``e``) and the semantic
    attention weights with shape (H, [B,] N, T, C, C); each weight row sums
    to 1 over the key category axis.
    """
    e5, batched = _as_batched(e)
    b, n, t, c, d = e5.shape
    h = p.n_heads
    if d % h != 0:
        raise ConfigError(f"hidden size d={d} must be divisible by n_heads={h}")
    dh = d // h

    x2 = ad.reshape(e5, (b * n * t * c, d))
    q3, k3, v3 = _project_qkv(x2, p.msa_wq, p.msa_wk, p.msa_wv)
    q = ad.reshape(q3, (h, b, n, t, c, dh))
    k = ad.reshape(k3, (h, b, n, t, c, dh))
    v = ad.reshape(v3, (h, b, n, t, c, dh))

    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 2, 3, 5, 4))), 1.0 / math.sqrt(dh))
    alpha = ad.softmax(scores, axis=-1)  # (h, b, n, t, c, c)
    ctx = ad.matmul(alpha, v)  # (h, b, n, t, c, dh)

    cat = ad.reshape(_merge_heads(ctx), (b * n * t * c, d))
    out = ad.reshape(ad.matmul(cat, ad.transpose(p.msa_wo)), (b, n, t, c, d))

    weights = alpha.detach()
    if not batched:
        out = ad.reshape(out, (n, t, c, d))
        weights = weights[:, 0]
    return out, weights


# -- time-aware recurrence -------------------------------------------------


def trr_forward(m: Tensor, p: StcLayerParams) -> Tensor:
    """Gated recurrent scan over the T axis, per (region, category).

    Zero initial state; gates read the concatenation [h_prev, x_t]; every
    slot emits sigmoid(W_o h_t), so the output keeps the input shape.
    """
    m5, batched = _as_batched(m)
    b, n, t, c, d = m5.shape
    seq = ad.reshape(ad.transpose(m5, (0, 1, 3, 2, 4)), (b * n * c, t, d))

    wr_t = ad.transpose(p.trr_wr)
    wz_t = ad.transpose(p.trr_wz)
    wh_t = ad.transpose(p.trr_wh)
    wo_t = ad.transpose(p.trr_wo)

    h = Tensor(np.zeros((b * n * c, d)))
    outputs = []
    for step in range(t):
        xt = ad.reshape(ad.narrow(seq, 1, step, 1), (b * n * c, d))
        joint = ad.concat([h, xt], axis=1)
        r = ad.sigmoid(ad.matmul(joint, wr_t))
        z = ad.sigmoid(ad.matmul(joint, wz_t))
        cand = ad.tanh(ad.matmul(ad.concat([ad.mul(r, h), xt], axis=1), wh_t))
        h = ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))
        outputs.append(ad.reshape(ad.sigmoid(ad.matmul(h, wo_t)), (b * n * c, 1, d)))

    stacked = ad.concat(outputs, axis=1)  # (b*n*c, t, d)
    out = ad.transpose(ad.reshape(stacked, (b, n, c, t, d)), (0, 1, 3, 2, 4))
    if not batched:
        out = ad.reshape(out, (n, t, c, d))
    return out


# -- dynamic spatiotemporal attention --------------------------------------


def _aggregation_support(g: RegionGraph, self_loop: bool) -> np.ndarray:
    support = g.adjacency.astype(bool)
    if self_loop:
        support = support | np.eye(g.n_regions, dtype=bool)
    return support


def gat_weights(m: Tensor, g: RegionGraph, p: StcLayerParams, self_loop: bool = True) -> Tensor:
    """Edge weights over each region's aggregation neighborhood.

    Region features are the mean of ``m`` over time and category; edge scores
    are LeakyReLU(a . [W f_i || W f_j]) and rows are softmax-normalized over
    the support, exactly zero elsewhere. Returns ([B,] N, N).
    """
    m5, batched = _as_batched(m)
    b, n, t, c, d = m5.shape
    if n != g.n_regions:
        raise ShapeError(f"feature regions {n} do not match graph N={g.n_regions}")

    f = ad.reduce_mean(m5, axis=(2, 3))  # (b, n, d)
    wf = ad.reshape(ad.matmul(ad.reshape(f, (b * n, d)), ad.transpose(p.gat_w)), (b, n, d))
    a_src = ad.reshape(ad.narrow(p.gat_a, 0, 0, d), (d, 1))
    a_dst = ad.reshape(ad.narrow(p.gat_a, 0, d, d), (d, 1))
    s_src = ad.reshape(ad.matmul(ad.reshape(wf, (b * n, d)), a_src), (b, n, 1))
    s_dst = ad.reshape(ad.matmul(ad.reshape(wf, (b * n, d)), a_dst), (b, 1, n))
    scores = ad.leaky_relu(
        ad.add(ad.broadcast_to(s_src, (b, n, n)), ad.broadcast_to(s_dst, (b, n, n))),
        slope=0.2,
    )
    alpha = ad.masked_softmax(scores, _aggregation_support(g, self_loop), axis=-1)
    if not batched:
        alpha = ad.reshape(alpha, (n, n))
    return alpha


def nta_forward(
    m: Tensor,
    g: RegionGraph,
    pe: np.ndarray,
    p: StcLayerParams,
    self_loop: bool = True,
) -> tuple[Tensor, np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Cross-attention from each region's sequence onto each neighbor's.

    For every ordered (target, neighbor) pair in the aggregation
    neighborhoods and every category, queries come from the target's
    position-encoded sequence and keys/values from the neighbor's. Returns
    the per-pair features ([B,] P, T, C, d), the temporal attention weights
    (H, [B,] P, C, T, T), and the (target, neighbor) index arrays.
    """
    m5, batched = _as_batched(m)
    b, n, t, c, d = m5.shape
    if pe.shape != (t, d):
        raise ShapeError(f"positional encoding shape {pe.shape} does not match (T={t}, d={d})")
    h = p.n_heads
    dh = d // h
    src, nbr = dsa_pairs(g, self_loop)
    np_pairs = len(src)

    pe_b = ad.broadcast_to(ad.reshape(Tensor(pe), (1, 1, t, 1, d)), (b, n, t, c, d))
    x = ad.add(m5, pe_b)
    xq = ad.index_select(x, src, axis=1)  # (b, P, t, c, d)
    xk = ad.index_select(x, nbr, axis=1)

    def to_heads(proj: Tensor) -> Tensor:
        shaped = ad.reshape(proj, (h, b, np_pairs, t, c, dh))
        return ad.transpose(shaped, (0, 1, 2, 4, 3, 5))  # (h, b, P, c, t, dh)

    q = to_heads(_project_heads(ad.reshape(xq, (b * np_pairs * t * c, d)), p.nta_wq))
    k_flat = ad.reshape(xk, (b * np_pairs * t * c, d))
    kv = _project_heads(k_flat, ad.concat([p.nta_wk, p.nta_wv], axis=0))
    k = to_heads(ad.narrow(kv, 0, 0, h))
    v = to_heads(ad.narrow(kv, 0, h, h))

    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 2, 3, 5, 4))), 1.0 / math.sqrt(dh))
    alpha = ad.softmax(scores, axis=-1)  # (h, b, P, c, t, t)
    ctx = ad.matmul(alpha, v)  # (h, b, P, c, t, dh)

    merged = _merge_heads(ad.transpose(ctx, (0, 1, 2, 4, 3, 5)))  # (b, P, t, c, d)
    flat = ad.reshape(merged, (b * np_pairs * t * c, d))
    out = ad.reshape(ad.matmul(flat, ad.transpose(p.nta_wo)), (b, np_pairs, t, c, d))

    weights = alpha.detach()
    if not batched:
        out = ad.reshape(out, (np_pairs, t, c, d))
        weights = weights[:, 0]
    return out, weights, (src, nbr)


def dsa_forward(
    m: Tensor,
    g: RegionGraph,
    pe: np.ndarray,
    p: StcLayerParams,
    self_loop: bool = True,
    activation: str = "sigmoid",
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Weighted aggregation of neighbor cross-attention features.

    ``out[i] = act(sum over k in N+(i) of alpha[i, k] * pair_features[i, k])``
    with the graph-attention weights from :func:`gat_weights`. Returns the
    layer output plus detached spatial and temporal weights for tracing.
    """
    if activation not in _DSA_ACTIVATIONS:
        raise ConfigError(f"unknown dsa activation {activation!r}")
    m5, batched = _as_batched(m)
    b, n, t, c, d = m5.shape

    alpha = gat_weights(m5, g, p, self_loop=self_loop)  # (b, n, n)
    pair_feats, temporal, (src, nbr) = nta_forward(m5, g, pe, p, self_loop=self_loop)
    np_pairs = len(src)

    flat_alpha = ad.reshape(alpha, (b, n * n))
    wp = ad.index_select(flat_alpha, src * n + nbr, axis=1)  # (b, P)
    weighted = ad.mul(
        pair_feats, ad.broadcast_to(ad.reshape(wp, (b, np_pairs, 1, 1, 1)), pair_feats.shape)
    )
    agg = ad.scatter_sum(weighted, src, n, axis=1)  # (b, n, t, c, d)
    out = _DSA_ACTIVATIONS[activation](agg)

    spatial = alpha.detach()
    if not batched:
        out = ad.reshape(out, (n, t, c, d))
        spatial = spatial[0]
        temporal = temporal[:, 0]
    return out, spatial, temporal


# -- layer composition ------------------------------------------------------


@dataclass
class LayerTrace:
    """Detached attention weights of one layer (None for skipped components)."""

    semantic: np.ndarray | None  # (H, [B,] N, T, C, C)
    spatial: np.ndarray | None  # ([B,] N, N)
    temporal: np.ndarray | None  # (H, [B,] P, C, T, T)


def stc_layer(
    e: Tensor,
    g: RegionGraph,
    pe: np.ndarray,
    p: StcLayerParams,
    ablation: str = "none",
    self_loop: bool = True,
    activation: str = "sigmoid",
) -> tuple[Tensor, LayerTrace]:
    """One full layer: DSA(TRR(MSA(e))); ablation tags replace a stage by identity."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    semantic = spatial = temporal = None
    out = e
    if ablation != "-MSA":
        out, semantic = msa_forward(out, p)
    if ablation != "-TRR":
        out = trr_forward(out, p)
    if ablation != "-DSA":
        out, spatial, temporal = dsa_forward(
            out, g, pe, p, self_loop=self_loop, activation=activation
        )
    return out, LayerTrace(semantic=semantic, spatial=spatial, temporal=temporal)


def stc_stack(
    e0: Tensor,
    g: RegionGraph,
    pe: np.ndarray,
    layer_params: Sequence[StcLayerParams],
    ablation: str = "none",
    self_loop: bool = True,
    activation: str = "sigmoid",
) -> tuple[list[Tensor], list[LayerTrace]]:
    """Iterate the layer L times; returns all L+1 feature tensors for fusion."""
    if not layer_params:
        raise ConfigError("stc_stack needs at least one layer")
    outs = [e0]
    traces = []
    for p in layer_params:
        nxt, trace = stc_layer(
            outs[-1], g, pe, p, ablation=ablation, self_loop=self_loop, activation=activation
        )
        outs.append(nxt)
        traces.append(trace)
    return outs, traces


# -- attention trace export --------------------------------------------------


@dataclass
class AttentionTrace:
    """Aggregated attention weights for numeric interpretability export.

    Semantic weights are averaged over (batch, region, time), temporal
    weights over (batch, pair, category), spatial weights over batch;
    averaging softmax rows preserves their sum of 1. Only on-support spatial
    entries are written to CSV.
    """

    semantic: list[np.ndarray | None]  # per layer (H, C, C)
    spatial: list[np.ndarray | None]  # per layer (N, N)
    temporal: list[np.ndarray | None]  # per layer (H, T, T)

    @classmethod
    def from_layer_traces(cls, traces: Sequence[LayerTrace], batched: bool) -> "AttentionTrace":
        semantic, spatial, temporal = [], [], []
        for tr in traces:
            if tr.semantic is None:
                semantic.append(None)
            else:
                axes = (1, 2, 3) if batched else (1, 2)
                semantic.append(tr.semantic.mean(axis=axes))
            if tr.spatial is None:
                spatial.append(None)
            else:
                spatial.append(tr.spatial.mean(axis=0) if batched else tr.spatial)
            if tr.temporal is None:
                temporal.append(None)
            else:
                axes = (1, 2, 3) if batched else (1, 2)
                temporal.append(tr.temporal.mean(axis=axes))
        return cls(semantic=semantic, spatial=spatial, temporal=temporal)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("layer,kind,head,query_index,key_index,weight\n")
            for layer, mat in enumerate(self.semantic):
                if mat is None:
                    continue
                for head in range(mat.shape[0]):
                    for qi in range(mat.shape[1]):
                        for ki in range(mat.shape[2]):
                            fh.write(
                                f"{layer},semantic,{head},{qi},{ki},{mat[head, qi, ki]:.17g}\n"
                            )
            for layer, mat in enumerate(self.spatial):
                if mat is None:
                    continue
                for qi in range(mat.shape[0]):
                    for ki in range(mat.shape[1]):
                        if mat[qi, ki] != 0.0:
                            fh.write(f"{layer},spatial,0,{qi},{ki},{mat[qi, ki]:.17g}\n")
            for layer, mat in enumerate(self.temporal):
                if mat is None:
                    continue
                for head in range(mat.shape[0]):
                    for qi in range(mat.shape[1]):
                        for ki in range(mat.shape[2]):
                            fh.write(
                                f"{layer},temporal,{head},{qi},{ki},{mat[head, qi, ki]:.17g}\n"
                            )

    @classmethod
    def from_csv(cls, path) -> "AttentionTrace":
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "layer,kind,head,query_index,key_index,weight":
                raise ShapeError(f"unexpected attention CSV header: {header!r}")
            for line in fh:
                layer_s, kind, head_s, qi_s, ki_s, w_s = line.strip().split(",")
                rows.append((int(layer_s), kind, int(head_s), int(qi_s), int(ki_s), float(w_s)))
        if not rows:
            return cls(semantic=[], spatial=[], temporal=[])
        n_layers = max(r[0] for r in rows) + 1
        semantic: list[np.ndarray | None] = [None] * n_layers
        spatial: list[np.ndarray | None] = [None] * n_layers
        temporal: list[np.ndarray | None] = [None] * n_layers
        for kind, store in (("semantic", semantic), ("spatial", spatial), ("temporal", temporal)):
            sel = [r for r in rows if r[1] == kind]
            if not sel:
                continue
            for layer in range(n_layers):
                at_layer = [r for r in sel if r[0] == layer]
                if not at_layer:
                    continue
                n_heads = max(r[2] for r in at_layer) + 1
                nq = max(r[3] for r in at_layer) + 1
                nk = max(r[4] for r in at_layer) + 1
                if kind == "spatial":
                    mat = np.zeros((max(nq, nk), max(nq, nk)))
                    for _, _, _, qi, ki, w in at_layer:
                        mat[qi, ki] = w
                else:
                    mat = np.zeros((n_heads, nq, nk))
                    for _, _, head, qi, ki, w in at_layer:
                        mat[head, qi, ki] = w
                store[layer] = mat
        return cls(semantic=semantic, spatial=spatial, temporal=temporal)
