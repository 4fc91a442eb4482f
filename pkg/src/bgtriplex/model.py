"""The boundary-guided three-branch network.

A spot branch and an in-context branch run multi-head cross-attention in
which edge and nuclei token streams guide the image stream; a global
branch position-encodes one pooled image token per spot over the slide
grid. Branch outputs are fused by the same cross-attention block, with
the global tokens as the query, and linear heads map pooled tokens to
per-gene predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .features import STREAMS, TOY_STREAM_DIMS, feature_transform
from .seeding import substream

GUIDE_MODES = ("mca", "sum", "concat")
BRANCHES = ("spot", "ctx", "global")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    tokens_per_stream: int = 4
    stream_dims: dict = field(default_factory=lambda: dict(TOY_STREAM_DIMS))
    guide_mode: str = "mca"
    drop_spot: bool = False
    drop_ctx: bool = False
    drop_global: bool = False
    no_edge_spot: bool = False
    no_nuclei_spot: bool = False
    no_edge_ctx: bool = False
    no_nuclei_ctx: bool = False
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.guide_mode not in GUIDE_MODES:
            raise ValueError(f"guide_mode must be one of {GUIDE_MODES}, got {self.guide_mode!r}")
        if self.drop_spot and self.drop_ctx and self.drop_global:
            raise ValueError("cannot drop all three branches")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def active_branches(self):
        dropped = {"spot": self.drop_spot, "ctx": self.drop_ctx, "global": self.drop_global}
        return [b for b in BRANCHES if not dropped[b]]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class McaParams:
    """Per-head projections for one guiding block plus its LayerNorm."""

    w_q: list
    w_k_a: list
    w_v_a: list
    w_k_b: list
    w_v_b: list
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


@dataclass
class BranchOutput:
    tokens: Tensor
    token_mask: np.ndarray | None
    pooled: Tensor | None
    prediction: Tensor | None


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class ModelParams:
    """All learned weights, registered in a fixed, documented order.

    The order of ``named()`` is the initialization draw order and the
    checkpoint serialization order: six stream projections, the three
    guiding blocks (spot, ctx, fuse), the position-encoder kernel, then
    the four prediction heads (fused, spot, ctx, global).
    """

    def __init__(self, config, k_genes, seed=0):
        self.config = config
        self.k_genes = int(k_genes)
        rng = substream(seed, "init")
        d = config.d_model
        self.proj = {}
        for scope in ("spot", "ctx"):
            for stream in STREAMS:
                c = config.stream_dims[stream]
                self.proj[(stream, scope)] = _uniform(rng, c, (c, d))
        self.mca_spot = self._init_mca(rng, config)
        self.mca_ctx = self._init_mca(rng, config)
        self.mca_fuse = self._init_mca(rng, config)
        self.apeg_kernel = Tensor(np.zeros((3, 3, d)), requires_grad=True)
        self.heads = {}
        for name in ("fused", "spot", "ctx", "global"):
            w = _uniform(rng, d, (d, self.k_genes))
            b = Tensor(np.zeros((1, self.k_genes)), requires_grad=True)
            self.heads[name] = (w, b)

    @staticmethod
    def _init_mca(rng, config):
        d, dh = config.d_model, config.d_head
        lists = {name: [] for name in ("w_q", "w_k_a", "w_v_a", "w_k_b", "w_v_b")}
        for _ in range(config.n_heads):
            for name in lists:
                lists[name].append(_uniform(rng, d, (d, dh)))
        return McaParams(gamma=Tensor(np.ones(d), requires_grad=True),
                         beta=Tensor(np.zeros(d), requires_grad=True),
                         eps=config.eps, **lists)

    def named(self):
        items = []
        for scope in ("spot", "ctx"):
            for stream in STREAMS:
                items.append((f"proj.{stream}.{scope}", self.proj[(stream, scope)]))
        for label, mca in (("mca_spot", self.mca_spot), ("mca_ctx", self.mca_ctx),
                           ("mca_fuse", self.mca_fuse)):
            for h in range(self.config.n_heads):
                for name in ("w_q", "w_k_a", "w_v_a", "w_k_b", "w_v_b"):
                    items.append((f"{label}.h{h}.{name}", getattr(mca, name)[h]))
            items.append((f"{label}.gamma", mca.gamma))
            items.append((f"{label}.beta", mca.beta))
        items.append(("apeg.kernel", self.apeg_kernel))
        for name in ("fused", "spot", "ctx", "global"):
            w, b = self.heads[name]
            items.append((f"head.{name}.w", w))
            items.append((f"head.{name}.b", b))
        return items

    def zero_grad(self):
        for _, tensor in self.named():
            tensor.zero_grad()


def cross_attention(query, kv, w_q, w_k, w_v, kv_mask=None, attn_sink=None):
    """One attention head: softmax((q W_q)(kv W_k)^T / sqrt(d_head)) (kv W_v).

    Masked kv positions are excluded from the softmax (logits forced to
    -inf) and receive exactly zero weight. ``attn_sink``, when given,
    collects a copy of the attention weight matrix for inspection.
    """
    q = ad.matmul(query, w_q)
    k = ad.matmul(kv, w_k)
    v = ad.matmul(kv, w_v)
    scale = 1.0 / math.sqrt(w_q.shape[1])
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), scale)
    attn = ad.softmax_rows(logits, col_mask=kv_mask)
    if attn_sink is not None:
        attn_sink.append(attn.data.copy())
    return ad.matmul(attn, v)


def _attend(scaled_q, kv, w_k, w_v, kv_mask, attn_sink):
    logits = ad.matmul_nt(scaled_q, ad.matmul(kv, w_k))
    attn = ad.softmax_rows(logits, col_mask=kv_mask)
    if attn_sink is not None:
        attn_sink.append(attn.data.copy())
    return ad.matmul(attn, ad.matmul(kv, w_v))


def mca_streams(guide_a, query, guide_b, params, mask_a=None, mask_b=None, attn_sink=None):
    """The two concatenated-head streams (query guided by a, query guided by b).

    The query projection of each head is shared by both guide streams.
    """
    heads_a = []
    heads_b = []
    for h in range(len(params.w_q)):
        scale = 1.0 / math.sqrt(params.w_q[h].shape[1])
        scaled_q = ad.mul(ad.matmul(query, params.w_q[h]), scale)
        heads_a.append(_attend(scaled_q, guide_a, params.w_k_a[h], params.w_v_a[h],
                               mask_a, attn_sink))
        heads_b.append(_attend(scaled_q, guide_b, params.w_k_b[h], params.w_v_b[h],
                               mask_b, attn_sink))
    return ad.concat_cols(heads_a), ad.concat_cols(heads_b)


def mca(guide_a, query, guide_b, params, mask_a=None, mask_b=None, attn_sink=None):
    """Both guided streams summed and layer-normalized; shape of the query."""
    phi_a, phi_b = mca_streams(guide_a, query, guide_b, params,
                               mask_a=mask_a, mask_b=mask_b, attn_sink=attn_sink)
    return ad.layer_norm(ad.add(phi_a, phi_b), params.gamma, params.beta, params.eps)


def guided_block(guide_a, query, guide_b, params, guide_mode,
                 mask_a=None, mask_q=None, mask_b=None, attn_sink=None):
    """Apply the configured guiding method; returns (tokens, token_mask)."""
    if guide_mode == "mca":
        return mca(guide_a, query, guide_b, params, mask_a=mask_a, mask_b=mask_b,
                   attn_sink=attn_sink), mask_q
    if guide_mode == "sum":
        if guide_a.shape != query.shape or guide_b.shape != query.shape:
            raise ShapeError(
                f"sum guiding needs equal stream shapes, got {guide_a.shape}, "
                f"{query.shape}, {guide_b.shape}")
        merged = ad.add(ad.add(query, guide_a), guide_b)
        return ad.layer_norm(merged, params.gamma, params.beta, params.eps), mask_q
    if guide_mode == "concat":
        merged = ad.concat_rows([query, guide_a, guide_b])
        parts = []
        for tensor, mask in ((query, mask_q), (guide_a, mask_a), (guide_b, mask_b)):
            parts.append(np.ones(tensor.shape[0], dtype=bool) if mask is None
                         else np.asarray(mask, dtype=bool))
        merged_mask = np.concatenate(parts)
        return ad.layer_norm(merged, params.gamma, params.beta, params.eps), merged_mask
    raise ValueError(f"unknown guide_mode {guide_mode!r}")


def apeg_encode(tokens, positions, kernel):
    """Residual position encoding over the irregular spot grid.

    Tokens are scattered onto their (row, col) cells, convolved with a
    learned channelwise 3x3 kernel (zero padding, empty cells read as
    zero) and gathered back: out = tokens + conv. Kernel tap (a, b)
    reads the neighbor at grid offset (a-1, b-1).
    """
    tokens = ad.as_tensor(tokens)
    kernel = ad.as_tensor(kernel)
    n, d = tokens.shape
    if len(positions) != n:
        raise ValueError(f"{len(positions)} positions for {n} tokens")
    if len(set(positions)) != n:
        raise ValueError("duplicate grid positions")
    if kernel.data.shape != (3, 3, d):
        raise ShapeError(f"kernel must have shape (3, 3, {d}), got {kernel.data.shape}")
    rows = np.array([p[0] for p in positions], dtype=int)
    cols = np.array([p[1] for p in positions], dtype=int)
    ri = rows - rows.min() + 1
    ci = cols - cols.min() + 1
    n_rows = rows.max() - rows.min() + 1
    n_cols = cols.max() - cols.min() + 1
    padded = np.zeros((n_rows + 2, n_cols + 2, d))
    padded[ri, ci] = tokens.data
    conv = np.zeros((n_rows, n_cols, d))
    for a in range(3):
        for b in range(3):
            conv += kernel.data[a, b] * padded[a:a + n_rows, b:b + n_cols]
    gathered = conv[ri - 1, ci - 1]

    def backward(g):
        if tokens.requires_grad:
            tokens._accumulate(g)
        d_conv = np.zeros((n_rows, n_cols, d))
        d_conv[ri - 1, ci - 1] = g
        if kernel.requires_grad:
            dk = np.zeros((3, 3, d))
            for a in range(3):
                for b in range(3):
                    dk[a, b] = (d_conv * padded[a:a + n_rows, b:b + n_cols]).sum(axis=(0, 1))
            kernel._accumulate(dk)
        if tokens.requires_grad:
            d_padded = np.zeros_like(padded)
            for a in range(3):
                for b in range(3):
                    d_padded[a:a + n_rows, b:b + n_cols] += kernel.data[a, b] * d_conv
            tokens._accumulate(d_padded[ri, ci])

    return ad.compose(tokens.data + gathered, (tokens, kernel), backward)


def _head_apply(params, name, pooled):
    w, b = params.heads[name]
    return ad.add(ad.matmul(pooled, w), b)


def project_bundle(bundle, params, scope):
    return {stream: feature_transform(tokens, params.proj[(stream, scope)])
            for stream, tokens in bundle.streams()}


def spot_branch(projected, params, config, token_mask=None, attn_sink=None):
    """Guided block over one spot's token streams plus its pooled prediction."""
    image = projected["img"]
    guide_a = image if config.no_edge_spot else projected["edge"]
    guide_b = image if config.no_nuclei_spot else projected["nuc"]
    tokens, tmask = guided_block(guide_a, image, guide_b, params.mca_spot, config.guide_mode,
                                 mask_a=None if config.no_edge_spot else token_mask,
                                 mask_q=token_mask,
                                 mask_b=None if config.no_nuclei_spot else token_mask,
                                 attn_sink=attn_sink)
    pooled = ad.mean_rows(tokens, tmask)
    return BranchOutput(tokens, tmask, pooled, _head_apply(params, "spot", pooled))


def _window_sequence(window, projected_ctx, stream, token_count, d_model):
    blocks = []
    mask = []
    zero = Tensor(np.zeros((token_count, d_model)))
    for member_row in window.member_indices:
        for idx in member_row:
            if idx is None:
                blocks.append(zero)
                mask.append(np.zeros(token_count, dtype=bool))
            else:
                tokens = projected_ctx[idx][stream]
                blocks.append(tokens)
                mask.append(np.ones(tokens.shape[0], dtype=bool))
    return ad.concat_rows(blocks), np.concatenate(mask)


def context_branch(window, projected_ctx, params, config, attn_sink=None):
    """Guided block over the concatenated D x D neighborhood token streams."""
    if not window.mask.any():
        raise ValueError("context window is fully masked")
    d_model = config.d_model
    sequences = {}
    masks = {}
    for stream in STREAMS:
        count = next(projected_ctx[i][stream].shape[0]
                     for row in window.member_indices for i in row if i is not None)
        sequences[stream], masks[stream] = _window_sequence(
            window, projected_ctx, stream, count, d_model)
    image = sequences["img"]
    guide_a = image if config.no_edge_ctx else sequences["edge"]
    mask_a = masks["img"] if config.no_edge_ctx else masks["edge"]
    guide_b = image if config.no_nuclei_ctx else sequences["nuc"]
    mask_b = masks["img"] if config.no_nuclei_ctx else masks["nuc"]
    tokens, tmask = guided_block(guide_a, image, guide_b, params.mca_ctx, config.guide_mode,
                                 mask_a=mask_a, mask_q=masks["img"], mask_b=mask_b,
                                 attn_sink=attn_sink)
    pooled = ad.mean_rows(tokens, tmask)
    return BranchOutput(tokens, tmask, pooled, _head_apply(params, "ctx", pooled))


def global_branch(dataset_tokens, grid_positions, params):
    """Position-encode one pooled image token per spot over the slide grid.

    The returned tokens keep one row per spot; per-spot pooling and
    prediction are row lookups performed by the caller.
    """
    tokens = apeg_encode(dataset_tokens, grid_positions, params.apeg_kernel)
    return BranchOutput(tokens, None, None, None)


def global_prediction(global_out, spot_index, params):
    pooled = ad.row(global_out.tokens, spot_index)
    return _head_apply(params, "global", pooled)


def fuse(spot_out, ctx_out, global_out, target_spot_index, params, config, attn_sink=None):
    """Fuse the branches with the global tokens as the attention query.

    A dropped guide branch is replaced by the query stream, mirroring the
    guidance ablations. Returns the fused prediction for the target spot.
    """
    query = global_out.tokens
    if not 0 <= target_spot_index < query.shape[0]:
        raise ValueError(f"target spot index {target_spot_index} out of range")
    if config.drop_spot:
        guide_a, mask_a = query, global_out.token_mask
    else:
        guide_a, mask_a = spot_out.tokens, spot_out.token_mask
    if config.drop_ctx:
        guide_b, mask_b = query, global_out.token_mask
    else:
        guide_b, mask_b = ctx_out.tokens, ctx_out.token_mask
    fused_tokens, _ = guided_block(guide_a, query, guide_b, params.mca_fuse, config.guide_mode,
                                   mask_a=mask_a, mask_q=global_out.token_mask, mask_b=mask_b,
                                   attn_sink=attn_sink)
    pooled = ad.row(fused_tokens, target_spot_index)
    return _head_apply(params, "fused", pooled)


def slide_forward(dataset, params, config, d_context, spot_indices=None):
    """Differentiable forward pass; returns per-spot prediction tensors.

    The global query is computed once per call and shared by every
    requested spot. With ``drop_global`` the query becomes the stack of
    pooled spot-branch (or, failing that, context-branch) tokens.
    """
    from .data import context_window

    n = dataset.n_spots
    indices = list(range(n)) if spot_indices is None else list(spot_indices)
    need_spot = not config.drop_spot
    need_ctx = not config.drop_ctx

    proj_spot = [project_bundle(b, params, "spot") for b in dataset.features]
    proj_ctx = ([project_bundle(b, params, "ctx") for b in dataset.features_ctx]
                if need_ctx else None)

    spot_outs = {}
    ctx_outs = {}
    spot_scope = range(n) if (config.drop_global and need_spot) else indices
    if need_spot:
        for s in spot_scope:
            spot_outs[s] = spot_branch(proj_spot[s], params, config,
                                       token_mask=dataset.features[s].mask)
    ctx_scope = range(n) if (config.drop_global and not need_spot) else indices
    if need_ctx:
        for s in ctx_scope:
            window = context_window(dataset.spots, s, d_context)
            ctx_outs[s] = context_branch(window, proj_ctx, params, config)

    if config.drop_global:
        source = spot_outs if need_spot else ctx_outs
        query = ad.concat_rows([source[s].pooled for s in range(n)])
        global_out = BranchOutput(query, None, None, None)
    else:
        pooled_img = [ad.mean_rows(proj_spot[s]["img"], dataset.features[s].mask)
                      for s in range(n)]
        dataset_tokens = ad.concat_rows(pooled_img)
        global_out = global_branch(dataset_tokens, dataset.grid_positions(), params)

    results = []
    for s in indices:
        preds = {}
        if need_spot:
            preds["spot"] = spot_outs[s].prediction
        if need_ctx:
            preds["ctx"] = ctx_outs[s].prediction
        if not config.drop_global:
            preds["global"] = global_prediction(global_out, s, params)
        preds["fused"] = fuse(spot_outs.get(s), ctx_outs.get(s), global_out, s, params, config)
        results.append((s, preds))
    return results


def forward_slide(dataset, params, config, d_context):
    """Whole-slide forward pass returning numpy prediction matrices."""
    results = slide_forward(dataset, params, config, d_context)
    names = ["fused"] + [b for b in ("spot", "ctx", "global") if b in results[0][1]]
    return {name: np.vstack([preds[name].data for _, preds in results]) for name in names}
