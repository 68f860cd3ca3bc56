"""Attention over field-identified token sets, in three variants.

``forward_standard``   classic multi-head scaled dot product with globally
                       shared projections.
``forward_naive_pair`` projections specialized per ordered field pair; the
                       parameter count grows as F^2 d^2, so construction is
                       guarded by an explicit budget.
``forward_decomposed`` per-field projections plus a learned scalar per head
                       and ordered field pair that multiplies the dot
                       product before the temperature:
                       score(i,j) = (q_i . k_j) * w[h, f_i, f_j].

All variants softmax score/sqrt(d) over targets (full model dim d, not the
per-head width) and run on the reverse-mode tape, so a scalar loss
back-propagates to every parameter.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DomainError, InternalError, ResourceLimitError
from .fields import TokenBatch
from .numerics import (
    Tensor,
    matmul,
    mul,
    parameter,
    reduce_sum,
    reshape,
    softmax,
    take_rows,
    transpose,
)

NAIVE_PARAM_LIMIT = 100_000_000


@dataclasses.dataclass
class DecomposedAttnParams:
    """Per-field projections, field-pair modulation, shared output projection.

    ``wq``/``wk``/``wv`` have shape (F, d, d), column-sliced into ``heads``
    blocks of width d/heads.  A bank of shape (1, d, d) means all fields
    share one matrix (the field-alignment ablation).  ``w`` is the
    (heads, F, F) modulation tensor; ``wo`` is the shared (d, d) output map.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    w: Tensor
    wo: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[-1]

    @property
    def field_count(self) -> int:
        return self.w.shape[1]


@dataclasses.dataclass
class StandardAttnParams:
    """Globally shared projections: the ablation baseline."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[-1]


@dataclasses.dataclass
class NaivePairAttnParams:
    """Projections specialized per ordered field pair.

    Each role is (heads, F, F, d, d_h): for query token i attending to
    target j, head h uses the three matrices at [h, f_i, f_j].  ``wo`` is a
    shared output projection so the variant composes into the same block
    structure as the others.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[3]

    @property
    def field_count(self) -> int:
        return self.wq.shape[1]


@dataclasses.dataclass
class AttnTrace:
    """Detached per-head score and attention matrices for one forward call.

    ``scores`` holds the pre-temperature values (for the decomposed variant
    that is the modulated dot product); ``probs`` the softmax rows.  Both
    are (batch, heads, N, N).
    """

    scores: np.ndarray
    probs: np.ndarray


def naive_param_count(field_count: int, dim: int) -> int:
    """Scalars in the three per-pair projection banks: 3 F^2 d^2."""
    return 3 * field_count * field_count * dim * dim


def check_naive_budget(field_count: int, dim: int,
                       limit: int = NAIVE_PARAM_LIMIT) -> int:
    requested = naive_param_count(field_count, dim)
    if requested > limit:
        raise ResourceLimitError(
            f"naive field-pair attention needs {requested} projection scalars "
            f"(F={field_count}, d={dim}), over the budget of {limit}",
            requested=requested, limit=limit)
    return requested


def init_decomposed(field_count: int, dim: int, heads: int,
                    rng: np.random.Generator, w_std: float = 0.01,
                    shared_projections: bool = False) -> DecomposedAttnParams:
    if dim % heads != 0:
        raise DomainError(f"dim {dim} not divisible by heads {heads}")
    banks = 1 if shared_projections else field_count
    scale = 1.0 / np.sqrt(dim)

    def bank():
        return parameter(rng.normal(0.0, scale, size=(banks, dim, dim)))

    return DecomposedAttnParams(
        wq=bank(), wk=bank(), wv=bank(),
        w=parameter(rng.normal(0.0, w_std, size=(heads, field_count, field_count))),
        wo=parameter(rng.normal(0.0, scale, size=(dim, dim))),
        heads=heads)


def init_standard(dim: int, heads: int, rng: np.random.Generator) -> StandardAttnParams:
    if dim % heads != 0:
        raise DomainError(f"dim {dim} not divisible by heads {heads}")
    scale = 1.0 / np.sqrt(dim)

    def mat():
        return parameter(rng.normal(0.0, scale, size=(dim, dim)))

    return StandardAttnParams(wq=mat(), wk=mat(), wv=mat(), wo=mat(), heads=heads)


def init_naive_pair(field_count: int, dim: int, heads: int,
                    rng: np.random.Generator,
                    limit: int = NAIVE_PARAM_LIMIT) -> NaivePairAttnParams:
    if dim % heads != 0:
        raise DomainError(f"dim {dim} not divisible by heads {heads}")
    check_naive_budget(field_count, dim, limit)
    dh = dim // heads
    scale = 1.0 / np.sqrt(dim)

    def bank():
        return parameter(rng.normal(
            0.0, scale, size=(heads, field_count, field_count, dim, dh)))

    return NaivePairAttnParams(
        wq=bank(), wk=bank(), wv=bank(),
        wo=parameter(rng.normal(0.0, scale, size=(dim, dim))),
        heads=heads)


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

def _proj_ids(bank: Tensor, field_ids: np.ndarray, field_count: int) -> np.ndarray:
    """Which bank row each token uses: its field, or row 0 for a shared bank."""
    if bank.shape[0] == 1:
        return np.zeros_like(field_ids)
    if bank.shape[0] != field_count:
        raise InternalError(
            f"projection bank holds {bank.shape[0]} matrices for {field_count} fields")
    if field_ids.size and int(field_ids.max()) >= bank.shape[0]:
        raise InternalError(
            f"field id {int(field_ids.max())} has no projection matrix")
    return field_ids


def _project_per_token(tokens: Tensor, bank: Tensor, ids: np.ndarray) -> Tensor:
    """tokens (B,N,d) through a per-token matrix bank[ids] -> (B,N,d).

    A single-matrix bank takes the plain shared-projection path, which is
    arithmetic-identical to standard attention (the reduction case)."""
    B, N, d = tokens.shape
    if bank.shape[0] == 1:
        return matmul(tokens, reshape(bank, (bank.shape[1], bank.shape[2])))
    mats = take_rows(bank, ids)                       # (N, d, d)
    out = matmul(reshape(tokens, (B, N, 1, d)), mats)  # (B, N, 1, d)
    return reshape(out, (B, N, d))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return transpose(reshape(x, (B, N, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, N, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, N, H * dh))


def take_pairs(w: Tensor, qids: np.ndarray, tids: np.ndarray) -> Tensor:
    """Gather w[h, qids[i], tids[j]] -> (heads, N, N), differentiably."""
    H, F, _ = w.shape
    flat = reshape(transpose(w, (1, 2, 0)), (F * F, H))
    pair_idx = (qids[:, None] * F + tids[None, :]).ravel()
    rows = take_rows(flat, pair_idx)                  # (N*N, H)
    return transpose(reshape(rows, (qids.size, tids.size, H)), (2, 0, 1))


def _attend(logits: Tensor, vh: Tensor) -> tuple[Tensor, Tensor]:
    alpha = softmax(logits, axis=-1)
    return alpha, matmul(alpha, vh)


# ---------------------------------------------------------------------------
# Variants
# ---------------------------------------------------------------------------

def score_decomposed(batch: TokenBatch, params: DecomposedAttnParams,
                     head: int) -> np.ndarray:
    """Pre-temperature scores (q_i . k_j) * w[head, f_i, f_j] for one head.

    Pure numpy diagnostic, shape (batch, N, N); the tape-based forward is
    checked against it in tests.
    """
    if not 0 <= head < params.heads:
        raise DomainError(f"head {head} out of range for {params.heads} heads")
    H = params.heads
    h = batch.tokens.data
    fid = batch.field_ids
    B, N, d = h.shape
    dh = d // H
    qid = _proj_ids(params.wq, fid, params.field_count)
    kid = _proj_ids(params.wk, fid, params.field_count)
    lo, hi = head * dh, (head + 1) * dh
    q = np.einsum("bnd,nde->bne", h, params.wq.data[qid][:, :, lo:hi])
    k = np.einsum("bnd,nde->bne", h, params.wk.data[kid][:, :, lo:hi])
    raw = np.einsum("bie,bje->bij", q, k)
    return raw * params.w.data[head][fid[:, None], fid[None, :]]


def forward_decomposed(batch: TokenBatch,
                       params: DecomposedAttnParams) -> tuple[Tensor, AttnTrace]:
    """Field-decomposed attention: (B, N, d) outputs plus a trace."""
    tokens = batch.tokens
    fid = batch.field_ids
    B, N, d = tokens.shape
    H = params.heads
    F = params.field_count
    q = _split_heads(_project_per_token(tokens, params.wq,
                                        _proj_ids(params.wq, fid, F)), H)
    k = _split_heads(_project_per_token(tokens, params.wk,
                                        _proj_ids(params.wk, fid, F)), H)
    v = _split_heads(_project_per_token(tokens, params.wv,
                                        _proj_ids(params.wv, fid, F)), H)
    raw = matmul(q, transpose(k, (0, 1, 3, 2)))        # (B, H, N, N)
    scores = mul(raw, take_pairs(params.w, fid, fid))  # modulate, then temper
    logits = mul(scores, 1.0 / np.sqrt(d))
    alpha, ctx = _attend(logits, v)
    out = matmul(_merge_heads(ctx), params.wo)
    trace = AttnTrace(scores=scores.data.copy(), probs=alpha.data.copy())
    return out, trace


def forward_standard(batch: TokenBatch,
                     params: StandardAttnParams) -> tuple[Tensor, AttnTrace]:
    """Baseline multi-head attention with shared projections."""
    tokens = batch.tokens
    B, N, d = tokens.shape
    q = _split_heads(matmul(tokens, params.wq), params.heads)
    k = _split_heads(matmul(tokens, params.wk), params.heads)
    v = _split_heads(matmul(tokens, params.wv), params.heads)
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    logits = mul(scores, 1.0 / np.sqrt(d))
    alpha, ctx = _attend(logits, v)
    out = matmul(_merge_heads(ctx), params.wo)
    trace = AttnTrace(scores=scores.data.copy(), probs=alpha.data.copy())
    return out, trace


def _gather_pair_bank(bank: Tensor, fid: np.ndarray) -> Tensor:
    """bank (H,F,F,d,dh) -> (H,N,N,d,dh) selecting [h, f_i, f_j]."""
    H, F, _, d, dh = bank.shape
    n = fid.size
    flat = reshape(transpose(bank, (1, 2, 0, 3, 4)), (F * F, H * d * dh))
    pair_idx = (fid[:, None] * F + fid[None, :]).ravel()
    rows = take_rows(flat, pair_idx)
    return transpose(reshape(rows, (n, n, H, d, dh)), (2, 0, 1, 3, 4))


def forward_naive_pair(batch: TokenBatch,
                       params: NaivePairAttnParams) -> tuple[Tensor, AttnTrace]:
    """Field-pair-specialized attention.

    Every ordered token pair (i, j) projects with its own matrices, so q, k,
    and v all carry a pair axis; memory is O(B H N^2 d), acceptable only at
    the small field counts the budget guard admits.
    """
    tokens = batch.tokens
    fid = batch.field_ids
    B, N, d = tokens.shape
    H = params.heads
    check_naive_budget(params.field_count, d)
    wq = _gather_pair_bank(params.wq, fid)             # (H, N, N, d, dh)
    wk = _gather_pair_bank(params.wk, fid)
    wv = _gather_pair_bank(params.wv, fid)
    as_query = reshape(tokens, (B, 1, N, 1, 1, d))     # token index = axis 2 (i)
    as_target = reshape(tokens, (B, 1, 1, N, 1, d))    # token index = axis 3 (j)
    dh = d // H
    q = reshape(matmul(as_query, wq), (B, H, N, N, dh))
    k = reshape(matmul(as_target, wk), (B, H, N, N, dh))
    v = reshape(matmul(as_target, wv), (B, H, N, N, dh))
    scores = reduce_sum(mul(q, k), axis=-1)            # (B, H, N, N)
    logits = mul(scores, 1.0 / np.sqrt(d))
    alpha = softmax(logits, axis=-1)
    ctx = reduce_sum(mul(reshape(alpha, (B, H, N, N, 1)), v), axis=3)
    out = matmul(_merge_heads(ctx), params.wo)
    trace = AttnTrace(scores=scores.data.copy(), probs=alpha.data.copy())
    return out, trace


def decomposed_as_naive(params: DecomposedAttnParams) -> NaivePairAttnParams:
    """Instantiate the pair-specialized banks that reproduce a decomposed
    parameterization exactly: the modulation scalar folds into the query
    matrix, and k/v take the target field's matrices."""
    H = params.heads
    d = params.dim
    F = params.field_count
    dh = d // H
    fid = np.arange(F)
    qb = params.wq.data[_proj_ids(params.wq, fid, F)]  # (F, d, d)
    kb = params.wk.data[_proj_ids(params.wk, fid, F)]
    vb = params.wv.data[_proj_ids(params.wv, fid, F)]
    wq = np.empty((H, F, F, d, dh))
    wk = np.empty((H, F, F, d, dh))
    wv = np.empty((H, F, F, d, dh))
    for h in range(H):
        lo, hi = h * dh, (h + 1) * dh
        for i in range(F):
            for j in range(F):
                wq[h, i, j] = params.w.data[h, i, j] * qb[i][:, lo:hi]
                wk[h, i, j] = kb[j][:, lo:hi]
                wv[h, i, j] = vb[j][:, lo:hi]
    return NaivePairAttnParams(wq=parameter(wq), wk=parameter(wk),
                               wv=parameter(wv),
                               wo=parameter(params.wo.data.copy()), heads=H)


def standard_as_decomposed(params: StandardAttnParams,
                           field_count: int) -> DecomposedAttnParams:
    """Shared-projection, all-ones-modulation decomposed parameterization
    that reproduces standard attention exactly."""
    return DecomposedAttnParams(
        wq=parameter(params.wq.data[None, :, :].copy()),
        wk=parameter(params.wk.data[None, :, :].copy()),
        wv=parameter(params.wv.data[None, :, :].copy()),
        w=parameter(np.ones((params.heads, field_count, field_count))),
        wo=parameter(params.wo.data.copy()),
        heads=params.heads)
