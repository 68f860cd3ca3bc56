"""Basis-composed generation of per-field projection matrices.

Each role (Q, K, V) owns M basis matrices and a small scorer MLP.  A field's
meta-embedding is scored to an M-vector, the top K scores are kept (ties
toward the lower index), softmax over those raw scores gives mixture
weights, and the field's projection is the weighted sum of the selected
bases.  Selection is hard: gradients flow only through the selected
weights (straight-through, no relaxation).

Training, one-off composition, and cache materialization all run the same
arithmetic path, so a materialized cache is bit-identical to what the
training forward computes.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .errors import ConfigError, DataError, DomainError
from .numerics import (
    Tensor,
    add,
    matmul,
    mul,
    parameter,
    reduce_sum,
    relu,
    reshape,
    softmax,
    take_along,
    take_rows,
)

ROLES = ("Q", "K", "V")

CACHE_MAGIC = "fieldattn-projcache-v1"


@dataclasses.dataclass
class HypernetState:
    """Bases, meta-embeddings, and one scorer MLP per role.

    ``meta`` (F, k) may be a Tensor shared with other layers' states; each
    state owns its bases (M, d, d) and scorer weights per role.
    """

    bases: dict[str, Tensor]
    meta: Tensor
    scorer_w1: dict[str, Tensor]
    scorer_b1: dict[str, Tensor]
    scorer_w2: dict[str, Tensor]
    scorer_b2: dict[str, Tensor]
    topk: int

    @property
    def field_count(self) -> int:
        return self.meta.shape[0]

    @property
    def meta_dim(self) -> int:
        return self.meta.shape[1]

    @property
    def basis_count(self) -> int:
        return self.bases["Q"].shape[0]

    @property
    def dim(self) -> int:
        return self.bases["Q"].shape[1]


def init_hypernet(field_count: int, dim: int, meta_dim: int, basis_count: int,
                  topk: int, rng: np.random.Generator,
                  meta: Tensor | None = None) -> HypernetState:
    if basis_count < 1:
        raise ConfigError("basis_count must be >= 1")
    if not 1 <= topk <= basis_count:
        raise ConfigError(f"topk must be in [1, {basis_count}], got {topk}")
    if meta is not None and meta.shape != (field_count, meta_dim):
        raise ConfigError("shared meta tensor has the wrong shape")
    hidden = 2 * meta_dim
    b_scale = 1.0 / np.sqrt(dim)

    def per_role(maker):
        return {role: maker() for role in ROLES}

    return HypernetState(
        bases=per_role(lambda: parameter(
            rng.normal(0.0, b_scale, size=(basis_count, dim, dim)))),
        meta=meta if meta is not None
        else parameter(rng.normal(0.0, 1.0, size=(field_count, meta_dim))),
        scorer_w1=per_role(lambda: parameter(
            rng.normal(0.0, 1.0 / np.sqrt(meta_dim), size=(meta_dim, hidden)))),
        scorer_b1=per_role(lambda: parameter(np.zeros(hidden))),
        scorer_w2=per_role(lambda: parameter(
            rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, basis_count)))),
        scorer_b2=per_role(lambda: parameter(np.zeros(basis_count))),
        topk=topk)


def _check_role(role: str) -> None:
    if role not in ROLES:
        raise DomainError(f"unknown role {role!r}; expected one of {ROLES}")


def score_all(state: HypernetState, role: str) -> Tensor:
    """Scorer MLP over every field at once: (F, M) on the tape."""
    _check_role(role)
    h = relu(add(matmul(state.meta, state.scorer_w1[role]),
                 reshape(state.scorer_b1[role], (1, 2 * state.meta_dim))))
    return add(matmul(h, state.scorer_w2[role]),
               reshape(state.scorer_b2[role], (1, state.basis_count)))


def score_fields(state: HypernetState, field: int, role: str) -> np.ndarray:
    """Detached M-vector of basis scores for one field."""
    if not 0 <= field < state.field_count:
        raise DomainError(f"field {field} out of range")
    return score_all(state, role).data[field].copy()


def topk_select(scores, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the K largest scores (ties toward the lower index) and the
    softmax of those raw scores, in descending-score order."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise DomainError("topk_select expects a 1-D score vector")
    if not 1 <= k <= s.size:
        raise ConfigError(f"K must be in [1, {s.size}], got {k}")
    pi = np.argsort(-s, kind="stable")[:k]
    shifted = s[pi] - s[pi].max()
    e = np.exp(shifted)
    return pi, e / e.sum()


def select_matrix(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise hard selection on a detached (F, M) score matrix."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def compose_all(state: HypernetState,
                role: str) -> tuple[Tensor, np.ndarray, Tensor]:
    """All F composed projections for a role: ((F, d, d) on the tape,
    selected indices (F, K), mixture weights (F, K) on the tape).

    Selection is computed from detached scores; the softmax over the
    selected raw scores stays on the tape, so gradients reach the meta
    embeddings and scorer only through the selected entries.
    """
    F = state.field_count
    K = state.topk
    scores = score_all(state, role)
    pi = select_matrix(scores.data, K)
    selected = take_along(scores, pi, axis=1)          # (F, K)
    alpha = softmax(selected, axis=-1)
    basis_sel = take_rows(state.bases[role], pi)       # (F, K, d, d)
    weighted = mul(reshape(alpha, (F, K, 1, 1)), basis_sel)
    return reduce_sum(weighted, axis=1), pi, alpha


def compose_projection(state: HypernetState, field: int, role: str) -> np.ndarray:
    """Composed d x d matrix for one field, detached.

    Runs the full-bank composition and slices one row, so the result is
    bit-identical to the training path and to a materialized cache.
    """
    if not 0 <= field < state.field_count:
        raise DomainError(f"field {field} out of range")
    W, _, _ = compose_all(state, role)
    return W.data[field].copy()


@dataclasses.dataclass
class MaterializedCache:
    """Composed projections for every field and role, with provenance."""

    field_count: int
    dim: int
    basis_count: int
    topk: int
    matrices: dict[str, np.ndarray]   # role -> (F, d, d)
    indices: dict[str, np.ndarray]    # role -> (F, K) int64
    weights: dict[str, np.ndarray]    # role -> (F, K)

    def get(self, field: int, role: str) -> np.ndarray:
        _check_role(role)
        return self.matrices[role][field]


def materialize_cache(state: HypernetState) -> MaterializedCache:
    matrices: dict[str, np.ndarray] = {}
    indices: dict[str, np.ndarray] = {}
    weights: dict[str, np.ndarray] = {}
    for role in ROLES:
        W, pi, alpha = compose_all(state, role)
        matrices[role] = W.data.copy()
        indices[role] = pi.astype(np.int64)
        weights[role] = alpha.data.copy()
    return MaterializedCache(
        field_count=state.field_count, dim=state.dim,
        basis_count=state.basis_count, topk=state.topk,
        matrices=matrices, indices=indices, weights=weights)


def save_cache(cache: MaterializedCache, path) -> None:
    """Binary cache file: one JSON header line, then raw C-order float64 /
    int64 blocks per role in (matrix, indices, weights) order."""
    header = {
        "magic": CACHE_MAGIC,
        "field_count": cache.field_count,
        "dim": cache.dim,
        "basis_count": cache.basis_count,
        "topk": cache.topk,
        "roles": list(ROLES),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for role in ROLES:
            fh.write(np.ascontiguousarray(cache.matrices[role]).tobytes())
            fh.write(np.ascontiguousarray(
                cache.indices[role].astype(np.int64)).tobytes())
            fh.write(np.ascontiguousarray(cache.weights[role]).tobytes())


def load_cache(path) -> MaterializedCache:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"cache file {path}: bad header") from e
        if header.get("magic") != CACHE_MAGIC:
            raise DataError(f"cache file {path}: wrong magic")
        F, d = int(header["field_count"]), int(header["dim"])
        K = int(header["topk"])
        if header.get("roles") != list(ROLES):
            raise DataError(f"cache file {path}: unexpected role order")
        matrices: dict[str, np.ndarray] = {}
        indices: dict[str, np.ndarray] = {}
        weights: dict[str, np.ndarray] = {}
        for role in ROLES:
            mat = fh.read(F * d * d * 8)
            idx = fh.read(F * K * 8)
            wts = fh.read(F * K * 8)
            if len(mat) < F * d * d * 8 or len(idx) < F * K * 8 \
                    or len(wts) < F * K * 8:
                raise DataError(f"cache file {path}: truncated block for {role}")
            matrices[role] = np.frombuffer(mat, dtype=np.float64).reshape(F, d, d).copy()
            indices[role] = np.frombuffer(idx, dtype=np.int64).reshape(F, K).copy()
            weights[role] = np.frombuffer(wts, dtype=np.float64).reshape(F, K).copy()
        if fh.read(1):
            raise DataError(f"cache file {path}: trailing bytes")
    return MaterializedCache(field_count=F, dim=d,
                             basis_count=int(header["basis_count"]), topk=K,
                             matrices=matrices, indices=indices, weights=weights)


def cache_equal(a: MaterializedCache, b: MaterializedCache) -> bool:
    if (a.field_count, a.dim, a.basis_count, a.topk) != \
            (b.field_count, b.dim, b.basis_count, b.topk):
        return False
    for role in ROLES:
        if not (np.array_equal(a.matrices[role], b.matrices[role])
                and np.array_equal(a.indices[role], b.indices[role])
                and np.array_equal(a.weights[role], b.weights[role])):
            return False
    return True
