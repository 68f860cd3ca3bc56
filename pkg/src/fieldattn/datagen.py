"""Synthetic click benchmark with planted cross-field interactions.

Each row draws one value per field; the label's logit is a global bias plus
a sum over planted field pairs of theta * r, where r in {-1, +1} comes from
a split-mix hash of (seed, pair, both values).  The signal lives purely in
value combinations, so no per-field marginal model can see it, and the
stored oracle logits give the exact Bayes ceiling for AUC.

Generation is sharded: every shard derives its own bit stream from the
dataset seed, so shards can be produced in any order (or in parallel) and
always assemble into the same dataset.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError, DataError, DomainError
from .fields import FieldSchema, format_cell, parse_cell

SHARD_ROWS = 16384

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xBF58476D1CE4E5B9)
_MIX3 = np.uint64(0x94D049BB133111EB)


def splitmix64(x) -> np.ndarray:
    """Vectorized split-mix finalizer over uint64 (wraparound arithmetic)."""
    with np.errstate(over="ignore"):
        z = (np.asarray(x, dtype=np.uint64) + _MIX1)
        z = (z ^ (z >> np.uint64(30))) * _MIX2
        z = (z ^ (z >> np.uint64(27))) * _MIX3
        return z ^ (z >> np.uint64(31))


def interaction_sign(seed: int, i: int, j: int, vi, vj) -> np.ndarray:
    """Deterministic r(seed, i, j, v_i, v_j) in {-1, +1}, vectorized over
    the value arrays.  Arguments fold in one at a time, so changing any one
    of them reroutes the whole stream."""
    z = splitmix64(np.uint64(seed))
    z = splitmix64(z ^ np.uint64(i))
    z = splitmix64(z ^ np.uint64(j))
    z = splitmix64(z ^ np.asarray(vi, dtype=np.uint64))
    z = splitmix64(z ^ np.asarray(vj, dtype=np.uint64))
    return 1.0 - 2.0 * (z >> np.uint64(63)).astype(np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    schema: FieldSchema
    planted: tuple                  # ((field_i, field_j, theta), ...)
    bias: float
    sample_count: int
    seed: int
    value_dist: str = "zipf"        # "uniform" | "zipf"
    zipf_exponent: float = 1.1

    def __post_init__(self):
        F = self.schema.field_count
        for (i, j, theta) in self.planted:
            if not (0 <= i < F and 0 <= j < F):
                raise ConfigError(f"planted pair ({i},{j}) references a "
                                  f"missing field (F={F})")
            if i == j:
                raise ConfigError(f"planted pair ({i},{j}) must cross fields")
            if not np.isfinite(theta):
                raise ConfigError("planted strengths must be finite")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.value_dist not in ("uniform", "zipf"):
            raise ConfigError(f"unknown value distribution {self.value_dist!r}")
        if self.value_dist == "zipf" and self.zipf_exponent <= 0:
            raise ConfigError("zipf exponent must be positive")


@dataclasses.dataclass
class LabeledDataset:
    """Rows of per-field value ids with binary labels.

    ``ids`` is an (n, F) int64 array when every field takes a single id;
    schemas with sequence fields use a list of per-sample rows whose
    sequence cells are lists.
    """

    ids: np.ndarray | list
    labels: np.ndarray                  # (n,) int64 in {0, 1}
    oracle_logits: np.ndarray | None    # (n,) float64, None if unavailable
    seed: int | None = None

    @property
    def sample_count(self) -> int:
        return len(self.ids)


def dataset_equal(a: LabeledDataset, b: LabeledDataset) -> bool:
    if isinstance(a.ids, np.ndarray) != isinstance(b.ids, np.ndarray):
        return False
    if isinstance(a.ids, np.ndarray):
        same_ids = np.array_equal(a.ids, b.ids)
    else:
        same_ids = list(map(list, a.ids)) == list(map(list, b.ids))
    if not (same_ids and np.array_equal(a.labels, b.labels)):
        return False
    if (a.oracle_logits is None) != (b.oracle_logits is None):
        return False
    return a.oracle_logits is None \
        or np.array_equal(a.oracle_logits, b.oracle_logits)


def _value_cdf(spec: SyntheticSpec, vocab: int) -> np.ndarray:
    if spec.value_dist == "uniform":
        pmf = np.full(vocab, 1.0 / vocab)
    else:
        pmf = (np.arange(1, vocab + 1, dtype=np.float64)) ** (-spec.zipf_exponent)
        pmf /= pmf.sum()
    return np.cumsum(pmf)


def oracle_logit(spec: SyntheticSpec, ids: np.ndarray) -> np.ndarray:
    """Bayes logit for each row: bias + sum of planted interaction terms."""
    logit = np.full(ids.shape[0], spec.bias, dtype=np.float64)
    for (i, j, theta) in spec.planted:
        logit += theta * interaction_sign(spec.seed, i, j, ids[:, i], ids[:, j])
    return logit


def shard_count(spec: SyntheticSpec) -> int:
    return -(-spec.sample_count // SHARD_ROWS)


def generate_shard(spec: SyntheticSpec, shard: int):
    """Rows [shard*SHARD_ROWS, ...) as (ids, labels, logits).

    Each shard seeds its own generator from the dataset seed and shard
    index, so shards are independent of production order."""
    if not 0 <= shard < shard_count(spec):
        raise DomainError(f"shard {shard} out of range")
    lo = shard * SHARD_ROWS
    n = min(SHARD_ROWS, spec.sample_count - lo)
    shard_seed = int(splitmix64(np.uint64(spec.seed) ^ splitmix64(np.uint64(shard))))
    rng = np.random.default_rng(shard_seed)
    F = spec.schema.field_count
    ids = np.empty((n, F), dtype=np.int64)
    for f, field in enumerate(spec.schema.fields):
        cdf = _value_cdf(spec, field.vocab_size)
        ids[:, f] = np.searchsorted(cdf, rng.random(n), side="right")
    np.clip(ids, 0, None, out=ids)
    logits = oracle_logit(spec, ids)
    labels = (rng.random(n) < _sigmoid(logits)).astype(np.int64)
    return ids, labels, logits


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    parts = [generate_shard(spec, s) for s in range(shard_count(spec))]
    return LabeledDataset(
        ids=np.concatenate([p[0] for p in parts], axis=0),
        labels=np.concatenate([p[1] for p in parts]),
        oracle_logits=np.concatenate([p[2] for p in parts]),
        seed=spec.seed)


def solve_bias(spec: SyntheticSpec, target_rate: float,
               mc_rows: int = 200_000) -> float:
    """Bias achieving a Monte Carlo base rate of target_rate, by bisection.

    Samples the interaction sum once under ``spec.seed`` (the hash
    realization the dataset will actually use) and reuses it across
    bisection steps; the estimated rate is monotone in the bias."""
    if not 0.0 < target_rate < 1.0:
        raise DomainError("target_rate must be in (0, 1)")
    probe = dataclasses.replace(spec, bias=0.0, sample_count=mc_rows)
    data = generate_synthetic(probe)
    interaction = data.oracle_logits       # bias 0, so this is the pure sum
    lo, hi = -30.0, 30.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _sigmoid(interaction + mid).mean() < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def default_benchmark_spec(seed: int, embed_dim: int = 32, meta_dim: int = 8,
                           sample_count: int = 200_000,
                           base_rate: float = 0.3) -> SyntheticSpec:
    """The standard desk-scale benchmark: 8 fields of 50 values, four
    planted pairs at strength 1.5, skewed values, base rate near 0.3."""
    from .fields import build_schema
    schema = build_schema({
        "fields": [{"name": f"f{i}", "kind": "categorical", "cardinality": 50}
                   for i in range(8)],
        "embed_dim": embed_dim,
        "meta_dim": meta_dim,
    })
    planted = ((0, 1, 1.5), (2, 3, 1.5), (4, 5, 1.5), (6, 7, 1.5))
    spec = SyntheticSpec(schema=schema, planted=planted, bias=0.0,
                         sample_count=sample_count, seed=seed)
    bias = solve_bias(spec, base_rate)
    return dataclasses.replace(spec, bias=bias)


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Exact probability that a random positive outscores a random negative,
    ties counting one half.  Rank-sum computation; every intermediate is a
    half-integer below 2^52, so float64 arithmetic is exact."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise DomainError("auc expects matching 1-D scores and labels")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise DomainError("auc needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average 1-based rank
        i = j + 1
    u = ranks[y == 1].sum() - 0.5 * pos * (pos + 1)
    return float(u / (pos * neg))


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def oracle_path(path) -> str:
    return f"{path}.oracle"


def write_dataset(path, dataset: LabeledDataset, schema: FieldSchema) -> None:
    """CSV of `label,<field...>` rows plus a sidecar of oracle logits.
    Logits are written with repr, so the round trip is exact."""
    names = schema.field_names()
    if any(len(row) != len(names) for row in dataset.ids):
        raise DataError("dataset width does not match schema")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label," + ",".join(names) + "\n")
        for row, label in zip(dataset.ids, dataset.labels):
            cells = [format_cell(schema.fields[f], row[f])
                     for f in range(len(names))]
            fh.write(f"{int(label)}," + ",".join(cells) + "\n")
    if dataset.oracle_logits is not None:
        with open(oracle_path(path), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("oracle_logit\n")
            for v in dataset.oracle_logits:
                fh.write(repr(float(v)) + "\n")


def read_dataset(path, schema: FieldSchema) -> LabeledDataset:
    names = schema.field_names()
    ids = []
    labels = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "label," + ",".join(names):
            raise DataError(f"{path}: header {header!r} does not match schema")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != len(names) + 1:
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(names) + 1} cells, got {len(cells)}")
            try:
                label = int(cells[0])
                if label not in (0, 1):
                    raise ValueError
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad label {cells[0]!r}") from None
            try:
                row = [parse_cell(schema.fields[f], cells[f + 1])
                       for f in range(len(names))]
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            ids.append(row)
            labels.append(label)
    if not ids:
        raise DataError(f"{path}: no data rows")
    logits = None
    try:
        with open(oracle_path(path), encoding="utf-8") as fh:
            if fh.readline().rstrip("\n") != "oracle_logit":
                raise DataError(f"{oracle_path(path)}: bad header")
            vals = []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                try:
                    vals.append(float(line))
                except ValueError:
                    raise DataError(
                        f"{oracle_path(path)}:{lineno}: bad logit") from None
        if len(vals) != len(ids):
            raise DataError(f"{oracle_path(path)}: {len(vals)} logits for "
                            f"{len(ids)} rows")
        logits = np.array(vals, dtype=np.float64)
    except FileNotFoundError:
        logits = None
    has_seq = any(f.kind == "sequence" for f in schema.fields)
    return LabeledDataset(
        ids=ids if has_seq else np.array(ids, dtype=np.int64),
        labels=np.array(labels, dtype=np.int64),
        oracle_logits=logits, seed=None)
