"""Field schemas and tokenization.

A schema names each field and fixes its kind and cardinality.  Raw samples
(one value id per field, or several for sequence fields) become a batch of
field-identified tokens: h = embedding_row + field_bias.  Sequence fields
are mean-pooled over their member ids before the bias is added, so every
sample yields exactly one token per field.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Tensor, add, as_f64, matmul, parameter, reshape, stack_t, take_rows

KINDS = ("categorical", "numeric", "sequence")


@dataclasses.dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    vocab_size: int        # bin count for numeric fields
    max_seq_len: int = 1


@dataclasses.dataclass(frozen=True)
class FieldSchema:
    fields: tuple[FieldSpec, ...]
    embed_dim: int
    meta_dim: int

    @property
    def field_count(self) -> int:
        return len(self.fields)

    @property
    def total_vocab(self) -> int:
        return sum(f.vocab_size for f in self.fields)

    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]


def build_schema(spec: dict) -> FieldSchema:
    """Validate a schema description (the parsed JSON form) into a FieldSchema.

    Expected shape: {"fields": [{"name", "kind", "cardinality"|"bins",
    optional "max_seq_len"}], "embed_dim", "meta_dim"}.
    """
    if not isinstance(spec, dict):
        raise ConfigError("schema description must be a mapping")
    raw_fields = spec.get("fields")
    if not raw_fields:
        raise ConfigError("schema must declare at least one field")
    embed_dim = int(spec.get("embed_dim", 0))
    meta_dim = int(spec.get("meta_dim", 0))
    if embed_dim < 1:
        raise ConfigError("embed_dim must be a positive integer")
    if meta_dim < 1:
        raise ConfigError("meta_dim must be a positive integer")
    fields: list[FieldSpec] = []
    seen: set[str] = set()
    for pos, entry in enumerate(raw_fields):
        name = entry.get("name")
        kind = entry.get("kind")
        if not name or not isinstance(name, str):
            raise ConfigError(f"field at position {pos} has no name")
        if name in seen:
            raise ConfigError(f"duplicate field name {name!r}")
        seen.add(name)
        if kind not in KINDS:
            raise ConfigError(f"field {name!r}: unknown kind {kind!r}")
        card_key = "bins" if kind == "numeric" else "cardinality"
        if card_key not in entry:
            raise ConfigError(f"field {name!r}: missing {card_key}")
        vocab = int(entry[card_key])
        if vocab < 1:
            raise ConfigError(f"field {name!r}: {card_key} must be >= 1")
        max_len = int(entry.get("max_seq_len", 1))
        if kind == "sequence" and max_len < 1:
            raise ConfigError(f"field {name!r}: max_seq_len must be >= 1")
        fields.append(FieldSpec(name=name, kind=kind, vocab_size=vocab,
                                max_seq_len=max_len if kind == "sequence" else 1))
    return FieldSchema(fields=tuple(fields), embed_dim=embed_dim, meta_dim=meta_dim)


def schema_to_dict(schema: FieldSchema) -> dict:
    out_fields = []
    for f in schema.fields:
        entry: dict = {"name": f.name, "kind": f.kind}
        if f.kind == "numeric":
            entry["bins"] = f.vocab_size
        else:
            entry["cardinality"] = f.vocab_size
        if f.kind == "sequence":
            entry["max_seq_len"] = f.max_seq_len
        out_fields.append(entry)
    return {"fields": out_fields, "embed_dim": schema.embed_dim,
            "meta_dim": schema.meta_dim}


def save_schema(schema: FieldSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_dict(schema), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schema(path) -> FieldSchema:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"schema file {path}: invalid JSON: {e}") from e
    return build_schema(data)


def discretize_numeric(value: float, edges) -> int:
    """Map a real value to its bucket: edges[i] <= value < edges[i+1].

    Values below the first edge clamp to bucket 0; values at or above the
    last edge clamp to the final bucket.  len(edges) - 1 buckets total.
    """
    e = as_f64(edges)
    if e.ndim != 1 or e.size < 2:
        raise ConfigError("bucket edges must be a vector of length >= 2")
    if not np.all(np.diff(e) > 0):
        raise ConfigError("bucket edges must be strictly ascending")
    i = int(np.searchsorted(e, value, side="right")) - 1
    return min(max(i, 0), e.size - 2)


@dataclasses.dataclass
class EmbeddingParams:
    """Per-field embedding tables (|V_f| x d) and field biases (d,)."""

    tables: list[Tensor]
    biases: list[Tensor]
    dim: int


def init_embeddings(schema: FieldSchema, rng: np.random.Generator) -> EmbeddingParams:
    d = schema.embed_dim
    scale = 1.0 / np.sqrt(d)
    tables = [parameter(rng.normal(0.0, scale, size=(f.vocab_size, d)))
              for f in schema.fields]
    biases = [parameter(np.zeros(d)) for _ in schema.fields]
    return EmbeddingParams(tables=tables, biases=biases, dim=d)


@dataclasses.dataclass
class TokenBatch:
    """One token per field per sample: tokens (B, N, d), field ids (N,)."""

    tokens: Tensor
    field_ids: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_count(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


def parse_cell(field: FieldSpec, text: str):
    """Parse one CSV cell for a field: an integer id, or ids joined by '|'
    for sequence fields.  Bounds are checked downstream by embed_batch."""
    text = text.strip()
    if field.kind == "sequence":
        if text == "":
            raise DataError(f"field {field.name!r}: empty sequence cell")
        try:
            ids = [int(p) for p in text.split("|")]
        except ValueError as e:
            raise DataError(f"field {field.name!r}: bad sequence cell {text!r}") from e
        if len(ids) > field.max_seq_len:
            raise DataError(f"field {field.name!r}: sequence longer than "
                            f"max_seq_len={field.max_seq_len}")
        return ids
    try:
        return int(text)
    except ValueError as e:
        raise DataError(f"field {field.name!r}: bad id cell {text!r}") from e


def format_cell(field: FieldSpec, value) -> str:
    if field.kind == "sequence":
        ids = value if isinstance(value, (list, tuple)) else [value]
        return "|".join(str(int(v)) for v in ids)
    return str(int(value))


def _check_ids(schema: FieldSchema, pos: int, ids: np.ndarray, sample_of) -> None:
    f = schema.fields[pos]
    bad = (ids < 0) | (ids >= f.vocab_size)
    if np.any(bad):
        b = int(np.argmax(bad))
        raise DataError(f"sample {sample_of(b)}, field {f.name!r}: id "
                        f"{int(ids[b])} outside vocabulary of size {f.vocab_size}")


def embed_batch(schema: FieldSchema, raw, params: EmbeddingParams,
                field_order=None) -> TokenBatch:
    """Tokenize a batch of raw samples.

    ``raw`` is either an integer array of shape (B, F) (one id per field)
    or a list of per-sample sequences whose entries are ids, with lists of
    ids for sequence fields.  ``field_order`` permutes token positions; the
    default is schema order.  Tokens are h = embedding_row + field_bias,
    with sequence fields mean-pooled first.
    """
    F = schema.field_count
    order = np.arange(F) if field_order is None else np.asarray(field_order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(F)):
        raise ConfigError("field_order must be a permutation of the schema fields")

    if isinstance(raw, np.ndarray):
        if raw.ndim != 2 or raw.shape[1] != F:
            raise DataError(f"raw id array must have shape (B, {F})")
        ids_by_field = [raw[:, f].astype(np.int64) for f in range(F)]
        seq_lists = None
        B = raw.shape[0]
    else:
        samples = list(raw)
        B = len(samples)
        if B == 0:
            raise DataError("empty batch")
        ids_by_field = []
        seq_lists = {}
        for f in range(F):
            if schema.fields[f].kind == "sequence":
                rows = []
                for s, sample in enumerate(samples):
                    v = sample[f]
                    rows.append([int(x) for x in (v if isinstance(v, (list, tuple)) else [v])])
                    if not rows[-1]:
                        raise DataError(f"sample {s}, field "
                                        f"{schema.fields[f].name!r}: empty sequence")
                seq_lists[f] = rows
                ids_by_field.append(None)
            else:
                ids_by_field.append(np.array([int(sample[f]) for sample in samples],
                                             dtype=np.int64))

    per_field: list[Tensor] = [None] * F  # type: ignore[list-item]
    for f in range(F):
        spec_f = schema.fields[f]
        if seq_lists is not None and f in seq_lists:
            # Mean-pool member embeddings via a (B, V_f) weight matrix so the
            # pooling stays on the tape.
            pool = np.zeros((B, spec_f.vocab_size))
            for s, ids in enumerate(seq_lists[f]):
                arr = np.asarray(ids, dtype=np.int64)
                _check_ids(schema, f, arr, lambda b, s=s: s)
                np.add.at(pool[s], arr, 1.0 / len(ids))
            rows = matmul(parameter(pool), params.tables[f])
        else:
            ids = ids_by_field[f]
            _check_ids(schema, f, ids, lambda b: b)
            rows = take_rows(params.tables[f], ids)
        per_field[f] = add(rows, reshape(params.biases[f], (1, schema.embed_dim)))

    ordered = [per_field[int(f)] for f in order]
    tokens = stack_t(ordered, axis=1)
    return TokenBatch(tokens=tokens, field_ids=order.copy())
