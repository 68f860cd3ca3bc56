"""The full prediction stack.

Each of L identical blocks applies attention, layer norm, and a two-layer
rectifier FFN, with one residual connection spanning the whole block:

    Z_next = FFN(LayerNorm(Attn(Z))) + Z

The head sums token outputs and squashes a single dot product:

    p = sigmoid(w_head . sum_i z_i)

Variants select the attention inside the block: per-field decomposed
(optionally with hypernetwork-composed projections), globally shared
(standard), or per-field-pair specialized (naive).  Ablation switches zero
the field biases, freeze modulation at 1, or share one projection bank
across fields.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import attention as at
from . import hypernet as hn
from .errors import ConfigError, DataError, DomainError
from .fields import (
    EmbeddingParams,
    FieldSchema,
    TokenBatch,
    build_schema,
    embed_batch,
    init_embeddings,
    schema_to_dict,
)
from .numerics import (
    Tensor,
    add,
    as_f64,
    clip,
    layer_norm_t,
    log,
    matmul,
    mul,
    parameter,
    reduce_sum,
    relu,
    rel_error,
    reshape,
    sigmoid,
)

VARIANTS = ("decomposed", "decomposed_hypernet", "standard", "naive_pair")

LN_EPS = 1e-5
CLAMP = 1e-12

CHECKPOINT_MAGIC = "fieldattn-checkpoint-v1"

_clamp_events = 0


def clamp_warning_count() -> int:
    """How many probabilities loss_bce has clamped since the last reset."""
    return _clamp_events


def reset_clamp_warnings() -> None:
    global _clamp_events
    _clamp_events = 0


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    field_count: int
    dim: int
    heads: int
    depth: int
    variant: str = "decomposed"
    ffn_hidden: int = 0            # 0 means 4 * dim
    basis_count: int = 4
    topk: int = 2
    meta_dim: int = 4
    field_bias: bool = True
    modulation: bool = True
    field_alignment: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.field_count < 1 or self.dim < 1 or self.depth < 1:
            raise ConfigError("field_count, dim, and depth must be >= 1")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must divide into heads {self.heads}")
        if self.ffn_width < self.dim:
            raise ConfigError("ffn_hidden must be >= dim")
        if self.basis_count < 1 or not 1 <= self.topk <= self.basis_count:
            raise ConfigError("need 1 <= topk <= basis_count")
        if self.meta_dim < 1:
            raise ConfigError("meta_dim must be >= 1")
        if self.variant in ("standard", "naive_pair") and not (
                self.modulation and self.field_alignment):
            raise ConfigError(
                "modulation/field_alignment ablations apply to the decomposed "
                "variants only")
        if self.variant == "decomposed_hypernet" and not self.field_alignment:
            raise ConfigError(
                "hypernetwork composition requires per-field alignment")

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden else 4 * self.dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)


@dataclasses.dataclass
class LayerParams:
    attn: object | None                 # variant-specific attention params
    hyper: hn.HypernetState | None      # decomposed_hypernet only
    mod_w: Tensor | None                # modulation for the hypernet variant
    out_proj: Tensor | None             # output projection, ditto
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln_gain: Tensor
    ln_shift: Tensor


@dataclasses.dataclass
class ModelParams:
    config: ModelConfig
    schema: FieldSchema
    embed: EmbeddingParams
    layers: list[LayerParams]
    head: Tensor


def init_params(config: ModelConfig, schema: FieldSchema,
                rng: np.random.Generator) -> ModelParams:
    if schema.field_count != config.field_count:
        raise ConfigError(
            f"schema has {schema.field_count} fields, config expects "
            f"{config.field_count}")
    if schema.embed_dim != config.dim:
        raise ConfigError(
            f"schema embed_dim {schema.embed_dim} != config dim {config.dim}")
    if config.variant == "decomposed_hypernet" and schema.meta_dim != config.meta_dim:
        raise ConfigError(
            f"schema meta_dim {schema.meta_dim} != config meta_dim "
            f"{config.meta_dim}")
    F, d, H = config.field_count, config.dim, config.heads
    embed = init_embeddings(schema, rng)
    if not config.field_bias:
        for b in embed.biases:
            b.data[:] = 0.0
    scale = 1.0 / np.sqrt(d)
    layers: list[LayerParams] = []
    shared_meta: Tensor | None = None
    for _ in range(config.depth):
        attn = hyper = mod_w = out_proj = None
        if config.variant == "standard":
            attn = at.init_standard(d, H, rng)
        elif config.variant == "naive_pair":
            attn = at.init_naive_pair(F, d, H, rng)
        elif config.variant == "decomposed":
            banks = F if config.field_alignment else 1

            def bank():
                return parameter(rng.normal(0.0, scale, size=(banks, d, d)))

            w = parameter(rng.normal(0.0, 0.01, size=(H, F, F))) \
                if config.modulation else parameter(np.ones((H, F, F)))
            attn = at.DecomposedAttnParams(
                wq=bank(), wk=bank(), wv=bank(), w=w,
                wo=parameter(rng.normal(0.0, scale, size=(d, d))), heads=H)
        else:
            hyper = hn.init_hypernet(F, d, config.meta_dim, config.basis_count,
                                     config.topk, rng, meta=shared_meta)
            shared_meta = hyper.meta
            mod_w = parameter(rng.normal(0.0, 0.01, size=(H, F, F))) \
                if config.modulation else parameter(np.ones((H, F, F)))
            out_proj = parameter(rng.normal(0.0, scale, size=(d, d)))
        ffn = config.ffn_width
        layers.append(LayerParams(
            attn=attn, hyper=hyper, mod_w=mod_w, out_proj=out_proj,
            ffn_w1=parameter(rng.normal(0.0, scale, size=(d, ffn))),
            ffn_b1=parameter(np.zeros(ffn)),
            ffn_w2=parameter(rng.normal(0.0, 1.0 / np.sqrt(ffn), size=(ffn, d))),
            ffn_b2=parameter(np.zeros(d)),
            ln_gain=parameter(np.ones(d)),
            ln_shift=parameter(np.zeros(d))))
    head = parameter(rng.normal(0.0, scale, size=(d,)))
    return ModelParams(config=config, schema=schema, embed=embed,
                       layers=layers, head=head)


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Trainable tensors in a fixed declared order.

    Ablated groups (field biases when field_bias is off, modulation when it
    is frozen at 1) are excluded entirely.
    """
    config = params.config
    out: list[tuple[str, Tensor]] = []
    for i, t in enumerate(params.embed.tables):
        out.append((f"embed.table.{i}", t))
    if config.field_bias:
        for i, b in enumerate(params.embed.biases):
            out.append((f"embed.bias.{i}", b))
    if config.variant == "decomposed_hypernet":
        out.append(("hyper.meta", params.layers[0].hyper.meta))
    for li, layer in enumerate(params.layers):
        p = f"layer{li}"
        if config.variant in ("standard", "naive_pair"):
            a = layer.attn
            out += [(f"{p}.attn.wq", a.wq), (f"{p}.attn.wk", a.wk),
                    (f"{p}.attn.wv", a.wv), (f"{p}.attn.wo", a.wo)]
        elif config.variant == "decomposed":
            a = layer.attn
            out += [(f"{p}.attn.wq", a.wq), (f"{p}.attn.wk", a.wk),
                    (f"{p}.attn.wv", a.wv)]
            if config.modulation:
                out.append((f"{p}.attn.w", a.w))
            out.append((f"{p}.attn.wo", a.wo))
        else:
            h = layer.hyper
            for role in hn.ROLES:
                out.append((f"{p}.hyper.bases.{role}", h.bases[role]))
            for role in hn.ROLES:
                out += [(f"{p}.hyper.scorer.{role}.w1", h.scorer_w1[role]),
                        (f"{p}.hyper.scorer.{role}.b1", h.scorer_b1[role]),
                        (f"{p}.hyper.scorer.{role}.w2", h.scorer_w2[role]),
                        (f"{p}.hyper.scorer.{role}.b2", h.scorer_b2[role])]
            if config.modulation:
                out.append((f"{p}.attn.w", layer.mod_w))
            out.append((f"{p}.attn.wo", layer.out_proj))
        out += [(f"{p}.ffn.w1", layer.ffn_w1), (f"{p}.ffn.b1", layer.ffn_b1),
                (f"{p}.ffn.w2", layer.ffn_w2), (f"{p}.ffn.b2", layer.ffn_b2),
                (f"{p}.ln.gain", layer.ln_gain), (f"{p}.ln.shift", layer.ln_shift)]
    out.append(("head.w", params.head))
    return out


def zero_gradients(params: ModelParams) -> None:
    for _, t in named_parameters(params):
        t.grad = None


def _layer_attention(layer: LayerParams, batch: TokenBatch,
                     config: ModelConfig,
                     caches: list[hn.MaterializedCache] | None,
                     layer_index: int):
    if config.variant == "standard":
        return at.forward_standard(batch, layer.attn)
    if config.variant == "naive_pair":
        return at.forward_naive_pair(batch, layer.attn)
    if config.variant == "decomposed":
        return at.forward_decomposed(batch, layer.attn)
    if caches is not None:
        cache = caches[layer_index]
        dec = at.DecomposedAttnParams(
            wq=parameter(cache.matrices["Q"]), wk=parameter(cache.matrices["K"]),
            wv=parameter(cache.matrices["V"]), w=layer.mod_w,
            wo=layer.out_proj, heads=config.heads)
        return at.forward_decomposed(batch, dec)
    wq, _, _ = hn.compose_all(layer.hyper, "Q")
    wk, _, _ = hn.compose_all(layer.hyper, "K")
    wv, _, _ = hn.compose_all(layer.hyper, "V")
    dec = at.DecomposedAttnParams(wq=wq, wk=wk, wv=wv, w=layer.mod_w,
                                  wo=layer.out_proj, heads=config.heads)
    return at.forward_decomposed(batch, dec)


def backbone(params: ModelParams, raw, collect_traces: bool = False,
             caches: list[hn.MaterializedCache] | None = None):
    """Run the L blocks; returns (pooled (B, d) Tensor, traces or None)."""
    config = params.config
    batch = raw if isinstance(raw, TokenBatch) \
        else embed_batch(params.schema, raw, params.embed)
    if batch.token_count != config.field_count:
        raise ConfigError(
            f"batch has {batch.token_count} tokens, config expects "
            f"{config.field_count}")
    if batch.dim != config.dim:
        raise ConfigError(f"batch dim {batch.dim} != config dim {config.dim}")
    if caches is not None and len(caches) != config.depth:
        raise ConfigError("need one materialized cache per layer")
    traces = [] if collect_traces else None
    cur = batch
    for li, layer in enumerate(params.layers):
        attn_out, trace = _layer_attention(layer, cur, config, caches, li)
        if traces is not None:
            traces.append(trace)
        normed = layer_norm_t(attn_out, layer.ln_gain, layer.ln_shift, LN_EPS)
        hidden = relu(add(matmul(normed, layer.ffn_w1), layer.ffn_b1))
        ffn_out = add(matmul(hidden, layer.ffn_w2), layer.ffn_b2)
        cur = TokenBatch(tokens=add(ffn_out, cur.tokens),
                         field_ids=cur.field_ids)
    return reduce_sum(cur.tokens, axis=1), traces


def forward(params: ModelParams, raw, collect_traces: bool = False,
            caches: list[hn.MaterializedCache] | None = None):
    """Predicted click probabilities (B,) on the tape, plus optional traces.

    ``raw`` is a TokenBatch or anything embed_batch accepts.  Passing
    ``caches`` (one per layer, from materialize_caches) makes the hypernet
    variant read precomposed projections instead of evaluating the scorer.
    """
    pooled, traces = backbone(params, raw, collect_traces, caches)
    d = params.config.dim
    logits = reshape(matmul(pooled, reshape(params.head, (d, 1))),
                     (pooled.shape[0],))
    return sigmoid(logits), traces


def materialize_caches(params: ModelParams) -> list[hn.MaterializedCache]:
    if params.config.variant != "decomposed_hypernet":
        raise DomainError("only the hypernet variant has caches to materialize")
    return [hn.materialize_cache(layer.hyper) for layer in params.layers]


def loss_bce(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy.  Probabilities outside (0, 1) clamp to
    [1e-12, 1 - 1e-12]; each clamped entry bumps the module warning counter."""
    global _clamp_events
    y = as_f64(labels)
    if probs.ndim != 1 or y.shape != probs.shape:
        raise DomainError("loss_bce expects matching 1-D probs and labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DomainError("labels must be 0 or 1")
    outside = int(np.sum((probs.data < CLAMP) | (probs.data > 1.0 - CLAMP)))
    if outside:
        _clamp_events += outside
    p = clip(probs, CLAMP, 1.0 - CLAMP)
    ll = add(mul(parameter(y), log(p)),
             mul(parameter(1.0 - y), log(add(1.0, mul(p, -1.0)))))
    return mul(reduce_sum(ll), -1.0 / y.size)


def loss_on(params: ModelParams, raw, labels) -> Tensor:
    probs, _ = forward(params, raw)
    return loss_bce(probs, labels)


def compute_gradients(params: ModelParams, raw,
                      labels) -> tuple[float, dict[str, np.ndarray]]:
    """Analytic gradients of the mean BCE for every trainable group."""
    zero_gradients(params)
    loss = loss_on(params, raw, labels)
    loss.backward()
    grads = {name: (t.grad.copy() if t.grad is not None
                    else np.zeros_like(t.data))
             for name, t in named_parameters(params)}
    return float(loss.data), grads


def _selection_signature(params: ModelParams) -> bytes:
    if params.config.variant != "decomposed_hypernet":
        return b""
    parts = []
    for layer in params.layers:
        for role in hn.ROLES:
            scores = hn.score_all(layer.hyper, role).data
            parts.append(hn.select_matrix(scores, layer.hyper.topk).tobytes())
    return b"".join(parts)


def gradient_check(params: ModelParams, raw, labels, h: float = 1e-5,
                   max_coords_per_group: int = 24,
                   rng: np.random.Generator | None = None) -> dict[str, dict]:
    """Compare analytic gradients with central differences, group by group.

    Large groups are spot-checked on a random coordinate subset.  For the
    hypernet variant, coordinates whose perturbation flips the Top-K
    selection are skipped: the loss is only piecewise smooth there, so a
    central difference does not estimate the one-sided gradient in use.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = compute_gradients(params, raw, labels)
    base_sig = _selection_signature(params)
    report: dict[str, dict] = {}
    for name, tensor in named_parameters(params):
        flat = tensor.data.ravel()
        size = flat.size
        if size <= max_coords_per_group:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords_per_group,
                                        replace=False))
        analytic, numeric = [], []
        skipped = 0
        for i in coords:
            orig = flat[i]
            vals = []
            stable = True
            for delta in (h, -h):
                flat[i] = orig + delta
                if base_sig and _selection_signature(params) != base_sig:
                    stable = False
                    break
                vals.append(float(loss_on(params, raw, labels).data))
            flat[i] = orig
            if not stable:
                skipped += 1
                continue
            analytic.append(grads[name].ravel()[i])
            numeric.append((vals[0] - vals[1]) / (2.0 * h))
        if not analytic:
            report[name] = {"rel_err": float("nan"), "checked": 0,
                            "skipped": skipped}
            continue
        report[name] = {
            "rel_err": rel_error(np.array(analytic), np.array(numeric)),
            "checked": len(analytic), "skipped": skipped}
    return report


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

def _scorer_size(meta_dim: int, basis_count: int) -> int:
    hidden = 2 * meta_dim
    return meta_dim * hidden + hidden + hidden * basis_count + basis_count


def count_params(config: ModelConfig,
                 schema: FieldSchema | None = None) -> dict:
    """Itemized scalar counts per group, matching the actual storage.

    ``interaction`` covers what varies with the attention mechanism: the
    projection banks (or their generator) and the modulation tensor.
    Embedding counts need a schema and are omitted without one.
    """
    F, d, H, L = (config.field_count, config.dim, config.heads, config.depth)
    mod = H * F * F if config.modulation else 0
    if config.variant == "decomposed":
        banks = 3 * (F if config.field_alignment else 1) * d * d
        per_layer_interaction = banks + mod
        meta = 0
    elif config.variant == "naive_pair":
        per_layer_interaction = 3 * F * F * d * d
        meta = 0
    elif config.variant == "standard":
        per_layer_interaction = 3 * d * d
        meta = 0
    else:
        per_layer_interaction = (3 * config.basis_count * d * d
                                 + 3 * _scorer_size(config.meta_dim,
                                                    config.basis_count)
                                 + mod)
        meta = F * config.meta_dim  # shared across layers, counted once
    ffn = config.ffn_width
    per_layer = {
        "interaction": per_layer_interaction,
        "output_proj": d * d,
        "ffn": d * ffn + ffn + ffn * d + d,
        "layer_norm": 2 * d,
    }
    counts = {
        "per_layer": per_layer,
        "depth": L,
        "meta": meta,
        "head": d,
        "interaction_total": L * per_layer_interaction + meta,
    }
    total = L * sum(per_layer.values()) + meta + d
    if schema is not None:
        emb = schema.total_vocab * d
        if config.field_bias:
            emb += F * d
        counts["embedding"] = emb
        total += emb
    counts["total"] = total
    return counts


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """One JSON header line (config, schema, group manifest), then each
    trainable group's float64 bytes in declared order.  Round-trips
    bit-exact."""
    named = named_parameters(params)
    header = {
        "magic": CHECKPOINT_MAGIC,
        "config": params.config.to_dict(),
        "schema": schema_to_dict(params.schema),
        "groups": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data).tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"checkpoint {path}: bad header") from e
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise DataError(f"checkpoint {path}: wrong magic")
        config = ModelConfig.from_dict(header["config"])
        schema = build_schema(header["schema"])
        params = init_params(config, schema, np.random.default_rng(0))
        named = dict(named_parameters(params))
        manifest = header["groups"]
        if [g["name"] for g in manifest] != list(named.keys()):
            raise DataError(f"checkpoint {path}: group manifest mismatch")
        for g in manifest:
            t = named[g["name"]]
            if list(t.shape) != g["shape"]:
                raise DataError(
                    f"checkpoint {path}: shape mismatch for {g['name']}")
            nbytes = t.data.size * 8
            blob = fh.read(nbytes)
            if len(blob) < nbytes:
                raise DataError(f"checkpoint {path}: truncated at {g['name']}")
            t.data = np.frombuffer(blob, dtype=np.float64).reshape(t.shape).copy()
        if fh.read(1):
            raise DataError(f"checkpoint {path}: trailing bytes")
    return params
