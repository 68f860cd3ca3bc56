"""Diagnostics and experiment harness.

Covers the capacity-vs-width story end to end: seeded Adam training with
deterministic reports, width sweeps with power-law fits of the AUC gain,
export of the learned field-pair modulation matrices, recovery statistics
against planted interactions, and the closed-form generalization-gap
calculator."""

from __future__ import annotations

import dataclasses
import json
import os
import warnings

import numpy as np

from . import datagen as dg
from . import model as md
from .errors import ConfigError, DataError, DomainError
from .fields import FieldSchema
from .numerics import AdamState, adam_step


# ---------------------------------------------------------------------------
# Power-law fit
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ScalingPoint:
    n_params: int                  # abscissa used for fitting
    delta_auc: float
    width: int = 0
    median_auc: float = 0.0
    n_params_total: int = 0
    seed_aucs: tuple = ()
    seeds: tuple = ()
    config: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.n_params <= 0:
            raise DomainError("n_params must be positive")
        if not np.isfinite(self.delta_auc):
            raise DomainError("delta_auc must be finite")


def fit_power_law(points) -> tuple[float, float, float]:
    """Least squares on (ln N, ln delta_auc): returns (a, beta, r2) for the
    model delta_auc = a * N^beta.

    Points with nonpositive delta_auc cannot enter the log fit; they are
    dropped with a warning.  Fewer than 3 usable points is an error.
    """
    usable = []
    for p in points:
        if p.delta_auc > 0.0:
            usable.append(p)
        else:
            warnings.warn(
                f"fit_power_law: dropping point with delta_auc="
                f"{p.delta_auc} at n_params={p.n_params}")
    if len(usable) < 3:
        raise DomainError(
            f"fit_power_law needs >= 3 points with positive delta_auc, "
            f"got {len(usable)}")
    x = np.log(np.array([p.n_params for p in usable], dtype=np.float64))
    y = np.log(np.array([p.delta_auc for p in usable], dtype=np.float64))
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    denom = float(dx @ dx)
    if denom == 0.0:
        raise DomainError("fit_power_law needs at least two distinct n_params")
    beta = float(dx @ dy) / denom
    intercept = ym - beta * xm
    resid = y - (intercept + beta * x)
    sstot = float(dy @ dy)
    r2 = 1.0 if sstot == 0.0 else 1.0 - float(resid @ resid) / sstot
    return float(np.exp(intercept)), beta, r2


# ---------------------------------------------------------------------------
# Generalization-gap calculator
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class BoundInputs:
    field_count: int
    dim: int
    samples: int
    embed_norm: float = 1.0        # R
    q_norm: float = 1.0            # B_Q
    k_norm: float = 1.0            # B_K
    v_norm: float = 1.0            # B_V
    w_norm: float = 1.0            # B_w
    delta: float = 0.1
    c_lead: float = 1.0

    def __post_init__(self):
        if self.field_count < 1 or self.dim < 1 or self.samples < 1:
            raise DomainError("field_count, dim, and samples must be >= 1")
        for name in ("embed_norm", "q_norm", "k_norm", "v_norm", "w_norm"):
            if getattr(self, name) <= 0.0:
                raise DomainError(f"{name} must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise DomainError("delta must be in (0, 1)")
        if self.c_lead <= 0.0:
            raise DomainError("c_lead must be > 0")


def eval_bound(inputs: BoundInputs) -> tuple[float, float, float]:
    """Closed-form capacity bound for one attention layer.

    complexity = c_lead * sqrt(F d^2 + F^2)/sqrt(m)
                 * (R^2 B_Q B_K B_w sqrt(d) + R B_V B_w)
    confidence = sqrt(ln(1/delta)/m); gap is their sum.  The vocabulary
    size does not appear anywhere.
    """
    F, d, m = inputs.field_count, inputs.dim, inputs.samples
    R, bw = inputs.embed_norm, inputs.w_norm
    shape_term = np.sqrt(F * d * d + F * F) / np.sqrt(m)
    norms = (R * R * inputs.q_norm * inputs.k_norm * bw * np.sqrt(d)
             + R * inputs.v_norm * bw)
    complexity = inputs.c_lead * shape_term * norms
    confidence = np.sqrt(np.log(1.0 / inputs.delta) / m)
    return float(complexity + confidence), float(complexity), float(confidence)


# ---------------------------------------------------------------------------
# Modulation-matrix export and recovery stats
# ---------------------------------------------------------------------------

def export_interaction_matrix(params: md.ModelParams,
                              layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-head modulation scalars for one layer: ((H, F, F), head mean)."""
    config = params.config
    if config.variant not in ("decomposed", "decomposed_hypernet"):
        raise DomainError(
            f"variant {config.variant!r} has no field-pair modulation")
    if not 0 <= layer < config.depth:
        raise DomainError(f"layer {layer} out of range")
    lp = params.layers[layer]
    w = lp.attn.w.data if config.variant == "decomposed" else lp.mod_w.data
    w = w.copy()
    return w, w.mean(axis=0)


def format_interaction_csv(params: md.ModelParams, layer: int) -> str:
    """Long-format CSV `head,source,target,value` with field names; the
    head column is an index or `mean`.  Values use repr, so reading the text
    back reproduces the floats exactly."""
    w, mean = export_interaction_matrix(params, layer)
    names = params.schema.field_names()
    lines = ["head,source,target,value"]
    for h in range(w.shape[0]):
        for i, src in enumerate(names):
            for j, dst in enumerate(names):
                lines.append(f"{h},{src},{dst},{float(w[h, i, j])!r}")
    for i, src in enumerate(names):
        for j, dst in enumerate(names):
            lines.append(f"mean,{src},{dst},{float(mean[i, j])!r}")
    return "\n".join(lines) + "\n"


def write_interaction_csv(params: md.ModelParams, layer: int, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_interaction_csv(params, layer))


def read_interaction_csv(path, schema: FieldSchema) -> tuple[np.ndarray, np.ndarray]:
    names = schema.field_names()
    index = {n: i for i, n in enumerate(names)}
    F = len(names)
    per_head: dict[int, np.ndarray] = {}
    mean = np.full((F, F), np.nan)
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != "head,source,target,value":
            raise DataError(f"{path}: unexpected header")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 4 or cells[1] not in index or cells[2] not in index:
                raise DataError(f"{path}:{lineno}: bad row")
            i, j = index[cells[1]], index[cells[2]]
            value = float(cells[3])
            if cells[0] == "mean":
                mean[i, j] = value
            else:
                h = int(cells[0])
                if h not in per_head:
                    per_head[h] = np.full((F, F), np.nan)
                per_head[h][i, j] = value
    if not per_head or np.any(np.isnan(mean)):
        raise DataError(f"{path}: incomplete matrix")
    w = np.stack([per_head[h] for h in sorted(per_head)], axis=0)
    if np.any(np.isnan(w)):
        raise DataError(f"{path}: incomplete matrix")
    return w, mean


def interaction_recovery_stats(params: md.ModelParams,
                               planted) -> dict:
    """Compare learned |w| on planted field pairs against the rest.

    |w| is averaged over heads and layers.  The planted mask is
    symmetrized (either direction counts) and the diagonal is excluded
    from the non-planted side, since self-pairs carry ordinary
    self-attention rather than cross-field signal.
    """
    F = params.config.field_count
    acc = np.zeros((F, F))
    for layer in range(params.config.depth):
        w, _ = export_interaction_matrix(params, layer)
        acc += np.abs(w).mean(axis=0)
    acc /= params.config.depth
    mask = np.zeros((F, F), dtype=bool)
    for (i, j, _theta) in planted:
        mask[i, j] = True
        mask[j, i] = True
    off_diag = ~np.eye(F, dtype=bool)
    planted_vals = acc[mask & off_diag]
    other_vals = acc[~mask & off_diag]
    if planted_vals.size == 0 or other_vals.size == 0:
        raise DomainError("need both planted and non-planted off-diagonal pairs")
    return {
        "mean_abs_planted": float(planted_vals.mean()),
        "mean_abs_other": float(other_vals.mean()),
        "margin": float(planted_vals.mean() - other_vals.mean()),
    }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TrainSettings:
    seed: int = 0
    batch_size: int = 512
    epochs: int = 2
    learning_rate: float = 5e-3
    test_rows: int = 50_000
    max_steps: int = -1            # -1 means no cap; 0 skips training
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.test_rows < 1:
            raise ConfigError("bad training settings")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class RunReport:
    config: dict
    settings: dict
    dataset: dict
    param_counts: dict
    steps_run: int
    diverged: bool
    divergence_note: str
    initial_loss: float
    final_loss: float
    loss_curve: list
    train_auc: float
    test_auc: float
    oracle_test_auc: float | None
    clamp_warnings: int
    recovery: dict | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2)


def predict_probs(params: md.ModelParams, ids, batch_size: int = 2048) -> np.ndarray:
    n = len(ids)
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, batch_size):
        probs, _ = md.forward(params, ids[lo:lo + batch_size])
        out[lo:lo + probs.shape[0]] = probs.data
    return out


def _split_synthetic(spec: dg.SyntheticSpec, test_rows: int):
    full = dg.generate_synthetic(
        dataclasses.replace(spec, sample_count=spec.sample_count + test_rows))
    n = spec.sample_count
    train = dg.LabeledDataset(ids=full.ids[:n], labels=full.labels[:n],
                              oracle_logits=full.oracle_logits[:n],
                              seed=spec.seed)
    test = dg.LabeledDataset(ids=full.ids[n:], labels=full.labels[n:],
                             oracle_logits=full.oracle_logits[n:],
                             seed=spec.seed)
    return train, test


def run_training(config: md.ModelConfig,
                 settings: TrainSettings,
                 spec: dg.SyntheticSpec | None = None,
                 train_data: dg.LabeledDataset | None = None,
                 test_data: dg.LabeledDataset | None = None,
                 schema: FieldSchema | None = None,
                 out_dir=None) -> tuple[RunReport, md.ModelParams]:
    """Seeded mini-batch Adam training with a deterministic report.

    Provide either a synthetic ``spec`` (train and held-out test rows are
    generated from it) or explicit train/test datasets plus a schema.  With
    ``out_dir``, the report, checkpoint, and (when the variant has one) the
    modulation-matrix CSV are written there.
    """
    if spec is not None:
        schema = dataclasses.replace(spec.schema, embed_dim=config.dim,
                                     meta_dim=config.meta_dim)
        spec = dataclasses.replace(spec, schema=schema)
        train, test = _split_synthetic(spec, settings.test_rows)
        source = {"source": "synthetic", "seed": spec.seed,
                  "bias": spec.bias,
                  "planted": [list(p) for p in spec.planted]}
    else:
        if train_data is None or test_data is None or schema is None:
            raise ConfigError(
                "need either a synthetic spec or train/test data with a schema")
        train, test = train_data, test_data
        source = {"source": "provided", "seed": None}
    if not isinstance(train.ids, np.ndarray) or not isinstance(test.ids,
                                                               np.ndarray):
        raise ConfigError(
            "the training harness requires single-id fields "
            "(got variable-length sequence rows)")
    source["rows_train"] = int(train.sample_count)
    source["rows_test"] = int(test.sample_count)
    source["base_rate_train"] = float(np.asarray(train.labels).mean())

    ss = np.random.SeedSequence(settings.seed)
    init_ss, order_ss = ss.spawn(2)
    params = md.init_params(config, schema, np.random.default_rng(init_ss))
    named = md.named_parameters(params)
    states = {name: AdamState.for_param(t.data,
                                        learning_rate=settings.learning_rate)
              for name, t in named}
    order_rng = np.random.default_rng(order_ss)

    md.reset_clamp_warnings()
    n = train.sample_count
    steps_done = 0
    diverged = False
    note = ""
    curve: list[list] = []

    def record(step, value):
        curve.append([int(step), float(value)])

    cap = settings.max_steps
    labels = np.asarray(train.labels, dtype=np.float64)
    stop = cap == 0
    for _ in range(settings.epochs):
        if stop:
            break
        order = order_rng.permutation(n)
        for lo in range(0, n, settings.batch_size):
            if cap >= 0 and steps_done >= cap:
                stop = True
                break
            pick = order[lo:lo + settings.batch_size]
            batch_ids = train.ids[pick]
            batch_labels = labels[pick]
            loss = md.loss_on(params, batch_ids, batch_labels)
            value = float(loss.data)
            if not np.isfinite(value):
                diverged = True
                note = (f"non-finite loss at step {steps_done + 1}; "
                        f"run aborted")
                stop = True
                break
            if steps_done == 0 or (steps_done + 1) % settings.log_every == 0:
                record(steps_done + 1, value)
            md.zero_gradients(params)
            loss.backward()
            bad = [name for name, t in named
                   if t.grad is None or not np.all(np.isfinite(t.grad))]
            if bad:
                diverged = True
                note = (f"non-finite gradient in {bad[0]} at step "
                        f"{steps_done + 1}; run aborted")
                stop = True
                break
            for name, t in named:
                t.data, states[name] = adam_step(t.data, t.grad, states[name])
            steps_done += 1

    train_auc = test_auc = 0.5
    if not diverged:
        eval_rows = min(n, 50_000)
        train_auc = dg.auc(predict_probs(params, train.ids[:eval_rows]),
                           np.asarray(train.labels)[:eval_rows])
        test_auc = dg.auc(predict_probs(params, test.ids),
                          np.asarray(test.labels))
    oracle_auc = None
    if test.oracle_logits is not None:
        oracle_auc = dg.auc(test.oracle_logits, np.asarray(test.labels))

    recovery = None
    if spec is not None and config.variant in ("decomposed",
                                               "decomposed_hypernet") \
            and config.modulation and not diverged:
        recovery = interaction_recovery_stats(params, spec.planted)

    report = RunReport(
        config=config.to_dict(),
        settings=settings.to_dict(),
        dataset=source,
        param_counts=md.count_params(config, schema),
        steps_run=steps_done,
        diverged=diverged,
        divergence_note=note,
        initial_loss=curve[0][1] if curve else float("nan"),
        final_loss=curve[-1][1] if curve else float("nan"),
        loss_curve=curve,
        train_auc=float(train_auc),
        test_auc=float(test_auc),
        oracle_test_auc=None if oracle_auc is None else float(oracle_auc),
        clamp_warnings=md.clamp_warning_count(),
        recovery=recovery)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(report_json(report) + "\n")
        md.save_checkpoint(params, os.path.join(out_dir, "model.ckpt"))
        if config.variant in ("decomposed", "decomposed_hypernet"):
            for layer in range(config.depth):
                write_interaction_csv(
                    params, layer,
                    os.path.join(out_dir, f"w_layer{layer}.csv"))
    return report, params


# ---------------------------------------------------------------------------
# Width sweep
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class SweepReport:
    widths: list
    seeds: list
    baseline: str
    points: list                   # ScalingPoint list (includes baseline)
    fit: dict | None
    fit_note: str
    runs: dict                     # width -> list of per-seed test AUCs
    baseline_runs: dict            # width -> per-seed baseline AUCs (if any)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["points"] = [dataclasses.asdict(p) for p in self.points]
        return out


def _sweep_config(spec, width, heads, depth, variant) -> md.ModelConfig:
    return md.ModelConfig(
        field_count=spec.schema.field_count, dim=width, heads=heads,
        depth=depth, variant=variant, meta_dim=spec.schema.meta_dim)


def _median_aucs(spec, config, seeds, settings) -> list[float]:
    aucs = []
    for seed in seeds:
        report, _ = run_training(
            config, dataclasses.replace(settings, seed=int(seed)), spec=spec)
        if report.diverged:
            raise DomainError(
                f"width {config.dim} seed {seed} ({config.variant}) "
                f"diverged: {report.divergence_note}")
        aucs.append(report.test_auc)
    return aucs


def run_scaling_sweep(spec: dg.SyntheticSpec, widths, seeds,
                      heads: int = 4, depth: int = 2,
                      variant: str = "decomposed",
                      settings: TrainSettings | None = None,
                      baseline: str = "smallest") -> SweepReport:
    """Train one model per (width, seed) on identical data and fit the
    power law on the AUC gains.

    ``baseline`` picks the ΔAUC reference: ``"smallest"`` uses the
    smallest width's median AUC; ``"standard"`` trains a standard-attention
    model of the same width for each point and measures the gain over it.
    Fitting uses non-embedding parameter counts.
    """
    widths = sorted(int(w) for w in widths)
    if len(widths) < 3:
        raise DomainError("a sweep needs at least 3 widths to fit")
    seeds = list(seeds)
    if not seeds:
        raise DomainError("need at least one seed")
    if baseline not in ("smallest", "standard"):
        raise ConfigError(f"unknown baseline {baseline!r}")
    settings = settings or TrainSettings()
    runs: dict[int, list[float]] = {}
    base_runs: dict[int, list[float]] = {}
    counts: dict[int, tuple[int, int]] = {}
    configs: dict[int, md.ModelConfig] = {}
    for width in widths:
        config = _sweep_config(spec, width, heads, depth, variant)
        configs[width] = config
        runs[width] = _median_aucs(spec, config, seeds, settings)
        if baseline == "standard":
            base_runs[width] = _median_aucs(
                spec, _sweep_config(spec, width, heads, depth, "standard"),
                seeds, settings)
        schema = dataclasses.replace(spec.schema, embed_dim=width)
        counts[width] = (md.count_params(config)["total"],
                         md.count_params(config, schema)["total"])
    smallest_auc = float(np.median(runs[widths[0]]))
    points = []
    for width in widths:
        nonemb, total = counts[width]
        median_auc = float(np.median(runs[width]))
        if baseline == "standard":
            reference = float(np.median(base_runs[width]))
        else:
            reference = smallest_auc
        points.append(ScalingPoint(
            n_params=nonemb, n_params_total=total,
            delta_auc=median_auc - reference,
            width=width, median_auc=median_auc,
            seed_aucs=tuple(runs[width]), seeds=tuple(seeds),
            config=configs[width].to_dict()))
    fit = None
    note = ""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a, beta, r2 = fit_power_law(points)
        fit = {"a": a, "beta": beta, "r2": r2}
    except DomainError as e:
        note = f"fit unavailable: {e}"
    return SweepReport(widths=widths, seeds=seeds, baseline=baseline,
                       points=points, fit=fit, fit_note=note,
                       runs={str(k): v for k, v in runs.items()},
                       baseline_runs={str(k): v
                                      for k, v in base_runs.items()})
