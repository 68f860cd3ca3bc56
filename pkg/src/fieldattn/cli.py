"""Command-line interface.

Subcommands: generate-data, train, sweep, export-w, bound, check-grad,
count-params.  Reports are JSON on stdout; matrices are CSV.  Failures
print a machine-readable error JSON object on stderr and exit nonzero
(2 for bad inputs or failed checks, 3 for a diverged training run).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import analysis as an
from . import datagen as dg
from . import model as md
from .errors import ConfigError, DataError, FieldAttnError, ResourceLimitError
from .fields import build_schema


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _emit(obj) -> None:
    print(_dump(obj))


def _fail(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the error contract."""

    def error(self, message):
        raise ConfigError(message)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            blob = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(blob, dict):
        raise DataError(f"{path}: expected a JSON object")
    return blob


def _spec_from_dict(blob: dict) -> dg.SyntheticSpec:
    if "schema" not in blob:
        raise ConfigError("data spec needs a 'schema' section")
    schema = build_schema(blob["schema"])
    planted = tuple((int(i), int(j), float(theta))
                    for i, j, theta in blob.get("planted", ()))
    try:
        sample_count = int(blob["sample_count"])
        seed = int(blob["seed"])
    except KeyError as e:
        raise ConfigError(f"data spec needs {e.args[0]!r}") from e
    spec = dg.SyntheticSpec(
        schema=schema, planted=planted,
        bias=float(blob.get("bias", 0.0)),
        sample_count=sample_count, seed=seed,
        value_dist=blob.get("value_dist", "zipf"),
        zipf_exponent=float(blob.get("zipf_exponent", 1.1)))
    if "base_rate" in blob:
        if "bias" in blob:
            raise ConfigError("give either 'bias' or 'base_rate', not both")
        spec = dataclasses.replace(
            spec, bias=dg.solve_bias(spec, float(blob["base_rate"])))
    return spec


def _model_config(blob: dict) -> md.ModelConfig:
    if "model" not in blob:
        raise ConfigError("config needs a 'model' section")
    return md.ModelConfig.from_dict(blob["model"])


def _train_settings(blob: dict, seed_override=None) -> an.TrainSettings:
    raw = dict(blob.get("train", {}))
    known = {f.name for f in dataclasses.fields(an.TrainSettings)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown train settings: {sorted(unknown)}")
    if seed_override is not None:
        raw["seed"] = seed_override
    return an.TrainSettings(**raw)


def _resolve_data(blob: dict, config: md.ModelConfig | None):
    """Returns (spec, train, test, schema); spec xor the explicit triple."""
    data = blob.get("data")
    if not isinstance(data, dict):
        raise ConfigError("config needs a 'data' section")
    if "synthetic" in data:
        return _spec_from_dict(data["synthetic"]), None, None, None
    if "train_csv" in data:
        if config is None:
            raise ConfigError("this command supports synthetic data only")
        if "schema" not in data or "test_csv" not in data:
            raise ConfigError(
                "csv data needs 'schema', 'train_csv', and 'test_csv'")
        schema = build_schema(data["schema"])
        schema = dataclasses.replace(schema, embed_dim=config.dim,
                                     meta_dim=config.meta_dim)
        train = dg.read_dataset(data["train_csv"], schema)
        test = dg.read_dataset(data["test_csv"], schema)
        return None, train, test, schema
    raise ConfigError("data section needs 'synthetic' or 'train_csv'")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_generate_data(args) -> int:
    spec = _spec_from_dict(_load_json(args.spec))
    dataset = dg.generate_synthetic(spec)
    dg.write_dataset(args.out, dataset, spec.schema)
    _emit({
        "path": str(args.out),
        "oracle_path": dg.oracle_path(args.out),
        "rows": int(dataset.sample_count),
        "base_rate": float(np.asarray(dataset.labels).mean()),
        "bias": spec.bias,
        "seed": spec.seed,
    })
    return 0


def _cmd_train(args) -> int:
    blob = _load_json(args.config)
    config = _model_config(blob)
    settings = _train_settings(blob)
    spec, train, test, schema = _resolve_data(blob, config)
    report, _ = an.run_training(
        config, settings, spec=spec, train_data=train, test_data=test,
        schema=schema, out_dir=blob.get("out_dir"))
    _emit(report.to_dict())
    if report.diverged:
        _fail("training_diverged", report.divergence_note)
        return 3
    return 0


def _cmd_sweep(args) -> int:
    blob = _load_json(args.config)
    model = blob.get("model", {})
    spec, _, _, _ = _resolve_data(blob, None)
    report = an.run_scaling_sweep(
        spec, [int(w) for w in args.widths], [int(s) for s in args.seeds],
        heads=int(model.get("heads", 4)),
        depth=int(model.get("depth", 2)),
        variant=model.get("variant", "decomposed"),
        settings=_train_settings(blob), baseline=args.baseline)
    _emit(report.to_dict())
    return 0


def _cmd_export_w(args) -> int:
    params = md.load_checkpoint(args.checkpoint)
    text = an.format_interaction_csv(params, args.layer)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_bound(args) -> int:
    inputs = an.BoundInputs(
        field_count=args.F, dim=args.d, samples=args.m,
        embed_norm=args.R,
        q_norm=args.BQ if args.BQ is not None else args.B,
        k_norm=args.BK if args.BK is not None else args.B,
        v_norm=args.BV if args.BV is not None else args.B,
        w_norm=args.Bw, delta=args.delta, c_lead=args.c_lead)
    gap, complexity, confidence = an.eval_bound(inputs)
    _emit({"gap": gap, "complexity": complexity, "confidence": confidence,
           "inputs": dataclasses.asdict(inputs)})
    return 0


def _cmd_check_grad(args) -> int:
    blob = _load_json(args.config)
    config = _model_config(blob)
    if "schema" not in blob:
        raise ConfigError("check-grad config needs a 'schema' section")
    schema = build_schema(blob["schema"])
    schema = dataclasses.replace(schema, embed_dim=config.dim,
                                 meta_dim=config.meta_dim)
    seed = int(blob.get("seed", 0))
    batch = int(blob.get("batch_size", 4))
    h = float(blob.get("h", 1e-5))
    tolerance = float(blob.get("tolerance", 1e-4))
    max_coords = int(blob.get("max_coords_per_group", 24))
    if any(f.kind == "sequence" for f in schema.fields):
        raise ConfigError("check-grad supports single-id fields only")
    rng = np.random.default_rng(seed)
    params = md.init_params(config, schema, rng)
    ids = np.stack([rng.integers(0, f.vocab_size, size=batch)
                    for f in schema.fields], axis=1)
    labels = rng.integers(0, 2, size=batch).astype(np.float64)
    result = md.gradient_check(params, ids, labels, h=h,
                               max_coords_per_group=max_coords, rng=rng)
    errs = [r["rel_err"] for r in result.values()
            if not np.isnan(r["rel_err"])]
    worst = max(errs) if errs else float("nan")
    passed = bool(errs) and worst <= tolerance
    _emit({"groups": result, "max_rel_err": worst, "tolerance": tolerance,
           "h": h, "seed": seed, "batch_size": batch, "passed": passed})
    if not passed:
        _fail("gradient_check_failed",
              f"max relative error {worst:.3e} exceeds {tolerance:.3e}")
        return 2
    return 0


def _cmd_count_params(args) -> int:
    blob = _load_json(args.config)
    config = _model_config(blob)
    schema = None
    if "schema" in blob:
        schema = build_schema(blob["schema"])
        schema = dataclasses.replace(schema, embed_dim=config.dim,
                                     meta_dim=config.meta_dim)
    _emit(md.count_params(config, schema))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="fieldattn",
                     description="Field-decomposed attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset CSV")
    p.add_argument("spec", help="JSON data spec")
    p.add_argument("out", help="output CSV path")
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("config", help="JSON run config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="width scaling sweep")
    p.add_argument("config", help="JSON run config (synthetic data)")
    p.add_argument("--widths", nargs="+", required=True, type=int)
    p.add_argument("--seeds", nargs="+", required=True, type=int)
    p.add_argument("--baseline", choices=("smallest", "standard"),
                   default="smallest",
                   help="delta-AUC reference: smallest width's median, or a "
                        "standard-attention model of matching width")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export-w", help="dump field-pair modulation CSV")
    p.add_argument("checkpoint")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=_cmd_export_w)

    p = sub.add_parser("bound", help="closed-form generalization-gap value")
    p.add_argument("--F", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--R", type=float, default=1.0)
    p.add_argument("--B", type=float, default=1.0,
                   help="shared bound for the Q/K/V projections")
    p.add_argument("--BQ", type=float, default=None)
    p.add_argument("--BK", type=float, default=None)
    p.add_argument("--BV", type=float, default=None)
    p.add_argument("--Bw", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--c-lead", dest="c_lead", type=float, default=1.0)
    p.set_defaults(func=_cmd_bound)

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("config", help="JSON config with model + schema")
    p.set_defaults(func=_cmd_check_grad)

    p = sub.add_parser("count-params", help="parameter accounting")
    p.add_argument("config", help="JSON config with model (+ schema)")
    p.set_defaults(func=_cmd_count_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ResourceLimitError as e:
        _fail("ResourceLimitError", str(e), requested=e.requested,
              limit=e.limit)
        return 2
    except FieldAttnError as e:
        _fail(type(e).__name__, str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
