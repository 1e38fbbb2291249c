"""Command-line front end: ``plmcmc train|impute|sample|diagnose``.

Config precedence for ``train``: built-in defaults < JSON config file <
command-line flags. The resolved config (including the seed) is written to
every run directory. ``PLMCMC_NUM_THREADS`` sets the default worker count.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from . import flow as F
from . import metrics
from .data import (Dataset, MaskSpec, WhiteningStats, apply_mask, double_attributes, load_csv,
                   observed_stats, whiten, write_csv, write_mask_csv)
from .diagnostics import (DECISION_COLUMNS, ENVELOPE_COLUMNS, Setting, decision_change_rows,
                          envelope_study, write_rows)
from .mcem import McemAborted, McemConfig, duplicate_dataset, mcem_train
from .sampler import UNIFORM, MaskedSample, SamplerConfig, impute_rows

logger = logging.getLogger("plmcmc")

SCHEMA_VERSION = 1
THREADS_ENV = "PLMCMC_NUM_THREADS"

_SIGMA_A = {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": UNIFORM}]}
_POS = {"type": "number", "exclusiveMinimum": 0}
_COUNT = {"type": "integer", "minimum": 0}

SAMPLER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "sigma_p": _POS, "sigma_r": _POS,
        "mix": {"type": "number", "minimum": 0, "maximum": 1},
        "sigma_a": _SIGMA_A, "proposals": _COUNT,
        "init": {"enum": ["prior", "observed", "latent"]},
        "init_scale": _POS, "exact_kernel": {"type": "boolean"},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "seed", "dataset", "flow", "mcem", "sampler", "optimizer"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": _COUNT,
        "output_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["path"],
            "properties": {
                "path": {"type": "string", "minLength": 1},
                "grid_shape": {"oneOf": [{"type": "null"}, {
                    "type": "array", "items": {"type": "integer", "minimum": 1},
                    "minItems": 2, "maxItems": 2}]},
                "double_odd": {"type": "boolean"},
                "duplicate": {"type": "integer", "minimum": 1},
            },
        },
        "mask_spec": {"oneOf": [{"type": "null"}, {
            "type": "object",
            "additionalProperties": False,
            "required": ["mechanism", "rate"],
            "properties": {
                "mechanism": {"enum": ["independent", "patch", "square"]},
                "rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "seed": _COUNT,
            },
        }]},
        "flow": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": _COUNT, "depth": _COUNT,
                "hidden": {"type": "integer", "minimum": 1},
                "prior": {"enum": list(F.PRIORS)},
            },
        },
        "mcem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "total_epochs": _COUNT, "warmup_epochs": _COUNT,
                "resample_interval": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "clamp": {"type": "boolean"},
                "clip_norm": {"oneOf": [{"type": "null"}, _POS]},
                "sigma_r_schedule": {"oneOf": [{"type": "null"}, {
                    "type": "object", "patternProperties": {"^[0-9]+$": _POS},
                    "additionalProperties": False}]},
            },
        },
        "sampler": SAMPLER_SCHEMA,
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["adamax", "rmsprop"]},
                "lr": _POS, "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": _POS,
            },
        },
        "impute": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"chains": {"type": "integer", "minimum": 1}},
        },
    },
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "run",
    "dataset": {"grid_shape": None, "double_odd": True, "duplicate": 1},
    "mask_spec": None,
    "flow": {"levels": 4, "depth": 5, "hidden": 120, "prior": "normal"},
    "mcem": {"total_epochs": 1000, "warmup_epochs": 50, "resample_interval": 50,
             "batch_size": 3000, "clamp": True, "clip_norm": None, "sigma_r_schedule": None},
    "sampler": {"sigma_p": 0.01, "sigma_r": 1.0, "mix": 0.5, "sigma_a": 1e-3,
                "proposals": 1000, "init": "prior", "init_scale": 0.5, "exact_kernel": False},
    "optimizer": {"kind": "adamax", "lr": 0.002},
    "impute": {"chains": 25},
}


class ConfigError(ValueError):
    """Schema violations; ``problems`` holds ``(json_pointer, message)`` pairs."""

    def __init__(self, problems):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))


def default_threads():
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


def _pointer(parts):
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def validate_config(doc):
    """Raise :class:`ConfigError` listing every violation with its JSON pointer."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    problems = []
    for err in validator.iter_errors(doc):
        path = list(err.absolute_path)
        if err.validator == "required" and isinstance(err.instance, dict):
            for name in err.validator_value:
                if name not in err.instance:
                    problems.append((_pointer(path + [name]), "required field is missing"))
            continue
        problems.append((_pointer(path), err.message))
    if problems:
        raise ConfigError(sorted(set(problems)))
    return doc


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(doc, overrides=None):
    """Defaults, then the file document, then flag overrides; validated.

    The file must state its ``schema_version``; every other field has a
    default except ``dataset.path`` (file or ``--data``).
    """
    if not isinstance(doc, dict):
        raise ConfigError([("/", "config must be a JSON object")])
    if doc and "schema_version" not in doc:
        raise ConfigError([("/schema_version", "required field is missing")])
    merged = _merge(DEFAULTS, doc)
    for path, value in (overrides or {}).items():
        if value is None:
            continue
        node = merged
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return validate_config(merged)


def _sampler_from(cfg):
    return SamplerConfig(**cfg)


def _parse_sigma_a(text):
    return UNIFORM if str(text).lower() == UNIFORM else float(text)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _model_bundle(path):
    """Model plus the whitening stats / width bookkeeping stored in its metadata."""
    model = F.FlowModel.load(path)
    meta = model.metadata or {}
    stats = WhiteningStats.from_dict(meta["whitening"]) if "whitening" in meta else None
    n_features = int(meta.get("n_features", model.dim))
    doubled = bool(meta.get("doubled", False))
    return model, stats, n_features, doubled


def _to_model_space(values, missing, stats, doubled):
    ds = Dataset(values, missing)
    if stats is not None:
        ds, _ = whiten(ds, stats)
    if doubled:
        ds = double_attributes(ds)
    return ds


def _completions(model, ds, sampler, seed, n_chains, threads, n_features, stats, clamp):
    comp = impute_rows(model, ds.values, ds.missing, sampler, seed, 0, n_chains, threads)
    comp = comp[:, :, :n_features]
    if stats is not None:
        comp = stats.invert(comp)
        if clamp:
            comp = np.clip(comp, stats.min, stats.max)
    return comp


def _score(values, truth, missing, comp, columns, config):
    """Metric reports for ``avg``/``ind`` imputations and the mean baseline."""
    sig = truth.std(axis=0)
    n = int(missing.any(axis=1).sum())
    avg = np.where(missing, comp.mean(axis=0), values)
    ind = np.where(missing, comp[0], values)
    mean_fill = metrics.mean_imputation(values, missing)
    return [
        metrics.metric_report("nmse_avg", metrics.nmse(avg, truth, missing, sig), n, config),
        metrics.metric_report("nmse_ind", metrics.nmse(ind, truth, missing, sig), n, config),
        metrics.metric_report("nmse_mean_imputation",
                              metrics.nmse(mean_fill, truth, missing, sig), n, config),
        metrics.metric_report("rmse_avg", metrics.reconstruction_rmse(avg, truth, missing), n,
                              config),
    ]


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    doc = _load_json(args.config) if args.config else {}
    overrides = {
        "seed": args.seed, "output_dir": args.out, "mcem.total_epochs": args.epochs,
        "dataset.path": args.data, "threads": args.threads,
    }
    cfg = resolve_config(doc, overrides)
    cfg.setdefault("threads", default_threads())
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0

    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"), cfg)
    seed = cfg["seed"]
    dcfg = cfg["dataset"]
    table = load_csv(dcfg["path"], tuple(dcfg["grid_shape"]) if dcfg["grid_shape"] else None)
    if cfg["mask_spec"]:
        ms = cfg["mask_spec"]
        table = apply_mask(table, MaskSpec(ms["mechanism"], ms["rate"], ms.get("seed", seed)))
        write_mask_csv(os.path.join(out, "mask.csv"), table.missing, table.columns)
    n_features = table.shape[1]
    stats = observed_stats(table)
    ds, _ = whiten(table, stats)
    doubled = bool(dcfg["double_odd"] and n_features % 2)
    if doubled:
        ds = double_attributes(ds)
    train_ds = duplicate_dataset(ds, dcfg["duplicate"])

    fcfg, mcfg = cfg["flow"], cfg["mcem"]
    sampler = _sampler_from(cfg["sampler"])
    opt = dict(cfg["optimizer"])
    kind = opt.pop("kind")
    mc = McemConfig(
        total_epochs=mcfg["total_epochs"], resample_interval=mcfg["resample_interval"],
        warmup_epochs=mcfg["warmup_epochs"], sampler=sampler, optimizer=kind,
        optimizer_kwargs=opt, batch_size=mcfg["batch_size"], clamp=mcfg["clamp"],
        sigma_r_schedule=mcfg["sigma_r_schedule"], n_jobs=cfg["threads"],
        clip_norm=mcfg["clip_norm"], checkpoint_dir=out)
    init = F.build_flow(ds.shape[1], fcfg["levels"], fcfg["hidden"], fcfg["depth"],
                        fcfg["prior"], seed=seed)
    try:
        model, history, _ = mcem_train(init, train_ds, mc, seed,
                                       history_path=os.path.join(out, "history.csv"))
    except McemAborted as exc:
        logger.error("%s; last good model written to model.json", exc)
        exc.model.metadata = {"whitening": stats.to_dict(), "n_features": n_features,
                              "doubled": doubled, "columns": table.columns, "aborted": True}
        exc.model.save(os.path.join(out, "model.json"))
        exc.history.to_csv(os.path.join(out, "history.csv"))
        return 3
    history.to_csv(os.path.join(out, "history.csv"))
    model.metadata = {"whitening": stats.to_dict(), "n_features": n_features,
                      "doubled": doubled, "columns": table.columns}
    model.save(os.path.join(out, "model.json"))

    comp = _completions(model, ds, sampler, seed, cfg["impute"]["chains"], cfg["threads"],
                        n_features, stats, mcfg["clamp"])
    imputed = np.where(table.missing, comp.mean(axis=0), table.values)
    write_csv(os.path.join(out, "imputed.csv"), imputed, table.columns)
    if table.truth is not None and table.missing.any():
        _write_json(os.path.join(out, "metrics.json"),
                    _score(table.values, table.truth, table.missing, comp, table.columns, cfg))
    return 0


def cmd_impute(args):
    model, stats, n_features, doubled = _model_bundle(args.model)
    table = load_csv(args.data)
    if table.shape[1] != n_features:
        raise ValueError(f"data has {table.shape[1]} columns, model expects {n_features}")
    sampler = SamplerConfig(args.sigma_p, args.sigma_r, args.mix, _parse_sigma_a(args.sigma_a),
                            args.proposals, args.init, args.init_scale, args.exact_kernel)
    threads = args.threads or default_threads()
    ds = _to_model_space(table.values, table.missing, stats, doubled)
    comp = _completions(model, ds, sampler, args.seed, args.chains, threads, n_features, stats,
                        not args.no_clamp)
    fill = comp[0] if args.mode == "ind" else comp.mean(axis=0)
    imputed = np.where(table.missing, fill, table.values)
    os.makedirs(args.out, exist_ok=True)
    resolved = {"model": args.model, "data": args.data, "seed": args.seed, "chains": args.chains,
                "mode": args.mode, "clamp": not args.no_clamp,
                "sampler": {k: getattr(sampler, k) for k in sampler.__dataclass_fields__}}
    _write_json(os.path.join(args.out, "config.json"), resolved)
    write_csv(os.path.join(args.out, "imputed.csv"), imputed, table.columns)
    if args.truth:
        truth = load_csv(args.truth)
        if truth.missing.any() or truth.shape != table.shape:
            raise ValueError("truth file must be complete and match the data shape")
        reports = _score(table.values, truth.values, table.missing, comp, table.columns, resolved)
        _write_json(os.path.join(args.out, "metrics.json"), reports)
    return 0


def cmd_sample(args):
    model, stats, n_features, _ = _model_bundle(args.model)
    x = F.sample(model, args.n, args.scale,
                 np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed]))))
    x = x[:, :n_features]
    columns = (model.metadata or {}).get("columns") or [f"x{j}" for j in range(n_features)]
    if stats is not None:
        x = stats.invert(x)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_csv(args.out, x, columns)
    return 0


def _diagnose_target(args):
    """Model, masked sample, reference vector, Gibbs stats and unit scale."""
    from .oracles import grid_conditional

    if args.demo:
        from .demo import train_demo_model
        model, data = train_demo_model(args.seed)
        row = np.array([np.nan, 1.2]) if args.demo_row is None else args.demo_row
        sample = MaskedSample.from_row(row)
        stats = (data.mean(axis=0), data.std(axis=0))
        scale = wstats = doubled = None
    else:
        model, wstats, n_features, doubled = _model_bundle(args.model)
        table = load_csv(args.sample)
        i = args.row
        ds = _to_model_space(table.values[i:i + 1], table.missing[i:i + 1], wstats, doubled)
        sample = MaskedSample.from_row(np.where(ds.missing[0], np.nan, ds.values[0]))
        if args.train_data:
            tr = _to_model_space(*_table_arrays(args.train_data), wstats, doubled)
            obs = ~tr.missing
            mu = (tr.values * obs).sum(0) / obs.sum(0)
            sd = np.sqrt((((tr.values - mu) * obs) ** 2).sum(0) / obs.sum(0))
            stats = (mu, sd)
        elif wstats is not None:
            stats = (np.zeros(model.dim), np.ones(model.dim))
        else:
            stats = None
        scale = None if wstats is None else np.resize(wstats.std, model.dim)[sample.missing]
    if args.truth_row is not None:
        truth = np.asarray(args.truth_row, dtype=np.float64)
        if not args.demo:
            if wstats is not None:
                truth = wstats.apply(truth)
            if doubled:
                truth = np.concatenate([truth, truth])
        reference = truth[sample.missing]
    elif sample.missing.size <= 2:
        reference = grid_conditional(model, sample, resolution=args.grid_resolution).mean()
    else:
        raise ValueError("more than 2 missing coordinates: pass --truth-row for the reference")
    return model, sample, reference, stats, scale


def _table_arrays(path):
    t = load_csv(path)
    return t.values, t.missing


def _float_row(text):
    return np.array([np.nan if v.strip().lower() in ("", "nan") else float(v)
                     for v in text.split(",")])


def cmd_diagnose(args):
    model, sample, reference, stats, scale = _diagnose_target(args)
    settings = []
    for sp in args.sigma_p:
        for sa in args.sigma_a:
            cfg = SamplerConfig(sp, args.sigma_r, args.mix, _parse_sigma_a(sa), 1, "prior",
                                args.init_scale)
            settings.append(Setting(f"plmcmc_sa={sa}_sp={sp}", "plmcmc", cfg))
    if args.baseline == "gibbs":
        if stats is None:
            raise ValueError("Gibbs baseline needs --train-data or a whitened model")
        settings.insert(0, Setting("gibbs", "gibbs",
                                   SamplerConfig(init_scale=args.init_scale, mix=0.0)))
    rows, _ = envelope_study(model, sample, settings, reference, args.chains, args.replications,
                             args.budget, args.checkpoint_every, stats, args.seed, scale)
    os.makedirs(args.out, exist_ok=True)
    write_rows(os.path.join(args.out, "envelope.csv"), rows, ENVELOPE_COLUMNS)
    dec = decision_change_rows(model, sample, settings, args.decision_steps, args.chains,
                               args.seed, _parse_sigma_a(args.decision_alt))
    write_rows(os.path.join(args.out, "decision_change.csv"), dec, DECISION_COLUMNS)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    resolved["reference"] = np.asarray(reference).tolist()
    resolved["demo_row"] = None if args.demo_row is None else [
        None if np.isnan(v) else float(v) for v in args.demo_row]
    resolved.pop("truth_row", None)
    _write_json(os.path.join(args.out, "config.json"), resolved)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _add_sampler_flags(p):
    p.add_argument("--sigma-p", type=float, default=0.01)
    p.add_argument("--sigma-r", type=float, default=1.0)
    p.add_argument("--mix", type=float, default=0.5, help="probability of a perturbation proposal")
    p.add_argument("--sigma-a", default="1e-3", help="auxiliary scale or 'uniform'")
    p.add_argument("--proposals", type=int, default=1000)
    p.add_argument("--init", choices=["prior", "observed", "latent"], default="prior")
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--exact-kernel", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="plmcmc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="MC-EM training on an incomplete CSV")
    p.add_argument("config", nargs="?", help="JSON config file")
    p.add_argument("--data", help="override dataset.path")
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="override mcem.total_epochs")
    p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="fill missing cells with PL-MCMC draws")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--truth", help="complete CSV for scoring")
    p.add_argument("--chains", type=int, default=25)
    p.add_argument("--mode", choices=["ind", "avg"], default="avg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--no-clamp", action="store_true")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("sample", help="unconditional samples from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("diagnose", help="RMSE/acceptance envelopes and decision-change study")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--demo", action="store_true", help="use the built-in 2-dim demo")
    p.add_argument("--sample", help="CSV holding the conditioning row(s)")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--demo-row", type=_float_row, help="demo conditioning row, e.g. ',1.2'")
    p.add_argument("--truth-row", type=_float_row, help="reference values for the missing cells")
    p.add_argument("--train-data", help="CSV for Gibbs proposal statistics")
    p.add_argument("--sigma-a", nargs="+", default=["1e-3", "uniform"])
    p.add_argument("--sigma-p", nargs="+", type=float, default=[0.01])
    p.add_argument("--sigma-r", type=float, default=1.0)
    p.add_argument("--mix", type=float, default=0.5)
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--baseline", choices=["gibbs", "none"], default="gibbs")
    p.add_argument("--chains", type=int, default=100)
    p.add_argument("--replications", type=int, default=10)
    p.add_argument("--budget", type=int, default=4000, help="flow transformations per chain")
    p.add_argument("--checkpoint-every", type=int, default=400,
                   help="in flow transformations")
    p.add_argument("--decision-steps", type=int, default=1000)
    p.add_argument("--decision-alt", default=UNIFORM)
    p.add_argument("--grid-resolution", type=int, default=2001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "diagnose" and args.model and not args.sample:
        parser.error("--model needs --sample")
    try:
        return args.func(args)
    except ConfigError as exc:
        for ptr, msg in exc.problems:
            print(f"config error at {ptr or '/'}: {msg}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
