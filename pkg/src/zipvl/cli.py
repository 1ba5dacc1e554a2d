"""Command-line front end for sparse-attention experiments.

Subcommands:
  run           one experiment (model or score workload) -> full report
  sweep-tau     repeat the run across a list of tau values -> summary rows
  compare       adaptive vs ratio-matched fixed vs dense on one workload
  gen-workload  write a synthetic score workload CSV

Configuration comes from an optional key=value file (--config) overlaid by
a few direct flags; unknown keys are errors. All output is deterministic:
keys are sorted, floats use shortest round-trip repr, and nothing records
time or environment.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import engine, metrics, numkit, workload
from .errors import (
    BoundsError,
    ConfigError,
    DegenerateMaskError,
    DomainError,
    EmptySequenceError,
    FormatError,
    OrderingError,
    ShapeError,
    VocabError,
    ZipvlError,
)

EXIT_CODES = (
    (ConfigError, 2),
    (ShapeError, 3),
    (DomainError, 4),
    (DegenerateMaskError, 5),
    (EmptySequenceError, 6),
    (VocabError, 7),
    (OrderingError, 8),
    (BoundsError, 9),
    (FormatError, 10),
    (ZipvlError, 11),
)

# seed stream tags for deriving independent sub-seeds from the global seed
_MODEL_TAG = 1
_WORKLOAD_TAG = 2
_PROMPT_TAG = 3

WORKLOAD_SOURCES = ("model", "peaked", "diffuse", "file")


@dataclass
class ExperimentConfig:
    # model shape
    layers: int = 4
    heads: int = 4
    d_model: int = 64
    vocab_size: int = 256
    max_seq: int = 512
    # workload
    workload: str = "model"
    n: int = 128
    steps: int = 16
    concentration: float = 8.0
    workload_file: str = ""
    # sparsity policy
    mode: str = "zipvl-exact"
    tau: float = 0.975
    fixed_ratio: float = 0.5
    probe_recent: int = 64
    probe_random: int = 64
    budget_metric: str = "accumulated"
    identify_metric: str = "normalized"
    keep_last: int = 0
    quantize: bool = False
    group_size: int = 64
    head_agg: str = "mean"
    dense_first_layers: int = 0
    # shared
    seed: int = 1234
    repeats: int = 1
    taus: str = "0.5,0.8,0.9,0.95,0.975,0.99,1.0"
    modes: str = ""  # compare's mode list; empty means adaptive,fixed,dense


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


def parse_config_text(text: str) -> dict:
    """Parse key=value lines ('#' comments allowed) into raw string values."""
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def build_config(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    fields = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, types[fields[key]], value))
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    if cfg.workload not in WORKLOAD_SOURCES:
        raise ConfigError(f"workload must be one of {WORKLOAD_SOURCES}")
    if cfg.workload == "file" and not cfg.workload_file:
        raise ConfigError("workload=file needs workload_file=<path>")
    if cfg.repeats < 1:
        raise ConfigError("repeats must be >= 1")
    return cfg


def _policy(cfg: ExperimentConfig, **changes) -> engine.SparsityPolicy:
    base = engine.SparsityPolicy(
        mode=cfg.mode,
        tau=cfg.tau,
        fixed_ratio=cfg.fixed_ratio,
        probe_recent=cfg.probe_recent,
        probe_random=cfg.probe_random,
        budget_metric=cfg.budget_metric,
        identify_metric=cfg.identify_metric,
        keep_last=cfg.keep_last,
        quantize=cfg.quantize,
        group_size=cfg.group_size,
        head_agg=cfg.head_agg,
        dense_first_layers=cfg.dense_first_layers,
    )
    return dataclasses.replace(base, **changes).validate()


def _model_config(cfg: ExperimentConfig) -> engine.ModelConfig:
    return engine.ModelConfig(
        layers=cfg.layers,
        heads=cfg.heads,
        d_model=cfg.d_model,
        vocab_size=cfg.vocab_size,
        max_seq=cfg.max_seq,
        seed=numkit.derive_seed(cfg.seed, _MODEL_TAG),
    ).validate()


def _prompt_tokens(cfg: ExperimentConfig, repeat: int = 0) -> np.ndarray:
    rng = numkit.make_rng(numkit.derive_seed(cfg.seed, _PROMPT_TAG, repeat))
    return rng.integers(0, cfg.vocab_size, size=cfg.n, dtype=np.int64)


def _load_scores(cfg: ExperimentConfig, repeat: int = 0) -> np.ndarray:
    if cfg.workload == "file":
        try:
            with open(cfg.workload_file, "r", newline="") as fh:
                return workload.read_workload_csv(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read workload file: {exc}") from exc
    return workload.generate_workload(
        cfg.workload, cfg.n, cfg.layers, cfg.concentration,
        numkit.derive_seed(cfg.seed, _WORKLOAD_TAG, repeat),
    )


def run_experiment(
    cfg: ExperimentConfig, policy: engine.SparsityPolicy, want_logits=False, repeat=0
):
    """Run one experiment; returns (report, prefill_logits_or_None, prompt).

    The model is fixed by the global seed; the prompt or generated workload
    varies with the repeat index.
    """
    if cfg.workload == "model":
        model = engine.init_model(_model_config(cfg))
        prompt = _prompt_tokens(cfg, repeat)
        logits = engine.prefill(model, prompt, policy)[0] if want_logits else None
        tokens, report = engine.generate(model, prompt, cfg.steps, policy)
        return report, logits, [int(t) for t in prompt]
    reports = workload.evaluate_score_workload(_load_scores(cfg, repeat), policy)
    report = metrics.build_run_report(
        policy=policy, layer_reports=reports, d_head=1, heads=1, generated=[]
    )
    return report, None, []


def _summary(report: metrics.RunReport) -> dict:
    rm = [r.retained_mass for r in report.layer_reports]
    return {
        "mean_ratio": report.mean_ratio,
        "flops_reduction": report.flops_reduction,
        "kv_reduction": report.kv_reduction,
        "min_retained_mass": min(rm),
        "retained_mass": rm,
        "ratio_profile": metrics.ratio_profile(report.layer_reports),
    }


def cmd_run(cfg: ExperimentConfig) -> dict:
    policy = _policy(cfg)
    if cfg.repeats == 1:
        report, _, prompt = run_experiment(cfg, policy)
        out = metrics.report_to_dict(report)
        out["prompt"] = prompt
        _print_summary(report.mean_ratio, report.flops_reduction, report.kv_reduction)
        return out
    runs = []
    for repeat in range(cfg.repeats):
        report, _, prompt = run_experiment(cfg, policy, repeat=repeat)
        entry = metrics.report_to_dict(report)
        entry["prompt"] = prompt
        entry["repeat"] = repeat
        runs.append((repeat, report, entry))
    runs.sort(key=lambda r: r[0])
    _print_summary(
        float(np.mean([r.mean_ratio for _, r, _ in runs])),
        float(np.mean([r.flops_reduction for _, r, _ in runs])),
        float(np.mean([r.kv_reduction for _, r, _ in runs])),
    )
    return {"repeats": [entry for _, _, entry in runs]}


def _print_summary(mean_ratio: float, flops_reduction: float, kv_reduction: float) -> None:
    # goes to stderr so stdout stays a pure, byte-stable artifact
    print(
        f"summary: mean_ratio={mean_ratio!r} flops_reduction={flops_reduction!r} "
        f"kv_reduction={kv_reduction!r}",
        file=sys.stderr,
    )


def cmd_sweep_tau(cfg: ExperimentConfig) -> list[dict]:
    taus = [float(t) for t in cfg.taus.split(",") if t.strip()]
    if not taus:
        raise ConfigError("taus is empty")
    mode = cfg.mode if cfg.mode in ("zipvl-exact", "zipvl-probe") else "zipvl-exact"
    rows = []
    for tau in taus:
        report, _, _ = run_experiment(cfg, _policy(cfg, mode=mode, tau=tau))
        s = _summary(report)
        rows.append(
            {
                "tau": tau,
                "mean_ratio": s["mean_ratio"],
                "flops_reduction": s["flops_reduction"],
                "kv_reduction": s["kv_reduction"],
                "min_retained_mass": s["min_retained_mass"],
            }
        )
    return rows


def cmd_compare(cfg: ExperimentConfig) -> dict:
    """Run several policies on one workload and tabulate them side by side.

    A dense baseline is always computed for logit deltas. A fixed entry is
    ratio-matched to the first adaptive entry's mean ratio (falling back to
    the configured fixed_ratio if no adaptive mode is listed), so the
    comparison isolates how the budget is allocated across layers.
    """
    default_adaptive = cfg.mode if cfg.mode in ("zipvl-exact", "zipvl-probe") else "zipvl-exact"
    names = [m.strip() for m in cfg.modes.split(",") if m.strip()]
    if not names:
        names = [default_adaptive, "fixed", "dense"]
    if len(names) < 2:
        raise ConfigError("compare needs at least 2 modes")
    for name in names:
        if name not in engine.MODES:
            raise ConfigError(f"unknown mode {name!r} in modes; expected one of {engine.MODES}")

    dense_report, logits_dense, _ = run_experiment(
        cfg, _policy(cfg, mode="dense"), want_logits=True
    )
    runs: dict = {"dense": (dense_report, logits_dense)}
    for name in names:
        if name not in runs and name != "fixed":
            runs[name] = run_experiment(cfg, _policy(cfg, mode=name), want_logits=True)[:2]
    matched_ratio = next(
        (runs[m][0].mean_ratio for m in names if m.startswith("zipvl")), None
    )
    if "fixed" in names:
        ratio = matched_ratio if matched_ratio is not None else cfg.fixed_ratio
        runs["fixed"] = run_experiment(
            cfg, _policy(cfg, mode="fixed", fixed_ratio=ratio), want_logits=True
        )[:2]

    def delta(logits):
        if logits is None or logits_dense is None:
            return None
        return float(np.max(np.abs(logits.astype(np.float64) - logits_dense.astype(np.float64))))

    tau = cfg.tau
    entries = []
    for name in names:
        report, logits = runs[name]
        entry = {"mode": name, **_summary(report)}
        entry["logit_delta_vs_dense"] = delta(logits)
        entry["layers_below_tau"] = sum(
            1 for r in report.layer_reports if r.retained_mass < tau
        )
        entries.append(entry)

    def first(prefix):
        return next((e for e in entries if e["mode"].startswith(prefix)), None)

    adaptive_entry, fixed_entry = first("zipvl"), first("fixed")
    out = {"tau": tau, "modes": entries}
    if fixed_entry is not None:
        out["fixed_ratio_used"] = (
            matched_ratio if matched_ratio is not None else cfg.fixed_ratio
        )
        out["fixed_layers_below_tau"] = fixed_entry["layers_below_tau"]
    if adaptive_entry is not None:
        out["adaptive_layers_below_tau"] = adaptive_entry["layers_below_tau"]
    return out


def cmd_gen_workload(cfg: ExperimentConfig) -> str:
    if cfg.workload not in ("peaked", "diffuse"):
        raise ConfigError("gen-workload needs workload=peaked or workload=diffuse")
    return workload.workload_to_csv_text(_load_scores(cfg))


def _emit_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit_csv(obj) -> str:
    """Flatten the command result into deterministic CSV rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")

    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, list):
            return ";".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        return v

    if isinstance(obj, list):  # sweep rows
        cols = sorted(obj[0].keys())
        writer.writerow(cols)
        for row in obj:
            writer.writerow([fmt(row[c]) for c in cols])
    elif "repeats" in obj:  # repeated run: per-layer table with a repeat column
        rows = [
            {"repeat": entry["repeat"], **lr}
            for entry in obj["repeats"]
            for lr in entry["layer_reports"]
        ]
        cols = sorted(rows[0].keys())
        writer.writerow(cols)
        for row in rows:
            writer.writerow([fmt(row[c]) for c in cols])
    elif "layer_reports" in obj:  # run report: per-layer table
        cols = sorted(obj["layer_reports"][0].keys())
        writer.writerow(cols)
        for row in obj["layer_reports"]:
            writer.writerow([fmt(row[c]) for c in cols])
    elif "modes" in obj:  # compare: one row per mode
        cols = sorted(obj["modes"][0].keys())
        writer.writerow(cols)
        for row in obj["modes"]:
            writer.writerow([fmt(row[c]) for c in cols])
    else:  # flat key,value rows
        writer.writerow(["key", "value"])
        for key in sorted(obj):
            value = obj[key]
            if isinstance(value, dict):
                for sub in sorted(value):
                    writer.writerow([f"{key}.{sub}", fmt(value[sub])])
            else:
                writer.writerow([key, fmt(value)])
    return buf.getvalue()


def _write_out(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _exit_code_doc() -> str:
    lines = ["exit codes:", "  0   success"]
    for exc, code in EXIT_CODES:
        lines.append(f"  {code:<3} {exc.__name__}")
    return "\n".join(lines)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zipvl",
        description="Adaptive sparse-attention experiments on a tiny deterministic transformer.",
        epilog=_exit_code_doc(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="write output to this path instead of stdout")
    parser.add_argument("--format", choices=("json", "csv"), default="json")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and report it")
    run.add_argument("--mode", choices=engine.MODES)
    run.add_argument("--tau", type=float)
    run.add_argument("--repeats", type=int)
    run.add_argument("--workload-file", dest="workload_file")
    sweep = sub.add_parser("sweep-tau", help="sweep tau and summarize each run")
    sweep.add_argument("--taus", help="comma-separated tau list")
    sweep.add_argument("--workload-file", dest="workload_file")
    comp = sub.add_parser("compare", help="adaptive vs ratio-matched fixed vs dense")
    comp.add_argument("--tau", type=float)
    comp.add_argument("--modes", help="comma-separated mode list")
    comp.add_argument("--workload-file", dest="workload_file")
    gen = sub.add_parser("gen-workload", help="write a synthetic score workload CSV")
    gen.add_argument("--kind", choices=("peaked", "diffuse"))
    gen.add_argument("--n", type=int)
    gen.add_argument("--layers", type=int)
    gen.add_argument("--concentration", type=float)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        raw = {}
        if args.config:
            try:
                with open(args.config, "r") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            raw = parse_config_text(text)
        overrides = {
            key: getattr(args, key, None)
            for key in (
                "seed", "mode", "tau", "taus", "modes", "repeats",
                "workload_file", "n", "layers", "concentration",
            )
        }
        if getattr(args, "kind", None):
            overrides["workload"] = args.kind
        if getattr(args, "workload_file", None):
            overrides["workload"] = "file"
        cfg = build_config(raw, overrides)
        if args.command == "run":
            res = cmd_run(cfg)
            text = _emit_json(res) if args.format == "json" else _emit_csv(res)
        elif args.command == "sweep-tau":
            rows = cmd_sweep_tau(cfg)
            text = _emit_json(rows) if args.format == "json" else _emit_csv(rows)
        elif args.command == "compare":
            res = cmd_compare(cfg)
            text = _emit_json(res) if args.format == "json" else _emit_csv(res)
        else:
            text = cmd_gen_workload(cfg)
        _write_out(text, args.out)
    except ZipvlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for klass, code in EXIT_CODES:
            if isinstance(exc, klass):
                return code
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
