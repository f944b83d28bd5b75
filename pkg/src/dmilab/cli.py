"""Experiment runner and the ``dmilab`` command line.

An experiment is an INI file with the sections ``[experiment]``,
``[scenario]``, ``[teachers]``, ``[train]`` and ``[adapt]``; the grammar is
documented in the README.  Every (sweep cell, seed) pair is one run.  A run
writes ``runs/<run_id>/metrics.csv`` (flushed after each epoch) and
``runs/<run_id>/status.json``; after all runs finish the directory gets
``summary.csv``, ``summary.json`` and ``manifest.json``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import functools
import json
import logging
import platform
import sys
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .adapt import (
    COMPONENTS,
    OBJECTIVES,
    AdaptConfig,
    EpochRecord,
    TeacherConfig,
    TrainConfig,
    adapt,
    burn_in_proxy,
    evaluate,
    make_teachers,
    pretrain_source,
)
from .dmi import DmiConfig
from .models import load_checkpoint, save_checkpoint
from .synthdata import SETTINGS, ScenarioConfig, bundle_path, generate, load_bundle, save_bundle

log = logging.getLogger("dmilab")

METRIC_COLUMNS = ("run_id", "seed", "sweep_value", "epoch", "metric", "value")
SUMMARY_COLUMNS = ("sweep_value", "metric", "n", "missing", "mean", "std")
METRICS = ("target_acc", "source_acc", "proxy_acc", "prompt_acc", "caption_acc", "agreement",
           "mean_subset", "skipped", "L_MC", "L_CD", "L_TCA", "L_AGS", "L_SIM", "L_MDA")
AXES = ("none", "batch_size", "lam", "components", "objective", "setting")
CANONICAL_SEEDS = (0, 1, 2, 3, 4)
MISSING = "NA"


class SpecError(ValueError):
    """Invalid experiment description; ``problems`` lists one message per field."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SchemaError(ValueError):
    def __init__(self, offenders: Sequence[tuple[str, list[str]]]):
        self.offenders = list(offenders)
        lines = [f"{path}: columns {cols}" for path, cols in self.offenders]
        super().__init__("metrics files with unexpected columns:\n  " + "\n  ".join(lines))


# ------------------------------------------------------------ value grammar

def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(_format(v) for v in value)
    return str(value)


def _coerce(text: str, typ) -> Any:
    text = text.strip()
    origin, args = typing.get_origin(typ), typing.get_args(typ)
    if args and type(None) in args:
        if text.lower() == "none":
            return None
        return _coerce(text, next(a for a in args if a is not type(None)))
    if origin is tuple:
        return tuple(text.replace("+", " ").split())
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


# the seed of every component config comes from the run, never the file
_SECTIONS = {"scenario": ScenarioConfig, "teachers": TeacherConfig, "train": TrainConfig,
             "adapt": AdaptConfig}
_ADAPT_EXTRA = {"lam": float, "confidence_threshold": typing.Optional[float]}


def _section_fields(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    out = {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init and f.name != "seed"}
    if cls is AdaptConfig:
        out.pop("dmi")
        out.update(_ADAPT_EXTRA)
    return out


def _axis_value(axis: str, token: str) -> Any:
    if axis == "batch_size":
        return int(token)
    if axis == "lam":
        return float(token)
    if axis == "components":
        parts = tuple(token.split("+"))
        bad = set(parts) - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown components {sorted(bad)}")
        return parts
    if axis == "objective":
        if token not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        return token
    if axis == "setting":
        if token not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        return token
    raise ValueError(f"unknown axis {axis!r}")


# ------------------------------------------------------------------- specs

@dataclass(frozen=True)
class Cell:
    label: str
    overrides: tuple[tuple[str, Any], ...]
    extrapolated: bool = False


@dataclass(frozen=True)
class RunSpec:
    run_id: str
    seed: int
    cell: Cell


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    scenario: ScenarioConfig = ScenarioConfig()
    teachers: TeacherConfig = TeacherConfig()
    train: TrainConfig = TrainConfig()
    adapt: AdaptConfig = AdaptConfig()
    axis: str = "none"
    values: tuple[str, ...] = ()
    group_axis: str = "none"
    group_values: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    workers: int = 1
    extrapolated: tuple[str, ...] = ()

    def __post_init__(self):
        problems = []
        if not self.seeds:
            problems.append("[experiment] seeds: at least one seed is required")
        for ax, vals, key in ((self.axis, self.values, "values"),
                              (self.group_axis, self.group_values, "group_values")):
            if ax not in AXES:
                problems.append(f"[experiment] axis {ax!r}: expected one of {AXES}")
                continue
            if ax != "none" and not vals:
                problems.append(f"[experiment] {key}: sweep values are empty for axis {ax!r}")
            for tok in vals:
                try:
                    _axis_value(ax, tok)
                except ValueError as exc:
                    problems.append(f"[experiment] {key}: {tok!r}: {exc}")
        if self.axis == "none" and self.group_axis != "none":
            problems.append("[experiment] group_axis needs a primary axis")
        if self.axis != "none" and self.axis == self.group_axis:
            problems.append("[experiment] group_axis must differ from axis")
        if self.workers < 1:
            problems.append("[experiment] workers: must be at least 1")
        if problems:
            raise SpecError(problems)

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    def cells(self) -> list[Cell]:
        if self.axis == "none":
            return [Cell("base", ())]
        groups = [(None, None)] if self.group_axis == "none" else \
            [(self.group_axis, g) for g in self.group_values]
        cells = []
        for gax, gtok in groups:
            for tok in self.values:
                over = [(self.axis, _axis_value(self.axis, tok))]
                label = f"{self.axis}={tok}"
                if gax is not None:
                    over.insert(0, (gax, _axis_value(gax, gtok)))
                    label = f"{gax}={gtok}/{label}"
                cells.append(Cell(label, tuple(over), tok in self.extrapolated))
        return cells

    def runs(self) -> list[RunSpec]:
        out = []
        for i, cell in enumerate(self.cells()):
            slug = cell.label.replace("/", "_").replace("=", "-").replace("+", "")
            for seed in self.seeds:
                out.append(RunSpec(f"c{i:02d}_{slug}_s{seed}", seed, cell))
        return out

    def to_ini(self) -> str:
        lines = ["[experiment]", f"name = {self.name}", f"seeds = {_format(self.seeds)}",
                 f"axis = {self.axis}", f"values = {_format(self.values)}",
                 f"group_axis = {self.group_axis}", f"group_values = {_format(self.group_values)}",
                 f"workers = {self.workers}", f"extrapolated = {_format(self.extrapolated)}"]
        for section, cls in _SECTIONS.items():
            cfg = getattr(self, section)
            lines += ["", f"[{section}]"]
            for key in _section_fields(cls):
                if cls is AdaptConfig and key in _ADAPT_EXTRA:
                    value = getattr(cfg.dmi, key)
                else:
                    value = getattr(cfg, key)
                lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def parse_spec(*texts: str) -> ExperimentSpec:
    """Build a spec from INI texts; later texts override earlier ones key by key."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    problems = []
    for text in texts:
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise SpecError([f"syntax: {exc}"]) from None
    unknown = set(cp.sections()) - {"experiment", *_SECTIONS}
    problems += [f"[{s}]: unknown section" for s in sorted(unknown)]

    built: dict[str, Any] = {}
    for section, cls in _SECTIONS.items():
        fields = _section_fields(cls)
        kwargs, dmi_kwargs = {}, {}
        if cp.has_section(section):
            for key, raw in cp.items(section):
                if key not in fields:
                    problems.append(f"[{section}] {key}: unknown key")
                    continue
                try:
                    value = _coerce(raw, fields[key])
                except ValueError as exc:
                    problems.append(f"[{section}] {key}: {exc}")
                    continue
                (dmi_kwargs if cls is AdaptConfig and key in _ADAPT_EXTRA else kwargs)[key] = value
        try:
            if cls is AdaptConfig:
                kwargs["dmi"] = DmiConfig(**dmi_kwargs)
            built[section] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            problems.append(f"[{section}]: {exc}")

    exp = dict(cp.items("experiment")) if cp.has_section("experiment") else {}
    known = {"name", "seeds", "axis", "values", "group_axis", "group_values", "workers", "extrapolated"}
    problems += [f"[experiment] {k}: unknown key" for k in sorted(set(exp) - known)]
    kwargs = {"name": exp.get("name", "experiment")}
    try:
        kwargs["seeds"] = tuple(int(s) for s in exp.get("seeds", "0").split())
    except ValueError as exc:
        problems.append(f"[experiment] seeds: {exc}")
    try:
        kwargs["workers"] = int(exp.get("workers", "1"))
    except ValueError as exc:
        problems.append(f"[experiment] workers: {exc}")
    for key in ("values", "group_values", "extrapolated"):
        kwargs[key] = tuple(exp.get(key, "").split())
    kwargs["axis"] = exp.get("axis", "none").strip() or "none"
    kwargs["group_axis"] = exp.get("group_axis", "none").strip() or "none"
    if problems:
        raise SpecError(problems)
    return ExperimentSpec(**kwargs, **built)


def load_spec(path, *overlays: str) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError([f"{path}: {exc.strerror}"]) from None
    return parse_spec(text, *overlays)


# ------------------------------------------------------------------ suites

def _canonical(name: str, **changes) -> ExperimentSpec:
    return ExperimentSpec(name=name, seeds=CANONICAL_SEEDS, **changes)


def suite_batch_sensitivity() -> ExperimentSpec:
    return _canonical("batch_sensitivity", axis="batch_size", values=("8", "16", "32", "64"),
                      group_axis="objective", group_values=("mi", "dmi"))


def suite_lambda() -> ExperimentSpec:
    # the 0.2-step grid, the 0.5 default, and 0.1 as a labelled extrapolation point
    grid = ["0.1"] + [f"{0.2 * i:.1f}" for i in range(1, 11)]
    grid.insert(3, "0.5")
    return _canonical("lambda", axis="lam", values=tuple(grid), extrapolated=("0.1",))


def suite_ablation() -> ExperimentSpec:
    return _canonical("ablation", axis="components",
                      values=("SIM", "SIM+AGS", "SIM+AGS+MC", "SIM+AGS+MC+CD"))


def suite_objectives() -> ExperimentSpec:
    return _canonical("objectives", axis="objective", values=("dmi", "mi", "kl"))


def suite_settings() -> ExperimentSpec:
    return _canonical("settings", axis="setting", values=SETTINGS,
                      scenario=ScenarioConfig(partial_size=10, open_extra=5))


SUITES = {
    "batch_sensitivity": suite_batch_sensitivity,
    "lambda": suite_lambda,
    "ablation": suite_ablation,
    "objectives": suite_objectives,
    "settings": suite_settings,
}


# ----------------------------------------------------------------- running

@dataclass(frozen=True)
class RunOutcome:
    run_id: str
    ok: bool
    final_accuracy: float = float("nan")
    error: str = ""


@functools.lru_cache(maxsize=8)
def _prepared(scenario: ScenarioConfig, train: TrainConfig, teachers: TeacherConfig):
    """Scenario, source model and burned-in teachers; shared by runs in one process."""
    bundle = generate(scenario)
    theta_s = pretrain_source(bundle, train).params
    team = make_teachers(bundle, teachers)
    proxy = burn_in_proxy(bundle, team.caption, theta_s, train).params
    return bundle, theta_s, team.replace(proxy=proxy)


def resolve_run(spec: ExperimentSpec, run: RunSpec):
    """Concrete configs for one run: ``(scenario, train, teachers, adapt)``."""
    over = dict(run.cell.overrides)
    scenario = spec.scenario.replace(seed=run.seed, **({"setting": over.pop("setting")} if "setting" in over else {}))
    train = dataclasses.replace(spec.train, seed=run.seed)
    teachers = dataclasses.replace(spec.teachers, seed=run.seed)
    return scenario, train, teachers, spec.adapt.replace(seed=run.seed, **over)


def _metric_rows(run: RunSpec, record: EpochRecord, source_acc: float):
    values = {**record.metrics(), "source_acc": source_acc}
    for m in METRICS:
        yield [run.run_id, run.seed, run.cell.label, record.epoch, m, repr(float(values[m]))]


def execute_run(spec: ExperimentSpec, run: RunSpec, out_dir) -> RunOutcome:
    run_dir = Path(out_dir) / "runs" / run.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    status = {"run_id": run.run_id, "seed": run.seed, "sweep_value": run.cell.label}
    try:
        scenario, train, teachers_cfg, cfg = resolve_run(spec, run)
        bundle, theta_s, teachers = _prepared(scenario, train, teachers_cfg)
        source_acc = evaluate(theta_s, bundle.target_x, bundle.target_y).accuracy
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            fh.flush()

            def on_epoch(record: EpochRecord):
                writer.writerows(_metric_rows(run, record, source_acc))
                fh.flush()

            _, _, report = adapt(bundle, theta_s, teachers, cfg, on_epoch=on_epoch)
        outcome = RunOutcome(run.run_id, True, report.final_accuracy)
        status.update(status="ok", final_accuracy=report.final_accuracy)
    except Exception as exc:  # recorded per run; the sweep carries on
        outcome = RunOutcome(run.run_id, False, error=f"{type(exc).__name__}: {exc}")
        status.update(status="failed", error=outcome.error)
    status["wall_clock"] = time.perf_counter() - start
    (run_dir / "status.json").write_text(json.dumps(status, indent=2, sort_keys=True) + "\n")
    return outcome


def _execute_packed(args) -> RunOutcome:
    return execute_run(*args)


def manifest(spec: ExperimentSpec) -> dict:
    return {
        "name": spec.name,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": spec.to_ini(),
        "seeds": list(spec.seeds),
        "cells": [{"label": c.label, "overrides": {k: _format(v) for k, v in c.overrides},
                   "extrapolated": c.extrapolated} for c in spec.cells()],
        "runs": [{"run_id": r.run_id, "seed": r.seed, "sweep_value": r.cell.label} for r in spec.runs()],
    }


def run(spec: ExperimentSpec | str | Path, out_dir, workers: int | None = None) -> int:
    """Execute every (cell, seed) run and write the summary and manifest.

    Returns 0 when every run succeeded and 1 otherwise.
    """
    if not isinstance(spec, ExperimentSpec):
        spec = load_spec(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.ini").write_text(spec.to_ini())
    (out / "manifest.json").write_text(json.dumps(manifest(spec), indent=2, sort_keys=True) + "\n")
    runs = spec.runs()
    width = workers or spec.workers
    log.info("%s: %d runs on %d worker(s) -> %s", spec.name, len(runs), width, out)
    jobs = [(spec, r, out) for r in runs]
    if width > 1:
        with ProcessPoolExecutor(max_workers=width) as pool:
            outcomes = list(pool.map(_execute_packed, jobs))
    else:
        outcomes = [_execute_packed(j) for j in jobs]
    for o in outcomes:
        if o.ok:
            log.info("  %s  final acc %.4f", o.run_id, o.final_accuracy)
        else:
            log.error("  %s  FAILED %s", o.run_id, o.error)
    emit_summary(out)
    return 0 if all(o.ok for o in outcomes) else 1


# ----------------------------------------------------------------- summary

@dataclass
class Summary:
    rows: list[dict]

    def get(self, sweep_value: str, metric: str) -> dict:
        for r in self.rows:
            if r["sweep_value"] == sweep_value and r["metric"] == metric:
                return r
        raise KeyError((sweep_value, metric))

    def mean(self, sweep_value: str, metric: str = "target_acc") -> float:
        value = self.get(sweep_value, metric)["mean"]
        return float("nan") if value is None else value


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{**r, "seed": int(r["seed"]), "epoch": int(r["epoch"]), "value": float(r["value"])}
                for r in reader]


def emit_summary(metrics_dir) -> Summary:
    """Aggregate the final epoch of every run into mean/std per (sweep value, metric).

    Writes ``summary.csv`` and ``summary.json``.  Cells whose runs all failed
    keep their rows with ``n = 0`` and ``NA`` statistics.  std is the
    population standard deviation over runs.
    """
    root = Path(metrics_dir)
    files = sorted((root / "runs").glob("*/metrics.csv"))
    offenders = []
    for f in files:
        with open(f, newline="") as fh:
            header = next(csv.reader(fh), [])
        if tuple(header) != METRIC_COLUMNS:
            offenders.append((str(f), header))
    if offenders:
        raise SchemaError(offenders)

    expected: dict[str, set[str]] = {}
    order: list[str] = []
    man_path = root / "manifest.json"
    if man_path.exists():
        for r in json.loads(man_path.read_text())["runs"]:
            if r["sweep_value"] not in expected:
                order.append(r["sweep_value"])
            expected.setdefault(r["sweep_value"], set()).add(r["run_id"])

    finals: dict[str, dict[str, dict[str, float]]] = {}
    for f in files:
        rows = read_metrics(f)
        if not rows:
            continue
        last = max(r["epoch"] for r in rows)
        for r in rows:
            if r["epoch"] != last:
                continue
            cell = r["sweep_value"]
            if cell not in expected:
                order.append(cell)
                expected[cell] = set()
            expected[cell].add(r["run_id"])
            finals.setdefault(cell, {}).setdefault(r["metric"], {})[r["run_id"]] = r["value"]

    out_rows = []
    for cell in order:
        per_metric = finals.get(cell, {})
        metrics = [m for m in METRICS if m in per_metric] or list(METRICS)
        for m in metrics:
            vals = np.array(list(per_metric.get(m, {}).values()), dtype=np.float64)
            n = int(vals.size)
            out_rows.append({
                "sweep_value": cell, "metric": m, "n": n, "missing": len(expected[cell]) - n,
                "mean": float(vals.mean()) if n else None, "std": float(vals.std()) if n else None,
            })
    with open(root / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for r in out_rows:
            writer.writerow([r["sweep_value"], r["metric"], r["n"], r["missing"],
                             MISSING if r["mean"] is None else repr(r["mean"]),
                             MISSING if r["std"] is None else repr(r["std"])])
    (root / "summary.json").write_text(
        json.dumps({"columns": list(SUMMARY_COLUMNS), "rows": out_rows}, indent=2) + "\n")
    return Summary(out_rows)


# --------------------------------------------------------------------- CLI

def _scenario_from(args) -> tuple[ScenarioConfig, ExperimentSpec]:
    spec = load_spec(args.config) if args.config else ExperimentSpec(name="cli")
    changes = {"seed": args.seed}
    if getattr(args, "setting", None):
        changes["setting"] = args.setting
    return spec.scenario.replace(**changes), spec


def _bundle(args):
    scenario, spec = _scenario_from(args)
    if getattr(args, "bundle", None):
        return load_bundle(args.bundle), spec
    return generate(scenario), spec


def _cmd_generate(args) -> int:
    scenario, _ = _scenario_from(args)
    bundle = generate(scenario)
    out = Path(args.out)
    path = bundle_path(out, scenario) if out.is_dir() or not out.suffix else out
    path.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, path)
    print(path)
    return 0


def _cmd_pretrain(args) -> int:
    bundle, spec = _bundle(args)
    result = pretrain_source(bundle, dataclasses.replace(spec.train, seed=args.seed))
    save_checkpoint(args.out, {"theta_s": result.params})
    print(f"source acc {result.accuracy:.4f}  target acc "
          f"{evaluate(result.params, bundle.target_x, bundle.target_y).accuracy:.4f}  -> {args.out}")
    return 0


def _cmd_burnin(args) -> int:
    bundle, spec = _bundle(args)
    theta_s = load_checkpoint(args.checkpoint)["theta_s"]
    teachers = make_teachers(bundle, dataclasses.replace(spec.teachers, seed=args.seed))
    result = burn_in_proxy(bundle, teachers.caption, theta_s, dataclasses.replace(spec.train, seed=args.seed))
    save_checkpoint(args.out, {"theta_s": theta_s, "theta_b": result.params})
    print(f"pseudo-label fit {result.accuracy:.4f}  -> {args.out}")
    return 0


def _cmd_adapt(args) -> int:
    bundle, spec = _bundle(args)
    cfg = spec.adapt.replace(seed=args.seed, **({"objective": args.objective} if args.objective else {}))
    teachers = make_teachers(bundle, dataclasses.replace(spec.teachers, seed=args.seed))
    train = dataclasses.replace(spec.train, seed=args.seed)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        theta_s = ck["theta_s"]
        proxy = ck.get("theta_b") or burn_in_proxy(bundle, teachers.caption, theta_s, train).params
    else:
        theta_s = pretrain_source(bundle, train).params
        proxy = burn_in_proxy(bundle, teachers.caption, theta_s, train).params
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_ = RunSpec("adapt", args.seed, Cell("base", ()))
    source_acc = evaluate(theta_s, bundle.target_x, bundle.target_y).accuracy
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

        def on_epoch(record):
            writer.writerows(_metric_rows(run_, record, source_acc))
            fh.flush()
            print(f"epoch {record.epoch:3d}  target {record.target_acc:.4f}  proxy {record.proxy_acc:.4f}"
                  f"  prompt {record.prompt_acc:.4f}  agree {record.agreement:.3f}")

        theta_t, teachers, report = adapt(bundle, theta_s, teachers.replace(proxy=proxy), cfg, on_epoch=on_epoch)
    save_checkpoint(out / "adapted.dmic", {"theta_t": theta_t, "theta_b": teachers.proxy, "prompt": teachers.prompt})
    print(f"source {report.source_acc:.4f} -> adapted {report.final_accuracy:.4f}  ({out})")
    return 0


def _suite_spec(args) -> ExperimentSpec:
    spec = SUITES[args.name]()
    if args.config:
        spec = parse_spec(spec.to_ini(), Path(args.config).read_text())
    if args.seed is not None:
        spec = spec.replace(seeds=(args.seed,))
    if args.objective:
        spec = spec.replace(adapt=spec.adapt.replace(objective=args.objective))
    if args.setting:
        spec = spec.replace(scenario=spec.scenario.replace(setting=args.setting))
    return spec


def _cmd_suite(args) -> int:
    spec = _suite_spec(args)
    return run(spec, args.out or Path("results") / spec.name, args.workers)


def _cmd_run(args) -> int:
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = spec.replace(seeds=(args.seed,))
    return run(spec, args.out or Path("results") / spec.name, args.workers)


def _cmd_summarize(args) -> int:
    summary = emit_summary(args.dir)
    for r in summary.rows:
        if r["metric"] == "target_acc":
            stat = "missing" if r["mean"] is None else f"{r['mean']:.4f} +/- {r['std']:.4f}"
            print(f"{r['sweep_value']:40s} n={r['n']}  {stat}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmilab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default: int | None = 0):
        p.add_argument("--config", help="experiment INI file (its sections supply the configs)")
        p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("generate", help="write a scenario bundle")
    common(p)
    p.add_argument("--setting", choices=SETTINGS)
    p.add_argument("--out", default=".", help="bundle file or directory")
    p.set_defaults(func=_cmd_generate)

    for name, func, needs_ck in (("pretrain", _cmd_pretrain, False), ("burnin", _cmd_burnin, True),
                                 ("adapt", _cmd_adapt, None)):
        p = sub.add_parser(name, help=f"{name} stage")
        common(p)
        p.add_argument("--setting", choices=SETTINGS)
        p.add_argument("--bundle", help="scenario bundle (generated from --config/--seed if omitted)")
        if needs_ck is not False:
            p.add_argument("--checkpoint", required=bool(needs_ck), help="checkpoint holding theta_s (and theta_b)")
        if name == "adapt":
            p.add_argument("--objective", choices=OBJECTIVES)
            p.add_argument("--out", default="adapt_out", help="output directory")
        else:
            p.add_argument("--out", required=True, help="checkpoint file to write")
        p.set_defaults(func=func)

    p = sub.add_parser("suite", help="run a canonical experiment suite")
    p.add_argument("name", choices=sorted(SUITES))
    common(p, seed_default=None)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--setting", choices=SETTINGS)
    p.set_defaults(func=_cmd_suite)

    p = sub.add_parser("run", help="run an experiment described by an INI file")
    p.add_argument("spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="rebuild summary.csv/json for an output directory")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_summarize)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print("invalid experiment spec:", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
