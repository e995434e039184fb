"""End-to-end experiments: load, defend, view, featurize, evaluate, report.

Stages run in a fixed order and each records how many observations went in
and out, so any table row can be audited from its report alone.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import defenses as net
from . import resources as app
from .evaluation import EvaluationReport, cross_validate_matrix
from .features import FEATURE_NAMES, SCHEMA_VERSION, feature_matrix, resource_log_to_pseudo_observation
from .forest import ForestParams
from .trace import Observation, TraceError, iter_jsonl, observation_from_json
from .views import (
    NetFlowPadTargets,
    NetFlowParams,
    OwnerMap,
    PathMap,
    as_filter,
    google_view,
    netflow_stream_views,
)

_LOGGER = logging.getLogger(__name__)

REPORT_VERSION = "wfbench-report/1"
NO_VISIBLE_TRAFFIC = "no visible traffic"
VIEW_KINDS = ("none", "as", "netflow", "google", "party")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    inputs: list[str]
    view: dict = field(default_factory=lambda: {"kind": "none"})
    net_defense: list[dict] = field(default_factory=list)
    app_defense: list[dict] = field(default_factory=list)
    classifier: dict = field(default_factory=dict)
    folds: int = 10
    seed: int = 0
    discard_timings: bool | None = None
    report: str | None = None
    report_csv: str | None = None

    def __post_init__(self):
        if isinstance(self.inputs, str):
            self.inputs = [self.inputs]
        if not self.inputs:
            raise ValueError("no input dataset given")
        if self.view.get("kind", "none") not in VIEW_KINDS:
            raise ValueError(f"unknown view {self.view.get('kind')!r}")

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return asdict(self)

    def forest_params(self) -> ForestParams:
        c = self.classifier
        return ForestParams(
            n_trees=int(c.get("n_trees", 100)),
            max_features=c.get("max_features", "sqrt"),
            min_samples_leaf=int(c.get("min_samples_leaf", 1)),
            max_depth=c.get("max_depth"),
            seed=int(c.get("seed", self.seed)),
        )


@dataclass
class Inputs:
    """Observations or resource logs, whichever the input files hold."""

    observations: list[Observation] | None = None
    logs: list[app.ResourceLog] | None = None

    @property
    def items(self) -> list:
        return self.observations if self.observations is not None else self.logs

    @property
    def kind(self) -> str:
        return "traces" if self.observations is not None else "logs"


def load_inputs(paths: list[str]) -> Inputs:
    observations: list[Observation] = []
    logs: list[app.ResourceLog] = []
    for path in paths:
        with open(path, "rb") as fh:
            for lineno, doc in iter_jsonl(fh):
                where = f"{os.path.basename(path)} line {lineno}"
                if isinstance(doc, dict) and "entries" in doc:
                    logs.append(app.ResourceLog.from_json(doc, where))
                else:
                    observations.append(observation_from_json(doc, where))
    if observations and logs:
        raise TraceError("inputs mix traces and resource logs")
    if not observations and not logs:
        raise TraceError("inputs contain no observations")
    return Inputs(observations) if observations else Inputs(logs=logs)


def _net_chain(specs: list[dict], seed: int):
    fns = []
    for spec in specs:
        spec = dict(spec)
        name = spec.pop("name")
        if name == "front":
            spec.setdefault("seed", seed)
        fns.append(net.make_defense(name, **spec))
    return net.chain(*fns) if fns else None


def apply_app_defenses(logs: list[app.ResourceLog], specs: list[dict], seed: int) -> list[app.ResourceLog]:
    """Apply app-layer defenses in order; schemes are fitted on `logs`."""
    for spec in specs:
        name = spec["name"]
        if name == "pad-resources":
            scheme = app.fit_pad_scheme(logs, int(spec["n"]), "RESOURCES")
            pad_req = bool(spec.get("pad_requests", True))
            logs = [app.pad_resources(log, scheme, pad_req) for log in logs]
        elif name == "pad-total":
            s_in = app.fit_pad_scheme(logs, int(spec["n"]), "TOTAL_IN")
            s_out = app.fit_pad_scheme(logs, int(spec["n"]), "TOTAL_OUT")
            logs = [app.pad_total_app(log, s_in, s_out) for log in logs]
        elif name == "dummies":
            pool = spec["pool"]
            if isinstance(pool, str):
                pool = app.DummyPool.load(pool)
            elif isinstance(pool, dict):
                pool = app.DummyPool(tuple(tuple(tuple(x) for x in ch) for ch in pool["chains"]),
                                     pool.get("domain", "gstatic.com"))
            base = int(spec.get("seed", seed))
            logs = [
                app.inject_dummy_resources(
                    log, pool, float(spec["p"]), int(spec["m"]),
                    int(np.random.SeedSequence([base, i]).generate_state(1)[0]),
                )
                for i, log in enumerate(logs)
            ]
        else:
            raise ValueError(f"unknown app defense {name!r}")
    return logs


def _view_observation(obs: Observation, view: dict, ctx: dict) -> Observation | None:
    kind = view.get("kind", "none")
    if kind == "none":
        return obs
    if kind == "as":
        return as_filter(obs, view["as_id"], ctx["paths"])
    if kind == "google":
        return google_view(obs, ctx["owners"], view.get("owner", "Google"))
    raise ValueError(f"view {kind!r} does not apply to traces")


def _view_context(view: dict) -> dict:
    ctx = {}
    if "paths" in view:
        ctx["paths"] = PathMap.load(view["paths"])
    if view.get("kind") in ("google", "party"):
        ctx["owners"] = OwnerMap.load(view["owners"]) if view.get("owners") else OwnerMap.google_default()
    return ctx


def _summary(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "std": float(arr.std()),
        "n": int(arr.size),
    }


def recorded_overhead(obs: Observation) -> float | None:
    """Overhead stored by an upstream defend step, if any.

    Uses the byte totals recorded at defense time, since a later view may
    have removed traffic from the observation.
    """
    orig, defended = obs.meta.get("orig_bytes"), obs.meta.get("defended_bytes")
    if orig is None or defended is None:
        return None
    return (int(defended) - int(orig)) / int(orig)


def _drop_small_classes(items: list, folds: int) -> tuple[list, list[str]]:
    counts: dict[str, int] = {}
    for it in items:
        counts[it.label] = counts.get(it.label, 0) + 1
    small = sorted(c for c, n in counts.items() if n < folds)
    return [it for it in items if it.label not in small], small


def run_experiment(config: ExperimentConfig) -> dict:
    """Run one configured pipeline and return the report document.

    Order: load, defense, view, featurize, cross-validate, overhead.  Views
    act on defended traffic because the adversary observes what the defense
    emits.
    """
    stages: list[dict] = []

    def stage(name: str, n_in: int, n_out: int, **extra):
        stages.append({"stage": name, "in": n_in, "out": n_out, **extra})
        _LOGGER.info("%s: %d -> %d", name, n_in, n_out)

    try:
        inputs = load_inputs(config.inputs)
    except (OSError, ValueError) as exc:
        raise StageError("load", exc) from exc
    items = inputs.items
    stage("load", len(items), len(items), kind=inputs.kind)

    try:
        if inputs.kind == "traces":
            if config.app_defense:
                raise ValueError("app-layer defenses need resource-log input")
            fn = _net_chain(config.net_defense, config.seed)
            defended = [fn(o, i) for i, o in enumerate(items)] if fn else list(items)
            if fn:
                overheads = [net.overhead(o, d) for o, d in zip(items, defended)]
            else:
                overheads = [v for o in items if (v := recorded_overhead(o)) is not None]
        else:
            if config.net_defense:
                raise ValueError("network defenses need trace input")
            defended = apply_app_defenses(list(items), config.app_defense, config.seed)
            overheads = [app.app_overhead(o, d).per_page / o.total_bytes for o, d in zip(items, defended)] \
                if config.app_defense else []
    except (ValueError, KeyError, TypeError) as exc:
        raise StageError("defense", exc) from exc
    stage("defense", len(items), len(defended))

    view = dict(config.view)
    try:
        ctx = _view_context(view)
        if inputs.kind == "traces" and view.get("kind") == "netflow":
            pad = view.get("pad")
            targets = NetFlowPadTargets(int(pad[0]), int(pad[1])) if pad else None
            viewed = netflow_stream_views(defended, NetFlowParams(int(view["n"])), targets)
        elif inputs.kind == "traces":
            viewed = [_view_observation(o, view, ctx) for o in defended]
        else:
            kind = view.get("kind", "none")
            if kind == "party":
                logs = [app.filter_party(log, view["party"], ctx.get("owners")) for log in defended]
            elif kind == "none":
                logs = defended
            else:
                raise ValueError(f"view {kind!r} does not apply to resource logs")
            dt = True if config.discard_timings is None else config.discard_timings
            viewed = [None if log is None else resource_log_to_pseudo_observation(log, dt) for log in logs]
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("view", exc) from exc
    visible = [o for o in viewed if o is not None]
    unseen = len(viewed) - len(visible)
    stage("view", len(defended), len(visible), unseen=unseen)

    n_visible = len(visible)
    visible, dropped = _drop_small_classes(visible, config.folds)
    stage("filter-classes", n_visible, len(visible), dropped_classes=dropped)

    report: dict[str, Any] = {
        "version": REPORT_VERSION,
        "feature_schema": SCHEMA_VERSION,
        "config": config.to_json(),
        "seed": config.seed,
        "unseen": unseen,
        "dropped_classes": dropped,
    }
    if len({o.label for o in visible}) < 2:
        stage("featurize", len(visible), 0)
        report.update({"status": NO_VISIBLE_TRAFFIC, "macro_f1": None, "stages": stages,
                       "overhead": _summary(overheads) if overheads else None})
        return report

    try:
        discard = bool(config.discard_timings) if inputs.kind == "traces" else False
        X = feature_matrix(visible, discard)
    except (ValueError, TraceError) as exc:
        raise StageError("featurize", exc) from exc
    stage("featurize", len(visible), X.shape[0])

    try:
        result: EvaluationReport = cross_validate_matrix(
            X, [o.label for o in visible], config.folds, config.forest_params(), FEATURE_NAMES
        )
    except ValueError as exc:
        raise StageError("evaluate", exc) from exc
    stage("evaluate", X.shape[0], X.shape[0])

    result.overhead = _summary(overheads) if overheads else None
    report.update({"status": "ok", **result.to_json(), "stages": stages})
    write_report(report, config.report, config.report_csv, result)
    return report


def write_report(report: dict, path: str | None, csv_path: str | None = None,
                 result: EvaluationReport | None = None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    if csv_path and result is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            result.write_csv(fh)
