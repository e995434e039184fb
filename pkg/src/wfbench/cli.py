"""Command-line interface: ``wfbench <command> ...``.

Exit codes: 0 success, 1 invalid input or arguments, 2 pipeline failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import defenses as net
from . import resources as app
from .experiment import ExperimentConfig, StageError, apply_app_defenses, run_experiment
from .synth import GOOGLE_DOMAINS, SynthParams, generate_synthetic
from .trace import Dataset, dumps_observation, load_dataset
from .views import (
    IpFingerprintDb,
    NetFlowPadTargets,
    NetFlowParams,
    OwnerMap,
    PathMap,
    as_filter,
    google_view,
    ip_fingerprint_match,
    netflow_stream_views,
    observed_ips,
)

_LOGGER = logging.getLogger("wfbench")

EXIT_OK, EXIT_INVALID, EXIT_PIPELINE = 0, 1, 2


class InvalidInput(Exception):
    """Bad arguments or input files (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _validating(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InvalidInput(str(exc)) from exc


def _int_pair(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None


def _sidecar(out: str, suffix: str) -> str:
    stem = out[:-len(".jsonl")] if out.endswith(".jsonl") else out
    return f"{stem}.{suffix}"


def _write_json(doc, path: str | None) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _write_observations(observations, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obs in observations:
            fh.write(dumps_observation(obs) + "\n")


def dummy_pool_from_logs(logs, max_chains: int = 64) -> app.DummyPool:
    """Chains of the Google-hosted requests of each page, offsets from the first."""
    chains = []
    for log in logs:
        picked = sorted((e for e in log.entries if e.domain in GOOGLE_DOMAINS), key=lambda e: e.t_request)
        if picked:
            t0 = picked[0].t_request
            chains.append(tuple((max(e.size_request, 1), max(e.size_response, 1), e.t_request - t0) for e in picked))
        if len(chains) == max_chains:
            break
    return app.DummyPool(tuple(chains))


def cmd_synth(args) -> int:
    params = _validating(
        SynthParams,
        num_classes=args.classes,
        samples_per_class=args.samples,
        flows_per_class=args.flows,
        packets_per_flow=args.packets,
        overlap=args.overlap,
        google_fraction=args.google_fraction,
        noise=args.noise,
        first_party_overlap=args.first_party_overlap,
        fixed_structure=args.fixed_structure,
        seed=args.seed,
    )
    syn = generate_synthetic(params)
    _write_observations(syn.dataset, args.output)
    app.save_logs(syn.logs, _sidecar(args.output, "logs.jsonl"))
    _write_json(syn.paths.to_json(), _sidecar(args.output, "paths.json"))
    _write_json(syn.owners.to_json(), _sidecar(args.output, "owners.json"))
    _write_json(syn.ipdb.to_json(), _sidecar(args.output, "ipdb.json"))
    _write_json(dummy_pool_from_logs(syn.logs).to_json(), _sidecar(args.output, "pool.json"))
    _LOGGER.info("wrote %d observations to %s", len(syn.dataset), args.output)
    return EXIT_OK


def _net_defense_fns(args):
    fns = []
    for name in args.defense:
        if name == "front":
            fns.append(net.make_defense(
                "front", n_client=args.nc, n_server=args.ns, w_min=args.wmin, w_max=args.wmax,
                dummy_size=args.dummy_size, seed=args.seed,
            ))
        elif name == "pad-sizes":
            fns.append(net.make_defense(name, target=args.target))
        elif name == "pad-total":
            fns.append(net.make_defense(name, quantum=args.quantum))
        else:
            fns.append(net.make_defense(name))
    return net.chain(*fns)


def cmd_defend(args) -> int:
    dataset = _validating(load_dataset, args.input)
    fn = _validating(_net_defense_fns, args)
    out = []
    for i, obs in enumerate(dataset):
        defended = fn(obs, i)
        # keep the first original size when defenses are chained across runs
        orig = obs.meta.get("orig_bytes", str(obs.total_bytes))
        out.append(defended.with_meta(orig_bytes=orig, defended_bytes=str(defended.total_bytes)))
    _write_observations(out, args.output)
    _LOGGER.info("defended %d observations with %s", len(out), "+".join(args.defense))
    return EXIT_OK


def cmd_view(args) -> int:
    if args.party:
        logs = _validating(app.load_logs, args.input)
        owners = _validating(OwnerMap.load, args.owners) if args.owners else None
        kept = [log for log in (app.filter_party(l, args.party, owners) for l in logs) if log is not None]
        app.save_logs(kept, args.output)
        n_in = len(logs)
    else:
        dataset = _validating(load_dataset, args.input)
        if args.as_id:
            if not args.paths:
                raise InvalidInput("--as needs --paths")
            paths = _validating(PathMap.load, args.paths)
            views = [as_filter(o, args.as_id, paths) for o in dataset]
        elif args.netflow_n is not None:
            nf = _validating(NetFlowParams, args.netflow_n)
            pad = _validating(NetFlowPadTargets, *args.netflow_pad) if args.netflow_pad else None
            views = netflow_stream_views(dataset, nf, pad)
        else:
            owners = _validating(OwnerMap.load, args.owners) if args.owners else OwnerMap.google_default()
            views = [google_view(o, owners) for o in dataset]
        kept = [v for v in views if v is not None]
        _write_observations(kept, args.output)
        n_in = len(dataset)
    _write_json({"in": n_in, "out": len(kept), "unseen": n_in - len(kept)}, None)
    return EXIT_OK


def cmd_appdefend(args) -> int:
    logs = _validating(app.load_logs, args.input)
    spec = {"name": args.defense}
    if args.defense in ("pad-resources", "pad-total"):
        if args.n is None:
            raise InvalidInput(f"{args.defense} needs --n")
        spec["n"] = args.n
        spec["pad_requests"] = not args.no_pad_requests
    else:
        if args.p is None or args.m is None or not args.pool:
            raise InvalidInput("dummies needs --p, --m and --pool")
        spec.update(p=args.p, m=args.m, pool=_validating(app.DummyPool.load, args.pool))
        if not 0.0 <= args.p <= 1.0 or args.m < 0:
            raise InvalidInput("need 0 <= p <= 1 and m >= 0")
    if "n" in spec and spec["n"] < 1:
        raise InvalidInput("--n must be >= 1")
    defended = apply_app_defenses(logs, [spec], args.seed)
    app.save_logs(defended, args.output)
    per_page = [app.app_overhead(o, d) for o, d in zip(logs, defended)]
    added = [x for ov in per_page for x in ov.per_request]
    summary = {
        "logs": len(defended),
        "bytes_per_page_mean": sum(ov.per_page for ov in per_page) / len(per_page),
        "relative_mean": sum(ov.per_page / ov.original_bytes for ov in per_page) / len(per_page),
        "mean_kB_per_request": sum(added) / len(added) / 1000 if added else 0.0,
    }
    _write_json(summary, None)
    return EXIT_OK


def _run_config(config: ExperimentConfig) -> int:
    try:
        report = run_experiment(config)
    except StageError as exc:
        if exc.stage == "load":
            raise InvalidInput(str(exc)) from exc
        raise
    if config.report is None:
        _write_json(report, None)
    if report["status"] != "ok":
        _LOGGER.warning("%s", report["status"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _validating(
        ExperimentConfig,
        inputs=list(args.input),
        classifier={
            "n_trees": args.trees,
            "max_features": args.max_features,
            "min_samples_leaf": args.min_samples_leaf,
            "max_depth": args.max_depth,
        },
        folds=args.folds,
        seed=args.seed,
        discard_timings=args.discard_timings,
        report=args.output,
        report_csv=args.report_csv,
    )
    _validating(config.forest_params)
    return _run_config(config)


def cmd_run(args) -> int:
    config = _validating(ExperimentConfig.load, args.config)
    if args.output:
        config.report = args.output
    return _run_config(config)


def cmd_ipfp(args) -> int:
    db = _validating(IpFingerprintDb.load, args.db)
    dataset: Dataset = _validating(load_dataset, args.input)
    results, correct = [], 0
    for obs in dataset:
        primary, secondary = observed_ips(obs)
        ranking = ip_fingerprint_match(primary, secondary, db, use_primary=not args.no_primary)
        top = ranking[0] if ranking else (None, 0.0)
        rank = next((k + 1 for k, (site, _) in enumerate(ranking) if site == obs.label), None)
        correct += top[0] == obs.label
        results.append({"label": obs.label, "top1": top[0], "score": top[1], "rank": rank})
    _write_json({
        "use_primary": not args.no_primary,
        "observations": len(results),
        "top1_accuracy": correct / len(results),
        "results": results,
    }, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wfbench", description="Website-fingerprinting attack and defense workbench.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset and sidecar files")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--flows", type=_int_pair, default=(4, 12), metavar="LO:HI")
    p.add_argument("--packets", type=_int_pair, default=(4, 60), metavar="LO:HI")
    p.add_argument("--google-fraction", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--first-party-overlap", type=float, default=None)
    p.add_argument("--fixed-structure", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("defend", help="apply network-layer defenses to a trace dataset")
    p.add_argument("--defense", action="append", required=True,
                   choices=["front", "pad-sizes", "pad-total", "hide-timings"],
                   help="repeat to chain defenses in order")
    p.add_argument("--nc", type=int, default=1300)
    p.add_argument("--ns", type=int, default=1300)
    p.add_argument("--wmin", type=float, default=0.2)
    p.add_argument("--wmax", type=float, default=3.0)
    p.add_argument("--dummy-size", type=int, default=net.QUIC_MAX_PAYLOAD)
    p.add_argument("--target", type=int, default=net.QUIC_MAX_PAYLOAD)
    p.add_argument("--quantum", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("view", help="reduce traces to what a constrained adversary sees")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--as", dest="as_id", metavar="ASN")
    which.add_argument("--netflow-n", type=int)
    which.add_argument("--google", action="store_true")
    which.add_argument("--party", choices=[app.FIRST, app.THIRD], help="filter resource logs by party")
    p.add_argument("--paths")
    p.add_argument("--netflow-pad", type=_int_pair, metavar="BYTES:PACKETS")
    p.add_argument("--owners")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_view)

    p = sub.add_parser("appdefend", help="apply application-layer defenses to resource logs")
    p.add_argument("--defense", required=True, choices=["pad-resources", "pad-total", "dummies"])
    p.add_argument("--n", type=int)
    p.add_argument("--no-pad-requests", action="store_true")
    p.add_argument("--p", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--pool")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_appdefend)

    p = sub.add_parser("evaluate", help="cross-validate the attack on traces or resource logs")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-features", default="sqrt")
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--seed", type=int, default=0)
    timing = p.add_mutually_exclusive_group()
    timing.add_argument("--discard-timings", dest="discard_timings", action="store_true", default=None)
    timing.add_argument("--keep-timings", dest="discard_timings", action="store_false")
    p.add_argument("-i", "--input", action="append", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--report-csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ipfp", help="rank sites by observed IP addresses")
    p.add_argument("--db", required=True)
    p.add_argument("--no-primary", action="store_true")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_ipfp)

    p = sub.add_parser("run", help="run an experiment described by a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InvalidInput as exc:
        print(f"wfbench: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StageError, ValueError, ArithmeticError, OSError) as exc:
        print(f"wfbench: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
