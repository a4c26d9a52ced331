"""``fedstream`` command line.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 model kind/schema mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Iterator

from fedstream.featurizer import (
    FeatureSchema,
    SchemaError,
    default_schema,
    feeds_from_config,
    numeric_schema,
    parse_record,
)
from fedstream.federation import CommunityConfig, FileDropClient, FileDropTransport, SharingSchedule
from fedstream.model_core import (
    ArchMismatch,
    ClassLabel,
    EnvelopeFormatError,
    KindMismatch,
    MergeWeights,
    MixedKinds,
    ModelEnvelope,
    SchemaMismatch,
    WeightArityMismatch,
    describe,
    export,
    load_model,
    merge,
)
from fedstream.dag_pipeline import FeedbackEvent, FeedbackStore, PipelineConfig, make_model, run_stream

log = logging.getLogger("fedstream")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigError(Exception):
    pass


def _read_config(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def schema_from_config(value, base: Path | None = None) -> FeatureSchema:
    """``"default"``, a schema file path, or ``{"numeric": n, "lo":..., "hi":..., "bins":...}``."""
    if value is None or value == "default":
        return default_schema()
    if isinstance(value, str):
        path = Path(value)
        if base is not None and not path.is_absolute():
            path = base / path
        try:
            return FeatureSchema.load(path)
        except OSError as exc:
            raise ConfigError(f"cannot read schema {path}: {exc}") from None
    if isinstance(value, dict) and "numeric" in value:
        return numeric_schema(int(value["numeric"]), float(value.get("lo", 0.0)), float(value.get("hi", 1.0)),
                              int(value.get("bins", 32)))
    if isinstance(value, dict) and "features" in value:
        return FeatureSchema.from_json(json.dumps(value))
    raise ConfigError(f"unrecognized schema setting {value!r}")


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8")


# ---------------------------------------------------------------------------
# run

def _load_spool(path: str, org: str) -> dict[str, list[FeedbackEvent]]:
    pending: dict[str, list[FeedbackEvent]] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if d.get("org", org) != org:
                    continue
                ev = FeedbackEvent(str(d["record"]), ClassLabel.parse(d["label"]), str(d.get("operator", "cli")),
                                   int(d.get("ts", 0)))
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{path}:{n}: bad feedback entry ({exc})") from None
            pending.setdefault(ev.record_id, []).append(ev)
    return pending


def _with_feedback(lines: Iterator[str], store: FeedbackStore, pending: dict[str, list[FeedbackEvent]],
                   fmt: str) -> Iterator[str]:
    """Replay spooled feedback right after the labeled record has been processed."""
    last: str | None = None
    for line in lines:
        if last is not None:
            _submit(store, pending.pop(last, ()))
        yield line
        if not pending:
            last = None
            continue
        try:
            last = parse_record(line, fmt).record_id
        except ValueError:
            last = None
    if last is not None:
        _submit(store, pending.pop(last, ()))


def _submit(store: FeedbackStore, events) -> None:
    for ev in events:
        try:
            store.submit(ev)
        except (KeyError, ValueError) as exc:
            log.warning("feedback dropped: %s", exc)


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    cfg = _read_config(args.config)
    try:
        schema = schema_from_config(cfg.get("schema"), cfg_path.parent)
        kind = cfg.get("model_kind", "nb")
        params = dict(cfg.get("model_params", {}))
        if args.seed is not None and kind in ("mlp", "forest"):
            params["init_seed" if kind == "mlp" else "seed"] = args.seed
        org = str(cfg.get("org_id", "local"))
        community = None
        if cfg.get("every_n_records"):
            community = CommunityConfig(cfg.get("community_id", "community"),
                                        [(o, 1.0) for o in cfg.get("members", [org])], kind,
                                        SharingSchedule(int(cfg["every_n_records"])),
                                        schema_hash=schema.digest)
        pcfg = PipelineConfig(schema, kind, params, community, int(cfg.get("window", 1000)),
                              float(cfg.get("threshold", 0.5)), int(cfg.get("retention", 100_000)),
                              feeds_from_config(cfg.get("label_feeds", [])), cfg.get("input_format", "jsonl"))
        model = make_model(kind, schema, params)
    except (TypeError, ValueError, KeyError, SchemaError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    if args.model:
        env = ModelEnvelope.from_bytes(Path(args.model).read_bytes())
        model = load_model(env)
        if model.kind != kind:
            raise KindMismatch(f"starting model is {model.kind}, config wants {kind}")
    store = FeedbackStore(pcfg.retention)
    pending = _load_spool(args.feedback, org) if args.feedback else {}
    client = None
    if community is not None and cfg.get("share_dir"):
        share_dir = Path(cfg["share_dir"])
        if not share_dir.is_absolute():
            share_dir = cfg_path.parent / share_dir
        client = FileDropClient(FileDropTransport(share_dir, community.community_id), community)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(args.input, encoding="utf-8") as src, open(out / "alerts.jsonl", "w", encoding="utf-8") as alerts:
        def sink(alert: dict) -> None:
            alerts.write(json.dumps(alert, sort_keys=True) + "\n")

        lines = _with_feedback((ln for ln in src if ln.strip()), store, pending, pcfg.input_format)
        report, model = run_stream(lines, pcfg, model, client, org, store, sink)
    _write(out / "report.txt", report.to_text())
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "model.env", export(model, org, len(report.rounds)).to_bytes())
    for name, count in sorted(report.counters.items()):
        if count:
            log.warning("%s: %d", name, count)
    print(f"processed {report.records_processed} records, {report.alerts} alerts -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / gen-data

def _synthetic(cfg: dict, seed: int | None):
    from fedstream.simulator import SyntheticConfig

    exp_keys = ("model_kind", "model_params", "every_n_records", "heldout_records", "window", "trust", "sequential")
    syn = {k: v for k, v in cfg.items() if k not in exp_keys}
    if seed is not None:
        syn["seed"] = seed
    try:
        return SyntheticConfig.from_dict(syn)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"experiment config: {exc}") from None


def cmd_simulate(args) -> int:
    from fedstream.federation import MessageBus
    from fedstream.simulator import run_experiment

    cfg = _read_config(args.config)
    syn = _synthetic(cfg, args.seed)
    bus = MessageBus()
    try:
        report = run_experiment(syn, cfg.get("model_kind", "nb"), cfg.get("model_params"),
                                int(cfg.get("every_n_records", 2000)), cfg.get("trust"),
                                int(cfg.get("heldout_records", 4000)), int(cfg.get("window", 1000)),
                                concurrent=not (args.sequential or cfg.get("sequential", False)), bus=bus)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"experiment config: {exc}") from None
    out = Path(args.out)
    _write(out / "report.txt", report.to_text())
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "metrics.jsonl", report.metrics_jsonl())
    bus.write_log(out / "messages.jsonl")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from fedstream.simulator import gen_heldout, gen_synthetic

    cfg = _read_config(args.config)
    syn = _synthetic(cfg, args.seed)
    out = Path(args.out)
    streams = gen_synthetic(syn)
    for o, s in enumerate(streams):
        _write(out / f"org{o}.jsonl", s.to_jsonl())
        _write(out / f"org{o}.truth.jsonl", "".join(
            json.dumps({"id": r.record_id, "truth": int(t), "pattern": int(p)}) + "\n"
            for r, t, p in zip(s.records, s.truth.tolist(), s.pattern.tolist())))
    held = gen_heldout(syn, int(cfg.get("heldout_records", 4000)))
    _write(out / "heldout.jsonl", held.to_jsonl())
    _write(out / "heldout.truth.jsonl", "".join(json.dumps({"id": r.record_id, "truth": int(t)}) + "\n"
                                                for r, t in zip(held.records, held.truth.tolist())))
    _write(out / "schema.json", syn.schema().to_json())
    print(f"wrote {len(streams)} streams of {syn.records_per_org} records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# merge / inspect / feedback

def cmd_merge(args) -> int:
    envs = [ModelEnvelope.from_bytes(Path(p).read_bytes()) for p in args.envelopes]
    weights = None
    if args.weights:
        try:
            raw = [float(w) for w in args.weights.split(",")]
            weights = MergeWeights(raw)
        except ValueError as exc:
            raise ConfigError(f"--weights: {exc}") from None
        if abs(sum(raw) - 1.0) > 1e-12:
            log.warning("weights %s do not sum to 1; normalized to %s", raw,
                        [round(w, 6) for w in weights.a.tolist()])
    merged = merge(envs, weights, seed=args.seed or 0, org_id=args.org)
    _write(Path(args.out), merged.to_bytes())
    print(f"merged {len(envs)} {merged.model_kind} envelopes -> {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    env = ModelEnvelope.from_bytes(Path(args.envelope).read_bytes())
    print("\n".join(describe(env)))
    return EXIT_OK


def cmd_feedback(args) -> int:
    try:
        label = ClassLabel.parse(args.label)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    entry = {"org": args.org, "record": args.record, "label": str(label), "operator": args.operator}
    path = Path(args.spool)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(f"queued feedback {args.record} -> {label} for {args.org}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedstream", description="Streaming, federated threat detection.",
                                allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help, allow_abbrev=False)
        sp.set_defaults(func=fn)
        return sp

    sp = add("run", cmd_run, "Run one organization's pipeline over a record file.")
    sp.add_argument("--config", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--model", help="start from this envelope instead of a fresh model")
    sp.add_argument("--feedback", help="feedback spool written by 'fedstream feedback'")
    sp.add_argument("--seed", type=int)

    sp = add("simulate", cmd_simulate, "Run an isolated-vs-federated experiment on synthetic streams.")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--sequential", action="store_true", help="lockstep single-thread mode")

    sp = add("merge", cmd_merge, "Merge model envelopes offline.")
    sp.add_argument("envelopes", nargs="+")
    sp.add_argument("--weights", help="comma-separated merge weights")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--org", default="merged")

    sp = add("inspect", cmd_inspect, "Print an envelope's header and parameter blocks.")
    sp.add_argument("envelope")

    sp = add("feedback", cmd_feedback, "Queue an operator label for a processed record.")
    sp.add_argument("--org", required=True)
    sp.add_argument("--record", required=True)
    sp.add_argument("--label", required=True)
    sp.add_argument("--operator", default="cli")
    sp.add_argument("--spool", default="feedback.jsonl")

    sp = add("gen-data", cmd_gen_data, "Write deterministic synthetic streams.")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    level = LOG_LEVELS.get(os.environ.get("FEDSTREAM_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="fedstream: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (KindMismatch, SchemaMismatch, MixedKinds, ArchMismatch, WeightArityMismatch) as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except EnvelopeFormatError as exc:
        log.error("bad envelope: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
