"""``del`` command line: gen-data, train, eval, protocol, explain, br.

Settings come from an optional TOML/JSON ``--config`` file with sections
``[train]`` (TrainConfig fields) and ``[generator]`` (GeneratorConfig
fields); explicit flags win.  ``DEL_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from .data import Dataset, SchemaError, load_dataset, save_jsonl
from .rules import RuleError, dumps_ruleset, load_ruleset
from .synth import GeneratorConfig, br_classify, generate, preset, synthetic_ruleset
from .trainer import (
    TOOL_VERSION, ConfigError, Metrics, Prepared, TrainConfig, _better, closed_open_protocol,
    config_hash, evaluate, format_protocol, load_model, load_snapshot, train, write_json_atomic,
)

log = logging.getLogger("delearn")

DATA_FILE = "data.jsonl"
SCHEMA_FILE = "schema.json"
RULES_FILE = "expert.rules"
MANIFEST = "manifest.json"


class CLIError(Exception):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise CLIError(f"config file not found: {path}")
    if path.suffix == ".json":
        cfg = json.loads(path.read_text())
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        cfg = tomllib.loads(path.read_text())
    unknown = set(cfg) - {"train", "generator"}
    if unknown:
        raise CLIError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _train_config(args, cfg: dict) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    base = TrainConfig.desk() if args.desk_scale else TrainConfig()
    tc = replace(base, **TrainConfig.from_dict({**base.to_dict(), **section}).to_dict())
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.workers is not None:
        over["workers"] = args.workers
    if args.no_assess:
        over["use_assess"] = False
    if args.no_critical_loss:
        over["critical_weight"] = 0.0
    if getattr(args, "acc_threshold", None) is not None:
        over["acc_threshold"] = args.acc_threshold
    return replace(tc, **over)


def _gen_config(args, cfg: dict) -> GeneratorConfig:
    section = dict(cfg.get("generator", {}))
    names = {f.name for f in fields(GeneratorConfig)}
    unknown = set(section) - names
    if unknown:
        raise CLIError(f"unknown generator keys: {sorted(unknown)}")
    if args.n is not None:
        section["n_samples"] = args.n
    if args.seed is not None:
        section["seed"] = args.seed
    for k in ("true_theta", "expert_theta", "seq_length_range", "value_hi"):
        if k in section and section[k] is not None:
            section[k] = tuple(section[k])
    return preset(args.preset, **section)


def _manifest(out: Path, command: str, config: dict, extra=None) -> None:
    body = {"command": command, "config": config, "config_hash": config_hash(config), "tool_version": TOOL_VERSION}
    body.update(extra or {})
    write_json_atomic(out / MANIFEST, body)


def _check_out(out: Path, names, force: bool) -> None:
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise CLIError(f"{out} already holds {', '.join(clash)}; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise CLIError(f"dataset not found: {path}")
    return load_dataset(path)


def _rules_for(args, ds: Dataset):
    path = Path(args.rules) if args.rules else Path(args.data) / RULES_FILE
    if not path.is_file():
        raise CLIError(f"rule file not found: {path}")
    return load_ruleset(path, ds.schema)


def _emit(args, obj, text: str) -> None:
    print(json.dumps(obj, sort_keys=True) if args.json else text)


def _metrics_text(m: Metrics) -> str:
    rows = [(k, v) for k, v in m.to_dict().items()]
    return "\n".join(f"{k:22s} {v:.4f}" if isinstance(v, float) else f"{k:22s} {v}" for k, v in rows)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    gcfg = _gen_config(args, load_config(args.config))
    out = Path(args.out)
    _check_out(out, (DATA_FILE, SCHEMA_FILE, RULES_FILE, MANIFEST), args.force)
    ds = generate(gcfg)
    save_jsonl(ds, out / DATA_FILE)
    ds.schema.save(out / SCHEMA_FILE)
    (out / RULES_FILE).write_text(dumps_ruleset(synthetic_ruleset(gcfg.expert_theta)))
    n_pos = int((ds.labels == 1).sum())
    _manifest(out, "gen-data", {"preset": args.preset, "generator": asdict(gcfg)},
              {"n_samples": len(ds), "n_positive": n_pos})
    _emit(args, {"out": str(out), "n_samples": len(ds), "n_positive": n_pos},
          f"wrote {len(ds)} samples ({n_pos} positive) to {out}")
    return 0


def cmd_train(args) -> int:
    tc = _train_config(args, load_config(args.config))
    ds = _dataset(args.data)
    rules = _rules_for(args, ds)
    out = Path(args.out)
    _check_out(out, (MANIFEST, "best.json", "metrics.jsonl"), args.force)
    if args.restarts < 1:
        raise CLIError("--restarts must be >= 1")

    def show(rec):
        if args.json:
            print(json.dumps(rec, sort_keys=True), flush=True)
        else:
            print(
                f"step {rec['step']:6d}  acc {rec['accuracy']:.4f}  recall {rec['recall']:.4f}  "
                f"recall' {rec['recall_prime']:+.4f}  fn {rec['false_neg']}  fp {rec['false_pos']}",
                flush=True,
            )

    best, best_run = None, None
    for r in range(args.restarts):
        cfg_r = replace(tc, seed=tc.seed + r)
        run_dir = out if args.restarts == 1 else out / f"run_{r}"
        res = train(cfg_r, ds, rules, out_dir=run_dir, on_validation=show)
        m = Metrics.from_dict(res.best["metrics"])
        if best is None or _better(m, Metrics.from_dict(best["metrics"])):
            best, best_run = res.best, r
    if best is None:
        return 1
    if args.restarts > 1:
        write_json_atomic(out / "best.json", best)
        _manifest(out, "train", {"train": tc.to_dict(), "restarts": args.restarts}, {"best_run": best_run})
    m = Metrics.from_dict(best["metrics"])
    _emit(args, {"best_step": best["step"], "metrics": m.to_dict()},
          f"best snapshot: step {best['step']}  recall' {m.recall_prime:+.4f}  accuracy {m.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    snap = load_snapshot(args.snapshot)
    ds = _dataset(args.data)
    m = evaluate(snap, ds, args.acc_threshold)
    _emit(args, m.to_dict(), _metrics_text(m))
    return 0


def cmd_br(args) -> int:
    ds = _dataset(args.data)
    rules = _rules_for(args, ds)
    thr = 0.925 if args.acc_threshold is None else args.acc_threshold
    m = br_classify(rules, ds, acc_threshold=thr)
    _emit(args, m.to_dict(), _metrics_text(m))
    return 0


def cmd_protocol(args) -> int:
    tc = _train_config(args, load_config(args.config))
    a, b = _dataset(args.data), _dataset(args.other)
    rules = _rules_for(args, a)
    thr = (args.acc_a, args.acc_b)
    report = closed_open_protocol(a, b, rules, tc, (args.name_a, args.name_b), thr)
    if args.out:
        out = Path(args.out)
        _check_out(out, ("protocol.json", MANIFEST), args.force)
        write_json_atomic(out / "protocol.json", report)
        _manifest(out, "protocol", {"train": tc.to_dict(), "thresholds": list(thr)})
    _emit(args, report, format_protocol(report))
    return 0


def cmd_explain(args) -> int:
    snap = load_snapshot(args.snapshot)
    ds = _dataset(args.data)
    if not 0 <= args.sample < len(ds):
        raise CLIError(f"unknown sample id {args.sample} (dataset has {len(ds)} samples)")
    model, schema = load_model(snap)
    if schema.names != ds.schema.names:
        raise CLIError("snapshot schema does not match the dataset schema")
    prep = Prepared.build(model.net.rules, ds.subset([args.sample]))
    rec = model.explain(prep.dataset[0], prep.tables[0])
    rec["sample_id"] = args.sample
    if args.json:
        print(json.dumps(rec, sort_keys=True))
        return 0
    verdict = "fails" if rec["predicted_label"] == 1 else "complies"
    print(f"sample {args.sample}: predicted {verdict} (score {rec['score']:+.4f}, label {rec['label']:+d})")
    for leaf in rec["leaves"]:
        mark = "VIOLATED" if leaf["violated"] else "ok"
        op = "<" if leaf["direction"] == "below" else ">"
        print(f"  {leaf['measurement']:4s} {leaf['query']:45s} f={leaf['f']:8.3f}  needs {op} {leaf['theta']:.3f}  {mark}")
    print(f"  critical rows: {rec['critical_rows']}")
    if rec["masked_rows"]:
        print(f"  masked rows:   {rec['masked_rows']}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--workers", type=int, help="search worker threads")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--desk-scale", action="store_true", help="3000-step schedule")
    training.add_argument("--no-assess", action="store_true", help="masks fixed to all ones")
    training.add_argument("--no-critical-loss", action="store_true", help="critical-row loss weight 0")
    training.add_argument("--acc-threshold", type=float)
    training.add_argument("--rules", help="rule file (default: DATA/expert.rules)")

    p = argparse.ArgumentParser(prog="del", description="Rule threshold learning with data assessment")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--preset", choices=("gen", "spe", "clean"), default="gen")
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common, training], help="train and save snapshots")
    t.add_argument("data", help="dataset directory or data.jsonl")
    t.add_argument("-o", "--out", required=True)
    t.add_argument("--restarts", type=int, default=1, help="independent runs with seeds seed..seed+R-1")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a snapshot on a dataset")
    e.add_argument("snapshot")
    e.add_argument("data")
    e.add_argument("--acc-threshold", type=float)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("br", parents=[common], help="raw-rule baseline")
    b.add_argument("data")
    b.add_argument("--rules")
    b.add_argument("--acc-threshold", type=float)
    b.set_defaults(func=cmd_br)

    pr = sub.add_parser("protocol", parents=[common, training], help="closed and open tests")
    pr.add_argument("data", help="dataset A")
    pr.add_argument("other", help="dataset B")
    pr.add_argument("--name-a", default="A")
    pr.add_argument("--name-b", default="B")
    pr.add_argument("--acc-a", type=float, default=0.925)
    pr.add_argument("--acc-b", type=float, default=0.5)
    pr.add_argument("-o", "--out")
    pr.set_defaults(func=cmd_protocol)

    x = sub.add_parser("explain", parents=[common], help="per-leaf breakdown of one sample")
    x.add_argument("snapshot")
    x.add_argument("data")
    x.add_argument("sample", type=int, help="sample index in the dataset")
    x.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DEL_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, SchemaError, RuleError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
