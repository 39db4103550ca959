"""Command-line entry point: ``mome {train,ablate,stats,pca}``.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 missing or
empty data. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigError, ContractError, DataError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .bench.train import run_experiment

    cfg = _load_config(args)
    exp = run_experiment(cfg, cfg.out_dir)
    final = exp.snapshots[-1].evaluation
    print(json.dumps({"out_dir": cfg.out_dir, "steps": exp.step, "mean_loss": final.mean_loss}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .bench.ablation import check_variants, run_ablation, summarise, table_header

    variants = check_variants([v.strip() for v in (args.variants or "").split(",") if v.strip()])
    cfg = _load_config(args)
    seeds = [cfg.seed + i for i in range(args.n_seeds)]
    rows = run_ablation(cfg, variants, seeds)
    table = summarise(rows)
    text = _csv_text(table_header(cfg.data.groups), [[v] + [_fmt(x) for x in per] + [_fmt(avg)]
                                                     for v, per, avg in table])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(text, newline="")
    detail = [[r.seed, r.variant] + [_fmt(r.group_loss[g]) for g in sorted(r.group_loss)]
              + [_fmt(r.avg), _fmt(r.fraction_variance()), r.stream_hash] for r in rows]
    head = ["seed"] + table_header(cfg.data.groups) + ["fraction_var", "stream_hash"]
    (out / "ablation_runs.csv").write_text(_csv_text(head, detail), newline="")
    sys.stdout.write(text)
    return EXIT_OK


def _read_jsonl(path: Path) -> list[dict]:
    if not path.is_file():
        raise DataError(f"missing {path}")
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{n}: bad JSON ({exc})") from None
    return out


def routing_tables(records: list[dict], task_group: dict[int, str] | None = None):
    """Per-layer ``(tasks, experts)`` frequency matrices and group/expert NMI.

    Uses only the records of the latest step present.
    """
    from .bench.analysis import nmi_from_table

    if not records:
        raise DataError("no routing records")
    last = max(r["step"] for r in records)
    recs = [r for r in records if r["step"] == last]
    K = max(max(len(r["logits"]) for r in recs), max(r["expert"] for r in recs) + 1)
    tasks = sorted(task_group) if task_group else sorted({r["task"] for r in recs})
    groups = None if task_group is None else sorted(set(task_group.values()))
    layers = sorted({r["layer"] for r in recs})
    out = {}
    for layer in layers:
        counts = np.zeros((len(tasks), K))
        for r in recs:
            if r["layer"] == layer:
                counts[tasks.index(r["task"]), r["expert"]] += 1
        tot = counts.sum(axis=1, keepdims=True)
        freq = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
        if groups is None:
            table = counts
        else:
            table = np.zeros((len(groups), K))
            for i, t in enumerate(tasks):
                table[groups.index(task_group[t])] += counts[i]
        out[layer] = (freq, nmi_from_table(table))
    return last, tasks, out


def _task_groups(run: Path) -> dict[int, str] | None:
    p = run / "tasks.json"
    if not p.is_file():
        return None
    return {int(t["task"]): t["group"] for t in json.loads(p.read_text())}


def cmd_stats(args) -> int:
    run = Path(args.run_dir)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    tg = _task_groups(run)
    last, tasks, tables = routing_tables(_read_jsonl(run / "routing.jsonl"), tg)
    summary = {"step": last, "nmi": {}}
    for layer, (freq, score) in tables.items():
        K = freq.shape[1]
        rows = [[t, "" if tg is None else tg[t]] + [_fmt(v) for v in freq[i]] for i, t in enumerate(tasks)]
        (out / f"routing_layer{layer}.csv").write_text(
            _csv_text(["task", "group"] + [f"expert{k}" for k in range(K)], rows), newline="")
        summary["nmi"][str(layer)] = score
    imp_path = run / "importance.jsonl"
    if imp_path.is_file():
        recs = _read_jsonl(imp_path)
        if recs:
            step = max(r["step"] for r in recs)
            acc: dict[int, list] = defaultdict(list)
            for r in recs:
                if r["step"] == step:
                    acc[r["task"]].append(r["importance"])
            N = len(next(iter(acc.values()))[0])
            rows = [[t, "" if tg is None else tg.get(t, "")] + [_fmt(v) for v in np.mean(acc[t], axis=0)]
                    for t in sorted(acc)]
            (out / "importance.csv").write_text(
                _csv_text(["task", "group"] + [f"vision{k}" for k in range(N)], rows), newline="")
            summary["importance_step"] = step
    (out / "nmi.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_pca(args) -> int:
    from .bench.analysis import pca_project
    from .bench.tasks import GROUPS

    run = Path(args.run_dir)
    path = run / "features.npz"
    if not path.is_file():
        raise DataError(f"missing cached features {path}")
    if args.modality not in ("vision", "instruction"):
        raise ConfigError(f"unknown modality {args.modality!r}; expected vision or instruction", ["modality"])
    with np.load(path) as data:
        X, groups = data[args.modality], data["group"]
    if len(X) < 2:
        raise DataError(f"PCA needs at least 2 samples, found {len(X)}")
    proj = pca_project(X, dims=2)
    k = proj.points.shape[1]
    if k == 0:
        raise DataError("features have zero variance")
    rows = [[GROUPS[int(g)]] + [_fmt(v) for v in p] for g, p in zip(groups, proj.points)]
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    name = f"pca_{args.modality}.csv"
    (out / name).write_text(_csv_text(["task_group"] + [f"pc{i + 1}" for i in range(k)], rows), newline="")
    print(json.dumps({"file": str(out / name), "components": k, "rank_deficient": proj.rank_deficient,
                      "variances": proj.variances.tolist()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mome", description="Mixture-of-experts toy benchmark.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run both training stages and write a run directory")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train a list of variants on paired seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", required=True, help="comma-separated variant names")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.add_argument("--n-seeds", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("stats", help="routing histograms, importance and NMI from a run")
    s.add_argument("run_dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    c = sub.add_parser("pca", help="2-D PCA scatter of cached features")
    c.add_argument("run_dir")
    c.add_argument("--modality", default="vision")
    c.add_argument("--out")
    c.set_defaults(func=cmd_pca)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), fields=exc.fields)
    except DivergenceError as exc:
        return _fail(EXIT_NUMERIC, "divergence", str(exc), record=exc.record)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (DataError, ContractError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))


if __name__ == "__main__":
    sys.exit(main())
