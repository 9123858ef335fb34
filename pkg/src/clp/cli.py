"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``report``.

Every command reads the same config file and works inside
``<output_dir>/<run_name>``; ``--out`` replaces ``output_dir``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

from . import pipeline
from .checkpoint import read_checkpoint, write_checkpoint
from .config import load_config
from .errors import CLPError, ConfigError, ContractError
from .evalreport import evaluate, report_emit, saliency_map
from .ioutil import atomic_write_text
from .synthdata import read_container, write_container

log = logging.getLogger("clp")

SPLITS = ("train", "meta", "test")


def _run_dir(cfg, args):
    path = os.path.join(args.out or cfg.run.output_dir, cfg.run.run_name)
    os.makedirs(path, exist_ok=True)
    return path


def _load_splits(run_dir, names=SPLITS):
    out = {}
    for name in names:
        path = os.path.join(run_dir, f"{name}.clpd")
        if not os.path.exists(path):
            raise ContractError(f"missing {path}; run 'synth' first")
        out[name] = read_container(path)
    return out


def cmd_synth(cfg, args):
    run_dir = _run_dir(cfg, args)
    data = pipeline.build_datasets(cfg)
    for name in SPLITS:
        write_container(data[name], os.path.join(run_dir, f"{name}.clpd"))
    print("split  class  background  count")
    for name in SPLITS:
        for k, b, n in pipeline.group_table(data[name], cfg.data.backgrounds):
            print(f"{name:<6} {k:>5}  {b:>10}  {n:>5}")
    return 0


def cmd_train(cfg, args):
    run_dir = _run_dir(cfg, args)
    data = _load_splits(run_dir, ("train", "meta"))
    ck, hist, meta = pipeline.run_mode(cfg, args.mode, data)
    if meta is not None:
        log.info("metadata size used for training: %d", len(meta))
    ck.info["config"] = cfg.to_dict()
    write_checkpoint(os.path.join(run_dir, f"{args.mode}.clpw"), ck)
    atomic_write_text(os.path.join(run_dir, f"{args.mode}_history.csv"), hist.to_csv())
    print(f"{args.mode}: {ck.info['iters']} iterations, final train loss "
          f"{hist.train_loss[-1] if hist.train_loss else float('nan'):.4f}")
    return 0


def cmd_eval(cfg, args):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    run_dir = _run_dir(cfg, args)
    ck = read_checkpoint(args.checkpoint)
    test = _load_splits(run_dir, ("test",))["test"]
    ck.check_compatible(3 * test.height * test.width, test.num_classes)
    idx = cfg.eval.saliency_indices
    bad = [i for i in idx if not 0 <= i < len(test)]
    if bad:
        raise ContractError(f"saliency indices {bad} out of range; valid range is "
                            f"0..{len(test) - 1}")
    report = evaluate(ck.clf, test)
    maps = {i: saliency_map(ck.clf, test[i]) for i in idx}
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    extra = {"config": cfg.to_dict(), "checkpoint": {k: v for k, v in ck.info.items()
                                                     if k != "config"}}
    report_emit(report, None, os.path.join(run_dir, f"{stem}_"), maps, extra)
    print(f"{stem}: top1 {report.top1_acc:.4f}  worst-group {report.worst_group_acc:.4f}")
    return 0


REPORT_COLUMNS = ("name", "top1_acc", "worst_group_acc", "macro_precision", "n_eval")


def cmd_report(cfg, args):
    """Tabulate every ``*_metrics.json`` in the run directory."""
    run_dir = _run_dir(cfg, args)
    rows = []
    for fname in sorted(os.listdir(run_dir)):
        if fname.endswith("_metrics.json"):
            with open(os.path.join(run_dir, fname), encoding="utf-8") as fh:
                m = json.load(fh)
            rows.append({"name": fname[:-len("_metrics.json")],
                         **{c: m[c] for c in REPORT_COLUMNS[1:]}})
    if not rows:
        raise ContractError(f"no metrics files in {run_dir}; run 'eval' first")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(os.path.join(run_dir, "report.csv"), buf.getvalue())
    atomic_write_text(os.path.join(run_dir, "report.json"),
                      json.dumps({"runs": rows}, sort_keys=True, indent=2) + "\n")
    sys.stdout.write(buf.getvalue())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="clp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, metavar="PATH")
        s.add_argument("--out", metavar="DIR")
        if name == "train":
            s.add_argument("--mode", choices=pipeline.MODES, default="clp")
        if name == "eval":
            s.add_argument("--checkpoint", required=True, metavar="PATH")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (CLPError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
