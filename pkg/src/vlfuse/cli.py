"""``vlfuse`` command line: gen, train, eval, ablate, export-attn,
export-saliency, gradcheck.  Flags override values from ``--config``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .gradcheck import FD_STEP, TOLERANCE, run_gradcheck


def _floats(s):
    return [float(x) for x in s.split(",")] if s else None


def _ints(s):
    return [int(x) for x in s.split(",")] if s else None


def _load(args) -> harness.RunConfig:
    rc = harness.RunConfig.load(args.config) if getattr(args, "config", None) else harness.RunConfig()
    if getattr(args, "data", None):
        rc.dataset = args.data
    train_flags = {"epochs": "epochs", "lr": "lr", "batch_size": "batch_size", "delta": "delta",
                   "decay": "decay", "shift_epoch": "shift_epoch", "seed": "seed",
                   "fusion_mode": "fusion_mode", "intermediate_layer": "intermediate_layer"}
    for flag, key in train_flags.items():
        v = getattr(args, flag, None)
        if v is not None:
            rc.train[key] = v
    if getattr(args, "peft", False):
        rc.train["peft"] = True
    return rc


def _add_train_flags(p):
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--shift-epoch", dest="shift_epoch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fusion-mode", dest="fusion_mode")
    p.add_argument("--intermediate-layer", dest="intermediate_layer", type=int)
    p.add_argument("--peft", action="store_true", help="train only projectors and P1/P2")


def build_parser():
    ap = argparse.ArgumentParser(prog="vlfuse")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-eval", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--relation-amplitude", type=float)
    g.add_argument("--n-relations", type=int)
    g.add_argument("--layers", help="comma-separated encoder layers to emit")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train one run")
    _add_train_flags(t)
    t.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "eval"], default="eval")
    e.add_argument("--out")
    e.add_argument("--force-inactive", action="store_true")

    a = sub.add_parser("ablate", help="train one run per grid point")
    _add_train_flags(a)
    a.add_argument("--out")
    a.add_argument("--grid-delta")
    a.add_argument("--grid-decay")
    a.add_argument("--grid-shift-epoch")
    a.add_argument("--grid-fusion", help="e.g. average,add,concat,weighted-average:0.9:0.1")
    a.add_argument("--grid-source")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--controls", action="store_true")

    for name in ("export-attn", "export-saliency"):
        x = sub.add_parser(name)
        x.add_argument("--checkpoint", required=True)
        x.add_argument("--data", required=True)
        x.add_argument("--sample", required=True)
        x.add_argument("--out", required=True)
        if name == "export-saliency":
            x.add_argument("--top-k", type=int, default=2)

    gc = sub.add_parser("gradcheck", help="finite-difference gate")
    gc.add_argument("--tol", type=float, default=TOLERANCE)
    gc.add_argument("--eps", type=float, default=FD_STEP)
    return ap


def _fusion_list(s):
    # weights use ':' between values on the command line to survive the ',' split
    if not s:
        return None
    out = []
    for tok in s.split(","):
        mode, _, w = tok.partition(":")
        out.append(f"{mode}:{w.replace(':', ',')}" if w else mode)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.cmd == "gen":
        rc = harness.RunConfig.load(args.config) if args.config else harness.RunConfig()
        if args.n_train is not None:
            rc.n_train = args.n_train
        if args.n_eval is not None:
            rc.n_eval = args.n_eval
        if args.seed is not None:
            rc.data_seed = args.seed
        if args.relation_amplitude is not None:
            rc.generator["relation_amplitude"] = args.relation_amplitude
        if args.n_relations is not None:
            rc.generator["n_relations"] = args.n_relations
        if args.layers:
            rc.generator["layers"] = _ints(args.layers)
        index = harness.cmd_gen(rc, args.out, force=args.force)
        print(json.dumps({"train": len(index["train"]), "eval": len(index["eval"])}))
        return 0

    if args.cmd == "train":
        rc = _load(args)
        _, records = harness.cmd_train(rc, args.out)
        for r in records:
            print(json.dumps(r, sort_keys=True))
        return 0

    if args.cmd == "eval":
        result = harness.cmd_eval(args.checkpoint, args.data, args.split, args.out,
                                  args.force_inactive)
        print(json.dumps(result, sort_keys=True))
        return 0

    if args.cmd == "ablate":
        rc = _load(args)
        grid = dict(rc.grid)
        for key, val in (("delta", _floats(args.grid_delta)), ("decay", _floats(args.grid_decay)),
                         ("shift_epoch", _ints(args.grid_shift_epoch)),
                         ("fusion", _fusion_list(args.grid_fusion)),
                         ("source", _ints(args.grid_source))):
            if val:
                grid[key] = val
        rc.grid = grid
        result = harness.cmd_ablate(rc, args.out, jobs=args.jobs, controls=args.controls)
        failed = [r for r in result["summary"] if r["status"] != "ok"]
        print(f"{len(result['summary'])} grid points, {len(failed)} failed")
        return 0

    if args.cmd == "export-attn":
        s = harness.cmd_export_attn(args.checkpoint, args.data, args.sample, args.out)
        print(json.dumps(s))
        return 0

    if args.cmd == "export-saliency":
        s = harness.cmd_export_saliency(args.checkpoint, args.data, args.sample, args.out,
                                        args.top_k)
        print(json.dumps({k: v["entropy"] for k, v in s["layers"].items()}))
        return 0

    if args.cmd == "gradcheck":
        lines = run_gradcheck(args.eps, args.tol)
        for line in lines:
            print(line)
        bad = [l for l in lines if not l.ok]
        print(f"{len(lines) - len(bad)}/{len(lines)} checks passed")
        return 1 if bad else 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
