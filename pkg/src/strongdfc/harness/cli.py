"""Command line entry point: ``strongdfc {train,pretrain,verify,gen-data}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import TeacherSpec, generate_student_teacher
from ..errors import StrongDFCError
from .config import load_config
from .train import load_data, pretrain_feedback, save_params, train
from .verify import verify


def _cmd_train(args):
    cfg = load_config(args.config)
    path = train(cfg, out_dir=args.out)
    print(path)
    return 0


def _cmd_pretrain(args):
    cfg = load_config(args.config)
    out = Path(args.out or cfg["run.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    res = pretrain_feedback(cfg, data=load_data(cfg))
    save_params(out / "pretrained.npz", res.params)
    (out / "pretrain.json").write_text(json.dumps(
        {"ratios": [float(r) for r in res.ratios], "converged": res.converged,
         "warning": res.warning}, indent=2) + "\n")
    print(out / "pretrained.npz")
    return 0


def _cmd_verify(args):
    seed, out_dir = 0, Path(".")
    if args.config:
        cfg = load_config(args.config)
        seed, out_dir = cfg["run.seed"], Path(cfg["run.out_dir"])
    out = Path(args.out) if args.out else out_dir / "verify_report.json"
    path, ok = verify(out, seed=seed, corrupt_gradient=args.corrupt_gradient)
    report = json.loads(path.read_text())
    for r in report:
        print(f"{r['status'].upper():4s} {r['check']}: {r['measured']:.3e} (tol {r['tolerance']:.1e})")
    if not ok:
        failed = [r["check"] for r in report if r["status"] != "pass"]
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
    return 0 if ok else 1


def _cmd_gen_data(args):
    sizes = tuple(int(s) for s in args.sizes.split(","))
    ds = generate_student_teacher(TeacherSpec(sizes=sizes, seed=args.teacher_seed), args.samples,
                                  args.data_seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, inputs=ds.inputs, targets=ds.targets)
    print(out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="strongdfc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and write metrics.csv")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: run.out_dir)")
    t.set_defaults(func=_cmd_train)

    pt = sub.add_parser("pretrain", help="pre-train feedback weights, save pretrained.npz")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out")
    pt.set_defaults(func=_cmd_pretrain)

    v = sub.add_parser("verify", help="run the invariant suite and write a JSON report")
    v.add_argument("--config")
    v.add_argument("--out", help="report path (default: <run.out_dir>/verify_report.json)")
    v.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=_cmd_verify)

    g = sub.add_parser("gen-data", help="write a student-teacher dataset as .npz")
    g.add_argument("--teacher-seed", type=int, required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--sizes", default="30,10,10,10,5")
    g.add_argument("--data-seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StrongDFCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
