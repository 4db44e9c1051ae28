"""Command line entry point: ``lowbit-emotion <subcommand>``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 training failure. Outputs go under ``--out``, else ``$LOWBIT_EMOTION_OUT``,
else ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .data import CorpusError, SyntheticSpec, concat_pairs, gen_synthetic, make_pairs, split_sequences, \
    write_corpus
from .harness import ExperimentPlan, PlanError, TrainingFailure
from .nn import NonFiniteError, save_checkpoint
from .training import pretrain_srfcn, sr_reconstruct

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _plan_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", type=Path, help="JSON plan file (defaults apply when omitted)")
    p.add_argument("--variants", type=_str_list, help="override: e.g. HR,LR-8,Joint-8,Joint-OA")
    p.add_argument("--seeds", type=_int_list, help="override: e.g. 0,1,2")
    p.add_argument("--s-eval", type=_int_list, help="override: factors for Joint-OA evaluation")
    p.add_argument("--qp", type=_int_list, help="override: QP grid for rd-sweep")
    p.add_argument("--budget-scale", type=float, help="override: multiply iterations and epochs")
    p.add_argument("--profile", choices=sorted(harness.PROFILES), help="override: budget profile")
    p.add_argument("--data", type=Path, help="override: load an on-disk corpus instead of synthesizing")
    p.add_argument("--out", type=Path, help=f"output root (default ${harness.OUTPUT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lowbit-emotion", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic labelled face corpus to disk")
    g.add_argument("dest", type=Path)
    g.add_argument("--sequences", type=int, default=SyntheticSpec.n_sequences)
    g.add_argument("--frames", type=int, default=SyntheticSpec.frames_per_sequence)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=SyntheticSpec.noise_level)
    g.add_argument("--bits", type=int, choices=(8, 16), default=8)

    p = sub.add_parser("pretrain-sr", help="pretrain SR-FCN alone and compare it with bicubic")
    _plan_args(p)
    p.add_argument("--s", type=int, default=4)

    for name, text in (("train", "train and checkpoint every plan variant"),
                       ("eval", "score checkpoints on the test split"),
                       ("rd-sweep", "QP sweep over checkpoints, no retraining"),
                       ("report", "rebuild markdown grids from result CSVs"),
                       ("run", "train then eval")):
        _plan_args(sub.add_parser(name, help=text))
    return ap


def resolve_plan(args) -> ExperimentPlan:
    d = json.loads(ExperimentPlan.load(args.plan).to_json()) if args.plan else {}
    overrides = {"variants": args.variants, "seeds": args.seeds, "s_eval": args.s_eval, "qp_list": args.qp,
                 "budget_scale": args.budget_scale, "profile": args.profile}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.data is not None:
        d["corpus"] = {"path": str(args.data)}
    return ExperimentPlan.from_dict(d)


def _out(args) -> Path:
    root = args.out if args.out is not None else harness.output_root()
    root.mkdir(parents=True, exist_ok=True)
    return root


def cmd_gen_data(args) -> int:
    if args.sequences < 1 or args.frames < 1:
        raise PlanError("--sequences and --frames must be positive")
    seqs = gen_synthetic(SyntheticSpec(args.sequences, args.frames, args.seed, args.noise))
    write_corpus(seqs, args.dest, args.bits)
    print(f"wrote {len(seqs)} sequences to {args.dest}")
    return EXIT_OK


def cmd_pretrain_sr(args) -> int:
    plan = resolve_plan(args)
    root = _out(args)
    corpus, test = plan.split(plan.load_corpus())
    budget = plan.budget()
    train, _, _ = split_sequences(corpus, budget.val_fraction, 0.0, plan.seeds[0])
    tr = concat_pairs([make_pairs(q, args.s, target="hr") for q in train])
    te = concat_pairs([make_pairs(q, args.s, target="hr") for q in test])
    cfg = replace(budget.pretrain, s_pretrain=args.s)
    model, curve = pretrain_srfcn(tr, cfg, plan.seeds[0], budget.model)
    bicubic = float(np.mean((te.inputs - te.targets) ** 2))
    sr = float(np.mean((sr_reconstruct(model, te.inputs) - te.targets) ** 2))
    d = root / f"seed{plan.seeds[0]}" / f"SR-{args.s}"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "sr.ckpt", model, {"variant": f"SR-{args.s}", "seed": plan.seeds[0]})
    (d / "pretrain_curve.csv").write_text("iteration,loss\n" + "".join(f"{i},{v:.10g}\n" for i, v in enumerate(curve)))
    print(f"held-out MSE: bicubic {bicubic:.6f}  SR-FCN {sr:.6f}  gain {100 * (1 - sr / bicubic):.1f}%")
    return EXIT_OK


def cmd_train(args) -> int:
    plan = resolve_plan(args)
    root = _out(args)
    (root / "plan.json").write_text(plan.to_json())
    harness.train_plan(plan, root)
    print(f"checkpoints under {root}")
    return EXIT_OK


def cmd_eval(args) -> int:
    plan = resolve_plan(args)
    tables = harness.eval_plan(plan, _out(args))
    print((_out(args) / "table_mean.md").read_text())
    return EXIT_OK if tables else EXIT_USAGE


def cmd_run(args) -> int:
    plan = resolve_plan(args)
    harness.run_plan(plan, _out(args))
    print((_out(args) / "table_mean.md").read_text())
    return EXIT_OK


def cmd_rd(args) -> int:
    plan = resolve_plan(args)
    root = _out(args)
    for t in harness.run_rd(plan, root):
        print(t.to_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    plan = resolve_plan(args)
    root = _out(args)
    tables = []
    for seed in plan.seeds:
        p = root / f"seed{seed}" / "results.csv"
        if not p.exists():
            raise PlanError(f"missing {p}; run eval first")
        t = harness.ResultTable.from_csv(p.read_text())
        harness.report(t, p.parent, "results", "markdown")
        tables.append(t)
    text = harness.markdown_grid(tables)
    (root / "table_mean.md").write_text(text)
    print(text)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain-sr": cmd_pretrain_sr, "train": cmd_train, "eval": cmd_eval,
            "rd-sweep": cmd_rd, "report": cmd_report, "run": cmd_run}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingFailure, NonFiniteError) as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
