"""Command line entry point ``fodshift``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("fodshift")


def _train_config(args, preset: str):
    from .estimator import TrainConfig
    from .io import read_spec

    name = "paper" if getattr(args, "paper_hparams", False) and preset == "desk" else preset
    values = read_spec(args.config) if getattr(args, "config", None) else {}
    for key in ("epochs", "lr", "weight_decay", "batch_size", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return TrainConfig.preset(name, **values)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)


# --- experiment ---------------------------------------------------------

def cmd_experiment_run(args) -> int:
    from .harness import ExperimentSpec, run_experiment, write_outputs
    from .io import read_spec

    raw = read_spec(args.spec)
    if args.paper_scale:
        raw["n_subjects"] = 100
    if args.paper_hparams:
        raw["paper_hparams"] = True
    spec = ExperimentSpec.from_dict(raw)
    out = args.out or raw.get("out")
    if not out:
        raise ValueError("no output directory: pass --out or set 'out' in the spec")
    record = run_experiment(spec)
    write_outputs(record, out, save_models=not args.no_models)
    print(Path(out, "report.md").read_text())
    return 0


def cmd_experiment_report(args) -> int:
    from .harness import load_record, render_report
    from .io import atomic_write

    records = []
    root = Path(args.in_dir)
    dirs = [root] if (root / "record.json").exists() else sorted(
        p.parent for p in root.glob("*/record.json"))
    if not dirs:
        raise FileNotFoundError(f"no record.json under {root}")
    for d in dirs:
        records.append(load_record(d))
    md, csv_text = render_report(records)
    if args.write:
        atomic_write(root / "report.md", md.encode())
        atomic_write(root / "metrics.csv", csv_text.encode())
    sys.stdout.write(csv_text if args.csv else md)
    return 0


# --- cohorts ------------------------------------------------------------

def cmd_cohort_generate(args) -> int:
    from .io import save_cohort
    from .phantom import build_cohort

    subjects = build_cohort(args.preset, args.n_subjects,
                            age_range=tuple(args.age_range) if args.age_range else None,
                            grid_dims=tuple(args.grid), rng_seed=args.seed,
                            cohort_label=args.label)
    save_cohort(args.out, subjects)
    for s in subjects:
        print(f"{s.id}\tage={s.age:.2f}\tFA={s.fa:.3f}")
    return 0


# --- harmonization ------------------------------------------------------

def cmd_harmonize_mom(args) -> int:
    from .harmonize import harmonize_subjects
    from .io import atomic_write, dump_json, load_cohort, save_cohort, write_volume

    source = load_cohort(args.source_ref)
    target = load_cohort(args.target)
    n = args.n_ref_subjects
    if n > len(target):
        raise ValueError(f"target cohort has {len(target)} subjects, asked for {n} references")
    refs = target[:n]
    mapped, mapping = harmonize_subjects(target, refs, source, sigma_vox=args.sigma)
    out = Path(args.out)
    save_cohort(out, mapped)
    write_volume(out / "mapping.raw", np.stack([mapping.alpha_map, mapping.beta_map], axis=-1),
                 target[0].voxel_size, "<f4")
    atomic_write(out / "harmonize.json", dump_json({
        "source_reference": [s.id for s in source], "target_reference": [s.id for s in refs],
        "sigma_vox": args.sigma}).encode())
    print(f"harmonised {len(mapped)} subjects; alpha in "
          f"[{mapping.alpha_map.min():.3f}, {mapping.alpha_map.max():.3f}]")
    return 0


# --- estimator ----------------------------------------------------------

def _cohort_data(path):
    from .estimator import training_data
    from .io import load_cohort
    from .metrics import wm_mask

    subjects = load_cohort(path)
    return training_data(subjects, [wm_mask(s) for s in subjects], dtype=np.float32)


def cmd_train(args) -> int:
    from .estimator import EstimatorModel, train
    from .io import atomic_write, dump_json, write_model

    cfg = _train_config(args, "desk")
    model = EstimatorModel(dropout=args.dropout, seed=args.init_seed, dtype=np.float32)
    best, hist = train(model, _cohort_data(args.train), _cohort_data(args.val), cfg,
                       log=lambda e, a, b: log.info("epoch %d train %.6f val %.6f", e, a, b))
    write_model(args.out, best)
    atomic_write(Path(str(args.out) + ".history.json"), dump_json(hist).encode())
    print(f"best epoch {hist['best_epoch']} val MSE {hist['best_val']:.6g}")
    return 0


def cmd_finetune(args) -> int:
    from .estimator import fine_tune, training_data
    from .io import atomic_write, dump_json, load_cohort, read_model, write_model
    from .metrics import wm_mask

    cfg = _train_config(args, "finetune")
    subjects = load_cohort(args.cohort)
    if args.n_subjects:
        subjects = subjects[:args.n_subjects]
    data = training_data(subjects, [wm_mask(s) for s in subjects], dtype=np.float32)
    tuned, hist = fine_tune(read_model(args.model), data, cfg)
    write_model(args.out, tuned)
    atomic_write(Path(str(args.out) + ".history.json"), dump_json(hist).encode())
    print(f"best epoch {hist['best_epoch']} holdout MSE {hist['best_val']:.6g}")
    return 0


def cmd_predict(args) -> int:
    from .estimator import predict_volume
    from .io import load_subject, read_model, write_volume
    from .metrics import wm_mask

    subject = load_subject(args.subject)
    fod = predict_volume(read_model(args.model), subject, mask=wm_mask(subject))
    write_volume(args.out, fod, subject.voxel_size, "<f4")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fodshift", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("experiment", help="run or report experiments")
    exp_sub = exp.add_subparsers(dest="action", required=True)
    run = exp_sub.add_parser("run")
    run.add_argument("--spec", required=True)
    run.add_argument("--out")
    run.add_argument("--paper-scale", action="store_true", help="100 subjects per cohort")
    run.add_argument("--paper-hparams", action="store_true", help="1000 training epochs")
    run.add_argument("--no-models", action="store_true", help="skip writing model files")
    run.set_defaults(func=cmd_experiment_run)
    rep = exp_sub.add_parser("report")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--csv", action="store_true", help="print CSV instead of Markdown")
    rep.add_argument("--write", action="store_true", help="rewrite report.md and metrics.csv")
    rep.set_defaults(func=cmd_experiment_report)

    coh = sub.add_parser("cohort", help="synthetic cohorts")
    coh_sub = coh.add_subparsers(dest="action", required=True)
    gen = coh_sub.add_parser("generate")
    gen.add_argument("--preset", required=True)
    gen.add_argument("--n-subjects", type=int, default=20)
    gen.add_argument("--label", default="baseline")
    gen.add_argument("--age-range", type=float, nargs=2)
    gen.add_argument("--grid", type=int, nargs=3, default=[12, 12, 12])
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_cohort_generate)

    har = sub.add_parser("harmonize", help="signal harmonization")
    har_sub = har.add_subparsers(dest="action", required=True)
    mom = har_sub.add_parser("mom")
    mom.add_argument("--source-ref", required=True)
    mom.add_argument("--target", required=True)
    mom.add_argument("--n-ref-subjects", type=int, choices=[1, 2, 5, 10], default=1)
    mom.add_argument("--sigma", type=float, default=1.0)
    mom.add_argument("--out", required=True)
    mom.set_defaults(func=cmd_harmonize_mom)

    tr = sub.add_parser("train", help="train an estimator")
    tr.add_argument("--train", required=True, help="training cohort directory")
    tr.add_argument("--val", required=True, help="validation cohort directory")
    tr.add_argument("--out", required=True)
    tr.add_argument("--dropout", type=float, default=0.1)
    tr.add_argument("--init-seed", type=int, default=0)
    tr.add_argument("--paper-hparams", action="store_true")
    _add_train_flags(tr)
    tr.set_defaults(func=cmd_train)

    ft = sub.add_parser("finetune", help="fine-tune a trained estimator")
    ft.add_argument("--model", required=True)
    ft.add_argument("--cohort", required=True)
    ft.add_argument("--n-subjects", type=int)
    ft.add_argument("--out", required=True)
    _add_train_flags(ft)
    ft.set_defaults(func=cmd_finetune)

    pr = sub.add_parser("predict", help="predict FODs for one subject")
    pr.add_argument("--model", required=True)
    pr.add_argument("--subject", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError, json.JSONDecodeError) as err:
        print(f"fodshift: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
