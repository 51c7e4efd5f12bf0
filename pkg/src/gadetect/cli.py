"""Command-line entry point: ``gadetect <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
5 i/o error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, GadetectError

log = logging.getLogger("gadetect.cli")

TASKS = ("ga", "cga", "centrality")


def _common(p, out_required=True):
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--profile", choices=("paper", "tiny"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required)
    p.add_argument("--manifest")


def _config(args):
    from .experiment import load_config

    return load_config(
        args.config,
        {
            "task": args.task,
            "profile": args.profile,
            "seed": args.seed,
            "out": args.out,
            "manifest": args.manifest,
        },
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args):
    from .synth import generate_dataset

    path = generate_dataset(
        args.n,
        args.ga_prevalence,
        args.cga_fraction,
        args.seed if args.seed is not None else 0,
        args.out,
        image_size=args.image_size,
        nv_fraction=args.nv_fraction,
    )
    print(path)


def cmd_ingest(args):
    from .dataset import apply_exclusions, derive_labels, parse_manifest, select_stereo, summarize, write_manifest
    from .experiment import _summary_dict, resolve_manifest

    manifest = resolve_manifest(args.manifest)
    parsed = parse_manifest(manifest)
    selected = select_stereo(parsed)
    kept = apply_exclusions(selected)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(kept, out / "manifest.csv", relative_to=out)
    d = _summary_dict(summarize(kept))
    d.update(n_parsed=len(parsed), n_after_stereo=len(selected), n_excluded=len(selected) - len(kept))
    for task in TASKS:
        ls = derive_labels(kept, task)
        d[f"{task}_items"] = len(ls)
        d[f"{task}_positives"] = int(sum(ls.labels))
    (out / "summary.json").write_text(json.dumps(d, indent=2))
    print(json.dumps(d, indent=2))


def cmd_split(args):
    from .experiment import load_records

    cfg = _config(args)
    from .folds import assign_folds, rotation_schedule

    _, labeled = load_records(cfg.manifest, cfg.task, cfg.include_questionable_as_positive)
    assignment = assign_folds([r.participant_id for r in labeled.records], cfg.k, cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    assignment.save(out / "folds.csv")
    (out / "runs.json").write_text(json.dumps([s.as_dict() for s in rotation_schedule(cfg.k)], indent=2))
    print(out / "folds.csv")


def cmd_run_crossval(args):
    from .experiment import run_crossval

    cfg = _config(args)
    out = run_crossval(cfg)
    print(out)


def cmd_train(args):
    from .experiment import run_crossval

    cfg = _config(args)
    run_crossval(cfg, runs=[args.run])
    print(Path(cfg.output_dir) / f"run_{args.run}")


def _records_for(manifest, task, keys=None):
    from .experiment import load_records

    _, labeled = load_records(manifest, task)
    items = labeled.items
    if keys:
        wanted = set(keys)
        items = [it for it in items if it[0].image_key in wanted]
    return items


def cmd_predict(args):
    from .experiment import load_preprocessed, write_predictions
    from .folds import FoldAssignment
    from .model import ModelArtifact, predict
    from .preprocess import PreprocessConfig

    artifact = ModelArtifact.load(args.artifact)
    pcfg = PreprocessConfig(target_size=artifact.model_config.input_size)
    if pcfg.fingerprint() != artifact.preprocess_fingerprint:
        raise ConfigError("artifact was trained with non-default preprocessing; use run-crossval outputs")
    items = _records_for(args.manifest, artifact.model_config.task)
    folds = [0] * len(items)
    if args.folds:
        assignment = FoldAssignment.load(args.folds)
        folds = [assignment.fold_of(r.participant_id) for r, _ in items]
        if args.fold is not None:
            keep = [i for i, f in enumerate(folds) if f == args.fold]
            items = [items[i] for i in keep]
            folds = [folds[i] for i in keep]
    images = load_preprocessed([r for r, _ in items], pcfg)
    scores = predict(artifact, images, fingerprint=pcfg.fingerprint())
    write_predictions(args.out, [r.image_key for r, _ in items], scores, folds, [y for _, y in items])
    print(args.out)


def cmd_evaluate(args):
    from .experiment import evaluate_predictions, write_evaluation

    ev = evaluate_predictions(
        args.predictions,
        args.manifest,
        args.task,
        threshold=args.threshold,
        aggregate=args.aggregate,
        source=args.source,
    )
    summary = write_evaluation(ev, args.out)
    rep = ev.report
    for name in ("accuracy", "kappa", "sensitivity", "specificity", "precision"):
        e = rep.estimate(name)
        print(f"{name:12s} {_fmt(e.point)} ({_fmt(e.ci_low)}, {_fmt(e.ci_high)})")
    if summary.get("mean_auc") is not None:
        print(f"{'auc':12s} {summary['mean_auc']:.3f}")


def _fmt(x):
    from .metrics import format_value

    return format_value(x)


def cmd_analyze_errors(args):
    from .error_analysis import monotonicity_check, sample_false_negatives, write_review_template
    from .experiment import evaluate_predictions

    ev = evaluate_predictions(args.predictions, args.manifest, args.task, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in ev.error_tables.items():
        table.write_csv(out / f"errors_{name}.csv")
        print(f"[{name}]")
        for r in table.rows:
            rate = r.rate_percent
            print(f"  {r.category:36s} {r.n_total:6d} {r.n_false_negative:6d} {'NOT_DEFINED' if rate is None else str(rate) + '%'}")
        if name == "area":
            m = monotonicity_check(table)
            print(f"  non-increasing from LT_I2: {m.ok}" + ("" if m.ok else f" (first violation at {m.category})"))
    from .experiment import load_records, read_predictions

    _, labeled = load_records(args.manifest, args.task)
    by_key = {r.image_key: (r, y) for r, y in labeled.items}
    rows = read_predictions(args.predictions)
    recs = [by_key[k][0] for k, _, _ in rows]
    gold = [by_key[k][1] for k, _, _ in rows]
    preds = [s >= args.threshold for _, s, _ in rows]
    chosen = sample_false_negatives(preds, gold, args.n, args.sample_seed, ids=list(range(len(rows))))
    write_review_template(out / "fn_review.csv", [recs[i] for i in chosen], args.saliency_dir)


def cmd_saliency(args):
    from .error_analysis import _safe
    from .imageio import read_image, write_array, write_image
    from .model import ModelArtifact
    from .plotting import saliency_panel
    from .preprocess import PreprocessConfig, preprocess
    from .saliency import overlay, saliency_map

    artifact = ModelArtifact.load(args.artifact)
    pcfg = PreprocessConfig(target_size=artifact.model_config.input_size)
    targets = []
    if args.manifest:
        for r, _ in _records_for(args.manifest, artifact.model_config.task, args.keys):
            targets.append((r.image_key, r.image_path))
    for p in args.image or []:
        targets.append((Path(p).stem, Path(p)))
    if not targets:
        raise ConfigError("no images given (use --image or --manifest)")
    out = Path(args.out)
    composites, titles = [], []
    for key, path in targets:
        img = preprocess(read_image(path), pcfg)
        smap = saliency_map(artifact, img, fingerprint=pcfg.fingerprint(), image_id=key, reduction=args.reduction)
        write_array(out / f"{_safe(key)}.gar", smap.values.astype(np.float32))
        comp = overlay(img, smap.values, args.alpha)
        write_image(out / f"{_safe(key)}.png", comp)
        composites.append(comp)
        titles.append(key)
    if args.panel:
        saliency_panel(composites[: args.panel], out / "panel.png", titles[: args.panel])
    print(out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gadetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic fundus dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--ga-prevalence", type=float, default=0.043)
    p.add_argument("--cga-fraction", type=float, default=1455 / 2585)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--nv-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("ingest", help="apply selection/exclusion rules and summarize")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="participant-level fold assignment")
    _common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one cross-validation run")
    _common(p)
    p.add_argument("--run", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score images with a trained artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds")
    p.add_argument("--fold", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    for name, func, hlp in (
        ("evaluate", cmd_evaluate, "metrics, ROC and error tables from a predictions file"),
        ("analyze-errors", cmd_analyze_errors, "false-negative tables and review sample"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--predictions")
        p.add_argument("--manifest", required=True)
        p.add_argument("--task", choices=TASKS, default="ga")
        p.add_argument("--threshold", type=float, default=0.5)
        p.add_argument("--out", required=True)
        if name == "evaluate":
            p.add_argument("--aggregate", choices=("fold_mean", "pooled"), default="fold_mean")
            p.add_argument("--source", choices=("model", "specialist"), default="model")
        else:
            p.add_argument("--n", type=int, default=20)
            p.add_argument("--sample-seed", type=int, default=0)
            p.add_argument("--saliency-dir")
        p.set_defaults(func=func)

    p = sub.add_parser("saliency", help="gradient saliency maps and overlays")
    p.add_argument("--artifact", required=True)
    p.add_argument("--image", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--keys", nargs="*")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--reduction", choices=("max", "sum"), default="max")
    p.add_argument("--panel", type=int, default=0, help="render the first N overlays into panel.png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("run-crossval", help="full k-fold experiment")
    _common(p)
    p.set_defaults(func=cmd_run_crossval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "predictions", "x") is None and getattr(args, "source", "model") == "model":
        parser.error("--predictions is required unless --source specialist")
    try:
        args.func(args)
    except GadetectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
