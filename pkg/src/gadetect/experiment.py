"""Experiment configuration and the end-to-end cross-validation driver."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .dataset import (
    ImageRecord,
    Task,
    apply_exclusions,
    derive_labels,
    parse_manifest,
    select_stereo,
    summarize,
)
from .error_analysis import (
    ErrorTable,
    fn_by_area,
    fn_by_centrality,
    monotonicity_check,
    sample_false_negatives,
    write_review_template,
)
from .errors import ConfigError, DataError, GadetectError, JoinError
from .folds import AugmentConfig, FoldAssignment, RunSplit, assign_folds, rotation_schedule
from .imageio import read_array, read_image, write_array
from .metrics import (
    MetricsReport,
    RocCurve,
    build_report,
    confusion,
    roc_auc,
    write_per_fold,
    write_table2,
)
from .model import ModelArtifact, ModelConfig, TrainingConfig, build_model, predict, train
from .preprocess import PreprocessConfig, preprocess

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "GADETECT_DATA_ROOT"


class StageError(GadetectError):
    """A module error re-raised with the run index and pipeline stage attached."""

    def __init__(self, run: Optional[int], stage: str, cause: Exception):
        where = f"stage {stage}" if run is None else f"run {run}, stage {stage}"
        super().__init__(f"{where}: {cause}")
        self.run = run
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


@dataclass
class ExperimentConfig:
    manifest: str = ""
    output_dir: str = "experiment"
    task: str = "ga"
    seed: int = 0
    k: int = 5
    preprocess: PreprocessConfig = field(default_factory=lambda: PreprocessConfig(target_size=128))
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    aggregate: str = "fold_mean"
    include_questionable_as_positive: bool = True
    review_sample_size: int = 20

    def __post_init__(self):
        Task.parse(self.task)
        if self.k < 3:
            raise ConfigError(f"cross-validation needs k >= 3 (train, dev, test), got {self.k}")
        if self.aggregate not in ("fold_mean", "pooled"):
            raise ConfigError(f"aggregate must be fold_mean or pooled, got {self.aggregate!r}")
        if self.preprocess.target_size != self.model.input_size:
            raise ConfigError(
                f"preprocess target_size {self.preprocess.target_size} != model input_size "
                f"{self.model.input_size}"
            )
        if Task.parse(self.model.task) is not Task.parse(self.task):
            self.model = replace(self.model, task=Task.parse(self.task).value)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["preprocess"]["clip_range"] = list(self.preprocess.clip_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        try:
            if "preprocess" in d:
                pp = dict(d["preprocess"])
                if "clip_range" in pp:
                    pp["clip_range"] = tuple(pp["clip_range"])
                d["preprocess"] = PreprocessConfig(**pp)
            if "augment" in d and d["augment"] is not None:
                d["augment"] = AugmentConfig(**d["augment"])
            if "model" in d:
                d["model"] = ModelConfig(**d["model"])
            if "training" in d:
                d["training"] = TrainingConfig(**d["training"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    def hash(self) -> str:
        """Identity of the experiment; where its outputs are written does not count."""
        import hashlib

        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read a YAML/JSON config and apply flag overrides; flags win.

    Recognized overrides: task, profile, seed, out, manifest.
    """
    d: dict = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a mapping")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "task" in overrides:
        d["task"] = overrides["task"]
        d.setdefault("model", {})["task"] = overrides["task"]
    if "seed" in overrides:
        d["seed"] = overrides["seed"]
        d.setdefault("training", {})["seed"] = overrides["seed"]
    if "out" in overrides:
        d["output_dir"] = str(overrides["out"])
    if "manifest" in overrides:
        d["manifest"] = str(overrides["manifest"])
    if "profile" in overrides:
        profile = overrides["profile"]
        size = 512 if profile == "paper" else d.get("model", {}).get("input_size", 128)
        if profile == "tiny" and size == 512:
            size = 128
        d.setdefault("model", {}).update(profile=profile, input_size=size)
        d.setdefault("preprocess", {})["target_size"] = size
    elif "model" in d and "input_size" in d["model"]:
        d.setdefault("preprocess", {}).setdefault("target_size", d["model"]["input_size"])
    return ExperimentConfig.from_dict(d)


def resolve_manifest(path) -> Path:
    p = Path(path)
    if not p.is_absolute() and not p.exists() and os.environ.get(DATA_ROOT_ENV):
        p = Path(os.environ[DATA_ROOT_ENV]) / p
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    return p


def load_records(manifest, task, include_questionable_as_positive=True):
    """parse -> stereo selection -> exclusions -> task labels."""
    records = apply_exclusions(select_stereo(parse_manifest(resolve_manifest(manifest))))
    return records, derive_labels(records, task, include_questionable_as_positive)


# ---------------------------------------------------------------------------
# image cache


def load_preprocessed(records: Sequence[ImageRecord], cfg: PreprocessConfig, cache_dir=None) -> np.ndarray:
    """Preprocess every record's image, reusing cached arrays when present."""
    out = np.empty((len(records), cfg.target_size, cfg.target_size, 3), dtype=np.uint8)
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / cfg.fingerprint()
        cache.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        cached = None if cache is None else cache / (rec.image_key.replace(":", "_") + ".gar")
        if cached is not None and cached.exists():
            out[i] = read_array(cached)
            continue
        out[i] = preprocess(read_image(rec.image_path), cfg)
        if cached is not None:
            write_array(cached, out[i])
    return out


# ---------------------------------------------------------------------------
# prediction files


PREDICTION_COLUMNS = ("image_key", "score", "fold")


def write_predictions(path, keys, scores, folds, labels=None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(PREDICTION_COLUMNS) + (["label"] if labels is not None else []))
        for i, (k, s, f) in enumerate(zip(keys, scores, folds)):
            row = [k, repr(float(s)), int(f)]
            if labels is not None:
                row.append(int(bool(labels[i])))
            w.writerow(row)
    return path


def read_predictions(path) -> list[tuple[str, float, int]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PREDICTION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing prediction column(s): {', '.join(missing)}")
        try:
            return [(r["image_key"], float(r["score"]), int(r["fold"])) for r in reader]
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# evaluation core


@dataclass
class Evaluation:
    report: MetricsReport
    curves: list
    specialist: Optional[MetricsReport] = None
    specialist_points: list = field(default_factory=list)
    error_tables: dict = field(default_factory=dict)
    folds: list = field(default_factory=list)


def _specialist_field(task: Task) -> str:
    return "specialist_ga" if task is Task.GA else "specialist_cga"


def evaluate_scored(
    items: Sequence[tuple],
    task,
    threshold: float = 0.5,
    aggregate: str = "fold_mean",
) -> Evaluation:
    """Metrics, ROC curves, specialist comparison and error tables.

    ``items`` are ``(record, label, score, fold)`` tuples.
    """
    task = Task.parse(task)
    fold_ids = sorted({f for *_, f in items})
    counts, aucs, curves = [], [], []
    spec_counts, spec_points = [], []
    for f in fold_ids:
        sub = [it for it in items if it[3] == f]
        labels = np.array([y for _, y, _, _ in sub], dtype=bool)
        scores = np.array([s for _, _, s, _ in sub], dtype=float)
        counts.append(confusion(scores, labels, threshold))
        if labels.any() and not labels.all():
            curve = roc_auc(scores, labels)
            curves.append(curve)
            aucs.append(curve.auc)
        else:
            curves.append(None)
            aucs.append(None)
        graded = [(getattr(r.grade, _specialist_field(task)), y) for r, y, _, _ in sub]
        graded = [(s, y) for s, y in graded if s is not None]
        if graded:
            sl = np.array([s for s, _ in graded], dtype=float)
            gl = np.array([y for _, y in graded], dtype=bool)
            c = confusion(sl, gl, 0.5)
            spec_counts.append(c)
            sens = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
            spec = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
            spec_points.append(None if sens is None or spec is None else (1.0 - spec, sens))
        else:
            spec_points.append(None)
    report = build_report(counts, aucs, aggregate=aggregate, label="model")
    specialist = build_report(spec_counts, None, aggregate=aggregate, label="specialists") if spec_counts else None

    records = [r for r, *_ in items]
    preds = [s >= threshold for _, _, s, _ in items]
    tables = {}
    if task is Task.GA:
        tables["area"] = fn_by_area(preds, records)
    else:
        tables["centrality"] = fn_by_centrality(preds, records)
    return Evaluation(report, curves, specialist, spec_points, tables, fold_ids)


def evaluate_predictions(
    predictions_path,
    manifest,
    task,
    threshold: float = 0.5,
    aggregate: str = "fold_mean",
    source: str = "model",
    include_questionable_as_positive: bool = True,
) -> Evaluation:
    """Score a predictions file (image_key, score, fold) against manifest gold labels.

    With ``source="specialist"`` the manifest's specialist grades replace the
    model scores; the predictions file then only supplies fold membership and
    may be omitted.
    """
    task = Task.parse(task)
    _, labeled = load_records(manifest, task, include_questionable_as_positive)
    by_key = {r.image_key: (r, y) for r, y in labeled.items}
    if source == "specialist":
        fold_of = {}
        if predictions_path is not None:
            fold_of = {k: f for k, _, f in read_predictions(predictions_path)}
        field_name = _specialist_field(task)
        items = []
        for r, y in labeled.items:
            s = getattr(r.grade, field_name)
            if s is None or (fold_of and r.image_key not in fold_of):
                continue
            items.append((r, y, float(s), fold_of.get(r.image_key, 0)))
        if not items:
            raise DataError("no specialist-graded records")
        return evaluate_scored(items, task, 0.5, aggregate)
    if source != "model":
        raise ConfigError(f"unknown prediction source {source!r}")
    rows = read_predictions(predictions_path)
    unknown = [k for k, _, _ in rows if k not in by_key]
    if unknown:
        shown = ", ".join(unknown[:10]) + (" ..." if len(unknown) > 10 else "")
        raise JoinError(f"{len(unknown)} prediction key(s) not in the {task.value} set: {shown}")
    items = [(*by_key[k], s, f) for k, s, f in rows]
    return evaluate_scored(items, task, threshold, aggregate)


def write_evaluation(ev: Evaluation, out_dir, review=None) -> dict:
    """Write report files and figures; return a small summary dict."""
    from . import plotting

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev.report.write_json(out / "metrics_report.json")
    reports = [ev.report] + ([ev.specialist] if ev.specialist is not None else [])
    write_table2(out / "table2.csv", reports)
    write_per_fold(out / "per_fold.csv", ev.report)
    if ev.specialist is not None:
        ev.specialist.write_json(out / "specialist_report.json")
    for i, c in enumerate(ev.curves):
        if c is not None:
            c.write_csv(out / f"roc_fold{ev.folds[i]}.csv")
    curves = [c for c in ev.curves if c is not None]
    points = [p for c, p in zip(ev.curves, ev.specialist_points) if c is not None]
    if curves:
        plotting.roc_figure(curves, out / "roc.png", points)
    summary = {
        "mean_auc": None if ev.report.auc is None else ev.report.auc.point,
        "per_fold_auc": ev.report.per_fold_auc,
    }
    for name, table in ev.error_tables.items():
        table.write_csv(out / f"errors_{name}.csv")
        plotting.error_rate_figure(table, out / f"errors_{name}.png")
        if name == "area":
            mono = monotonicity_check(table)
            summary["area_monotonic"] = mono.ok
            summary["area_violation"] = mono.category
    return summary


# ---------------------------------------------------------------------------
# cross-validation


def _setup_log(out: Path):
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("gadetect")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def run_single(
    config: ExperimentConfig,
    split: RunSplit,
    images: np.ndarray,
    labeled,
    assignment: FoldAssignment,
    out: Path,
) -> tuple[np.ndarray, np.ndarray]:
    """Train on one rotation, write its artifact and test predictions.

    Returns (test indices, test scores). Reuses a finished run directory.
    """
    run_dir = out / f"run_{split.run_index}"
    done = run_dir / "DONE"
    items = labeled.items
    fold = np.array([assignment.fold_of(r.participant_id) for r, _ in items])
    labels = np.array([y for _, y in items], dtype=np.float32)
    test_idx = np.flatnonzero(fold == split.test_fold)
    if done.exists():
        log.info("run %d already complete, reusing predictions", split.run_index)
        rows = read_predictions(run_dir / "predictions.csv")
        return test_idx, np.array([s for _, s, _ in rows])

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "split.json").write_text(json.dumps(split.as_dict(), indent=2))
    train_idx = np.flatnonzero(np.isin(fold, split.train_folds))
    dev_idx = np.flatnonzero(fold == split.dev_fold)
    fp = config.preprocess.fingerprint()
    seed = config.training.seed + split.run_index
    t0 = time.time()
    try:
        model = build_model(config.model, seed=seed)
    except GadetectError as exc:
        raise StageError(split.run_index, "build", exc) from exc
    try:
        artifact, history = train(
            model,
            (images[train_idx], labels[train_idx]),
            (images[dev_idx], labels[dev_idx]),
            replace(config.training, seed=seed),
            preprocess_fingerprint=fp,
            augment_config=config.augment,
            fold_seed=config.seed,
        )
    except GadetectError as exc:
        raise StageError(split.run_index, "train", exc) from exc
    log.info(
        "run %d trained in %.1fs: best epoch %d of %d",
        split.run_index, time.time() - t0, history.best_epoch, history.stopped_epoch,
    )
    artifact.save(run_dir / "model")
    try:
        scores = predict(artifact, images[test_idx], fingerprint=fp)
    except GadetectError as exc:
        raise StageError(split.run_index, "predict", exc) from exc
    keys = [items[i][0].image_key for i in test_idx]
    write_predictions(run_dir / "predictions.csv", keys, scores, [split.test_fold] * len(keys), labels[test_idx])
    y_test = labels[test_idx].astype(bool)
    if y_test.any() and not y_test.all():
        roc_auc(scores, y_test).write_csv(run_dir / "roc.csv")
    done.write_text("ok\n")
    return test_idx, scores


def run_crossval(config: ExperimentConfig, runs: Optional[Sequence[int]] = None) -> Path:
    """ingest -> split -> per-run train/predict -> metrics -> error tables -> report."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = _setup_log(out)
    try:
        return _run_crossval(config, out, runs)
    finally:
        logging.getLogger("gadetect").removeHandler(handler)
        handler.close()


def _run_crossval(config: ExperimentConfig, out: Path, runs) -> Path:
    t_start = time.time()
    config.dump(out / "config.yaml")
    task = Task.parse(config.task)
    try:
        records, labeled = load_records(config.manifest, task, config.include_questionable_as_positive)
    except GadetectError as exc:
        raise StageError(None, "ingest", exc) from exc
    participants = sorted({r.participant_id for r, _ in labeled.items})
    try:
        assignment = assign_folds(participants, config.k, config.seed)
    except GadetectError as exc:
        raise StageError(None, "split", exc) from exc
    assignment.save(out / "folds.csv")
    summary = summarize(labeled.records, assignment.map)
    (out / "dataset_summary.json").write_text(json.dumps(_summary_dict(summary), indent=2))
    log.info("%s task: %d images, %d participants", task.value, summary.n_images, summary.n_participants)

    t0 = time.time()
    try:
        images = load_preprocessed(labeled.records, config.preprocess, out / "cache")
    except GadetectError as exc:
        raise StageError(None, "preprocess", exc) from exc
    log.info("preprocessed %d images in %.1fs", len(images), time.time() - t0)

    schedule = rotation_schedule(config.k)
    selected = schedule if runs is None else [schedule[r] for r in runs]
    scores = np.full(len(labeled.items), np.nan)
    for split in selected:
        idx, s = run_single(config, split, images, labeled, assignment, out)
        scores[idx] = s
    if runs is not None:
        return out

    items = [
        (r, y, float(scores[i]), assignment.fold_of(r.participant_id))
        for i, (r, y) in enumerate(labeled.items)
    ]
    try:
        ev = evaluate_scored(items, task, config.model.threshold, config.aggregate)
    except GadetectError as exc:
        raise StageError(None, "metrics", exc) from exc
    report_dir = out / "report"
    result = write_evaluation(ev, report_dir)

    from . import plotting
    from .model import TrainingHistory

    histories = [
        TrainingHistory.read_csv(out / f"run_{s.run_index}" / "model" / "history.csv")
        for s in schedule
    ]
    plotting.history_figure(histories, report_dir / "history.png")

    preds = np.array([s >= config.model.threshold for _, _, s, _ in items])
    gold = np.array([y for _, y, _, _ in items])
    sampled = sample_false_negatives(
        preds, gold, config.review_sample_size, config.seed, ids=list(range(len(items)))
    )
    write_review_template(
        report_dir / "fn_review.csv", [items[i][0] for i in sampled], saliency_dir=report_dir / "saliency"
    )
    aggregate = {
        "task": task.value,
        "config_hash": config.hash(),
        "code_version": __version__,
        "runs": [s.as_dict() for s in schedule],
        **result,
    }
    (report_dir / "aggregate.json").write_text(json.dumps(aggregate, indent=2))
    log.info("cross-validation finished in %.1fs; mean AUC %s", time.time() - t_start, result["mean_auc"])
    return out


def _summary_dict(s) -> dict:
    d = {
        "n_images": s.n_images,
        "n_participants": s.n_participants,
        "ga_percent": s.ga_percent,
        "cga_percent": s.cga_percent,
        "n_ga": s.n_ga,
        "n_cga": s.n_cga,
    }
    if s.per_fold:
        d["per_fold"] = {str(k): _summary_dict(v) for k, v in s.per_fold.items()}
    return d
