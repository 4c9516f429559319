"""Confidence-vs-accuracy analysis and the five-fold cross-validation driver.

All statistics are computed from ``predictions.csv`` rows, so rerunning the
analysis on the emitted files reproduces the reported numbers exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import netpbm
from .checkpoint import save_checkpoint
from .errors import ConfigError, DatasetIOError, RelsegError, UndefinedCorrelationError, UsageError
from .inference import PREDICTION_COLUMNS, InferenceMode, run_mode, write_predictions
from .synth import SampleRecord, by_id, folds_of
from .trainer import TrainConfig, TrainLog, train
from .unet import ModelConfig, build_model

log = logging.getLogger(__name__)

DECILES = tuple(range(10, 101, 10))

# report rows in table order: baseline, relation heads, then the ensemble modes
REPORT_LABELS = (
    ("unet", "vanilla", "dice"),
    ("relation_s1", "repeat", "dice_s1"),
    ("relation_s2", "repeat", "dice_s2"),
    ("relation_avg", "repeat", "dice"),
    ("relation_rp", "repeat", "dice_rp"),
    ("relation_rc", "repeat", "dice_rc"),
    ("unet_mc_dropout", "mc_dropout", "dice"),
    ("relation_anchor_train", "anchor_train", "dice"),
    ("relation_anchor_test", "anchor_test", "dice"),
)
REPORT_COLUMNS = ["mode", "fold", "mean_dice", "std_dice", "pearson", "pearson_std"]
COVERAGE_COLUMNS = ["mode", "d", "mean_dice", "count"]
RANKING_COLUMNS = ["rank", "id", "confidence", "dice"]


@dataclass(frozen=True)
class ConfidenceRow:
    image_id: int
    dice: float
    confidence: float
    fold: int = 0
    mode: str = "repeat"


@dataclass(frozen=True)
class CoverageCurve:
    deciles: Tuple[Tuple[int, float, int], ...]

    def mean_at(self, d: int) -> float:
        for dd, mean, _ in self.deciles:
            if dd == d:
                return mean
        raise KeyError(d)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation; raises on a constant series."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError("pearson needs two 1-d series of equal length")
    if x.size < 2:
        raise UsageError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _by_confidence(rows: Iterable[ConfidenceRow]) -> List[ConfidenceRow]:
    return sorted(rows, key=lambda r: (-r.confidence, r.image_id))


def coverage_curve(rows: Sequence[ConfidenceRow], deciles: Sequence[int] = DECILES) -> CoverageCurve:
    """Mean Dice over the top-d% most confident rows, for each d."""
    if not rows:
        raise UsageError("coverage_curve needs at least one row")
    ordered = _by_confidence(rows)
    n = len(ordered)
    points = []
    for d in deciles:
        k = -(-d * n // 100)
        points.append((d, float(np.mean([r.dice for r in ordered[:k]])), k))
    return CoverageCurve(tuple(points))


def rank_by_difficulty(rows: Sequence[ConfidenceRow]) -> List[int]:
    """Image ids from least to most confident; ties go to the lower id."""
    if not rows:
        raise UsageError("rank_by_difficulty needs at least one row")
    return [r.image_id for r in sorted(rows, key=lambda r: (r.confidence, r.image_id))]


# ---------------------------------------------------------------------------
# CSV plumbing


def _f6(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(buf.getvalue(), newline="")
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetIOError(f"{path}: cannot write") from exc


def read_predictions(path) -> List[Dict[str, str]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DatasetIOError(f"{path}: cannot read predictions") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or list(reader.fieldnames[:4]) != PREDICTION_COLUMNS[:4]:
        raise DatasetIOError(f"{path}: expected header starting with {','.join(PREDICTION_COLUMNS[:4])}")
    rows = []
    for row in reader:
        row["_source"] = str(path.parent)
        rows.append(row)
    return rows


def merge_predictions(paths: Sequence) -> List[Dict[str, str]]:
    """Concatenate prediction files; an image must carry one fold everywhere."""
    rows: List[Dict[str, str]] = []
    folds: Dict[str, str] = {}
    seen = set()
    for p in paths:
        for row in read_predictions(p):
            fold = row.get("fold", "")
            prev = folds.setdefault(row["id"], fold)
            if prev != fold:
                raise ConfigError(f"image {row['id']} has fold {prev!r} in one file and {fold!r} in {p}")
            key = (row["id"], row["mode"])
            if key in seen:
                raise ConfigError(f"image {row['id']} appears twice for mode {row['mode']!r}")
            seen.add(key)
            rows.append(row)
    return rows


def _opt_float(text: str) -> Optional[float]:
    return float(text) if text not in ("", None) else None


def _sample_std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _safe_pearson(xs, ys) -> float:
    try:
        return pearson(xs, ys)
    except (UndefinedCorrelationError, UsageError):
        return float("nan")


@dataclass
class Analysis:
    report: List[List[str]] = field(default_factory=list)
    coverage: Dict[str, CoverageCurve] = field(default_factory=dict)
    ranking: List[Tuple[int, int, float, float]] = field(default_factory=list)
    ranking_mode: Optional[str] = None
    fold_pearson: Dict[str, Dict[int, float]] = field(default_factory=dict)
    fold_mean_dice: Dict[str, Dict[int, float]] = field(default_factory=dict)

    def summary(self, label: str) -> Dict[str, float]:
        for row in self.report:
            if row[0] == label and row[1] == "mean":
                return {"mean_dice": float(row[2]), "std_dice": float(row[3]),
                        "pearson": _opt_float(row[4]), "pearson_std": _opt_float(row[5])}
        raise KeyError(label)


def analyze(rows: Sequence[Mapping[str, str]]) -> Analysis:
    """Report, coverage curves and difficulty ranking from prediction rows."""
    if not rows:
        raise UsageError("no prediction rows to analyze")
    out = Analysis()
    for label, mode, column in REPORT_LABELS:
        picked = [r for r in rows if r["mode"] == mode and r.get(column, "") != ""]
        if not picked:
            continue
        has_conf = all(r["confidence"] != "" for r in picked)
        folds = sorted({int(r["fold"]) if r.get("fold", "") != "" else 0 for r in picked})
        fold_means, fold_corrs = {}, {}
        for fold in folds:
            in_fold = [r for r in picked if (int(r["fold"]) if r.get("fold", "") != "" else 0) == fold]
            dices = [float(r[column]) for r in in_fold]
            corr = _safe_pearson([float(r["confidence"]) for r in in_fold], dices) if has_conf else None
            fold_means[fold] = float(np.mean(dices))
            fold_corrs[fold] = corr
            out.report.append([label, str(fold), _f6(fold_means[fold]), _f6(_sample_std(dices)), _f6(corr), ""])
        means = [fold_means[f] for f in folds]
        # folds with an undefined correlation (constant series) stay out of the mean
        corr_vals = [fold_corrs[f] for f in folds if not math.isnan(fold_corrs[f])] if has_conf else []
        mean_corr = float(np.mean(corr_vals)) if corr_vals else None
        std_corr = _sample_std(corr_vals) if corr_vals else None
        out.report.append([label, "mean", _f6(float(np.mean(means))), _f6(_sample_std(means)),
                           _f6(mean_corr), _f6(std_corr)])
        all_dice = [float(r[column]) for r in picked]
        pooled_corr = _safe_pearson([float(r["confidence"]) for r in picked], all_dice) if has_conf else None
        out.report.append([label, "pooled", _f6(float(np.mean(all_dice))), _f6(_sample_std(all_dice)),
                           _f6(pooled_corr), ""])
        out.fold_mean_dice[label] = fold_means
        if has_conf:
            out.fold_pearson[label] = fold_corrs
        if has_conf and column == "dice":
            conf_rows = [ConfidenceRow(int(r["id"]), float(r["dice"]), float(r["confidence"]),
                                       int(r["fold"]) if r.get("fold", "") != "" else 0, mode) for r in picked]
            out.coverage[label] = coverage_curve(conf_rows)
            if out.ranking_mode is None or mode == "repeat":
                order = rank_by_difficulty(conf_rows)
                lookup = {r.image_id: r for r in conf_rows}
                out.ranking = [(k + 1, i, lookup[i].confidence, lookup[i].dice) for k, i in enumerate(order)]
                out.ranking_mode = label
    return out


def write_analysis(out_dir, analysis: Analysis) -> None:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"{root}: cannot create output directory") from exc
    _write_csv(root / "report.csv", REPORT_COLUMNS, analysis.report)
    cov_rows = []
    for label, curve in analysis.coverage.items():
        cov_rows += [[label, d, _f6(mean), count] for d, mean, count in curve.deciles]
    _write_csv(root / "coverage.csv", COVERAGE_COLUMNS, cov_rows)
    _write_csv(root / "ranking.csv", RANKING_COLUMNS,
               [[rank, i, _f6(c), _f6(d)] for rank, i, c, d in analysis.ranking])


def _contour(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, mode="edge")
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Grey image with the GT contour in black and the prediction contour in white."""
    out = 0.2 + 0.6 * np.asarray(image, dtype=np.float64)
    out[_contour(np.asarray(gt, bool))] = 0.0
    out[_contour(np.asarray(pred, bool))] = 1.0
    return out


def write_overlays(out_dir, analysis: Analysis, rows: Sequence[Mapping[str, str]],
                   dataset: Mapping[int, SampleRecord], k: int = 3) -> List[Path]:
    """Overlay PGMs for the k hardest and k easiest ranked images."""
    if not analysis.ranking:
        return []
    mode = next(m for label, m, _ in REPORT_LABELS if label == analysis.ranking_mode)
    source = {int(r["id"]): r["_source"] for r in rows if r["mode"] == mode and "_source" in r}
    root = Path(out_dir) / "overlays"
    root.mkdir(parents=True, exist_ok=True)
    ranked = analysis.ranking
    chosen = [("hard", e) for e in ranked[:k]] + [("easy", e) for e in ranked[-k:][::-1]]
    written = []
    for tag, (rank, image_id, _, _) in chosen:
        if image_id not in dataset or image_id not in source:
            continue
        pred_name = "s1" if mode.startswith("anchor") else "savg"
        pred = netpbm.read_pbm(Path(source[image_id]) / f"{image_id}_{pred_name}.pbm")
        sample = dataset[image_id]
        path = root / f"{tag}_rank{rank:03d}_id{image_id}.pgm"
        netpbm.write_pgm(path, overlay(sample.image, sample.mask, pred), maxval=255)
        written.append(path)
    return written


def evaluate(prediction_paths: Sequence, out_dir, dataset: Optional[Mapping[int, SampleRecord]] = None) -> Analysis:
    rows = merge_predictions(prediction_paths)
    analysis = analyze(rows)
    write_analysis(out_dir, analysis)
    if dataset is not None:
        write_overlays(out_dir, analysis, rows, dataset)
    return analysis


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CrossValConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    modes: Tuple[InferenceMode, ...] = tuple(
        InferenceMode(k) for k in ("vanilla", "repeat", "anchor_train", "anchor_test", "mc_dropout"))
    inference_seed: int = 0

    def variants(self) -> List[str]:
        needed = []
        for m in self.modes:
            v = "vanilla_dropout" if m.kind == "mc_dropout" else ("vanilla" if m.kind == "vanilla" else "relation")
            if v not in needed:
                needed.append(v)
        order = ("relation", "vanilla", "vanilla_dropout")
        return [v for v in order if v in needed]

    def model_for(self, variant: str) -> ModelConfig:
        return ModelConfig(in_channels_per_image=self.model.in_channels_per_image,
                           base_channels=self.model.base_channels, depth=self.model.depth,
                           input_size=self.model.input_size, variant=variant,
                           dropout_rate=self.model.dropout_rate)


def _mode_variant(kind: str) -> str:
    return {"mc_dropout": "vanilla_dropout", "vanilla": "vanilla"}.get(kind, "relation")


@dataclass
class FoldResult:
    fold: int
    prediction_paths: List[str]
    train_logs: Dict[str, TrainLog]


def run_fold(dataset: Sequence[SampleRecord], fold: int, config: CrossValConfig, out_dir) -> FoldResult:
    """Train every needed variant on the other folds and predict this one."""
    split = folds_of(dataset)
    data = by_id(dataset)
    test_ids = split.ids_in(fold)
    train_ids = split.ids_not_in(fold)
    train_set = [data[i] for i in train_ids]
    fold_dir = Path(out_dir) / f"fold{fold}"
    nets, logs = {}, {}
    for variant in config.variants():
        try:
            net = build_model(config.model_for(variant), config.train.seed)
            result = train(net, train_set, config.train)
        except RelsegError as exc:
            raise type(exc)(f"fold {fold}, variant {variant}: {exc}") from exc
        save_checkpoint(fold_dir / variant / "checkpoint.rseg", net)
        result.log.write_csv(fold_dir / variant / "trainlog.csv")
        nets[variant], logs[variant] = net, result.log
        log.info("fold %d: trained %s, final loss %.4f", fold, variant, result.log.total_losses()[-1])
    paths = []
    for mode in config.modes:
        net = nets[_mode_variant(mode.kind)]
        records = run_mode(net, mode, data, test_ids, train_ids, config.inference_seed)
        paths.append(str(write_predictions(fold_dir / mode.kind, records, data)))
    return FoldResult(fold, paths, logs)


def _run_fold_job(args) -> FoldResult:
    return run_fold(*args)


@dataclass
class CrossValResult:
    analysis: Analysis
    folds: List[FoldResult]


def cross_validate(dataset: Sequence[SampleRecord], config: CrossValConfig, out_dir, jobs: int = 1) -> CrossValResult:
    """Train/predict every fold, then aggregate all predictions into report files."""
    split = folds_of(dataset)
    folds = list(range(split.fold_count))
    for f in folds:
        if not split.ids_in(f):
            raise ConfigError(f"fold {f} is empty")
    jobs_args = [(dataset, f, config, out_dir) for f in folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, jobs_args))
    else:
        results = [_run_fold_job(a) for a in jobs_args]
    paths = [p for r in results for p in r.prediction_paths]
    analysis = evaluate(paths, out_dir, by_id(dataset))
    return CrossValResult(analysis, results)
