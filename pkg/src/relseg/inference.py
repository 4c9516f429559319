"""Test-time modes: repeated input, anchored inputs, MC dropout and plain U-Net.

Every mode returns a :class:`PredictionRecord` holding binary masks and, where
the mode has one, the confidence score. Randomness (anchor choice, dropout
masks) comes from a per-image stream seeded by ``(seed, image_id)``, so
images can be processed in any order or in parallel with identical results.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import netpbm
from .errors import ConfigError, DatasetIOError, UsageError
from .relations import RelationPair, aggregate_mc, binarize, confidence, dice
from .synth import SampleRecord
from .tensor import _sigmoid
from .unet import Network, forward_dropout, forward_relation, forward_vanilla

MODE_KINDS = ("repeat", "anchor_train", "anchor_test", "mc_dropout", "vanilla")
PREDICTION_COLUMNS = ["id", "mode", "dice", "confidence", "fold", "dice_s1", "dice_s2", "dice_rp", "dice_rc"]

_REQUIRED_VARIANT = {
    "repeat": ("relation",),
    "anchor_train": ("relation",),
    "anchor_test": ("relation",),
    "mc_dropout": ("vanilla_dropout",),
    "vanilla": ("vanilla", "vanilla_dropout"),
}


@dataclass(frozen=True)
class InferenceMode:
    kind: str = "repeat"
    anchor_count: int = 20
    mc_passes: int = 20

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ConfigError(f"unknown inference mode {self.kind!r}; expected one of {MODE_KINDS}")
        if self.kind.startswith("anchor") and self.anchor_count < 1:
            raise ConfigError("anchor_count must be >= 1")
        if self.kind == "mc_dropout" and self.mc_passes < 2:
            raise ConfigError("mc_passes must be >= 2; union and intersection of one map are degenerate")

    @property
    def variants(self) -> tuple:
        return _REQUIRED_VARIANT[self.kind]


@dataclass
class PredictionRecord:
    image_id: int
    mode: str
    s1_hat: np.ndarray
    s_avg: np.ndarray
    s2_hat: Optional[np.ndarray] = None
    rp_hat: Optional[np.ndarray] = None
    rc_hat: Optional[np.ndarray] = None
    confidence: Optional[float] = None

    @property
    def reported(self) -> np.ndarray:
        """The mask whose Dice is the mode's accuracy."""
        return self.s1_hat if self.mode.startswith("anchor") else self.s_avg

    def relation_pair(self) -> Optional[RelationPair]:
        if self.rp_hat is None or self.rc_hat is None:
            return None
        return RelationPair(self.rp_hat, self.rc_hat)


def check_variant(net: Network, kind: str) -> None:
    allowed = _REQUIRED_VARIANT[kind]
    if net.config.variant not in allowed:
        raise UsageError(
            f"mode {kind!r} needs a {' or '.join(allowed)} checkpoint, got {net.config.variant!r}")


def _batch(images: Sequence[np.ndarray]) -> np.ndarray:
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    return np.stack([a[None] if a.ndim == 2 else a for a in arrs])


def _probs(logits) -> np.ndarray:
    return _sigmoid(logits.data[:, 0])


def _repeat_from_probs(image_id: int, p: Dict[str, np.ndarray]) -> PredictionRecord:
    rp, rc = binarize(p["rp"]), binarize(p["rc"])
    return PredictionRecord(
        image_id=image_id, mode="repeat",
        s1_hat=binarize(p["s1"]), s2_hat=binarize(p["s2"]),
        s_avg=binarize((p["s1"] + p["s2"]) / 2.0),
        rp_hat=rp, rc_hat=rc, confidence=confidence(RelationPair(rp, rc)),
    )


def infer_repeat_batch(net: Network, images: Sequence[np.ndarray], image_ids: Sequence[int]) -> List[PredictionRecord]:
    check_variant(net, "repeat")
    x = _batch(images)
    out = forward_relation(net, x, x)
    probs = {h: _probs(t) for h, t in out.heads().items()}
    return [_repeat_from_probs(i, {h: p[k] for h, p in probs.items()}) for k, i in enumerate(image_ids)]


def infer_repeat(net: Network, image: np.ndarray, image_id: int = 0) -> PredictionRecord:
    """Feed the image as both inputs; confidence is Dice(rp_hat, rc_hat)."""
    return infer_repeat_batch(net, [image], [image_id])[0]


def select_anchors(pool: Sequence[int], image_id: int, count: int, seed: int) -> List[int]:
    """Seeded draw of ``count`` anchors from ``pool``, never the image itself."""
    candidates = sorted(i for i in pool if i != image_id)
    if not candidates:
        raise UsageError(f"no anchor candidates for image {image_id}")
    rng = np.random.default_rng([seed, image_id])
    picked = rng.choice(len(candidates), size=count, replace=count > len(candidates))
    return [candidates[j] for j in picked]


def infer_anchored(net: Network, image: np.ndarray, anchors: Sequence[int],
                   dataset: Mapping[int, SampleRecord], image_id: int = 0,
                   mode: str = "anchor_train") -> PredictionRecord:
    """Average the s1 head over anchors; confidence comes from the repeat pass."""
    check_variant(net, "repeat")
    if len(anchors) == 0:
        raise UsageError("infer_anchored needs at least one anchor")
    missing = [a for a in anchors if a not in dataset]
    if missing:
        raise DatasetIOError(f"anchor ids not in dataset: {missing[:5]}")
    x1 = _batch([image] * len(anchors))
    x2 = _batch([dataset[a].image for a in anchors])
    s1_probs = _probs(forward_relation(net, x1, x2).s1_logits)
    total = np.zeros_like(s1_probs[0])
    for p in s1_probs:
        total += p
    mean_s1 = total / len(anchors)
    rec = infer_repeat(net, image, image_id)
    rec.mode = mode
    rec.s1_hat = binarize(mean_s1)
    return rec


def infer_mc_dropout(net: Network, image: np.ndarray, n: int, seed: int, image_id: int = 0) -> PredictionRecord:
    """n dropout samples; their union/intersection give the relation pair."""
    check_variant(net, "mc_dropout")
    if n < 2:
        raise ConfigError("MC dropout needs n >= 2 passes")
    rng = np.random.default_rng([seed, image_id])
    probs = _probs(forward_dropout(net, _batch([image] * n), sample=True, rng=rng))
    pair = aggregate_mc([binarize(p) for p in probs])
    total = np.zeros_like(probs[0])
    for p in probs:
        total += p
    reported = binarize(total / n)
    return PredictionRecord(image_id=image_id, mode="mc_dropout", s1_hat=reported, s_avg=reported,
                            rp_hat=pair.possible, rc_hat=pair.consensus, confidence=confidence(pair))


def infer_vanilla(net: Network, image: np.ndarray, image_id: int = 0) -> PredictionRecord:
    check_variant(net, "vanilla")
    mask = binarize(_probs(forward_vanilla(net, _batch([image])))[0])
    return PredictionRecord(image_id=image_id, mode="vanilla", s1_hat=mask, s_avg=mask)


def run_mode(net: Network, mode: InferenceMode, dataset: Mapping[int, SampleRecord],
             test_ids: Sequence[int], train_ids: Sequence[int], seed: int) -> List[PredictionRecord]:
    """Run one mode over ``test_ids`` in ascending id order."""
    check_variant(net, mode.kind)
    test_ids = sorted(test_ids)
    if mode.kind == "repeat":
        return infer_repeat_batch(net, [dataset[i].image for i in test_ids], test_ids)
    out = []
    for i in test_ids:
        image = dataset[i].image
        if mode.kind == "vanilla":
            out.append(infer_vanilla(net, image, i))
        elif mode.kind == "mc_dropout":
            out.append(infer_mc_dropout(net, image, mode.mc_passes, seed, i))
        else:
            pool = train_ids if mode.kind == "anchor_train" else test_ids
            anchors = select_anchors(pool, i, mode.anchor_count, seed)
            out.append(infer_anchored(net, image, anchors, dataset, i, mode=mode.kind))
    return out


def score(record: PredictionRecord, gt: np.ndarray) -> Dict[str, Optional[float]]:
    """Dice of the reported mask and of every head against ground truth."""
    heads = {"s1": record.s1_hat, "s2": record.s2_hat, "rp": record.rp_hat, "rc": record.rc_hat}
    if record.mode in ("mc_dropout", "vanilla"):
        heads = {"s1": record.s1_hat, "s2": None, "rp": None, "rc": None}
    out = {f"dice_{h}": (None if m is None else dice(m, gt)) for h, m in heads.items()}
    out["dice"] = dice(record.reported, gt)
    return out


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_predictions(out_dir, records: Sequence[PredictionRecord], dataset: Mapping[int, SampleRecord]) -> Path:
    """Masks plus ``predictions.csv``; returns the CSV path."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"{root}: cannot create predictions directory") from exc
    rows = []
    for rec in records:
        sample = dataset[rec.image_id]
        netpbm.write_pbm(root / f"{rec.image_id}_s1.pbm", rec.s1_hat)
        netpbm.write_pbm(root / f"{rec.image_id}_savg.pbm", rec.s_avg)
        if rec.rp_hat is not None:
            netpbm.write_pbm(root / f"{rec.image_id}_rp.pbm", rec.rp_hat)
            netpbm.write_pbm(root / f"{rec.image_id}_rc.pbm", rec.rc_hat)
        s = score(rec, sample.mask)
        rows.append([rec.image_id, rec.mode, _fmt(s["dice"]), _fmt(rec.confidence),
                     "" if sample.fold is None else sample.fold,
                     _fmt(s["dice_s1"]), _fmt(s["dice_s2"]), _fmt(s["dice_rp"]), _fmt(s["dice_rc"])])
    path = root / "predictions.csv"
    tmp = root / "predictions.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(PREDICTION_COLUMNS)
        writer.writerows(rows)
    os.replace(tmp, path)
    return path
