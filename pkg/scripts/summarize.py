#!/usr/bin/env python3
"""Print per-fold Dice and confidence correlation for a crossval output directory."""
import sys
from pathlib import Path

from relseg.evaluation import analyze, merge_predictions

LABELS = ("unet", "unet_mc_dropout", "relation_avg", "relation_s1", "relation_rp", "relation_rc",
          "relation_anchor_train", "relation_anchor_test")


def fmt(value):
    return "   -  " if value is None else f"{value:.4f}"


def summarize(root: Path) -> None:
    an = analyze(merge_predictions(sorted(root.glob("fold*/*/predictions.csv"))))
    for label in LABELS:
        if label not in an.fold_mean_dice:
            continue
        folds = sorted(an.fold_mean_dice[label])
        dices = " ".join(fmt(an.fold_mean_dice[label][f]) for f in folds)
        corrs = " ".join(fmt(an.fold_pearson.get(label, {}).get(f)) for f in folds)
        print(f"{label:24s} dice {dices}   r {corrs}")
    curve = an.coverage.get("relation_avg")
    if curve is not None:
        print("relation_avg coverage " + " ".join(f"{d}:{m:.4f}" for d, m, _ in curve.deciles))


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: summarize.py CROSSVAL_DIR")
    summarize(Path(sys.argv[1]))
