import csv

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from relseg.errors import ConfigError, UndefinedCorrelationError
from relseg.evaluation import (ConfidenceRow, CrossValConfig, analyze, coverage_curve, cross_validate, evaluate,
                               merge_predictions, pearson, rank_by_difficulty)
from relseg.inference import PREDICTION_COLUMNS, InferenceMode
from relseg.synth import assign_folds, generate_dataset, split_folds
from relseg.trainer import TrainConfig
from relseg.unet import ModelConfig

finite = st.floats(-1e3, 1e3, allow_nan=False)


def write_rows(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(PREDICTION_COLUMNS)
        for r in rows:
            w.writerow([r.get(c, "") for c in PREDICTION_COLUMNS])
    return path


def repeat_rows(ids, folds, dices, confs):
    return [{"id": i, "mode": "repeat", "dice": f"{d:.6f}", "confidence": f"{c:.6f}", "fold": f,
             "dice_s1": f"{d:.6f}", "dice_s2": f"{d:.6f}", "dice_rp": f"{d:.6f}", "dice_rc": f"{d:.6f}"}
            for i, f, d, c in zip(ids, folds, dices, confs)]


# ---- pearson -----------------------------------------------------------------------

def test_pearson_examples():
    xs = [0.5, 1.0, 2.0, 7.0]
    assert pearson(xs, [2 * x + 1 for x in xs]) == pytest.approx(1.0, abs=1e-15)
    assert pearson(xs, [-x for x in xs]) == pytest.approx(-1.0, abs=1e-15)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_pearson_constant_series_is_undefined():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30), st.floats(0.1, 10), finite)
def test_pearson_affine_invariance(pairs, scale, shift):
    xs, ys = [p[0] for p in pairs], [p[1] for p in pairs]
    assume(np.std(xs) > 1e-3 and np.std(ys) > 1e-3)
    r = pearson(xs, ys)
    assert abs(pearson([scale * x + shift for x in xs], ys) - r) < 1e-9
    assert abs(pearson([-x for x in xs], ys) + r) < 1e-12


def test_pearson_matches_numpy():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-14)


# ---- coverage / ranking ---------------------------------------------------------------

def test_coverage_examples():
    flat = coverage_curve([ConfidenceRow(i, 0.7, 0.4) for i in range(7)])
    assert all(mean == pytest.approx(0.7, abs=1e-15) for _, mean, _ in flat.deciles)
    two = coverage_curve([ConfidenceRow(0, 1.0, 0.9), ConfidenceRow(1, 0.0, 0.1)])
    assert two.mean_at(50) == 1.0 and two.mean_at(100) == 0.5


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_coverage_invariants(dices):
    rows = [ConfidenceRow(i, d, c) for i, (d, c) in enumerate(zip(dices, np.linspace(1, 0, len(dices))))]
    curve = coverage_curve(rows)
    assert curve.mean_at(100) == pytest.approx(float(np.mean(dices)), abs=1e-12)
    counts = [k for _, _, k in curve.deciles]
    assert counts == sorted(counts) and counts[-1] == len(dices) and counts[0] >= 1


@given(st.lists(st.floats(0, 1), min_size=2, max_size=40, unique=True))
def test_coverage_non_increasing_when_confidence_tracks_dice(dices):
    rows = [ConfidenceRow(i, d, d ** 3) for i, d in enumerate(dices)]
    means = [m for _, m, _ in coverage_curve(rows).deciles]
    assert all(a >= b - 1e-12 for a, b in zip(means, means[1:]))


def test_ranking():
    rows = [ConfidenceRow(5, 0.9, 0.8), ConfidenceRow(2, 0.5, 0.3), ConfidenceRow(9, 0.7, 0.6)]
    assert rank_by_difficulty(rows) == [2, 9, 5]
    assert rank_by_difficulty(rows[::-1]) == [2, 9, 5]
    ties = [ConfidenceRow(4, 0.1, 0.5), ConfidenceRow(1, 0.2, 0.5)]
    assert rank_by_difficulty(ties) == [1, 4]


# ---- report ----------------------------------------------------------------------------

def test_five_folds_enter_the_mean(tmp_path):
    rng = np.random.default_rng(1)
    ids = list(range(25))
    folds = [i % 5 for i in ids]
    rows = repeat_rows(ids, folds, rng.random(25), rng.random(25))
    an = analyze(merge_predictions([write_rows(tmp_path / "p.csv", rows)]))
    per_fold = [r for r in an.report if r[0] == "relation_avg" and r[1] not in ("mean", "pooled")]
    assert [r[1] for r in per_fold] == ["0", "1", "2", "3", "4"]
    means = [float(r[2]) for r in per_fold]
    mean_row = an.summary("relation_avg")
    assert mean_row["mean_dice"] == pytest.approx(np.mean(means), abs=1e-6)
    assert mean_row["std_dice"] == pytest.approx(np.std(means, ddof=1), abs=1e-6)


def test_identical_fold_means_have_zero_std(tmp_path):
    ids = list(range(10))
    # ids 2k and 2k+1 share a Dice value but land in different folds
    rows = repeat_rows(ids, [i % 2 for i in ids], np.repeat([0.2, 0.9, 0.4, 0.6, 0.5], 2), np.linspace(0, 1, 10))
    an = analyze(merge_predictions([write_rows(tmp_path / "p.csv", rows)]))
    assert an.summary("relation_avg")["std_dice"] == 0.0


def test_single_file_full_coverage_equals_mean(tmp_path):
    rng = np.random.default_rng(2)
    dices = np.round(rng.random(12), 6)
    path = write_rows(tmp_path / "p.csv", repeat_rows(range(12), [0] * 12, dices, rng.random(12)))
    evaluate([path], tmp_path / "out")
    cov = list(csv.DictReader(open(tmp_path / "out" / "coverage.csv", newline="")))
    full = [r for r in cov if r["mode"] == "relation_avg" and r["d"] == "100"][0]
    assert float(full["mean_dice"]) == pytest.approx(dices.mean(), abs=5e-7)
    assert full["count"] == "12"


def test_reanalysis_is_byte_identical(tmp_path):
    rng = np.random.default_rng(3)
    path = write_rows(tmp_path / "p.csv", repeat_rows(range(20), [i % 4 for i in range(20)],
                                                      rng.random(20), rng.random(20)))
    evaluate([path], tmp_path / "a")
    evaluate([path], tmp_path / "b")
    for name in ("report.csv", "coverage.csv", "ranking.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fold_conflicts_and_duplicates(tmp_path):
    a = write_rows(tmp_path / "a" / "p.csv", repeat_rows([1, 2], [0, 0], [0.5, 0.6], [0.1, 0.2]))
    b = write_rows(tmp_path / "b" / "p.csv", repeat_rows([1], [3], [0.5], [0.1]))
    with pytest.raises(ConfigError, match="fold"):
        merge_predictions([a, b])
    with pytest.raises(ConfigError, match="twice"):
        merge_predictions([a, a])


# ---- cross-validation ------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_cv_setup():
    records = generate_dataset(15, (16, 16), seed=4)
    assign_folds(records, split_folds([r.id for r in records], 3, seed=4))
    cfg = CrossValConfig(
        model=ModelConfig(base_channels=4, depth=2, input_size=(16, 16)),
        train=TrainConfig(epochs=2, initial_lr=3e-3, batch_size=4, batches_per_epoch=2, seed=1),
        modes=tuple(InferenceMode(k, anchor_count=3, mc_passes=3)
                    for k in ("vanilla", "repeat", "anchor_train", "anchor_test", "mc_dropout")),
        inference_seed=1)
    return records, cfg


def test_cross_validate_layout_and_determinism(tmp_path, tiny_cv_setup):
    records, cfg = tiny_cv_setup
    res = cross_validate(records, cfg, tmp_path / "a")
    assert len(res.folds) == 3
    for f in range(3):
        for variant in ("relation", "vanilla", "vanilla_dropout"):
            assert (tmp_path / "a" / f"fold{f}" / variant / "checkpoint.rseg").exists()
    labels = {r[0] for r in res.analysis.report}
    assert {"unet", "relation_avg", "relation_rp", "unet_mc_dropout", "relation_anchor_train"} <= labels
    assert len(res.analysis.fold_mean_dice["relation_avg"]) == 3

    cross_validate(records, cfg, tmp_path / "b", jobs=2)
    for name in ("report.csv", "coverage.csv", "ranking.csv", "fold1/relation/checkpoint.rseg",
                 "fold2/anchor_test/predictions.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cross_validate_rejects_empty_fold(tmp_path, tiny_cv_setup):
    records, cfg = tiny_cv_setup
    records = generate_dataset(6, (16, 16), seed=4)
    for r in records:
        r.fold = 0 if r.id < 3 else 2
    with pytest.raises(ConfigError):
        cross_validate(records, cfg, tmp_path)


def test_fold_with_constant_confidence_has_no_pearson(tmp_path):
    rng = np.random.default_rng(6)
    dices = rng.random(12)
    confs = np.where(np.arange(12) % 3 == 0, 0.5, rng.random(12))  # fold 0 gets a constant confidence
    path = write_rows(tmp_path / "p.csv", repeat_rows(range(12), [i % 3 for i in range(12)], dices, confs))
    an = analyze(merge_predictions([path]))
    fold_rows = {r[1]: r for r in an.report if r[0] == "relation_avg"}
    assert fold_rows["0"][4] == "" and fold_rows["1"][4] != ""
    kept = [an.fold_pearson["relation_avg"][f] for f in (1, 2)]
    assert an.summary("relation_avg")["pearson"] == pytest.approx(np.mean(kept), abs=1e-6)
