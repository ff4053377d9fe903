import numpy as np
import pytest

from sbaudit import nn
from sbaudit.evaluation import (
    DEFAULT_FRACTIONS, DELETION, FIRST_POINT, INSERTION, UNALTERED, AuditSettings, EvalCurve,
    InvariantError, bias_delta, curve_auc, evaluation_curve, normalize_pair, perturb,
    perturb_batch, pixel_count, read_curves_csv, read_report_csv, run_audit, write_curves_csv,
    write_report_csv,
)
from sbaudit.metrics import ScoreSet, error_rates_at, eer_operating_point
from sbaudit.synthgen import GenConfig, Group, balanced_counts, generate, split_by

RNG = np.random.default_rng(0)
IMAGE = RNG.uniform(0.05, 1.0, (1, 32, 32))
RANKING = RNG.permutation(1024)


def curve(values, group=Group.A, fractions=DEFAULT_FRACTIONS, unaltered=None, mode=DELETION):
    return EvalCurve(mode, group, "PAD_B", "GradCAM", tuple(fractions), tuple(values), 0.5,
                     values[0] if unaltered is None else unaltered)


def riemann_oracle(x, y, n=10_000):
    # midpoint sum over piecewise-linear interpolation, divided by span;
    # exact per cell when the knots fall on cell boundaries
    grid = x[0] + (np.arange(n) + 0.5) * (x[-1] - x[0]) / n
    return float(np.interp(grid, x, y).mean())


# perturbation

def test_default_grid():
    assert DEFAULT_FRACTIONS[1:] == (0.05, 0.10, 0.15, 0.20, 0.25, 0.30)


def test_deletion_zero_is_identity():
    assert np.array_equal(perturb(IMAGE, RANKING, 0.0, DELETION), IMAGE)


def test_insertion_boundaries():
    assert np.all(perturb(IMAGE, RANKING, 0.0, INSERTION) == 0)
    assert np.array_equal(perturb(IMAGE, RANKING, 1.0, INSERTION), IMAGE)
    assert np.all(perturb(IMAGE, RANKING, 1.0, DELETION) == 0)


def test_pixel_counts_half_even():
    assert pixel_count(0.05) == 51
    assert [pixel_count(f) for f in DEFAULT_FRACTIONS] == [0, 51, 102, 154, 205, 256, 307]
    assert pixel_count(0.5, 3) == 2 and pixel_count(0.5, 5) == 2


def test_deletion_and_insertion_touch_top_k():
    for f in DEFAULT_FRACTIONS:
        k = pixel_count(f)
        d = perturb(IMAGE, RANKING, f, DELETION).ravel()
        i = perturb(IMAGE, RANKING, f, INSERTION).ravel()
        assert np.count_nonzero(d == 0) == k
        assert np.count_nonzero(i) == k
        assert set(np.flatnonzero(d == 0)) == set(RANKING[:k].tolist())
        assert np.array_equal(i[RANKING[:k]], IMAGE.ravel()[RANKING[:k]])


def test_deletion_idempotent():
    once = perturb(IMAGE, RANKING, 0.2, DELETION)
    assert np.array_equal(perturb(once, RANKING, 0.2, DELETION), once)


def test_perturb_validation():
    with pytest.raises(ValueError):
        perturb(IMAGE, np.zeros(1024, dtype=int), 0.1, DELETION)
    with pytest.raises(ValueError):
        perturb(IMAGE, RANKING, 1.5, DELETION)
    with pytest.raises(ValueError):
        perturb(IMAGE, RANKING, 0.1, "blur")


def test_batch_matches_single():
    imgs = RNG.random((3, 1, 32, 32))
    ranks = np.stack([RNG.permutation(1024) for _ in range(3)])
    out = perturb_batch(imgs, ranks, 0.15, INSERTION)
    for i in range(3):
        assert np.array_equal(out[i], perturb(imgs[i], ranks[i], 0.15, INSERTION))


# curves

def test_constant_curve_auc():
    for v in (0.0, 0.37, 1.0):
        assert curve_auc(curve([v] * 7)) == v
        assert curve_auc(([0.0, 0.1, 0.7], [v] * 3)) == v


def test_linear_curve_auc():
    x = np.array(DEFAULT_FRACTIONS)
    y = 0.5 - (0.4 / 0.3) * x
    assert curve_auc((x, y)) == pytest.approx(0.3, abs=1e-12)
    assert abs(curve_auc((x, y)) - riemann_oracle(x, y)) < 1e-9


def test_auc_matches_riemann_oracle():
    # knots on a 1/100 grid over [0, 1] line up with the oracle's 10,000 cells
    rng = np.random.default_rng(9)
    for _ in range(20):
        inner = np.sort(rng.choice(np.arange(1, 100), rng.integers(0, 10), replace=False)) / 100
        x = np.concatenate([[0.0], inner, [1.0]])
        y = rng.random(len(x))
        assert abs(curve_auc((x, y)) - riemann_oracle(x, y)) < 1e-9


def test_auc_without_anchor():
    x, y = (0.0, 0.1, 0.2), (1.0, 0.0, 0.0)
    assert curve_auc((x, y), include_anchor=False) == 0.0
    assert curve_auc((x, y)) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        curve_auc(((0.0,), (1.0,)))


def test_normalize_first_point():
    male = curve([0.1, 0.2, 0.3, 0.35, 0.4, 0.4, 0.45])
    female = curve([0.3, 0.35, 0.5, 0.5, 0.55, 0.6, 0.6], group=Group.B)
    norm = normalize_pair(male, female, FIRST_POINT)
    assert norm.hter[0] == male.hter[0]
    assert norm.normalized and norm.group is Group.B


def test_normalize_constant_offset_gives_zero_delta():
    male = curve([0.1, 0.2, 0.3, 0.35, 0.4, 0.4, 0.45])
    for c in (0.0, 0.123, -0.05, 0.5):
        female = curve([v + c for v in male.hter], group=Group.B)
        norm = normalize_pair(male, female)
        assert bias_delta(curve_auc(male), curve_auc(norm)) < 1e-12


def test_normalize_unaltered_anchor():
    male = curve([0.5, 0.4, 0.3, 0.2, 0.2, 0.1, 0.1], unaltered=0.05, mode=INSERTION)
    female = curve([0.5, 0.45, 0.4, 0.3, 0.3, 0.2, 0.2], unaltered=0.15, group=Group.B, mode=INSERTION)
    norm = normalize_pair(male, female, UNALTERED)
    assert norm.hter[0] == pytest.approx(0.4)
    assert norm.unaltered_hter == pytest.approx(0.05)


def test_normalize_rejects_mismatch():
    with pytest.raises(ValueError):
        normalize_pair(curve([0.1] * 7), curve([0.1] * 7, mode=INSERTION))


def test_bias_delta_values():
    assert bias_delta(0.104, 0.109) == pytest.approx(0.005, abs=1e-12)
    assert bias_delta(0.067, 0.078) == pytest.approx(0.011, abs=1e-12)
    assert bias_delta(0.119, 0.110) == pytest.approx(0.009, abs=1e-12)
    assert bias_delta(0.3, 0.3) == 0.0
    with pytest.raises(ValueError):
        bias_delta(float("nan"), 0.1)


def test_eval_curve_validation():
    with pytest.raises(ValueError):
        curve([0.1, 0.2], fractions=(0.1, 0.2))
    with pytest.raises(ValueError):
        curve([0.1, float("inf"), 0.2], fractions=(0.0, 0.1, 0.2))


# on a trained model

@pytest.fixture(scope="module")
def trained():
    cfg = GenConfig(seed=4, counts=balanced_counts(40), noise_sigma=0.2)
    data = generate(cfg)
    model = nn.train(nn.init_model(4), data, nn.TrainConfig(epochs=3, batch_size=16, seed=4))
    test = generate(GenConfig(seed=99, counts=balanced_counts(12), noise_sigma=0.2))
    return model, test


def test_curve_anchors(trained):
    model, test = trained
    scores = ScoreSet.from_dataset(nn.score_images(model, test.images), test)
    thr = eer_operating_point(scores).threshold
    part = split_by(test, group=Group.A)
    dele = evaluation_curve(model, part, "GradCAM", DELETION, threshold=thr)
    ins = evaluation_curve(model, part, "GradCAMpp", INSERTION, threshold=thr)
    expected = error_rates_at(scores.group(Group.A), thr).hter
    assert dele.hter[0] == expected == dele.unaltered_hter
    assert ins.hter[0] == 0.5  # all-black canvases score identically
    assert ins.unaltered_hter == expected


def test_curve_rejects_mixed_groups(trained):
    model, test = trained
    with pytest.raises(ValueError):
        evaluation_curve(model, test, "GradCAM", DELETION)


def test_run_audit_report_and_csvs(trained, tmp_path):
    model, test = trained
    models = {"PAD_B": model, "PAD_M": model, "PAD_F": model}
    report = run_audit(models, test)
    assert len(report.entries) == 12
    assert len(report.curves) == 36
    for e in report.entries:
        assert e.delta == abs(e.auc_male - e.auc_female_norm)
    write_report_csv(report, tmp_path / "report.csv")
    write_curves_csv(report.curves, tmp_path / "curves.csv")
    rows = read_report_csv(tmp_path / "report.csv")
    keys = [(r["model_tag"], r["explainer"], r["mode"]) for r in rows]
    assert keys == sorted(keys) and len(rows) == 12
    assert len((tmp_path / "curves.csv").read_text().splitlines()) == 1 + 3 * 2 * 2 * 3 * 7
    series = read_curves_csv(tmp_path / "curves.csv")
    assert series[("PAD_B", "GradCAM", "deletion", "B", 1)][0] == list(DEFAULT_FRACTIONS)

    threaded = run_audit(models, test, AuditSettings(threads=3))
    write_report_csv(threaded, tmp_path / "report3.csv")
    assert (tmp_path / "report3.csv").read_bytes() == (tmp_path / "report.csv").read_bytes()


def test_run_audit_single_explainer(trained):
    model, test = trained
    report = run_audit({"PAD_B": model}, test, AuditSettings(explainers=("GradCAMpp",)))
    assert len(report.entries) == 2


def test_run_audit_requires_all_cells(trained):
    model, test = trained
    with pytest.raises(ValueError):
        run_audit({"PAD_B": model}, split_by(test, group=Group.A))


def test_audit_settings_validation():
    with pytest.raises(ValueError):
        AuditSettings(explainers=())
    with pytest.raises(ValueError):
        AuditSettings(normalization_anchor="middle")
    with pytest.raises(ValueError):
        AuditSettings(fractions=(0.1, 0.2))
    with pytest.raises(ValueError):
        AuditSettings(threads=0)
    assert issubclass(InvariantError, RuntimeError)
