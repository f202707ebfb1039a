import numpy as np
import pytest

import milfool as mf
from tests.test_attack import ConstantStub, MeanSignStub


def balanced_dataset():
    bags = tuple(
        mf.Bag(i, np.full((2, 3), v), label)
        for i, (v, label) in enumerate([(1.0, 1), (2.0, 1), (-1.0, 0), (-2.0, 0)])
    )
    return mf.BagDataset(bags, 3)


def test_accuracy_and_recall_examples():
    ds = balanced_dataset()
    stub = MeanSignStub()
    assert mf.accuracy(stub, ds) == 1.0
    assert mf.recall(stub, ds) == 1.0
    const = ConstantStub()
    assert mf.accuracy(const, ds) == 0.5
    assert mf.recall(const, ds) == 0.0


def test_recall_requires_positive_bags():
    ds = mf.BagDataset((mf.Bag(0, np.ones((1, 3)), 0),), 3)
    with pytest.raises(ValueError, match="positive"):
        mf.recall(MeanSignStub(), ds)


def test_decrease_zero_perturbation_is_exactly_zero(small_model, small_synth):
    assert mf.decrease(small_model, small_synth, np.zeros(8)) == 0.0
    assert mf.decrease(small_model, small_synth, 0.0) == 0.0


def test_decrease_full_flip_is_one():
    ds = balanced_dataset()
    stub = MeanSignStub()
    # shifting the first feature by -10 flips positives, +... use per-bag map to flip all
    per_bag = {
        0: np.array([-10.0, 0.0, 0.0]),
        1: np.array([-10.0, 0.0, 0.0]),
        2: np.array([10.0, 0.0, 0.0]),
        3: np.array([10.0, 0.0, 0.0]),
    }
    assert mf.decrease(stub, ds, per_bag) == 1.0


def test_decrease_matches_accuracy_difference(small_model, small_synth):
    pert = mf.baseline_perturbation("mean", 8, 2.0)
    labels, clean, perturbed = mf.evaluate._predictions(small_model, small_synth, pert)
    expected = (labels == clean).mean() - (labels == perturbed).mean()
    assert mf.decrease(small_model, small_synth, pert) == pytest.approx(expected, abs=0)


def test_xi_sweep_baseline_row(small_model, small_synth):
    rows = mf.xi_sweep(small_model, small_synth, "mean", "ave", [0.0, 0.5, 1.0])
    assert len(rows) == 3
    base = rows[0]
    assert base.decrease == 0.0
    assert base.fooling_rate == 0.0
    assert base.perturbation_id == "none"
    assert base.acc == mf.accuracy(small_model, small_synth)
    assert base.recall == mf.recall(small_model, small_synth)
    assert [r.xi for r in rows] == [0.0, 0.5, 1.0]


def test_xi_sweep_default_grid_shape(small_model, small_synth):
    grid = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0]
    rows = mf.xi_sweep(small_model, small_synth, "random", "ave", grid)
    assert len(rows) == 9  # clean baseline plus 8 perturbed rows


def test_xi_sweep_validation(small_model, small_synth):
    with pytest.raises(ValueError, match="sorted"):
        mf.xi_sweep(small_model, small_synth, "mean", "ave", [0.5, 0.1])
    with pytest.raises(ValueError, match="non-negative"):
        mf.xi_sweep(small_model, small_synth, "mean", "ave", [-0.5, 0.1])


def test_transfer_matrix_single_model(small_model, small_synth):
    config = mf.AttackConfig(mode="ave", xi=1.0, max_epochs=3, seed=2)
    matrix = mf.transfer_matrix([small_model], small_synth, config)
    assert matrix.values.shape == (1, 1)
    pert, _ = mf.mi_uap(small_model, small_synth, config)
    standalone = mf.decrease(small_model, small_synth, pert)
    assert matrix.values[0, 0] == standalone


def test_transfer_matrix_two_models(small_synth):
    m1, _ = mf.train(mf.init_model(8, hidden=8, attention_dim=4, seed=1), small_synth, epochs=10, learning_rate=1e-3, seed=1)
    m2, _ = mf.train(mf.init_model(8, hidden=8, attention_dim=4, seed=2), small_synth, epochs=10, learning_rate=1e-3, seed=2)
    config = mf.AttackConfig(mode="att", xi=1.0, max_epochs=2, seed=0)
    matrix = mf.transfer_matrix([m1, m2], small_synth, config, names=["a", "b"])
    assert matrix.source_ids == ("a", "b")
    assert matrix.values.shape == (2, 2)
    again = mf.transfer_matrix([m1, m2], small_synth, config, names=["a", "b"])
    assert np.array_equal(matrix.values, again.values)


def test_transfer_matrix_dimension_mismatch(small_model, small_synth):
    other = mf.init_model(5, hidden=4, attention_dim=2, seed=0)
    with pytest.raises(ValueError, match="dimension"):
        mf.transfer_matrix([small_model, other], small_synth, mf.AttackConfig(xi=1.0))


def test_attention_summary_degenerate_single_bin():
    summary = mf.attention_summary(np.full(40, 0.5))
    assert (summary.counts > 0).sum() == 1
    assert summary.counts.sum() == 40


def test_attention_summary_counts_and_density():
    rng = np.random.default_rng(1)
    values = rng.uniform(0.0, 1.0, size=500)
    summary = mf.attention_summary(values)
    assert summary.counts.sum() == 500
    assert summary.bin_centers.shape == (50,)
    # KDE integrates to ~1 over the grid (mass beyond [0,1] is small for interior data)
    integral = np.trapezoid(summary.kde_density, summary.kde_x)
    assert 0.9 <= integral <= 1.1


def test_attention_concentrates_near_zero(digits_sets, digits_models):
    # a trained model attends to few instances: the lowest histogram bin is modal
    # and most attention weights fall below 1/(mean bag size)
    train_ds, _ = digits_sets
    values = mf.collect_attention(digits_models(5), train_ds)
    summary = mf.attention_summary(values)
    assert summary.counts.argmax() == 0
    mean_bag_size = np.mean([bag.n_instances for bag in train_ds])
    assert (values < 1.0 / mean_bag_size).mean() > 0.5


def test_attention_summary_validation():
    with pytest.raises(ValueError):
        mf.attention_summary([])
    with pytest.raises(ValueError):
        mf.attention_summary([0.2, 1.5])


def test_adversarial_augment_counts_and_labels(small_model, small_synth):
    config = mf.AttackConfig(mode="att", xi=1.0, seed=4)
    out = mf.adversarial_augment(small_synth, small_model, 0.1, config)
    n_extra = int(np.ceil(0.1 * len(small_synth)))
    assert len(out) == len(small_synth) + n_extra
    for before, after in zip(small_synth.bags, out.bags):
        assert before.id == after.id
        assert np.array_equal(before.instances, after.instances)
    ids = {bag.id: bag for bag in small_synth.bags}
    for extra in out.bags[len(small_synth):]:
        assert extra.id not in ids
        assert extra.label in (0, 1)


def test_adversarial_augment_ratio_zero_identity(small_model, small_synth):
    assert mf.adversarial_augment(small_synth, small_model, 0, mf.AttackConfig(xi=1.0)) is small_synth


def test_adversarial_augment_ratio_validation(small_model, small_synth):
    with pytest.raises(ValueError, match="ratio"):
        mf.adversarial_augment(small_synth, small_model, 1.0, mf.AttackConfig(xi=1.0))
    with pytest.raises(ValueError, match="ratio"):
        mf.adversarial_augment(small_synth, small_model, -0.1, mf.AttackConfig(xi=1.0))


def test_defence_curve_rows(small_synth):
    split = len(small_synth.bags) * 2 // 3
    train_set = mf.BagDataset(small_synth.bags[:split], 8)
    test_set = mf.BagDataset(small_synth.bags[split:], 8)
    rows = mf.defence_curve(
        train_set,
        test_set,
        ratios=[0, 0.1],
        attack_config=mf.AttackConfig(xi=0.5, seed=1),
        hidden=8,
        attention_dim=4,
        epochs=10,
        learning_rate=1e-3,
        seed=1,
    )
    assert [r.ratio for r in rows] == [0.0, 0.1]
    for row in rows:
        assert 0.0 <= row.attacked_acc <= 1.0
        assert row.decrease == pytest.approx(row.clean_acc - row.attacked_acc, abs=1e-12)


def test_metric_csv_writers(tmp_path):
    rows = [
        mf.MetricRow("d", "m", "none", 0.0, "ave", 0.9, 0.8, 0.0, 0.0, 7),
        mf.MetricRow("d", "m", "uap", 0.2, "ave", 0.7, 0.6, 0.2, 0.25, 7),
    ]
    path = tmp_path / "metrics.csv"
    mf.write_metric_rows(path, rows, repro={"seed": 7})
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("# ")
    assert lines[1] == "dataset,model,perturbation,xi,mode,acc,recall,decrease,fooling_rate,seed"
    assert lines[2].split(",")[2] == "none"
    assert len(lines) == 4


def test_transfer_and_summary_csv_writers(tmp_path):
    matrix = mf.TransferMatrix(("a", "b"), ("a", "b"), np.array([[0.1, 0.2], [0.3, 0.4]]))
    mf.write_transfer_csv(tmp_path / "t.csv", matrix)
    lines = (tmp_path / "t.csv").read_text().strip().splitlines()
    assert lines[0] == "source,a,b"
    assert lines[1].startswith("a,0.1")

    summary = mf.attention_summary(np.linspace(0.0, 1.0, 32))
    mf.write_histogram_csv(tmp_path / "h.csv", summary)
    mf.write_kde_csv(tmp_path / "k.csv", summary)
    hist = (tmp_path / "h.csv").read_text().strip().splitlines()
    assert hist[0] == "bin_center,count"
    assert len(hist) == 51
    kde = (tmp_path / "k.csv").read_text().strip().splitlines()
    assert kde[0] == "x,density"
    assert len(kde) == 257
