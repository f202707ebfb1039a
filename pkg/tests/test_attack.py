import numpy as np
import pytest

import milfool as mf
from milfool.attack import recompute_fooling_rate
from milfool.model import ForwardTrace
from tests.conftest import MaxInstanceLinearScorer, make_margin_bag


class MeanSignStub:
    """Predicts 1 iff the mean of the first feature is positive; d = anything."""

    def forward(self, x):
        x = mf.data.as_instance_matrix(x)
        t = float(np.tanh(x[:, 0].mean())) / 2.0
        probs = np.array([0.5 - t, 0.5 + t])
        alpha = np.full(x.shape[0], 1.0 / x.shape[0])
        return ForwardTrace(probs, x.mean(axis=0), alpha, int(probs[1] > probs[0]))


class ConstantStub:
    """Always predicts class 0."""

    def forward(self, x):
        x = mf.data.as_instance_matrix(x)
        alpha = np.full(x.shape[0], 1.0 / x.shape[0])
        return ForwardTrace(np.array([0.9, 0.1]), x.mean(axis=0), alpha, 0)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        mf.AttackConfig(max_iters=0)
    with pytest.raises(ValueError):
        mf.AttackConfig(delta=0.0)
    with pytest.raises(ValueError):
        mf.AttackConfig(delta=1.5)
    with pytest.raises(ValueError):
        mf.AttackConfig(xi=-1.0)
    with pytest.raises(ValueError):
        mf.AttackConfig(mode="mean")
    with pytest.raises(ValueError):
        mf.AttackConfig(projection_norm="l1")


def test_aggregate_gradient():
    rows = np.array([[1.0, 2.0], [3.0, 4.0]])
    trace = ForwardTrace(np.array([0.4, 0.6]), np.zeros(2), np.array([0.9, 0.1]), 1)
    assert np.allclose(mf.aggregate_gradient(rows, "ave", trace), [2.0, 3.0])
    assert np.allclose(mf.aggregate_gradient(rows, "att", trace), [1.0, 2.0])
    single = np.array([[5.0, 6.0]])
    one = ForwardTrace(np.array([0.4, 0.6]), np.zeros(2), np.array([1.0]), 1)
    assert np.allclose(mf.aggregate_gradient(single, "ave", one), [5.0, 6.0])
    assert np.allclose(mf.aggregate_gradient(single, "att", one), [5.0, 6.0])
    with pytest.raises(ValueError):
        mf.aggregate_gradient(rows, "sum", trace)


def test_deepfool_step():
    zero = mf.deepfool_step(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 0.2, 0.8, 1e-8)
    assert np.array_equal(zero, np.zeros(2))
    step = mf.deepfool_step(np.array([0.0, 2.0]), np.array([0.0, 0.0]), 0.2, 0.8, 1e-12)
    assert np.allclose(step, [0.0, 0.3], atol=1e-9)


def test_deepfool_step_scale_consistency():
    rng = np.random.default_rng(3)
    g = rng.normal(size=5)
    small = mf.deepfool_step(g, np.zeros(5), 0.3, 0.7, 1e-12)
    large = mf.deepfool_step(2.0 * g, np.zeros(5), 0.3, 0.7, 1e-12)
    assert np.allclose(np.linalg.norm(large), 0.5 * np.linalg.norm(small), rtol=1e-9)


def test_deepfool_step_linear_scorer_direction():
    # one step moves along the boundary normal and shrinks the margin
    scorer = MaxInstanceLinearScorer(np.array([0.6, -0.8]))
    x = make_margin_bag(np.random.default_rng(0), scorer, n=4, margin=0.3)
    trace = scorer.forward(x)
    hat, tau = trace.predicted, 1 - trace.predicted
    step = mf.deepfool_step(
        mf.aggregate_gradient(scorer.input_gradient(x, tau), "att", trace),
        mf.aggregate_gradient(scorer.input_gradient(x, hat), "att", trace),
        trace.probs[tau],
        trace.probs[hat],
        1e-8,
    )
    normal = scorer.a * (1.0 if hat == 0 else -1.0)
    cosine = step @ normal / (np.linalg.norm(step) * np.linalg.norm(normal))
    assert cosine > 1.0 - 1e-9
    after = scorer.forward(x + step)
    assert abs(after.probs[1] - after.probs[0]) < abs(trace.probs[1] - trace.probs[0])


def test_project_l2():
    assert np.allclose(mf.project(np.array([3.0, 4.0]), 1.0, "l2"), [0.6, 0.8])
    inside = np.array([0.3, 0.4])
    assert np.array_equal(mf.project(inside, 1.0, "l2"), inside)
    assert np.array_equal(mf.project(inside, np.inf, "l2"), inside)


def test_project_linf():
    assert np.allclose(mf.project(np.array([0.3, -0.7]), 0.5, "linf"), [0.3, -0.5])
    with pytest.raises(ValueError):
        mf.project(np.ones(2), 0.0, "l2")
    with pytest.raises(ValueError):
        mf.project(np.ones(2), 1.0, "l0")


def test_project_properties():
    rng = np.random.default_rng(8)
    for norm in ("l2", "linf"):
        for _ in range(50):
            eps = rng.normal(size=6) * rng.uniform(0.1, 10.0)
            xi = float(rng.uniform(0.2, 3.0))
            once = mf.project(eps, xi, norm)
            twice = mf.project(once, xi, norm)
            assert np.allclose(once, twice, atol=1e-12)
            measured = np.linalg.norm(once) if norm == "l2" else np.abs(once).max()
            assert measured <= xi + 1e-12


def test_perturbation_norms_and_validation():
    pert = mf.Perturbation(np.array([3.0, 4.0]), algorithm="uap")
    assert pert.norm_l2 == 5.0
    assert pert.norm_linf == 4.0
    assert pert.d == 2
    with pytest.raises(ValueError):
        mf.Perturbation(np.zeros((2, 2)), algorithm="uap")
    with pytest.raises(ValueError):
        mf.Perturbation(np.zeros(2), algorithm="other")


def test_mi_cap_flips_and_counts(small_model, small_synth):
    config = mf.AttackConfig(mode="ave")
    flipped = 0
    for bag in small_synth.bags[:20]:
        result = mf.mi_cap(small_model, bag, config)
        assert 1 <= result.iterations <= config.max_iters
        assert result.clean_prediction == small_model.forward(bag.instances).predicted
        perturbed_pred = small_model.forward(bag.instances + result.perturbation.epsilon).predicted
        assert result.success == (perturbed_pred != result.clean_prediction)
        assert result.perturbed_prediction == perturbed_pred
        flipped += result.success
    assert flipped > 10


def test_mi_cap_projection_bounds_result(small_model, small_synth):
    config = mf.AttackConfig(mode="ave", xi=0.05)
    result = mf.mi_cap(small_model, small_synth.bags[0], config)
    assert result.perturbation.norm_l2 <= 0.05 + 1e-12
    # success must describe the projected vector
    pred = small_model.forward(small_synth.bags[0].instances + result.perturbation.epsilon).predicted
    assert result.success == (pred != result.clean_prediction)


def test_mi_cap_deterministic(small_model, small_synth):
    config = mf.AttackConfig(mode="att")
    a = mf.mi_cap(small_model, small_synth.bags[3], config)
    b = mf.mi_cap(small_model, small_synth.bags[3], config)
    assert np.array_equal(a.perturbation.epsilon, b.perturbation.epsilon)
    assert a.iterations == b.iterations


def test_mi_cap_dimension_mismatch(small_model):
    with pytest.raises(ValueError, match="dimension"):
        mf.mi_cap(small_model, np.zeros((2, 5)), mf.AttackConfig())


def test_mi_cap_near_minimal_on_linear_scorer():
    rng = np.random.default_rng(17)
    scorer = MaxInstanceLinearScorer(rng.normal(size=6) / np.linalg.norm(rng.normal(size=6)))
    scorer.a /= np.linalg.norm(scorer.a)
    for _ in range(10):
        margin = float(rng.uniform(0.05, 0.6)) * (1.0 if rng.random() < 0.5 else -1.0)
        x = make_margin_bag(rng, scorer, n=int(rng.integers(1, 8)), margin=margin)
        result = mf.mi_cap(scorer, x, mf.AttackConfig(mode="att"))
        assert result.success
        assert abs(result.perturbation.norm_l2 / abs(margin) - 1.0) <= 0.10


def test_fooling_rate_examples():
    stub = MeanSignStub()
    bags = (
        mf.Bag(0, np.full((2, 3), 1.0), 1),    # clean-correct, flipped by eps
        mf.Bag(1, np.full((3, 3), 0.2), 1),    # clean-correct, flipped
        mf.Bag(2, np.full((2, 3), 5.0), 1),    # clean-correct, survives
        mf.Bag(3, np.full((2, 3), 1.0), 0),    # clean-wrong, excluded
    )
    ds = mf.BagDataset(bags, 3)
    eps = np.array([-1.5, 0.0, 0.0])
    assert mf.fooling_rate(stub, ds, np.zeros(3)) == 0.0
    assert mf.fooling_rate(stub, ds, eps) == pytest.approx(2.0 / 3.0)
    assert mf.fooling_rate(stub, ds, np.array([-100.0, 0.0, 0.0])) == 1.0


def test_fooling_rate_degenerate_denominator():
    ds = mf.BagDataset((mf.Bag(0, np.ones((2, 3)), 1),), 3)  # constant model predicts 0
    assert mf.fooling_rate(ConstantStub(), ds, np.ones(3)) == 0.0


def test_mi_uap_no_clean_correct_bags():
    ds = mf.BagDataset((mf.Bag(0, np.ones((2, 3)), 1), mf.Bag(1, np.zeros((1, 3)), 1)), 3)
    pert, report = mf.mi_uap(ConstantStub(), ds, mf.AttackConfig(xi=1.0))
    assert np.array_equal(pert.epsilon, np.zeros(3))
    assert report.fooling_rate == 0.0
    assert "no clean-correct bags" in report.flags


def test_mi_uap_reaches_threshold(small_model, small_synth):
    config = mf.AttackConfig(mode="ave", xi=5.0, delta=0.5, seed=1)
    pert, report = mf.mi_uap(small_model, small_synth, config)
    assert report.fooling_rate >= 0.5
    assert pert.norm_l2 <= 5.0 + 1e-12
    assert report.epochs_run >= report.best_epoch >= 1
    # reported rate matches an independent recomputation at the returned vector
    assert abs(report.fooling_rate - mf.fooling_rate(small_model, small_synth, pert)) < 1e-12
    assert abs(report.fooling_rate - recompute_fooling_rate(report.per_bag)) < 1e-12


def test_mi_uap_deterministic(small_model, small_synth):
    config = mf.AttackConfig(mode="att", xi=1.0, max_epochs=3, seed=6, shuffle_each_epoch=True)
    a, _ = mf.mi_uap(small_model, small_synth, config)
    b, _ = mf.mi_uap(small_model, small_synth, config)
    assert np.array_equal(a.epsilon, b.epsilon)


def test_mi_cap_dataset_report(small_model, small_synth):
    perts, report = mf.mi_cap_dataset(small_model, small_synth, mf.AttackConfig(mode="ave", xi=2.0))
    assert set(perts) == {bag.id for bag in small_synth.bags}
    assert len(report.per_bag) == len(small_synth.bags)
    for row in report.per_bag:
        assert row.iterations is not None
        assert row.epsilon_l2 == perts[row.bag_id].norm_l2
    assert abs(report.fooling_rate - recompute_fooling_rate(report.per_bag)) < 1e-12


def test_baseline_perturbations():
    a = mf.baseline_perturbation("random", 6, 0.5, seed=3)
    b = mf.baseline_perturbation("random", 6, 0.5, seed=3)
    assert np.array_equal(a.epsilon, b.epsilon)
    assert a.norm_l2 <= 0.5 + 1e-12
    mean = mf.baseline_perturbation("mean", 4, 1.0)
    assert np.allclose(mean.epsilon, [0.5, 0.5, 0.5, 0.5])
    assert mean.norm_l2 == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mf.baseline_perturbation("zeros", 4, 1.0)
    with pytest.raises(ValueError):
        mf.baseline_perturbation("random", 4, 0.0)


def test_perturbation_roundtrip(tmp_path):
    pert = mf.Perturbation(np.array([0.1, -0.2, 0.3]), algorithm="uap", mode="ave", xi=0.5, seed=7)
    path = mf.save_perturbation(pert, tmp_path / "u")
    assert path.name == "u.pert.json"
    loaded = mf.load_perturbation(path)
    assert np.array_equal(loaded.epsilon, pert.epsilon)
    assert (loaded.algorithm, loaded.mode, loaded.xi, loaded.seed) == ("uap", "ave", 0.5, 7)

    corrupted = path.read_text().replace('"norm_l2": ', '"norm_l2": 1e9, "was": ')
    bad = tmp_path / "bad.pert.json"
    bad.write_text(corrupted)
    with pytest.raises(ValueError, match="norm_l2"):
        mf.load_perturbation(bad)


def test_report_files(tmp_path, small_model, small_synth):
    _, report = mf.mi_cap_dataset(small_model, small_synth, mf.AttackConfig(mode="ave", xi=1.0))
    path = mf.save_report(report, tmp_path / "r")
    assert path.name == "r.report.json"
    csv_path = tmp_path / "r.report.csv"
    assert csv_path.exists()
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "bag_id,label,clean_prediction,perturbed_prediction,fooled,iterations,epsilon_l2"
    assert len(lines) == 1 + len(small_synth.bags)
