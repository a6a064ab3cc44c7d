import json

import numpy as np
import pytest

from isfedavg.experiments import (
    ClassificationScenario,
    RegressionScenario,
    gen_classification,
    gen_regression,
    msd,
    read_csv,
    run_experiment,
    single_run,
    test_error,
    write_results,
)
from isfedavg.objectives import Dataset, closed_form_wo

SMALL_REG = RegressionScenario(agents=6, samples=15, dim=3, participants=2, runs=3, iterations=8)
SMALL_CLS = ClassificationScenario(agents=6, samples=(20, 30), participants=2, runs=2,
                                   iterations=5, test_size=40)


def _same_problem(a, b):
    for x, y in zip(a.agents, b.agents):
        np.testing.assert_array_equal(x.dataset.X, y.dataset.X)
        np.testing.assert_array_equal(x.dataset.y, y.dataset.y)
        assert (x.epochs, x.batch) == (y.epochs, y.batch)
    np.testing.assert_array_equal(a.w_star, b.w_star)


class TestRegressionData:
    def test_deterministic(self):
        a = gen_regression(SMALL_REG, np.random.default_rng(3))
        b = gen_regression(SMALL_REG, np.random.default_rng(3))
        _same_problem(a, b)
        np.testing.assert_array_equal(a.w_opt, b.w_opt)

    def test_noiseless_recovers_generator(self):
        scen = RegressionScenario(agents=10, samples=20, dim=4, noise_var=0.0, rho=0.0)
        prob = gen_regression(scen, np.random.default_rng(0))
        for a in prob.agents:
            np.testing.assert_allclose(a.dataset.y, a.dataset.X @ prob.w_star, rtol=1e-12)
        datasets = [a.dataset for a in prob.agents]
        np.testing.assert_allclose(closed_form_wo(datasets, prob.w_star, 0.0), prob.w_star,
                                   rtol=1e-10)

    def test_feature_covariance(self):
        scen = RegressionScenario(agents=1000, samples=100, dim=3)
        prob = gen_regression(scen, np.random.default_rng(1))
        means = prob.extra["feature_means"]
        centred = np.vstack([a.dataset.X - means[k] for k, a in enumerate(prob.agents)])
        assert centred.shape[0] == 100_000
        np.testing.assert_allclose(np.cov(centred.T), np.eye(3), atol=0.02)

    def test_batch_and_epoch_ranges(self):
        prob = gen_regression(RegressionScenario(agents=200, samples=10, batch=(1, 10)),
                              np.random.default_rng(2))
        assert all(1 <= a.batch <= len(a.dataset) and 1 <= a.epochs <= 5 for a in prob.agents)

    def test_noise_recorded(self):
        prob = gen_regression(SMALL_REG, np.random.default_rng(4))
        for a in prob.agents:
            np.testing.assert_allclose(a.dataset.y - a.dataset.X @ prob.w_star, a.dataset.noise,
                                       atol=1e-12)


class TestClassificationData:
    def test_deterministic(self):
        a = gen_classification(SMALL_CLS, np.random.default_rng(5))
        b = gen_classification(SMALL_CLS, np.random.default_rng(5))
        _same_problem(a, b)
        np.testing.assert_array_equal(a.test_set.X, b.test_set.X)

    def test_no_drift_is_separable(self):
        scen = ClassificationScenario(agents=10, drift=0.0, test_size=200)
        prob = gen_classification(scen, np.random.default_rng(6))
        for a in prob.agents:
            assert np.all(np.sign(a.dataset.X @ prob.w_star) == a.dataset.y)
        assert test_error(prob.w_star, prob.test_set) == 0.0
        assert test_error(-prob.w_star, prob.test_set) == 100.0

    def test_drift_radius(self):
        scen = ClassificationScenario(agents=20, drift=0.3)
        prob = gen_classification(scen, np.random.default_rng(7))
        dist = np.linalg.norm(prob.extra["agent_models"] - prob.w_star, axis=1)
        np.testing.assert_allclose(dist, 0.3 * np.linalg.norm(prob.w_star), rtol=1e-12)

    def test_labels_and_sizes(self):
        prob = gen_classification(ClassificationScenario(agents=50), np.random.default_rng(8))
        for a in prob.agents:
            assert set(np.unique(a.dataset.y)) <= {-1.0, 1.0}
            assert 20 <= len(a.dataset) <= 100
        assert len(prob.test_set) == 100
        train_rows = {tuple(r) for a in prob.agents for r in a.dataset.X}
        assert not any(tuple(r) in train_rows for r in prob.test_set.X)

    def test_label_balance_at_zero_mean(self):
        scen = ClassificationScenario(agents=1000, samples=(100, 100), mean_scale=0.0)
        prob = gen_classification(scen, np.random.default_rng(9))
        y = np.concatenate([a.dataset.y for a in prob.agents])
        assert y.size == 100_000
        # 3-sigma band for a mean of 1e5 fair signs
        assert abs(y.mean()) < 3 / np.sqrt(y.size)


class TestMetrics:
    def test_msd_cases(self, rng):
        w = rng.standard_normal(4)
        assert msd(w, w) == 0.0
        e1 = np.eye(4)[0]
        assert msd(w + e1, w) == pytest.approx(1.0, rel=1e-12)
        v = rng.standard_normal(4)
        assert msd(v, w) == pytest.approx(sum((a - b) ** 2 for a, b in zip(v, w)), rel=1e-12)

    def test_msd_dimension_mismatch(self):
        with pytest.raises(ValueError):
            msd(np.zeros(2), np.zeros(3))

    def test_zero_model_predicts_positive(self, rng):
        X = rng.standard_normal((37, 2))
        y = np.where(rng.random(37) < 0.3, 1.0, -1.0)
        expect = 100.0 * np.count_nonzero(y == -1.0) / 37
        assert test_error(np.zeros(2), Dataset(X, y)) == pytest.approx(expect)

    def test_empty_test_set(self):
        with pytest.raises(ValueError):
            test_error(np.zeros(2), Dataset(np.zeros((0, 2)), np.zeros(0)))


class TestRunExperiment:
    def test_single_run_table(self):
        res = run_experiment(SMALL_REG, ["fedavg", "is-approx"], runs=1, seed=3)
        single = single_run(SMALL_REG, ["fedavg", "is-approx"], 0, 3)
        for v in ("fedavg", "is-approx"):
            assert res.tables[v].shape == (SMALL_REG.iterations + 1, 1)
            np.testing.assert_array_equal(res.tables[v][:, 0], single[v])
            np.testing.assert_array_equal(res.mean(v), single[v])

    def test_paired_data_across_variants(self):
        out = single_run(SMALL_REG, ["fedavg", "is-true", "is-approx"], 0, 11)
        # every variant starts from w = 0 against the same optimum
        assert out["fedavg"][0] == out["is-true"][0] == out["is-approx"][0]

    # separable toy data pushes the logistic optimum out until every gradient vanishes
    @pytest.mark.filterwarnings("ignore::isfedavg.probability.DegenerateProbabilityWarning")
    def test_classification_runs(self):
        res = run_experiment(SMALL_CLS, seed=2)
        for table in res.tables.values():
            assert table.shape == (6, 2)
            assert np.all((table >= 0) & (table <= 100))

    def test_parallel_matches_serial(self):
        a = run_experiment(SMALL_REG, ["is-approx"], seed=4)
        b = run_experiment(SMALL_REG, ["is-approx"], seed=4, jobs=2)
        np.testing.assert_array_equal(a.tables["is-approx"], b.tables["is-approx"])

    def test_no_runs(self):
        with pytest.raises(ValueError):
            run_experiment(SMALL_REG, runs=0)


class TestPersistence:
    def test_round_trip_and_mean(self, tmp_path):
        res = run_experiment(SMALL_REG, seed=5)
        paths = write_results(res, tmp_path)
        assert {p.name for p in paths} == {
            "regression_fedavg.csv", "regression_is-true.csv", "regression_is-approx.csv",
            "metadata.json",
        }
        for v, table in res.tables.items():
            path = tmp_path / f"regression_{v}.csv"
            header = path.read_text().splitlines()[0]
            assert header == "iteration,mean_metric,run_0,run_1,run_2"
            mean, runs = read_csv(path)
            np.testing.assert_array_equal(runs, table)
            np.testing.assert_allclose(mean, runs.mean(axis=1), rtol=0, atol=1e-12)
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["seed"] == 5 and meta["scenario"]["agents"] == 6

    @pytest.mark.filterwarnings("ignore::isfedavg.probability.DegenerateProbabilityWarning")
    def test_rewrite_is_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            write_results(run_experiment(SMALL_CLS, ["fedavg"], seed=1), tmp_path / sub)
        for name in ("classification_fedavg.csv", "metadata.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_unwritable_destination(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        res = run_experiment(SMALL_REG, ["fedavg"], runs=1)
        with pytest.raises(OSError):
            write_results(res, blocker / "sub")


def test_scenario_validation():
    with pytest.raises(ValueError):
        RegressionScenario(participants=400)
    with pytest.raises(ValueError):
        RegressionScenario(samples=5, batch=(1, 10))
    with pytest.raises(ValueError):
        ClassificationScenario(samples=(30, 20))
