import numpy as np
import pandas as pd
import pytest

from bayhem import bench
from bayhem.errors import InvalidArgumentError
from bayhem.gp import OptimizerConfig
from bayhem.multilevel import FitSettings, Method, fit_model


@pytest.fixture
def quick_settings():
    return FitSettings(optimizer=OptimizerConfig(n_starts=2, max_iter=100, seed=0))


@pytest.fixture
def tiny_experiment(quick_settings):
    return bench.ExperimentConfig(
        name="tiny",
        cases=(
            bench.CaseConfig(label="a", functions=("Ex1L1", "Ex1L2"), n=(10, 5)),
            bench.CaseConfig(label="b", functions=("Ex3L1", "Ex3L2Shift"), n=(8, 3)),
        ),
        methods=("single", "bayhem", "prior"),
        replicates=2,
        seed=7,
        test_set=bench.TestSetSpec(size=200, seed=5),
        settings=quick_settings,
    )


class TestFunctions:
    def test_example1_values(self):
        x = [[0.5, 0.5]]
        assert bench.eval_testfn("Ex1L1", x)[0] == pytest.approx(0.0625, abs=1e-12)
        assert bench.eval_testfn("Ex1L2", x)[0] == pytest.approx(-0.9375, abs=1e-12)

    def test_example3_levels(self):
        X = np.linspace(0.0, 10.0, 11).reshape(-1, 1)
        base = bench.eval_testfn("Ex3L1", X)
        assert base[0] == 0.0
        np.testing.assert_allclose(bench.eval_testfn("Ex3L2Shift", X), base + 4, atol=1e-12)
        np.testing.assert_allclose(bench.eval_testfn("Ex3L2Tilt", X), base + 2 * X[:, 0], atol=1e-12)
        np.testing.assert_allclose(bench.eval_testfn("Ex3L2Stretch", X), base + 4 * np.sin(X[:, 0] / 2), atol=1e-12)

    def test_matches_closed_forms(self, rng):
        X = rng.uniform(size=(10, 2))
        x1, x2 = X[:, 0], X[:, 1]
        l1 = (x1 * x2) ** 2 + np.sin(2 * np.pi * x1)
        l2 = l1 + 2 * x2 * (np.cos(4 * np.pi * x1 * x2) + x1**2 - x1 * x2)
        np.testing.assert_allclose(bench.eval_testfn("Ex1L1", X), l1, atol=1e-12)
        np.testing.assert_allclose(bench.eval_testfn("Ex1L2", X), l2, atol=1e-12)
        np.testing.assert_allclose(bench.eval_testfn("Ex2CorrL1", X), l1 + np.cos(4 * np.pi * x1 * x2), atol=1e-12)
        np.testing.assert_allclose(bench.eval_testfn("Ex2CorrL2", X), l2, atol=1e-12)
        uncorr = (4 * x1**3 - x1 * x2**4) / np.exp(x1 * x2) ** 2 - 2
        np.testing.assert_allclose(bench.eval_testfn("Ex2UncorrL1", X), uncorr, atol=1e-12)

    def test_outside_domain_rejected(self):
        with pytest.raises(InvalidArgumentError, match="outside the domain"):
            bench.eval_testfn("Ex1L1", [[1.2, 0.5]])

    def test_unknown_function(self):
        with pytest.raises(InvalidArgumentError, match="unknown test function"):
            bench.function_info("Ex9")


class TestDesigns:
    def test_lhs_is_stratified(self, rng):
        n = 12
        U = bench.lhs_sample(n, 3, rng)
        assert U.shape == (n, 3)
        for j in range(3):
            np.testing.assert_array_equal(np.sort(np.floor(U[:, j] * n)), np.arange(n))

    def test_lhs_is_deterministic_per_seed(self):
        a = bench.lhs_sample(8, 2, np.random.default_rng(3))
        b = bench.lhs_sample(8, 2, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_lhs_needs_points(self):
        with pytest.raises(InvalidArgumentError):
            bench.lhs_sample(0, 2)

    def test_grid_first_axis_slowest(self):
        G = bench.grid_points((0.0, 0.0), (1.0, 1.0), 3)
        assert G.shape == (9, 2)
        np.testing.assert_array_equal(G[:3, 0], 0.0)
        np.testing.assert_array_equal(G[:3, 1], [0.0, 0.5, 1.0])

    def test_grid_resolution_floor(self):
        with pytest.raises(InvalidArgumentError):
            bench.grid_points((0.0,), (1.0,), 1)

    def test_replicate_streams_are_independent_of_order(self):
        a = bench.replicate_rng(1, 0, 3).uniform(size=4)
        bench.replicate_rng(1, 0, 2).uniform(size=4)
        b = bench.replicate_rng(1, 0, 3).uniform(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, bench.replicate_rng(1, 1, 3).uniform(size=4))

    def test_fixed_design_is_used(self):
        case = bench.load_experiment("example3").cases[0]
        data = bench.draw_designs(case, np.random.default_rng(0))
        np.testing.assert_array_equal(data.top.X, [[1.5], [8.5]])
        assert data.levels[0].n == 25

    def test_test_set_ignores_design_stream(self, tiny_experiment):
        case = tiny_experiment.cases[0]
        X1, y1 = bench.make_test_set(case, tiny_experiment.test_set)
        X2, y2 = bench.make_test_set(case, tiny_experiment.test_set)
        np.testing.assert_array_equal(X1, X2)
        np.testing.assert_array_equal(y1, y2)
        assert X1.shape == (200, 2)


class TestRmse:
    def test_variants(self):
        assert bench.rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))
        assert bench.rmse([0.0, 0.0], [3.0, 4.0], bench.RmseVariant.ROOT_SUM_OVER_N) == pytest.approx(2.5)

    @pytest.mark.parametrize("name", ["paper", "literal", " Literal "])
    def test_root_sum_over_n_names(self, name):
        assert bench.RmseVariant(name) is bench.RmseVariant.ROOT_SUM_OVER_N

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            bench.RmseVariant("median")

    def test_zero_for_exact_predictions(self):
        assert bench.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            bench.rmse([1.0], [1.0, 2.0])


class TestExperimentConfig:
    @pytest.mark.parametrize("name", ["example1", "example1-sparse", "example2-corr", "example2-uncorr", "example3"])
    def test_builtins_load(self, name):
        cfg = bench.load_experiment(name)
        assert cfg.name == name
        assert cfg.cases
        assert name in bench.list_experiments()

    def test_example1_sizes(self):
        cfg = bench.load_experiment("example1")
        assert [case.n for case in cfg.cases] == [(20, 20), (20, 12), (20, 10), (20, 5)]
        assert cfg.replicates == 20
        assert cfg.test_set.size == 10000

    def test_unknown_experiment(self):
        with pytest.raises(InvalidArgumentError, match="unknown experiment"):
            bench.load_experiment("no-such-experiment")

    def test_unknown_method_rejected(self):
        with pytest.raises(InvalidArgumentError):
            bench.ExperimentConfig(name="x", cases=(bench.CaseConfig("a", ("Ex3L1",), (5,)),), methods=("magic",))

    def test_mixed_dimensions_rejected(self):
        with pytest.raises(InvalidArgumentError):
            bench.CaseConfig("a", ("Ex1L1", "Ex3L1"), (5, 3))

    def test_dict_form_preserves_config(self, tiny_experiment):
        assert bench.ExperimentConfig.from_dict(tiny_experiment.to_dict()) == tiny_experiment

    def test_overrides_skip_none(self, tiny_experiment):
        cfg = tiny_experiment.with_overrides(replicates=5, seed=None)
        assert cfg.replicates == 5 and cfg.seed == tiny_experiment.seed


class TestRunExperiment:
    def test_report_shape_and_bounds(self, tiny_experiment):
        report = bench.run_experiment(tiny_experiment)
        assert len(report.records) == 2 * 2 * 3
        assert len(report.cells) == 2 * 3
        ok = report.cells[report.cells["successes"] > 0]
        assert np.all(ok["min"] <= ok["mean"] + 1e-15)
        assert np.all(ok["mean"] <= ok["max"] + 1e-15)

    def test_cells_are_recomputable_from_records(self, tiny_experiment):
        report = bench.run_experiment(tiny_experiment)
        good = report.records[~report.records["failed"]]
        means = good.groupby(["case", "method"])["rmse"].mean()
        for (case, method), value in means.items():
            assert report.mean_rmse(case, method) == pytest.approx(value, rel=1e-12)

    def test_deterministic(self, tiny_experiment):
        a = bench.run_experiment(tiny_experiment)
        b = bench.run_experiment(tiny_experiment)
        pd.testing.assert_frame_equal(a.records, b.records)

    def test_parallel_matches_serial(self, tiny_experiment):
        serial = bench.run_experiment(tiny_experiment, jobs=1)
        parallel = bench.run_experiment(tiny_experiment, jobs=2)
        pd.testing.assert_frame_equal(serial.records, parallel.records)
        pd.testing.assert_frame_equal(serial.cells, parallel.cells)

    def test_failed_fit_is_recorded_not_raised(self, quick_settings):
        cfg = bench.ExperimentConfig(
            name="fragile",
            cases=(bench.CaseConfig(label="one", functions=("Ex1L1", "Ex1L2"), n=(8, 1)),),
            methods=("single", "bayhem"),
            replicates=1,
            test_set=bench.TestSetSpec(size=50, seed=1),
            settings=quick_settings,
        )
        report = bench.run_experiment(cfg)
        assert report.cell("one", "single")["failures"] == 1
        assert np.isnan(report.mean_rmse("one", "single"))
        assert report.cell("one", "bayhem")["successes"] == 1
        table = report.to_table()
        assert table.loc[0, "Single GP"] == "failed [1 failed]"

    def test_prior_baseline_predicts_the_fitted_prior_mean(self, tiny_experiment, quick_settings):
        case = tiny_experiment.cases[0]
        data = bench.draw_designs(case, bench.replicate_rng(7, 0, 0))
        X_test, y_test = bench.make_test_set(case, tiny_experiment.test_set)
        score = bench.score_method("prior", data, quick_settings, X_test, y_test, bench.RmseVariant.STANDARD)
        model = fit_model(data, FitSettings(method=Method.BAYHEM, optimizer=quick_settings.optimizer))
        expected = bench.rmse(np.full(len(y_test), model.emulator.top_hp.beta[0]), y_test)
        assert score == pytest.approx(expected, rel=1e-12)

    def test_table_layout(self, tiny_experiment):
        table = bench.run_experiment(tiny_experiment).to_table()
        assert list(table.columns) == ["case", "Single GP", "BayHEm", "Prior mean"]
        assert list(table["case"]) == ["a", "b"]
        assert table.loc[0, "BayHEm"].count("(") == 1
