import logging

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from bayhem.errors import FitError, InvalidArgumentError, NumericalError, UnsupportedOperationError
from bayhem.gp import (
    LevelData,
    OptimizerConfig,
    build_fitted_gp,
    fit_gp,
    log_marginal_likelihood,
    predict,
    profile_likelihood,
)
from bayhem.kernels import Hyperparams, KernelSpec, MeanForm, MeanSpec, cov_matrix
from bayhem.multilevel import (
    DEFAULT_LINK_NUGGET,
    FitSettings,
    LevelLink,
    LinkMode,
    Method,
    MultiLevelData,
    Objective,
    PriorProcess,
    RhoSpec,
    ThetaMode,
    build_bayhem,
    build_ko,
    build_model,
    condition_level,
    estimate_rho,
    exact_links,
    fit_bayhem,
    fit_hk,
    fit_ko,
    fit_model,
    linked_correlation,
    predict_bayhem,
    predict_hk,
    predict_ko,
    predict_model,
    sequential_log_likelihood,
)

from helpers import grid_design_levels, make_levels, smooth_l1, smooth_l2


def joint_conditioning(data, hp, Xt):
    """Direct Gaussian conditioning on all levels stacked."""
    X, y = data.stacked()
    K = cov_matrix(X, X, hp, KernelSpec(), add_jitter=True)
    Ks = cov_matrix(Xt, X, hp)
    beta = hp.beta[0]
    mean = beta + Ks @ np.linalg.solve(K, y - beta)
    var = hp.sigma2 - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T))
    return mean, np.maximum(var, 0.0)


@pytest.fixture
def random_two_level(rng):
    X1, X2 = rng.uniform(size=(12, 2)), rng.uniform(size=(6, 2))
    return MultiLevelData.from_arrays([(X1, smooth_l1(X1)), (X2, smooth_l2(X2))])


@pytest.fixture
def ko_data():
    X1 = np.linspace(0.0, 1.0, 11).reshape(-1, 1)
    X2 = X1[[1, 4, 7, 9]]
    return MultiLevelData.from_arrays([(X1, smooth_l1(X1)), (X2, smooth_l2(X2))])


@pytest.fixture
def ko_hps():
    return [
        Hyperparams(beta=[0.0], sigma2=1.0, lengthscales=[0.1]),
        Hyperparams(beta=[0.1], sigma2=0.2, lengthscales=[0.15]),
    ]


class TestMultiLevelData:
    def test_dimensions_must_agree(self):
        with pytest.raises(InvalidArgumentError):
            MultiLevelData((LevelData([[0.1]], [1.0], 1), LevelData([[0.1, 0.2]], [1.0], 2)))

    def test_indices_must_increase(self):
        with pytest.raises(InvalidArgumentError):
            MultiLevelData((LevelData([[0.1]], [1.0], 2), LevelData([[0.2]], [1.0], 1)))

    def test_stacked_keeps_level_order(self, random_two_level):
        X, y = random_two_level.stacked()
        assert X.shape == (18, 2)
        np.testing.assert_array_equal(y[:12], random_two_level.levels[0].y)


class TestConditionLevel:
    def test_empty_data_returns_prior(self):
        prior = PriorProcess(Hyperparams(beta=[0.0], sigma2=1.0, lengthscales=[0.2]), MeanSpec())
        assert condition_level(prior, LevelData.empty(1, 2)) is prior

    def test_redundant_observation_changes_nothing(self, rng):
        hp = Hyperparams(beta=[0.0], sigma2=1.0, lengthscales=[0.1])
        X1 = np.linspace(0.0, 1.0, 11).reshape(-1, 1)
        post1 = condition_level(PriorProcess(hp, MeanSpec()), LevelData(X1, smooth_l1(X1)), 1e-8)
        x = X1[[4]]
        post2 = condition_level(post1, LevelData(x, post1.mean(x), level_index=2), 1e-8)
        Xt = rng.uniform(size=(50, 1))
        np.testing.assert_allclose(post2.mean(Xt), post1.mean(Xt), atol=1e-6)
        np.testing.assert_allclose(post2.var(Xt), post1.var(Xt), atol=1e-6)

    def test_singular_conditioning_names_colliding_points(self):
        hp = Hyperparams(beta=[0.0], sigma2=1.0, lengthscales=[0.3])
        x0 = np.array([[0.5]])
        post1 = condition_level(PriorProcess(hp, MeanSpec()), LevelData(x0, [1.0]), nugget=0.0)
        with pytest.raises(NumericalError) as err:
            condition_level(post1, LevelData(x0, [2.0], level_index=2), nugget=0.0)
        assert err.value.collisions == [((0.5,), (0.5,))]


class TestSharedThetaBayHEm:
    @pytest.mark.parametrize("instance", range(25))
    def test_sequential_equals_joint_conditioning(self, instance):
        rng = np.random.default_rng(1000 + instance)
        p = 1 + instance % 2
        per_axis = 41 if p == 1 else 9
        n1, n2 = int(rng.integers(3, 16)), int(rng.integers(1, 9))
        X1, X2 = grid_design_levels(rng, [n1, n2], p, per_axis)
        step = 1.0 / (per_axis - 1)
        hp = Hyperparams(
            beta=[rng.normal()],
            sigma2=rng.uniform(0.5, 2.0),
            lengthscales=rng.uniform(0.8, 1.5, size=p) * step,
        )
        data = MultiLevelData.from_arrays([(X1, rng.normal(size=n1)), (X2, rng.normal(size=n2))])
        model = build_bayhem(data, ThetaMode.SHARED, (hp,))
        Xt = rng.uniform(size=(100, p))
        pred = predict_bayhem(model, Xt)
        mean, var = joint_conditioning(data, hp, Xt)
        np.testing.assert_allclose(pred.mean, mean, atol=1e-8)
        np.testing.assert_allclose(pred.variance, var, atol=1e-8)

    def test_single_level_equals_fit_gp(self, rng, fast_opt):
        X = rng.uniform(size=(10, 2))
        level = LevelData(X, smooth_l1(X))
        single = fit_gp(level, opt=fast_opt)
        model = fit_bayhem(MultiLevelData((level,)), opt=fast_opt)
        assert model.top_hp == single.hp
        Xt = rng.uniform(size=(40, 2))
        a, b = predict_bayhem(model, Xt), predict(single, Xt)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a.variance, b.variance, rtol=1e-12, atol=1e-12)

    def test_empty_top_level_equals_fit_gp_on_level_one(self, rng, fast_opt):
        X = rng.uniform(size=(10, 2))
        level = LevelData(X, smooth_l1(X))
        single = fit_gp(level, opt=fast_opt)
        model = fit_bayhem(MultiLevelData((level, LevelData.empty(2, 2))), opt=fast_opt)
        assert model.top_hp == single.hp
        Xt = rng.uniform(size=(40, 2))
        np.testing.assert_allclose(predict_bayhem(model, Xt).mean, predict(single, Xt).mean, rtol=1e-12, atol=1e-12)

    def test_interpolates_top_level(self, rng, hp2):
        X1, X2 = grid_design_levels(rng, [15, 8], 2, 9)
        data = make_levels([X1, X2], [smooth_l1, smooth_l2])
        model = build_bayhem(data, ThetaMode.SHARED, (hp2,))
        np.testing.assert_allclose(predict_bayhem(model, X2).mean, data.top.y, atol=1e-6)
        assert np.all(predict_bayhem(model, rng.uniform(size=(200, 2))).variance <= hp2.sigma2 + 1e-10)

    def test_level_one_data_informs_top_level(self):
        hp = Hyperparams(beta=[0.0], sigma2=1.0, lengthscales=[0.4])
        X1 = np.arange(0.0, 10.01, 0.5).reshape(-1, 1)
        X2 = np.array([[0.25], [0.75], [1.25]])
        data = make_levels([X1, X2], [lambda X: np.sin(X[:, 0]), lambda X: np.sin(X[:, 0]) + 0.3])
        model = build_bayhem(data, ThetaMode.SHARED, (hp,))
        pred = predict_bayhem(model, X1[[-2]])
        assert abs(pred.mean[0] - data.levels[0].y[-2]) <= pred.sd[0] + 1e-6

    def test_intermediate_level_is_refused(self, rng, hp2):
        X1, X2 = grid_design_levels(rng, [6, 3], 2, 9)
        model = build_bayhem(make_levels([X1, X2], [smooth_l1, smooth_l2]), ThetaMode.SHARED, (hp2,))
        with pytest.raises(UnsupportedOperationError, match="intermediate levels"):
            predict_bayhem(model, X1, level=1)
        predict_bayhem(model, X1, level=2)

    def test_sequential_terms_sum_to_joint_likelihood(self, rng, hp2):
        X1, X2 = grid_design_levels(rng, [12, 6], 2, 9)
        data = make_levels([X1, X2], [smooth_l1, smooth_l2])
        terms = sequential_log_likelihood(data, hp2, MeanSpec(), KernelSpec())
        X, y = data.stacked()
        joint = log_marginal_likelihood(LevelData(X, y), hp2, MeanSpec(), KernelSpec())
        assert sum(terms) == pytest.approx(joint, rel=1e-9)

    def test_top_term_is_conditional_density(self, rng, hp2):
        X1, X2 = grid_design_levels(rng, [12, 6], 2, 9)
        data = make_levels([X1, X2], [smooth_l1, smooth_l2])
        top = sequential_log_likelihood(data, hp2, MeanSpec(), KernelSpec())[-1]
        X, _ = data.stacked()
        K = cov_matrix(X, X, hp2, KernelSpec(), add_jitter=True)
        K11, K21, K22 = K[:12, :12], K[12:, :12], K[12:, 12:]
        beta = hp2.beta[0]
        mu = beta + K21 @ np.linalg.solve(K11, data.levels[0].y - beta)
        S = K22 - K21 @ np.linalg.solve(K11, K21.T)
        expected = multivariate_normal(mu, (S + S.T) / 2).logpdf(data.top.y)
        assert top == pytest.approx(expected, rel=1e-8)

    def test_top_conditional_objective(self, random_two_level, fast_opt):
        model = fit_bayhem(random_two_level, opt=fast_opt, objective=Objective.TOP_CONDITIONAL)
        assert model.log_lik == model.level_log_liks[-1]
        assert np.all(np.isfinite(predict_bayhem(model, random_two_level.levels[0].X).mean))

    def test_top_conditional_needs_top_data(self, rng, fast_opt):
        X = rng.uniform(size=(8, 2))
        data = MultiLevelData((LevelData(X, smooth_l1(X)), LevelData.empty(2, 2)))
        with pytest.raises(InvalidArgumentError):
            fit_bayhem(data, opt=fast_opt, objective=Objective.TOP_CONDITIONAL)


class TestPerLevelBayHEm:
    def test_base_theta_is_level_one_fit(self, random_two_level, fast_opt):
        model = fit_bayhem(random_two_level, ThetaMode.PER_LEVEL, opt=fast_opt)
        assert len(model.hp_chain) == 2
        assert model.hp_chain[0] == fit_gp(random_two_level.levels[0], opt=fast_opt).hp
        assert model.log_lik == pytest.approx(sum(model.level_log_liks))
        assert np.all(np.isfinite(predict_bayhem(model, random_two_level.top.X).mean))

    def test_empty_level_reuses_previous_theta(self, rng, fast_opt, caplog):
        X = rng.uniform(size=(8, 2))
        data = MultiLevelData((LevelData(X, smooth_l1(X)), LevelData.empty(2, 2)))
        with caplog.at_level(logging.WARNING):
            model = fit_bayhem(data, ThetaMode.PER_LEVEL, opt=fast_opt)
        assert model.hp_chain[1] == model.hp_chain[0]
        assert "no data" in caplog.text

    def test_fit_error_carries_level(self, fast_opt):
        data = MultiLevelData.from_arrays([([[0.5, 0.5]], [1.0]), ([[0.1, 0.2], [0.3, 0.9]], [1.0, 2.0])])
        with pytest.raises(FitError) as err:
            fit_bayhem(data, ThetaMode.PER_LEVEL, opt=fast_opt)
        assert err.value.level == 1


def tilted_levels():
    """Level 2 adds a linear tilt to x sin(x) + x; its two runs sit at 1.5 and 8.5."""
    f1 = lambda X: X[:, 0] * np.sin(X[:, 0]) + X[:, 0]
    f2 = lambda X: f1(X) + 2.0 * X[:, 0]
    X1 = np.linspace(0.0, 10.0, 25).reshape(-1, 1)
    X2 = np.array([[1.5], [8.5]])
    return make_levels([X1, X2], [f1, f2]), f2


def linked_joint_conditioning(data, hp, link, Xt, jitter=1e-8):
    """Direct Gaussian conditioning when level 1 observes rho * f plus its link terms."""
    (X1, y1), (X2, y2) = (data.levels[0].X, data.levels[0].y), (data.top.X, data.top.y)
    c = lambda A, B: cov_matrix(A, B, hp)
    K = np.block([
        [link.rho**2 * c(X1, X1) + hp.sigma2 * link.covariance(X1), link.rho * c(X1, X2)],
        [link.rho * c(X2, X1), c(X2, X2)],
    ])
    K[np.diag_indices_from(K)] += jitter * hp.sigma2
    Ks = np.hstack([link.rho * c(Xt, X1), c(Xt, X2)])
    beta = hp.beta[0]
    m = np.concatenate([link.rho * beta + link.mean(X1), np.full(len(y2), beta)])
    y = np.concatenate([y1, y2])
    mean = beta + Ks @ np.linalg.solve(K, y - m)
    var = hp.sigma2 - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T))
    return mean, np.maximum(var, 0.0), multivariate_normal(m, K).logpdf(y)


class TestLevelLinks:
    @pytest.mark.parametrize("instance", range(6))
    def test_linked_conditioning_equals_joint_gaussian(self, instance):
        rng = np.random.default_rng(2000 + instance)
        p = 1 + instance % 2
        per_axis = 41 if p == 1 else 9
        step = 1.0 / (per_axis - 1)
        n1, n2 = int(rng.integers(4, 14)), int(rng.integers(1, 7))
        X1, X2 = grid_design_levels(rng, [n1, n2], p, per_axis)
        hp = Hyperparams(beta=[rng.normal()], sigma2=rng.uniform(0.5, 2.0), lengthscales=rng.uniform(0.8, 1.5, size=p) * step)
        link = LevelLink(
            rho=rng.uniform(-1.5, 1.5),
            variance=rng.uniform(0.05, 0.5),
            lengthscales=rng.uniform(0.8, 1.5, size=p) * step,
            nugget=1e-4,
            trend=MeanSpec(MeanForm.LINEAR),
            offset=rng.normal(size=p + 1),
        )
        data = MultiLevelData.from_arrays([(X1, rng.normal(size=n1)), (X2, rng.normal(size=n2))])
        model = build_bayhem(data, ThetaMode.SHARED, (hp,), links_chain=[(link,)])
        Xt = rng.uniform(size=(60, p))
        pred = predict_bayhem(model, Xt)
        mean, var, log_lik = linked_joint_conditioning(data, hp, link, Xt)
        np.testing.assert_allclose(pred.mean, mean, atol=1e-8)
        np.testing.assert_allclose(pred.variance, var, atol=1e-8)
        assert model.log_lik == pytest.approx(log_lik, rel=1e-8)

    def test_default_link_is_exact(self):
        assert LevelLink().is_exact
        assert not LevelLink(rho=0.9).is_exact
        assert not LevelLink(offset=[0.5], trend=MeanSpec(MeanForm.CONSTANT)).is_exact

    def test_exact_links_give_stacked_correlation(self, random_two_level):
        lengthscales = np.array([0.3, 0.4])
        R, scale = linked_correlation(random_two_level.levels, lengthscales, exact_links(1), KernelSpec())
        X, _ = random_two_level.stacked()
        unit = Hyperparams(beta=[], sigma2=1.0, lengthscales=lengthscales)
        np.testing.assert_array_equal(R, cov_matrix(X, X, unit, KernelSpec(), add_jitter=True))
        np.testing.assert_array_equal(scale, np.ones(18))

    def test_link_count_must_match_levels(self, random_two_level):
        with pytest.raises(InvalidArgumentError):
            linked_correlation(random_two_level.levels, np.array([0.3, 0.4]), (), KernelSpec())

    def test_discrepancy_needs_lengthscales(self):
        with pytest.raises(InvalidArgumentError):
            LevelLink(variance=0.5)

    def test_dict_form_preserves_link(self):
        link = LevelLink(rho=-0.3, variance=0.2, lengthscales=[0.1, 0.7], nugget=1e-4, trend=MeanSpec(MeanForm.CONSTANT), offset=[1.5])
        assert LevelLink.from_dict(link.to_dict()) == link

    def test_zero_rho_ignores_lower_level(self, rng):
        hp = Hyperparams(beta=[0.2], sigma2=1.0, lengthscales=[0.15])
        X1 = np.linspace(0.0, 1.0, 15).reshape(-1, 1)
        X2 = np.array([[0.12], [0.5], [0.83]])
        data = make_levels([X1, X2], [smooth_l1, smooth_l2])
        link = LevelLink(rho=0.0, variance=0.5, lengthscales=[0.2], nugget=1e-4)
        model = build_bayhem(data, ThetaMode.SHARED, (hp,), links_chain=[(link,)])
        direct = build_fitted_gp(data.top, hp)
        Xt = rng.uniform(size=(30, 1))
        a, b = predict_bayhem(model, Xt), predict(direct, Xt)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(a.variance, b.variance, rtol=1e-10, atol=1e-10)

    def test_exact_mode_fits_the_stacked_gp(self, random_two_level, fast_opt):
        model = fit_bayhem(random_two_level, opt=fast_opt, links=LinkMode.EXACT)
        X, y = random_two_level.stacked()
        assert model.top_hp == fit_gp(LevelData(X, y), opt=fast_opt).hp
        assert model.top_links == exact_links(1)

    def test_estimated_link_for_level_with_data(self, random_two_level, fast_opt):
        model = fit_bayhem(random_two_level, opt=fast_opt)
        (link,) = model.top_links
        assert not link.is_exact
        assert link.nugget == DEFAULT_LINK_NUGGET
        assert link.offset.shape == (1,)
        assert model.log_lik == pytest.approx(sum(model.level_log_liks))
        np.testing.assert_allclose(predict_bayhem(model, random_two_level.top.X).mean, random_two_level.top.y, atol=1e-4)

    def test_per_level_stages_carry_their_own_links(self, random_two_level, fast_opt):
        model = fit_bayhem(random_two_level, ThetaMode.PER_LEVEL, opt=fast_opt)
        assert model.links_chain[0] == ()
        assert len(model.links_chain[1]) == 1 and not model.links_chain[1][0].is_exact

    def test_tilted_levels_beat_ko(self):
        data, truth = tilted_levels()
        opt = OptimizerConfig(n_starts=6, max_iter=300, seed=0)
        bayhem = fit_bayhem(data, opt=opt, level_trend=MeanSpec(MeanForm.LINEAR))
        ko = fit_ko(data, RhoSpec(value=1.0), opt=opt)
        Xt = np.linspace(0.0, 10.0, 200).reshape(-1, 1)
        bayhem_rmse = np.sqrt(np.mean((predict_bayhem(bayhem, Xt).mean - truth(Xt)) ** 2))
        ko_rmse = np.sqrt(np.mean((predict_ko(ko, Xt).mean - truth(Xt)) ** 2))
        assert bayhem_rmse < ko_rmse


class TestTwoPointTopLevel:
    """Conditional objectives with only two top-level runs."""

    def test_conditional_profile_uses_all_rows(self, random_two_level):
        lower, top = random_two_level.levels
        lengthscales = np.array([0.3, 0.4])
        basis = MeanSpec().basis
        conditional = profile_likelihood(lengthscales, top.X, top.y, basis, KernelSpec(), lower.X, lower.y)
        X, y = random_two_level.stacked()
        joint = profile_likelihood(lengthscales, X, y, basis, KernelSpec())
        np.testing.assert_array_equal(conditional.beta, joint.beta)
        assert conditional.sigma2 == joint.sigma2
        hp = Hyperparams(beta=joint.beta, sigma2=joint.sigma2, lengthscales=lengthscales)
        lower_log_lik = log_marginal_likelihood(lower, hp, MeanSpec(), KernelSpec())
        assert conditional.log_lik + lower_log_lik == pytest.approx(joint.log_lik, rel=1e-9)

    @pytest.mark.parametrize("mode,objective", [
        (ThetaMode.PER_LEVEL, Objective.JOINT),
        (ThetaMode.SHARED, Objective.TOP_CONDITIONAL),
    ])
    def test_exact_links_stay_bounded(self, fast_opt, mode, objective):
        data, _ = tilted_levels()
        model = fit_bayhem(data, mode, opt=fast_opt, objective=objective, links=LinkMode.EXACT)
        hp = model.top_hp
        assert hp.sigma2 > 1e-3
        assert np.all(np.abs(hp.beta) < 1e4)
        assert np.isfinite(model.log_lik)
        assert np.all(np.isfinite(predict_bayhem(model, np.linspace(0.0, 10.0, 50).reshape(-1, 1)).mean))

    def test_estimated_links_stay_bounded(self, fast_opt):
        data, _ = tilted_levels()
        model = fit_bayhem(data, ThetaMode.PER_LEVEL, opt=fast_opt, level_trend=MeanSpec(MeanForm.LINEAR))
        assert model.top_hp.sigma2 > 1e-3
        np.testing.assert_allclose(predict_bayhem(model, data.top.X).mean, data.top.y, atol=1e-3)


class TestKennedyOHagan:
    def test_rho_zero_decouples_levels(self, rng, ko_data, ko_hps):
        model = build_ko(ko_data, ko_hps, [0.0])
        direct = build_fitted_gp(ko_data.top, ko_hps[1])
        Xt = rng.uniform(size=(30, 1))
        a, b = predict_ko(model, Xt), predict(direct, Xt)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a.variance, b.variance, rtol=1e-12, atol=1e-12)

    def test_matches_composition_of_two_gps(self, rng, ko_data, ko_hps):
        rho = 0.7
        model = build_ko(ko_data, ko_hps, [rho])
        base = build_fitted_gp(ko_data.levels[0], ko_hps[0])
        lower = ko_data.levels[0].y[[1, 4, 7, 9]]
        delta = build_fitted_gp(LevelData(ko_data.top.X, ko_data.top.y - rho * lower, 2), ko_hps[1])
        Xt = rng.uniform(size=(30, 1))
        pred, p1, pd = predict_ko(model, Xt), predict(base, Xt), predict(delta, Xt)
        np.testing.assert_allclose(pred.mean, rho * p1.mean + pd.mean, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(pred.variance, rho**2 * p1.variance + pd.variance, rtol=1e-12, atol=1e-12)

    def test_nested_discrepancy_uses_exact_values(self, ko_data, ko_hps):
        model = build_ko(ko_data, ko_hps, [0.7])
        disc = model.discrepancies[0]
        assert disc.exact.all()
        np.testing.assert_array_equal(disc.values, ko_data.top.y - 0.7 * ko_data.levels[0].y[[1, 4, 7, 9]])

    def test_non_nested_design_uses_lower_emulator(self, ko_data, ko_hps, caplog):
        X2 = np.array([[0.05], [0.55]])
        data = MultiLevelData((ko_data.levels[0], LevelData(X2, smooth_l2(X2), 2)))
        with caplog.at_level(logging.WARNING):
            model = build_ko(data, ko_hps, [1.0])
        disc = model.discrepancies[0]
        assert not disc.exact.any()
        base = build_fitted_gp(data.levels[0], ko_hps[0])
        np.testing.assert_allclose(disc.lower_values, predict(base, X2).mean, rtol=1e-12)
        assert "not nested" in caplog.text

    def test_interpolates_nested_top_level(self, ko_data, ko_hps):
        model = build_ko(ko_data, ko_hps, [1.0])
        np.testing.assert_allclose(predict_ko(model, ko_data.top.X).mean, ko_data.top.y, atol=1e-6)

    def test_constant_shift_is_learned_exactly(self, fast_opt):
        f1 = lambda X: X[:, 0] * np.sin(X[:, 0]) + X[:, 0]
        X1 = np.linspace(0.0, 10.0, 41).reshape(-1, 1)
        X2 = X1[::8]
        data = make_levels([X1, X2], [f1, lambda X: f1(X) + 4.0])
        model = fit_ko(data, RhoSpec(value=1.0), opt=fast_opt)
        Xt = np.linspace(0.0, 10.0, 200).reshape(-1, 1)
        np.testing.assert_allclose(predict_ko(model, Xt).mean, f1(Xt) + 4.0, atol=1e-3)

    def test_estimated_rho_for_proportional_levels(self, fast_opt):
        X1 = np.linspace(0.0, 1.0, 11).reshape(-1, 1)
        X2 = X1[::2]
        data = make_levels([X1, X2], [smooth_l1, lambda X: 2.5 * smooth_l1(X)])
        model = fit_ko(data, RhoSpec(estimate=True), opt=fast_opt)
        assert model.rho[0] == pytest.approx(2.5, rel=1e-12)

    def test_estimate_rho_zero_denominator(self):
        assert estimate_rho(np.zeros(3), np.ones(3)) == 0.0

    @pytest.mark.parametrize("text,expected", [
        ("estimate", RhoSpec(estimate=True)),
        ("fixed:0.5", RhoSpec(value=0.5)),
        ("0.25", RhoSpec(value=0.25)),
    ])
    def test_rho_spec_parsing(self, text, expected):
        assert RhoSpec.parse(text) == expected

    def test_rho_spec_rejects_garbage(self):
        with pytest.raises(InvalidArgumentError):
            RhoSpec.parse("sometimes")


class TestFarPointPerturbation:
    """Top-level sensitivity to a level-1 run far from the prediction point."""

    X1 = np.arange(0.0, 10.01, 0.5).reshape(-1, 1)

    def perturbed(self, X2):
        y1 = np.sin(self.X1[:, 0])
        y2 = np.sin(X2[:, 0]) + 0.3
        bumped = y1.copy()
        bumped[-1] += 1.0
        return (
            MultiLevelData.from_arrays([(self.X1, y1), (X2, y2)]),
            MultiLevelData.from_arrays([(self.X1, bumped), (X2, y2)]),
        )

    def test_ko_depends_on_level_one_only_locally(self):
        hp = Hyperparams(beta=[0.0], sigma2=1.0, lengthscales=[0.4])
        original, bumped = self.perturbed(self.X1[:6])
        far = np.array([[1.1], [1.6]])
        a = predict_ko(build_ko(original, [hp, hp], [1.0]), far).mean
        b = predict_ko(build_ko(bumped, [hp, hp], [1.0]), far).mean
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_bayhem_shares_level_one_information(self):
        hp = Hyperparams(beta=[0.0], sigma2=1.0, lengthscales=[0.4])
        original, bumped = self.perturbed(np.array([[0.25], [0.75], [1.25], [1.75], [2.25]]))
        a = build_bayhem(original, ThetaMode.SHARED, (hp,))
        b = build_bayhem(bumped, ThetaMode.SHARED, (hp,))
        near, far = np.array([[9.75]]), np.array([[1.1]])
        assert abs(predict_bayhem(a, near).mean[0] - predict_bayhem(b, near).mean[0]) > 1e-3
        assert abs(predict_bayhem(a, far).mean[0] - predict_bayhem(b, far).mean[0]) <= 1e-6


class TestHierarchicalKriging:
    def test_single_level_equals_fit_gp(self, rng, fast_opt):
        X = rng.uniform(size=(10, 2))
        level = LevelData(X, smooth_l1(X))
        model = fit_hk(MultiLevelData((level,)), opt=fast_opt)
        single = fit_gp(level, opt=fast_opt)
        assert model.level_gps[0].hp == single.hp
        Xt = rng.uniform(size=(20, 2))
        np.testing.assert_array_equal(predict_hk(model, Xt).mean, predict(single, Xt).mean)

    def test_recovers_scale_of_proportional_levels(self, fast_opt):
        f1 = lambda X: np.sin(2 * np.pi * X[:, 0]) + X[:, 0]
        X1 = np.linspace(0.0, 1.0, 15).reshape(-1, 1)
        X2 = np.linspace(0.03, 0.97, 10).reshape(-1, 1)
        model = fit_hk(make_levels([X1, X2], [f1, lambda X: 3.0 * f1(X)]), opt=fast_opt)
        assert model.scaling[0] == pytest.approx(3.0, abs=1e-2)


class TestUnifiedInterface:
    def test_ko_needs_two_levels(self, rng, fast_opt):
        X = rng.uniform(size=(6, 2))
        data = MultiLevelData((LevelData(X, smooth_l1(X)),))
        with pytest.raises(InvalidArgumentError, match="K&O requires"):
            fit_model(data, FitSettings(method=Method.KO, optimizer=fast_opt))

    def test_single_gp_uses_top_level_only(self, random_two_level, fast_opt):
        model = fit_model(random_two_level, FitSettings(method=Method.SINGLE, optimizer=fast_opt))
        assert model.emulator.data is random_two_level.top

    @pytest.mark.parametrize("method", list(Method))
    def test_rebuild_from_state_predicts_identically(self, rng, random_two_level, fast_opt, method):
        settings = FitSettings(method=method, optimizer=fast_opt)
        model = fit_model(random_two_level, settings)
        rebuilt = build_model(random_two_level, settings, model.state())
        Xt = rng.uniform(size=(25, 2))
        a, b = predict_model(model, Xt), predict_model(rebuilt, Xt)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.variance, b.variance)

    def test_describe_lists_fitted_components(self, random_two_level, fast_opt):
        ko = fit_model(random_two_level, FitSettings(method=Method.KO, optimizer=fast_opt))
        rows = ko.describe()
        assert len(rows) == 2 and rows[1]["rho"] == 1.0
        per_level = fit_model(
            random_two_level, FitSettings(method=Method.BAYHEM, mode=ThetaMode.PER_LEVEL, optimizer=fast_opt)
        )
        assert [row["component"] for row in per_level.describe()] == [
            "theta_0 (level 1 prior)",
            "theta_1 (level 2 prior)",
            "level 1 link (theta_1)",
        ]
        exact = fit_model(random_two_level, FitSettings(links=LinkMode.EXACT, optimizer=fast_opt))
        assert [row["component"] for row in exact.describe()] == ["theta_0 (all levels)"]

    def test_settings_dict_form(self, fast_opt):
        settings = FitSettings(
            method=Method.KO,
            mode=ThetaMode.PER_LEVEL,
            objective=Objective.TOP_CONDITIONAL,
            rho=RhoSpec(estimate=True),
            mean_spec=MeanSpec(MeanForm.LINEAR),
            kernel_spec=KernelSpec(jitter=1e-6),
            optimizer=fast_opt,
            links=LinkMode.EXACT,
            level_trend=MeanSpec(MeanForm.LINEAR),
            link_nugget=1e-3,
        )
        assert FitSettings.from_dict(settings.to_dict()) == settings

    def test_negative_link_nugget_rejected(self):
        with pytest.raises(InvalidArgumentError):
            FitSettings(link_nugget=-1.0)
