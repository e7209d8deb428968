import csv
import warnings
from unittest import mock

import numpy as np
import pytest
from testfixtures import compare

from nikrecon import classic, geometry, metrics, navigator, simulator
from nikrecon.classic import DynamicImage, LineSearchWarning, XDGraspConfig, XDGraspProblem
from nikrecon.simulator import MotionModel
from nikrecon.utils import ConfigError, DataError, DivergenceError


def _bins(n_spokes=24, n_fe=8, n_coils=2, n_bins=2, noise=0.0):
    phantom = simulator.default_phantom()
    coils = simulator.coil_maps_analytic(n_coils, n_fe, n_fe)
    traj = geometry.golden_angle_trajectory(n_spokes, n_fe)
    ds = simulator.simulate_acquisition(
        phantom, MotionModel(period=7), coils, traj, noise, seed=0
    )
    nav = navigator.oracle_navigator(ds)
    return navigator.bin_by_navigator(ds, nav, n_bins), coils


def _random(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_inufft_recon():
    bins, coils = _bins()
    result = classic.inufft_recon(bins, coils)

    compare(result.images.shape, expected=(2, 8, 8))
    compare(result.method, expected="inufft")
    compare(result.n_states, expected=2)
    compare(result.nav_ranges, expected=classic.nav_ranges(bins))
    assert result.nav_ranges[0][0] >= result.nav_ranges[1][1]


def test_inufft_recon_grid_mismatch():
    bins, _ = _bins()

    with pytest.raises(DataError):
        classic.inufft_recon(bins, simulator.coil_maps_analytic(2, 16, 16))

    with pytest.raises(DataError):
        classic.inufft_recon([], simulator.coil_maps_analytic(2, 8, 8))


def test_dynamic_image_validation():
    with pytest.raises(DataError):
        DynamicImage(images=np.zeros((8, 8)))

    with pytest.raises(DivergenceError):
        DynamicImage(images=np.full((1, 2, 2), np.nan))


def test_config_validation():
    with pytest.raises(ConfigError):
        XDGraspConfig(lambda_spatial=-1)

    with pytest.raises(ConfigError):
        XDGraspConfig(tv_smoothing=0)

    with pytest.raises(ConfigError):
        XDGraspConfig(backtrack=1.0)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_difference_adjoint(axis):
    rng = np.random.default_rng(axis)
    x = _random(rng, (3, 4, 5))
    v = _random(rng, (3, 4, 5))

    lhs = np.vdot(classic._diff(x, axis), v)
    rhs = np.vdot(x, classic._diff_adjoint(v, axis))

    assert abs(lhs - rhs) < 1e-10 * abs(lhs)


def test_tv_of_constant_is_zero():
    x = np.full((3, 4, 4), 2.0 + 1.0j)
    compare(classic.tv_value(x, 1e-7), expected=0.0)
    np.testing.assert_allclose(classic.tv_grad(x, 1e-7), 0.0)


def test_temporal_tv_is_circular():
    x = np.zeros((3, 2, 2))
    x[0] = 1.0
    # jumps 0->1 and 2->0 both count
    assert classic.tv_value(x, 1e-12, axes=(0,)) == pytest.approx(8.0, rel=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_tv_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = _random(rng, (3, 5, 5))
    d = _random(rng, (3, 5, 5))
    mu, h = 1e-3, 1e-6

    numeric = (classic.tv_value(x + h * d, mu) - classic.tv_value(x - h * d, mu)) / (2 * h)
    analytic = np.vdot(classic.tv_grad(x, mu), d).real

    assert abs(numeric - analytic) <= 1e-4 * abs(analytic)


@pytest.mark.parametrize("seed", range(5))
def test_objective_gradient_matches_finite_differences(seed):
    bins, coils = _bins(n_spokes=12)
    cfg = XDGraspConfig(
        lambda_spatial=0.3, lambda_temporal=0.5, tv_smoothing=1e-3, regularization_scale=1.0
    )
    problem = XDGraspProblem(bins, coils, cfg)

    rng = np.random.default_rng(seed)
    x = _random(rng, (2, 8, 8))
    d = _random(rng, (2, 8, 8))
    h = 1e-6

    numeric = (problem.objective(x + h * d) - problem.objective(x - h * d)) / (2 * h)
    analytic = np.vdot(problem.gradient(x), d).real

    assert abs(numeric - analytic) <= 1e-4 * abs(analytic)


def test_weighted_data_adjoint_is_inufft():
    bins, coils = _bins()
    problem = XDGraspProblem(bins, coils, XDGraspConfig())

    np.testing.assert_allclose(
        problem.adjoint([b.target for b in problem.bins]),
        classic.inufft_recon(bins, coils).images,
        rtol=1e-10,
        atol=1e-12,
    )


def test_objective_at_zero_is_data_norm():
    bins, coils = _bins()
    problem = XDGraspProblem(bins, coils, XDGraspConfig())
    norm = sum(np.vdot(b.target, b.target).real for b in problem.bins)

    value = classic.objective_value(
        bins, coils, DynamicImage(images=np.zeros((2, 8, 8), complex)), XDGraspConfig()
    )

    assert value == pytest.approx(norm, rel=1e-12)


def test_regularization_relative_to_inufft():
    bins, coils = _bins()
    scale = np.abs(classic.inufft_recon(bins, coils).images).max()

    problem = XDGraspProblem(bins, coils, XDGraspConfig())
    assert problem.lambda_spatial == pytest.approx(0.01 * scale)
    assert problem.lambda_temporal == pytest.approx(0.1 * scale)

    fixed = XDGraspProblem(bins, coils, XDGraspConfig(regularization_scale=2.0))
    assert fixed.lambda_spatial == pytest.approx(0.02)


def test_objective_decreases_every_iteration():
    bins, coils = _bins(n_spokes=40, n_bins=4, noise=0.01)
    result = classic.xdgrasp_recon(bins, coils, XDGraspConfig(n_iter=15))

    objective = [r.objective for r in result.history]
    compare(result.history[0].iteration, expected=0)
    assert len(objective) > 1
    assert all(b < a for a, b in zip(objective, objective[1:]))
    compare(result.method, expected="xdgrasp")


def _check_normal_equations(n_fe, n_spokes, n_iter):
    bins, coils = _bins(n_spokes=n_spokes, n_fe=n_fe, n_coils=4, n_bins=1)
    cfg = XDGraspConfig(lambda_spatial=0, lambda_temporal=0, n_iter=n_iter, restart=n_iter)
    problem = XDGraspProblem(bins, coils, cfg)

    columns = []
    for j in range(n_fe * n_fe):
        basis = np.zeros((1, n_fe, n_fe), dtype=complex)
        basis.flat[j] = 1.0
        columns.append(np.concatenate([v.ravel() for v in problem.forward(basis)]))
    matrix = np.stack(columns, axis=1)
    target = np.concatenate([b.target.ravel() for b in problem.bins])
    oracle = np.linalg.lstsq(matrix, target, rcond=None)[0].reshape(n_fe, n_fe)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LineSearchWarning)
        result = classic.xdgrasp_recon(bins, coils, cfg)

    nrmse = np.linalg.norm(result.images[0] - oracle) / np.linalg.norm(oracle)
    assert nrmse < 0.05


def test_unregularized_solution_matches_normal_equations():
    """
    With no regularization a single fully sampled bin solves the weighted
    least-squares problem.
    """
    _check_normal_equations(n_fe=8, n_spokes=32, n_iter=200)


@pytest.mark.slow
def test_unregularized_solution_matches_normal_equations_at_32():
    _check_normal_equations(n_fe=32, n_spokes=64, n_iter=600)



def test_line_search_failure_keeps_iterate():
    bins, coils = _bins()
    init = classic.inufft_recon(bins, coils)
    cfg = XDGraspConfig(max_backtracks=2)

    values = mock.Mock(side_effect=[1.0] + [2.0] * 3)
    with mock.patch.object(XDGraspProblem, "_value", values):
        with pytest.warns(LineSearchWarning):
            result = classic.xdgrasp_recon(bins, coils, cfg, init=init)

    assert result.line_search_failed
    compare(len(result.history), expected=1)
    np.testing.assert_array_equal(result.images, init.images)


def test_write_objective_csv(tmp_path):
    history = [
        classic.IterationRecord(0, 2.5, 0.0, 0),
        classic.IterationRecord(1, 1.25, 0.5, 1),
    ]
    path = tmp_path / "objective.csv"

    classic.write_objective_csv(history, path)

    with open(path) as f:
        rows = list(csv.reader(f))

    compare(
        rows,
        expected=[
            ["iteration", "objective", "step", "backtracks"],
            ["0", "2.5", "0.0", "0"],
            ["1", "1.25", "0.5", "1"],
        ],
    )


def test_tv_gradient_of_a_hot_pixel_sums_to_zero():
    x = np.zeros((3, 6, 6), dtype=complex)
    x[1, 2, 4] = 5.0 - 2.0j

    grad = classic.tv_grad(x, 1e-6)

    assert abs(grad.sum()) < 1e-9
    assert np.abs(grad).max() > 0


def test_fully_sampled_inufft_recovers_the_phantom():
    n_fe = 64
    phantom = simulator.default_phantom()
    coils = simulator.coil_maps_analytic(4, n_fe, n_fe)
    traj = geometry.golden_angle_trajectory(128, n_fe)
    ds = simulator.simulate_acquisition(
        phantom, MotionModel(amplitude=0.0), coils, traj, 0.0, seed=0
    )

    image = classic.inufft_recon([ds], coils).images[0]
    truth = simulator.phantom_image(phantom, 0.0, n_fe, n_fe)

    assert metrics.nrmse(image, truth) < 0.15


def test_temporal_weight_flattens_the_motion_states():
    bins, coils = _bins(n_spokes=64, n_fe=16, n_bins=4, noise=0.05)

    def temporal_variance(lambda_temporal):
        cfg = XDGraspConfig(lambda_spatial=0, lambda_temporal=lambda_temporal, n_iter=30)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LineSearchWarning)
            images = classic.xdgrasp_recon(bins, coils, cfg).images
        return float(np.var(images, axis=0).mean())

    assert temporal_variance(10.0) < 0.5 * temporal_variance(0.0)


@pytest.mark.slow
def test_xdgrasp_beats_inufft_when_undersampled():
    """
    At threefold undersampling the regularized reconstruction of the
    end-exhale bin gains at least 1 dB PSNR over gating alone.
    """
    n_fe = 64
    phantom = simulator.default_phantom()
    coils = simulator.coil_maps_analytic(4, n_fe, n_fe)
    traj = geometry.golden_angle_trajectory(300, n_fe)
    noise_std = 0.02 * simulator.center_magnitude(phantom, coils)
    full = simulator.simulate_acquisition(
        phantom, MotionModel(period=60), coils, traj, noise_std, seed=0
    )
    ds = simulator.retrospective_undersample(full, 3.0)
    bins = navigator.bin_by_navigator(ds, navigator.oracle_navigator(ds), 4)

    truth = simulator.phantom_image(phantom, float(np.mean(bins[0].spoke_nav)), n_fe, n_fe)
    gated = classic.inufft_recon(bins, coils).images[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LineSearchWarning)
        regularized = classic.xdgrasp_recon(bins, coils, XDGraspConfig(n_iter=40)).images[0]

    assert metrics.psnr(regularized, truth) >= metrics.psnr(gated, truth) + 1.0
