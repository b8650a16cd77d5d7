"""
Конфигурация прогонов, шаг по времени, траектории и эксперименты-проверки
"""
import json
from pathlib import Path

import numpy as np
import pytest

from modules.errors import ConfigError, StepError
from modules import experiments as experiments_module
from modules.collision import AngularQuadrature
from modules.fast_spectral import SpectralConfig
from modules.experiments import (
    FIT_WINDOW_POINTS, MASS_DRIFT_TOL, SNAPSHOTS_PER_WINDOW, CollisionSolver, ExperimentConfig, TimeSeriesRecord,
    benchmark_fast_path, fit_window_times, gaussian_bump, integrate, invariant_reports, largest_stable_t_star,
    load_trajectory, make_initial, ode_comparison_check, revalidate, run_dissipation_budget, run_experiment,
    run_l1w_propagation, run_linfty_generation, run_lp_generation, run_lp_propagation, snapshot_schedule, step,
    window_times,
)
from modules.kernel_grid import ClassUParams, KernelParams, check_class_u, make_grid
from modules.settings import CODE_VERSION

INI_TEXT = """
[kernel]
gamma = -1.0
s = 0.5
eps_theta = 0.2
delta_rel = auto

[grid]
n = 8
radius = 4.0

[initial]
kind = bump
width = 0.9

[run]
p_list = 1.5, 2
t_star = 0.1
T = 0.5
scheme = euler

[solver]
n_theta = 4
n_phi = 4
"""


@pytest.fixture
def tiny_config():
    grid = make_grid(4, 3.0)
    return ExperimentConfig(
        kernel=KernelParams(-1.0, 0.5, eps_theta=0.2, delta_rel=0.5 * grid.spacing),
        n=4, radius=3.0, T=0.02, t_star=0.02, n_theta=4, n_phi=4, deposit='trilinear', name='tiny',
    )


@pytest.fixture
def maxwell_config():
    grid = make_grid(6, 4.0)
    return ExperimentConfig(
        kernel=KernelParams(-0.5, 0.5, eps_theta=0.2, delta_rel=0.5 * grid.spacing),
        n=6, radius=4.0, T=0.2, t_star=0.2, t_star_list=(0.05, 0.1), n_theta=4, n_phi=4,
        initial={'kind': 'maxwellian'}, name='maxwell',
    )


def stationary_record(config, dt_estimate=1e-3):
    """Стационарная траектория f(t) = f0 по расписанию снимков прогона"""
    f0 = make_initial(config)
    mass0 = f0.mass()
    class_u = ClassUParams(0.9 * mass0, 10.0 * check_class_u(f0, ClassUParams(mass0, 1.0)).entropy_energy, config.w)
    record = TimeSeriesRecord(config, tolerances={'dt_estimate': dt_estimate})
    for t in snapshot_schedule(config, dt_estimate):
        record.add_snapshot(f0.with_time(float(t)), class_u, 0.0)
    return record


class TestExperimentConfig:

    def test_from_mapping_auto_delta(self):
        config = ExperimentConfig.from_mapping({
            'kernel': {'gamma': -1.0, 's': 0.5, 'delta_rel': 'auto'},
            'grid': {'n': 8, 'radius': 4.0},
        })
        assert config.kernel.delta_rel == pytest.approx(0.5)
        assert config.p_list == (2.0,)

    def test_from_ini(self, tmp_path):
        path = tmp_path / 'run.ini'
        path.write_text(INI_TEXT, encoding='utf-8')
        config = ExperimentConfig.from_file(path)
        assert config.p_list == (1.5, 2.0)
        assert config.scheme == 'euler'
        assert config.initial['kind'] == 'bump'
        assert config.kernel.delta_rel == pytest.approx(0.5 * config.grid.spacing)
        assert (config.n_theta, config.n_phi) == (4, 4)

    def test_from_json_matches_echo(self, tmp_path):
        config = ExperimentConfig.from_mapping({'kernel': {'gamma': -0.5, 's': 0.3}, 'grid': {'n': 8}})
        path = tmp_path / 'run.json'
        path.write_text(json.dumps(config.to_mapping()), encoding='utf-8')
        assert ExperimentConfig.from_file(path) == config

    @pytest.mark.parametrize('mapping', [
        {'grid': {'n': 8}},
        {'kernel': {'gamma': -1.0, 's': 0.5}, 'run': {'t_star': 2.0, 'T': 1.0}},
        {'kernel': {'gamma': -1.0, 's': 0.5}, 'run': {'scheme': 'rk4'}},
        {'kernel': {'gamma': -1.0, 's': 0.5}, 'initial': {'kind': 'unknown'}},
        {'kernel': {'gamma': -1.0, 's': 'x'}},
    ])
    def test_rejects_bad_mapping(self, mapping):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_mapping(mapping)

    def test_rejects_p_outside_window(self):
        """Очень мягкий режим: p должно быть больше 3/(3+γ+2s)"""
        with pytest.raises(ConfigError):
            ExperimentConfig(kernel=KernelParams(-2.0, 0.5), p_list=(1.2,))

    @pytest.mark.parametrize('name', ['bump.ini', 'spike_very_soft.ini'])
    def test_bundled_configs(self, name):
        config = ExperimentConfig.from_file(Path(__file__).parent.parent / 'configs' / name)
        assert config.kernel.delta_rel == pytest.approx(0.5 * config.grid.spacing)
        assert config.t_star in config.t_stars

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(tmp_path / 'absent.ini')


class TestInitialData:

    def test_bump_mass_is_exact(self, grid6):
        values = gaussian_bump(grid6, (0.5, 0.0, 0.0), 0.9, 2.0)
        assert values.sum() * grid6.cell_volume == pytest.approx(2.0, rel=1e-14)

    def test_bump_rejects_width(self, grid6):
        with pytest.raises(ConfigError):
            gaussian_bump(grid6, None, 0.0, 1.0)

    def test_spike(self, tiny_config):
        f0 = make_initial(tiny_config.with_overrides(initial={'kind': 'spike', 'mass': 0.5}))
        assert f0.mass() == pytest.approx(0.5)
        assert np.count_nonzero(f0.values) == 1

    def test_missing_initial_file(self, tiny_config, tmp_path):
        with pytest.raises(ConfigError):
            make_initial(tiny_config.with_overrides(initial={'kind': 'file', 'path': str(tmp_path / 'f0.bin')}))


class TestStep:

    def test_zero_dt_is_identity(self, maxwell6, kernel6, angular):
        solver = CollisionSolver(kernel6, angular)
        f = maxwell6.with_time(0.0)
        assert step(f, 0.0, 'rk3_ssp', solver) is f
        assert solver.calls == 0

    def test_negative_dt(self, maxwell6, kernel6, angular):
        with pytest.raises(StepError):
            step(maxwell6, -1e-3, 'euler', CollisionSolver(kernel6, angular))

    def test_dt_above_stability_limit(self, bump6, kernel6, angular):
        solver = CollisionSolver(kernel6, angular)
        dt_max = solver.dt_max(bump6, 0.5)
        assert 0.0 < dt_max < np.inf
        with pytest.raises(StepError):
            step(bump6, 10.0 * dt_max, 'euler', solver)

    def test_stable_step_keeps_mass(self, bump6, kernel6, angular):
        solver = CollisionSolver(kernel6, angular, deposit='trilinear')
        f = bump6.with_time(0.0)
        g = step(f, solver.dt_max(f, 0.5), 'rk3_ssp', solver)
        assert g.time_tag > 0.0
        assert np.all(g.values >= 0.0)
        assert g.positivity_report['clamped_mass'] <= 0.01 * f.mass()
        assert solver.calls == 3


class TestSchedule:

    def test_window_times(self, kernel6):
        times = window_times(kernel6, 1.0)
        assert len(times) == 8 * SNAPSHOTS_PER_WINDOW + 1
        assert times[-1] == 1.0
        assert times.min() == pytest.approx(0.25)

    def test_fit_window_is_populated(self):
        """Расписание по умолчанию даёт не меньше FIT_WINDOW_POINTS моментов в [4 dt, t*/4]"""
        config = ExperimentConfig(kernel=KernelParams(-0.5, 0.5, eps_theta=0.2), n=6, radius=4.0)
        dt = 1e-3
        times = snapshot_schedule(config, dt)
        inside = times[(times >= 4.0 * dt) & (times <= 0.25 * config.t_star)]
        assert len(inside) >= FIT_WINDOW_POINTS, f"в окне подгонки {len(inside)} точек"
        for t in fit_window_times(config, dt):
            assert np.min(np.abs(times - t)) <= 1e-12

    def test_fit_window_empty_for_large_step(self, tiny_config):
        assert len(fit_window_times(tiny_config, tiny_config.t_star)) == 0

    def test_schedule_is_strictly_increasing(self, tiny_config):
        times = snapshot_schedule(tiny_config)
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(tiny_config.T)
        assert np.all(np.diff(times) > 0.0)
        for t in window_times(tiny_config.kernel, tiny_config.t_star):
            assert np.min(np.abs(times - t)) <= 1e-12 * tiny_config.T


class TestOdeComparison:

    def test_envelope_dominates(self):
        report = ode_comparison_check(alpha=1.0, C=1.0, theta=0.75, T=1.0)
        assert report['beta'] == pytest.approx(3.0)
        assert report['pass'], report

    def test_rejects_parameters(self):
        with pytest.raises(ConfigError):
            ode_comparison_check(alpha=1.0, C=1.0, theta=1.0, T=1.0)


class TestIntegrate:

    def test_l1w_requires_weight_above_two(self, tiny_config):
        with pytest.raises(ConfigError):
            run_l1w_propagation(tiny_config.with_overrides(w=2.0))

    def test_trajectory_round_trip(self, tiny_config, tmp_path):
        record = integrate(tiny_config, tmp_path)
        assert record.times[0] == 0.0
        assert record.times[-1] == pytest.approx(tiny_config.T)
        mass = record.moment('mass')
        assert abs(mass[-1] / mass[0] - 1.0) <= 0.2
        data = load_trajectory(tmp_path)
        assert len(data.snapshots) == len(record.times)
        assert data.manifest['code_version'] == CODE_VERSION
        assert data.manifest['grid_hash'] == tiny_config.grid.grid_hash()
        assert np.allclose(data.snapshots[-1].values, record.snapshots[-1].values)

        stable = largest_stable_t_star(record, 2.0, [0.005, 0.01, 0.02])
        assert stable['largest_t_star'] == 0.02
        assert 'stable' not in stable


class TestStationaryDrivers:
    """Проверки на стационарном максвеллиане: все оболочки выполняются с константой ‖M‖_p"""

    def test_lp_propagation_ratio_is_one(self, maxwell_config):
        report = run_lp_propagation(maxwell_config, 2.0, stationary_record(maxwell_config), refine=False)
        assert report['ratio'] == pytest.approx(1.0, abs=1e-12)
        assert report['pass']

    def test_lp_generation_constant_is_norm(self, maxwell_config):
        record = stationary_record(maxwell_config)
        report = run_lp_generation(maxwell_config, 2.0, record, refine=False)
        lp0 = record.series(2.0, 'lp')[0]
        assert report['fit_window_ok'] and report['fit_window_points'] >= FIT_WINDOW_POINTS
        assert report['slope'] == pytest.approx(0.0, abs=1e-9)
        assert 0.0 < report['fitted_constant'] <= lp0 * (1 + 1e-12)
        assert report['pass'], report
        assert 'lp_generation_2' in record.fits

    def test_dissipation_tail_is_linear(self, maxwell_config):
        report = run_dissipation_budget(maxwell_config, 2.0, stationary_record(maxwell_config), refine=False)
        times, tail = np.asarray(report['times']), np.asarray(report['tail'])
        assert tail[-1] == 0.0
        assert np.allclose(tail, tail[0] * (maxwell_config.T - times) / maxwell_config.T,
                           rtol=1e-9, atol=1e-12 * tail[0])
        assert report['monotone'] and report['pass']

    def test_linfty_independent_of_t_star(self, maxwell_config):
        record = stationary_record(maxwell_config)
        report = run_linfty_generation(maxwell_config, record)
        k_stars = [row['K_star'] for row in report['rows']]
        assert [row['t_star'] for row in report['rows']] == [0.05, 0.1, 0.2]
        assert k_stars == pytest.approx([k_stars[0]] * 3, rel=1e-3)
        top = float(record.snapshots[0].values.max())
        for row in report['rows']:
            assert row['sound'] and row['K_star'] >= top * (1 - 1e-9), row
        assert report['pass']

    def test_refinement_disagreement_fails(self, maxwell_config):
        """Константа на dt/2 втрое больше базовой: проверка не проходит"""
        record = stationary_record(maxwell_config)
        fine = TimeSeriesRecord(maxwell_config)
        class_u = ClassUParams(0.1, 1e6, maxwell_config.w)
        for i, f in enumerate(record.snapshots):
            fine.add_snapshot(f if i == 0 else f.scaled(3.0), class_u, 0.0)
        report = run_lp_propagation(maxwell_config, 2.0, record, fine_record=fine)
        assert report['fitted_constant_fine'] == pytest.approx(3.0)
        assert not report['refinement_agrees'] and not report['pass']

    def test_invariants_hold(self, maxwell_config):
        reports = invariant_reports(stationary_record(maxwell_config))
        assert [r['check_name'] for r in reports] == [
            'mass_conservation', 'energy_conservation', 'class_u', 'entropy_monotone']
        assert all(r['pass'] for r in reports), reports

    def test_invariants_catch_drift(self, maxwell_config):
        record = stationary_record(maxwell_config)
        record.moments[-1]['mass'] *= 1.0 + 10.0 * MASS_DRIFT_TOL
        record.moments[3]['class_u'] = False
        record.moments[5]['entropy'] += 1e-3
        reports = {r['check_name']: r for r in invariant_reports(record)}
        assert not reports['mass_conservation']['pass']
        assert reports['energy_conservation']['pass']
        assert reports['class_u']['lhs'] == 1.0 and reports['class_u']['times_outside'] == [record.times[3]]
        assert not reports['entropy_monotone']['pass']


class TestRevalidate:

    def test_variants(self, tiny_config):
        seen = []

        def driver(variant):
            seen.append((variant.n, variant.dt_safety))
            return {'check_name': 'grid', 'fitted_constant': float(variant.n), 'pass': True}

        report = revalidate(tiny_config, driver)
        assert seen == [(4, 0.5), (6, 0.5), (4, 0.25)]
        assert report['outcomes'] == {'base': True, 'finer_grid': True, 'finer_dt': True}
        assert report['spread'] == pytest.approx(1.5)
        assert report['pass']

    def test_failed_variant(self, tiny_config):
        def driver(variant):
            if variant.n > 4:
                raise RuntimeError('сетка не помещается')
            return {'check_name': 'grid', 'fitted_constant': 1.0, 'pass': True}

        report = revalidate(tiny_config, driver)
        assert report['outcomes']['finer_grid'] is False
        assert 'сетка не помещается' in report['reports']['finer_grid']['error']
        assert not report['pass']

    def test_lp_propagation_small_grid(self, tiny_config):
        report = revalidate(tiny_config, run_lp_propagation, p=2.0, refine=False)
        assert set(report['outcomes']) == {'base', 'finer_grid', 'finer_dt'}
        assert set(report['spreads']) == {'lp_propagation_2'}
        assert report['pass'], report


class TestRunExperiment:

    def test_refined_lp_propagation(self, tiny_config):
        report = run_lp_propagation(tiny_config, 2.0)
        assert np.isfinite(report['fitted_constant_fine'])
        assert report['refinement_agrees'], report
        assert report['pass'] == report['refinement_agrees']

    def test_summary_reports(self, tiny_config, tmp_path):
        summary = run_experiment(tiny_config, tmp_path, refine=False)
        names = [r['check_name'] for r in summary['reports']]
        assert names[:4] == ['mass_conservation', 'energy_conservation', 'class_u', 'entropy_monotone']
        assert {'l1w_propagation', 'lp_propagation', 'linfty_generation'} <= set(names)
        assert 'lp_generation' not in names
        assert summary['pass'] == all(r['pass'] for r in summary['reports'])
        saved = json.loads((tmp_path / 'summary.json').read_text(encoding='utf-8'))
        assert saved['pass'] == summary['pass']

    def test_invariant_failure_fails_run(self, tiny_config, monkeypatch):
        original = experiments_module.invariant_reports

        def broken(record):
            reports = original(record)
            reports[2] = dict(reports[2], lhs=1.0, times_outside=[record.times[-1]])
            reports[2]['pass'] = False
            return reports

        monkeypatch.setattr(experiments_module, 'invariant_reports', broken)
        summary = run_experiment(tiny_config, refine=False)
        assert not summary['pass']
        assert not summary['class_u_everywhere']


    def test_revalidation_joins_pass(self, tiny_config, monkeypatch):
        calls = []

        def disagreeing(config, driver, base_report=None, **kwargs):
            calls.append((driver, base_report is not None, kwargs))
            return {'check_name': 'revalidate', 'lhs': 3.0, 'rhs': 2.0, 'pass': False,
                    'reports': {'base': base_report}}

        monkeypatch.setattr(experiments_module, 'revalidate', disagreeing)
        summary = run_experiment(tiny_config, refine=False, revalidate_runs=True)
        assert calls == [(run_experiment, True, {'refine': False})]
        last = summary['reports'][-1]
        assert last['check_name'] == 'revalidate' and 'reports' not in last
        assert not summary['pass']

class TestBenchmark:

    def test_frame_and_csv(self, tmp_path):
        aq = AngularQuadrature(n_theta=4, n_phi=4)
        frame = benchmark_fast_path(
            n_list=(4,), kp=KernelParams(-1.0, 0.5, eps_theta=0.2), radius=3.0, aq=aq,
            spectral=SpectralConfig(n_rho=4, lebedev_order=3, angular=aq), csv_path=tmp_path / 'bench.csv',
        )
        assert list(frame.columns) == ['n', 'direct_ms', 'fast_ms', 'speedup', 'rel_l2']
        assert frame['n'].tolist() == [4]
        assert np.isfinite(frame['rel_l2']).all() and (frame['direct_ms'] > 0).all()
        assert (tmp_path / 'bench.csv').exists()
