"""
Подгонки, графики и отчёты по прогонам
"""
import asyncio
import zipfile

import numpy as np
import pandas as pd
import pytest

from modules.analytics import AnalyticsManager, fit_envelope, fit_loglog_slope, is_nonincreasing
from modules.db_manager import DatabaseManager


class TestFits:

    def test_exact_power_law(self):
        t = np.geomspace(1e-3, 1.0, 20)
        fit = fit_loglog_slope(t, 5.0 * t ** -0.75)
        assert fit['slope'] == pytest.approx(-0.75, abs=1e-10)
        assert fit['intercept'] == pytest.approx(np.log(5.0), abs=1e-10)
        assert fit['ci'][0] <= fit['slope'] <= fit['ci'][1]

    def test_needs_three_positive_points(self):
        with pytest.raises(ValueError):
            fit_loglog_slope([1.0, 2.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            fit_loglog_slope([1.0, 2.0, 3.0], [1.0, 0.0, 2.0])

    def test_three_points_without_interval(self):
        fit = fit_loglog_slope([1.0, 2.0, 4.0], [1.0, 0.5, 0.25])
        assert fit['slope'] == pytest.approx(-1.0, abs=1e-12)
        assert fit['ci'] == (-np.inf, np.inf)

    def test_envelope_is_tight(self):
        t = np.linspace(0.0, 1.0, 11)
        values = 2.0 * (np.where(t > 0, t, 1.0) ** -3.0 + 1.0)
        assert fit_envelope(t, values, 3.0) == pytest.approx(2.0)
        assert np.isnan(fit_envelope([0.0], [1.0], 3.0))

    def test_nonincreasing(self):
        assert is_nonincreasing([3.0, 2.0, 2.0, 1.0])
        assert not is_nonincreasing([1.0, 1.0 + 1e-6])
        assert is_nonincreasing([1.0, 1.0 + 1e-9], atol=1e-8)


@pytest.fixture
def analytics(tmp_path):
    return AnalyticsManager(DatabaseManager(f"sqlite:///{tmp_path / 'runs.db'}"), tmp_path / 'reports')


def run_in_loop(manager, scenario):
    async def wrapper():
        await manager.db_manager.init_db()
        try:
            return await scenario()
        finally:
            await manager.db_manager.close()
    return asyncio.run(wrapper())


def _series():
    t = np.linspace(0.0, 1.0, 6)
    return [{'time': float(x), 'mass': 1.0, 'energy': 3.0, 'entropy': -2.8 - 0.01 * x, 'lp_2': 0.15 / (1 + x)}
            for x in t]


class TestAnalyticsManager:

    def test_plot(self, analytics, tmp_path):
        frame = pd.DataFrame(_series())
        path = analytics.plot_timeseries(frame, tmp_path / 'plot.png', 'bump')
        assert path is not None and path.stat().st_size > 0

    def test_statistics_and_report(self, analytics):
        db = analytics.db_manager

        async def scenario():
            run_id = await db.create_run('bump')
            await db.add_snapshots(run_id, _series())
            await db.log_check({'check_name': 'lemma21', 'lhs': 1.0, 'rhs': 2.0, 'pass': True}, run_id)
            await db.log_check({'check_name': 'hardy', 'lhs': 3.0, 'rhs': 2.0, 'pass': False}, run_id)
            await db.finish_run(run_id, {'pass': False})
            stats = await analytics.get_run_statistics(run_id)
            path = await analytics.generate_report([run_id], 'report.xlsx')
            return run_id, stats, path

        run_id, stats, path = run_in_loop(analytics, scenario)
        assert stats['checks_total'] == 2 and stats['checks_failed'] == 1
        assert stats['mass_drift'] == 0.0
        assert stats['entropy_nonincreasing']
        assert path is not None and path.exists()
        assert (path.parent / f'report_run_{run_id}.png').exists()
        workbook = zipfile.ZipFile(path).read('xl/workbook.xml').decode('utf-8')
        for sheet in ('summary', 'checks', f'run_{run_id}'):
            assert f'name="{sheet}"' in workbook

    def test_missing_run(self, analytics):
        assert run_in_loop(analytics, lambda: analytics.get_run_statistics(999)) is None
