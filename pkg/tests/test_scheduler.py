"""
Планировщик серий прогонов
"""
import asyncio

import pytest

from modules import scheduler as scheduler_module
from modules.experiments import ExperimentConfig
from modules.kernel_grid import KernelParams, make_grid
from modules.scheduler import SchedulerManager


class FakeDatabase:
    """Запоминает вызовы вместо записи в sqlite"""

    def __init__(self, run_id=1):
        self.run_id = run_id
        self.calls = []

    async def create_run(self, name, config=None, **kwargs):
        self.calls.append(('create_run', name))
        return self.run_id

    async def update_run(self, run_id, **fields):
        self.calls.append(('update_run', run_id, fields))
        return True

    async def add_snapshots(self, run_id, rows):
        self.calls.append(('add_snapshots', run_id, len(rows)))
        return True

    async def log_check(self, report, run_id=None):
        self.calls.append(('log_check', report['check_name']))
        return 1

    async def finish_run(self, run_id, summary, error=None):
        self.calls.append(('finish_run', run_id, None if error is None else str(error)))
        return True


def tiny_config(name='tiny'):
    grid = make_grid(4, 3.0)
    return ExperimentConfig(
        kernel=KernelParams(-1.0, 0.5, eps_theta=0.2, delta_rel=0.5 * grid.spacing),
        n=4, radius=3.0, T=0.02, t_star=0.02, n_theta=4, n_phi=4, deposit='trilinear', name=name,
    )


class TestSchedulerManager:

    def test_start_stop(self):
        async def scenario():
            manager = SchedulerManager(FakeDatabase(), max_workers=0)
            await manager.start()
            started = manager.running and manager.executor is not None
            await manager.stop()
            return started, manager

        started, manager = asyncio.run(scenario())
        assert started
        assert manager.max_workers == 1
        assert not manager.running and manager.executor is None

    def test_cancel_unknown_run(self):
        manager = SchedulerManager(FakeDatabase())
        assert asyncio.run(manager.cancel_run(42)) is False

    def test_submit_without_run_id(self, tmp_path):
        async def scenario():
            manager = SchedulerManager(FakeDatabase(run_id=None))
            try:
                return await manager.submit(tiny_config(), tmp_path / 'run'), manager.jobs
            finally:
                await manager.stop()

        run_id, jobs = asyncio.run(scenario())
        assert run_id is None and jobs == {}
        assert (tmp_path / 'run').is_dir()

    def test_failed_job_is_recorded(self, tmp_path, monkeypatch):
        def broken(config, output_dir):
            raise RuntimeError('шаг не сошёлся')

        monkeypatch.setattr(scheduler_module, 'execute_job', broken)
        db = FakeDatabase()

        async def scenario():
            # executor=None: задача уходит в пул потоков цикла событий
            manager = SchedulerManager(db)
            manager.jobs[7] = asyncio.create_task(manager._run_job(7, tiny_config(), tmp_path))
            return await manager.wait_all(), manager.jobs

        results, jobs = asyncio.run(scenario())
        assert results[7]['pass'] is False and 'шаг не сошёлся' in results[7]['error']
        assert jobs == {}
        assert ('finish_run', 7, 'шаг не сошёлся') in db.calls
        assert db.calls[0] == ('update_run', 7, {'status': 'running'})


@pytest.mark.slow
def test_sweep_end_to_end(tmp_path):
    db = FakeDatabase()

    async def scenario():
        manager = SchedulerManager(db, max_workers=1)
        try:
            run_ids = await manager.submit_sweep([tiny_config('a')], tmp_path)
            return run_ids, await manager.wait_all()
        finally:
            await manager.stop()

    run_ids, results = asyncio.run(scenario())
    assert run_ids == [1]
    assert 'pass' in results[1]
    assert any(call[0] == 'add_snapshots' and call[2] > 0 for call in db.calls)
    assert (tmp_path / '000_a' / 'timeseries.csv').exists()
