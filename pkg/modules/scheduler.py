# modules/scheduler.py
import logging
import asyncio
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from modules.experiments import ExperimentConfig, run_experiment
from modules.settings import CODE_VERSION

logger = logging.getLogger(__name__)


def execute_job(config: ExperimentConfig, output_dir: str) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """
    Выполнение одного прогона в отдельном процессе

    Returns:
        (сводка в JSON-совместимом виде, строки временного ряда со ссылками на снимки)
    """
    summary = run_experiment(config, output_dir)
    frame = pd.read_csv(Path(output_dir) / 'timeseries.csv')
    rows = frame.to_dict(orient='records')
    for i, row in enumerate(rows):
        row['path'] = str(Path(output_dir) / f"snap_{i:05d}.bin")
    return summary, rows


class SchedulerManager:
    """Класс для параллельного выполнения серий прогонов"""

    def __init__(self, db_manager, max_workers: int = 1):
        self.db_manager = db_manager
        self.max_workers = max(1, int(max_workers))
        self.jobs = {}  # run_id -> asyncio.Task
        self.results = {}  # run_id -> сводка
        self.running = False
        self.executor: Optional[ProcessPoolExecutor] = None

    async def start(self):
        """Запускает пул процессов"""
        if not self.running:
            self.executor = ProcessPoolExecutor(max_workers=self.max_workers)
            self.running = True
            logger.info(f"Планировщик запущен, процессов: {self.max_workers}")

    async def stop(self):
        """Отменяет ожидающие задачи и останавливает пул"""
        if self.running:
            self.running = False
            for run_id, job in self.jobs.items():
                job.cancel()
            self.jobs = {}
            if self.executor is not None:
                self.executor.shutdown(wait=False, cancel_futures=True)
                self.executor = None
            logger.info("Планировщик остановлен")

    async def submit(self, config: ExperimentConfig, output_dir) -> Optional[int]:
        """
        Ставит прогон в очередь

        Args:
            config: конфигурация эксперимента
            output_dir: отдельный каталог прогона
        """
        try:
            if not self.running:
                await self.start()
            output_dir = Path(output_dir)
            output_dir.mkdir(parents=True, exist_ok=True)
            run_id = await self.db_manager.create_run(
                config.name, config.to_mapping(), kind='sweep', output_dir=output_dir,
                grid_hash=config.grid.grid_hash(), code_version=CODE_VERSION,
            )
            if run_id is None:
                return None
            self.jobs[run_id] = asyncio.create_task(self._run_job(run_id, config, output_dir))
            logger.info(f"Прогон #{run_id} ({config.name}) поставлен в очередь")
            return run_id
        except Exception as e:
            logger.error(f"Ошибка при постановке прогона {config.name} в очередь: {e}")
            return None

    async def submit_sweep(self, configs: List[ExperimentConfig], base_dir) -> List[int]:
        run_ids = []
        for i, config in enumerate(configs):
            run_id = await self.submit(config, Path(base_dir) / f"{i:03d}_{config.name}")
            if run_id is not None:
                run_ids.append(run_id)
        return run_ids

    async def _run_job(self, run_id: int, config: ExperimentConfig, output_dir: Path):
        """Фоновая задача: прогон в пуле процессов и запись итогов в базу"""
        try:
            await self.db_manager.update_run(run_id, status='running')
            loop = asyncio.get_running_loop()
            summary, rows = await loop.run_in_executor(self.executor, execute_job, config, str(output_dir))
            await self.db_manager.add_snapshots(run_id, rows)
            for report in summary.get('reports', []):
                await self.db_manager.log_check(report, run_id=run_id)
            await self.db_manager.finish_run(run_id, summary)
            self.results[run_id] = summary
            logger.info(f"Прогон #{run_id} завершён: {'пройден' if summary.get('pass') else 'не пройден'}")
        except asyncio.CancelledError:
            await self.db_manager.update_run(run_id, status='failed', error='cancelled')
        except Exception as e:
            logger.error(f"Ошибка в прогоне #{run_id}: {e}")
            logger.error(traceback.format_exc())
            await self.db_manager.finish_run(run_id, {}, error=e)
            self.results[run_id] = {'pass': False, 'error': str(e)}
        finally:
            self.jobs.pop(run_id, None)

    async def cancel_run(self, run_id: int) -> bool:
        """Отменяет прогон, который ещё не завершился"""
        job = self.jobs.get(run_id)
        if job is None:
            logger.warning(f"Нет активной задачи для прогона #{run_id}")
            return False
        job.cancel()
        logger.info(f"Прогон #{run_id} отменён")
        return True

    async def wait_all(self) -> Dict[int, Dict[str, Any]]:
        """Ждёт завершения всех поставленных прогонов"""
        pending = list(self.jobs.values())
        if pending:
            await asyncio.gather(*pending, return_exceptions=True)
        return dict(self.results)
