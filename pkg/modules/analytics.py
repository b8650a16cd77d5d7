# modules/analytics.py
import math
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

logger = logging.getLogger(__name__)


def fit_envelope(times: Sequence[float], values: Sequence[float], alpha: float) -> float:
    """Наименьшее C с values(t) <= C (t^{-alpha} + 1) для всех t > 0"""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = times > 0.0
    if not np.any(mask):
        return float('nan')
    return float(np.max(values[mask] / (times[mask] ** (-alpha) + 1.0)))


def fit_loglog_slope(x: Sequence[float], y: Sequence[float], z: float = 1.96) -> Dict[str, Any]:
    """Наклон log y по log x методом наименьших квадратов и его доверительный интервал"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3 or np.any(x <= 0.0) or np.any(y <= 0.0):
        raise ValueError(f"Для подгонки нужны >= 3 положительных точек, получено {len(x)}")
    if len(x) == 3:
        # ковариация остатков по трём точкам не оценивается
        slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
        stderr = math.inf
    else:
        (slope, intercept), cov = np.polyfit(np.log(x), np.log(y), 1, cov=True)
        stderr = float(np.sqrt(max(cov[0, 0], 0.0)))
    return {'slope': float(slope), 'intercept': float(intercept), 'stderr': stderr,
            'ci': (float(slope - z * stderr), float(slope + z * stderr))}


def is_nonincreasing(values: Sequence[float], atol: float = 0.0) -> bool:
    values = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(values) <= atol))


class AnalyticsManager:
    """Сводки по прогонам: таблицы, графики норм, отчёты Excel"""

    def __init__(self, db_manager, reports_dir):
        self.db_manager = db_manager
        self.reports_dir = Path(reports_dir)
        self.reports_dir.mkdir(parents=True, exist_ok=True)

    async def get_run_statistics(self, run_id) -> Optional[Dict[str, Any]]:
        """Сводка прогона: статус, проверки и дрейф инвариантов"""
        try:
            run = await self.db_manager.get_run(run_id)
            if not run:
                logger.error(f"Прогон #{run_id} не найден")
                return None
            checks = await self.db_manager.get_checks(run_id=run_id)
            frame = await self.get_timeseries(run_id)
            stats = {
                'run_id': run_id,
                'name': run['name'],
                'status': run['status'],
                'passed': run['passed'],
                'checks_total': len(checks),
                'checks_failed': sum(1 for c in checks if not c['passed']),
            }
            if frame is not None and not frame.empty:
                for column in ('mass', 'energy'):
                    if column in frame:
                        stats[f'{column}_drift'] = float(abs(frame[column].iloc[-1] / frame[column].iloc[0] - 1.0))
                if 'entropy' in frame:
                    stats['entropy_nonincreasing'] = is_nonincreasing(frame['entropy'], atol=1e-8)
            return stats
        except Exception as e:
            logger.error(f"Ошибка получения статистики прогона: {e}")
            return None

    async def get_timeseries(self, run_id) -> Optional[pd.DataFrame]:
        """Временной ряд прогона из журнала снимков"""
        try:
            rows = await self.db_manager.get_snapshots(run_id)
            if not rows:
                return None
            return pd.DataFrame([
                {'time': r['time'], 'mass': r['mass'], 'energy': r['energy'], 'entropy': r['entropy'], **(r['norms'] or {})}
                for r in rows
            ])
        except Exception as e:
            logger.error(f"Ошибка чтения временного ряда: {e}")
            return None

    async def get_checks_frame(self, run_id=None, check_name=None) -> pd.DataFrame:
        checks = await self.db_manager.get_checks(run_id=run_id, check_name=check_name, limit=10000)
        return pd.DataFrame([
            {'id': c['id'], 'run_id': c['run_id'], 'check_name': c['check_name'], 'lhs': c['lhs'],
             'rhs': c['rhs'], 'ratio': c['ratio'], 'pass': c['passed'], 'created_at': c['created_at']}
            for c in checks
        ])

    def plot_timeseries(self, frame: pd.DataFrame, path, title: str = '') -> Optional[Path]:
        """Графики норм (лог-шкала) и инвариантов"""
        try:
            norm_columns = [c for c in frame.columns if c.startswith(('lp_', 'hs_')) or c in ('linf', 'l1_w')]
            fig = plt.figure(figsize=(12, 5), dpi=120)
            plt.subplot(1, 2, 1)
            for column in norm_columns:
                positive = frame[column] > 0
                plt.plot(frame['time'][positive], frame[column][positive], label=column)
            plt.yscale('log')
            plt.xlabel('t')
            plt.grid(visible=True)
            plt.legend()
            plt.subplot(1, 2, 2)
            for column in ('mass', 'energy', 'entropy'):
                if column in frame:
                    plt.plot(frame['time'], frame[column] / frame[column].iloc[0], label=f'{column} / t=0')
            plt.xlabel('t')
            plt.grid(visible=True)
            plt.legend()
            if title:
                fig.suptitle(title)
            plt.tight_layout()
            path = Path(path)
            plt.savefig(path)
            plt.close(fig)
            return path
        except Exception as e:
            logger.error(f"Ошибка построения графика: {e}")
            plt.close('all')
            return None

    async def generate_report(self, run_ids: List[int], file_name: Optional[str] = None) -> Optional[Path]:
        """
        Отчёт Excel по прогонам

        Лист summary со сводками, лист checks со всеми проверками и по листу
        на временной ряд каждого прогона; рядом PNG с графиками норм.
        """
        try:
            stamp = datetime.utcnow().strftime('%Y%m%d_%H%M%S')
            path = self.reports_dir / (file_name or f'report_{stamp}.xlsx')
            summaries = []
            with pd.ExcelWriter(path, engine='xlsxwriter') as writer:
                checks = []
                for run_id in run_ids:
                    stats = await self.get_run_statistics(run_id)
                    if stats is None:
                        continue
                    summaries.append(stats)
                    frame = await self.get_timeseries(run_id)
                    if frame is not None:
                        frame.to_excel(writer, sheet_name=f'run_{run_id}'[:31], index=False)
                        self.plot_timeseries(frame, path.with_name(f'{path.stem}_run_{run_id}.png'), stats['name'])
                    checks.append(await self.get_checks_frame(run_id=run_id))
                pd.DataFrame(summaries).to_excel(writer, sheet_name='summary', index=False)
                if checks:
                    pd.concat(checks, ignore_index=True).to_excel(writer, sheet_name='checks', index=False)
                worksheet = writer.sheets['summary']
                worksheet.set_column(0, max(len(summaries[0]) if summaries else 1, 1), 18)
            logger.info(f"Отчёт сохранён: {path}")
            return path
        except Exception as e:
            logger.error(f"Ошибка формирования отчёта: {e}")
            return None
