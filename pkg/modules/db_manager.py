# modules/db_manager.py
import json
import math
import logging
from datetime import datetime
from sqlalchemy import MetaData, Table, Column, Integer, String, DateTime, JSON, Float, Boolean, ForeignKey, Text
from sqlalchemy.sql import select, update, delete, insert
from sqlalchemy.ext.asyncio import create_async_engine, AsyncSession
from sqlalchemy.orm import sessionmaker

logger = logging.getLogger(__name__)


def _plain(value):
    """Приведение numpy-значений и путей к JSON-совместимому виду"""
    return json.loads(json.dumps(value, default=lambda v: v.item() if hasattr(v, 'item') else str(v)))


def _finite(value):
    try:
        value = float(value)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


class DatabaseManager:
    """Журнал прогонов, снимков и проверок неравенств"""

    def __init__(self, database_uri):
        # Преобразование URI для асинхронности, если необходимо
        if database_uri.startswith('sqlite:///'):
            self.async_uri = database_uri.replace('sqlite:///', 'sqlite+aiosqlite:///')
        else:
            self.async_uri = database_uri

        self.engine = create_async_engine(self.async_uri, echo=False)
        self.async_session = sessionmaker(
            self.engine, class_=AsyncSession, expire_on_commit=False
        )

        self.metadata = MetaData()
        self._init_tables()

    def _init_tables(self):
        """Инициализация структуры таблиц"""
        # Прогоны
        self.runs = Table(
            'runs',
            self.metadata,
            Column('id', Integer, primary_key=True),
            Column('name', String(200)),
            Column('kind', String(50), default='integrate'),  # integrate, check, sweep, bench
            Column('config', JSON, default={}),
            Column('grid_hash', String(40), nullable=True),
            Column('code_version', String(20), nullable=True),
            Column('output_dir', Text, nullable=True),
            Column('status', String(20), default='created'),  # created, running, finished, failed
            Column('passed', Boolean, nullable=True),
            Column('summary', JSON, default={}),
            Column('error', Text, nullable=True),
            Column('created_at', DateTime, default=datetime.utcnow),
            Column('finished_at', DateTime, nullable=True),
            Column('updated_at', DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)
        )

        # Снимки траектории
        self.snapshots = Table(
            'snapshots',
            self.metadata,
            Column('id', Integer, primary_key=True),
            Column('run_id', Integer, ForeignKey('runs.id')),
            Column('step', Integer),
            Column('time', Float),
            Column('mass', Float, nullable=True),
            Column('energy', Float, nullable=True),
            Column('entropy', Float, nullable=True),
            Column('path', Text, nullable=True),
            Column('norms', JSON, default={}),
            Column('created_at', DateTime, default=datetime.utcnow)
        )

        # Проверки неравенств
        self.checks = Table(
            'checks',
            self.metadata,
            Column('id', Integer, primary_key=True),
            Column('run_id', Integer, ForeignKey('runs.id'), nullable=True),
            Column('check_name', String(100)),
            Column('lhs', Float, nullable=True),
            Column('rhs', Float, nullable=True),
            Column('ratio', Float, nullable=True),
            Column('passed', Boolean),
            Column('params', JSON, default={}),
            Column('created_at', DateTime, default=datetime.utcnow)
        )

    async def init_db(self):
        """Инициализация базы данных и создание таблиц"""
        try:
            async with self.engine.begin() as conn:
                await conn.run_sync(self.metadata.create_all)
            logger.info("База данных инициализирована успешно")
            return True
        except Exception as e:
            logger.error(f"Ошибка инициализации базы данных: {e}")
            return False

    async def close(self):
        await self.engine.dispose()

    # Прогоны
    async def create_run(self, name, config=None, kind='integrate', output_dir=None, grid_hash=None,
                         code_version=None):
        """Регистрация нового прогона"""
        try:
            run_data = {
                'name': name,
                'kind': kind,
                'config': _plain(config or {}),
                'grid_hash': grid_hash,
                'code_version': code_version,
                'output_dir': str(output_dir) if output_dir else None,
                'status': 'created',
                'created_at': datetime.utcnow(),
                'updated_at': datetime.utcnow()
            }
            async with self.async_session() as session:
                result = await session.execute(insert(self.runs).values(**run_data))
                run_id = result.inserted_primary_key[0]
                await session.commit()
                logger.info(f"Создан прогон #{run_id} ({name})")
                return run_id
        except Exception as e:
            logger.error(f"Ошибка создания прогона: {e}")
            return None

    async def update_run(self, run_id, **kwargs):
        """Обновление информации о прогоне"""
        try:
            async with self.async_session() as session:
                kwargs['updated_at'] = datetime.utcnow()
                if kwargs.get('status') in ('finished', 'failed') and 'finished_at' not in kwargs:
                    kwargs['finished_at'] = datetime.utcnow()
                if 'summary' in kwargs:
                    kwargs['summary'] = _plain(kwargs['summary'])
                query = update(self.runs).where(self.runs.c.id == run_id).values(**kwargs)
                await session.execute(query)
                await session.commit()
                return True
        except Exception as e:
            logger.error(f"Ошибка обновления прогона: {e}")
            return False

    async def finish_run(self, run_id, summary, error=None):
        """Завершение прогона с итогом или ошибкой"""
        if error is not None:
            return await self.update_run(run_id, status='failed', passed=False, error=str(error))
        return await self.update_run(run_id, status='finished', passed=bool(summary.get('pass')), summary=summary)

    async def get_run(self, run_id):
        """Получение прогона по ID"""
        try:
            async with self.async_session() as session:
                result = await session.execute(select(self.runs).where(self.runs.c.id == run_id))
                run = result.fetchone()
                return dict(run._mapping) if run else None
        except Exception as e:
            logger.error(f"Ошибка получения прогона: {e}")
            return None

    async def get_runs(self, status=None, limit=20, offset=0):
        """Последние прогоны, при необходимости с фильтром по статусу"""
        try:
            async with self.async_session() as session:
                query = select(self.runs)
                if status:
                    query = query.where(self.runs.c.status == status)
                query = query.order_by(self.runs.c.created_at.desc()).limit(limit).offset(offset)
                result = await session.execute(query)
                return [dict(run._mapping) for run in result.fetchall()]
        except Exception as e:
            logger.error(f"Ошибка получения прогонов: {e}")
            return []

    async def delete_run(self, run_id):
        """Удаление прогона вместе со снимками и проверками"""
        try:
            async with self.async_session() as session:
                await session.execute(delete(self.snapshots).where(self.snapshots.c.run_id == run_id))
                await session.execute(delete(self.checks).where(self.checks.c.run_id == run_id))
                result = await session.execute(delete(self.runs).where(self.runs.c.id == run_id))
                await session.commit()
                return result.rowcount > 0
        except Exception as e:
            logger.error(f"Ошибка удаления прогона: {e}")
            return False

    # Снимки
    def _snapshot_values(self, run_id, step, row):
        optional = {k: float(row[k]) if row.get(k) is not None else None for k in ('mass', 'energy', 'entropy')}
        norms = {k: v for k, v in row.items() if k not in ('time', 'path', 'mass', 'energy', 'entropy')}
        return dict(
            run_id=run_id,
            step=int(step),
            time=float(row['time']),
            path=str(row['path']) if row.get('path') else None,
            norms=_plain(norms),
            created_at=datetime.utcnow(),
            **optional
        )

    async def add_snapshot(self, run_id, step, row):
        """Запись одного снимка: row содержит time, mass, energy, entropy, path и нормы"""
        try:
            async with self.async_session() as session:
                result = await session.execute(insert(self.snapshots).values(**self._snapshot_values(run_id, step, row)))
                snapshot_id = result.inserted_primary_key[0]
                await session.commit()
                return snapshot_id
        except Exception as e:
            logger.error(f"Ошибка записи снимка прогона #{run_id}: {e}")
            return None

    async def add_snapshots(self, run_id, rows):
        """Запись всего временного ряда одной транзакцией"""
        try:
            async with self.async_session() as session:
                for step, row in enumerate(rows):
                    await session.execute(insert(self.snapshots).values(**self._snapshot_values(run_id, step, row)))
                await session.commit()
                return True
        except Exception as e:
            logger.error(f"Ошибка записи снимков прогона #{run_id}: {e}")
            return False

    async def get_snapshots(self, run_id):
        try:
            async with self.async_session() as session:
                query = select(self.snapshots).where(self.snapshots.c.run_id == run_id).order_by(self.snapshots.c.time)
                result = await session.execute(query)
                return [dict(row._mapping) for row in result.fetchall()]
        except Exception as e:
            logger.error(f"Ошибка получения снимков: {e}")
            return []

    # Проверки
    async def log_check(self, report, run_id=None):
        """Запись отчёта проверки: check_name, lhs, rhs, pass и остальные поля"""
        try:
            params = {k: v for k, v in report.items() if k not in ('check_name', 'lhs', 'rhs', 'ratio', 'pass')}
            lhs, rhs, ratio = (_finite(report.get(k)) for k in ('lhs', 'rhs', 'ratio'))
            if ratio is None and lhs is not None and rhs:
                ratio = lhs / rhs
            async with self.async_session() as session:
                result = await session.execute(insert(self.checks).values(
                    run_id=run_id,
                    check_name=report.get('check_name', 'unknown'),
                    lhs=lhs,
                    rhs=rhs,
                    ratio=ratio,
                    passed=bool(report.get('pass')),
                    params=_plain(params),
                    created_at=datetime.utcnow()
                ))
                check_id = result.inserted_primary_key[0]
                await session.commit()
                return check_id
        except Exception as e:
            logger.error(f"Ошибка записи проверки: {e}")
            return None

    async def get_checks(self, run_id=None, check_name=None, limit=100):
        try:
            async with self.async_session() as session:
                query = select(self.checks)
                if run_id is not None:
                    query = query.where(self.checks.c.run_id == run_id)
                if check_name:
                    query = query.where(self.checks.c.check_name == check_name)
                query = query.order_by(self.checks.c.created_at.desc()).limit(limit)
                result = await session.execute(query)
                return [dict(row._mapping) for row in result.fetchall()]
        except Exception as e:
            logger.error(f"Ошибка получения проверок: {e}")
            return []
