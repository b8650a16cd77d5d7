# main.py
import sys
import logging
import asyncio
import argparse
from datetime import datetime
from fractions import Fraction
from pathlib import Path

from dotenv import load_dotenv

from modules.settings import Settings, CODE_VERSION

# Загрузка переменных окружения
load_dotenv()

settings = Settings()

# Настройка логирования
logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                    handlers=[
                        logging.FileHandler(settings.LOGS_DIR / 'boltzlp.log'),
                        logging.StreamHandler()
                    ])
logger = logging.getLogger(__name__)

from modules.analysis_params import SYSTEM_IDS, solve
from modules.analytics import AnalyticsManager
from modules.checks import CHECKS, run_check
from modules.db_manager import DatabaseManager
from modules.degiorgi import SearchConfig, energy_sequence, estimate_linfty, ladder_for
from modules.experiments import ExperimentConfig, benchmark_fast_path, load_trajectory, run_experiment
from modules.functionals import report_line
from modules.kernel_grid import VERY_SOFT
from modules.scheduler import SchedulerManager

# Инициализация менеджеров
db_manager = DatabaseManager(settings.DATABASE_URI)
scheduler_manager = SchedulerManager(db_manager, settings.MAX_WORKERS)
analytics_manager = AnalyticsManager(db_manager, settings.REPORTS_DIR)

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_FAILED = 2


def _exit_code(passed: bool) -> int:
    return EXIT_PASS if passed else EXIT_FAILED


def _parse_value(text: str):
    """Число, список через запятую или строка"""
    if ',' in text:
        return tuple(_parse_value(part) for part in text.split(',') if part.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text.lower() in ('true', 'false'):
        return text.lower() == 'true'
    return text


def _parse_extra(extra):
    """--key value ... -> {'key': value}"""
    params = {}
    key = None
    for token in extra:
        if token.startswith('--'):
            key = token[2:].replace('-', '_')
            params[key] = True
        elif key is not None:
            params[key] = _parse_value(token)
            key = None
        else:
            raise ValueError(f"Лишний аргумент: {token}")
    return params


def _exact(text):
    return None if text is None else Fraction(text)


def _print_report(report):
    print(report_line({k: v for k, v in report.items() if v is None or isinstance(v, (int, float, str))}))


# Команды

async def cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config, settings)
    stamp = datetime.utcnow().strftime('%Y%m%d_%H%M%S')
    output_dir = Path(args.output) if args.output else settings.TRAJECTORY_DIR / f"{config.name}_{stamp}"
    await db_manager.init_db()
    run_id = await db_manager.create_run(config.name, config.to_mapping(), output_dir=output_dir,
                                         grid_hash=config.grid.grid_hash(), code_version=CODE_VERSION)
    await db_manager.update_run(run_id, status='running')
    try:
        summary = run_experiment(config, output_dir, refine=not args.no_refine, revalidate_runs=args.revalidate)
    except Exception as e:
        await db_manager.finish_run(run_id, {}, error=e)
        raise
    trajectory = load_trajectory(output_dir)
    rows = trajectory.frame.to_dict(orient='records')
    for i, row in enumerate(rows):
        row['path'] = str(output_dir / f"snap_{i:05d}.bin")
    await db_manager.add_snapshots(run_id, rows)
    for report in summary['reports']:
        await db_manager.log_check(report, run_id=run_id)
        _print_report(report)
    await db_manager.finish_run(run_id, summary)
    print(f"run_id={run_id} output={output_dir} pass={str(summary['pass']).lower()}")
    return _exit_code(summary['pass'])


async def cmd_check(args) -> int:
    params = _parse_extra(args.params)
    report = run_check(args.name, **params)
    await db_manager.init_db()
    await db_manager.log_check(report)
    _print_report(report)
    return _exit_code(bool(report['pass']))


def cmd_params(args) -> int:
    kwargs = {
        'p': _exact(args.p), 's': _exact(args.s), 'gamma': _exact(args.gamma), 'p0': _exact(args.p0),
        'q': _exact(args.q), 'theta6': _exact(args.theta6), 'theta7': _exact(args.theta7),
        'theta8': _exact(args.theta8), 'theta9': _exact(args.theta9), 'theta10': _exact(args.theta10),
        'theta11': _exact(args.theta11), 'alpha5': _exact(args.alpha5), 'W0': _exact(args.W0), 'C': _exact(args.C),
    }
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    solution = solve(args.system_id, **kwargs)
    for line in solution.as_lines():
        print(line)
    return _exit_code(solution.feasible)


def cmd_degiorgi(args) -> int:
    trajectory = load_trajectory(args.trajectory)
    config = ExperimentConfig.from_mapping(trajectory.manifest['config'], settings)
    kp = config.kernel
    p = args.p if args.p is not None else (config.p_list[0] if kp.regime == VERY_SOFT else 2.0)
    t_star = args.t_star or config.t_star
    if args.search:
        search = SearchConfig(k_max=args.k_max, tol_zero_rel=config.tol_zero_rel, c_front=args.c_front, t_star=t_star)
        k_star, diagnostics = estimate_linfty(trajectory.snapshots, p, kp, search)
        diagnostics['sequence'].to_csv(Path(args.trajectory) / 'energy_sequence.csv')
        _print_report(diagnostics)
        return _exit_code(diagnostics['pass'])
    ladder = ladder_for(kp, args.K, t_star, args.k_max)
    sequence = energy_sequence(trajectory.snapshots, ladder, p, kp, c_front=args.c_front)
    path = sequence.to_csv(Path(args.trajectory) / f'energy_sequence_K{args.K:g}.csv')
    print(sequence.to_frame().to_string(index=False))
    print(f"csv={path} nonincreasing={str(sequence.is_nonincreasing()).lower()}")
    return EXIT_PASS


async def cmd_sweep(args) -> int:
    configs = [ExperimentConfig.from_file(path, settings) for path in args.configs]
    await db_manager.init_db()
    if args.workers:
        scheduler_manager.max_workers = args.workers
    await scheduler_manager.start()
    try:
        base_dir = settings.TRAJECTORY_DIR / f"sweep_{datetime.utcnow().strftime('%Y%m%d_%H%M%S')}"
        run_ids = await scheduler_manager.submit_sweep(configs, base_dir)
        results = await scheduler_manager.wait_all()
    finally:
        await scheduler_manager.stop()
    for run_id in run_ids:
        summary = results.get(run_id, {})
        print(f"run_id={run_id} pass={str(bool(summary.get('pass'))).lower()}")
    return _exit_code(all(results.get(r, {}).get('pass') for r in run_ids))


async def cmd_history(args) -> int:
    await db_manager.init_db()
    for run in await db_manager.get_runs(status=args.status, limit=args.limit):
        print(f"#{run['id']} {run['created_at']:%Y-%m-%d %H:%M} {run['kind']} {run['name']} "
              f"status={run['status']} pass={run['passed']} grid={run['grid_hash']}")
    return EXIT_PASS


async def cmd_report(args) -> int:
    await db_manager.init_db()
    path = await analytics_manager.generate_report(args.run_ids, args.file)
    if path is None:
        return EXIT_ERROR
    print(f"report={path}")
    return EXIT_PASS


def cmd_bench(args) -> int:
    csv_path = args.csv or settings.REPORTS_DIR / 'benchmark_fast_path.csv'
    frame = benchmark_fast_path(args.n, radius=settings.GRID_RADIUS, csv_path=csv_path)
    print(frame.to_string(index=False))
    print(f"csv={csv_path}")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='boltzlp', description='Лаборатория для однородного уравнения Больцмана')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='прогон по файлу конфигурации')
    run.add_argument('config')
    run.add_argument('--output')
    run.add_argument('--revalidate', action='store_true', help='повторить на сетке 1.5n и шаге dt/2')
    run.add_argument('--no-refine', action='store_true', help='без сверки констант с прогоном на dt/2')

    check = sub.add_parser('check', help='именованная проверка')
    check.add_argument('name', choices=sorted(CHECKS))
    check.add_argument('params', nargs=argparse.REMAINDER)

    params = sub.add_parser('params', help='системы показателей')
    params_sub = params.add_subparsers(dest='action', required=True)
    solve_parser = params_sub.add_parser('solve')
    solve_parser.add_argument('system_id', choices=SYSTEM_IDS)
    for name in ('p', 's', 'gamma', 'p0', 'q', 'theta6', 'theta7', 'theta8', 'theta9', 'theta10', 'theta11',
                 'alpha5', 'W0', 'C'):
        solve_parser.add_argument(f'--{name}')

    degiorgi = sub.add_parser('degiorgi', help='последовательность W_k по траектории')
    degiorgi.add_argument('trajectory')
    mode = degiorgi.add_mutually_exclusive_group(required=True)
    mode.add_argument('--K', type=float)
    mode.add_argument('--search', action='store_true')
    degiorgi.add_argument('--p', type=float)
    degiorgi.add_argument('--t-star', type=float)
    degiorgi.add_argument('--k-max', type=int, default=settings.K_MAX)
    degiorgi.add_argument('--c-front', type=float, default=settings.C_FRONT[0])

    sweep = sub.add_parser('sweep', help='параллельная серия прогонов')
    sweep.add_argument('configs', nargs='+')
    sweep.add_argument('--workers', type=int)

    history = sub.add_parser('history', help='журнал прогонов')
    history.add_argument('--status')
    history.add_argument('--limit', type=int, default=20)

    report = sub.add_parser('report', help='отчёт xlsx по прогонам')
    report.add_argument('run_ids', type=int, nargs='+')
    report.add_argument('--file')

    bench = sub.add_parser('bench', help='сравнение q_direct и q_fast')
    bench.add_argument('--n', type=int, nargs='+', default=[8, 12, 16])
    bench.add_argument('--csv')
    return parser


COMMANDS = {
    'run': cmd_run,
    'check': cmd_check,
    'params': cmd_params,
    'degiorgi': cmd_degiorgi,
    'sweep': cmd_sweep,
    'history': cmd_history,
    'report': cmd_report,
    'bench': cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command]
    try:
        if asyncio.iscoroutinefunction(handler):
            async def wrapped():
                try:
                    return await handler(args)
                finally:
                    await db_manager.close()
            return asyncio.run(wrapped())
        return handler(args)
    except Exception as e:
        logger.error(f"Ошибка выполнения команды {args.command}: {e}")
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
