# modules/settings.py
import os
import json
from pathlib import Path

ENV_PREFIX = 'BOLTZLP_'
CODE_VERSION = '0.1.0'


class Settings:
    def __init__(self, base_dir=None, config_file=None):
        # Базовые пути
        self.BASE_DIR = Path(base_dir) if base_dir else Path(__file__).parent.parent
        self.CONFIG_FILE = Path(config_file) if config_file else self.BASE_DIR / 'config.json'

        # Загрузка конфигурации из файла, если он существует
        self.config = self._load_config()

        # База данных
        self.DATABASE_URI = self._get('DATABASE_URI', f"sqlite:///{self.BASE_DIR / 'boltzlp.db'}")

        # Пути для результатов
        self.OUTPUT_DIR = Path(self._get('OUTPUT_DIR', self.BASE_DIR / 'output'))
        self.TRAJECTORY_DIR = self.OUTPUT_DIR / 'trajectories'
        self.REPORTS_DIR = self.OUTPUT_DIR / 'reports'
        self.LOGS_DIR = Path(self._get('LOGS_DIR', self.BASE_DIR / 'logs'))

        # Создание необходимых директорий
        os.makedirs(self.TRAJECTORY_DIR, exist_ok=True)
        os.makedirs(self.REPORTS_DIR, exist_ok=True)
        os.makedirs(self.LOGS_DIR, exist_ok=True)

        # Сетка и ядро
        self.GRID_N = int(self._get('GRID_N', 16))
        self.GRID_RADIUS = float(self._get('GRID_RADIUS', 6.0))
        self.EPS_THETA = float(self._get('EPS_THETA', 0.05))
        delta = self._get('DELTA_REL', None)
        self.DELTA_REL = None if delta in (None, '', 'auto') else float(delta)  # None -> h/2

        # Угловая квадратура
        self.N_THETA = int(self._get('N_THETA', 16))
        self.N_PHI = int(self._get('N_PHI', 8))
        self.GRADING = float(self._get('GRADING', 2.0))

        # Интегрирование по времени
        self.WEIGHT_W = float(self._get('WEIGHT_W', 5.0))
        self.DT_SAFETY = float(self._get('DT_SAFETY', 0.5))
        self.T_FINAL = float(self._get('T_FINAL', 1.0))
        self.T_STAR = float(self._get('T_STAR', 0.25))
        self.CLAMP_LIMIT = float(self._get('CLAMP_LIMIT', 0.01))
        self.ORACLE_CHECK_EVERY = int(self._get('ORACLE_CHECK_EVERY', 0))

        # Де Джорджи
        self.K_MAX = int(self._get('K_MAX', 40))
        self.TOL_ZERO_REL = float(self._get('TOL_ZERO_REL', 1e-10))
        self.C_FRONT = tuple(float(c) for c in self._get('C_FRONT', (1.0, 10.0)))

        # Спектральные нормы
        self.FFT_PADDING = int(self._get('FFT_PADDING', 2))

        # Параллельные прогоны
        self.MAX_WORKERS = int(self._get('MAX_WORKERS', os.cpu_count() or 1))
        self.LOG_LEVEL = str(self._get('LOG_LEVEL', 'INFO'))

    def _get(self, key, default):
        """Значение из окружения (BOLTZLP_KEY), затем из config.json, затем по умолчанию"""
        env_value = os.getenv(ENV_PREFIX + key)
        if env_value is not None:
            if key == 'C_FRONT':
                return [v for v in env_value.split(',') if v.strip()]
            return env_value
        return self.config.get(key, default)

    def _load_config(self):
        """Загрузка конфигурации из файла"""
        if self.CONFIG_FILE.exists():
            try:
                with open(self.CONFIG_FILE, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except Exception as e:
                print(f"Ошибка загрузки конфигурации: {e}")
                return {}
        return {}

    def save_config(self, config):
        """Сохранение конфигурации в файл"""
        try:
            with open(self.CONFIG_FILE, 'w', encoding='utf-8') as f:
                json.dump(config, f, indent=4, ensure_ascii=False)
            self.config = config
            return True
        except Exception as e:
            print(f"Ошибка сохранения конфигурации: {e}")
            return False
