# modules/errors.py


class BoltzLabError(ValueError):
    """Базовое исключение лаборатории"""


class GridError(BoltzLabError):
    """Некорректная сетка или несовпадение сеток"""


class KernelParamsError(BoltzLabError):
    """Параметры ядра вне допустимой области"""


class QuadratureError(BoltzLabError):
    """Некорректная угловая или спектральная квадратура"""


class CollisionError(BoltzLabError):
    """Ошибка при вычислении оператора столкновений"""


class FunctionalError(BoltzLabError):
    """Ошибка при вычислении норм и функционалов"""


class InfeasibleSystemError(BoltzLabError):
    """Система ограничений на показатели не имеет решения"""

    def __init__(self, message, margins=None):
        super().__init__(message)
        self.margins = margins or {}


class RecursionParamsError(BoltzLabError):
    """Некорректные параметры рекурсии Де Джорджи"""


class TrajectoryError(BoltzLabError):
    """Траектория не покрывает нужные окна или слишком разрежена"""


class StepError(BoltzLabError):
    """Шаг по времени отклонён (слишком большой dt)"""


class ConfigError(BoltzLabError):
    """Ошибка в конфигурации эксперимента"""
