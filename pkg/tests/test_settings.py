"""
Настройки: окружение, config.json и значения по умолчанию
"""
import json

from modules.settings import Settings


def test_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv('BOLTZLP_OUTPUT_DIR', raising=False)
    monkeypatch.delenv('BOLTZLP_LOGS_DIR', raising=False)
    monkeypatch.delenv('BOLTZLP_DATABASE_URI', raising=False)
    settings = Settings(base_dir=tmp_path)
    assert settings.GRID_N == 16
    assert settings.DELTA_REL is None
    assert settings.C_FRONT == (1.0, 10.0)
    assert settings.DATABASE_URI == f"sqlite:///{tmp_path / 'boltzlp.db'}"
    assert settings.TRAJECTORY_DIR.is_dir() and settings.REPORTS_DIR.is_dir()


def test_environment_overrides_file(tmp_path, monkeypatch):
    (tmp_path / 'config.json').write_text(json.dumps({'GRID_N': 12, 'EPS_THETA': 0.1}), encoding='utf-8')
    monkeypatch.setenv('BOLTZLP_GRID_N', '20')
    monkeypatch.setenv('BOLTZLP_C_FRONT', '1,5')
    monkeypatch.setenv('BOLTZLP_DELTA_REL', '0.25')
    settings = Settings(base_dir=tmp_path)
    assert settings.GRID_N == 20
    assert settings.EPS_THETA == 0.1
    assert settings.C_FRONT == (1.0, 5.0)
    assert settings.DELTA_REL == 0.25


def test_save_config(tmp_path):
    settings = Settings(base_dir=tmp_path)
    assert settings.save_config({'GRID_N': 8})
    assert Settings(base_dir=tmp_path).GRID_N == 8
