"""Tests for the environment configuration classes and the runtime factory."""
import logging
import os

from config import Config, DeterministicConfig, DevelopmentConfig, TestingConfig, config
from asad import THREAD_VARS, create_runtime


def test_config_table():
    assert config['default'] is config['production']
    assert config['testing'] is TestingConfig
    assert issubclass(DevelopmentConfig, Config)


def test_testing_runtime(tmp_path):
    runtime = create_runtime(TestingConfig, run_root=str(tmp_path / 'r'))
    assert os.path.isdir(tmp_path / 'r')
    assert (runtime.jobs, runtime.progress, runtime.env) == (1, False, 'testing')
    assert logging.getLogger().level == logging.WARNING


def test_overrides(tmp_path):
    runtime = create_runtime(TestingConfig, log_level='debug', jobs=4, run_root=str(tmp_path))
    assert runtime.jobs == 4
    assert logging.getLogger().level == logging.DEBUG


def test_deterministic_mode_pins_threads(tmp_path, monkeypatch):
    for name in THREAD_VARS:
        monkeypatch.delenv(name, raising=False)
    runtime = create_runtime(DeterministicConfig, jobs=8, run_root=str(tmp_path))
    assert runtime.deterministic and runtime.jobs == 1
    assert all(os.environ[name] == '1' for name in THREAD_VARS)


def test_log_file(tmp_path):
    class FileConfig(TestingConfig):
        LOG_FILE = str(tmp_path / 'logs' / 'swim.log')
        LOG_LEVEL = 'INFO'

    create_runtime(FileConfig, run_root=str(tmp_path / 'r'))
    logging.getLogger('asad.test').info('hello from the runtime test')
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert 'hello from the runtime test' in (tmp_path / 'logs' / 'swim.log').read_text()
