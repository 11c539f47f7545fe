"""Auditory spatial attention decoding with SW_CNN and SWIM."""
import logging
import os
from dataclasses import dataclass

from config import Config

__version__ = '1.0.0'

THREAD_VARS = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


@dataclass
class Runtime:
    run_root: str
    jobs: int
    deterministic: bool
    progress: bool
    env: str


def pin_threads():
    """Single-threaded BLAS; only effective before numpy is first imported."""
    for name in THREAD_VARS:
        os.environ[name] = '1'


def create_runtime(config_class=Config, log_level=None, jobs=None, run_root=None):
    """Configure logging and directories for one process and return its Runtime."""
    level = (log_level or config_class.LOG_LEVEL).upper()
    handlers = [logging.StreamHandler()]
    if config_class.LOG_FILE:
        os.makedirs(os.path.dirname(os.path.abspath(config_class.LOG_FILE)), exist_ok=True)
        handlers.append(logging.FileHandler(config_class.LOG_FILE, encoding='utf-8'))
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=config_class.LOG_FORMAT,
                        handlers=handlers, force=True)

    deterministic = config_class.DETERMINISTIC
    if deterministic:
        pin_threads()
    runtime = Runtime(
        run_root=run_root or config_class.RUN_ROOT,
        jobs=1 if deterministic else max(1, int(jobs or config_class.JOBS)),
        deterministic=deterministic,
        progress=config_class.PROGRESS,
        env=config_class.ENV,
    )
    os.makedirs(runtime.run_root, exist_ok=True)
    logging.getLogger(__name__).debug(f"Runtime: {runtime}")
    return runtime
