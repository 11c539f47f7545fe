import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Where run directories (checkpoints, CSV tables, config echoes) are created
    RUN_ROOT = os.environ.get('SWIM_RUN_ROOT') or 'runs'

    # Logging
    LOG_LEVEL = os.environ.get('SWIM_LOG_LEVEL') or 'INFO'
    LOG_FILE = os.environ.get('SWIM_LOG_FILE') or None
    LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

    # Execution settings
    DETERMINISTIC = os.environ.get('SWIM_DETERMINISTIC') == '1'
    JOBS = int(os.environ.get('SWIM_JOBS') or 1)
    PROGRESS = os.environ.get('SWIM_PROGRESS', '1') == '1'

    ENV = os.environ.get('SWIM_ENV') or 'production'
    DEBUG = False

# Development configuration
class DevelopmentConfig(Config):
    DEBUG = True
    ENV = 'development'
    LOG_LEVEL = os.environ.get('SWIM_LOG_LEVEL') or 'DEBUG'

# Production configuration
class ProductionConfig(Config):
    DEBUG = False
    ENV = 'production'

# Testing configuration
class TestingConfig(Config):
    TESTING = True
    ENV = 'testing'
    LOG_LEVEL = 'WARNING'
    LOG_FILE = None
    PROGRESS = False
    JOBS = 1

# Single-threaded, reproducible path (byte-identical artifacts across runs)
class DeterministicConfig(Config):
    ENV = 'deterministic'
    DETERMINISTIC = True
    JOBS = 1

# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'deterministic': DeterministicConfig,
    'default': ProductionConfig
}
