"""
Configuration classes for different environments.
"""
import os
from dotenv import load_dotenv

load_dotenv()


def _flag(name, default):
    return os.getenv(name, default).lower() in ('1', 'true', 'yes', 'on')


class Config:
    """Base configuration."""
    # Model dimensions
    EMBED_DIM = int(os.getenv('INTERLACE_EMBED_DIM', 128))

    # Training
    EPOCHS = int(os.getenv('INTERLACE_EPOCHS', 50))
    LEARNING_RATE = float(os.getenv('INTERLACE_LEARNING_RATE', 1e-3))
    WEIGHT_DECAY = float(os.getenv('INTERLACE_WEIGHT_DECAY', 1e-5))
    BPTT_WINDOW = int(os.getenv('INTERLACE_BPTT_WINDOW', 64))
    SEED = int(os.getenv('INTERLACE_SEED', 0))
    LAMBDA_U = float(os.getenv('INTERLACE_LAMBDA_U', 1.0))
    LAMBDA_I = float(os.getenv('INTERLACE_LAMBDA_I', 1.0))
    LAMBDA_S = float(os.getenv('INTERLACE_LAMBDA_S', 1.0))
    SQUARED_LOSS = _flag('INTERLACE_SQUARED_LOSS', 'False')
    PREV_ITEM_VIEW = os.getenv('INTERLACE_PREV_ITEM_VIEW', 'snapshot')
    TASK = os.getenv('INTERLACE_TASK', 'interaction')

    # Chronological split
    TRAIN_FRAC = float(os.getenv('INTERLACE_TRAIN_FRAC', 0.8))
    VALID_FRAC = float(os.getenv('INTERLACE_VALID_FRAC', 0.1))
    TEST_FRAC = float(os.getenv('INTERLACE_TEST_FRAC', 0.1))

    # Elapsed-time inputs
    NORMALIZE_DELTAS = _flag('INTERLACE_NORMALIZE_DELTAS', 'True')

    # Runtime
    THREADS = int(os.getenv('INTERLACE_THREADS', 1))
    LOG_LEVEL = os.getenv('INTERLACE_LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.getenv(
        'INTERLACE_LOG_FORMAT',
        '%(asctime)s %(levelname)s [%(name)s] %(message)s'
    )
    PROGRESS = _flag('INTERLACE_PROGRESS', 'True')
    DEBUG_CHECKS = False


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True
    # Non-finite assertions after every forward op
    DEBUG_CHECKS = _flag('INTERLACE_DEBUG_CHECKS', 'True')
    LOG_LEVEL = os.getenv('INTERLACE_LOG_LEVEL', 'DEBUG')


class ProductionConfig(Config):
    """Production configuration."""
    DEBUG = False
    PROGRESS = _flag('INTERLACE_PROGRESS', 'False')


class TestingConfig(Config):
    """Testing configuration."""
    TESTING = True
    DEBUG_CHECKS = True
    EMBED_DIM = 8
    EPOCHS = 2
    BPTT_WINDOW = 8
    LOG_LEVEL = 'WARNING'
    PROGRESS = False


config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig
}
