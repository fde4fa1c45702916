"""
Interlace Runtime Factory
Creates and configures the runtime shared by the library and the CLI.
"""
import logging
import sys
from dataclasses import dataclass, field

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

logger = logging.getLogger('interlace')


@dataclass
class Runtime:
    """
    Resolved settings plus the configured package logger.

    Attributes:
        config_name: Environment name the settings were resolved from
        settings: Upper-case setting name -> value
        logger: The ``interlace`` logger
    """
    config_name: str
    settings: dict = field(default_factory=dict)
    logger: logging.Logger = logger

    def get(self, key, default=None):
        return self.settings.get(key, default)


def _settings_from(config_class):
    return {
        key: getattr(config_class, key)
        for key in dir(config_class)
        if key.isupper()
    }


def configure_logging(level='INFO', fmt=None):
    """
    Install a single stream handler on the package logger.

    Args:
        level: Logging level name
        fmt: Format string for the handler
    """
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(fmt or '%(levelname)s %(message)s'))
    logger.addHandler(handler)
    logger.setLevel(level.upper() if isinstance(level, str) else level)
    logger.propagate = False


def create_runtime(config_name='default'):
    """
    Runtime factory pattern for creating configured runtimes.

    Args:
        config_name: Configuration environment (development, production, testing)

    Returns:
        Runtime instance
    """
    from config import config
    config_class = config.get(config_name, config['default'])
    settings = _settings_from(config_class)

    configure_logging(settings.get('LOG_LEVEL', 'INFO'), settings.get('LOG_FORMAT'))

    from interlace import numcore
    numcore.set_debug_checks(bool(settings.get('DEBUG_CHECKS', False)))

    logger.debug(f"Runtime created with '{config_name}' configuration")
    return Runtime(config_name=config_name, settings=settings)
