import logging
import os
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# Define a standard prefix for environment variables
ENV_PREFIX = 'ASYMFUSION_'

# Default configuration values
DEFAULT_CONFIG = {
    'OUT': 'output',
    'SEED': 0,
    'EPOCHS': 30,
    'BATCH_SIZE': 8,
    'LR': 0.05,
    'MOMENTUM': 0.9,
    'WEIGHT_DECAY': 1e-4,
    'DISTILL_LAMBDA': 0.5,
    'SPLIT_FRACTION': 0.7,
    'NORM_EPS': 1e-5,
    'NORM_MOMENTUM': 0.1,
    'IGNORE_INDEX': 255,
    'GRADCHECK_EPS': 1e-5,
    'LOG_LEVEL': 'INFO',
}

class Config:
    def __init__(self):
        # Load environment variables from a .env file, if it exists
        load_dotenv()

        # Load default values and override with environment variables if available
        for key in DEFAULT_CONFIG:
            env_var = f"{ENV_PREFIX}{key}"
            setattr(self, key, self._get_env_var(env_var, DEFAULT_CONFIG[key]))

    @staticmethod
    def _get_env_var(env_var, default):
        """Get the environment variable value or return the default."""
        value = os.getenv(env_var)
        if value is None:
            return default
        # Numbers keep the type of their default; unparsable values keep the default
        if isinstance(default, (int, float)):
            try:
                return type(default)(value)
            except ValueError:
                logger.warning("ignoring %s=%r: not a valid %s", env_var, value, type(default).__name__)
                return default
        return value

    def __repr__(self):
        return f"Config({', '.join(f'{k}={getattr(self, k)!r}' for k in DEFAULT_CONFIG)})"

# Instantiate the config object
config = Config()
