import os  # os module interacts with the OS environment variables.

from dotenv import load_dotenv

# Import the get_logger function from the local logger module.
from .logger import get_logger

# Pick up a local `.env` before any variable is read.
load_dotenv()


def _as_flag(value):
    """Interprets '1'/'true'/'yes'/'on' (any case) as True."""
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ('1', 'true', 'yes', 'on')


class EnvConfig:
    def __init__(self):
        """
        Initializes the EnvConfig class, loading and validating the runtime
        settings of tiednet from environment variables.
        """

        # Default seed for every seeded CLI command.
        self.SEED = self._load_env_var(
            name='TIEDNET_SEED',
            default=0,
            typecast=int
        )

        # Number of coordinates sampled per Parameter by the gradient check.
        self.GRADCHECK_COORDS = self._load_env_var(
            name='TIEDNET_GRADCHECK_COORDS',
            default=16,
            typecast=int
        )

        # Toggle tqdm progress bars (written to stderr).
        self.PROGRESS = self._load_env_var(
            name='TIEDNET_PROGRESS',
            default=True,
            typecast=_as_flag
        )

    def _load_env_var(self, name, default=None, typecast=None):
        """
        Loads an environment variable, with an option to provide
            a default value.
        If no default is provided and the variable is missing, raises an error.

        Args:
            name (str): The name of the environment variable.
            default (optional): The default value to return if
                the environment variable is not found.
            typecast (callable, optional): The variable type into which to
                cast the value.

        Returns:
            The value of the environment variable or the default value
                if provided.

        Raises:
            ValueError: If the environment variable is missing and no default
                is provided.
        """
        value = os.environ.get(name, default)
        if value is None:
            raise ValueError(f'Missing environment variable: {name}')

        if typecast is not None:
            try:
                return typecast(value)
            except (TypeError, ValueError):
                logger.error(
                    f'Error casting {value} as {typecast}. '
                    f'Falling back to {default!r}.'
                )
                return default

        return value


# Initialize the logger for this module.
logger = get_logger(__name__)

# Load the runtime configuration using the EnvConfig class.
config = EnvConfig()

logger.debug(f'Using {config.SEED=}')
logger.debug(f'Gradient check: {config.GRADCHECK_COORDS=}')
logger.debug(f'Progress bars: {config.PROGRESS=}')
