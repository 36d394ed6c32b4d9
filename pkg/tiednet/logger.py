import logging
import os
import sys

from dotenv import load_dotenv

# A local `.env` may set TIEDNET_LOG_LEVEL and TIEDNET_LOG_FILE.
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def get_logger(name):
    """
    Returns a logger that writes to stdout and, when `TIEDNET_LOG_FILE` is
    set, to that file as well.

    Args:
        name (str): The logger name, normally the calling module's
            `__name__`.

    Returns:
        logging.Logger: The configured logger.
    """
    # Level and log file are read here, not in `settings.py`, which itself
    #   logs while loading.
    level = os.environ.get('TIEDNET_LOG_LEVEL', 'WARNING').upper()
    log_file = os.environ.get('TIEDNET_LOG_FILE')

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Loggers are process-wide; attach handlers only on first request.
    if logger.handlers:
        return logger

    # Source: stackoverflow.com/questions/14058453/
    #   making-python-loggers-output-all-messages-
    #   to-stdout-in-addition-to-log-file
    formatter = logging.Formatter(LOG_FORMAT)

    # Create console handler and set level
    handler = logging.StreamHandler(sys.stdout)
    handler.setLevel(level)
    handler.setFormatter(formatter)
    logger.addHandler(handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    # Records are handled here; do not duplicate them through the root.
    logger.propagate = False

    return logger
