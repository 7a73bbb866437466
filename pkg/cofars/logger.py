__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

import logging

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name="cofars"):
    """Return a logger living under the cofars namespace"""
    if not name.startswith("cofars"):
        name = "cofars.%s" % name
    return logging.getLogger(name)


def setup_logging(level="INFO"):
    """Configure the cofars root logger once, for the command line client"""
    logger = logging.getLogger("cofars")
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    logger.setLevel(level)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    return logger
