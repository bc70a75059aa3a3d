import logging


class Logger:
    """
    Process-wide holder for the logger used by library helpers that have no
    `Trainer` instance at hand (realloc, baselines, loaders). `Trainer`
    replaces it with its own logger on construction.
    """

    def __init__(self, logger=logging.getLogger("SparseTrain")):
        self.logger = logger

    def set_logger(self, logger: logging.Logger):
        self.logger = logger

    def get_logger(self) -> logging.Logger:
        return self.logger


logger = Logger()
