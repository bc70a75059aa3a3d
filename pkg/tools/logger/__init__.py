from .log import get_logger
