from .io import latest_checkpoint, make_run_dir, read_json, write_json
from .log import logger
from .metrics import MetricLog
from .rng import RngStreams
