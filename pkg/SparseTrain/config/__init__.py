from .config import (
    Config,
    RunConfig,
    Data,
    Train,
    ReallocConfig,
    SETConfig,
    DeepRConfig,
    CompressionSchedule,
    HashedConfig,
    METHODS,
    schedule_value,
    fit_schedule,
    load_config,
    load_preset,
    save_config,
    from_dict,
    to_dict,
)
