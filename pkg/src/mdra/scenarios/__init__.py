from .cf import CfConfig, CfInstance, cf_constraint_oracle, cf_sum_rate, sample_cf_instance
from .common import dbm_to_watt, watt_to_dbm
from .ma import (
    MaConfig,
    MaInstance,
    ma_constraint_oracle,
    ma_sum_rate,
    sample_ma_instance,
    selected_channel,
)

__all__ = [
    "CfConfig",
    "CfInstance",
    "MaConfig",
    "MaInstance",
    "cf_constraint_oracle",
    "cf_sum_rate",
    "dbm_to_watt",
    "ma_constraint_oracle",
    "ma_sum_rate",
    "sample_cf_instance",
    "sample_ma_instance",
    "selected_channel",
    "watt_to_dbm",
]
