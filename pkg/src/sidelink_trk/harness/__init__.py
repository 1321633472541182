"""Campaign configuration, runner, metrics, output files and CLI."""

from .campaign import CampaignResult, estimate_step, run_campaign, sub_seed
from .config import ALL_VARIANTS, CampaignConfig, ConfigError, default_config, load_config

__all__ = ["ALL_VARIANTS", "CampaignConfig", "CampaignResult", "ConfigError", "default_config",
           "estimate_step", "load_config", "run_campaign", "sub_seed"]
