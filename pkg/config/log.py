import logging

from config.runtime import config as runtime_config


def configure_logging(level: str | None = None) -> None:
    """Configure the root logger once for command-line runs."""
    logging.basicConfig(
        level=getattr(logging, (level or runtime_config.log_level).upper(), logging.INFO),
        format=runtime_config.log_format,
        force=True
    )
