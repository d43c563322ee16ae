"""Run configuration: global flags, optional JSON config file, logging setup."""

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

from src.models.errors import FormatError, UsageError
from src.services.worker_pool import default_threads

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class RunConfig:
    """Settings shared by every subcommand."""

    seed: int = 0
    threads: int = field(default_factory=default_threads)
    log_level: str = "INFO"
    quiet: bool = False

    def __post_init__(self):
        self.log_level = str(self.log_level).upper()
        if self.log_level not in LOG_LEVELS:
            raise UsageError(f"log level must be one of {', '.join(LOG_LEVELS)}")
        if self.threads < 1:
            raise UsageError("--threads must be at least 1")

    @property
    def progress(self) -> bool:
        """Progress bars only when not quiet and logging at INFO or below."""
        return not self.quiet and logging.getLevelName(self.log_level) <= logging.INFO


def normalize_keys(data: Dict[str, Any]) -> Dict[str, Any]:
    """Config keys may use dashes like the flags; argparse dests use underscores."""
    return {str(key).lstrip("-").replace("-", "_"): value for key, value in data.items()}


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a JSON object mirroring the command-line flags.

    Raises:
        FormatError: if the file is not a JSON object
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON config: {e}") from e
    if not isinstance(data, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return normalize_keys(data)


def configure_logging(level: str = "INFO", stream=None):
    """Install one stderr handler on the root logger, replacing earlier ones."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def run_config_from_args(args) -> RunConfig:
    """Build the RunConfig from parsed global flags."""
    threads: Optional[int] = getattr(args, "threads", None)
    return RunConfig(
        seed=getattr(args, "seed", 0) or 0,
        threads=threads if threads is not None else default_threads(),
        log_level=getattr(args, "log_level", "INFO") or "INFO",
        quiet=bool(getattr(args, "quiet", False)),
    )
