"""
Run-directory hygiene: one directory per invocation holding the config echo,
run.log and every artifact the command writes.
"""

import logging
import shutil
from pathlib import Path
from typing import Iterable, List, Optional, Union

from stylediff.errors import ConfigError, MissingArtifactError
from stylediff.schemas.config import RunConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CONFIG_ECHO = "config.json"
RUN_LOG = "run.log"

# Everything a command may leave in its run directory. --force removes these and nothing else.
RUN_ARTIFACTS = (
    CONFIG_ECHO, RUN_LOG, "train_log.jsonl", "dataset.json", "summary.json",
    "report.json", "report.txt", "sweep.csv", "sweep_full.csv",
    "model.mdlc", "model.json", "adapter.mdlc", "adapter.json",
    "sample_*", "checkpoints", "neutral", "styles", "evaluators", "cells",
)


def configure_logging(level: str = "INFO"):
    """Root logger setup for the command line; library modules only create loggers."""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


def _is_within(path: Path, root: Path) -> bool:
    try:
        path.relative_to(root)
        return True
    except ValueError:
        return False


def _artifacts(path: Path) -> List[Path]:
    found = []
    for pattern in RUN_ARTIFACTS:
        found.extend(path.glob(pattern))
    return sorted(set(found))


def prepare_run_dir(
    path: Union[str, Path],
    force: bool = False,
    inputs: Iterable[Union[str, Path, None]] = ()
) -> Path:
    """
    Create ``path`` for a fresh run.

    An existing non-empty directory is refused unless ``force`` is set. With
    ``force`` only files this tool writes are removed, and the directory is
    refused outright when it holds the working directory or any of ``inputs``.
    """
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"Run directory {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"Run directory {path} is not empty; pass --force to overwrite it")
        root = path.resolve()
        if _is_within(Path.cwd().resolve(), root):
            raise ConfigError(f"Refusing to overwrite {path}: it contains the working directory")
        for item in inputs:
            if item is not None and _is_within(Path(item).resolve(), root):
                raise ConfigError(f"Refusing to overwrite {path}: it contains the input {item}")
        logger.warning(f"Overwriting run directory {path}")
        for artifact in _artifacts(path):
            if artifact.is_dir():
                shutil.rmtree(artifact)
            else:
                artifact.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def require_dir(path: Union[str, Path], what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def echo_config(run_dir: Path, config: RunConfig) -> Path:
    """Write the fully resolved configuration before anything else runs."""
    target = run_dir / CONFIG_ECHO
    target.write_text(config.model_dump_json(indent=2))
    return target


def attach_log_file(run_dir: Path, level: Optional[str] = None) -> logging.Handler:
    handler = logging.FileHandler(run_dir / RUN_LOG, mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    if level:
        handler.setLevel(getattr(logging, level.upper(), logging.INFO))
    logging.getLogger().addHandler(handler)
    return handler


def detach_log_file(handler: logging.Handler):
    logging.getLogger().removeHandler(handler)
    handler.close()
