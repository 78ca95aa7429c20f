import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel

logger = logging.getLogger(__name__)

PYPROJECT = Path(__file__).resolve().parent.parent / "pyproject.toml"


class RunManifest(BaseModel):
    command: str
    config_hash: str
    code_version: str
    seed: int
    created_at: str
    extra: Dict[str, Any] = {}


class ManifestService:
    
    @staticmethod
    @lru_cache(maxsize=1)
    def code_version() -> str:
        with open(PYPROJECT, "rb") as f:
            pyproject = tomllib.load(f)
        return pyproject["project"]["version"]
    
    @staticmethod
    def path(out_dir: Path | str, command: str) -> Path:
        """run_manifest-<command>.json inside out_dir"""
        return Path(out_dir) / f"run_manifest-{command}.json"
    
    @staticmethod
    def write(out_dir: Path | str, command: str, config_hash: str, seed: int, extra: Optional[Dict[str, Any]] = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(
            command=command,
            config_hash=config_hash,
            code_version=ManifestService.code_version(),
            seed=seed,
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            extra=extra or {}
        )
        path = ManifestService.path(out_dir, command)
        path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
        logger.debug(f"Wrote {command} manifest to {path}")
        return path
    
    @staticmethod
    def read(out_dir: Path | str, command: str) -> Optional[RunManifest]:
        path = ManifestService.path(out_dir, command)
        if not path.is_file():
            return None
        return RunManifest(**json.loads(path.read_text(encoding="utf-8")))
