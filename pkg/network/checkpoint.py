import hashlib
import json
import logging

from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from network.entity import ModelShape, ModelState
from shared.errors import DataError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TENSOR_DTYPE = "<f8"
MANIFEST = "manifest.json"


class CheckpointService:
    """
    A ModelState on disk: manifest.json (shape, groups, freeze flags, extras)
    plus one raw little-endian float64 file per parameter group.
    """
    
    @staticmethod
    def _file_name(group: str) -> str:
        return f"{group}.f8"
    
    @staticmethod
    def save(state: ModelState, directory: Path | str, extra: Optional[Dict[str, Any]] = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        groups = {}
        for name, tensor in state.params.items():
            data = tensor.detach().cpu().numpy().astype(TENSOR_DTYPE, copy=False).tobytes()
            (directory / CheckpointService._file_name(name)).write_bytes(data)
            groups[name] = {
                "shape": list(tensor.shape),
                "frozen": state.is_frozen(name),
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        manifest = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "shape": state.shape.model_dump(),
            "groups": groups,
            "extra": extra or {},
        }
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        logger.debug(f"Checkpoint with {len(groups)} groups written to {directory}")
        return directory
    
    @staticmethod
    def read_manifest(directory: Path | str) -> Dict[str, Any]:
        path = Path(directory) / MANIFEST
        if not path.is_file():
            raise DataError(f"No checkpoint found at {directory}")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise DataError(f"{directory}: unsupported checkpoint version {manifest.get('checkpoint_version')}")
        return manifest
    
    @staticmethod
    def exists(directory: Path | str) -> bool:
        return (Path(directory) / MANIFEST).is_file()
    
    @staticmethod
    def load(directory: Path | str) -> ModelState:
        directory = Path(directory)
        manifest = CheckpointService.read_manifest(directory)
        shape = ModelShape(**manifest["shape"])
        params: Dict[str, torch.Tensor] = {}
        frozen = []
        for name, meta in manifest["groups"].items():
            data = (directory / CheckpointService._file_name(name)).read_bytes()
            if hashlib.sha256(data).hexdigest() != meta["sha256"]:
                raise DataError(f"{directory}: group {name} does not match its manifest hash")
            array = np.frombuffer(data, dtype=TENSOR_DTYPE).reshape(meta["shape"])
            params[name] = torch.from_numpy(array.copy()).to(shape.torch_dtype)
            if meta["frozen"]:
                frozen.append(name)
        return ModelState(params=params, shape=shape, frozen=frozenset(frozen))
