import hashlib

from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Literal, Mapping, Optional, Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field

from checkin.entity import DaySequencePair
from shared.errors import DataError, ModelShapeError

CATEGORY_EMBED = "category_embed"
TIME_EMBED = "time_embed"
POI_EMBED = "poi_embed"
DIST_EMBED = "dist_embed"
POI_TIME_EMBED = "poi_time_embed"
CAT_HEAD_WEIGHT = "cat_head.weight"
CAT_HEAD_BIAS = "cat_head.bias"
DECODER_WEIGHT = "decoder.weight"
DECODER_BIAS = "decoder.bias"
LSTM_PARTS = ("w_ih", "w_hh", "bias")
CATEGORY_PREFIXES = (CATEGORY_EMBED, TIME_EMBED, "cat_lstm.", "cat_head.")


def lstm_names(prefix: str, layer: int) -> List[str]:
    return [f"{prefix}.{layer}.{part}" for part in LSTM_PARTS]


def is_category_group(name: str) -> bool:
    return name.startswith(CATEGORY_PREFIXES)


class Task(str, Enum):
    CATEGORY = "category"
    POI = "poi"


class ModelShape(BaseModel):
    """Architecture hyper-parameters; recorded in checkpoint manifests"""
    model_config = ConfigDict(frozen=True)
    
    embed_dim: int = Field(gt=0)
    hidden_dim: int = Field(gt=0)
    cat_layers: int = Field(default=3, ge=0)
    poi_layers: int = Field(default=0, ge=0)
    num_pois: int = Field(default=0, ge=0)
    with_category: bool = True
    dtype: Literal["float64", "float32"] = "float64"
    
    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32
    
    @property
    def has_poi_channel(self) -> bool:
        return self.num_pois > 0 and self.poi_layers > 0
    
    @property
    def category_layer_count(self) -> int:
        """L: the embedding layer counts as layer 1"""
        return 1 + self.cat_layers


@dataclass(frozen=True)
class ModelState:
    """Immutable parameter map plus per-group freeze flags"""
    params: Mapping[str, torch.Tensor]
    shape: ModelShape
    frozen: FrozenSet[str] = frozenset()
    
    def __post_init__(self):
        if not isinstance(self.params, MappingProxyType):
            object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        unknown = set(self.frozen) - set(self.params)
        if unknown:
            raise ModelShapeError(f"freeze flags for unknown groups: {sorted(unknown)}")
    
    @property
    def names(self) -> List[str]:
        return list(self.params.keys())
    
    @property
    def trainable_names(self) -> List[str]:
        return [name for name in self.params if name not in self.frozen]
    
    @property
    def category_names(self) -> List[str]:
        return [name for name in self.params if is_category_group(name)]
    
    def is_frozen(self, name: str) -> bool:
        return name in self.frozen
    
    def replace(
        self,
        params: Optional[Mapping[str, torch.Tensor]] = None,
        shape: Optional[ModelShape] = None,
        frozen: Optional[Iterable[str]] = None
    ) -> "ModelState":
        return ModelState(
            params=dict(self.params if params is None else params),
            shape=self.shape if shape is None else shape,
            frozen=self.frozen if frozen is None else frozenset(frozen)
        )
    
    def freeze(self, names: Iterable[str]) -> "ModelState":
        return self.replace(frozen=self.frozen | frozenset(names))
    
    def tensor_hash(self, name: str) -> str:
        tensor = self.params[name].detach().contiguous().cpu()
        return hashlib.sha256(tensor.numpy().tobytes()).hexdigest()
    
    def frozen_hashes(self) -> Dict[str, str]:
        return {name: self.tensor_hash(name) for name in sorted(self.frozen)}
    
    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.params.values())


@dataclass(frozen=True)
class GradientBundle:
    """Gradients for the trainable groups; frozen groups are omitted"""
    grads: Mapping[str, torch.Tensor]
    loss_value: float


@dataclass(frozen=True)
class EncodedSequence:
    hidden_states: torch.Tensor  # [T, h], top layer
    
    @property
    def final_state(self) -> torch.Tensor:
        return self.hidden_states[-1]


@dataclass(frozen=True)
class SequenceBatch:
    """Day sequences padded to a common length"""
    categories: torch.Tensor  # [B, T]
    time_slots: torch.Tensor
    pois: torch.Tensor
    distances: torch.Tensor
    lengths: torch.Tensor  # [B]
    
    @classmethod
    def from_pairs(cls, pairs: Sequence[DaySequencePair]) -> "SequenceBatch":
        if not pairs:
            raise DataError("batch must not be empty")
        width = max(len(pair) for pair in pairs)
        
        def pad(rows: List[List[int]]) -> torch.Tensor:
            return torch.tensor([row + [0] * (width - len(row)) for row in rows], dtype=torch.long)
        
        return cls(
            categories=pad([[s.category_id for s in p.category_seq] for p in pairs]),
            time_slots=pad([[s.time_slot for s in p.category_seq] for p in pairs]),
            pois=pad([[s.poi_id for s in p.poi_seq] for p in pairs]),
            distances=pad([[s.distance_bucket for s in p.poi_seq] for p in pairs]),
            lengths=torch.tensor([len(p) for p in pairs], dtype=torch.long)
        )
    
    def __len__(self) -> int:
        return int(self.lengths.shape[0])
    
    @property
    def width(self) -> int:
        return int(self.categories.shape[1])
