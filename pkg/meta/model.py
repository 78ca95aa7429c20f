from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from network.entity import ModelState
from shared.errors import DataError


class MetaOrder(str, Enum):
    FIRST = "first"
    SECOND = "second"


class MetaConfig(BaseModel):
    """Meta-training hyper-parameters (alpha: local rate, beta: global rate)"""
    model_config = ConfigDict(frozen=True, populate_by_name=True)
    
    alpha: float = Field(default=0.01, gt=0)
    beta: float = Field(default=0.001, gt=0)
    support_size: int = Field(default=32, ge=1, alias="N")
    iterations: int = Field(default=500, ge=0)
    city_batch: Optional[int] = Field(default=None, ge=1)
    local_steps: int = Field(default=1, ge=1)
    order: MetaOrder = MetaOrder.FIRST
    gamma_floor: float = Field(default=0.05, ge=0, le=1)
    use_correlation: bool = True
    seed: int = 0
    log_every: int = Field(default=10, ge=1)


class FreezeConfig(BaseModel):
    """l counts the embedding as layer 1 and recurrent layers as 2..L"""
    model_config = ConfigDict(frozen=True)
    
    l: int = Field(default=3, ge=1)
    n: int = Field(default=2, ge=0)
    finetune_epochs: int = Field(default=5, ge=0)
    finetune_lr: float = Field(default=0.001, gt=0)
    batch_size: int = Field(default=32, ge=1)
    keep_upper_layers: bool = False


class TrainConfig(BaseModel):
    """Target-city next-POI training"""
    model_config = ConfigDict(frozen=True)
    
    epochs: int = Field(default=20, ge=0)
    lr: float = Field(default=0.001, gt=0)
    batch_size: int = Field(default=32, ge=1)
    poi_layers: int = Field(default=1, ge=1)
    patience: int = Field(default=3, ge=1)
    all_prefixes: bool = False


@dataclass(frozen=True)
class TaskEpisode:
    """One city's support and query draw for a meta-iteration"""
    city_id: str
    gamma_cor: float
    support: Sequence[Any]
    query: Sequence[Any]
    support_indices: Sequence[int] = ()
    query_indices: Sequence[int] = ()
    with_replacement: bool = False
    
    def __post_init__(self):
        if not 0.0 <= self.gamma_cor <= 1.0:
            raise DataError(f"gamma_cor {self.gamma_cor} outside [0, 1]")
        if not self.support or not self.query:
            raise DataError("support and query must be non-empty")
        if set(self.support_indices) & set(self.query_indices):
            raise DataError(f"{self.city_id}: support and query overlap")


class IterationLoss(BaseModel):
    iteration: int
    city_losses: Dict[str, float]
    total: float


@dataclass
class MetaResult:
    state: ModelState
    gammas: Dict[str, float]
    trace: List[IterationLoss] = field(default_factory=list)
    resampled_cities: List[str] = field(default_factory=list)


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_hr10: Optional[float] = None


@dataclass
class TargetResult:
    state: ModelState
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
