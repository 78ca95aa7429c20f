import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from checkin.model import CheckinSchema
from config.runtime import config as runtime_config
from evaluation.model import DEFAULT_KS
from meta.model import FreezeConfig, MetaConfig, TrainConfig
from network.entity import ModelShape
from shared.errors import ConfigError
from synthetic.model import SyntheticSpec


class CityConfig(BaseModel):
    """A raw check-in file and how to read it"""
    path: Optional[str] = None
    check_in_schema: CheckinSchema = Field(default_factory=CheckinSchema, alias="schema")
    
    model_config = ConfigDict(populate_by_name=True)


class DataConfig(BaseModel):
    min_user: int = Field(default=5, ge=1)
    min_poi: int = Field(default=3, ge=1)
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    
    @field_validator("ratios")
    @classmethod
    def check_ratios(cls, value):
        if any(r < 0 for r in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"split ratios {value} must be non-negative and sum to 1")
        return value


class ModelConfig(BaseModel):
    embed_dim: int = Field(default=32, gt=0)
    hidden_dim: int = Field(default=64, gt=0)
    cat_layers: int = Field(default=3, ge=1)
    dtype: Literal["float64", "float32"] = "float64"
    
    def shape(self) -> ModelShape:
        return ModelShape(
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            cat_layers=self.cat_layers,
            dtype=self.dtype
        )


class EvalConfig(BaseModel):
    ks: List[int] = Field(default_factory=lambda: list(DEFAULT_KS))
    
    @field_validator("ks")
    @classmethod
    def check_ks(cls, value):
        if not value or any(k < 1 for k in value):
            raise ValueError("ks must be a non-empty list of positive integers")
        return sorted(set(value))


# command-line flag -> dotted path in the config tree
FLAG_PATHS = {
    "seed": "seed",
    "out": "out_dir",
    "target": "target",
    "order": "meta.order",
    "gamma_floor": "meta.gamma_floor",
    "l": "freeze.l",
    "n": "freeze.n",
    "local_steps": "meta.local_steps",
    "iters": "meta.iterations",
    "N": "meta.N",
    "plot": "plot",
}


class RunConfig(BaseModel):
    """The whole run: cities, target, every stage's settings"""
    model_config = ConfigDict(populate_by_name=True)
    
    cities: Dict[str, CityConfig] = Field(default_factory=dict)
    target: Optional[str] = None
    seed: int = 0
    out_dir: str = Field(default_factory=lambda: runtime_config.default_out_dir)
    plot: bool = False
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    meta: MetaConfig = Field(default_factory=MetaConfig)
    freeze: FreezeConfig = Field(default_factory=FreezeConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    synthetic: Optional[SyntheticSpec] = None
    
    @model_validator(mode="after")
    def check_target(self) -> "RunConfig":
        if self.target is not None and self.cities and self.target not in self.cities:
            raise ValueError(f"target {self.target!r} is not among cities {sorted(self.cities)}")
        return self
    
    @classmethod
    def build(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e
    
    @classmethod
    def load(cls, path: Path | str | None) -> "RunConfig":
        """Read a TOML config file; no path gives the defaults"""
        if path is None:
            return cls.build({})
        path = Path(path)
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        # relative city paths are relative to the config file
        for city in data.get("cities", {}).values():
            if isinstance(city, dict) and city.get("path") and not Path(city["path"]).is_absolute():
                city["path"] = str(path.parent / city["path"])
        return cls.build(data)
    
    def with_overrides(self, **flags: Any) -> "RunConfig":
        """Apply command-line flags (None means not given); flags win over the file"""
        data = self.model_dump(mode="json", by_alias=True)
        for flag, value in flags.items():
            if value is None or flag not in FLAG_PATHS:
                continue
            node = data
            *parents, leaf = FLAG_PATHS[flag].split(".")
            for key in parents:
                node = node.setdefault(key, {})
            node[leaf] = value
        return RunConfig.build(data)
    
    @property
    def city_ids(self) -> List[str]:
        return list(self.cities.keys())
    
    def require_target(self) -> str:
        if self.target is None:
            raise ConfigError("No target city configured (set `target` or pass --target)")
        if self.cities and self.target not in self.cities:
            raise ConfigError(f"Target city {self.target!r} is not configured")
        return self.target
    
    def meta_config(self, use_correlation: bool = True) -> MetaConfig:
        """Meta settings carrying the run seed"""
        return self.meta.model_copy(update={"seed": self.seed, "use_correlation": use_correlation and self.meta.use_correlation})
    
    def shape(self) -> ModelShape:
        return self.model.shape()
    
    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; the output directory is not part of it"""
        payload = self.model_dump(mode="json", by_alias=True, exclude={"out_dir"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
