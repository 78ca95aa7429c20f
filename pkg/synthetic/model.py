from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from checkin.entity import NUM_CATEGORIES

ROW_TOLERANCE = 1e-9


def _check_probability_vector(row: List[float], what: str) -> None:
    if len(row) != NUM_CATEGORIES:
        raise ValueError(f"{what} must have {NUM_CATEGORIES} entries, got {len(row)}")
    if any(p < 0 for p in row):
        raise ValueError(f"{what} has negative entries")
    if abs(sum(row) - 1.0) > ROW_TOLERANCE:
        raise ValueError(f"{what} sums to {sum(row)}, not 1")


class SyntheticCity(BaseModel):
    """
    One generated city. Without an explicit `transition` matrix the rows are
    drawn from a Dirichlet seeded by `transition_seed`, so cities sharing that
    seed share their category Markov chain.
    """
    model_config = ConfigDict(frozen=True)
    
    city_id: str
    users: int = Field(default=50, ge=1)
    pois_per_category: int | List[int] = 10
    transition: Optional[List[List[float]]] = None
    transition_seed: Optional[int] = None
    concentration: float = Field(default=0.3, gt=0)
    initial: Optional[List[float]] = None
    days_per_user: int = Field(default=20, ge=1)
    min_length: int = Field(default=2, ge=2)
    max_length: int = Field(default=6, ge=2)
    center: Tuple[float, float] = (40.7128, -74.0060)
    city_spread_km: float = Field(default=8.0, gt=0)
    cluster_spread_km: float = Field(default=0.05, ge=0)
    start_date: str = "2012-04-02"
    tz_offset_minutes: int = 0
    
    @field_validator("transition")
    @classmethod
    def check_transition(cls, value):
        if value is not None:
            if len(value) != NUM_CATEGORIES:
                raise ValueError(f"transition matrix must be {NUM_CATEGORIES}x{NUM_CATEGORIES}")
            for i, row in enumerate(value):
                _check_probability_vector(row, f"transition row {i}")
        return value
    
    @field_validator("initial")
    @classmethod
    def check_initial(cls, value):
        if value is not None:
            _check_probability_vector(value, "initial distribution")
        return value
    
    @field_validator("pois_per_category")
    @classmethod
    def check_pois(cls, value):
        if isinstance(value, list):
            if len(value) != NUM_CATEGORIES or any(v < 1 for v in value):
                raise ValueError(f"pois_per_category needs {NUM_CATEGORIES} positive counts")
        elif value < 1:
            raise ValueError("pois_per_category must be positive")
        return value
    
    @model_validator(mode="after")
    def check_lengths(self) -> "SyntheticCity":
        if self.max_length < self.min_length:
            raise ValueError("max_length must be >= min_length")
        return self


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(frozen=True)
    
    seed: int = 0
    cities: List[SyntheticCity]
    
    @model_validator(mode="after")
    def check_unique(self) -> "SyntheticSpec":
        ids = [city.city_id for city in self.cities]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate city ids in {ids}")
        return self
