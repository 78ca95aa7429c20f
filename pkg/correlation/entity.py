from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from checkin.entity import CATEGORY_CODES, NUM_CATEGORIES

NUM_TRANSITIONS = NUM_CATEGORIES * NUM_CATEGORIES


class CorrelationMode(str, Enum):
    POI_DISTRIBUTION = "poi-distribution"
    BEHAVIORAL = "behavioral-transition"


def transition_label(index: int) -> str:
    """Row-major transition index -> label such as FO2SS"""
    source, destination = divmod(index, NUM_CATEGORIES)
    return f"{CATEGORY_CODES[source]}2{CATEGORY_CODES[destination]}"


class _ProbabilityVector(BaseModel):
    model_config = ConfigDict(frozen=True)
    
    city_id: str
    probs: Tuple[float, ...]
    
    @model_validator(mode="after")
    def check_probabilities(self):
        values = np.asarray(self.probs, dtype=np.float64)
        if values.size and (values.min() < 0 or abs(values.sum() - 1.0) > 1e-9):
            raise ValueError("distribution must be non-negative with unit sum")
        return self
    
    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)


class CategoryDistribution(_ProbabilityVector):
    """Fraction of a city's POIs per first-level category"""
    
    @model_validator(mode="after")
    def check_width(self):
        if len(self.probs) != NUM_CATEGORIES:
            raise ValueError(f"expected {NUM_CATEGORIES} categories")
        return self


class TransitionDistribution(_ProbabilityVector):
    """Share of each (source -> destination) category transition, row-major"""
    
    @model_validator(mode="after")
    def check_width(self):
        if len(self.probs) != NUM_TRANSITIONS:
            raise ValueError(f"expected {NUM_TRANSITIONS} transition types")
        return self


class CorrelationMatrix(BaseModel):
    model_config = ConfigDict(frozen=True)
    
    city_ids: Tuple[str, ...]
    values: Tuple[Tuple[float, ...], ...]
    mode: CorrelationMode
    
    @model_validator(mode="after")
    def check_shape(self) -> "CorrelationMatrix":
        matrix = self.as_array()
        n = len(self.city_ids)
        if matrix.shape != (n, n):
            raise ValueError("correlation matrix must be square over the city list")
        if not np.array_equal(matrix, matrix.T) or not np.all(np.diag(matrix) == 1.0):
            raise ValueError("correlation matrix must be symmetric with unit diagonal")
        return self
    
    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(len(self.city_ids), len(self.city_ids))
    
    def get(self, a: str, b: str) -> float:
        return self.values[self.city_ids.index(a)][self.city_ids.index(b)]
    
    def extreme_pairs(self) -> Tuple[Tuple[str, str], Tuple[str, str]]:
        """(most correlated pair, least correlated pair) over distinct cities"""
        pairs: List[Tuple[float, str, str]] = [
            (self.values[i][j], self.city_ids[i], self.city_ids[j])
            for i in range(len(self.city_ids)) for j in range(i + 1, len(self.city_ids))
        ]
        most = max(pairs, key=lambda p: p[0])
        least = min(pairs, key=lambda p: p[0])
        return (most[1], most[2]), (least[1], least[2])
