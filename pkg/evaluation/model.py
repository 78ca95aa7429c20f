from enum import Enum
from typing import List, Optional

import pandas as pd
from pydantic import BaseModel, Field, model_validator

DEFAULT_KS = (5, 10)
# slack for float accumulation when checking NDCG <= HR
METRIC_TOLERANCE = 1e-12


class Variant(str, Enum):
    FULL = "full"
    WITHOUT_COR = "w/o-cor"
    WITHOUT_FRZ = "w/o-frz"
    WITHOUT_COR_FRZ = "w/o-cor-frz"
    WITHOUT_CAT = "w/o-cat"
    MOSTPOP = "mostpop"
    
    @property
    def uses_correlation(self) -> bool:
        return self in (Variant.FULL, Variant.WITHOUT_FRZ)
    
    @property
    def uses_freezing(self) -> bool:
        return self in (Variant.FULL, Variant.WITHOUT_COR)


class MetricRow(BaseModel):
    k: int = Field(ge=1)
    hr: float = Field(ge=0, le=1)
    ndcg: float = Field(ge=0, le=1)


class EvalReport(BaseModel):
    variant: str = Variant.FULL.value
    examples: int = Field(ge=0)
    rows: List[MetricRow]
    config_fingerprint: str = ""
    seed: Optional[int] = None
    
    @model_validator(mode="after")
    def check_metrics(self) -> "EvalReport":
        previous = 0.0
        for row in sorted(self.rows, key=lambda r: r.k):
            if row.ndcg > row.hr + METRIC_TOLERANCE:
                raise ValueError(f"NDCG@{row.k} {row.ndcg} exceeds HR@{row.k} {row.hr}")
            if row.hr + METRIC_TOLERANCE < previous:
                raise ValueError(f"HR@{row.k} decreases with K")
            previous = row.hr
        return self
    
    @property
    def ks(self) -> List[int]:
        return [row.k for row in self.rows]
    
    def row(self, k: int) -> MetricRow:
        for row in self.rows:
            if row.k == k:
                return row
        raise KeyError(f"no metrics at K={k}")
    
    def hit_ratio(self, k: int) -> float:
        return self.row(k).hr
    
    def ndcg(self, k: int) -> float:
        return self.row(k).ndcg
    
    def to_frame(self) -> pd.DataFrame:
        """Long format: variant, K, metric, value, seed"""
        records = []
        for row in self.rows:
            records.append({"variant": self.variant, "K": row.k, "metric": "HR", "value": row.hr, "seed": self.seed})
            records.append({"variant": self.variant, "K": row.k, "metric": "NDCG", "value": row.ndcg, "seed": self.seed})
        return pd.DataFrame(records, columns=["variant", "K", "metric", "value", "seed"])
