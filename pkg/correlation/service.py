import json
import logging

from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from checkin.entity import CATEGORY_CODES, NUM_CATEGORIES, CityDataset, Split
from correlation.entity import (
    NUM_TRANSITIONS, CategoryDistribution, CorrelationMatrix, CorrelationMode,
    TransitionDistribution, transition_label
)
from shared.errors import CorrelationError, DataError

logger = logging.getLogger(__name__)

DEFAULT_GAMMA_FLOOR = 0.05


class CorrelationService:
    
    @staticmethod
    def poi_category_distribution(city: CityDataset) -> CategoryDistribution:
        if city.num_pois == 0:
            raise DataError(f"{city.city_id}: city has no POIs")
        counts = np.bincount(np.asarray(city.poi_categories, dtype=np.int64), minlength=NUM_CATEGORIES)
        return CategoryDistribution(city_id=city.city_id, probs=tuple((counts / counts.sum()).tolist()))
    
    @staticmethod
    def transition_counts(city: CityDataset, split: Split | None = Split.TRAIN) -> np.ndarray:
        """Consecutive same-day category pairs; None counts every split"""
        sequences = city.sequences if split is None else city.sequences_for(split)
        counts = np.zeros(NUM_TRANSITIONS, dtype=np.int64)
        for seq in sequences:
            categories = [step.category_id for step in seq.category_seq]
            for source, destination in zip(categories, categories[1:]):
                counts[source * NUM_CATEGORIES + destination] += 1
        return counts
    
    @staticmethod
    def transition_distribution(city: CityDataset, split: Split | None = Split.TRAIN) -> TransitionDistribution:
        counts = CorrelationService.transition_counts(city, split)
        if counts.sum() == 0:
            raise DataError(f"{city.city_id}: no category transitions in the {split.value if split else 'full'} split")
        return TransitionDistribution(city_id=city.city_id, probs=tuple((counts / counts.sum()).tolist()))
    
    @staticmethod
    def pearson(x: Sequence[float], y: Sequence[float]) -> float:
        """Sample Pearson correlation coefficient"""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1 or x.size < 2:
            raise CorrelationError(f"Pearson needs two equal-length vectors of length >= 2, got {x.shape} and {y.shape}")
        dx = x - x.mean()
        dy = y - y.mean()
        sxx = np.dot(dx, dx)
        syy = np.dot(dy, dy)
        if sxx == 0.0 or syy == 0.0:
            raise CorrelationError("Pearson is undefined for a constant vector")
        r = np.sum(dx * dy) / np.sqrt(sxx * syy)
        return float(np.clip(r, -1.0, 1.0))
    
    @staticmethod
    def distribution_vector(city: CityDataset, mode: CorrelationMode, split: Split | None = Split.TRAIN) -> np.ndarray:
        if mode == CorrelationMode.POI_DISTRIBUTION:
            return CorrelationService.poi_category_distribution(city).as_array()
        return CorrelationService.transition_distribution(city, split).as_array()
    
    @staticmethod
    def matrix_from_vectors(city_ids: Sequence[str], vectors: Sequence[np.ndarray], mode: CorrelationMode) -> CorrelationMatrix:
        n = len(city_ids)
        if n < 2:
            raise DataError("Correlation matrix needs at least two cities")
        values = np.eye(n, dtype=np.float64)
        for i in range(n):
            for j in range(i + 1, n):
                try:
                    values[i, j] = values[j, i] = CorrelationService.pearson(vectors[i], vectors[j])
                except CorrelationError as e:
                    raise CorrelationError(f"{city_ids[i]} vs {city_ids[j]}: {e.detail}") from e
        return CorrelationMatrix(
            city_ids=tuple(city_ids),
            values=tuple(tuple(row) for row in values.tolist()),
            mode=mode
        )
    
    @staticmethod
    def correlation_matrix(
        cities: Sequence[CityDataset],
        mode: CorrelationMode = CorrelationMode.BEHAVIORAL,
        split: Split | None = Split.TRAIN
    ) -> CorrelationMatrix:
        vectors = [CorrelationService.distribution_vector(city, mode, split) for city in cities]
        return CorrelationService.matrix_from_vectors([city.city_id for city in cities], vectors, mode)
    
    @staticmethod
    def correlation_weight(
        aux: TransitionDistribution,
        target: TransitionDistribution,
        floor: float = DEFAULT_GAMMA_FLOOR
    ) -> float:
        """gamma_cor = clamp(pearson(aux, target), floor, 1)"""
        a, b = aux.as_array(), target.as_array()
        if np.array_equal(a, b):
            return 1.0
        try:
            r = CorrelationService.pearson(a, b)
        except CorrelationError as e:
            raise CorrelationError(f"{aux.city_id} vs {target.city_id}: {e.detail}") from e
        return float(min(max(r, floor), 1.0))
    
    @staticmethod
    def top_transitions(
        city: CityDataset | TransitionDistribution,
        k: int = 10,
        split: Split | None = Split.TRAIN
    ) -> List[Tuple[str, float]]:
        """Top-k transition types by share, ties broken by row-major index"""
        distribution = city if isinstance(city, TransitionDistribution) else CorrelationService.transition_distribution(city, split)
        probs = distribution.as_array()
        ranked = sorted((i for i in range(NUM_TRANSITIONS) if probs[i] > 0), key=lambda i: (-probs[i], i))
        return [(transition_label(i), float(probs[i])) for i in ranked[:k]]
    
    # --- artifacts ---------------------------------------------------------
    
    @staticmethod
    def write_matrix(matrix: CorrelationMatrix, out_dir: Path, stem: str) -> List[Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}.json"
        frame = pd.DataFrame(matrix.as_array(), columns=list(matrix.city_ids), index=list(matrix.city_ids))
        frame.to_csv(csv_path, index_label="city_id", float_format="%.12g")
        json_path.write_text(json.dumps(matrix.model_dump(mode="json"), indent=2), encoding="utf-8")
        return [csv_path, json_path]
    
    @staticmethod
    def write_top_transitions(rows: List[Tuple[str, float]], path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=["transition_label", "proportion"]).to_csv(path, index=False, float_format="%.12g")
        return path
    
    @staticmethod
    def write_category_distributions(distributions: Sequence[CategoryDistribution], path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(
            [d.probs for d in distributions],
            index=[d.city_id for d in distributions],
            columns=list(CATEGORY_CODES)
        )
        frame.to_csv(path, index_label="city_id", float_format="%.12g")
        return path
