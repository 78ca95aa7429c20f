import logging
import math
import zlib

from datetime import date, datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Sequence

import numpy as np
import pandas as pd

from checkin.entity import CATEGORY_CODES, NUM_CATEGORIES
from synthetic.model import SyntheticCity, SyntheticSpec

logger = logging.getLogger(__name__)

KM_PER_DEGREE = 111.195
SECONDS_PER_DAY = 86400
COLUMNS = ["user_id", "poi_id", "category", "latitude", "longitude", "timestamp", "tz_offset_minutes"]


class SampledDay(NamedTuple):
    user_id: str
    day: int
    categories: List[int]
    pois: List[str]


class SyntheticService:
    
    @staticmethod
    def city_rng(spec_seed: int, city_id: str) -> np.random.Generator:
        return np.random.default_rng([spec_seed, zlib.crc32(city_id.encode("utf-8"))])
    
    @staticmethod
    def transition_matrix(city: SyntheticCity, spec_seed: int = 0) -> np.ndarray:
        if city.transition is not None:
            return np.asarray(city.transition, dtype=np.float64)
        seed = city.transition_seed if city.transition_seed is not None else zlib.crc32(city.city_id.encode("utf-8"))
        rng = np.random.default_rng([spec_seed, seed])
        return rng.dirichlet(np.full(NUM_CATEGORIES, city.concentration), size=NUM_CATEGORIES)
    
    @staticmethod
    def poi_counts(city: SyntheticCity, rng: np.random.Generator) -> List[int]:
        """POIs per category; a scalar is a Poisson mean so category shares differ between cities"""
        if isinstance(city.pois_per_category, list):
            return list(city.pois_per_category)
        return [max(1, int(n)) for n in rng.poisson(city.pois_per_category, size=NUM_CATEGORIES)]
    
    @staticmethod
    def sample_days(city: SyntheticCity, spec_seed: int = 0) -> Iterator[SampledDay]:
        """Users' day sequences walked on the category chain; POIs uniform within the category"""
        rng = SyntheticService.city_rng(spec_seed, city.city_id)
        matrix = SyntheticService.transition_matrix(city, spec_seed)
        initial = np.asarray(city.initial) if city.initial is not None else np.full(NUM_CATEGORIES, 1.0 / NUM_CATEGORIES)
        counts = SyntheticService.poi_counts(city, rng)
        window = max(2 * city.days_per_user, 60)
        for u in range(city.users):
            user_id = f"{city.city_id}-u{u}"
            days = np.sort(rng.choice(window, size=min(city.days_per_user, window), replace=False))
            for day in days:
                length = int(rng.integers(city.min_length, city.max_length + 1))
                categories = [int(rng.choice(NUM_CATEGORIES, p=initial))]
                for _ in range(length - 1):
                    categories.append(int(rng.choice(NUM_CATEGORIES, p=matrix[categories[-1]])))
                pois = [f"{city.city_id}-{CATEGORY_CODES[c]}{int(rng.integers(counts[c]))}" for c in categories]
                yield SampledDay(user_id=user_id, day=int(day), categories=categories, pois=pois)
    
    @staticmethod
    def poi_centers(city: SyntheticCity, spec_seed: int, poi_ids: Sequence[str]) -> Dict[str, tuple]:
        """A Gaussian cluster center per POI around the city center"""
        rng = np.random.default_rng([spec_seed, zlib.crc32(f"{city.city_id}/centers".encode("utf-8"))])
        lat0, lon0 = city.center
        lon_scale = KM_PER_DEGREE * math.cos(math.radians(lat0))
        centers = {}
        for poi_id in sorted(poi_ids):
            dy, dx = rng.normal(0.0, city.city_spread_km, size=2)
            centers[poi_id] = (lat0 + dy / KM_PER_DEGREE, lon0 + dx / lon_scale)
        return centers
    
    @staticmethod
    def generate_city(city: SyntheticCity, spec_seed: int = 0) -> pd.DataFrame:
        days = list(SyntheticService.sample_days(city, spec_seed))
        centers = SyntheticService.poi_centers(city, spec_seed, {p for d in days for p in d.pois})
        rng = np.random.default_rng([spec_seed, zlib.crc32(f"{city.city_id}/checkins".encode("utf-8"))])
        lon_scale = KM_PER_DEGREE * math.cos(math.radians(city.center[0]))
        start = datetime.combine(date.fromisoformat(city.start_date), datetime.min.time(), tzinfo=timezone.utc).timestamp()
        offset = city.tz_offset_minutes * 60
        
        rows = []
        for sampled in days:
            # local midnight of the day, expressed in UTC seconds
            midnight = start + sampled.day * SECONDS_PER_DAY - offset
            seconds = np.sort(rng.uniform(0, SECONDS_PER_DAY, size=len(sampled.pois)))
            for c, poi_id, second in zip(sampled.categories, sampled.pois, seconds):
                lat, lon = centers[poi_id]
                dy, dx = rng.normal(0.0, city.cluster_spread_km, size=2) if city.cluster_spread_km else (0.0, 0.0)
                rows.append((
                    sampled.user_id,
                    poi_id,
                    CATEGORY_CODES[c],
                    round(lat + dy / KM_PER_DEGREE, 6),
                    round(lon + dx / lon_scale, 6),
                    round(midnight + float(second), 3),
                    city.tz_offset_minutes
                ))
        return pd.DataFrame(rows, columns=COLUMNS)
    
    @staticmethod
    def write(spec: SyntheticSpec, out_dir: Path | str) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for city in spec.cities:
            frame = SyntheticService.generate_city(city, spec.seed)
            path = out_dir / f"{city.city_id}.csv"
            frame.to_csv(path, index=False)
            paths[city.city_id] = path
            logger.info(f"Generated {len(frame)} check-ins for {city.city_id} at {path}")
        return paths
    
    @staticmethod
    def empirical_transitions(days: Sequence[SampledDay]) -> np.ndarray:
        counts = np.zeros((NUM_CATEGORIES, NUM_CATEGORIES))
        for sampled in days:
            for a, b in zip(sampled.categories, sampled.categories[1:]):
                counts[a, b] += 1
        return counts
    
    @staticmethod
    def three_city_spec(
        seed: int,
        target_users: int = 50,
        aux_users: int = 150,
        days_per_user: int = 20,
        pois_per_category: int = 6
    ) -> SyntheticSpec:
        """Target T, auxiliary A sharing T's chain, auxiliary B with an independent chain"""
        shared, independent = 1000 + seed, 5000 + seed
        return SyntheticSpec(seed=seed, cities=[
            SyntheticCity(city_id="T", users=target_users, transition_seed=shared,
                          days_per_user=days_per_user, pois_per_category=pois_per_category),
            SyntheticCity(city_id="A", users=aux_users, transition_seed=shared,
                          days_per_user=days_per_user, pois_per_category=pois_per_category, center=(34.05, -118.24)),
            SyntheticCity(city_id="B", users=aux_users, transition_seed=independent,
                          days_per_user=days_per_user, pois_per_category=pois_per_category, center=(51.5, -0.12)),
        ])
