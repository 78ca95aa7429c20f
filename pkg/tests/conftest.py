import datetime as dt

from typing import Callable, List, Optional, Sequence

import pytest
import torch

from checkin.entity import CategoryStep, CheckinRecord, CityDataset, DaySequencePair, PoiStep
from checkin.service import CheckinService
from config.settings import RunConfig
from network.entity import ModelShape
from synthetic.model import SyntheticCity, SyntheticSpec
from synthetic.service import SyntheticService


def make_pair(
    categories: Sequence[int],
    pois: Optional[Sequence[int]] = None,
    slots: Optional[Sequence[int]] = None,
    buckets: Optional[Sequence[int]] = None,
    user: str = "u0",
    day: dt.date = dt.date(2012, 4, 2),
    start: float = 0.0
) -> DaySequencePair:
    n = len(categories)
    pois = list(pois) if pois is not None else [c % 5 for c in categories]
    slots = list(slots) if slots is not None else [8 + i for i in range(n)]
    buckets = list(buckets) if buckets is not None else [0] + [1 + (i % 7) for i in range(n - 1)]
    return DaySequencePair(
        user_id=user,
        date=day,
        start_timestamp=start,
        category_seq=tuple(CategoryStep(category_id=c, time_slot=t) for c, t in zip(categories, slots)),
        poi_seq=tuple(PoiStep(poi_id=p, distance_bucket=d, time_slot=t) for p, d, t in zip(pois, buckets, slots))
    )


def records_from_city(city: SyntheticCity, seed: int = 0) -> List[CheckinRecord]:
    frame = SyntheticService.generate_city(city, seed)
    return [
        CheckinRecord(
            user_id=row["user_id"],
            poi_id=row["poi_id"],
            category_id=CheckinService.category_index(row["category"]),
            latitude=float(row["latitude"]),
            longitude=float(row["longitude"]),
            timestamp=float(row["timestamp"]),
            tz_offset_minutes=int(row["tz_offset_minutes"])
        )
        for row in frame.to_dict(orient="records")
    ]


def dataset_from_city(city: SyntheticCity, seed: int = 0) -> CityDataset:
    return CheckinService.build_city_dataset(city.city_id, records_from_city(city, seed))


@pytest.fixture
def pair_factory() -> Callable[..., DaySequencePair]:
    return make_pair


@pytest.fixture
def tiny_shape() -> ModelShape:
    """d=2, h=3, |C|=10, |P|=5 with both channels"""
    return ModelShape(embed_dim=2, hidden_dim=3, cat_layers=3, poi_layers=1, num_pois=5)


@pytest.fixture
def tiny_batch() -> List[DaySequencePair]:
    return [
        make_pair([3, 8, 3, 9], pois=[0, 4, 2, 1]),
        make_pair([1, 2], pois=[3, 0], slots=[30, 31]),
        make_pair([7, 7, 0], pois=[2, 2, 4], slots=[22, 23, 47]),
        make_pair([5, 4, 6, 2], pois=[1, 3, 0, 4], slots=[0, 12, 18, 40]),
    ]


@pytest.fixture(scope="session")
def three_city_spec() -> SyntheticSpec:
    """Small T / A / B cities; A shares T's category chain, B does not"""
    return SyntheticSpec(seed=7, cities=[
        SyntheticCity(city_id="T", users=12, days_per_user=10, pois_per_category=2, transition_seed=11),
        SyntheticCity(city_id="A", users=16, days_per_user=10, pois_per_category=2, transition_seed=11, center=(34.05, -118.24)),
        SyntheticCity(city_id="B", users=16, days_per_user=10, pois_per_category=2, transition_seed=99, center=(51.5, -0.12)),
    ])


@pytest.fixture(scope="session")
def city_records(three_city_spec) -> List[CheckinRecord]:
    return records_from_city(three_city_spec.cities[0], three_city_spec.seed)


@pytest.fixture(scope="session")
def tiny_cities(three_city_spec) -> List[CityDataset]:
    return [dataset_from_city(city, three_city_spec.seed) for city in three_city_spec.cities]


@pytest.fixture
def tiny_run_config(tmp_path) -> RunConfig:
    return RunConfig.build({
        "target": "T",
        "seed": 3,
        "out_dir": str(tmp_path / "run"),
        "model": {"embed_dim": 4, "hidden_dim": 6, "cat_layers": 3},
        "meta": {"alpha": 0.05, "beta": 0.05, "N": 4, "iterations": 4},
        "freeze": {"l": 3, "n": 2, "finetune_epochs": 1, "batch_size": 16},
        "train": {"epochs": 2, "batch_size": 16, "poi_layers": 1, "lr": 0.01},
    })


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    yield
