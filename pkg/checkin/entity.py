import datetime as dt
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

# first-level categories, fixed order
CATEGORY_CODES: Tuple[str, ...] = ("AE", "CU", "DR", "FO", "NS", "OR", "PO", "RE", "SS", "TT")
CATEGORY_NAMES: Dict[str, str] = {
    "AE": "Arts & Entertainment",
    "CU": "College & University",
    "DR": "Drink",
    "FO": "Food",
    "NS": "Nightlife Spot",
    "OR": "Outdoor & Recreation",
    "PO": "Professional & Other Places",
    "RE": "Residence",
    "SS": "Shop & Service",
    "TT": "Travel & Transport",
}
NUM_CATEGORIES = len(CATEGORY_CODES)
NUM_TIME_SLOTS = 48
NUM_DISTANCE_BUCKETS = 8


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class CheckinRecord(BaseModel):
    """One user visit: r = (p, c, g, t)"""
    model_config = ConfigDict(frozen=True)
    
    user_id: str
    poi_id: str
    category_id: int = Field(ge=0, lt=NUM_CATEGORIES)
    latitude: float = Field(ge=-90.0, le=90.0)
    longitude: float = Field(ge=-180.0, le=180.0)
    timestamp: float  # UTC seconds
    tz_offset_minutes: int = 0
    
    @property
    def coordinate(self) -> Tuple[float, float]:
        return (self.latitude, self.longitude)


class CategoryStep(BaseModel):
    model_config = ConfigDict(frozen=True)
    
    category_id: int = Field(ge=0, lt=NUM_CATEGORIES)
    time_slot: int = Field(ge=0, lt=NUM_TIME_SLOTS)


class PoiStep(BaseModel):
    model_config = ConfigDict(frozen=True)
    
    poi_id: int = Field(ge=0)
    distance_bucket: int = Field(ge=0, lt=NUM_DISTANCE_BUCKETS)
    time_slot: int = Field(ge=0, lt=NUM_TIME_SLOTS)


class DaySequencePair(BaseModel):
    """A user's one-day check-ins, rendered at category and POI level"""
    model_config = ConfigDict(frozen=True)
    
    user_id: str
    date: dt.date
    start_timestamp: float
    category_seq: Tuple[CategoryStep, ...]
    poi_seq: Tuple[PoiStep, ...]
    
    @model_validator(mode="after")
    def check_lengths(self) -> "DaySequencePair":
        if len(self.category_seq) != len(self.poi_seq):
            raise ValueError("category and POI sequences differ in length")
        if len(self.category_seq) < 2:
            raise ValueError("day sequences need at least two check-ins")
        if self.poi_seq[0].distance_bucket != 0:
            raise ValueError("first POI step must carry the sentinel distance bucket")
        return self
    
    def __len__(self) -> int:
        return len(self.category_seq)
    
    @property
    def sort_key(self) -> Tuple[dt.date, float, str]:
        return (self.date, self.start_timestamp, self.user_id)


class Vocabulary(BaseModel):
    """Index mapping; line number in the serialized file is the index"""
    model_config = ConfigDict(frozen=True)
    
    tokens: Tuple[str, ...]
    _index: Dict[str, int] = PrivateAttr(default_factory=dict)
    
    def model_post_init(self, __context) -> None:
        self._index = {token: i for i, token in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
    
    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        return cls(tokens=tuple(sorted(set(tokens))))
    
    def index(self, token: str) -> int:
        return self._index[token]
    
    def __contains__(self, token: str) -> bool:
        return token in self._index
    
    def __len__(self) -> int:
        return len(self.tokens)


class CityDataset(BaseModel):
    """A city's filtered, sequenced and chronologically split check-ins"""
    model_config = ConfigDict(frozen=True)
    
    city_id: str
    user_vocab: Vocabulary
    poi_vocab: Vocabulary
    poi_categories: Tuple[int, ...]  # majority category per POI index
    sequences: Tuple[DaySequencePair, ...]
    split: Tuple[Split, ...]
    num_checkins: int = 0
    
    @model_validator(mode="after")
    def check_partition(self) -> "CityDataset":
        if len(self.split) != len(self.sequences):
            raise ValueError("every sequence needs exactly one split tag")
        if len(self.poi_categories) != len(self.poi_vocab):
            raise ValueError("every POI needs a category")
        return self
    
    @property
    def num_pois(self) -> int:
        return len(self.poi_vocab)
    
    @property
    def num_users(self) -> int:
        return len(self.user_vocab)
    
    def sequences_for(self, split: Split) -> List[DaySequencePair]:
        return [seq for seq, tag in zip(self.sequences, self.split) if tag == split]
    
    @property
    def train(self) -> List[DaySequencePair]:
        return self.sequences_for(Split.TRAIN)
    
    @property
    def val(self) -> List[DaySequencePair]:
        return self.sequences_for(Split.VAL)
    
    @property
    def test(self) -> List[DaySequencePair]:
        return self.sequences_for(Split.TEST)
    
    def category_of(self, poi_index: int) -> Optional[int]:
        return self.poi_categories[poi_index] if 0 <= poi_index < len(self.poi_categories) else None
