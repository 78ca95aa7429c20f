import logging
import math

from collections import Counter, defaultdict
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pytz
from geopy.distance import great_circle
from pydantic import ValidationError

from checkin.entity import (
    CATEGORY_CODES, CATEGORY_NAMES, CategoryStep, CheckinRecord, CityDataset,
    DaySequencePair, PoiStep, Split, Vocabulary
)
from checkin.model import CheckinSchema, DatasetStats, ParseResult
from shared.errors import DataError, UnknownCategoryError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
# upper edges of distance buckets 1..6, bucket 7 is everything beyond 20 km
DISTANCE_EDGES_KM = np.array([0.5, 1.0, 2.0, 5.0, 10.0, 20.0])
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

_CATEGORY_LOOKUP: Dict[str, int] = {
    **{code.lower(): i for i, code in enumerate(CATEGORY_CODES)},
    **{CATEGORY_NAMES[code].lower(): i for i, code in enumerate(CATEGORY_CODES)},
}


class CheckinService:
    
    @staticmethod
    def category_index(raw: str, category_map: Optional[Dict[str, str]] = None) -> int:
        """Map a category string (code, first-level name or mapped label) to its index"""
        key = raw.strip()
        if category_map:
            key = category_map.get(key, key)
        index = _CATEGORY_LOOKUP.get(key.lower())
        if index is None:
            raise UnknownCategoryError(raw)
        return index
    
    @staticmethod
    def parse_timestamp(value: str, fmt: Optional[str] = None) -> float:
        """Epoch seconds or any ISO-8601 / formatted date; naive values are UTC"""
        text = value.strip()
        try:
            return float(text)
        except ValueError:
            pass
        stamp = pd.to_datetime(text, format=fmt) if fmt else pd.Timestamp(text)
        if pd.isna(stamp):
            raise ValueError(f"unparseable timestamp {value!r}")
        if stamp.tzinfo is None:
            stamp = stamp.tz_localize("UTC")
        return stamp.timestamp()
    
    @staticmethod
    def parse_checkins(path: Path | str, schema: Optional[CheckinSchema] = None) -> ParseResult:
        """
        Parse a delimited check-in file. Malformed rows are rejected and collected
        as diagnostics; an unknown category string aborts the parse.
        """
        schema = schema or CheckinSchema()
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Check-in file not found: {path}")
        
        delimiter = schema.delimiter or CheckinService._detect_delimiter(path)
        diagnostics: List[str] = []
        
        def reject_line(fields: List[str]) -> None:
            diagnostics.append(f"malformed row with {len(fields)} fields: {delimiter.join(fields)[:80]}")
            return None
        
        frame = pd.read_csv(
            path,
            sep=delimiter,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8",
            engine="python",
            on_bad_lines=reject_line
        )
        
        required = [schema.user_id, schema.poi_id, schema.category, schema.latitude, schema.longitude, schema.timestamp]
        missing = [column for column in required if column not in frame.columns]
        if missing:
            raise DataError(f"{path.name}: missing columns {', '.join(missing)}")
        has_offset = schema.tz_offset_minutes is not None and schema.tz_offset_minutes in frame.columns
        
        records: List[CheckinRecord] = []
        for line, values in enumerate(frame.to_dict(orient="records"), start=2):
            if any(pd.isna(values[column]) or not str(values[column]).strip() for column in required):
                diagnostics.append(f"line {line}: missing field")
                continue
            category_id = CheckinService.category_index(values[schema.category], schema.category_map)
            try:
                offset = values.get(schema.tz_offset_minutes) if has_offset else None
                records.append(CheckinRecord(
                    user_id=values[schema.user_id].strip(),
                    poi_id=values[schema.poi_id].strip(),
                    category_id=category_id,
                    latitude=values[schema.latitude],
                    longitude=values[schema.longitude],
                    timestamp=CheckinService.parse_timestamp(values[schema.timestamp], schema.timestamp_format),
                    tz_offset_minutes=CheckinService._offset_minutes(offset)
                ))
            except ValidationError as e:
                reasons = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
                diagnostics.append(f"line {line}: {reasons}")
            except (ValueError, TypeError) as e:
                diagnostics.append(f"line {line}: {e}")
        
        if diagnostics:
            logger.warning(f"{path.name}: rejected {len(diagnostics)} row(s)")
        logger.info(f"{path.name}: parsed {len(records)} check-ins")
        return ParseResult(records=records, diagnostics=diagnostics)
    
    @staticmethod
    def _offset_minutes(value) -> int:
        if value is None or pd.isna(value) or not str(value).strip():
            return 0
        return int(float(value))
    
    @staticmethod
    def _detect_delimiter(path: Path) -> str:
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline()
        return "\t" if "\t" in header else ","
    
    @staticmethod
    def filter_sparse(records: Sequence[CheckinRecord], min_user: int = 5, min_poi: int = 3) -> List[CheckinRecord]:
        """Drop sparse users and POIs until both thresholds hold at once"""
        if min_user < 1 or min_poi < 1:
            raise DataError("min_user and min_poi must be at least 1")
        kept = list(records)
        while True:
            user_counts = Counter(r.user_id for r in kept)
            poi_counts = Counter(r.poi_id for r in kept)
            survivors = [
                r for r in kept
                if user_counts[r.user_id] >= min_user and poi_counts[r.poi_id] >= min_poi
            ]
            if len(survivors) == len(kept):
                return survivors
            kept = survivors
    
    @staticmethod
    def haversine_km(g1: Tuple[float, float], g2: Tuple[float, float]) -> float:
        """Great-circle distance on a 6371 km sphere"""
        # argument order is canonicalized so f(a, b) == f(b, a) bit for bit
        a, b = sorted((tuple(g1), tuple(g2)))
        return great_circle(a, b, radius=EARTH_RADIUS_KM).km
    
    @staticmethod
    def local_datetime(timestamp: float, tz_offset_minutes: int = 0) -> datetime:
        return datetime.fromtimestamp(timestamp, tz=pytz.FixedOffset(tz_offset_minutes))
    
    @staticmethod
    def discretize_time(timestamp: float, tz_offset_minutes: int = 0) -> int:
        """Hour of day, shifted by 24 on weekends"""
        local = CheckinService.local_datetime(timestamp, tz_offset_minutes)
        return local.hour + (24 if local.weekday() >= 5 else 0)
    
    @staticmethod
    def discretize_distance(km: Optional[float], first_step: bool = False) -> int:
        if first_step or km is None:
            return 0
        if km < 0 or math.isnan(km):
            raise DataError(f"Distance must be non-negative, got {km}")
        return int(np.searchsorted(DISTANCE_EDGES_KM, km, side="left")) + 1
    
    @staticmethod
    def _record_order(record: CheckinRecord) -> Tuple:
        return (record.timestamp, record.poi_id, record.category_id, record.latitude, record.longitude)
    
    @staticmethod
    def build_day_sequences(records: Iterable[CheckinRecord], poi_vocab: Optional[Vocabulary] = None) -> List[DaySequencePair]:
        """Group check-ins by (user, local day) and render both sequence views"""
        records = list(records)
        if poi_vocab is None:
            poi_vocab = Vocabulary.from_tokens(r.poi_id for r in records)
        
        groups: Dict[Tuple, List[CheckinRecord]] = defaultdict(list)
        for record in records:
            day = CheckinService.local_datetime(record.timestamp, record.tz_offset_minutes).date()
            groups[(record.user_id, day)].append(record)
        
        pairs: List[DaySequencePair] = []
        for (user_id, day) in sorted(groups):
            visits = sorted(groups[(user_id, day)], key=CheckinService._record_order)
            if len(visits) < 2:
                continue
            category_seq, poi_seq = [], []
            previous: Optional[CheckinRecord] = None
            for visit in visits:
                slot = CheckinService.discretize_time(visit.timestamp, visit.tz_offset_minutes)
                if previous is None:
                    bucket = CheckinService.discretize_distance(None, first_step=True)
                else:
                    bucket = CheckinService.discretize_distance(
                        CheckinService.haversine_km(previous.coordinate, visit.coordinate)
                    )
                category_seq.append(CategoryStep(category_id=visit.category_id, time_slot=slot))
                poi_seq.append(PoiStep(poi_id=poi_vocab.index(visit.poi_id), distance_bucket=bucket, time_slot=slot))
                previous = visit
            pairs.append(DaySequencePair(
                user_id=user_id,
                date=day,
                start_timestamp=visits[0].timestamp,
                category_seq=tuple(category_seq),
                poi_seq=tuple(poi_seq)
            ))
        return pairs
    
    @staticmethod
    def split_sizes(n: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> Tuple[int, int, int]:
        """floor / floor / remainder"""
        train = math.floor(Fraction(str(ratios[0])) * n)
        val = math.floor(Fraction(str(ratios[1])) * n)
        return train, val, n - train - val
    
    @staticmethod
    def chronological_split(
        pairs: Sequence[DaySequencePair],
        ratios: Sequence[float] = DEFAULT_RATIOS
    ) -> List[Tuple[DaySequencePair, Split]]:
        if len(pairs) < 3:
            raise DataError(f"Need at least 3 day sequences to split, got {len(pairs)}")
        if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) > 1 + 1e-9:
            raise DataError(f"Invalid split ratios {tuple(ratios)}")
        ordered = sorted(pairs, key=lambda pair: pair.sort_key)
        n_train, n_val, _ = CheckinService.split_sizes(len(ordered), ratios)
        tags = [Split.TRAIN] * n_train + [Split.VAL] * n_val
        tags += [Split.TEST] * (len(ordered) - len(tags))
        return list(zip(ordered, tags))
    
    @staticmethod
    def majority_categories(records: Iterable[CheckinRecord], poi_vocab: Vocabulary) -> Tuple[int, ...]:
        """Majority vote per POI, ties to the lower category index"""
        votes: Dict[str, Counter] = defaultdict(Counter)
        for record in records:
            votes[record.poi_id][record.category_id] += 1
        return tuple(
            min(votes[poi].items(), key=lambda item: (-item[1], item[0]))[0]
            for poi in poi_vocab.tokens
        )
    
    @staticmethod
    def build_city_dataset(
        city_id: str,
        records: Sequence[CheckinRecord],
        min_user: int = 5,
        min_poi: int = 3,
        ratios: Sequence[float] = DEFAULT_RATIOS
    ) -> CityDataset:
        """filter -> vocabularies -> day sequences -> chronological split"""
        kept = CheckinService.filter_sparse(records, min_user, min_poi)
        if not kept:
            raise DataError(f"{city_id}: no check-ins survive the sparsity filter")
        user_vocab = Vocabulary.from_tokens(r.user_id for r in kept)
        poi_vocab = Vocabulary.from_tokens(r.poi_id for r in kept)
        pairs = CheckinService.build_day_sequences(kept, poi_vocab)
        tagged = CheckinService.chronological_split(pairs, ratios)
        logger.info(f"{city_id}: {len(kept)} check-ins, {len(user_vocab)} users, {len(poi_vocab)} POIs, {len(pairs)} day sequences")
        return CityDataset(
            city_id=city_id,
            user_vocab=user_vocab,
            poi_vocab=poi_vocab,
            poi_categories=CheckinService.majority_categories(kept, poi_vocab),
            sequences=tuple(pair for pair, _ in tagged),
            split=tuple(tag for _, tag in tagged),
            num_checkins=len(kept)
        )
    
    @staticmethod
    def density_percent(checkins: int, users: int, pois: int) -> float:
        if users == 0 or pois == 0:
            return 0.0
        return 100.0 * checkins / (users * pois)
    
    @staticmethod
    def dataset_stats(dataset: CityDataset) -> DatasetStats:
        return DatasetStats(
            city_id=dataset.city_id,
            users=dataset.num_users,
            pois=dataset.num_pois,
            checkins=dataset.num_checkins,
            density_percent=CheckinService.density_percent(dataset.num_checkins, dataset.num_users, dataset.num_pois),
            sequences=len(dataset.sequences),
            train=len(dataset.train),
            val=len(dataset.val),
            test=len(dataset.test)
        )
