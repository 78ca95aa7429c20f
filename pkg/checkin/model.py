from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from checkin.entity import CheckinRecord


class CheckinSchema(BaseModel):
    """Column mapping for a delimited check-in dump"""
    user_id: str = "user_id"
    poi_id: str = "poi_id"
    category: str = "category"
    latitude: str = "latitude"
    longitude: str = "longitude"
    timestamp: str = "timestamp"
    tz_offset_minutes: Optional[str] = "tz_offset_minutes"
    delimiter: Optional[str] = None  # None = sniff tab vs comma
    timestamp_format: Optional[str] = None
    category_map: Dict[str, str] = Field(default_factory=dict)
    
    model_config = {
        "json_schema_extra": {
            "example": {
                "user_id": "userId",
                "poi_id": "venueId",
                "category": "venueCategory",
                "latitude": "latitude",
                "longitude": "longitude",
                "timestamp": "utcTimestamp",
                "tz_offset_minutes": "timezoneOffset",
                "delimiter": "\t"
            }
        }
    }


class ParseResult(BaseModel):
    records: List[CheckinRecord]
    diagnostics: List[str] = Field(default_factory=list)


class DatasetStats(BaseModel):
    city_id: str
    users: int
    pois: int
    checkins: int
    density_percent: float
    sequences: int
    train: int
    val: int
    test: int
