import hashlib
import json
import logging

from datetime import date
from pathlib import Path
from typing import Dict, List

from checkin.entity import CategoryStep, CityDataset, DaySequencePair, PoiStep, Split, Vocabulary
from shared.errors import DataError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DATA_FILES = ("users.txt", "pois.txt", "poi_categories.txt", "sequences.tsv", "split.txt")


class DatasetStorage:
    """
    A CityDataset on disk:
      users.txt / pois.txt     one entity per line, line number = index
      poi_categories.txt       category index per POI line
      sequences.tsv            user, date, start timestamp, category steps (c:t), POI steps (p:d:t)
      split.txt                one split tag per sequence line
      manifest.json            city id, counts, fingerprint
    """
    
    @staticmethod
    def _files(dataset: CityDataset) -> Dict[str, bytes]:
        lines = []
        for seq in dataset.sequences:
            categories = " ".join(f"{s.category_id}:{s.time_slot}" for s in seq.category_seq)
            pois = " ".join(f"{s.poi_id}:{s.distance_bucket}:{s.time_slot}" for s in seq.poi_seq)
            lines.append(f"{seq.user_id}\t{seq.date.isoformat()}\t{seq.start_timestamp!r}\t{categories}\t{pois}\n")
        texts = {
            "users.txt": "".join(f"{u}\n" for u in dataset.user_vocab.tokens),
            "pois.txt": "".join(f"{p}\n" for p in dataset.poi_vocab.tokens),
            "poi_categories.txt": "".join(f"{c}\n" for c in dataset.poi_categories),
            "sequences.tsv": "".join(lines),
            "split.txt": "".join(f"{tag.value}\n" for tag in dataset.split),
        }
        return {name: texts[name].encode("utf-8") for name in DATA_FILES}
    
    @staticmethod
    def _digest(files: Dict[str, bytes]) -> str:
        digest = hashlib.sha256()
        for name in DATA_FILES:
            digest.update(name.encode())
            digest.update(files[name])
        return digest.hexdigest()
    
    @staticmethod
    def save(dataset: CityDataset, directory: Path | str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = DatasetStorage._files(dataset)
        for name, data in files.items():
            (directory / name).write_bytes(data)
        
        manifest = {
            "format_version": FORMAT_VERSION,
            "city_id": dataset.city_id,
            "num_checkins": dataset.num_checkins,
            "users": dataset.num_users,
            "pois": dataset.num_pois,
            "sequences": len(dataset.sequences),
            "fingerprint": DatasetStorage._digest(files),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        logger.info(f"Saved dataset {dataset.city_id} to {directory}")
        return directory
    
    @staticmethod
    def fingerprint(directory: Path | str) -> str:
        """sha256 over the data files (manifest excluded)"""
        directory = Path(directory)
        return DatasetStorage._digest({name: (directory / name).read_bytes() for name in DATA_FILES})
    
    @staticmethod
    def dataset_fingerprint(dataset: CityDataset) -> str:
        """The fingerprint `save` would give this dataset"""
        return DatasetStorage._digest(DatasetStorage._files(dataset))
    
    @staticmethod
    def load(directory: Path | str) -> CityDataset:
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise DataError(f"No dataset found at {directory}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{directory}: unsupported dataset format {manifest.get('format_version')}")
        
        def read_lines(name: str) -> List[str]:
            return (directory / name).read_text(encoding="utf-8").splitlines()
        
        sequences = []
        for row in read_lines("sequences.tsv"):
            user_id, day, start, categories, pois = row.split("\t")
            category_seq = []
            for token in categories.split():
                c, t = token.split(":")
                category_seq.append(CategoryStep(category_id=int(c), time_slot=int(t)))
            poi_seq = []
            for token in pois.split():
                p, d, t = token.split(":")
                poi_seq.append(PoiStep(poi_id=int(p), distance_bucket=int(d), time_slot=int(t)))
            sequences.append(DaySequencePair(
                user_id=user_id,
                date=date.fromisoformat(day),
                start_timestamp=float(start),
                category_seq=tuple(category_seq),
                poi_seq=tuple(poi_seq)
            ))
        
        return CityDataset(
            city_id=manifest["city_id"],
            user_vocab=Vocabulary(tokens=tuple(read_lines("users.txt"))),
            poi_vocab=Vocabulary(tokens=tuple(read_lines("pois.txt"))),
            poi_categories=tuple(int(c) for c in read_lines("poi_categories.txt")),
            sequences=tuple(sequences),
            split=tuple(Split(tag) for tag in read_lines("split.txt")),
            num_checkins=manifest["num_checkins"]
        )
