import json
import logging

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from checkin.entity import CityDataset, DaySequencePair
from evaluation.model import DEFAULT_KS, EvalReport, MetricRow
from network.entity import ModelState
from network.service import NetworkService
from shared.errors import DataError

logger = logging.getLogger(__name__)

PREDICT_BATCH = 256


@dataclass(frozen=True)
class MostPop:
    """Popularity baseline: every prefix gets the same training check-in counts as scores"""
    counts: np.ndarray
    
    def scores(self, pairs: Sequence[DaySequencePair]) -> np.ndarray:
        return np.broadcast_to(self.counts.astype(np.float64), (len(pairs), len(self.counts)))


class EvaluationService:
    
    @staticmethod
    def rank_of_truth(probs: Sequence[float], truth: int) -> int:
        """1 + rivals with higher probability + lower-indexed rivals with equal probability"""
        probs = np.asarray(probs)
        target = probs[truth]
        return int(1 + np.count_nonzero(probs > target) + np.count_nonzero(probs[:truth] == target))
    
    @staticmethod
    def ranks(scores: np.ndarray, truths: np.ndarray) -> np.ndarray:
        """rank_of_truth row by row, vectorized"""
        rows = np.arange(scores.shape[0])
        target = scores[rows, truths][:, None]
        lower = np.arange(scores.shape[1])[None, :] < truths[:, None]
        return 1 + (scores > target).sum(axis=1) + ((scores == target) & lower).sum(axis=1)
    
    @staticmethod
    def hit_ratio_at_k(ranks: Iterable[int], k: int) -> float:
        ranks = np.asarray(list(ranks))
        if ranks.size == 0:
            raise DataError("no ranks to aggregate")
        return float(np.mean(ranks <= k))
    
    @staticmethod
    def ndcg_at_k(ranks: Iterable[int], k: int) -> float:
        """single relevant item, so the ideal DCG is 1"""
        ranks = np.asarray(list(ranks))
        if ranks.size == 0:
            raise DataError("no ranks to aggregate")
        gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
        return float(np.mean(gains))
    
    @staticmethod
    def final_pois(pairs: Sequence[DaySequencePair]) -> np.ndarray:
        return np.array([pair.poi_seq[-1].poi_id for pair in pairs], dtype=np.int64)
    
    @staticmethod
    def model_scores(state: ModelState, pairs: Sequence[DaySequencePair]) -> np.ndarray:
        chunks = []
        for start in range(0, len(pairs), PREDICT_BATCH):
            probs = NetworkService.predict_next_poi(state, pairs[start:start + PREDICT_BATCH])
            chunks.append(probs.detach().cpu().numpy())
        return np.concatenate(chunks, axis=0)
    
    @staticmethod
    def report(
        ranks: np.ndarray,
        ks: Sequence[int] = DEFAULT_KS,
        variant: str = "full",
        config_fingerprint: str = "",
        seed: Optional[int] = None
    ) -> EvalReport:
        rows = [
            MetricRow(k=k, hr=EvaluationService.hit_ratio_at_k(ranks, k), ndcg=EvaluationService.ndcg_at_k(ranks, k))
            for k in sorted(set(ks))
        ]
        return EvalReport(variant=variant, examples=len(ranks), rows=rows, config_fingerprint=config_fingerprint, seed=seed)
    
    @staticmethod
    def evaluate(
        model: ModelState | MostPop,
        pairs: Sequence[DaySequencePair],
        ks: Sequence[int] = DEFAULT_KS,
        variant: str = "full",
        config_fingerprint: str = "",
        seed: Optional[int] = None
    ) -> EvalReport:
        """One prediction per sequence: its prefix scores every POI, the final POI is the truth"""
        if not pairs:
            raise DataError("cannot evaluate on an empty split")
        scores = model.scores(pairs) if isinstance(model, MostPop) else EvaluationService.model_scores(model, pairs)
        ranks = EvaluationService.ranks(scores, EvaluationService.final_pois(pairs))
        return EvaluationService.report(ranks, ks, variant, config_fingerprint, seed)
    
    @staticmethod
    def mostpop(city: CityDataset) -> MostPop:
        counts = np.zeros(city.num_pois, dtype=np.int64)
        for pair in city.train:
            for step in pair.poi_seq:
                counts[step.poi_id] += 1
        return MostPop(counts=counts)
    
    @staticmethod
    def mostpop_predict(counts: CityDataset | Sequence[int]) -> List[int]:
        """POI indices by descending training count, ties by index"""
        if isinstance(counts, CityDataset):
            counts = EvaluationService.mostpop(counts).counts
        counts = np.asarray(counts)
        return [int(i) for i in np.argsort(-counts, kind="stable")]
    
    @staticmethod
    def write_report(report: EvalReport, out_dir: Path, stem: str = "report") -> List[Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        csv_path = out_dir / f"{stem}.csv"
        json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2), encoding="utf-8")
        report.to_frame().to_csv(csv_path, index=False, float_format="%.12g")
        return [json_path, csv_path]
