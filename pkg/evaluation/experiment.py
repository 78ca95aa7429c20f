import logging
import time

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from checkin.entity import CityDataset, Split
from checkin.service import CheckinService
from config.settings import RunConfig
from correlation.service import CorrelationService
from evaluation.model import EvalReport, Variant
from pipeline.service import PipelineService
from shared.errors import ConfigError
from synthetic.service import SyntheticService

logger = logging.getLogger(__name__)


class SweepParam(str, Enum):
    LOCAL_STEPS = "local_steps"
    FROZEN_LAYERS = "frozen_layers"
    
    @property
    def default_values(self) -> List[int]:
        return [1, 2, 3, 4, 5] if self == SweepParam.LOCAL_STEPS else [1, 2, 3, 4]
    
    @property
    def flag(self) -> str:
        return "local_steps" if self == SweepParam.LOCAL_STEPS else "l"


@dataclass
class SweepRow:
    param: str
    value: int
    report: EvalReport
    seconds: float


class ExperimentService:
    
    @staticmethod
    def run_ablation(
        variant: Variant,
        config: RunConfig,
        datasets: Sequence[CityDataset],
        out_dir: Optional[Path] = None
    ) -> EvalReport:
        return PipelineService.run(config, datasets, variant, out_dir).report
    
    @staticmethod
    def run_ablations(
        config: RunConfig,
        datasets: Sequence[CityDataset],
        variants: Sequence[Variant] = tuple(Variant),
        out_dir: Optional[Path] = None
    ) -> List[EvalReport]:
        """Every variant under the same seed; MostPop rides along as a reference row"""
        reports = []
        for variant in variants:
            variant_dir = None if out_dir is None else out_dir / variant.value.replace("/", "_")
            reports.append(ExperimentService.run_ablation(variant, config, datasets, variant_dir))
        if out_dir is not None:
            ExperimentService.collate(reports).to_csv(out_dir / "ablation.csv", index=False, float_format="%.12g")
        return reports
    
    @staticmethod
    def collate(reports: Sequence[EvalReport]) -> pd.DataFrame:
        return pd.concat([r.to_frame() for r in reports], ignore_index=True)
    
    @staticmethod
    def sensitivity_sweep(
        param: SweepParam,
        config: RunConfig,
        datasets: Sequence[CityDataset],
        values: Optional[Sequence[int]] = None,
        out_dir: Optional[Path] = None
    ) -> List[SweepRow]:
        """One full pipeline run per value under the shared seed, timed"""
        values = list(values) if values is not None else param.default_values
        if not values:
            raise ConfigError(f"empty value list for {param.value} sweep")
        rows = []
        for value in values:
            run_config = config.with_overrides(**{param.flag: value})
            started = time.perf_counter()
            report = PipelineService.run(run_config, datasets, Variant.FULL).report
            seconds = time.perf_counter() - started
            logger.info(f"{param.value}={value}: HR@{report.ks[0]}={report.rows[0].hr:.4f} in {seconds:.1f}s")
            rows.append(SweepRow(param=param.value, value=value, report=report, seconds=seconds))
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            ExperimentService.sweep_frame(rows).to_csv(out_dir / f"sweep_{param.value}.csv", index=False, float_format="%.12g")
        return rows
    
    @staticmethod
    def sweep_frame(rows: Sequence[SweepRow]) -> pd.DataFrame:
        """Long format: param, param_value, K, metric, value, seed, seconds"""
        frames = []
        for row in rows:
            frame = row.report.to_frame().drop(columns=["variant"])
            frame.insert(0, "param_value", row.value)
            frame.insert(0, "param", row.param)
            frame["seconds"] = row.seconds
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)
    
    @staticmethod
    def transfer_experiment(
        config: RunConfig,
        seeds: Sequence[int],
        workdir: Path,
        target_users: int = 50
    ) -> pd.DataFrame:
        """
        Per seed: generate T, A (shares T's chain) and B (independent chain),
        ingest them, and evaluate full vs w/o-cor vs MostPop on T.
        One row per (seed, variant) with gamma(A,T), gamma(B,T), HR and NDCG.
        """
        rows = []
        for seed in seeds:
            spec = SyntheticService.three_city_spec(seed, target_users=target_users)
            paths = SyntheticService.write(spec, workdir / f"seed{seed}" / "raw")
            datasets = []
            for city_id, path in paths.items():
                parsed = CheckinService.parse_checkins(path)
                datasets.append(CheckinService.build_city_dataset(
                    city_id, parsed.records, config.data.min_user, config.data.min_poi, config.data.ratios
                ))
            run_config = config.model_copy(update={"cities": {}}).with_overrides(seed=seed, target="T")
            target = CorrelationService.transition_distribution(PipelineService.find(datasets, "T"), Split.TRAIN)
            gammas: Dict[str, float] = {
                city_id: CorrelationService.correlation_weight(
                    CorrelationService.transition_distribution(PipelineService.find(datasets, city_id), Split.TRAIN),
                    target,
                    run_config.meta.gamma_floor
                )
                for city_id in ("A", "B")
            }
            for variant in (Variant.FULL, Variant.WITHOUT_COR, Variant.MOSTPOP):
                report = PipelineService.run(run_config, datasets, variant).report
                row = {"seed": seed, "variant": variant.value, "gamma_A": gammas["A"], "gamma_B": gammas["B"]}
                for metric in report.rows:
                    row[f"HR@{metric.k}"] = metric.hr
                    row[f"NDCG@{metric.k}"] = metric.ndcg
                rows.append(row)
            logger.info(f"seed {seed}: gamma(A,T)={gammas['A']:.3f} gamma(B,T)={gammas['B']:.3f}")
        return pd.DataFrame(rows)
    
    @staticmethod
    def summarize(frame: pd.DataFrame) -> pd.DataFrame:
        """Mean of every metric column per variant"""
        metrics = [c for c in frame.columns if c not in ("seed", "variant")]
        return frame.groupby("variant", sort=False)[metrics].mean().reset_index()
