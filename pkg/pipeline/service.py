import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from checkin.entity import CityDataset
from checkin.model import DatasetStats
from checkin.service import CheckinService
from checkin.storage import DatasetStorage
from config.settings import RunConfig
from correlation.entity import CorrelationMode
from correlation.service import CorrelationService
from evaluation.model import EvalReport, Variant
from evaluation.service import EvaluationService
from meta.service import MetaLearner
from meta.transfer import TransferService
from network.checkpoint import CheckpointService
from network.entity import ModelState
from shared.charts import ChartService
from shared.errors import ConfigError, DataError, ModelShapeError
from shared.manifest import ManifestService

logger = logging.getLogger(__name__)

# stage seeds, as offsets of the run seed
FREEZE_SEED, FINETUNE_SEED, TARGET_SEED = 1, 2, 3


@dataclass
class PipelineResult:
    report: Optional[EvalReport] = None
    state: Optional[ModelState] = None
    gammas: Dict[str, float] = field(default_factory=dict)
    frozen_hashes: Dict[str, Dict[str, str]] = field(default_factory=dict)
    resumed: List[str] = field(default_factory=list)


class PipelineService:
    
    # --- data ----------------------------------------------------------------
    
    @staticmethod
    def dataset_dir(config: RunConfig, city_id: str) -> Path:
        return Path(config.out_dir) / "datasets" / city_id
    
    @staticmethod
    def ingest(config: RunConfig) -> List[DatasetStats]:
        """parse -> filter -> sequences -> split for every city; writes datasets and stats.csv"""
        if not config.cities:
            raise ConfigError("No cities configured")
        stats = []
        for city_id, city in config.cities.items():
            if not city.path or not Path(city.path).is_file():
                raise DataError(f"{city_id}: check-in file not found: {city.path}")
            parsed = CheckinService.parse_checkins(city.path, city.check_in_schema)
            dataset = CheckinService.build_city_dataset(
                city_id, parsed.records, config.data.min_user, config.data.min_poi, config.data.ratios
            )
            DatasetStorage.save(dataset, PipelineService.dataset_dir(config, city_id))
            stats.append(CheckinService.dataset_stats(dataset))
        out = Path(config.out_dir)
        pd.DataFrame([s.model_dump() for s in stats]).to_csv(out / "stats.csv", index=False, float_format="%.6g")
        ManifestService.write(out, "ingest", config.config_hash(), config.seed, {
            "fingerprints": {s.city_id: DatasetStorage.fingerprint(PipelineService.dataset_dir(config, s.city_id)) for s in stats}
        })
        return stats
    
    @staticmethod
    def load_datasets(config: RunConfig) -> List[CityDataset]:
        if not config.cities:
            raise ConfigError("No cities configured")
        datasets = []
        for city_id in config.city_ids:
            directory = PipelineService.dataset_dir(config, city_id)
            if not directory.is_dir():
                raise DataError(f"{city_id}: dataset missing at {directory}; run `ingest` first")
            datasets.append(DatasetStorage.load(directory))
        return datasets
    
    @staticmethod
    def find(datasets: Sequence[CityDataset], city_id: str) -> CityDataset:
        for dataset in datasets:
            if dataset.city_id == city_id:
                return dataset
        raise ConfigError(f"Target city {city_id!r} has no dataset")
    
    # --- analysis ------------------------------------------------------------
    
    @staticmethod
    def analyze(config: RunConfig, datasets: Sequence[CityDataset]) -> List[Path]:
        """Category distributions, both correlation matrices and the extreme pairs' top-10 transitions, over every split"""
        out = Path(config.out_dir) / "analysis"
        out.mkdir(parents=True, exist_ok=True)
        written = []
        distributions = [CorrelationService.poi_category_distribution(d) for d in datasets]
        written.append(CorrelationService.write_category_distributions(distributions, out / "category_distribution.csv"))
        
        for mode in CorrelationMode:
            matrix = CorrelationService.correlation_matrix(datasets, mode, split=None)
            stem = mode.value.replace("-", "_")
            written.extend(CorrelationService.write_matrix(matrix, out, stem))
            if config.plot:
                written.append(ChartService.heatmap(matrix, out / f"{stem}.png"))
            if mode == CorrelationMode.BEHAVIORAL and len(datasets) > 1:
                most, least = matrix.extreme_pairs()
                for label, pair in (("most", most), ("least", least)):
                    for city_id in pair:
                        rows = CorrelationService.top_transitions(PipelineService.find(datasets, city_id), split=None)
                        written.append(CorrelationService.write_top_transitions(rows, out / f"top10_{label}_{city_id}.csv"))
        if config.plot:
            written.append(ChartService.category_bars(distributions, out / "category_distribution.png"))
        ManifestService.write(out, "analyze", config.config_hash(), config.seed)
        return [p for p in written if p is not None]
    
    @staticmethod
    def manifest_extra(config: RunConfig, datasets: Sequence[CityDataset], variant: Variant) -> Dict[str, Any]:
        """Full meta and freeze settings plus the dataset fingerprints"""
        return {
            "variant": variant.value,
            "meta": config.meta_config(use_correlation=variant.uses_correlation).model_dump(mode="json"),
            "freeze": config.freeze.model_dump(mode="json"),
            "fingerprints": {d.city_id: DatasetStorage.dataset_fingerprint(d) for d in datasets},
        }
    
    # --- staged run ----------------------------------------------------------
    
    @staticmethod
    def _stage(out_dir: Optional[Path], name: str) -> Optional[Path]:
        return None if out_dir is None else out_dir / "stages" / name
    
    @staticmethod
    def _resume(directory: Optional[Path], config_hash: str, variant: Variant) -> Optional[ModelState]:
        if directory is None or not CheckpointService.exists(directory):
            return None
        extra = CheckpointService.read_manifest(directory).get("extra", {})
        if extra.get("code_version") != ManifestService.code_version():
            logger.warning(f"{directory}: written by version {extra.get('code_version')}, recomputing")
            return None
        if extra.get("config_hash") != config_hash or extra.get("variant") != variant.value:
            logger.info(f"{directory}: config changed, recomputing")
            return None
        logger.info(f"Resuming from {directory}")
        return CheckpointService.load(directory)
    
    @staticmethod
    def _save(state: ModelState, directory: Optional[Path], config_hash: str, variant: Variant, **extra) -> None:
        if directory is None:
            return
        CheckpointService.save(state, directory, {
            "config_hash": config_hash,
            "code_version": ManifestService.code_version(),
            "variant": variant.value,
            "frozen_hashes": state.frozen_hashes(),
            **extra,
        })
    
    @staticmethod
    def check_frozen(before: Dict[str, str], state: ModelState, stage: str) -> None:
        changed = [name for name, digest in before.items() if name in state.params and state.tensor_hash(name) != digest]
        if changed:
            raise ModelShapeError(f"frozen groups changed during {stage}: {changed}")
    
    @staticmethod
    def load_stage(out_dir: Path, name: str) -> ModelState:
        directory = out_dir / "stages" / name
        if not CheckpointService.exists(directory):
            raise DataError(f"No {name} checkpoint at {directory}; run the earlier stage first")
        extra = CheckpointService.read_manifest(directory).get("extra", {})
        if extra.get("code_version") != ManifestService.code_version():
            raise DataError(f"{directory} was written by version {extra.get('code_version')}")
        return CheckpointService.load(directory)
    
    @staticmethod
    def stage_variant(out_dir: Path, name: str) -> Variant:
        """The variant a stage checkpoint was produced under"""
        directory = out_dir / "stages" / name
        if not CheckpointService.exists(directory):
            raise DataError(f"No {name} checkpoint at {directory}; run the earlier stage first")
        return Variant(CheckpointService.read_manifest(directory).get("extra", {}).get("variant", Variant.FULL.value))
    
    @staticmethod
    def meta_stage(
        config: RunConfig,
        datasets: Sequence[CityDataset],
        variant: Variant = Variant.FULL,
        out_dir: Optional[Path] = None
    ) -> Tuple[ModelState, Dict[str, float], bool]:
        target_id = config.require_target()
        meta_dir = PipelineService._stage(out_dir, "meta")
        meta_config = config.meta_config(use_correlation=variant.uses_correlation)
        gammas = MetaLearner.gamma_table(datasets, target_id, meta_config)
        resumed = PipelineService._resume(meta_dir, config.config_hash(), variant)
        if resumed is not None:
            return resumed, gammas, True
        meta = MetaLearner.meta_train(datasets, target_id, meta_config, shape=config.shape())
        PipelineService._save(meta.state, meta_dir, config.config_hash(), variant,
                              gammas=meta.gammas, resampled_cities=meta.resampled_cities)
        if meta_dir is not None:
            MetaLearner.write_trace(meta, meta_dir / "loss_trace.csv")
            MetaLearner.write_gammas(meta.gammas, meta_dir / "gammas.csv")
        return meta.state, meta.gammas, False
    
    @staticmethod
    def transfer_stage(
        config: RunConfig,
        datasets: Sequence[CityDataset],
        state: ModelState,
        variant: Variant = Variant.FULL,
        out_dir: Optional[Path] = None
    ) -> Tuple[ModelState, bool]:
        """freeze_and_extend then fine_tune on the target city"""
        transfer_dir = PipelineService._stage(out_dir, "transfer")
        resumed = PipelineService._resume(transfer_dir, config.config_hash(), variant)
        if resumed is not None:
            return resumed, True
        target = PipelineService.find(datasets, config.require_target())
        extended = TransferService.freeze_and_extend(state, config.freeze, config.seed + FREEZE_SEED)
        hashes = extended.frozen_hashes()
        tuned = TransferService.fine_tune(extended, target, config.freeze, config.seed + FINETUNE_SEED)
        PipelineService.check_frozen(hashes, tuned, "fine-tuning")
        PipelineService._save(tuned, transfer_dir, config.config_hash(), variant)
        return tuned, False
    
    @staticmethod
    def train_stage(
        config: RunConfig,
        datasets: Sequence[CityDataset],
        state: Optional[ModelState],
        variant: Variant = Variant.FULL,
        out_dir: Optional[Path] = None
    ) -> Tuple[ModelState, bool]:
        """Target next-POI training; no category state means a POI-only model"""
        train_dir = PipelineService._stage(out_dir, "train")
        resumed = PipelineService._resume(train_dir, config.config_hash(), variant)
        if resumed is not None:
            final = resumed
        else:
            target = PipelineService.find(datasets, config.require_target())
            trained = TransferService.train_target_model(
                state, target, config.train, config.shape(), config.seed + TARGET_SEED
            )
            final = trained.state
            PipelineService._save(final, train_dir, config.config_hash(), variant, best_epoch=trained.best_epoch)
        if state is not None:
            # the whole category channel is frozen while the POI channel trains
            PipelineService.check_frozen({n: state.tensor_hash(n) for n in state.names}, final, "target training")
        return final, resumed is not None
    
    @staticmethod
    def evaluate(
        config: RunConfig,
        datasets: Sequence[CityDataset],
        state: Optional[ModelState],
        variant: Variant = Variant.FULL,
        out_dir: Optional[Path] = None
    ) -> EvalReport:
        """Test-split report; a missing state means the MostPop baseline"""
        target = PipelineService.find(datasets, config.require_target())
        model = EvaluationService.mostpop(target) if state is None else state
        report = EvaluationService.evaluate(model, target.test, config.eval.ks, variant.value, config.config_hash(), config.seed)
        if out_dir is not None:
            EvaluationService.write_report(report, out_dir)
        logger.info(f"{variant.value}: " + ", ".join(
            f"HR@{r.k}={r.hr:.4f} NDCG@{r.k}={r.ndcg:.4f}" for r in report.rows
        ))
        return report
    
    @staticmethod
    def run(
        config: RunConfig,
        datasets: Sequence[CityDataset],
        variant: Variant = Variant.FULL,
        out_dir: Optional[Path] = None
    ) -> PipelineResult:
        """
        meta_train -> freeze_and_extend -> fine_tune -> train_target_model -> evaluate.
        With an out_dir every stage is checkpointed and a re-run resumes from
        the stages whose checkpoints match the config and code version.
        """
        config.require_target()
        result = PipelineResult()
        if variant == Variant.MOSTPOP:
            result.report = PipelineService.evaluate(config, datasets, None, variant, out_dir)
            return result
        
        category_state: Optional[ModelState] = None
        if variant != Variant.WITHOUT_CAT:
            category_state, result.gammas, resumed = PipelineService.meta_stage(config, datasets, variant, out_dir)
            if resumed:
                result.resumed.append("meta")
            if variant.uses_freezing:
                category_state, resumed = PipelineService.transfer_stage(config, datasets, category_state, variant, out_dir)
                if resumed:
                    result.resumed.append("transfer")
            result.frozen_hashes["transfer"] = category_state.frozen_hashes()
        
        final, resumed = PipelineService.train_stage(config, datasets, category_state, variant, out_dir)
        if resumed:
            result.resumed.append("train")
        result.frozen_hashes["train"] = final.frozen_hashes()
        result.state = final
        result.report = PipelineService.evaluate(config, datasets, final, variant, out_dir)
        if out_dir is not None:
            ManifestService.write(out_dir, "pipeline", config.config_hash(), config.seed, {
                **PipelineService.manifest_extra(config, datasets, variant),
                "gammas": result.gammas,
                "resumed": result.resumed,
            })
        return result
