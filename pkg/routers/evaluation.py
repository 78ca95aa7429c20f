import argparse
import logging

from pathlib import Path

from evaluation.experiment import ExperimentService, SweepParam
from evaluation.model import Variant
from pipeline.service import PipelineService
from shared.manifest import ManifestService
from shared.router import CommandRouter, argument, load_config

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["Evaluation"])


@router.command("eval", help="evaluate the trained target model (or MostPop) on the test split", arguments=[
    argument("--mostpop", action="store_true", help="evaluate the popularity baseline instead"),
])
def evaluate(args: argparse.Namespace) -> int:
    config = load_config(args)
    datasets = PipelineService.load_datasets(config)
    out = Path(config.out_dir)
    if args.mostpop:
        state, variant = None, Variant.MOSTPOP
    else:
        state, variant = PipelineService.load_stage(out, "train"), PipelineService.stage_variant(out, "train")
    report = PipelineService.evaluate(config, datasets, state, variant, out / "eval")
    ManifestService.write(out / "eval", "eval", config.config_hash(), config.seed, {"variant": variant.value})
    print(report.to_frame().to_string(index=False))
    return 0


@router.command("ablate", help="run every ablation variant plus MostPop", arguments=[
    argument("--variants", nargs="+", choices=[v.value for v in Variant], help="subset of variants"),
])
def ablate(args: argparse.Namespace) -> int:
    config = load_config(args)
    datasets = PipelineService.load_datasets(config)
    variants = [Variant(v) for v in args.variants] if args.variants else list(Variant)
    out = Path(config.out_dir) / "ablation"
    reports = ExperimentService.run_ablations(config, datasets, variants, out)
    ManifestService.write(out, "ablate", config.config_hash(), config.seed, {"variants": [v.value for v in variants]})
    print(ExperimentService.collate(reports).to_string(index=False))
    return 0


@router.command("sweep", help="sensitivity sweep over local-update steps or frozen layers", arguments=[
    argument("param", choices=[p.value for p in SweepParam]),
    argument("--values", nargs="+", type=int, help="defaults: local_steps 1..5, frozen_layers 1..4"),
])
def sweep(args: argparse.Namespace) -> int:
    config = load_config(args)
    datasets = PipelineService.load_datasets(config)
    param = SweepParam(args.param)
    out = Path(config.out_dir) / "sweep"
    rows = ExperimentService.sensitivity_sweep(param, config, datasets, args.values, out)
    ManifestService.write(out, f"sweep-{param.value}", config.config_hash(), config.seed)
    print(ExperimentService.sweep_frame(rows).to_string(index=False))
    return 0


@router.command("transfer-experiment", help="synthetic three-city check: full vs w/o-cor vs MostPop over seeds", arguments=[
    argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4]),
    argument("--target-users", dest="target_users", type=int, default=50),
])
def transfer_experiment(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = Path(config.out_dir) / "transfer_experiment"
    frame = ExperimentService.transfer_experiment(config, args.seeds, out, args.target_users)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "runs.csv", index=False, float_format="%.12g")
    summary = ExperimentService.summarize(frame)
    summary.to_csv(out / "summary.csv", index=False, float_format="%.12g")
    ManifestService.write(out, "transfer-experiment", config.config_hash(), config.seed, {"seeds": list(args.seeds)})
    print(summary.to_string(index=False))
    return 0
