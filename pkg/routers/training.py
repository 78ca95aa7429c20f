import argparse
import logging

from pathlib import Path

from evaluation.model import Variant
from pipeline.service import PipelineService
from shared.manifest import ManifestService
from shared.router import CommandRouter, argument, load_config

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["Training"])

VARIANT_ARGUMENT = argument(
    "--variant", choices=[v.value for v in Variant if v != Variant.MOSTPOP], default=Variant.FULL.value
)


@router.command("meta-train", help="correlation-weighted meta-training of the category encoder", arguments=[VARIANT_ARGUMENT])
def meta_train(args: argparse.Namespace) -> int:
    config = load_config(args)
    variant = Variant(args.variant)
    datasets = PipelineService.load_datasets(config)
    out = Path(config.out_dir)
    _, gammas, _ = PipelineService.meta_stage(config, datasets, variant, out)
    ManifestService.write(out / "stages" / "meta", "meta-train", config.config_hash(), config.seed, {
        **PipelineService.manifest_extra(config, datasets, variant),
        "gammas": gammas,
    })
    for city_id, gamma in gammas.items():
        print(f"{city_id}\tgamma_cor={gamma:.6f}")
    return 0


@router.command("transfer", help="freeze leading layers, append fresh ones and fine-tune on the target", arguments=[VARIANT_ARGUMENT])
def transfer(args: argparse.Namespace) -> int:
    config = load_config(args)
    variant = Variant(args.variant)
    datasets = PipelineService.load_datasets(config)
    out = Path(config.out_dir)
    state = PipelineService.load_stage(out, "meta")
    PipelineService.transfer_stage(config, datasets, state, variant, out)
    ManifestService.write(out / "stages" / "transfer", "transfer", config.config_hash(), config.seed, {"variant": variant.value})
    return 0


@router.command("train", help="train the target city's next-POI model", arguments=[VARIANT_ARGUMENT])
def train(args: argparse.Namespace) -> int:
    config = load_config(args)
    variant = Variant(args.variant)
    datasets = PipelineService.load_datasets(config)
    out = Path(config.out_dir)
    if variant == Variant.WITHOUT_CAT:
        state = None
    else:
        state = PipelineService.load_stage(out, "transfer" if variant.uses_freezing else "meta")
    PipelineService.train_stage(config, datasets, state, variant, out)
    ManifestService.write(out / "stages" / "train", "train", config.config_hash(), config.seed, {"variant": variant.value})
    return 0


@router.command("pipeline", help="meta-train, transfer, train and evaluate with resumable stages", arguments=[VARIANT_ARGUMENT])
def pipeline(args: argparse.Namespace) -> int:
    config = load_config(args)
    datasets = PipelineService.load_datasets(config)
    result = PipelineService.run(config, datasets, Variant(args.variant), Path(config.out_dir))
    print(result.report.to_frame().to_string(index=False))
    return 0
