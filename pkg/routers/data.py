import argparse
import logging

from pathlib import Path

import pandas as pd

from pipeline.service import PipelineService
from shared.errors import ConfigError
from shared.manifest import ManifestService
from shared.router import CommandRouter, argument, load_config
from synthetic.service import SyntheticService

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["Data"])


@router.command("ingest", help="parse, filter, sequence and split every configured city")
def ingest(args: argparse.Namespace) -> int:
    config = load_config(args)
    stats = PipelineService.ingest(config)
    frame = pd.DataFrame([s.model_dump() for s in stats])
    print(frame.to_string(index=False))
    return 0


@router.command("analyze", help="category distributions, correlation matrices, top-10 transitions")
def analyze(args: argparse.Namespace) -> int:
    config = load_config(args)
    datasets = PipelineService.load_datasets(config)
    for path in PipelineService.analyze(config, datasets):
        logger.info(f"wrote {path}")
    return 0


@router.command("synth", help="generate synthetic check-in files", arguments=[
    argument("--three-city", dest="three_city", action="store_true", help="target/correlated/uncorrelated preset"),
])
def synth(args: argparse.Namespace) -> int:
    config = load_config(args)
    if args.three_city:
        spec = SyntheticService.three_city_spec(config.seed)
    elif config.synthetic is not None:
        spec = config.synthetic
    else:
        raise ConfigError("No [synthetic] section in the config; pass --three-city for the preset")
    out = Path(config.out_dir) / "raw"
    paths = SyntheticService.write(spec, out)
    ManifestService.write(out, "synth", config.config_hash(), spec.seed, {"files": {k: str(v) for k, v in paths.items()}})
    for city_id, path in paths.items():
        print(f"{city_id}\t{path}")
    return 0
