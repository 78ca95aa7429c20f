import json

import numpy as np
import pytest

from checkin.storage import DatasetStorage
from config.settings import RunConfig
from correlation.entity import CorrelationMode
from correlation.service import CorrelationService
from evaluation.experiment import ExperimentService, SweepParam
from evaluation.model import Variant
from main import main
from meta.service import MetaLearner
from meta.transfer import TransferService
from network.checkpoint import CheckpointService
from network.service import NetworkService
from pipeline.service import FREEZE_SEED, PipelineService
from shared.errors import ModelShapeError, NumericalError
from shared.manifest import ManifestService

CLI_CONFIG = """
target = "T"
seed = 1

[cities.T]
path = "run/raw/T.csv"

[cities.A]
path = "run/raw/A.csv"

[cities.B]
path = "run/raw/B.csv"

[model]
embed_dim = 3
hidden_dim = 4
cat_layers = 2

[meta]
iterations = 2
N = 3

[freeze]
l = 2
n = 1
finetune_epochs = 1
batch_size = 32

[train]
epochs = 1
batch_size = 32

[synthetic]
seed = 5
cities = [
    { city_id = "T", users = 8, days_per_user = 8, pois_per_category = 2, transition_seed = 1 },
    { city_id = "A", users = 8, days_per_user = 8, pois_per_category = 2, transition_seed = 1 },
    { city_id = "B", users = 8, days_per_user = 8, pois_per_category = 2, transition_seed = 2 },
]
"""


def group_hashes(directory):
    return {name: group["sha256"] for name, group in CheckpointService.read_manifest(directory)["groups"].items()}


def state_hashes(state):
    return {name: state.tensor_hash(name) for name in state.names}


def cli_args(config_path, out="run"):
    return ["--config", str(config_path), "--out", str(config_path.parent / out)]


@pytest.fixture
def cli_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CLI_CONFIG, encoding="utf-8")
    return path


class TestPipelineRun:
    
    def test_full_run(self, tiny_run_config, tiny_cities, tmp_path):
        out = tmp_path / "full"
        result = PipelineService.run(tiny_run_config, tiny_cities, Variant.FULL, out)
        assert result.report.ks == [5, 10]
        assert result.report.examples == len(tiny_cities[0].test)
        assert result.gammas["T"] == 1.0
        assert result.gammas["A"] > result.gammas["B"]
        # everything frozen after transfer is still bit-identical after target training
        transfer, train = result.frozen_hashes["transfer"], result.frozen_hashes["train"]
        assert transfer and all(train[name] == digest for name, digest in transfer.items())
        assert all(name in result.state.frozen for name in result.state.category_names)
        for stage in ("meta", "transfer", "train"):
            assert CheckpointService.exists(out / "stages" / stage)
        assert (out / "report.json").is_file()
        assert (out / "stages" / "meta" / "loss_trace.csv").is_file()
        assert ManifestService.read(out, "pipeline").extra["variant"] == "full"
    
    def test_frozen_groups_survive_every_stage(self, tiny_run_config, tiny_cities):
        config = tiny_run_config.model_copy(update={
            "meta": tiny_run_config.meta.model_copy(update={"iterations": 50}),
            "freeze": tiny_run_config.freeze.model_copy(update={"l": 3, "finetune_epochs": 3}),
            "train": tiny_run_config.train.model_copy(update={"epochs": 3}),
        })
        meta_state, _, _ = PipelineService.meta_stage(config, tiny_cities)
        extended = TransferService.freeze_and_extend(meta_state, config.freeze, config.seed + FREEZE_SEED)
        frozen = extended.frozen_hashes()
        assert len(frozen) > 0
        # the transfer stage recomputes the same extension from the same seed
        tuned, _ = PipelineService.transfer_stage(config, tiny_cities, meta_state)
        assert tuned.frozen_hashes() == frozen
        final, _ = PipelineService.train_stage(config, tiny_cities, tuned)
        assert {name: final.tensor_hash(name) for name in frozen} == frozen
        assert {name: final.tensor_hash(name) for name in tuned.names} == state_hashes(tuned)
    
    def test_run_manifest_records_settings_and_fingerprints(self, tiny_run_config, tiny_cities, tmp_path):
        out = tmp_path / "manifest"
        PipelineService.run(tiny_run_config, tiny_cities, Variant.FULL, out)
        extra = ManifestService.read(out, "pipeline").extra
        assert extra["meta"]["iterations"] == tiny_run_config.meta.iterations
        assert extra["meta"]["seed"] == tiny_run_config.seed
        assert extra["freeze"] == tiny_run_config.freeze.model_dump(mode="json")
        assert set(extra["gammas"]) == {"T", "A", "B"}
        assert extra["fingerprints"] == {city.city_id: DatasetStorage.dataset_fingerprint(city) for city in tiny_cities}
        # the checkpoint manifests next to the stages stay readable
        assert CheckpointService.read_manifest(out / "stages" / "meta")["extra"]["variant"] == "full"
    
    def test_resume_reproduces_report(self, tiny_run_config, tiny_cities, tmp_path):
        out = tmp_path / "resume"
        first = PipelineService.run(tiny_run_config, tiny_cities, Variant.FULL, out)
        second = PipelineService.run(tiny_run_config, tiny_cities, Variant.FULL, out)
        assert first.resumed == []
        assert second.resumed == ["meta", "transfer", "train"]
        assert second.report == first.report
        assert state_hashes(second.state) == state_hashes(first.state)
    
    def test_changed_config_recomputes(self, tiny_run_config, tiny_cities, tmp_path):
        out = tmp_path / "changed"
        PipelineService.run(tiny_run_config, tiny_cities, Variant.FULL, out)
        changed = tiny_run_config.with_overrides(seed=4)
        assert PipelineService.run(changed, tiny_cities, Variant.FULL, out).resumed == []
    
    def test_deterministic_across_directories(self, tiny_run_config, tiny_cities, tmp_path):
        PipelineService.run(tiny_run_config, tiny_cities, Variant.FULL, tmp_path / "one")
        PipelineService.run(tiny_run_config, tiny_cities, Variant.FULL, tmp_path / "two")
        for stage in ("meta", "transfer", "train"):
            assert group_hashes(tmp_path / "one" / "stages" / stage) == group_hashes(tmp_path / "two" / "stages" / stage)
    
    def test_without_correlation_matches_unweighted_run(self, tiny_run_config, tiny_cities):
        ablation = PipelineService.run(tiny_run_config, tiny_cities, Variant.WITHOUT_COR)
        unweighted = tiny_run_config.model_copy(update={
            "meta": tiny_run_config.meta.model_copy(update={"use_correlation": False})
        })
        plain = PipelineService.run(unweighted, tiny_cities, Variant.FULL)
        assert set(ablation.gammas.values()) == {1.0}
        assert state_hashes(ablation.state) == state_hashes(plain.state)
        assert ablation.report.rows == plain.report.rows
    
    def test_without_freezing_skips_transfer(self, tiny_run_config, tiny_cities, tmp_path):
        out = tmp_path / "nofrz"
        result = PipelineService.run(tiny_run_config, tiny_cities, Variant.WITHOUT_FRZ, out)
        assert not (out / "stages" / "transfer").exists()
        assert result.state.shape.cat_layers == tiny_run_config.model.cat_layers
    
    def test_without_category_channel(self, tiny_run_config, tiny_cities, tmp_path):
        out = tmp_path / "nocat"
        result = PipelineService.run(tiny_run_config, tiny_cities, Variant.WITHOUT_CAT, out)
        assert result.state.category_names == []
        assert not result.state.shape.with_category
        assert ManifestService.read(out, "pipeline").extra["variant"] == "w/o-cat"
        assert result.report.variant == "w/o-cat"
    
    def test_mostpop(self, tiny_run_config, tiny_cities):
        result = PipelineService.run(tiny_run_config, tiny_cities, Variant.MOSTPOP)
        assert result.state is None
        assert result.report.variant == "mostpop"
        assert 0.0 <= result.report.hit_ratio(5) <= result.report.hit_ratio(10) <= 1.0
    
    def test_check_frozen(self, tiny_shape):
        state = NetworkService.init_model(tiny_shape, seed=0)
        before = state_hashes(state)
        name = state.names[0]
        moved = state.replace(params={**state.params, name: state.params[name] + 1.0})
        with pytest.raises(ModelShapeError):
            PipelineService.check_frozen(before, moved, "test")


class TestExperiments:
    
    def test_ablations(self, tiny_run_config, tiny_cities, tmp_path):
        variants = [Variant.WITHOUT_COR_FRZ, Variant.MOSTPOP]
        reports = ExperimentService.run_ablations(tiny_run_config, tiny_cities, variants, tmp_path / "ablation")
        assert [r.variant for r in reports] == ["w/o-cor-frz", "mostpop"]
        assert (tmp_path / "ablation" / "ablation.csv").is_file()
        assert (tmp_path / "ablation" / "w_o-cor-frz" / "report.json").is_file()
        assert len(ExperimentService.collate(reports)) == 8
    
    def test_sweep_one_report_per_value(self, tiny_run_config, tiny_cities, tmp_path):
        rows = ExperimentService.sensitivity_sweep(SweepParam.FROZEN_LAYERS, tiny_run_config, tiny_cities, [1, 2], tmp_path)
        assert [row.value for row in rows] == [1, 2]
        assert all(row.seconds >= 0 for row in rows)
        frame = ExperimentService.sweep_frame(rows)
        assert list(frame.columns) == ["param", "param_value", "K", "metric", "value", "seed", "seconds"]
        assert (tmp_path / "sweep_frozen_layers.csv").is_file()
    
    def test_sweep_local_steps(self, tiny_run_config, tiny_cities):
        rows = ExperimentService.sensitivity_sweep(SweepParam.LOCAL_STEPS, tiny_run_config, tiny_cities, [2])
        assert rows[0].report.examples == len(tiny_cities[0].test)
    
    @pytest.mark.slow
    def test_transfer_experiment(self, tmp_path):
        config = RunConfig.build({
            "model": {"embed_dim": 16, "hidden_dim": 32, "cat_layers": 3},
            "meta": {"alpha": 0.05, "beta": 0.01, "N": 16, "iterations": 100},
            "freeze": {"finetune_epochs": 3},
            "train": {"epochs": 10, "lr": 0.005},
        })
        frame = ExperimentService.transfer_experiment(config, [0, 1, 2, 3, 4], tmp_path)
        assert (frame["gamma_A"] > frame["gamma_B"] + 0.2).all()
        means = ExperimentService.summarize(frame).set_index("variant")["HR@5"]
        assert means["full"] >= means["w/o-cor"]
        assert min(means["full"], means["w/o-cor"]) >= means["mostpop"]


class TestIngest:
    
    def test_ingest_is_idempotent(self, cli_config):
        assert main(["synth", *cli_args(cli_config)]) == 0
        config = RunConfig.load(cli_config).with_overrides(out=str(cli_config.parent / "run"))
        first = PipelineService.ingest(config)
        fingerprints = ManifestService.read(config.out_dir, "ingest").extra["fingerprints"]
        second = PipelineService.ingest(config)
        assert first == second
        assert ManifestService.read(config.out_dir, "ingest").extra["fingerprints"] == fingerprints
        assert fingerprints["T"] == DatasetStorage.fingerprint(PipelineService.dataset_dir(config, "T"))


class TestCommandLine:
    
    def test_end_to_end(self, cli_config):
        args = cli_args(cli_config)
        out = cli_config.parent / "run"
        assert main(["synth", *args]) == 0
        assert main(["ingest", *args]) == 0
        assert (out / "stats.csv").is_file()
        assert main(["analyze", *args]) == 0
        assert (out / "analysis" / "behavioral_transition.csv").is_file()
        assert (out / "analysis" / "poi_distribution.json").is_file()
        assert main(["pipeline", *args]) == 0
        report = json.loads((out / "report.json").read_text())
        assert [row["k"] for row in report["rows"]] == [5, 10]
        assert main(["eval", *args, "--mostpop"]) == 0
        assert (out / "eval" / "report.csv").is_file()
        # ingest and pipeline share the output root and keep separate manifests
        ingest = ManifestService.read(out, "ingest").extra["fingerprints"]
        assert ManifestService.read(out, "pipeline").extra["fingerprints"] == ingest
    
    def test_analysis_covers_every_split(self, cli_config):
        args = cli_args(cli_config)
        out = cli_config.parent / "run"
        assert main(["synth", *args]) == 0
        assert main(["ingest", *args]) == 0
        assert main(["analyze", *args]) == 0
        config = RunConfig.load(cli_config).with_overrides(out=str(out))
        datasets = PipelineService.load_datasets(config)
        written = json.loads((out / "analysis" / "behavioral_transition.json").read_text())
        expected = CorrelationService.correlation_matrix(datasets, CorrelationMode.BEHAVIORAL, split=None)
        assert np.allclose(np.array(written["values"]), expected.as_array(), rtol=0, atol=1e-12)
    
    def test_staged_commands(self, cli_config):
        args = cli_args(cli_config)
        out = cli_config.parent / "run"
        assert main(["synth", *args]) == 0
        assert main(["ingest", *args]) == 0
        assert main(["meta-train", *args]) == 0
        assert ManifestService.read(out / "stages" / "meta", "meta-train").extra["gammas"]["T"] == 1.0
        assert CheckpointService.read_manifest(out / "stages" / "meta")["groups"]
        assert main(["transfer", *args]) == 0
        assert main(["train", *args]) == 0
        assert main(["eval", *args]) == 0
        frozen = CheckpointService.load(out / "stages" / "transfer").frozen
        trained = CheckpointService.load(out / "stages" / "train")
        assert frozen <= trained.frozen
        assert json.loads((out / "eval" / "report.json").read_text())["variant"] == "full"
    
    def test_eval_reports_the_trained_variant(self, cli_config):
        args = cli_args(cli_config)
        out = cli_config.parent / "run"
        assert main(["synth", *args]) == 0
        assert main(["ingest", *args]) == 0
        assert main(["train", *args, "--variant", "w/o-cat"]) == 0
        assert main(["eval", *args]) == 0
        assert json.loads((out / "eval" / "report.json").read_text())["variant"] == "w/o-cat"
    
    def test_flags_override_file(self, cli_config):
        args = cli_args(cli_config, "elsewhere")
        assert main(["synth", *args]) == 0
        assert (cli_config.parent / "elsewhere" / "raw" / "T.csv").is_file()
    
    def test_missing_dataset_is_a_data_error(self, cli_config):
        assert main(["pipeline", *cli_args(cli_config)]) == 2
    
    def test_bad_config_is_a_config_error(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[meta]\nalpha = -1\n", encoding="utf-8")
        assert main(["pipeline", "--config", str(path)]) == 1
    
    def test_missing_config_file(self, tmp_path):
        assert main(["ingest", "--config", str(tmp_path / "absent.toml")]) == 1
    
    def test_unknown_target(self, cli_config):
        assert main(["pipeline", *cli_args(cli_config), "--target", "Z"]) == 1
    
    def test_usage_error(self):
        assert main(["no-such-command"]) == 1
    
    def test_numerical_failure_saves_last_state(self, cli_config, monkeypatch):
        out = cli_config.parent / "run"
        assert main(["synth", *cli_args(cli_config)]) == 0
        assert main(["ingest", *cli_args(cli_config)]) == 0
        
        def explode(cities, target_id, config, shape=None, **kwargs):
            state = NetworkService.init_model(shape, config.seed)
            raise NumericalError("loss is nan", last_state=state, iteration=1)
        
        monkeypatch.setattr(MetaLearner, "meta_train", staticmethod(explode))
        assert main(["meta-train", *cli_args(cli_config)]) == 3
        assert CheckpointService.exists(out / "stages" / "failed")
