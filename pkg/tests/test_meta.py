import statistics

import numpy as np
import pytest
import torch

from checkin.entity import Split
from meta.model import MetaConfig, MetaOrder, TaskEpisode
from meta.service import MetaLearner
from network.entity import ModelShape, ModelState, Task
from network.service import NetworkService
from shared.errors import ConfigError, DataError, NumericalError

SCALAR_SHAPE = ModelShape(embed_dim=1, hidden_dim=1, cat_layers=0, with_category=False)


def scalar_state(theta=1.0) -> ModelState:
    return ModelState(params={"theta": torch.tensor([theta], dtype=torch.float64)}, shape=SCALAR_SHAPE)


def square(params, batch):
    return (params["theta"] ** 2).sum()


def toy_episode(gamma=1.0) -> TaskEpisode:
    return TaskEpisode(city_id="x", gamma_cor=gamma, support=[0], query=[1], support_indices=(0,), query_indices=(1,))


def theta(state: ModelState) -> float:
    return float(state.params["theta"])


@pytest.fixture
def category_model():
    return NetworkService.init_model(ModelShape(embed_dim=2, hidden_dim=3, cat_layers=2), seed=5)


@pytest.fixture
def real_episode(tiny_batch):
    return TaskEpisode(city_id="T", gamma_cor=0.5, support=tiny_batch[:2], query=tiny_batch[2:],
                       support_indices=(0, 1), query_indices=(2, 3))


class TestLocalUpdate:
    
    def test_scalar_oracle(self):
        updated = MetaLearner.local_update(scalar_state(), toy_episode(0.5), alpha=0.1, objective=square)
        assert theta(updated) == pytest.approx(0.9, abs=1e-15)
    
    def test_zero_alpha(self, category_model, real_episode):
        assert MetaLearner.local_update(category_model, real_episode, alpha=0.0) is category_model
    
    def test_input_untouched(self, category_model, real_episode):
        before = {n: t.clone() for n, t in category_model.params.items()}
        MetaLearner.local_update(category_model, real_episode, alpha=0.1)
        assert all(torch.equal(before[n], category_model.params[n]) for n in before)
    
    def test_scaling_identity(self, category_model, real_episode):
        weighted = MetaLearner.local_update(category_model, real_episode, alpha=0.1)
        unit = TaskEpisode(city_id="T", gamma_cor=1.0, support=real_episode.support, query=real_episode.query)
        scaled = MetaLearner.local_update(category_model, unit, alpha=0.5 * 0.1)
        assert all(torch.equal(weighted.params[n], scaled.params[n]) for n in category_model.names)
    
    def test_unit_gamma_is_plain_step(self, category_model, real_episode):
        unit = TaskEpisode(city_id="T", gamma_cor=1.0, support=real_episode.support, query=real_episode.query)
        adapted = MetaLearner.local_update(category_model, unit, alpha=0.1)
        bundle = NetworkService.compute_gradients(category_model, unit.support, Task.CATEGORY)
        plain = NetworkService.apply_update(category_model, bundle, 0.1)
        assert all(torch.equal(adapted.params[n], plain.params[n]) for n in category_model.names)
    
    def test_steps_recompute_gradients(self):
        updated = MetaLearner.local_update(scalar_state(), toy_episode(), alpha=0.1, steps=2, objective=square)
        assert theta(updated) == pytest.approx(0.64, abs=1e-15)


class TestGlobalUpdate:
    
    def test_first_order_toy(self):
        state, loss = MetaLearner.global_update(scalar_state(), [toy_episode()], 0.1, 0.1, MetaOrder.FIRST, objective=square)
        assert theta(state) == pytest.approx(0.84, abs=1e-12)
        assert loss == pytest.approx(0.64, abs=1e-12)
    
    def test_second_order_toy(self):
        state, _ = MetaLearner.global_update(scalar_state(), [toy_episode()], 0.1, 0.1, MetaOrder.SECOND, objective=square)
        assert theta(state) == pytest.approx(0.872, abs=1e-12)
    
    def test_zero_beta(self, category_model, real_episode):
        for order in MetaOrder:
            state, _ = MetaLearner.global_update(category_model, [real_episode], 0.1, 0.0, order)
            assert all(torch.equal(state.params[n], category_model.params[n]) for n in category_model.names)
    
    def test_orders_agree_to_first_order_in_alpha(self):
        def gap(alpha):
            first, _ = MetaLearner.global_update(scalar_state(), [toy_episode()], alpha, 1.0, MetaOrder.FIRST, objective=square)
            second, _ = MetaLearner.global_update(scalar_state(), [toy_episode()], alpha, 1.0, MetaOrder.SECOND, objective=square)
            return abs(theta(first) - theta(second))
        ratio = gap(1e-2) / gap(1e-3)
        assert 5.0 < ratio < 20.0
    
    def test_episodes_sum_in_order(self):
        episodes = [toy_episode(1.0), toy_episode(0.5)]
        state, loss = MetaLearner.global_update(scalar_state(), episodes, 0.1, 0.1, objective=square)
        # theta' = 0.8 and 0.9, query gradients 1.6 and 1.8
        assert theta(state) == pytest.approx(1 - 0.1 * (1.6 + 1.8), abs=1e-12)
        assert loss == pytest.approx(0.64 + 0.81, abs=1e-12)
    
    def test_needs_episodes(self):
        with pytest.raises(DataError):
            MetaLearner.global_update(scalar_state(), [], 0.1, 0.1, objective=square)
    
    def test_overlapping_episode_is_a_data_error(self):
        with pytest.raises(DataError, match="overlap"):
            TaskEpisode(city_id="x", gamma_cor=1.0, support=[0], query=[0], support_indices=(0,), query_indices=(0,))
        with pytest.raises(DataError):
            toy_episode(gamma=1.5)
    
    def test_second_order_matches_finite_differences(self, category_model, real_episode):
        alpha, step = 0.3, 1e-5
        names = category_model.trainable_names
        objective = NetworkService.objective(category_model.shape, Task.CATEGORY)
        _, grads = MetaLearner.episode_gradient(
            NetworkService.leaves(category_model), names, objective, real_episode, alpha, 1, MetaOrder.SECOND
        )
        
        def composite(params):
            leaves = {n: t.detach().clone().requires_grad_(True) for n, t in params.items()}
            fast = MetaLearner.adapt(leaves, names, objective, real_episode.support, alpha * real_episode.gamma_cor, 1, False)
            return float(objective(fast, real_episode.query))
        
        for name in ("cat_lstm.1.w_hh", "cat_head.weight", "category_embed"):
            base = category_model.params[name]
            numeric = torch.zeros_like(base)
            for i in range(base.numel()):
                plus, minus = base.clone(), base.clone()
                plus.view(-1)[i] += step
                minus.view(-1)[i] -= step
                numeric.view(-1)[i] = (
                    composite({**category_model.params, name: plus}) - composite({**category_model.params, name: minus})
                ) / (2 * step)
            scale = max(float(numeric.norm()), 1e-8)
            assert float((grads[name] - numeric).norm()) / scale < 1e-3, name


class TestSampling:
    
    def test_target_gamma_and_disjoint(self, tiny_cities):
        config = MetaConfig(N=4)
        gammas = MetaLearner.gamma_table(tiny_cities, "T", config)
        assert gammas["T"] == 1.0
        episodes = MetaLearner.sample_task_batch(tiny_cities, gammas, 4, np.random.default_rng(0))
        assert [e.city_id for e in episodes] == ["T", "A", "B"]
        for episode in episodes:
            assert len(episode.support) == len(episode.query) == 4
            assert not set(episode.support_indices) & set(episode.query_indices)
            assert not episode.with_replacement
            assert config.gamma_floor <= episode.gamma_cor <= 1.0
    
    def test_exact_partition(self, tiny_cities):
        city = tiny_cities[0]
        # retag the last training sequence when needed so the split has an even size
        train_positions = [i for i, tag in enumerate(city.split) if tag == Split.TRAIN]
        keep = set(train_positions[:2 * (len(train_positions) // 2)])
        split = tuple(Split.VAL if tag == Split.TRAIN and i not in keep else tag for i, tag in enumerate(city.split))
        even = city.model_copy(update={"split": split})
        n = len(even.train) // 2
        assert n >= 1 and len(even.train) == 2 * n
        episode = MetaLearner.sample_task_batch([even], {}, n, np.random.default_rng(1))[0]
        assert not episode.with_replacement
        assert sorted(episode.support_indices + episode.query_indices) == list(range(2 * n))
    
    def test_seeded(self, tiny_cities):
        a = MetaLearner.sample_task_batch(tiny_cities, {}, 3, np.random.default_rng(9))
        b = MetaLearner.sample_task_batch(tiny_cities, {}, 3, np.random.default_rng(9))
        assert [e.support_indices for e in a] == [e.support_indices for e in b]
        assert [e.query_indices for e in a] == [e.query_indices for e in b]
    
    def test_small_city_resamples(self, tiny_cities):
        city = tiny_cities[0]
        episode = MetaLearner.sample_task_batch([city], {}, len(city.train), np.random.default_rng(2))[0]
        assert episode.with_replacement
        assert not set(episode.support_indices) & set(episode.query_indices)
    
    def test_city_batch(self, tiny_cities):
        episodes = MetaLearner.sample_task_batch(tiny_cities, {}, 2, np.random.default_rng(3), city_batch=2)
        assert len(episodes) == 2
    
    def test_without_correlation(self, tiny_cities):
        gammas = MetaLearner.gamma_table(tiny_cities, "T", MetaConfig(use_correlation=False))
        assert set(gammas.values()) == {1.0}
    
    def test_unknown_target(self, tiny_cities):
        with pytest.raises(ConfigError):
            MetaLearner.gamma_table(tiny_cities, "Z", MetaConfig())


class TestMetaTrain:
    
    shape = ModelShape(embed_dim=3, hidden_dim=4, cat_layers=2)
    
    def test_zero_iterations(self, tiny_cities):
        init = NetworkService.init_model(self.shape, seed=0)
        result = MetaLearner.meta_train(tiny_cities, "T", MetaConfig(iterations=0), init=init)
        assert result.state is init
        assert result.trace == []
    
    def test_deterministic(self, tiny_cities):
        config = MetaConfig(iterations=3, N=4, seed=11)
        a = MetaLearner.meta_train(tiny_cities, "T", config, shape=self.shape)
        b = MetaLearner.meta_train(tiny_cities, "T", config, shape=self.shape)
        assert {n: a.state.tensor_hash(n) for n in a.state.names} == {n: b.state.tensor_hash(n) for n in b.state.names}
        assert [r.total for r in a.trace] == [r.total for r in b.trace]
    
    def test_unit_gammas_reduce_to_plain_maml(self, tiny_cities):
        config = MetaConfig(iterations=3, N=4, seed=2, use_correlation=False)
        weighted_off = MetaLearner.meta_train(tiny_cities, "T", config, shape=self.shape)
        plain = MetaLearner.meta_train(
            tiny_cities, "T", config.model_copy(update={"use_correlation": True}), shape=self.shape,
            gammas={c.city_id: 1.0 for c in tiny_cities}
        )
        assert all(torch.equal(weighted_off.state.params[n], plain.state.params[n]) for n in plain.state.names)
    
    def test_records_trace(self, tiny_cities, tmp_path):
        result = MetaLearner.meta_train(tiny_cities, "T", MetaConfig(iterations=2, N=3), shape=self.shape)
        assert [r.iteration for r in result.trace] == [1, 2]
        assert set(result.trace[0].city_losses) == {"T", "A", "B"}
        path = MetaLearner.write_trace(result, tmp_path / "trace.csv")
        assert path.read_text().splitlines()[0] == "iteration,T,A,B,sum"
    
    def test_non_finite_loss_keeps_last_state(self, tiny_cities):
        init = scalar_state()
        
        def exploding(params, batch):
            return (params["theta"] ** 2).sum() * float("nan")
        
        with pytest.raises(NumericalError) as caught:
            MetaLearner.meta_train(tiny_cities, "T", MetaConfig(iterations=3, N=2), init=init, objective=exploding)
        assert caught.value.iteration == 1
        assert caught.value.last_state is init
        assert caught.value.exit_code == 3
    
    def test_loss_trace_decreases(self, tiny_cities):
        config = MetaConfig(iterations=80, N=16, alpha=0.1, beta=0.1, seed=4)
        result = MetaLearner.meta_train(tiny_cities, "T", config, shape=ModelShape(embed_dim=4, hidden_dim=8, cat_layers=2))
        totals = [r.total for r in result.trace]
        assert all(np.isfinite(totals))
        assert statistics.median(totals[-20:]) < statistics.median(totals[:20])
