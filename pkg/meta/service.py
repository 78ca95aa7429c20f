import logging
import math

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from checkin.entity import CityDataset, Split
from correlation.service import CorrelationService
from meta.model import IterationLoss, MetaConfig, MetaOrder, MetaResult, TaskEpisode
from network.entity import GradientBundle, ModelShape, ModelState, Task
from network.service import NetworkService, Objective
from shared.errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)


class MetaLearner:
    """
    Correlation-weighted MAML over city tasks.
    The inner step on city m is theta' = theta - (alpha * gamma_m) * grad L_spt(theta);
    the outer step sums query-loss gradients over cities in list order.
    """
    
    @staticmethod
    def gamma_table(cities: Sequence[CityDataset], target_id: str, config: MetaConfig) -> Dict[str, float]:
        if not config.use_correlation:
            return {city.city_id: 1.0 for city in cities}
        target = MetaLearner._find(cities, target_id)
        target_dist = CorrelationService.transition_distribution(target, Split.TRAIN)
        gammas = {}
        for city in cities:
            if city.city_id == target_id:
                gammas[city.city_id] = 1.0
            else:
                gammas[city.city_id] = CorrelationService.correlation_weight(
                    CorrelationService.transition_distribution(city, Split.TRAIN), target_dist, config.gamma_floor
                )
        return gammas
    
    @staticmethod
    def _find(cities: Sequence[CityDataset], city_id: str) -> CityDataset:
        for city in cities:
            if city.city_id == city_id:
                return city
        raise ConfigError(f"Target city {city_id!r} is not among {[c.city_id for c in cities]}")
    
    @staticmethod
    def sample_task_batch(
        cities: Sequence[CityDataset],
        weights: Mapping[str, float],
        support_size: int,
        rng: np.random.Generator,
        city_batch: Optional[int] = None
    ) -> List[TaskEpisode]:
        """
        N support and N query sequences per city, drawn from its training split.
        Cities with fewer than 2N sequences are split in two disjoint halves
        that are each sampled with replacement.
        """
        chosen = list(cities)
        if city_batch is not None and city_batch < len(chosen):
            picked = np.sort(rng.choice(len(chosen), size=city_batch, replace=False))
            chosen = [chosen[i] for i in picked]
        
        episodes = []
        for city in chosen:
            train = city.train
            if len(train) < 2:
                raise DataError(f"{city.city_id}: training split needs at least 2 sequences, has {len(train)}")
            order = rng.permutation(len(train))
            if len(train) >= 2 * support_size:
                support_idx = order[:support_size]
                query_idx = order[support_size:2 * support_size]
                replaced = False
            else:
                half = len(train) // 2
                support_idx = rng.choice(order[:half], size=support_size, replace=True)
                query_idx = rng.choice(order[half:], size=support_size, replace=True)
                replaced = True
            episodes.append(TaskEpisode(
                city_id=city.city_id,
                gamma_cor=float(weights.get(city.city_id, 1.0)),
                support=[train[i] for i in support_idx],
                query=[train[i] for i in query_idx],
                support_indices=tuple(int(i) for i in support_idx),
                query_indices=tuple(int(i) for i in query_idx),
                with_replacement=replaced
            ))
        return episodes
    
    @staticmethod
    def _objective(theta: ModelState, objective: Optional[Objective]) -> Objective:
        return objective or NetworkService.objective(theta.shape, Task.CATEGORY)
    
    @staticmethod
    def _names(theta: ModelState, objective: Optional[Objective]) -> List[str]:
        return NetworkService.task_names(theta, Task.CATEGORY) if objective is None else theta.trainable_names
    
    @staticmethod
    def adapt(
        params: Mapping[str, torch.Tensor],
        names: Sequence[str],
        objective: Objective,
        support,
        lr: float,
        steps: int,
        create_graph: bool
    ) -> Dict[str, torch.Tensor]:
        """Fast weights after `steps` inner steps; differentiable w.r.t. params when create_graph"""
        fast = dict(params)
        for _ in range(steps):
            _, grads = NetworkService.differentiate(objective, fast, names, support, create_graph=create_graph)
            for name in names:
                updated = fast[name] - lr * grads[name]
                fast[name] = updated if create_graph else updated.detach().requires_grad_(True)
        return fast
    
    @staticmethod
    def local_update(
        theta: ModelState,
        episode: TaskEpisode,
        alpha: float,
        steps: int = 1,
        objective: Optional[Objective] = None
    ) -> ModelState:
        """theta' = theta - alpha * grad(L_spt * gamma_cor), repeated `steps` times"""
        lr = alpha * episode.gamma_cor
        if lr == 0:
            return theta
        fn = MetaLearner._objective(theta, objective)
        names = MetaLearner._names(theta, objective)
        fast = MetaLearner.adapt(NetworkService.leaves(theta), names, fn, episode.support, lr, steps, create_graph=False)
        return theta.replace(params={n: fast[n].detach() if n in names else theta.params[n] for n in theta.names})
    
    @staticmethod
    def episode_gradient(
        params: Mapping[str, torch.Tensor],
        names: Sequence[str],
        objective: Objective,
        episode: TaskEpisode,
        alpha: float,
        steps: int,
        order: MetaOrder
    ) -> Tuple[float, Dict[str, torch.Tensor]]:
        """Query loss at the adapted weights and its gradient w.r.t. the shared initialization"""
        lr = alpha * episode.gamma_cor
        if order == MetaOrder.FIRST:
            fast = MetaLearner.adapt(params, names, objective, episode.support, lr, steps, create_graph=False)
            loss, grads = NetworkService.differentiate(objective, fast, names, episode.query)
        else:
            fast = MetaLearner.adapt(params, names, objective, episode.support, lr, steps, create_graph=True)
            loss = objective(fast, episode.query)
            raw = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
            grads = {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, raw)}
        return float(loss.detach()), {n: g.detach() for n, g in grads.items()}
    
    @staticmethod
    def global_step(
        theta: ModelState,
        episodes: Sequence[TaskEpisode],
        alpha: float,
        beta: float,
        order: MetaOrder = MetaOrder.FIRST,
        steps: int = 1,
        objective: Optional[Objective] = None
    ) -> Tuple[ModelState, Dict[str, float]]:
        if not episodes:
            raise DataError("global update needs at least one episode")
        fn = MetaLearner._objective(theta, objective)
        names = MetaLearner._names(theta, objective)
        params = NetworkService.leaves(theta)
        
        losses: Dict[str, float] = {}
        total: Dict[str, torch.Tensor] = {}
        # summed in episode order
        for episode in episodes:
            loss, grads = MetaLearner.episode_gradient(params, names, fn, episode, alpha, steps, order)
            losses[episode.city_id] = losses.get(episode.city_id, 0.0) + loss
            for name, grad in grads.items():
                total[name] = grad if name not in total else total[name] + grad
        
        bundle = GradientBundle(grads=total, loss_value=sum(losses.values()))
        return NetworkService.apply_update(theta, bundle, beta), losses
    
    @staticmethod
    def global_update(
        theta: ModelState,
        episodes: Sequence[TaskEpisode],
        alpha: float,
        beta: float,
        order: MetaOrder = MetaOrder.FIRST,
        steps: int = 1,
        objective: Optional[Objective] = None
    ) -> Tuple[ModelState, float]:
        """theta <- theta - beta * grad sum_m L_qry(theta'_m); returns the summed query loss"""
        state, losses = MetaLearner.global_step(theta, episodes, alpha, beta, order, steps, objective)
        return state, sum(losses.values())
    
    @staticmethod
    def _finite(state: ModelState) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in state.params.values())
    
    @staticmethod
    def meta_train(
        cities: Sequence[CityDataset],
        target_id: str,
        config: MetaConfig,
        shape: Optional[ModelShape] = None,
        init: Optional[ModelState] = None,
        gammas: Optional[Mapping[str, float]] = None,
        objective: Optional[Objective] = None
    ) -> MetaResult:
        """Iterations of {sample_task_batch; global_update} from a seeded initialization"""
        MetaLearner._find(cities, target_id)
        if init is None:
            if shape is None:
                raise ConfigError("meta_train needs a model shape or an initial state")
            init = NetworkService.init_model(shape.model_copy(update={"num_pois": 0, "poi_layers": 0}), config.seed)
        gammas = dict(gammas) if gammas is not None else MetaLearner.gamma_table(cities, target_id, config)
        rng = np.random.default_rng(config.seed)
        
        theta = init
        trace: List[IterationLoss] = []
        resampled = set()
        logger.info(f"Meta-training {config.iterations} iterations over {len(cities)} cities ({config.order.value}-order)")
        for iteration in range(1, config.iterations + 1):
            episodes = MetaLearner.sample_task_batch(cities, gammas, config.support_size, rng, config.city_batch)
            for episode in episodes:
                if episode.with_replacement and episode.city_id not in resampled:
                    logger.warning(f"{episode.city_id}: fewer than {2 * config.support_size} training sequences, sampling with replacement")
                    resampled.add(episode.city_id)
            updated, losses = MetaLearner.global_step(
                theta, episodes, config.alpha, config.beta, config.order, config.local_steps, objective
            )
            total = sum(losses.values())
            if not math.isfinite(total) or not MetaLearner._finite(updated):
                raise NumericalError(
                    f"Non-finite meta loss at iteration {iteration} (summed query loss {total})",
                    last_state=theta,
                    iteration=iteration
                )
            theta = updated
            trace.append(IterationLoss(iteration=iteration, city_losses=losses, total=total))
            level = logging.INFO if iteration % config.log_every == 0 or iteration == config.iterations else logging.DEBUG
            logger.log(level, f"iteration {iteration}: summed query loss {total:.6f}")
        
        return MetaResult(state=theta, gammas=gammas, trace=trace, resampled_cities=sorted(resampled))
    
    @staticmethod
    def write_trace(result: MetaResult, path: Path) -> Path:
        """iteration, one column per city, sum"""
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = [{"iteration": r.iteration, **r.city_losses, "sum": r.total} for r in result.trace]
        columns = ["iteration", *result.gammas.keys(), "sum"]
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.12g")
        return path
    
    @staticmethod
    def write_gammas(gammas: Mapping[str, float], path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(list(gammas.items()), columns=["city_id", "gamma_cor"]).to_csv(path, index=False, float_format="%.12g")
        return path
