import logging
import math

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from checkin.entity import CityDataset, DaySequencePair
from evaluation.service import EvaluationService
from meta.model import EpochRecord, FreezeConfig, TargetResult, TrainConfig
from network.entity import CATEGORY_EMBED, TIME_EMBED, ModelShape, ModelState, SequenceBatch, Task, lstm_names
from network.service import CAT_LSTM, NetworkService
from shared.errors import ConfigError, ModelShapeError, NumericalError

logger = logging.getLogger(__name__)

EARLY_STOP_K = 10


class TransferService:
    
    @staticmethod
    def freeze_and_extend(state: ModelState, fc: FreezeConfig, seed: int) -> ModelState:
        """
        Rebuild the category channel: the first l layers (embedding = layer 1)
        are frozen, n fresh recurrent layers are appended. Layers l+1..L are
        dropped unless keep_upper_layers. The category head stays trainable.
        """
        shape = state.shape
        total = shape.category_layer_count
        if not 1 <= fc.l <= total:
            raise ConfigError(f"l={fc.l} outside [1, {total}]")
        frozen_layers = fc.l - 1
        kept_layers = shape.cat_layers if fc.keep_upper_layers else frozen_layers
        new_layers = kept_layers + fc.n
        if new_layers == 0:
            raise ModelShapeError(f"l={fc.l}, n=0 leaves the category encoder without recurrent layers")
        
        params = {}
        frozen = set(name for name in state.frozen if not name.startswith(f"{CAT_LSTM}."))
        for name, tensor in state.params.items():
            if not name.startswith(f"{CAT_LSTM}."):
                params[name] = tensor
        frozen.update((CATEGORY_EMBED, TIME_EMBED))
        for layer in range(kept_layers):
            for name in lstm_names(CAT_LSTM, layer):
                params[name] = state.params[name]
                if layer < frozen_layers:
                    frozen.add(name)
        
        new_shape = shape.model_copy(update={"cat_layers": new_layers})
        generator = NetworkService.generator(seed)
        for layer in range(kept_layers, new_layers):
            input_dim = shape.hidden_dim if layer > 0 else 2 * shape.embed_dim
            params.update(NetworkService.init_lstm_layer(CAT_LSTM, layer, input_dim, new_shape, generator))
        
        logger.info(f"Froze {fc.l} of {total} category layers, kept {kept_layers} recurrent, appended {fc.n}")
        return ModelState(params=params, shape=new_shape, frozen=frozenset(frozen))
    
    @staticmethod
    def optimize(
        state: ModelState,
        pairs: Sequence[DaySequencePair],
        task: Task,
        epochs: int,
        lr: float,
        batch_size: int,
        seed: int,
        all_prefixes: bool = False,
        on_epoch: Optional[Callable[[int, ModelState, float], bool]] = None
    ) -> ModelState:
        """
        Adam over the unfrozen groups the task depends on. `on_epoch` gets
        (epoch, state, mean training loss) and returns False to stop.
        """
        if epochs == 0 or not pairs:
            return state
        params = NetworkService.leaves(state)
        names = NetworkService.task_names(state, task)
        optimizer = torch.optim.Adam([params[n] for n in names], lr=lr)
        rng = np.random.default_rng(seed)
        
        def snapshot() -> ModelState:
            return state.replace(params={n: p.detach().clone() if n in names else p for n, p in params.items()})
        
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(pairs))
            losses = []
            for start in range(0, len(order), batch_size):
                batch = SequenceBatch.from_pairs([pairs[i] for i in order[start:start + batch_size]])
                optimizer.zero_grad()
                loss = NetworkService.task_loss(params, state.shape, batch, task, all_prefixes)
                if not torch.isfinite(loss):
                    raise NumericalError(f"Non-finite {task.value} loss in epoch {epoch}", last_state=snapshot(), iteration=epoch)
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()) * len(batch))
            mean_loss = sum(losses) / len(pairs)
            logger.debug(f"{task.value} epoch {epoch}: loss {mean_loss:.6f}")
            if on_epoch is not None and on_epoch(epoch, snapshot(), mean_loss) is False:
                break
        return snapshot()
    
    @staticmethod
    def fine_tune(state: ModelState, city: CityDataset, fc: FreezeConfig, seed: int) -> ModelState:
        """Next-category training on the target city's training split"""
        logger.info(f"Fine-tuning category channel on {city.city_id} for {fc.finetune_epochs} epochs")
        return TransferService.optimize(
            state, city.train, Task.CATEGORY, fc.finetune_epochs, fc.finetune_lr, fc.batch_size, seed
        )
    
    @staticmethod
    def target_model(state: Optional[ModelState], city: CityDataset, tc: TrainConfig, shape: ModelShape, seed: int) -> ModelState:
        """Attach a fresh POI channel; without a category channel, build a POI-only model"""
        if state is None:
            poi_only = shape.model_copy(update={
                "cat_layers": 0, "with_category": False, "num_pois": city.num_pois, "poi_layers": tc.poi_layers
            })
            return NetworkService.init_model(poi_only, seed)
        return NetworkService.attach_poi_channel(state, city.num_pois, tc.poi_layers, seed)
    
    @staticmethod
    def train_target_model(
        state: Optional[ModelState],
        city: CityDataset,
        tc: TrainConfig,
        shape: ModelShape,
        seed: int
    ) -> TargetResult:
        """
        Train POI embeddings, POI encoder and decoder with the category channel
        frozen. Early-stops on validation HR@10 and restores the best epoch.
        """
        model = TransferService.target_model(state, city, tc, shape, seed)
        val = city.val
        history: List[EpochRecord] = []
        best: Dict[str, object] = {"state": model, "epoch": 0, "score": -math.inf, "stale": 0}
        if val:
            best["score"] = EvaluationService.evaluate(model, val, ks=(EARLY_STOP_K,)).hit_ratio(EARLY_STOP_K)
        
        def on_epoch(epoch: int, current: ModelState, loss: float) -> bool:
            if not val:
                history.append(EpochRecord(epoch=epoch, train_loss=loss))
                best.update(state=current, epoch=epoch)
                return True
            score = EvaluationService.evaluate(current, val, ks=(EARLY_STOP_K,)).hit_ratio(EARLY_STOP_K)
            history.append(EpochRecord(epoch=epoch, train_loss=loss, val_hr10=score))
            if score > best["score"]:
                best.update(state=current, epoch=epoch, score=score, stale=0)
            else:
                best["stale"] += 1
            return best["stale"] < tc.patience
        
        logger.info(f"Training next-POI model on {city.city_id}: {city.num_pois} POIs, up to {tc.epochs} epochs")
        TransferService.optimize(
            model, city.train, Task.POI, tc.epochs, tc.lr, tc.batch_size, seed, tc.all_prefixes, on_epoch
        )
        if history and history[-1].epoch > best["epoch"] and val:
            logger.info(f"Early stopping restored epoch {best['epoch']} (val HR@{EARLY_STOP_K} {best['score']:.4f})")
        return TargetResult(state=best["state"], history=history, best_epoch=best["epoch"])
