import logging
import math

from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from checkin.entity import NUM_CATEGORIES, NUM_DISTANCE_BUCKETS, NUM_TIME_SLOTS, CategoryStep, DaySequencePair, PoiStep
from network.entity import (
    CAT_HEAD_BIAS, CAT_HEAD_WEIGHT, CATEGORY_EMBED, DECODER_BIAS, DECODER_WEIGHT, DIST_EMBED,
    POI_EMBED, POI_TIME_EMBED, TIME_EMBED, EncodedSequence, GradientBundle, ModelShape,
    ModelState, SequenceBatch, Task, is_category_group, lstm_names
)
from shared.errors import ModelShapeError

logger = logging.getLogger(__name__)

LOG_EPSILON = 1e-12
CAT_LSTM = "cat_lstm"
POI_LSTM = "poi_lstm"

Params = Mapping[str, torch.Tensor]
Objective = Callable[[Params, Any], torch.Tensor]


class NetworkService:
    
    # --- initialization ------------------------------------------------------
    
    @staticmethod
    def generator(seed: int) -> torch.Generator:
        return torch.Generator().manual_seed(seed)
    
    @staticmethod
    def init_uniform(size: Tuple[int, ...], bound: float, dtype: torch.dtype, generator: torch.Generator) -> torch.Tensor:
        return torch.empty(size, dtype=dtype).uniform_(-bound, bound, generator=generator)
    
    @staticmethod
    def init_lstm_layer(prefix: str, layer: int, input_dim: int, shape: ModelShape, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        h = shape.hidden_dim
        bound = 1.0 / math.sqrt(h)
        w_ih, w_hh, bias = lstm_names(prefix, layer)
        return {
            w_ih: NetworkService.init_uniform((4 * h, input_dim), bound, shape.torch_dtype, generator),
            w_hh: NetworkService.init_uniform((4 * h, h), bound, shape.torch_dtype, generator),
            bias: NetworkService.init_uniform((4 * h,), bound, shape.torch_dtype, generator),
        }
    
    @staticmethod
    def init_category_channel(shape: ModelShape, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        d, h = shape.embed_dim, shape.hidden_dim
        bound = 1.0 / math.sqrt(h)
        params = {
            CATEGORY_EMBED: NetworkService.init_uniform((NUM_CATEGORIES, d), bound, shape.torch_dtype, generator),
            TIME_EMBED: NetworkService.init_uniform((NUM_TIME_SLOTS, d), bound, shape.torch_dtype, generator),
        }
        for layer in range(shape.cat_layers):
            params.update(NetworkService.init_lstm_layer(CAT_LSTM, layer, 2 * d if layer == 0 else h, shape, generator))
        params[CAT_HEAD_WEIGHT] = NetworkService.init_uniform((NUM_CATEGORIES, h), bound, shape.torch_dtype, generator)
        params[CAT_HEAD_BIAS] = NetworkService.init_uniform((NUM_CATEGORIES,), bound, shape.torch_dtype, generator)
        return params
    
    @staticmethod
    def init_poi_channel(shape: ModelShape, generator: torch.Generator) -> Dict[str, torch.Tensor]:
        d, h, p = shape.embed_dim, shape.hidden_dim, shape.num_pois
        bound = 1.0 / math.sqrt(h)
        params = {
            POI_EMBED: NetworkService.init_uniform((p, d), bound, shape.torch_dtype, generator),
            DIST_EMBED: NetworkService.init_uniform((NUM_DISTANCE_BUCKETS, d), bound, shape.torch_dtype, generator),
            POI_TIME_EMBED: NetworkService.init_uniform((NUM_TIME_SLOTS, d), bound, shape.torch_dtype, generator),
        }
        for layer in range(shape.poi_layers):
            params.update(NetworkService.init_lstm_layer(POI_LSTM, layer, 3 * d if layer == 0 else h, shape, generator))
        decoder_in = 2 * h if shape.with_category else h
        params[DECODER_WEIGHT] = NetworkService.init_uniform((p, decoder_in), bound, shape.torch_dtype, generator)
        params[DECODER_BIAS] = NetworkService.init_uniform((p,), bound, shape.torch_dtype, generator)
        return params
    
    @staticmethod
    def init_model(shape: ModelShape, seed: int) -> ModelState:
        """Fresh parameters, uniform in [-1/sqrt(h), 1/sqrt(h)]"""
        generator = NetworkService.generator(seed)
        params: Dict[str, torch.Tensor] = {}
        if shape.with_category:
            params.update(NetworkService.init_category_channel(shape, generator))
        if shape.has_poi_channel:
            params.update(NetworkService.init_poi_channel(shape, generator))
        return ModelState(params=params, shape=shape)
    
    @staticmethod
    def attach_poi_channel(state: ModelState, num_pois: int, poi_layers: int, seed: int) -> ModelState:
        """Add a fresh POI channel and decoder; the category channel is frozen"""
        shape = state.shape.model_copy(update={"num_pois": num_pois, "poi_layers": poi_layers})
        params = dict(state.params)
        params.update(NetworkService.init_poi_channel(shape, NetworkService.generator(seed)))
        return ModelState(params=params, shape=shape, frozen=state.frozen | frozenset(state.category_names))
    
    # --- embedding -----------------------------------------------------------
    
    @staticmethod
    def _lookup(table: torch.Tensor, index: torch.Tensor, name: str) -> torch.Tensor:
        if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
            raise ModelShapeError(f"{name} index out of range [0, {table.shape[0]})")
        return F.embedding(index, table)
    
    @staticmethod
    def embed_categories(params: Params, categories: torch.Tensor, time_slots: torch.Tensor) -> torch.Tensor:
        return torch.cat([
            NetworkService._lookup(params[CATEGORY_EMBED], categories, CATEGORY_EMBED),
            NetworkService._lookup(params[TIME_EMBED], time_slots, TIME_EMBED),
        ], dim=-1)
    
    @staticmethod
    def embed_pois(params: Params, pois: torch.Tensor, distances: torch.Tensor, time_slots: torch.Tensor) -> torch.Tensor:
        return torch.cat([
            NetworkService._lookup(params[POI_EMBED], pois, POI_EMBED),
            NetworkService._lookup(params[DIST_EMBED], distances, DIST_EMBED),
            NetworkService._lookup(params[POI_TIME_EMBED], time_slots, POI_TIME_EMBED),
        ], dim=-1)
    
    @staticmethod
    def embed_category_step(step: CategoryStep, state: ModelState) -> torch.Tensor:
        """concat(category_embed[c], time_embed[slot]), width 2d"""
        return NetworkService.embed_categories(
            state.params, torch.tensor([step.category_id]), torch.tensor([step.time_slot])
        )[0]
    
    @staticmethod
    def embed_poi_step(step: PoiStep, state: ModelState) -> torch.Tensor:
        """concat(poi_embed[p], dist_embed[d], poi_time_embed[slot]), width 3d"""
        return NetworkService.embed_pois(
            state.params, torch.tensor([step.poi_id]), torch.tensor([step.distance_bucket]), torch.tensor([step.time_slot])
        )[0]
    
    # --- recurrence ----------------------------------------------------------
    
    @staticmethod
    def run_lstm(params: Params, prefix: str, num_layers: int, inputs: torch.Tensor) -> torch.Tensor:
        """
        Stacked LSTM over [B, T, D] inputs with zero initial states.
        Returns the top layer's hidden states, [B, T, h].
        """
        if num_layers < 1:
            raise ModelShapeError(f"{prefix}: encoder has no recurrent layers")
        x = inputs
        for layer in range(num_layers):
            w_ih, w_hh, bias = (params[name] for name in lstm_names(prefix, layer))
            if x.shape[-1] != w_ih.shape[1]:
                raise ModelShapeError(f"{prefix}.{layer}: input width {x.shape[-1]} != {w_ih.shape[1]}")
            hidden = w_hh.shape[1]
            h = x.new_zeros(x.shape[0], hidden)
            c = x.new_zeros(x.shape[0], hidden)
            # input projection for all steps at once; the recurrence stays sequential
            projected = F.linear(x, w_ih, bias)
            outputs = []
            for t in range(x.shape[1]):
                gates = projected[:, t] + F.linear(h, w_hh)
                i, f, g, o = gates.chunk(4, dim=-1)
                c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
                h = torch.sigmoid(o) * torch.tanh(c)
                outputs.append(h)
            x = torch.stack(outputs, dim=1)
        return x
    
    @staticmethod
    def encode_sequence(state: ModelState, channel: Task, embedded: Sequence[torch.Tensor] | torch.Tensor) -> EncodedSequence:
        """Run one embedded sequence ([T, D] or list of D-vectors) through a channel's encoder"""
        inputs = embedded if isinstance(embedded, torch.Tensor) else torch.stack(list(embedded))
        if inputs.ndim != 2 or inputs.shape[0] == 0:
            raise ModelShapeError("encode_sequence needs a non-empty [T, D] sequence")
        if channel == Task.CATEGORY:
            hidden = NetworkService.run_lstm(state.params, CAT_LSTM, state.shape.cat_layers, inputs.unsqueeze(0))
        else:
            hidden = NetworkService.run_lstm(state.params, POI_LSTM, state.shape.poi_layers, inputs.unsqueeze(0))
        return EncodedSequence(hidden_states=hidden[0])
    
    # --- heads ---------------------------------------------------------------
    
    @staticmethod
    def category_head_logits(final_state: torch.Tensor, params: Params) -> torch.Tensor:
        weight = params[CAT_HEAD_WEIGHT]
        if final_state.shape[-1] != weight.shape[1]:
            raise ModelShapeError(f"category head expects width {weight.shape[1]}, got {final_state.shape[-1]}")
        return F.linear(final_state, weight, params[CAT_HEAD_BIAS])
    
    @staticmethod
    def decoder_logits(params: Params, cat_final: Optional[torch.Tensor], poi_final: torch.Tensor) -> torch.Tensor:
        features = poi_final if cat_final is None else torch.cat([cat_final, poi_final], dim=-1)
        weight = params[DECODER_WEIGHT]
        if features.shape[-1] != weight.shape[1]:
            raise ModelShapeError(f"decoder expects width {weight.shape[1]}, got {features.shape[-1]}")
        return F.linear(features, weight, params[DECODER_BIAS])
    
    @staticmethod
    def decode_next_poi(cat_final: Optional[torch.Tensor], poi_final: torch.Tensor, params: Params) -> torch.Tensor:
        """softmax over all candidate POIs"""
        return torch.softmax(NetworkService.decoder_logits(params, cat_final, poi_final), dim=-1)
    
    @staticmethod
    def cross_entropy(probs: torch.Tensor, truth: int) -> torch.Tensor:
        """-log(probs[truth]), clamped at 1e-12 inside the log"""
        if not 0 <= truth < probs.shape[-1]:
            raise ModelShapeError(f"truth index {truth} out of range [0, {probs.shape[-1]})")
        return -torch.log(torch.clamp(probs[..., truth], min=LOG_EPSILON))
    
    @staticmethod
    def _nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        # -max(log p, log eps) == -log(max(p, eps)), computed stably from logits
        log_probs = torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return -torch.clamp(log_probs, min=math.log(LOG_EPSILON))
    
    # --- task losses ---------------------------------------------------------
    
    @staticmethod
    def _prefix_mask(batch: SequenceBatch) -> torch.Tensor:
        positions = torch.arange(batch.width - 1).unsqueeze(0)
        return positions < (batch.lengths - 1).unsqueeze(1)
    
    @staticmethod
    def category_hidden(params: Params, shape: ModelShape, batch: SequenceBatch) -> torch.Tensor:
        """Category-channel states over every step but the last, [B, T-1, h]"""
        inputs = NetworkService.embed_categories(params, batch.categories[:, :-1], batch.time_slots[:, :-1])
        return NetworkService.run_lstm(params, CAT_LSTM, shape.cat_layers, inputs)
    
    @staticmethod
    def poi_hidden(params: Params, shape: ModelShape, batch: SequenceBatch) -> torch.Tensor:
        inputs = NetworkService.embed_pois(params, batch.pois[:, :-1], batch.distances[:, :-1], batch.time_slots[:, :-1])
        return NetworkService.run_lstm(params, POI_LSTM, shape.poi_layers, inputs)
    
    @staticmethod
    def category_loss(params: Params, shape: ModelShape, batch: SequenceBatch) -> torch.Tensor:
        """Next-category prediction at every step from the true prefix, averaged over all targets"""
        if batch.width < 2:
            raise ModelShapeError("category task needs sequences of length >= 2")
        hidden = NetworkService.category_hidden(params, shape, batch)
        logits = NetworkService.category_head_logits(hidden, params)
        mask = NetworkService._prefix_mask(batch).to(logits.dtype)
        nll = NetworkService._nll(logits, batch.categories[:, 1:])
        return (nll * mask).sum() / mask.sum()
    
    @staticmethod
    def next_poi_logits(params: Params, shape: ModelShape, batch: SequenceBatch, all_prefixes: bool = False) -> torch.Tensor:
        """
        Decoder logits from the prefix that ends one step before each target.
        [B, |P|] for the final-step target, [B, T-1, |P|] with all_prefixes.
        """
        poi_states = NetworkService.poi_hidden(params, shape, batch)
        cat_states = NetworkService.category_hidden(params, shape, batch) if shape.with_category else None
        if all_prefixes:
            return NetworkService.decoder_logits(params, cat_states, poi_states)
        rows = torch.arange(len(batch))
        last = batch.lengths - 2
        cat_final = None if cat_states is None else cat_states[rows, last]
        return NetworkService.decoder_logits(params, cat_final, poi_states[rows, last])
    
    @staticmethod
    def poi_loss(params: Params, shape: ModelShape, batch: SequenceBatch, all_prefixes: bool = False) -> torch.Tensor:
        if batch.width < 2:
            raise ModelShapeError("POI task needs sequences of length >= 2")
        logits = NetworkService.next_poi_logits(params, shape, batch, all_prefixes)
        if all_prefixes:
            mask = NetworkService._prefix_mask(batch).to(logits.dtype)
            nll = NetworkService._nll(logits, batch.pois[:, 1:])
            return (nll * mask).sum() / mask.sum()
        targets = batch.pois[torch.arange(len(batch)), batch.lengths - 1]
        return NetworkService._nll(logits, targets).mean()
    
    @staticmethod
    def task_loss(params: Params, shape: ModelShape, batch: SequenceBatch, task: Task, all_prefixes: bool = False) -> torch.Tensor:
        if task == Task.CATEGORY:
            return NetworkService.category_loss(params, shape, batch)
        return NetworkService.poi_loss(params, shape, batch, all_prefixes)
    
    @staticmethod
    def objective(shape: ModelShape, task: Task, all_prefixes: bool = False) -> Objective:
        def loss(params: Params, batch: SequenceBatch | Sequence[DaySequencePair]) -> torch.Tensor:
            return NetworkService.task_loss(params, shape, NetworkService.as_batch(batch), task, all_prefixes)
        return loss
    
    # --- gradients -----------------------------------------------------------
    
    @staticmethod
    def as_batch(batch: SequenceBatch | Sequence[DaySequencePair]) -> SequenceBatch:
        return batch if isinstance(batch, SequenceBatch) else SequenceBatch.from_pairs(batch)
    
    @staticmethod
    def leaves(state: ModelState) -> Dict[str, torch.Tensor]:
        """Detached parameters; trainable ones are fresh copies that require grad"""
        return {
            name: p.detach() if name in state.frozen else p.detach().clone().requires_grad_(True)
            for name, p in state.params.items()
        }
    
    @staticmethod
    def differentiate(
        objective: Objective,
        params: Params,
        names: Sequence[str],
        batch: Any,
        create_graph: bool = False
    ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        loss = objective(params, batch)
        if not names:
            return loss, {}
        grads = torch.autograd.grad(loss, [params[n] for n in names], create_graph=create_graph, allow_unused=True)
        return loss, {
            name: torch.zeros_like(params[name]) if grad is None else grad
            for name, grad in zip(names, grads)
        }
    
    @staticmethod
    def task_names(state: ModelState, task: Task) -> List[str]:
        """Trainable groups the task's loss depends on"""
        if task == Task.CATEGORY:
            return [name for name in state.trainable_names if is_category_group(name)]
        return state.trainable_names
    
    @staticmethod
    def compute_gradients(
        state: ModelState,
        batch: SequenceBatch | Sequence[DaySequencePair],
        task: Task,
        all_prefixes: bool = False
    ) -> GradientBundle:
        """Mean task loss and its exact gradient w.r.t. every unfrozen group"""
        params = NetworkService.leaves(state)
        loss, grads = NetworkService.differentiate(
            NetworkService.objective(state.shape, task, all_prefixes),
            params,
            NetworkService.task_names(state, task),
            NetworkService.as_batch(batch)
        )
        return GradientBundle(grads={n: g.detach() for n, g in grads.items()}, loss_value=float(loss.detach()))
    
    @staticmethod
    def apply_update(state: ModelState, bundle: GradientBundle, lr: float) -> ModelState:
        """group <- group - lr * grad for unfrozen groups; returns a new state"""
        if lr == 0:
            return state
        params = {}
        for name, tensor in state.params.items():
            grad = bundle.grads.get(name)
            params[name] = tensor if grad is None or name in state.frozen else (tensor - lr * grad).detach()
        return state.replace(params=params)
    
    # --- inference -----------------------------------------------------------
    
    @staticmethod
    @torch.no_grad()
    def predict_next_poi(state: ModelState, batch: SequenceBatch | Sequence[DaySequencePair]) -> torch.Tensor:
        """Probabilities over the POI vocabulary for each sequence's final step, [B, |P|]"""
        logits = NetworkService.next_poi_logits(state.params, state.shape, NetworkService.as_batch(batch))
        return torch.softmax(logits, dim=-1)
