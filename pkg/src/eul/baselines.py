"""Reference unlearning strategies: retrain, fine-tune, reverse gradient and SISA-lite."""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .data import MISLABELED, Corpus, CorpusSplit, DeletionRequest, pad_tokens, resolve_request
from .errors import ConfigError
from .model import BackboneConfig, TransformerModel
from .numerics import Adam, softmax_cross_entropy
from .numerics.tensor import Tensor, add, backward, minimum, mul, neg, tsum
from .training import (TrainConfig, backbone_for, batches, canonical, derive_seed, fit_backbone,
                       n_batches, supervised_loss, train_original)

log = logging.getLogger(__name__)


@dataclass
class StrategyResult:
    strategy: str
    model: object
    update_time_s: float
    config: dict = field(default_factory=dict)
    adapters: list | None = None
    extra: dict = field(default_factory=dict, repr=False)


@dataclass
class FinetuneConfig:
    """Full-model continued training used by the fine-tune and reverse-gradient baselines.

    Defaults mirror the unlearning optimizer (Adam, 1e-2, three epochs).
    """
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-2
    warmup_ratio: float = 0.06
    mlm_weight: float = 1.0
    forget_cap: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.forget_cap <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, lr > 0 and forget_cap > 0 required")

    def to_dict(self):
        return asdict(self)


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, max(time.perf_counter() - start, 1e-9)


def retrain(split: CorpusSplit, backbone: BackboneConfig, config: TrainConfig,
            seed: int | None = None) -> StrategyResult:
    """Fresh backbone trained on the retain set with the original recipe."""
    if not split.retain:
        raise ConfigError("retrain needs a non-empty retain set")
    (model, history), dt = _timed(lambda: train_original(split.retain, backbone, config, seed))
    return StrategyResult("retrain", model, dt, config.to_dict(), extra={"history": history})


def _continue_training(model, retain, forget, cfg: FinetuneConfig):
    """Shuffle retain and forget records together; forget rows get negated, capped task loss."""
    retain, forget = canonical(retain), canonical(forget)
    forget_ids = {r.id for r in forget}
    records = canonical(retain + forget)
    rng = np.random.default_rng(cfg.seed)
    total = max(cfg.epochs * n_batches(len(records), cfg.batch_size), 1)
    model.set_backbone_trainable(True)
    opt = Adam(model.backbone_parameters(), cfg.lr, total, cfg.warmup_ratio)
    try:
        for _ in range(cfg.epochs):
            for batch in batches(records, cfg.batch_size, rng):
                mask_seed = int(rng.integers(2**31))
                keep = [r for r in batch if r.id not in forget_ids]
                drop = [r for r in batch if r.id in forget_ids]
                loss = None
                if keep:
                    loss = mul(supervised_loss(model, keep, mask_seed, cfg.mlm_weight,
                                               use_adapters=False), len(keep) / len(batch))
                if drop:
                    logits = model.forward_class(pad_tokens([r.tokens for r in drop]),
                                                 use_adapters=False)
                    ce = softmax_cross_entropy(logits, np.array([r.label for r in drop]),
                                               reduction="none")
                    term = mul(neg(tsum(minimum(ce, cfg.forget_cap))), 1.0 / len(batch))
                    loss = term if loss is None else add(loss, term)
                opt.zero_grad()
                backward(loss)
                opt.step()
    finally:
        model.set_backbone_trainable(False)
    return model


def finetune_retain(model: TransformerModel, split: CorpusSplit,
                    config: FinetuneConfig) -> StrategyResult:
    """Continue training a copy of the full model on the retain set only."""
    if not split.retain:
        raise ConfigError("fine-tuning needs a non-empty retain set")
    work = model.clone(with_adapters=False)
    _, dt = _timed(lambda: _continue_training(work, split.retain, [], config))
    return StrategyResult("finetune", work, dt, config.to_dict())


def reverse_gradient(model: TransformerModel, split: CorpusSplit,
                     config: FinetuneConfig) -> StrategyResult:
    """Fine-tune a copy on retain plus forget data, ascending the capped task loss on forget rows."""
    if not split.retain:
        raise ConfigError("reverse-gradient needs a non-empty retain set")
    work = model.clone(with_adapters=False)
    _, dt = _timed(lambda: _continue_training(work, split.retain, split.forget, config))
    return StrategyResult("revgrad", work, dt, config.to_dict())


# ------------------------------------------------------------------ SISA-lite

class SisaEnsemble:
    """Majority vote over shard models; ties go to the lowest class index."""

    def __init__(self, models):
        self.models = list(models)

    def predict(self, records) -> np.ndarray:
        votes = np.stack([m.predict(records, use_adapters=False) for m in self.models])
        k = self.models[0].config.n_classes
        counts = np.stack([(votes == c).sum(axis=0) for c in range(k)], axis=1)
        return np.argmax(counts, axis=1)

    def pooled(self, records) -> np.ndarray:
        return np.mean([m.pooled(records, use_adapters=False) for m in self.models], axis=0)

    def mlm_nll(self, batch) -> np.ndarray:
        return np.mean([m.mlm_nll(batch, use_adapters=False) for m in self.models], axis=0)


@dataclass
class SisaState:
    backbone: BackboneConfig
    train_config: TrainConfig
    seed: int
    slices: list          # slices[shard][slice] -> list of records
    checkpoints: list     # checkpoints[shard][j] -> params after j slices (j = 0 is the init)

    @property
    def n_shards(self):
        return len(self.slices)

    @property
    def n_slices(self):
        return len(self.slices[0])

    def model(self, shard: int) -> TransformerModel:
        return _from_params(self.backbone, self.checkpoints[shard][-1])

    def ensemble(self) -> SisaEnsemble:
        return SisaEnsemble([self.model(s) for s in range(self.n_shards)])


def _params_of(model):
    return {k: v.data.copy() for k, v in model.params.items()}


def _from_params(backbone, params):
    return TransformerModel(backbone, {k: Tensor(v.copy(), name=k) for k, v in params.items()})


def _group_key(rec) -> str:
    keys = sorted(rec.entities - {MISLABELED})
    return keys[0] if keys else ""


def assign_slices(records, n_shards: int, n_slices: int) -> list:
    """Entity-grouped shards, each cut into contiguous slices ordered by entity then id.

    Groups go largest-first to the currently smallest shard, so a single-entity
    deletion touches one shard and only the slices holding that entity.
    """
    if n_shards < 1 or n_slices < 1:
        raise ConfigError("n_shards and n_slices must be >= 1")
    groups = {}
    for r in canonical(records):
        groups.setdefault(_group_key(r), []).append(r)
    shards = [[] for _ in range(n_shards)]
    for key in sorted(groups, key=lambda k: (-len(groups[k]), k)):
        target = min(range(n_shards), key=lambda s: (len(shards[s]), s))
        shards[target].extend(groups[key])
    out = []
    for recs in shards:
        bounds = np.linspace(0, len(recs), n_slices + 1).round().astype(int)
        out.append([recs[bounds[j]:bounds[j + 1]] for j in range(n_slices)])
    return out


def _stage_seed(seed, shard, j):
    # shard 0 / slice 0 keep the base seed so a 1 x 1 run reproduces retrain
    return seed if shard == 0 and j == 0 else derive_seed(seed, "sisa", shard, j)


def train_shard(backbone, train_cfg: TrainConfig, seed: int, shard: int, slices,
                start: int = 0, checkpoints=None) -> list:
    """Run slice stages ``start..`` for one shard; returns the full checkpoint list.

    Stage ``j`` loads checkpoint ``j`` and trains on slices ``0..j`` for
    ``ceil(epochs / n_slices)`` epochs with a fresh optimizer.
    """
    n = len(slices)
    per_stage = TrainConfig(**{**train_cfg.to_dict(), "epochs": math.ceil(train_cfg.epochs / n)})
    if checkpoints is None:
        init_seed = seed if shard == 0 else derive_seed(seed, "sisa-init", shard)
        checkpoints = [_params_of(TransformerModel.init(backbone, init_seed))]
    ckpts = [{k: v.copy() for k, v in c.items()} for c in checkpoints[:start + 1]]
    for j in range(start, n):
        model = _from_params(backbone, ckpts[j])
        seen = [r for s in slices[:j + 1] for r in s]
        fit_backbone(model, seen, per_stage, _stage_seed(seed, shard, j))
        ckpts.append(_params_of(model))
    return ckpts


def sisa_train(records, backbone: BackboneConfig, train_cfg: TrainConfig, n_shards: int = 4,
               n_slices: int = 4, seed: int | None = None) -> SisaState:
    seed = train_cfg.seed if seed is None else seed
    slices = assign_slices(records, n_shards, n_slices)
    ckpts = [train_shard(backbone, train_cfg, seed, s, slices[s]) for s in range(n_shards)]
    return SisaState(backbone, train_cfg, seed, slices, ckpts)


def sisa_delete(state: SisaState, forget_ids) -> tuple:
    """Roll affected shards back before their first slice with forget data and retrain.

    Returns ``(new_state, update_time_s, touched_shards)``. Untouched shards
    share their checkpoints with ``state``.
    """
    forget_ids = set(forget_ids)
    start = time.perf_counter()
    slices, ckpts, touched = [], [], []
    for s, shard in enumerate(state.slices):
        hit = [j for j, sl in enumerate(shard) if any(r.id in forget_ids for r in sl)]
        if not hit:
            slices.append(shard)
            ckpts.append(state.checkpoints[s])
            continue
        touched.append(s)
        kept = [[r for r in sl if r.id not in forget_ids] for sl in shard]
        slices.append(kept)
        ckpts.append(train_shard(state.backbone, state.train_config, state.seed, s, kept,
                                 start=hit[0], checkpoints=state.checkpoints[s]))
    dt = max(time.perf_counter() - start, 1e-9)
    return SisaState(state.backbone, state.train_config, state.seed, slices, ckpts), dt, touched


def sisa_lite(corpus: Corpus, request: DeletionRequest, n_shards: int = 4, n_slices: int = 4,
              config: TrainConfig | None = None, backbone: BackboneConfig | None = None,
              seed: int | None = None, state: SisaState | None = None) -> StrategyResult:
    """Train (or reuse ``state``) on the full corpus, then serve ``request`` by rollback."""
    config = config or TrainConfig()
    backbone = backbone or backbone_for(corpus)
    split = resolve_request(corpus, request)
    if state is None:
        state = sisa_train(corpus.train, backbone, config, n_shards, n_slices, seed)
    new, dt, touched = sisa_delete(state, {r.id for r in split.forget})
    log.info("sisa: retrained shards %s in %.2fs", touched, dt)
    cfg = {**config.to_dict(), "n_shards": n_shards, "n_slices": n_slices}
    return StrategyResult("sisa", new.ensemble(), dt, cfg,
                          extra={"state": new, "before": state, "touched": touched})


def save_sisa_checkpoints(state: SisaState, directory) -> list:
    """One checkpoint file per shard and slice stage, named ``shard<k>_slice<j>.ckpt``."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for s, ckpts in enumerate(state.checkpoints):
        for j, params in enumerate(ckpts):
            path = os.path.join(directory, f"shard{s}_slice{j}.ckpt")
            checkpoint.save_model(path, _from_params(state.backbone, params),
                                  {"shard": s, "slice": j, "seed": state.seed})
            paths.append(path)
    return paths
