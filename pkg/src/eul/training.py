"""Training the original (teacher) backbone and shared batching helpers."""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .data import build_masked_batch, pad_tokens
from .errors import ConfigError
from .model import BackboneConfig, TransformerModel
from .numerics import Adam, softmax_cross_entropy
from .numerics.tensor import add, backward, linear, mul

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 3e-3
    warmup_ratio: float = 0.06
    mlm_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self):
        return asdict(self)


def derive_seed(seed: int, *parts) -> int:
    """Stable child seed from a parent seed and any hashable labels."""
    text = ":".join([str(seed)] + [str(p) for p in parts])
    return zlib.crc32(text.encode())


def canonical(records) -> list:
    """Records in id order, so shuffles do not depend on how callers ordered them."""
    return sorted(records, key=lambda r: r.id)


def batches(records, batch_size, rng):
    """Shuffled mini-batches of records; ``rng=None`` keeps the given order."""
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for s in range(0, len(records), batch_size):
        yield [records[i] for i in order[s:s + batch_size]]


def n_batches(n, batch_size):
    return (n + batch_size - 1) // batch_size


def supervised_loss(model, batch, mask_seed, mlm_weight=1.0, use_adapters=True):
    """Class cross-entropy plus ``mlm_weight`` times masked-LM cross-entropy.

    Both heads read a single forward pass over the random15-masked batch.
    """
    mb = build_masked_batch(batch, "random15", seed=mask_seed)
    labels = np.array([r.label for r in batch], dtype=np.int64)
    h = model.encode(mb.tokens, use_adapters)
    p = model.params
    cls_loss = softmax_cross_entropy(linear(h[:, 0, :], p["cls.w"], p["cls.b"]), labels)
    if not mlm_weight:
        return cls_loss
    lm_logits = linear(h[mb.rows, mb.cols], p["lm.w"], p["lm.b"])
    return add(cls_loss, mul(softmax_cross_entropy(lm_logits, mb.targets), mlm_weight))


def fit_backbone(model: TransformerModel, records, cfg: TrainConfig, seed: int | None = None):
    """Train every backbone weight with Adam on ``records``; returns mean loss per epoch."""
    seed = cfg.seed if seed is None else seed
    records = canonical(records)
    history = []
    if not records or cfg.epochs == 0:
        return history
    rng = np.random.default_rng(seed)
    total = cfg.epochs * n_batches(len(records), cfg.batch_size)
    saved = model.adapters
    model.clear_adapters()
    model.set_backbone_trainable(True)
    opt = Adam(model.backbone_parameters(), cfg.lr, total, cfg.warmup_ratio)
    try:
        for epoch in range(cfg.epochs):
            losses = []
            for batch in batches(records, cfg.batch_size, rng):
                opt.zero_grad()
                loss = supervised_loss(model, batch, int(rng.integers(2**31)), cfg.mlm_weight,
                                       use_adapters=False)
                backward(loss)
                opt.step()
                losses.append(float(loss.data))
            history.append(float(np.mean(losses)))
            log.debug("backbone epoch %d loss %.4f", epoch, history[-1])
    finally:
        model.set_backbone_trainable(False)
        model.adapters = saved
    return history


def train_original(records, backbone: BackboneConfig, cfg: TrainConfig, seed: int | None = None):
    """Fresh backbone initialised from ``seed`` and trained on ``records``."""
    seed = cfg.seed if seed is None else seed
    model = TransformerModel.init(backbone, seed)
    history = fit_backbone(model, records, cfg, seed)
    return model, history


def backbone_for(corpus, **overrides) -> BackboneConfig:
    fields = dict(vocab_size=corpus.table.vocab_size, n_classes=corpus.table.n_classes)
    longest = max(len(r.tokens) for r in corpus.train + corpus.dev + corpus.test)
    fields["max_seq_len"] = max(32, longest)
    fields.update(overrides)
    return BackboneConfig(**fields)
