"""Learning unlearning layers against a frozen teacher.

Retain epochs pull the adapted model towards the teacher and the labels;
forget epochs push it away from the teacher and away from reconstructing
masked tokens. Both pushes are capped so the loss stays bounded below.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CorpusSplit, build_masked_batch, pad_tokens
from .errors import ConfigError, ContractError
from .model import TransformerModel, adapter_parameters, copy_adapter_set
from .numerics import SGD, Adam, kl_divergence, softmax_cross_entropy
from .numerics.tensor import Tensor, add, backward, mean, minimum, mul, neg
from .training import batches, canonical, n_batches

log = logging.getLogger(__name__)


@dataclass
class UnlearnConfig:
    alpha: float = 0.8
    lambda_task: float = 1.0
    gamma_lm: float = 0.2
    kl_forget_cap: float = 5.0
    lm_cap: float = 10.0
    learning_rate: float = 1e-2
    epochs: int = 3
    warmup_ratio: float = 0.06
    batch_size: int = 32
    forget_batch_size: int = 4
    temperature: float = 4.0
    retain_anchor: bool = True
    cap_per_example: bool = True
    optimizer: str = "adam"
    enable_kl: bool = True
    enable_task: bool = True
    enable_lm: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "lambda_task", "gamma_lm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.kl_forget_cap <= 0 or self.lm_cap <= 0:
            raise ConfigError("kl_forget_cap and lm_cap must be > 0")
        if self.learning_rate <= 0 or self.epochs < 0:
            raise ConfigError("learning_rate > 0 and epochs >= 0 required")
        if self.batch_size < 1 or self.forget_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class UnlearnReport:
    kl_retain: list = field(default_factory=list)
    kl_forget: list = field(default_factory=list)
    task: list = field(default_factory=list)
    lm: list = field(default_factory=list)
    total: list = field(default_factory=list)
    update_time_s: float = 0.0
    adapters: list = field(default_factory=list, repr=False)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        keys = ("kl_retain", "kl_forget", "task", "lm", "total", "update_time_s", "config")
        return {k: getattr(self, k) for k in keys}


# ------------------------------------------------------------------ loss terms

def loss_kl(teacher_logits, student_logits: Tensor, is_forget: bool, alpha: float = 0.8,
            cap: float = 5.0, temperature: float = 1.0, cap_per_example: bool = True) -> Tensor:
    """``alpha*KL`` on retain batches, ``-min(KL, cap)`` on forget batches.

    KL is taken between temperature-softened distributions and rescaled by
    ``temperature**2``. On forget batches the cap applies to each example
    (``cap_per_example``) or to the batch mean.
    """
    t_logits = np.asarray(teacher_logits, dtype=np.float64)
    if temperature != 1.0:
        t_logits = t_logits / temperature
        student_logits = mul(student_logits, 1.0 / temperature)
    scale = temperature ** 2
    if not is_forget:
        return mul(kl_divergence(t_logits, student_logits), alpha * scale)
    if cap_per_example:
        per_row = mul(kl_divergence(t_logits, student_logits, reduction="none"), scale)
        return neg(mean(minimum(per_row, cap)))
    return neg(minimum(mul(kl_divergence(t_logits, student_logits), scale), cap))


def loss_task(student_logits: Tensor, labels) -> Tensor:
    return softmax_cross_entropy(student_logits, np.asarray(labels, dtype=np.int64))


def loss_lm_negated(student_mlm_logits: Tensor, masked_targets, cap: float = 10.0) -> Tensor:
    """Negated masked-LM cross-entropy, clamped at ``-cap``."""
    targets = np.asarray(masked_targets, dtype=np.int64)
    if targets.size == 0:
        raise ContractError("negated LM loss needs at least one masked position")
    return neg(minimum(softmax_cross_entropy(student_mlm_logits, targets), cap))


# --------------------------------------------------------------------- trainer

def teacher_logits(model: TransformerModel, records) -> dict:
    logits = model.class_logits(records, use_adapters=False)
    return {r.id: row for r, row in zip(records, logits)}


def train_unlearn(model: TransformerModel, split: CorpusSplit, config: UnlearnConfig,
                  teacher: dict | None = None) -> UnlearnReport:
    """Train the adapters already inserted in ``model``; the backbone stays frozen.

    Each round runs one epoch over the retain set, then one over the forget
    set. With ``retain_anchor`` every forget step also carries the retain
    terms on a sampled retain batch, which keeps the forget push specific to
    the forget records. ``teacher`` optionally supplies teacher logits by id.
    """
    adapters = [a for a in model.adapters if a is not None]
    if not adapters:
        raise ContractError("train_unlearn needs at least one inserted adapter")
    if not split.retain or not split.forget:
        raise ConfigError("unlearning needs non-empty retain and forget sets; "
                          "total deletion requests must use the retrain baseline")
    cfg = config
    retain, forget = canonical(split.retain), canonical(split.forget)
    model.set_backbone_trainable(False)
    report = UnlearnReport(config=cfg.to_dict())
    T = cfg.temperature

    start = time.perf_counter()
    if teacher is None:
        teacher = teacher_logits(model, retain + forget)
    rng = np.random.default_rng(cfg.seed)
    total_steps = cfg.epochs * (n_batches(len(retain), cfg.batch_size)
                                + n_batches(len(forget), cfg.forget_batch_size))
    opt_cls = Adam if cfg.optimizer == "adam" else SGD
    opt = opt_cls(adapter_parameters(model.adapters), cfg.learning_rate, max(total_steps, 1),
                  cfg.warmup_ratio)

    def retain_terms(batch, log_kl, log_task):
        if not (cfg.enable_kl or cfg.enable_task):
            return None
        student = model.forward_class(pad_tokens([r.tokens for r in batch]))
        loss = None
        if cfg.enable_kl:
            kl = loss_kl(np.stack([teacher[r.id] for r in batch]), student, False, 1.0,
                         temperature=T)
            log_kl.append(float(kl.data))
            loss = mul(kl, cfg.alpha)
        if cfg.enable_task:
            term = loss_task(student, [r.label for r in batch])
            log_task.append(float(term.data))
            loss = _plus(loss, mul(term, cfg.lambda_task))
        return loss

    def step(loss):
        opt.zero_grad()
        if loss is not None:
            backward(loss)
        opt.step()

    for _ in range(cfg.epochs):
        kl_r, task, kl_f, lm = [], [], [], []
        for batch in batches(retain, cfg.batch_size, rng):
            step(retain_terms(batch, kl_r, task))

        n_anchor = min(cfg.batch_size, len(retain))
        for batch in batches(forget, cfg.forget_batch_size, rng):
            mask_seed = int(rng.integers(2**31))
            anchor_idx = rng.choice(len(retain), n_anchor, replace=False)
            loss = None
            if cfg.enable_kl:
                student = model.forward_class(pad_tokens([r.tokens for r in batch]))
                loss = loss_kl(np.stack([teacher[r.id] for r in batch]), student, True,
                               cap=cfg.kl_forget_cap, temperature=T,
                               cap_per_example=cfg.cap_per_example)
                kl_f.append(float(loss.data))
            if cfg.enable_lm:
                mb = build_masked_batch(batch, "random15", seed=mask_seed)
                term = loss_lm_negated(model.forward_mlm(mb), mb.targets, cfg.lm_cap)
                lm.append(float(term.data))
                loss = _plus(loss, mul(term, cfg.gamma_lm))
            if cfg.retain_anchor:
                loss = _plus(loss, retain_terms([retain[i] for i in anchor_idx], kl_r, task))
            step(loss)

        means = [float(np.mean(x)) if x else 0.0 for x in (kl_r, kl_f, task, lm)]
        report.kl_retain.append(means[0])
        report.kl_forget.append(means[1])
        report.task.append(means[2])
        report.lm.append(means[3])
        report.total.append(cfg.alpha * means[0] + means[1]
                            + cfg.lambda_task * means[2] + cfg.gamma_lm * means[3])
        log.debug("round %d: kl_r %.4f kl_f %.4f task %.4f lm %.4f", len(report.total), *means)
    report.update_time_s = max(time.perf_counter() - start, 1e-9)
    report.adapters = copy_adapter_set(model.adapters)
    return report


def _plus(a, b):
    if a is None:
        return b
    return a if b is None else add(a, b)
