"""Multi-request workflows: serving requests one after another, or fusing per-request adapters."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .data import Corpus, CorpusSplit, DeletionRequest, resolve_request
from .errors import ConfigError
from .fusion import GramRecord, fuse, record_gram
from .metrics import MetricsReport, full_report
from .model import TransformerModel, copy_adapter_set, new_adapter_set
from .training import derive_seed
from .unlearn import UnlearnConfig, UnlearnReport, teacher_logits, train_unlearn

log = logging.getLogger(__name__)

MODES = ("sequential-eul", "fuse")


@dataclass
class RequestArtifacts:
    request: DeletionRequest
    adapters: list
    gram: GramRecord
    report: UnlearnReport


@dataclass
class SequenceResult:
    mode: str
    steps: list = field(default_factory=list)        # MetricsReport per request
    adapters: list | None = None                      # final adapter set
    artifacts: dict = field(default_factory=dict)     # request_id -> RequestArtifacts (fuse mode)


def cumulative_split(corpus: Corpus, requests) -> CorpusSplit:
    keys = set().union(*(r.entity_keys for r in requests))
    return resolve_request(corpus, DeletionRequest("+".join(r.request_id for r in requests), keys))


def unlearn_request(model: TransformerModel, corpus: Corpus, request: DeletionRequest,
                    config: UnlearnConfig, teacher=None) -> RequestArtifacts:
    """Train a fresh adapter set for one request and record its Gram statistics.

    The adapter init and shuffle seeds derive from the request id, so the
    result does not depend on which other requests exist or their order.
    """
    split = resolve_request(corpus, request)
    seed = derive_seed(config.seed, request.request_id)
    cfg = UnlearnConfig(**{**config.to_dict(), "seed": seed})
    work = model.clone(with_adapters=False)
    work.set_adapters(new_adapter_set(work.config, seed))
    report = train_unlearn(work, split, cfg, teacher)
    gram = record_gram(work, work.adapters, split.forget, request.request_id)
    return RequestArtifacts(request, copy_adapter_set(work.adapters), gram, report)


def _check_requests(requests):
    if len(requests) < 2:
        raise ConfigError("a sequence needs at least two requests")
    ids = [r.request_id for r in requests]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ConfigError(f"duplicate request ids in sequence: {dup}")


def run_sequence(model: TransformerModel, corpus: Corpus, requests, mode: str,
                 config: UnlearnConfig, ridge_scale: float = 1e-6,
                 evaluate: bool = True) -> SequenceResult:
    """Serve ``requests`` in order and report metrics after each one.

    ``sequential-eul`` keeps one adapter set and continues training it with
    each new forget set (retain = everything not yet forgotten).
    ``fuse`` trains one adapter set per request and merges all adapters seen
    so far after every step.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    requests = list(requests)
    _check_requests(requests)
    result = SequenceResult(mode)
    teacher = teacher_logits(model, corpus.train)
    work = model.clone(with_adapters=False)
    if mode == "sequential-eul":
        work.set_adapters(new_adapter_set(work.config, config.seed))

    for k, req in enumerate(requests):
        served = requests[:k + 1]
        cum = cumulative_split(corpus, served)
        elapsed = 0.0
        if mode == "sequential-eul":
            own = resolve_request(corpus, req)
            step_split = CorpusSplit(own.forget, cum.retain, req)
            cfg = UnlearnConfig(**{**config.to_dict(), "seed": derive_seed(config.seed, k)})
            rep = train_unlearn(work, step_split, cfg, teacher)
            elapsed = rep.update_time_s
        else:
            art = unlearn_request(model, corpus, req, config, teacher)
            result.artifacts[req.request_id] = art
            elapsed = art.report.update_time_s
            arts = [result.artifacts[r.request_id] for r in served]
            merged = fuse([a.gram for a in arts], {a.request.request_id: a.adapters for a in arts},
                          ridge_scale)
            work.set_adapters(merged.adapters)
        log.info("%s step %d (%s) done in %.2fs", mode, k + 1, req.request_id, elapsed)
        if evaluate:
            result.steps.append(full_report(work, cum, corpus.test, mode, elapsed, corpus.table,
                                            config=config.to_dict()))
    result.adapters = copy_adapter_set(work.adapters)
    return result


def fused_from(artifacts) -> list:
    """Merged adapters for a collection of :class:`RequestArtifacts`."""
    arts = list(artifacts)
    return fuse([a.gram for a in arts], {a.request.request_id: a.adapters for a in arts}).adapters


__all__ = ["RequestArtifacts", "SequenceResult", "MetricsReport", "cumulative_split",
           "unlearn_request", "run_sequence", "fused_from", "MODES"]
