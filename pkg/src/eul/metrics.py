"""Forgetting metrics and the membership-inference probe.

Any object with ``predict``, ``pooled`` and ``mlm_nll`` methods (a
:class:`~eul.model.TransformerModel` or a SISA ensemble) can be evaluated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import CorpusSplit, TokenTable, build_masked_batch, substitute_entities
from .errors import ContractError, InsufficientDataError

MIA_STEPS = 200
MIA_LR = 0.5
MIA_TRAIN_FRACTION = 0.7
MIA_MIN_PER_CLASS = 10


def accuracy(model, records) -> float:
    if not records:
        raise ContractError("accuracy of an empty record list is undefined")
    labels = np.array([r.label for r in records])
    return float(np.mean(model.predict(records) == labels))


def mlm_loss_on_forgot(model, forget_records, seed: int = 0) -> float:
    """Mean cross-entropy (nats) of the entity name tokens under entity-only masking."""
    batch = build_masked_batch(forget_records, "entity-only", seed=seed)
    if batch.n_masked == 0:
        raise ContractError("no entity positions to mask in the forget records")
    return float(np.mean(model.mlm_nll(batch)))


# ------------------------------------------------------------------ MIA probe

@dataclass
class MiaProbe:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    accuracy: float

    def predict(self, x) -> np.ndarray:
        z = ((np.asarray(x) - self.mean) / self.scale) @ self.weights + self.bias
        return (z > 0).astype(np.int64)


def fit_probe(pos, neg, seed: int = 0, shuffle_labels: bool = False) -> MiaProbe:
    """Logistic probe separating ``pos`` (label 1) from ``neg`` (label 0) feature rows.

    Classes are balanced by subsampling the larger one; the probe trains on
    70% of the balanced rows and reports accuracy on the held-out 30%.
    """
    pos, neg = np.atleast_2d(np.asarray(pos, float)), np.atleast_2d(np.asarray(neg, float))
    n = min(len(pos), len(neg))
    if n < MIA_MIN_PER_CLASS:
        raise InsufficientDataError(
            f"membership probe needs >= {MIA_MIN_PER_CLASS} samples per class, got "
            f"{len(pos)} and {len(neg)}")
    rng = np.random.default_rng(seed)
    pos = pos[rng.choice(len(pos), n, replace=False)]
    neg = neg[rng.choice(len(neg), n, replace=False)]
    x = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(n), np.zeros(n)])
    if shuffle_labels:
        y = rng.permutation(y)
    order = rng.permutation(2 * n)
    cut = int(round(MIA_TRAIN_FRACTION * 2 * n))
    tr, te = np.sort(order[:cut]), np.sort(order[cut:])

    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd
    w, b = np.zeros(x.shape[1]), 0.0
    for _ in range(MIA_STEPS):
        z = xs[tr] @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        err = p - y[tr]
        w -= MIA_LR * (xs[tr].T @ err) / len(tr)
        b -= MIA_LR * float(err.mean())
    acc = float(np.mean(((xs[te] @ w + b) > 0) == (y[te] == 1)))
    return MiaProbe(w, b, mu, sd, tr, te, acc)


def mia_attack(model, split: CorpusSplit, probe_seed: int = 0, table: TokenTable | None = None,
               shuffle_labels: bool = False) -> float:
    """Held-out accuracy of a probe telling forget from retain representations.

    With ``table`` the entity name and attribute tokens are replaced by the
    placeholder before pooling, so the probe must rely on what the model
    carries about the records rather than on the literal tokens.
    """
    forget, retain = split.forget, split.retain
    if not forget or not retain:
        raise InsufficientDataError("membership probe needs non-empty forget and retain sets")
    if table is not None:
        forget, retain = substitute_entities(forget, table), substitute_entities(retain, table)
    return fit_probe(model.pooled(forget), model.pooled(retain), probe_seed,
                     shuffle_labels).accuracy


# -------------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    strategy: str
    test_accuracy: float
    retained_accuracy: float
    forgot_accuracy: float
    mlm_loss_forgot: float
    update_time_s: float
    mia_accuracy: float
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("test_accuracy", "retained_accuracy", "forgot_accuracy", "mia_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if not self.mlm_loss_forgot >= 0 or math.isnan(self.mlm_loss_forgot):
            raise ContractError(f"mlm_loss_forgot must be >= 0, got {self.mlm_loss_forgot}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> MetricsReport:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


COLUMNS = (("strategy", "strategy", "{}"), ("test", "test_accuracy", "{:.3f}"),
           ("retained", "retained_accuracy", "{:.3f}"), ("forgot", "forgot_accuracy", "{:.3f}"),
           ("mlm_forgot", "mlm_loss_forgot", "{:.3f}"), ("time_s", "update_time_s", "{:.2f}"),
           ("mia", "mia_accuracy", "{:.3f}"))


def format_table(reports) -> str:
    rows = [[h for h, _, _ in COLUMNS]]
    for rep in reports:
        rows.append([fmt.format(getattr(rep, attr)) for _, attr, fmt in COLUMNS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    return "\n".join(lines)


def full_report(model, split: CorpusSplit, test_records, strategy: str = "original",
                update_time_s: float = 0.0, table: TokenTable | None = None,
                seeds: dict | None = None, config: dict | None = None) -> MetricsReport:
    seeds = dict(seeds or {})
    return MetricsReport(
        strategy=strategy,
        test_accuracy=accuracy(model, test_records),
        retained_accuracy=accuracy(model, split.retain),
        forgot_accuracy=accuracy(model, split.forget),
        mlm_loss_forgot=mlm_loss_on_forgot(model, split.forget, seeds.get("mask", 0)),
        update_time_s=float(update_time_s),
        mia_accuracy=mia_attack(model, split, seeds.get("probe", 0), table),
        seeds=seeds,
        config=dict(config or {}),
    )
