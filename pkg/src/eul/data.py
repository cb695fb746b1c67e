"""Synthetic entity-tagged corpora, deletion requests and masked batches.

Records carry a class label that is predictable from context cue words.
Each training record mentions one entity: two adjacent name tokens plus one
attribute token that only ever co-occurs with that entity (the private detail
a masked-LM probe can recover). Dev and test records have every entity token
substituted by the reserved ``NAME`` token.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, UnknownEntityError

log = logging.getLogger(__name__)

PAD, MASK, CLS, NAME = 0, 1, 2, 3
N_RESERVED = 4
MISLABELED = "mislabeled"
CORPUS_FORMAT = 1


@dataclass(frozen=True)
class Record:
    id: str
    tokens: tuple
    label: int
    entities: frozenset
    entity_positions: dict = field(default_factory=dict, hash=False, compare=True)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "label": self.label,
            "entities": sorted(self.entities),
            "entity_positions": {k: list(v) for k, v in sorted(self.entity_positions.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> Record:
        try:
            tokens = tuple(int(t) for t in obj["tokens"])
            positions = {k: tuple(int(i) for i in v)
                         for k, v in obj.get("entity_positions", {}).items()}
            rec = cls(str(obj["id"]), tokens, int(obj["label"]),
                      frozenset(obj.get("entities", ())), positions)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed record {obj!r:.80}: {exc}") from None
        for key, pos in positions.items():
            if any(i < 0 or i >= len(tokens) for i in pos):
                raise FormatError(f"record {rec.id}: entity {key} position out of bounds")
        return rec

    def masked_entity_positions(self) -> list:
        return sorted({i for pos in self.entity_positions.values() for i in pos})


@dataclass(frozen=True)
class DeletionRequest:
    request_id: str
    entity_keys: frozenset

    def __post_init__(self):
        if not self.entity_keys:
            raise ConfigError(f"deletion request {self.request_id!r} has no entity keys")
        object.__setattr__(self, "entity_keys", frozenset(self.entity_keys))


@dataclass
class CorpusSplit:
    forget: list
    retain: list
    provenance: DeletionRequest


@dataclass
class TokenTable:
    vocab_size: int
    n_classes: int
    entity_names: dict      # entity key -> name token ids
    entity_attributes: dict  # entity key -> attribute token ids
    cue_tokens: list        # per class
    filler_start: int

    def to_json(self):
        return {
            "vocab_size": self.vocab_size,
            "n_classes": self.n_classes,
            "entity_names": self.entity_names,
            "entity_attributes": self.entity_attributes,
            "cue_tokens": self.cue_tokens,
            "filler_start": self.filler_start,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["vocab_size"], obj["n_classes"],
                   {k: list(v) for k, v in obj["entity_names"].items()},
                   {k: list(v) for k, v in obj["entity_attributes"].items()},
                   [list(c) for c in obj["cue_tokens"]], obj["filler_start"])


@dataclass
class Corpus:
    train: list
    dev: list
    test: list
    table: TokenTable
    params: dict

    @property
    def known_entities(self) -> set:
        keys = set(self.table.entity_names)
        for rec in self.train:
            keys |= rec.entities
        return keys


@dataclass
class MaskedBatch:
    tokens: np.ndarray      # (rows, T) with MASK at masked positions, PAD-padded
    rows: np.ndarray        # row index of each masked position
    cols: np.ndarray        # column index of each masked position
    targets: np.ndarray     # original token id at each masked position
    record_ids: list
    skipped: int = 0

    @property
    def n_masked(self) -> int:
        return int(self.targets.size)


def pad_tokens(seqs) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


# ------------------------------------------------------------------ generation

def generate_corpus(seed: int = 0, n_records: int = 2000, n_entities: int = 10,
                    n_classes: int = 2, label_noise_rate: float = 0.0, *,
                    n_dev: int = 200, n_test: int = 1000, vocab_size: int = 1200,
                    cues_per_class: int = 30, ambiguous_rate: float = 0.08,
                    min_len: int = 12, max_len: int = 20) -> Corpus:
    """Generate a training corpus plus held-out dev/test sets.

    ``label_noise_rate`` flips that fraction of training labels to a different
    class; flipped records are tagged with the ``"mislabeled"`` entity key so
    a deletion request can target them.
    """
    if n_records <= 0:
        raise ConfigError("n_records must be positive")
    if n_entities < 2:
        raise ConfigError("n_entities must be >= 2")
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    if not 0.0 <= label_noise_rate < 1.0:
        raise ConfigError("label_noise_rate must lie in [0, 1)")
    if not 0.0 <= ambiguous_rate < 1.0:
        raise ConfigError("ambiguous_rate must lie in [0, 1)")
    if min_len < 6 or max_len < min_len:
        raise ConfigError("need 6 <= min_len <= max_len")
    filler_start = N_RESERVED + 3 * n_entities + cues_per_class * n_classes
    if vocab_size - filler_start < 50:
        raise ConfigError(f"vocab_size {vocab_size} too small for {n_entities} entities "
                          f"and {n_classes} classes")

    keys = [f"entity{i:02d}" for i in range(n_entities)]
    names = {k: [N_RESERVED + 3 * i, N_RESERVED + 3 * i + 1] for i, k in enumerate(keys)}
    attrs = {k: [N_RESERVED + 3 * i + 2] for i, k in enumerate(keys)}
    cue_base = N_RESERVED + 3 * n_entities
    cues = [list(range(cue_base + c * cues_per_class, cue_base + (c + 1) * cues_per_class))
            for c in range(n_classes)]
    table = TokenTable(vocab_size, n_classes, names, attrs, cues, filler_start)

    rng = np.random.default_rng(seed)

    def make(idx, prefix, substitute):
        label = int(rng.integers(n_classes))
        key = keys[int(rng.integers(n_entities))]
        length = int(rng.integers(min_len, max_len + 1))
        other = int((label + 1 + rng.integers(n_classes - 1)) % n_classes)
        if rng.random() < ambiguous_rate:
            # tied cue counts: only memorization recovers the label
            label_cues, other_cues = 2, 2
        else:
            label_cues, other_cues = 3, int(rng.integers(2))
        body = ([int(t) for t in rng.choice(cues[label], label_cues)]
                + [int(t) for t in rng.choice(cues[other], other_cues)]
                + [attrs[key][0]])
        n_fill = length - 2 - len(body)
        body += [int(t) for t in rng.integers(filler_start, vocab_size, n_fill)]
        body = [body[i] for i in rng.permutation(len(body))]
        cut = int(rng.integers(len(body) + 1))
        name_tokens = [NAME, NAME] if substitute else names[key]
        if substitute:
            body = [NAME if t == attrs[key][0] else t for t in body]
        tokens = [CLS] + body[:cut] + name_tokens + body[cut:]
        positions = {key: (cut + 1, cut + 2)}
        return Record(f"{prefix}-{idx:06d}", tuple(tokens), label, frozenset([key]), positions)

    train = [make(i, "train", False) for i in range(n_records)]
    dev = [make(i, "dev", True) for i in range(n_dev)]
    test = [make(i, "test", True) for i in range(n_test)]

    if label_noise_rate > 0:
        n_flip = int(round(label_noise_rate * n_records))
        for i in sorted(rng.choice(n_records, n_flip, replace=False)):
            r = train[i]
            new = int((r.label + 1 + rng.integers(n_classes - 1)) % n_classes)
            train[i] = Record(r.id, r.tokens, new, r.entities | {MISLABELED},
                              dict(r.entity_positions))

    params = dict(seed=seed, n_records=n_records, n_entities=n_entities,
                  n_classes=n_classes, label_noise_rate=label_noise_rate, n_dev=n_dev,
                  n_test=n_test, vocab_size=vocab_size, cues_per_class=cues_per_class,
                  ambiguous_rate=ambiguous_rate, min_len=min_len, max_len=max_len)
    return Corpus(train, dev, test, table, params)


# -------------------------------------------------------------------- requests

def resolve_request(corpus: Corpus, request: DeletionRequest) -> CorpusSplit:
    """Split the training corpus into records mentioning a requested entity and the rest."""
    unknown = set(request.entity_keys) - corpus.known_entities
    if unknown:
        raise UnknownEntityError(unknown, corpus.known_entities)
    forget, retain = [], []
    for rec in corpus.train:
        (forget if rec.entities & request.entity_keys else retain).append(rec)
    return CorpusSplit(forget, retain, request)


# --------------------------------------------------------------------- masking

def build_masked_batch(records, mask_mode: str = "random15", seed: int = 0,
                       rate: float = 0.15) -> MaskedBatch:
    """Replace selected positions by ``MASK``.

    ``entity-only`` masks exactly the entity name tokens; ``random15`` masks
    each content unit with probability ``rate`` (at least one per row), where
    an entity name span counts as a single unit and is masked as a whole.
    Records with nothing maskable are skipped and counted.
    """
    if mask_mode not in ("entity-only", "random15"):
        raise ConfigError(f"unknown mask mode {mask_mode!r}")
    rng = np.random.default_rng(seed)
    kept, chosen, skipped = [], [], 0
    for rec in records:
        if mask_mode == "entity-only":
            pos = rec.masked_entity_positions()
        else:
            pos = _random_units(rec, rng, rate)
        if not pos:
            skipped += 1
            continue
        kept.append(rec)
        chosen.append(pos)
    if skipped:
        log.warning("build_masked_batch: skipped %d record(s) with no maskable position", skipped)
    if not kept:
        return MaskedBatch(np.zeros((0, 1), dtype=np.int64), np.zeros(0, np.int64),
                           np.zeros(0, np.int64), np.zeros(0, np.int64), [], skipped)
    tokens = pad_tokens([r.tokens for r in kept])
    rows = np.concatenate([np.full(len(p), i) for i, p in enumerate(chosen)]).astype(np.int64)
    cols = np.concatenate([np.asarray(p) for p in chosen]).astype(np.int64)
    targets = tokens[rows, cols].copy()
    tokens[rows, cols] = MASK
    return MaskedBatch(tokens, rows, cols, targets, [r.id for r in kept], skipped)


def _random_units(rec: Record, rng, rate) -> list:
    # an entity span is one unit (whole-span masking); any other content token is its own unit
    spans = {i: span for span in rec.entity_positions.values() for i in span}
    units, seen = [], set()
    for i, t in enumerate(rec.tokens):
        if t in (CLS, PAD) or i in seen:
            continue
        unit = spans.get(i, (i,))
        seen.update(unit)
        units.append(unit)
    if not units:
        return []
    pick = rng.random(len(units)) < rate
    if not pick.any():
        pick[rng.integers(len(units))] = True
    return sorted(i for u, keep in zip(units, pick) if keep for i in u)


def substitute_entities(records, table: TokenTable) -> list:
    """Copies of ``records`` with every entity name/attribute token replaced by ``NAME``."""
    special = {t for ids in table.entity_names.values() for t in ids}
    special |= {t for ids in table.entity_attributes.values() for t in ids}
    return [Record(r.id, tuple(NAME if t in special else t for t in r.tokens), r.label,
                   r.entities, dict(r.entity_positions)) for r in records]


# ------------------------------------------------------------------------- I/O

def write_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_records(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.append(Record.from_json(obj))
    return out


def save_corpus(corpus: Corpus, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        write_records(d / f"{name}.jsonl", getattr(corpus, name))
    meta = {"format": CORPUS_FORMAT, "params": corpus.params, "table": corpus.table.to_json()}
    with open(d / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise ConfigError(f"{os.fspath(d)} is not a corpus directory (missing meta.json)")
    with open(d / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != CORPUS_FORMAT:
        raise FormatError(f"unsupported corpus format {meta.get('format')!r}")
    table = TokenTable.from_json(meta["table"])
    parts = [read_records(d / f"{name}.jsonl") for name in ("train", "dev", "test")]
    return Corpus(*parts, table, meta["params"])
