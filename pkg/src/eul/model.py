"""Toy pre-LN transformer encoder with adapter slots after each feed-forward block.

The backbone (everything in :attr:`TransformerModel.params`) plays the role
of the original model. Unlearning layers sit in :attr:`TransformerModel.adapters`,
one optional slot per transformer layer, and are the only trainable weights
during an unlearning run.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .data import CLS, PAD, MaskedBatch, pad_tokens
from .errors import ConfigError, ContractError
from .numerics import tensor as T
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

NEG_INF = -1e9


@dataclass
class BackboneConfig:
    vocab_size: int = 1200
    max_seq_len: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    n_classes: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size <= CLS:
            raise ConfigError("vocab_size must include the reserved PAD, MASK and CLS tokens")
        for name in ("max_seq_len", "n_layers", "d_ff", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)


class UnlearningLayer:
    """Bottleneck adapter ``h + relu(h @ w_down + b_down) @ w_up + b_up``."""

    def __init__(self, w_down, b_down, w_up, b_up):
        self.w_down = Tensor(w_down, requires_grad=True, name="w_down")
        self.b_down = Tensor(b_down, requires_grad=True, name="b_down")
        self.w_up = Tensor(w_up, requires_grad=True, name="w_up")
        self.b_up = Tensor(b_up, requires_grad=True, name="b_up")

    @classmethod
    def init(cls, d_model: int, d_bottleneck: int = 8, rng=None) -> UnlearningLayer:
        rng = np.random.default_rng(rng)
        # w_up starts at zero so the adapted model equals the teacher at step 0
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_bottleneck)),
                   np.zeros(d_bottleneck), np.zeros((d_bottleneck, d_model)),
                   np.zeros(d_model))

    @property
    def d_model(self):
        return self.w_down.shape[0]

    @property
    def d_bottleneck(self):
        return self.w_down.shape[1]

    def parameters(self):
        return [self.w_down, self.b_down, self.w_up, self.b_up]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, h: Tensor) -> Tensor:
        z = T.relu(T.linear(h, self.w_down, self.b_down))
        return T.add(h, T.linear(z, self.w_up, self.b_up))

    def bottleneck(self, h: np.ndarray) -> np.ndarray:
        return np.maximum(h @ self.w_down.data + self.b_down.data, 0.0)

    def arrays(self) -> dict:
        return {"w_down": self.w_down.data, "b_down": self.b_down.data,
                "w_up": self.w_up.data, "b_up": self.b_up.data}

    def copy(self) -> UnlearningLayer:
        return UnlearningLayer(*(a.copy() for a in self.arrays().values()))

    def equals(self, other: UnlearningLayer) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(),
                                                        other.arrays().values()))


def new_adapter_set(cfg: BackboneConfig, seed: int = 0, d_bottleneck: int = 8,
                    layers=None) -> list:
    """Fresh adapters for the given layer indices (default: every layer)."""
    rng = np.random.default_rng(seed)
    layers = range(cfg.n_layers) if layers is None else set(layers)
    return [UnlearningLayer.init(cfg.d_model, d_bottleneck, rng) if i in layers else None
            for i in range(cfg.n_layers)]


def copy_adapter_set(adapters) -> list:
    return [a.copy() if a is not None else None for a in adapters]


def adapter_parameters(adapters) -> list:
    return [p for a in adapters if a is not None for p in a.parameters()]


class TransformerModel:
    def __init__(self, config: BackboneConfig, params: dict):
        self.config = config
        self.params = params
        self.adapters = [None] * config.n_layers

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> TransformerModel:
        rng = np.random.default_rng(seed)
        d, f, V = config.d_model, config.d_ff, config.vocab_size

        def w(rows, cols, scale=None):
            return rng.normal(0.0, scale if scale is not None else 1.0 / np.sqrt(rows),
                              (rows, cols))

        p = {
            "tok_emb": rng.normal(0.0, 0.5, (V, d)),
            "pos_emb": rng.normal(0.0, 0.1, (config.max_seq_len, d)),
        }
        for i in range(config.n_layers):
            p[f"l{i}.ln1.g"] = np.ones(d)
            p[f"l{i}.ln1.b"] = np.zeros(d)
            p[f"l{i}.qkv.w"] = w(d, 3 * d)
            p[f"l{i}.qkv.b"] = np.zeros(3 * d)
            p[f"l{i}.out.w"] = w(d, d) / np.sqrt(2 * config.n_layers)
            p[f"l{i}.out.b"] = np.zeros(d)
            p[f"l{i}.ln2.g"] = np.ones(d)
            p[f"l{i}.ln2.b"] = np.zeros(d)
            p[f"l{i}.ff1.w"] = w(d, f)
            p[f"l{i}.ff1.b"] = np.zeros(f)
            p[f"l{i}.ff2.w"] = w(f, d) / np.sqrt(2 * config.n_layers)
            p[f"l{i}.ff2.b"] = np.zeros(d)
        p["lnf.g"] = np.ones(d)
        p["lnf.b"] = np.zeros(d)
        p["cls.w"] = w(d, config.n_classes, 0.02)
        p["cls.b"] = np.zeros(config.n_classes)
        p["lm.w"] = w(d, V, 0.02)
        p["lm.b"] = np.zeros(V)
        return cls(config, {k: Tensor(v, name=k) for k, v in p.items()})

    # ------------------------------------------------------------ bookkeeping

    def set_backbone_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def backbone_parameters(self) -> list:
        return list(self.params.values())

    def n_backbone_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def n_adapter_params(self) -> int:
        return sum(a.n_params() for a in self.adapters if a is not None)

    def trainable_ratio(self) -> float:
        return self.n_adapter_params() / self.n_backbone_params()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def clone(self, with_adapters=True) -> TransformerModel:
        m = TransformerModel(copy.deepcopy(self.config),
                             {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})
        if with_adapters:
            m.adapters = copy_adapter_set(self.adapters)
        return m

    def insert_adapter(self, layer_index: int, adapter: UnlearningLayer | None):
        if not 0 <= layer_index < self.config.n_layers:
            raise IndexError(f"layer index {layer_index} outside 0..{self.config.n_layers - 1}")
        if adapter is not None and adapter.d_model != self.config.d_model:
            raise ContractError("adapter width does not match d_model")
        self.adapters[layer_index] = adapter

    def set_adapters(self, adapters):
        if len(adapters) != self.config.n_layers:
            raise ContractError(f"expected {self.config.n_layers} adapter slots, got {len(adapters)}")
        for i, a in enumerate(adapters):
            self.insert_adapter(i, a)

    def extract_adapters(self) -> list:
        """Occupied slots as ``(layer_index, adapter)`` pairs."""
        return [(i, a) for i, a in enumerate(self.adapters) if a is not None]

    def clear_adapters(self):
        self.adapters = [None] * self.config.n_layers

    # ---------------------------------------------------------------- forward

    def _prepare(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.config.max_seq_len:
            log.debug("truncating sequences of length %d to %d", tokens.shape[1],
                      self.config.max_seq_len)
            tokens = tokens[:, :self.config.max_seq_len]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise IndexError(f"token id outside vocabulary of size {self.config.vocab_size}")
        return tokens

    def encode(self, tokens, use_adapters=True, capture=None) -> Tensor:
        """Final-layer hidden states ``(B, T, d)`` after the closing layer norm.

        If ``capture`` is a dict, the hidden state entering each occupied
        adapter slot is stored under its layer index (as a numpy array).
        """
        cfg = self.config
        p = self.params
        tokens = self._prepare(tokens)
        B, L = tokens.shape
        H, d = cfg.n_heads, cfg.d_model
        dh = d // H
        key_mask = np.where(tokens == PAD, NEG_INF, 0.0)[:, None, None, :]

        x = T.add(T.embedding(p["tok_emb"], tokens), p["pos_emb"][:L])
        for i in range(cfg.n_layers):
            a = T.layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            qkv = T.linear(a, p[f"l{i}.qkv.w"], p[f"l{i}.qkv.b"])
            qkv = T.transpose(T.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = T.softmax(T.add(scores, key_mask))
            o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
            x = T.add(x, T.linear(o, p[f"l{i}.out.w"], p[f"l{i}.out.b"]))
            f = T.layer_norm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            f = T.linear(T.relu(T.linear(f, p[f"l{i}.ff1.w"], p[f"l{i}.ff1.b"])),
                         p[f"l{i}.ff2.w"], p[f"l{i}.ff2.b"])
            x = T.add(x, f)
            adapter = self.adapters[i] if use_adapters else None
            if adapter is not None:
                if capture is not None:
                    capture[i] = x.data
                x = adapter(x)
        return T.layer_norm(x, p["lnf.g"], p["lnf.b"])

    def forward_class(self, tokens, use_adapters=True) -> Tensor:
        h = self.encode(tokens, use_adapters)
        return T.linear(h[:, 0, :], self.params["cls.w"], self.params["cls.b"])

    def forward_mlm(self, batch: MaskedBatch, use_adapters=True) -> Tensor:
        """Vocabulary logits at the masked positions only, ``(n_masked, V)``."""
        if batch.tokens.shape[0] == 0:
            raise ContractError("masked batch is empty")
        if np.any(np.bincount(batch.rows, minlength=batch.tokens.shape[0]) == 0):
            raise ContractError("every row of a masked batch needs at least one masked position")
        h = self.encode(batch.tokens, use_adapters)
        picked = h[batch.rows, batch.cols]
        return T.linear(picked, self.params["lm.w"], self.params["lm.b"])

    # -------------------------------------------------- tape-free inference

    def class_logits(self, records_or_tokens, use_adapters=True, chunk=256) -> np.ndarray:
        seqs = _token_lists(records_or_tokens)
        out = [self.forward_class(pad_tokens(seqs[s:s + chunk]), use_adapters).data
               for s in range(0, len(seqs), chunk)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.n_classes))

    def predict(self, records_or_tokens, use_adapters=True) -> np.ndarray:
        return np.argmax(self.class_logits(records_or_tokens, use_adapters), axis=1)

    def pooled(self, records_or_tokens, use_adapters=True, chunk=256) -> np.ndarray:
        """Mean of final-layer states over non-PAD positions, one row per sequence."""
        seqs = _token_lists(records_or_tokens)
        out = []
        for s in range(0, len(seqs), chunk):
            toks = self._prepare(pad_tokens(seqs[s:s + chunk]))
            h = self.encode(toks, use_adapters).data
            keep = (toks != PAD)[:, :, None]
            out.append((h * keep).sum(axis=1) / keep.sum(axis=1))
        return np.concatenate(out, axis=0)

    def mlm_nll(self, batch: MaskedBatch, use_adapters=True) -> np.ndarray:
        """Per-masked-position negative log-likelihood (nats)."""
        z = self.forward_mlm(batch, use_adapters).data
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(z.shape[0]), batch.targets]


def _token_lists(items):
    return [tuple(r.tokens) if hasattr(r, "tokens") else tuple(r) for r in items]
