import numpy as np
import pytest

from eul.data import generate_corpus
from eul.model import BackboneConfig, TransformerModel, new_adapter_set
from eul.training import TrainConfig, backbone_for, train_original

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and return ``ok``."""
    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(vocab_size=40, max_seq_len=12, d_model=8, n_heads=2, n_layers=2,
                          d_ff=16, n_classes=3)


def random_adapters(cfg, seed, scale=0.3, d_bottleneck=4):
    """Adapters with a non-zero up projection, so gradients reach every weight."""
    rng = np.random.default_rng(seed)
    adapters = new_adapter_set(cfg, seed, d_bottleneck)
    for a in adapters:
        a.w_up.data[:] = rng.normal(0, scale, a.w_up.shape)
        a.b_down.data[:] = rng.normal(0, 0.1, a.b_down.shape)
        a.b_up.data[:] = rng.normal(0, 0.1, a.b_up.shape)
    return adapters


@pytest.fixture
def tiny_model(tiny_cfg):
    model = TransformerModel.init(tiny_cfg, 3)
    return model


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(seed=7, n_records=300, n_dev=40, n_test=200)


@pytest.fixture(scope="session")
def small_trained(small_corpus):
    """A quickly trained full-width model on the small corpus (shared, do not mutate)."""
    cfg = backbone_for(small_corpus)
    model, history = train_original(small_corpus.train, cfg, TrainConfig(epochs=4, seed=7))
    return model, history


def tiny_records(seed, n, entity=None, vocab=40, length=8):
    """Random records for the tiny config; ``entity`` occupies positions 1-2."""
    from eul.data import CLS, Record
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        t = [CLS] + [int(x) for x in rng.integers(4, vocab, length - 1)]
        ents, pos = frozenset(), {}
        if entity:
            t[1], t[2] = 4, 5
            ents, pos = frozenset([entity]), {entity: (1, 2)}
        out.append(Record(f"{entity or 'r'}{seed}-{k:03d}", tuple(t), int(rng.integers(3)),
                          ents, pos))
    return out


@pytest.fixture
def tiny_split():
    from eul.data import CorpusSplit, DeletionRequest
    return CorpusSplit(tiny_records(1, 6, "e"), tiny_records(2, 20), DeletionRequest("q", {"e"}))
