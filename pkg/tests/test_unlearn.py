import math

import numpy as np
import pytest

from eul.data import CorpusSplit, DeletionRequest
from eul.errors import ConfigError, ContractError
from eul.model import new_adapter_set
from eul.numerics.tensor import Tensor
from eul.unlearn import (UnlearnConfig, loss_kl, loss_lm_negated, loss_task, teacher_logits,
                         train_unlearn)

HALF_LOG_4_3 = 0.5 * math.log(4 / 3)   # KL((.5,.5) || (.75,.25))


def student(rows):
    return Tensor(np.array(rows, float), requires_grad=True)


class TestLossTerms:
    def test_retain_kl_value(self):
        out = loss_kl(np.zeros((1, 2)), student([[math.log(3), 0]]), False, alpha=0.8)
        assert out.data == pytest.approx(0.8 * HALF_LOG_4_3, rel=1e-12)

    def test_forget_kl_is_negated(self):
        out = loss_kl(np.zeros((1, 2)), student([[math.log(3), 0]]), True, cap=5.0)
        assert out.data == pytest.approx(-HALF_LOG_4_3, rel=1e-12)

    def test_forget_cap_per_example(self):
        s = student([[math.log(3), 0], [0, 0]])
        out = loss_kl(np.zeros((2, 2)), s, True, cap=0.1)
        assert out.data == pytest.approx(-(0.1 + 0.0) / 2, rel=1e-12)
        out.backward()
        # the capped row contributes no gradient
        assert np.all(s.grad[0] == 0)

    def test_forget_cap_on_batch_mean(self):
        s = student([[math.log(3), 0], [0, 0]])
        out = loss_kl(np.zeros((2, 2)), s, True, cap=0.1, cap_per_example=False)
        assert out.data == pytest.approx(-HALF_LOG_4_3 / 2, rel=1e-12)
        out = loss_kl(np.zeros((2, 2)), s, True, cap=0.01, cap_per_example=False)
        assert out.data == pytest.approx(-0.01)

    def test_temperature_scaling(self):
        t = np.array([[1.0, -2.0, 0.5]])
        s = [[0.3, 0.1, -1.0]]
        scaled = loss_kl(t, student(s), False, alpha=1.0, temperature=2.0)
        plain = loss_kl(t / 2, student(np.array(s) / 2), False, alpha=1.0)
        assert scaled.data == pytest.approx(4 * plain.data, rel=1e-12)

    def test_zero_at_teacher(self):
        t = np.random.default_rng(0).normal(size=(4, 3))
        assert loss_kl(t, student(t), True).data == pytest.approx(0, abs=1e-15)

    def test_task_is_cross_entropy(self):
        out = loss_task(student([[0.0, 0.0, 0.0]]), [1])
        assert out.data == pytest.approx(math.log(3), rel=1e-12)

    def test_lm_negated_and_capped(self):
        z = student(np.zeros((2, 40)))
        assert loss_lm_negated(z, [5, 6], cap=10).data == pytest.approx(-math.log(40), rel=1e-12)
        assert loss_lm_negated(z, [5, 6], cap=1.0).data == pytest.approx(-1.0)

    def test_lm_needs_targets(self):
        with pytest.raises(ContractError):
            loss_lm_negated(student(np.zeros((0, 4))), [])


def fresh(tiny_model, tiny_cfg, seed=0):
    tiny_model.set_adapters(new_adapter_set(tiny_cfg, seed, d_bottleneck=4))
    return tiny_model


class TestTrainer:
    def test_backbone_frozen(self, tiny_model, tiny_cfg, tiny_split):
        before = tiny_model.checksum()
        rep = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split, UnlearnConfig(epochs=2))
        assert tiny_model.checksum() == before
        assert len(rep.total) == 2
        assert all(p.grad is None for p in tiny_model.backbone_parameters())

    def test_adapters_move(self, tiny_model, tiny_cfg, tiny_split):
        m = fresh(tiny_model, tiny_cfg)
        start = [a.copy() for a in m.adapters]
        train_unlearn(m, tiny_split, UnlearnConfig(epochs=1))
        assert not any(a.equals(b) for a, b in zip(start, m.adapters))

    def test_all_terms_disabled_is_noop(self, tiny_model, tiny_cfg, tiny_split):
        m = fresh(tiny_model, tiny_cfg)
        start = [a.copy() for a in m.adapters]
        cfg = UnlearnConfig(epochs=2, enable_kl=False, enable_task=False, enable_lm=False)
        rep = train_unlearn(m, tiny_split, cfg)
        assert all(a.equals(b) for a, b in zip(start, m.adapters))
        assert rep.total == [0.0, 0.0]

    def test_total_decomposes(self, tiny_model, tiny_cfg, tiny_split):
        cfg = UnlearnConfig(epochs=2, alpha=0.7, lambda_task=1.3, gamma_lm=0.4)
        rep = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split, cfg)
        for k in range(2):
            expect = (0.7 * rep.kl_retain[k] + rep.kl_forget[k] + 1.3 * rep.task[k]
                      + 0.4 * rep.lm[k])
            assert rep.total[k] == pytest.approx(expect, rel=1e-12)
            assert rep.kl_forget[k] <= 0 and rep.lm[k] <= 0 and rep.kl_retain[k] >= 0

    def test_deterministic(self, tiny_model, tiny_cfg, tiny_split):
        other = tiny_model.clone(with_adapters=False)
        a = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split, UnlearnConfig(epochs=1, seed=3))
        b = train_unlearn(fresh(other, tiny_cfg), tiny_split, UnlearnConfig(epochs=1, seed=3))
        assert all(x.equals(y) for x, y in zip(a.adapters, b.adapters))

    def test_record_order_irrelevant(self, tiny_model, tiny_cfg, tiny_split):
        other = tiny_model.clone(with_adapters=False)
        flipped = CorpusSplit(tiny_split.forget[::-1], tiny_split.retain[::-1],
                              tiny_split.provenance)
        a = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split, UnlearnConfig(epochs=1))
        b = train_unlearn(fresh(other, tiny_cfg), flipped, UnlearnConfig(epochs=1))
        assert all(x.equals(y) for x, y in zip(a.adapters, b.adapters))

    def test_zero_epochs(self, tiny_model, tiny_cfg, tiny_split):
        rep = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split, UnlearnConfig(epochs=0))
        assert rep.total == [] and rep.update_time_s > 0

    def test_teacher_supplied(self, tiny_model, tiny_cfg, tiny_split):
        teacher = teacher_logits(tiny_model, tiny_split.retain + tiny_split.forget)
        other = tiny_model.clone(with_adapters=False)
        a = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split, UnlearnConfig(epochs=1), teacher)
        b = train_unlearn(fresh(other, tiny_cfg), tiny_split, UnlearnConfig(epochs=1))
        assert all(x.equals(y) for x, y in zip(a.adapters, b.adapters))

    def test_sgd_option(self, tiny_model, tiny_cfg, tiny_split):
        rep = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split,
                            UnlearnConfig(epochs=1, optimizer="sgd", learning_rate=0.05))
        assert np.isfinite(rep.total).all()

    def test_needs_adapters(self, tiny_model, tiny_split):
        with pytest.raises(ContractError):
            train_unlearn(tiny_model, tiny_split, UnlearnConfig())

    @pytest.mark.parametrize("empty", ["forget", "retain"])
    def test_needs_both_sets(self, tiny_model, tiny_cfg, tiny_split, empty):
        split = CorpusSplit(*([] if empty == "forget" else tiny_split.forget,
                              [] if empty == "retain" else tiny_split.retain),
                            DeletionRequest("q", {"e"}))
        with pytest.raises(ConfigError):
            train_unlearn(fresh(tiny_model, tiny_cfg), split, UnlearnConfig())


@pytest.mark.parametrize("kwargs", [dict(alpha=-1), dict(kl_forget_cap=0), dict(learning_rate=0),
                                    dict(epochs=-1), dict(batch_size=0), dict(temperature=0),
                                    dict(warmup_ratio=1.0), dict(optimizer="rmsprop")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        UnlearnConfig(**kwargs)


def test_report_json(tiny_model, tiny_cfg, tiny_split):
    rep = train_unlearn(fresh(tiny_model, tiny_cfg), tiny_split, UnlearnConfig(epochs=1))
    obj = rep.to_json()
    assert "adapters" not in obj and obj["config"]["temperature"] == 4.0
