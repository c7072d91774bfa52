"""Optimizer, loss, curriculum, and training-loop mechanics."""

import numpy as np
import pytest

from hydra_lab import tensor as T
from hydra_lab.model import ModelConfig, build_hydra
from hydra_lab.tasks import gen_logic_chain, logic_vocab
from hydra_lab.tensor import NumericError, Tensor, UsageError, backward
from hydra_lab.training import (
    CurriculumSchedule,
    OptimState,
    TrainReport,
    TrainSettings,
    adam_step,
    curriculum_step,
    frozen_for_phase,
    lm_loss,
    param_phase,
    perplexity,
    train_model,
    zero_grads,
)


class TestAdam:
    def test_zero_grad_zero_moments_no_change(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        state = OptimState(lr=0.1)
        adam_step([("p", p)], state)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_first_step_closed_form(self):
        # t=1: bias corrections cancel, update = lr * g / (|g| + eps)
        g = 0.37
        lr = 1e-3
        eps = 1e-8
        p = Tensor(np.array([0.5]), requires_grad=True)
        p.grad = np.array([g])
        state = OptimState(lr=lr, eps=eps)
        adam_step([("p", p)], state)
        expected = 0.5 - lr * g / (abs(g) + eps)
        assert p.data[0] == pytest.approx(expected, abs=1e-15)

    def test_adamw_lr_zero_is_noop(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.array([1.0])
        adam_step([("p", p)], OptimState(lr=0.0, weight_decay=0.01))
        assert p.data[0] == 3.0

    def test_adamw_decoupled_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        state = OptimState(lr=0.1, weight_decay=0.5)
        adam_step([("p", p)], state)
        # zero grad: update is pure decay, lr * wd * p
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_nan_grad_names_parameter(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="offending|my_weight"):
            adam_step([("my_weight", p)], OptimState(lr=0.1))

    def test_frozen_params_untouched(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        adam_step([("a", a), ("b", b)], OptimState(lr=0.1), frozen={"b"})
        assert a.data[0] != 1.0 and b.data[0] == 1.0


class TestLmLoss:
    def test_uniform_logits(self):
        V = 31
        logits = Tensor(np.zeros((2, 5, V)))
        targets = np.zeros((2, 5), dtype=int)
        mask = np.ones((2, 5), dtype=bool)
        loss = lm_loss(logits, targets, mask)
        assert loss.item() == pytest.approx(np.log(V), abs=1e-12)
        assert perplexity(loss.item()) == pytest.approx(V, rel=1e-9)

    def test_confident_correct_goes_to_zero(self):
        V = 8
        rng = np.random.default_rng(0)
        targets = rng.integers(0, V, size=(1, 6))
        logits = np.zeros((1, 6, V))
        logits[0, np.arange(6), targets[0]] = 50.0
        loss = lm_loss(Tensor(logits), targets, np.ones((1, 6), bool))
        assert loss.item() < 1e-12

    def test_matches_high_precision_reference(self):
        import mpmath

        mpmath.mp.dps = 40
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(1, 3, 5))
        targets = rng.integers(0, 5, size=(1, 3))
        mask = np.array([[True, False, True]])
        expected = mpmath.mpf(0)
        for t in range(3):
            if not mask[0, t]:
                continue
            row = [mpmath.mpf(x) for x in logits[0, t]]
            lse = mpmath.log(sum(mpmath.e ** v for v in row))
            expected += -(row[targets[0, t]] - lse)
        expected /= 2
        loss = lm_loss(Tensor(logits), targets, mask)
        assert loss.item() == pytest.approx(float(expected), abs=1e-12)

    def test_empty_mask_rejected(self):
        with pytest.raises(UsageError):
            lm_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
        targets = rng.integers(0, 6, size=(2, 4))
        mask = np.ones((2, 4), bool)
        rep = T.grad_check(lambda t: lm_loss(t, targets, mask), logits, h=1e-5, tol=1e-5)
        assert rep.passed


class TestCurriculum:
    def setup_method(self):
        self.sched = CurriculumSchedule(phase_a_end=10, phase_b_end=20, phase_c_end=30)

    def test_step_zero_is_phase_a(self):
        f = curriculum_step(self.sched, 0)
        assert f.phase == "A"
        assert f.ablate == {"sga", "moe", "workspace", "pkm"}

    def test_past_all_boundaries_is_phase_d(self):
        f = curriculum_step(self.sched, 999)
        assert f.phase == "D" and f.ablate == frozenset()

    def test_boundary_joins_later_phase(self):
        assert curriculum_step(self.sched, 10).phase == "B"
        assert curriculum_step(self.sched, 20).phase == "C"
        assert curriculum_step(self.sched, 30).phase == "D"

    def test_tau_anneals_in_b(self):
        f0 = curriculum_step(self.sched, 10)
        f1 = curriculum_step(self.sched, 19)
        assert f0.tau == pytest.approx(0.9)
        assert f0.tau > f1.tau >= 0.5

    def test_balance_weight_from_c(self):
        assert curriculum_step(self.sched, 15).balance_weight == 0.0
        assert curriculum_step(self.sched, 25).balance_weight > 0.0

    def test_param_phases(self):
        assert param_phase("blocks.0.ssm.input_proj") == "A"
        assert param_phase("embedding") == "A"
        assert param_phase("blocks.1.sga.q_proj") == "B"
        assert param_phase("blocks.0.gates.g2") == "B"
        assert param_phase("router.w_sga") == "B"
        assert param_phase("blocks.1.moe.expert0.w_in") == "C"
        assert param_phase("router.w_moe") == "C"
        assert param_phase("workspace.init_slots") == "D"
        assert param_phase("pkm.values") == "D"
        assert param_phase("router.w_mem_pkm") == "D"


def tiny_run(seed=0, epochs=2, curriculum=None, ablate=()):
    vocab = logic_vocab(10)
    cfg = ModelConfig(vocab=vocab.size, d=16, n_blocks=2, n_heads=2, chunk_size=4,
                      routing_dim=8, n_experts=2, moe_hidden=16, sga_window=8,
                      sga_max_globals=2, ws_slots=4, ws_active=2, ws_rank=4,
                      pkm_n=4, pkm_dk=8, pkm_dv=16, pkm_t=2, pkm_kc=2, max_len=32,
                      seed=seed, sga_blocks=[1], moe_blocks=[0, 1])
    train = [gen_logic_chain(10, 1, s) for s in range(32)]
    evals = [gen_logic_chain(10, 1, 1000 + s) for s in range(8)]
    params = build_hydra(cfg)
    settings = TrainSettings(epochs=epochs, batch_size=8, curriculum=curriculum)
    report = train_model("hydra", cfg, params, train, evals, settings, seed, ablate=ablate)
    return cfg, params, report


class TestTrainLoop:
    def test_phase_a_freezes_non_ssm_params(self):
        sched = CurriculumSchedule(phase_a_end=100, phase_b_end=200, phase_c_end=300)
        cfg, params, _ = tiny_run(curriculum=sched, epochs=1)
        fresh = build_hydra(cfg)
        for (name, p), (_, q) in zip(params.parameters(), fresh.parameters()):
            if param_phase(name) != "A":
                np.testing.assert_array_equal(p.data, q.data), name
            elif name.startswith("blocks.0.ssm"):
                assert np.abs(p.data - q.data).max() > 0, name

    def test_ablated_component_params_frozen(self):
        cfg, params, _ = tiny_run(ablate=("workspace",), epochs=1)
        fresh = build_hydra(cfg)
        for (name, p), (_, q) in zip(params.parameters(), fresh.parameters()):
            if name.startswith("workspace."):
                np.testing.assert_array_equal(p.data, q.data)

    def test_deterministic_reports_modulo_walltime(self):
        _, _, r1 = tiny_run(seed=3, epochs=2)
        _, _, r2 = tiny_run(seed=3, epochs=2)
        for a, b in zip(r1.rows, r2.rows):
            for col in a:
                if col == "wall_time_s":
                    continue
                assert a[col] == b[col], col

    def test_report_csv_round_trip_columns(self):
        _, _, rep = tiny_run(epochs=1)
        text = rep.to_csv()
        header = text.splitlines()[0].split(",")
        from hydra_lab.training import TRAIN_REPORT_COLUMNS

        assert header == TRAIN_REPORT_COLUMNS
        assert len(text.splitlines()) == 2

    def test_gate_statistics_logged(self):
        _, _, rep = tiny_run(epochs=1)
        row = rep.rows[0]
        assert 0.0 < float(row["mean_p_sga"]) < 1.0
        assert 0.0 < float(row["mean_beta_ws"]) < 1.0
        assert float(row["expert_entropy"]) > 0.0
