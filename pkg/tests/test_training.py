"""
Tests for the loss, closed-form gradients, the finite-difference oracle and the two-stage trainer
"""
import numpy as np
import pytest

from models.data import DataConfig
from models.experiment import FrequencyConfig
from models.training import TrainConfig
from services.icl_data import STREAM_TRAIN, PromptBatch, Task, make_rng, sample_batch
from services.rope_core import build_frequencies, rotation_matrix
from services.shallow_model import ReducedParams, causal_softmax, layer1_logits
from services.training import (
    DynamicsSnapshot,
    TwoStageTrainer,
    batch_loss,
    batch_terms,
    finite_diff_grad,
    grad_w1,
    grad_w2,
    gradient_check,
    logit_gap,
    make_batch,
    mc_loss,
    min_prev_score,
    relative_error,
    two_stage_gd,
)
from utils.error_handlers import DivergedError, InvalidArgumentError

def brute_force_loss(params, batch, config, freqs):
    """Per-prompt loop with explicit rotation matrices"""
    semantic = freqs.semantic_sequence()
    N, d_b = config.N, config.d_b
    S1 = causal_softmax(layer1_logits(params, config, freqs))
    total = 0.0
    for E, target in zip(batch.embeddings, batch.targets):
        Exy = E[:, d_b:]
        query = rotation_matrix(N, semantic) @ (params.W2.T @ Exy[-1])
        u = np.array([
            query @ (rotation_matrix(r + 1, semantic) @ (S1[r] @ Exy))
            for r in range(N)
        ])
        weights = np.exp(u - u.max())
        weights /= weights.sum()
        total += (weights @ E[:, -1] - target) ** 2
    return total / (2 * len(batch))

def perturbed_params(config, seed):
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((config.d_b, config.d_b)) / np.sqrt(config.d_b)
    W2 = np.eye(config.d_X + 2) + 0.3 * rng.standard_normal((config.d_X + 2, config.d_X + 2))
    return ReducedParams(W1=W1, W2=W2)

def pulse_w1(config, freqs, scale=1.0):
    """Cone-row W1 whose lag logits peak at lag 1 by cone_band_len + 1/2 per unit scale"""
    g = np.array([np.cos(freqs.cone_band), -np.sin(freqs.cone_band)]).T.reshape(-1)
    return scale * np.outer(config.cone, g)

class TestLoss:
    """Monte Carlo loss"""

    def test_matches_brute_force(self, small_data, small_freqs):
        batch = sample_batch(small_data, 16, 0, STREAM_TRAIN)
        for params in (ReducedParams.initial(small_data), perturbed_params(small_data, 1)):
            expected = brute_force_loss(params, batch, small_data, small_freqs)
            assert batch_loss(params, batch, small_data, small_freqs) == pytest.approx(expected, rel=1e-10)

    def test_batch_terms_loss_matches(self, small_data, small_freqs):
        batch = sample_batch(small_data, 10, 0, STREAM_TRAIN)
        params = perturbed_params(small_data, 2)
        loss, _, _ = batch_terms(params, batch, small_data, small_freqs, chunk_size=3)
        assert loss == pytest.approx(batch_loss(params, batch, small_data, small_freqs), rel=1e-12)

    def test_mc_loss_is_seeded(self, small_data, small_freqs):
        params = ReducedParams.initial(small_data)
        first = mc_loss(params, np.random.default_rng(5), 32, small_data, small_freqs)
        second = mc_loss(params, np.random.default_rng(5), 32, small_data, small_freqs)
        assert first == second
        assert first > 0

    def test_make_batch_rejects_empty(self, small_data):
        with pytest.raises(InvalidArgumentError):
            make_batch(np.random.default_rng(0), 0, small_data)

class TestGradients:
    """Closed-form gradients against central differences"""

    def test_gradient_oracle(self, small_data, small_freqs):
        result = gradient_check(small_data, small_freqs, points=10, batch_size=8, seed=0)
        assert result.max_rel_error_w1 <= 1e-5
        assert result.max_rel_error_w2 <= 1e-5
        assert result.passed
        assert len(result.per_point) == 10

    def test_w1_gradient_lives_in_cone_row(self, small_data, small_freqs):
        batch = sample_batch(small_data, 8, 3, STREAM_TRAIN)
        g = grad_w1(perturbed_params(small_data, 3), batch, small_data, small_freqs)
        assert g.shape == (small_data.d_b, small_data.d_b)
        assert np.all(g[1:] == 0.0)

    def test_w2_gradient_shape(self, small_data, small_freqs):
        batch = sample_batch(small_data, 8, 3, STREAM_TRAIN)
        g = grad_w2(perturbed_params(small_data, 3), batch, small_data, small_freqs)
        assert g.shape == (small_data.d_X + 2, small_data.d_X + 2)

    def test_zero_residuals_give_zero_gradients(self, small_data, small_freqs):
        batch = sample_batch(small_data, 6, 2, STREAM_TRAIN)
        embeddings = batch.embeddings.copy()
        embeddings[..., -1] = 0.0
        tasks = [Task(w=np.zeros(small_data.d_X)) for _ in batch.tasks]
        silent = PromptBatch(tasks, batch.prompts, embeddings, batch.d_b)
        params = perturbed_params(small_data, 5)
        assert np.all(grad_w1(params, silent, small_data, small_freqs) == 0.0)
        assert np.all(grad_w2(params, silent, small_data, small_freqs) == 0.0)

    def test_first_stage_one_step_opens_lag_one_gap(self, small_data, small_freqs):
        params = ReducedParams.initial(small_data)
        assert logit_gap(params.W1, small_data, small_freqs) == 0.0
        batch = sample_batch(small_data, 256, 0, STREAM_TRAIN, key=(0,))
        W1 = params.W1 - 1.0 * grad_w1(params, batch, small_data, small_freqs)
        assert logit_gap(W1, small_data, small_freqs) > 0.0

    def test_stage_two_step_raises_feature_logits(self, small_data, small_freqs):
        W1 = pulse_w1(small_data, small_freqs, scale=4.0)
        params = ReducedParams(W1=W1, W2=np.eye(small_data.d_X + 2))
        train = TrainConfig(batch_size=256, tracking_prompts=64, seed=0)
        trainer = TwoStageTrainer(small_data, train, small_freqs)
        before = trainer.track(params, 0, stage=2)
        assert before.min_prev_score >= 0.999

        batch = sample_batch(small_data, 256, 0, STREAM_TRAIN, key=(0,))
        stepped = ReducedParams(W1=W1, W2=params.W2 - 1.0 * grad_w2(params, batch, small_data, small_freqs))
        after = trainer.track(stepped, 0, stage=2)
        assert np.all(np.diag(after.feature_logit_means) > np.diag(before.feature_logit_means))

    def test_threads_do_not_change_gradients(self, small_data, small_freqs):
        batch = sample_batch(small_data, 11, 4, STREAM_TRAIN)
        params = perturbed_params(small_data, 4)
        serial = batch_terms(params, batch, small_data, small_freqs, chunk_size=2, threads=1)
        threaded = batch_terms(params, batch, small_data, small_freqs, chunk_size=2, threads=4)
        assert serial[0] == threaded[0]
        assert np.array_equal(serial[1], threaded[1])
        assert np.array_equal(serial[2], threaded[2])

class TestFiniteDifferences:
    """Central-difference oracle"""

    def test_quadratic(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        x = np.array([0.5, -1.0])
        grad = finite_diff_grad(lambda v: 0.5 * v @ A @ v, x, h=1e-4)
        assert np.allclose(grad, A @ x, atol=1e-9)

    def test_error_decays_quadratically(self):
        x = np.array([0.3, 1.1, -0.7])
        exact = np.cos(x)
        coarse = np.max(np.abs(finite_diff_grad(lambda v: np.sin(v).sum(), x, h=1e-2) - exact))
        fine = np.max(np.abs(finite_diff_grad(lambda v: np.sin(v).sum(), x, h=5e-3) - exact))
        assert coarse / fine == pytest.approx(4.0, rel=0.05)

    def test_point_left_unchanged(self):
        x = np.array([1.0, 2.0])
        finite_diff_grad(lambda v: float(v.sum()), x)
        assert np.array_equal(x, [1.0, 2.0])

    def test_step_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            finite_diff_grad(lambda v: 0.0, np.zeros(2), h=0.0)

    def test_relative_error(self):
        assert relative_error(np.array([1.0, 2.1]), np.array([1.0, 2.0])) == pytest.approx(0.05)
        assert relative_error(np.array([1e-3]), np.zeros(1)) == pytest.approx(1e-3)

class TestDynamics:
    """Snapshot statistics"""

    def test_min_prev_score(self):
        shift = np.eye(5, k=-1)
        shift[0, 0] = 1.0
        assert min_prev_score(shift) == 1.0
        uniform = causal_softmax(np.zeros((5, 5)))
        assert min_prev_score(uniform) == pytest.approx(0.2)

    def test_logit_gap_of_pulse_solution(self, small_data, small_freqs):
        W1 = pulse_w1(small_data, small_freqs)
        assert logit_gap(W1, small_data, small_freqs) == pytest.approx(small_freqs.cone_band_len + 0.5)
        assert logit_gap(np.zeros_like(W1), small_data, small_freqs) == 0.0

    def test_snapshot_row_columns(self):
        snap = DynamicsSnapshot(
            t=3, stage=2, min_prev_score=0.9, logit_gap=1.0, slash_score_d1=0.95, loss_estimate=0.2,
            feature_logit_means=np.array([[1.0, 0.0], [0.0, 1.0]]), feature_scores=np.array([0.8, 0.6]),
        )
        row = snap.to_row()
        assert list(row) == [
            "t", "stage", "loss", "min_prev_score", "logit_gap", "slash_score_d1",
            "S_1", "S_2", "B_1_1", "B_1_2", "B_2_1", "B_2_2",
        ]
        assert np.allclose(snap.feature_errors, [0.04, 0.16])

class TestTwoStageTrainer:
    """Short training runs"""

    @pytest.fixture
    def short_train(self):
        return TrainConfig(tau1=3, tau2=4, batch_size=8, snapshot_every=2, tracking_prompts=4, chunk_size=4, seed=9)

    def test_snapshot_schedule(self, tiny_data, tiny_freqs, short_train):
        seen = []
        result = TwoStageTrainer(tiny_data, short_train, tiny_freqs, on_snapshot=seen.append).run()
        times = [snap.t for snap in result.snapshots]
        assert times[0] == 0
        assert times == sorted(set(times))
        assert result.final.t == result.stage1_steps + result.stage2_steps
        assert result.stage2_start_snapshot.t == result.stage1_steps
        assert result.stage2_steps == 4
        assert len(seen) == len(result.snapshots)
        assert result.pulse_passed

    def test_stages_update_their_own_block(self, tiny_data, tiny_freqs, short_train):
        result = TwoStageTrainer(tiny_data, short_train, tiny_freqs).run()
        assert np.any(result.params.W1 != 0.0)
        assert np.any(result.params.W2 != np.eye(tiny_data.d_X + 2))

        frozen = short_train.model_copy(update={"eta2": 0.0})
        stage1_only = TwoStageTrainer(tiny_data, frozen, tiny_freqs).run()
        assert np.array_equal(stage1_only.params.W2, np.eye(tiny_data.d_X + 2))
        assert np.array_equal(stage1_only.params.W1, result.params.W1)

    def test_zero_stage_one_rate_keeps_w1_zero(self, tiny_data, tiny_freqs, short_train):
        frozen = short_train.model_copy(update={"eta1": 0.0})
        result = TwoStageTrainer(tiny_data, frozen, tiny_freqs).run()
        assert result.stage1_steps == frozen.tau1
        assert np.all(result.params.W1 == 0.0)

    def test_stage_one_leaves_w2_untouched(self, tiny_data, tiny_freqs, short_train):
        stage1_only = short_train.model_copy(update={"tau2": 0})
        result = TwoStageTrainer(tiny_data, stage1_only, tiny_freqs).run()
        assert result.stage1_steps > 0
        assert np.any(result.params.W1 != 0.0)
        assert np.array_equal(result.params.W2, np.eye(tiny_data.d_X + 2))

    def test_previous_token_score_grows_during_stage_one(self, tiny_data, tiny_freqs):
        train = TrainConfig(tau1=8, tau2=0, batch_size=64, snapshot_every=1, tracking_prompts=4, seed=3)
        result = TwoStageTrainer(tiny_data, train, tiny_freqs).run()
        scores = [snap.min_prev_score for snap in result.snapshots if snap.stage == 1]
        assert len(scores) >= 2
        assert all(later >= earlier - 0.02 for earlier, later in zip(scores, scores[1:]))
        assert scores[-1] > scores[0]

    def test_snapshot_gap_matches_final_weights(self, tiny_data, tiny_freqs, short_train):
        result = TwoStageTrainer(tiny_data, short_train, tiny_freqs).run()
        expected = logit_gap(result.params.W1, tiny_data, tiny_freqs)
        assert result.final.logit_gap == pytest.approx(expected, abs=1e-12)

    def test_reproducible_across_threads(self, tiny_data, tiny_freqs, short_train):
        serial = TwoStageTrainer(tiny_data, short_train, tiny_freqs, threads=1).run()
        threaded = TwoStageTrainer(tiny_data, short_train, tiny_freqs, threads=3).run()
        assert np.array_equal(serial.params.W1, threaded.params.W1)
        assert np.array_equal(serial.params.W2, threaded.params.W2)
        assert [s.to_row() for s in serial.snapshots] == [s.to_row() for s in threaded.snapshots]

    def test_functional_wrapper(self, tiny_data, tiny_freqs, short_train):
        params, snapshots = two_stage_gd(short_train, tiny_data, tiny_freqs)
        assert params.W1.shape == (tiny_data.d_b, tiny_data.d_b)
        assert snapshots[0].t == 0

    def test_divergence_reports_step(self, tiny_data, tiny_freqs, short_train, monkeypatch):
        def exploding(params, batch, config, freqs, **kwargs):
            return float("nan"), np.zeros_like(params.W1), np.zeros_like(params.W2)

        monkeypatch.setattr("services.training.batch_terms", exploding)
        with pytest.raises(DivergedError) as info:
            TwoStageTrainer(tiny_data, short_train, tiny_freqs).run()
        assert info.value.details["step"] == 0
        assert info.value.details["stage"] == 1

    def test_classic_band_warns_but_trains(self, tiny_data, short_train, caplog):
        freqs = build_frequencies(FrequencyConfig(mode="classic"), tiny_data)
        with caplog.at_level("WARNING"):
            result = TwoStageTrainer(tiny_data, short_train, freqs).run()
        assert not result.pulse_passed
        assert any("pulse" in record.getMessage() for record in caplog.records)

    def test_default_targets(self):
        eps1, eps2 = TrainConfig().targets(129)
        assert eps1 == pytest.approx(0.1)
        assert eps2 == pytest.approx(max(0.3, 129 ** -0.25))
