"""
Tests for task/prompt sampling, embeddings and seeded batches
"""
import numpy as np
import pytest

from models.data import DataConfig
from services.icl_data import (
    STREAM_EVAL,
    STREAM_TRAIN,
    Prompt,
    embed,
    make_rng,
    ood_task,
    sample_batch,
    sample_prompt,
    sample_task,
)
from utils.error_handlers import InvalidArgumentError

class TestTasks:
    """Task families"""

    def test_task_norm(self, small_data):
        task = sample_task(make_rng(0, STREAM_TRAIN, 0), small_data)
        assert np.linalg.norm(task.w) == pytest.approx(np.sqrt(small_data.d_X))
        assert not task.ood

    def test_task_moments(self):
        config = DataConfig(K=2, N_in=2, d_X=4, d_b=8)
        rng = make_rng(1, STREAM_TRAIN)
        W = np.array([sample_task(rng, config).w for _ in range(20000)])
        assert np.allclose(W.mean(axis=0), 0.0, atol=0.05)
        assert np.allclose(np.cov(W.T, bias=True), np.eye(4), atol=0.05)

    def test_ood_task_scaled(self, small_data):
        task = ood_task(make_rng(0, STREAM_TRAIN, 0), small_data, 3.0)
        assert task.ood
        assert np.linalg.norm(task.w) == pytest.approx(3.0 * np.sqrt(small_data.d_X))

    def test_ood_scale_must_exceed_one(self, small_data):
        with pytest.raises(InvalidArgumentError):
            ood_task(make_rng(0, STREAM_TRAIN, 0), small_data, 1.0)

class TestPrompts:
    """Prompt draws and index sets"""

    def test_labels_follow_task(self, small_data):
        rng = make_rng(2, STREAM_TRAIN, 0)
        task = sample_task(rng, small_data)
        prompt = sample_prompt(rng, task, small_data)
        assert prompt.n_examples == small_data.N_in
        assert np.allclose(prompt.labels, prompt.inputs(small_data) @ task.w)

    def test_fixed_question(self, small_data):
        rng = make_rng(2, STREAM_TRAIN, 0)
        prompt = sample_prompt(rng, sample_task(rng, small_data), small_data, question_index=1)
        assert prompt.question_index == 1
        with pytest.raises(InvalidArgumentError):
            sample_prompt(rng, sample_task(rng, small_data), small_data, question_index=2)

    def test_index_sets_partition_examples(self):
        prompt = Prompt(feature_indices=np.array([1, 0, 1, 1]), labels=np.zeros(4), question_index=0)
        sets = prompt.index_sets(2)
        assert list(sets[0]) == [1]
        assert list(sets[1]) == [0, 2, 3]

    def test_degenerate_feature_distribution(self):
        config = DataConfig(K=2, N_in=5, d_X=2, d_b=4, feature_probs=[1.0, 0.0])
        rng = make_rng(0, STREAM_TRAIN)
        prompt = sample_prompt(rng, sample_task(rng, config), config)
        assert np.all(prompt.feature_indices == 0)
        assert prompt.question_index == 0
        assert prompt.index_sets(2)[1].size == 0

class TestEmbedding:
    """Cone-structured embedding layout"""

    def test_layout(self, small_data):
        config = small_data
        prompt = Prompt(feature_indices=np.array([0, 1, 1, 0]), labels=np.array([0.5, -1.0, -1.0, 0.5]), question_index=1)
        E = embed(prompt, config).E
        d_b, d_X = config.d_b, config.d_X
        assert E.shape == (config.N, config.d)
        assert np.all(E[:, :d_b] == config.cone)
        assert np.array_equal(E[0, d_b:], [1, 0, 0, 0, 0, 0])
        assert np.array_equal(E[1, d_b:], [0, 0, 0, 0, 1, 0.5])
        assert np.array_equal(E[3, d_b:], [0, 0, 0, 0, 1, -1.0])
        assert np.array_equal(E[-1, d_b:], [0, 1, 0, 0, 0, 0])
        assert np.all(E[0:-1:2, -2:] == 0)

    def test_cone_component_shared(self, small_data):
        rng = make_rng(5, STREAM_TRAIN)
        prompt = sample_prompt(rng, sample_task(rng, small_data), small_data)
        E = embed(prompt, small_data).E
        assert np.allclose(E[:, :small_data.d_b] @ small_data.cone, 1.0)

class TestBatches:
    """Seeded batches"""

    def test_same_seed_same_batch(self, small_data):
        first = sample_batch(small_data, 6, 42, STREAM_TRAIN, key=(3,))
        second = sample_batch(small_data, 6, 42, STREAM_TRAIN, key=(3,))
        assert np.array_equal(first.embeddings, second.embeddings)
        assert np.array_equal(first.targets, second.targets)

    def test_threads_do_not_change_draws(self, small_data):
        serial = sample_batch(small_data, 9, 7, STREAM_EVAL)
        threaded = sample_batch(small_data, 9, 7, STREAM_EVAL, threads=4)
        assert np.array_equal(serial.embeddings, threaded.embeddings)

    def test_prompt_depends_only_on_its_index(self, small_data):
        short = sample_batch(small_data, 3, 7, STREAM_EVAL)
        long = sample_batch(small_data, 8, 7, STREAM_EVAL)
        assert np.array_equal(short.embeddings, long.embeddings[:3])

    def test_streams_differ(self, small_data):
        train = sample_batch(small_data, 4, 7, STREAM_TRAIN)
        evaluation = sample_batch(small_data, 4, 7, STREAM_EVAL)
        assert not np.array_equal(train.embeddings, evaluation.embeddings)

    def test_targets(self, small_data):
        batch = sample_batch(small_data, 5, 1, STREAM_TRAIN)
        for task, prompt, target in zip(batch.tasks, batch.prompts, batch.targets):
            assert target == pytest.approx(task.w[prompt.question_index])
        subset = batch.subset(1, 3)
        assert len(subset) == 2
        assert np.array_equal(subset.embeddings, batch.embeddings[1:3])

    def test_ood_batch(self, small_data):
        batch = sample_batch(small_data, 4, 1, STREAM_EVAL, ood_scale=3.0)
        assert all(task.ood for task in batch.tasks)

    def test_empty_batch_rejected(self, small_data):
        with pytest.raises(InvalidArgumentError):
            sample_batch(small_data, 0, 1, STREAM_TRAIN)
