"""
Task and prompt sampling for in-context regression over orthonormal features,
plus the cone-structured token embeddings fed to the model

Every random draw goes through a Philox generator seeded from
(seed, stream tag, indices...), so a prompt depends only on its own indices
and never on thread scheduling.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from models.data import DataConfig
from utils.logging_config import get_logger
from utils.error_handlers import InvalidArgumentError
from utils.parallel import ordered_map

logger = get_logger(__name__)

# RNG stream tags
STREAM_TRAIN = 1
STREAM_TRACK = 2
STREAM_OOD = 3
STREAM_GRADCHECK = 4
STREAM_EVAL = 5

def make_rng(seed: int, tag: int, *indices: int) -> np.random.Generator:
    """Philox generator for the stream (seed, tag, indices...)"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(tag), *map(int, indices)])))

@dataclass
class Task:
    w: np.ndarray
    ood: bool = False

@dataclass
class Prompt:
    """Feature indices of the N_in examples and the question, with their labels"""
    feature_indices: np.ndarray
    labels: np.ndarray
    question_index: int

    @property
    def n_examples(self) -> int:
        return int(self.feature_indices.size)

    def inputs(self, config: DataConfig) -> np.ndarray:
        return config.features[self.feature_indices]

    def question(self, config: DataConfig) -> np.ndarray:
        return config.features[self.question_index]

    def index_sets(self, K: int) -> List[np.ndarray]:
        """V_k: 0-based example indices whose input is feature k"""
        return [np.flatnonzero(self.feature_indices == k) for k in range(K)]

@dataclass
class EmbeddingMatrix:
    """N × d token embeddings; columns [c | x | flag | y]"""
    E: np.ndarray
    d_b: int

    @property
    def xy(self) -> np.ndarray:
        return self.E[:, self.d_b:]

    @property
    def y(self) -> np.ndarray:
        return self.E[:, -1]

    @property
    def question_xy(self) -> np.ndarray:
        return self.E[-1, self.d_b:]

@dataclass
class PromptBatch:
    """Tasks, prompts and stacked embeddings (B, N, d) for one Monte Carlo batch"""
    tasks: List[Task]
    prompts: List[Prompt]
    embeddings: np.ndarray
    d_b: int

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def targets(self) -> np.ndarray:
        """⟨w, x_q⟩ per prompt"""
        return np.array([task.w[prompt.question_index] for task, prompt in zip(self.tasks, self.prompts)])

    @property
    def question_indices(self) -> np.ndarray:
        return np.array([prompt.question_index for prompt in self.prompts], dtype=int)

    def subset(self, start: int, stop: int) -> "PromptBatch":
        return PromptBatch(self.tasks[start:stop], self.prompts[start:stop], self.embeddings[start:stop], self.d_b)

def sample_task(rng: np.random.Generator, config: DataConfig) -> Task:
    """w uniform on the sphere of radius sqrt(d_X): zero mean, identity covariance"""
    g = rng.standard_normal(config.d_X)
    return Task(w=g * (np.sqrt(config.d_X) / np.linalg.norm(g)))

def ood_task(rng: np.random.Generator, config: DataConfig, scale: float) -> Task:
    """Task with ‖w‖ = scale·sqrt(d_X), outside the training family"""
    if not scale > 1:
        raise InvalidArgumentError(f"OOD scale must exceed 1, got {scale}", details={"scale": scale})
    task = sample_task(rng, config)
    return Task(w=task.w * scale, ood=True)

def sample_prompt(
    rng: np.random.Generator,
    task: Task,
    config: DataConfig,
    question_index: Optional[int] = None
) -> Prompt:
    """
    Draw N_in inputs and the question i.i.d. from the feature distribution

    ``question_index`` fixes the question feature (tracking prompts).
    """
    indices = rng.choice(config.K, size=config.N_in, p=config.probs)
    if question_index is None:
        question_index = int(rng.choice(config.K, p=config.probs))
    elif not (0 <= question_index < config.K):
        raise InvalidArgumentError(f"question_index {question_index} outside [0, {config.K})")
    labels = config.features[indices] @ task.w
    return Prompt(feature_indices=indices, labels=labels, question_index=int(question_index))

def embed(prompt: Prompt, config: DataConfig) -> EmbeddingMatrix:
    """
    Rows 2i−1 = [c; x_i; 0; 0], rows 2i = [c; 0; 1; y_i], last row [c; x_q; 0; 0]
    (1-based positions)
    """
    d_b, d_X = config.d_b, config.d_X
    E = np.zeros((config.N, config.d))
    E[:, :d_b] = config.cone
    E[0:-1:2, d_b:d_b + d_X] = prompt.inputs(config)
    E[1:-1:2, -2] = 1.0
    E[1:-1:2, -1] = prompt.labels
    E[-1, d_b:d_b + d_X] = prompt.question(config)
    return EmbeddingMatrix(E=E, d_b=d_b)

def sample_batch(
    config: DataConfig,
    size: int,
    seed: int,
    tag: int,
    key: Tuple[int, ...] = (),
    question_index: Optional[int] = None,
    ood_scale: Optional[float] = None,
    threads: int = 1
) -> PromptBatch:
    """
    Draw ``size`` (task, prompt, embedding) triples

    Prompt b uses the stream (seed, tag, *key, b); OOD tasks are drawn when
    ood_scale exceeds 1.
    """
    if size < 1:
        raise InvalidArgumentError(f"batch size must be positive, got {size}")

    def draw(b: int):
        rng = make_rng(seed, tag, *key, b)
        if ood_scale is not None and ood_scale > 1:
            task = ood_task(rng, config, ood_scale)
        else:
            task = sample_task(rng, config)
        prompt = sample_prompt(rng, task, config, question_index)
        return task, prompt, embed(prompt, config).E

    drawn = ordered_map(draw, range(size), threads)
    return PromptBatch(
        tasks=[item[0] for item in drawn],
        prompts=[item[1] for item in drawn],
        embeddings=np.stack([item[2] for item in drawn]),
        d_b=config.d_b,
    )
