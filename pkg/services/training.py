"""
Loss, closed-form gradients and two-stage gradient descent for the reduced model

Stage I trains the layer-1 query block W1 with W2 held at the identity;
Stage II trains W2 with W1 frozen. Every step draws a fresh Monte Carlo
batch; batch terms are evaluated in fixed chunks and reduced in a fixed
order, so results do not depend on the thread count.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from models.data import DataConfig
from models.training import TrainConfig
from services.rope_core import FrequencySequence, rotate_rows, pulse_check
from services.icl_data import (
    PromptBatch,
    sample_batch,
    make_rng,
    STREAM_TRAIN,
    STREAM_TRACK,
    STREAM_GRADCHECK,
)
from services.slash_analysis import average_slash_score
from services.shallow_model import (
    ReducedParams,
    causal_mask,
    causal_softmax,
    cone_key_rotations,
    feature_membership,
    lag_logits,
    lag_matrix,
    layer1_logits,
    layer2_logits,
    predict,
)
from utils.logging_config import get_logger, log_operation
from utils.error_handlers import DivergedError, InvalidArgumentError
from utils.parallel import ordered_map, fixed_order_sum

logger = get_logger(__name__)

GRADCHECK_TOLERANCE = 1e-5

@dataclass
class BatchTerms:
    """Summed (not averaged) loss and gradient pieces of one chunk"""
    loss: float
    lag_grad: Optional[np.ndarray]
    grad_w2: Optional[np.ndarray]

@dataclass
class DynamicsSnapshot:
    """
    Tracking-set statistics at global step t

    ``feature_logit_means[k][m]`` is the mean layer-2 logit at even positions
    holding feature m when the question is feature k; ``feature_scores[k]``
    is the mean aggregated layer-2 score on feature k for those prompts.
    """
    t: int
    stage: int
    min_prev_score: float
    logit_gap: float
    slash_score_d1: float
    loss_estimate: float
    feature_logit_means: np.ndarray
    feature_scores: np.ndarray

    @property
    def feature_errors(self) -> np.ndarray:
        """(1 − S_k)² per question feature"""
        return (1.0 - self.feature_scores) ** 2

    def to_row(self) -> Dict[str, float]:
        row = {
            "t": self.t,
            "stage": self.stage,
            "loss": self.loss_estimate,
            "min_prev_score": self.min_prev_score,
            "logit_gap": self.logit_gap,
            "slash_score_d1": self.slash_score_d1,
        }
        K = self.feature_scores.size
        for k in range(K):
            row[f"S_{k + 1}"] = float(self.feature_scores[k])
        for k in range(K):
            for m in range(K):
                row[f"B_{k + 1}_{m + 1}"] = float(self.feature_logit_means[k, m])
        return row

@dataclass
class TrainingResult:
    params: ReducedParams
    snapshots: List[DynamicsSnapshot]
    stage1_steps: int
    stage2_steps: int
    stage2_start: int
    pulse_passed: bool
    elapsed_s: float = 0.0

    @property
    def final(self) -> DynamicsSnapshot:
        return self.snapshots[-1]

    @property
    def stage2_start_snapshot(self) -> DynamicsSnapshot:
        return self.snapshots[self.stage2_start]

@dataclass
class GradCheckResult:
    max_rel_error_w1: float
    max_rel_error_w2: float
    points: int
    batch_size: int
    h: float
    per_point: List[Dict[str, float]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_error_w1, self.max_rel_error_w2)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADCHECK_TOLERANCE

    def to_dict(self) -> Dict:
        return {
            "max_rel_error": self.max_rel_error,
            "max_rel_error_w1": self.max_rel_error_w1,
            "max_rel_error_w2": self.max_rel_error_w2,
            "tolerance": GRADCHECK_TOLERANCE,
            "passed": self.passed,
            "points": self.points,
            "batch_size": self.batch_size,
            "h": self.h,
            "per_point": self.per_point,
        }

def min_prev_score(S1: np.ndarray) -> float:
    """min over rows r ≥ 1 of S1[r, r−1]"""
    return float(np.min(np.diagonal(S1, offset=-1)))

def logit_gap(W1: np.ndarray, config: DataConfig, freqs: FrequencySequence) -> float:
    """
    min over rows of A[r, r−1] − max_{s ≤ r, s ≠ r−1} A[r, s]

    A is Toeplitz, so this is a(1) − max(a(0), a(2), ..., a(N−1)).
    """
    a = lag_logits(W1, config, freqs)
    if a.size < 2:
        raise InvalidArgumentError("logit gap needs N ≥ 2")
    others = np.concatenate([a[:1], a[2:]])
    return float(a[1] - np.max(others))

def _chunk_terms(
    params: ReducedParams,
    S1: np.ndarray,
    E: np.ndarray,
    targets: np.ndarray,
    config: DataConfig,
    freqs: FrequencySequence,
    want_w1: bool,
    want_w2: bool
) -> BatchTerms:
    d_b = config.d_b
    N = config.N
    semantic = freqs.semantic_sequence()
    positions = np.arange(1, N + 1, dtype=np.float64)

    Exy = E[..., d_b:]
    u = layer2_logits(params, S1, E, freqs)
    S2, _, y_hat = predict(u, E, config)
    y = E[..., -1]
    residual = y_hat - targets
    loss = float(np.sum(residual ** 2) / 2.0)

    # dL/du_r = e · S2_r (y_r − ŷ)
    g_u = residual[:, None] * S2 * (y - y_hat[:, None])
    query = Exy[:, -1, :] @ params.W2

    lag_grad = None
    if want_w1:
        # I[r, s] = ⟨R_{N−r−1} W2^T E_q, E_s^{x,y}⟩, so u_r = Σ_s S1[r, s] I[r, s]
        P = rotate_rows(query[:, None, :], N - positions, semantic)
        I = np.einsum("bnw,bsw->bns", P, Exy)
        G = np.einsum("bn,bns->ns", g_u, S1 * (I - u[:, :, None]))
        mask = causal_mask(N)
        lag_grad = np.bincount(lag_matrix(N)[mask], weights=G[mask], minlength=N)

    grad_w2 = None
    if want_w2:
        Z = np.matmul(S1, Exy)
        M = rotate_rows(Z, positions - N, semantic)
        grad_w2 = Exy[:, -1, :].T @ np.einsum("bn,bnw->bw", g_u, M)

    return BatchTerms(loss=loss, lag_grad=lag_grad, grad_w2=grad_w2)

def batch_terms(
    params: ReducedParams,
    batch: PromptBatch,
    config: DataConfig,
    freqs: FrequencySequence,
    want_w1: bool = True,
    want_w2: bool = True,
    chunk_size: int = 32,
    threads: int = 1
) -> Tuple[float, Optional[np.ndarray], Optional[np.ndarray]]:
    """
    Batch-mean loss and gradients (grad_W1, grad_W2) on a fixed batch

    The chunk boundaries depend only on chunk_size, never on threads.
    """
    B = len(batch)
    S1 = causal_softmax(layer1_logits(params, config, freqs))
    targets = batch.targets
    starts = list(range(0, B, chunk_size))

    def run(start: int) -> BatchTerms:
        stop = min(start + chunk_size, B)
        return _chunk_terms(
            params, S1, batch.embeddings[start:stop], targets[start:stop],
            config, freqs, want_w1, want_w2
        )

    chunks = ordered_map(run, starts, threads)
    loss = float(fixed_order_sum([np.array(c.loss) for c in chunks])) / B

    grad_w1 = None
    if want_w1:
        lag_grad = fixed_order_sum([c.lag_grad for c in chunks]) / B
        grad_w1 = np.outer(config.cone, lag_grad @ cone_key_rotations(config, freqs))
    grad_w2 = fixed_order_sum([c.grad_w2 for c in chunks]) / B if want_w2 else None
    return loss, grad_w1, grad_w2

def batch_loss(params: ReducedParams, batch: PromptBatch, config: DataConfig, freqs: FrequencySequence) -> float:
    """(1/2B) Σ (ŷ_q − ⟨w, x_q⟩)² on a fixed batch"""
    S1 = causal_softmax(layer1_logits(params, config, freqs))
    u = layer2_logits(params, S1, batch.embeddings, freqs)
    _, _, y_hat = predict(u, batch.embeddings, config)
    return float(np.sum((y_hat - batch.targets) ** 2) / (2.0 * len(batch)))

def make_batch(rng: np.random.Generator, B: int, config: DataConfig, threads: int = 1) -> PromptBatch:
    """Fixed batch drawn from a seed taken off ``rng``"""
    if B < 1:
        raise InvalidArgumentError(f"batch size must be positive, got {B}")
    seed = int(rng.integers(0, 2 ** 63))
    return sample_batch(config, B, seed, STREAM_TRAIN, threads=threads)

def mc_loss(
    params: ReducedParams,
    rng: np.random.Generator,
    B: int,
    config: DataConfig,
    freqs: FrequencySequence
) -> float:
    """Monte Carlo estimate of the squared loss on B fresh prompts"""
    return batch_loss(params, make_batch(rng, B, config), config, freqs)

def grad_w1(params: ReducedParams, batch: PromptBatch, config: DataConfig, freqs: FrequencySequence) -> np.ndarray:
    return batch_terms(params, batch, config, freqs, want_w1=True, want_w2=False)[1]

def grad_w2(params: ReducedParams, batch: PromptBatch, config: DataConfig, freqs: FrequencySequence) -> np.ndarray:
    return batch_terms(params, batch, config, freqs, want_w1=False, want_w2=True)[2]

def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of loss_fn at ``point``, one entry at a time"""
    if not h > 0:
        raise InvalidArgumentError(f"h must be positive, got {h}", details={"h": h})
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    for idx in np.ndindex(point.shape):
        original = point[idx]
        point[idx] = original + h
        upper = loss_fn(point)
        point[idx] = original - h
        lower = loss_fn(point)
        point[idx] = original
        grad[idx] = (upper - lower) / (2.0 * h)
    return grad

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic − numeric| / max |numeric|; absolute when numeric is all zero"""
    scale = float(np.max(np.abs(numeric)))
    err = float(np.max(np.abs(analytic - numeric)))
    return err / scale if scale > 0 else err

def gradient_check(
    config: DataConfig,
    freqs: FrequencySequence,
    points: int = 10,
    batch_size: int = 8,
    seed: int = 0,
    h: float = 1e-5
) -> GradCheckResult:
    """
    Compare closed-form gradients with central differences at random parameter points

    Args:
        config: Data model of the prompts
        freqs: Frequencies the loss is evaluated with
        points: Random (W1, W2) points drawn from the gradcheck stream
        batch_size: Prompts in each point's fixed batch
        seed: Seed of the gradcheck stream
        h: Central-difference step

    Returns:
        GradCheckResult; ``passed`` when both relative errors are within 1e-5
    """
    rel_w1, rel_w2 = [], []
    per_point = []
    for p in range(points):
        rng = make_rng(seed, STREAM_GRADCHECK, p)
        W1 = rng.standard_normal((config.d_b, config.d_b)) / np.sqrt(config.d_b)
        width = config.d_X + 2
        W2 = np.eye(width) + rng.standard_normal((width, width)) / np.sqrt(width)
        params = ReducedParams(W1=W1, W2=W2)
        batch = sample_batch(config, batch_size, seed, STREAM_GRADCHECK, key=(p,))

        _, g1, g2 = batch_terms(params, batch, config, freqs)
        fd1 = finite_diff_grad(lambda M: batch_loss(ReducedParams(M, W2), batch, config, freqs), W1, h)
        fd2 = finite_diff_grad(lambda M: batch_loss(ReducedParams(W1, M), batch, config, freqs), W2, h)
        e1, e2 = relative_error(g1, fd1), relative_error(g2, fd2)
        rel_w1.append(e1)
        rel_w2.append(e2)
        per_point.append({"point": p, "rel_error_w1": e1, "rel_error_w2": e2})
        logger.debug(f"Gradient check point {p}: W1 {e1:.3e}, W2 {e2:.3e}")

    return GradCheckResult(
        max_rel_error_w1=max(rel_w1),
        max_rel_error_w2=max(rel_w2),
        points=points,
        batch_size=batch_size,
        h=h,
        per_point=per_point,
    )

class TwoStageTrainer:
    """
    Two-stage gradient descent with tracking-set snapshots

    Stage I stops early once min_prev_score ≥ 1 − eps1; Stage II runs to its
    cap unless ``stage2_early_stop`` is set, in which case it stops at the
    first snapshot with every (1 − S_k)² ≤ eps2.
    """

    def __init__(
        self,
        data_config: DataConfig,
        train_config: TrainConfig,
        freqs: FrequencySequence,
        threads: int = 1,
        on_snapshot: Optional[Callable[[DynamicsSnapshot], None]] = None
    ):
        self.data = data_config
        self.train = train_config
        self.freqs = freqs
        self.threads = threads
        self.on_snapshot = on_snapshot
        self.eps1, self.eps2 = train_config.targets(data_config.N)
        self.snapshots: List[DynamicsSnapshot] = []

    def track(self, params: ReducedParams, t: int, stage: int) -> DynamicsSnapshot:
        """Statistics on tracking_prompts prompts for each question feature, seeds (seed, track, t, k)"""
        config = self.data
        K = config.K
        S1 = causal_softmax(layer1_logits(params, config, self.freqs))
        logit_means = np.full((K, K), np.nan)
        scores = np.zeros(K)
        squared = []

        for k in range(K):
            batch = sample_batch(
                config, self.train.tracking_prompts, self.train.seed, STREAM_TRACK,
                key=(t, k), question_index=k, threads=self.threads
            )
            u = layer2_logits(params, S1, batch.embeddings, self.freqs)
            _, by_feature, y_hat = predict(u, batch.embeddings, config)
            squared.append((y_hat - batch.targets) ** 2)
            scores[k] = float(np.mean(by_feature[:, k]))

            membership = feature_membership(batch.embeddings, config)
            counts = membership.sum(axis=(0, 1))
            sums = np.einsum("bi,bim->m", u[:, 1:-1:2], membership)
            logit_means[k] = np.divide(sums, counts, out=np.full(K, np.nan), where=counts > 0)

        return DynamicsSnapshot(
            t=t,
            stage=stage,
            min_prev_score=min_prev_score(S1),
            logit_gap=logit_gap(params.W1, config, self.freqs),
            slash_score_d1=average_slash_score(S1, 1),
            loss_estimate=float(np.mean(np.concatenate(squared)) / 2.0),
            feature_logit_means=logit_means,
            feature_scores=scores,
        )

    def _record(self, params: ReducedParams, t: int, stage: int) -> DynamicsSnapshot:
        if self.snapshots and self.snapshots[-1].t == t:
            return self.snapshots[-1]
        snap = self.track(params, t, stage)
        if not np.isfinite(snap.loss_estimate):
            raise DivergedError(
                f"Non-finite tracking loss at step {t} (stage {stage})",
                details={"step": t, "stage": stage}
            )
        self.snapshots.append(snap)
        log_operation(
            logger, "snapshot", stage=stage, step=t,
            metrics={"loss": snap.loss_estimate, "min_prev_score": snap.min_prev_score}
        )
        if self.on_snapshot:
            self.on_snapshot(snap)
        return snap

    def _step(self, params: ReducedParams, t: int, stage: int) -> ReducedParams:
        batch = sample_batch(self.data, self.train.batch_size, self.train.seed, STREAM_TRAIN, key=(t,), threads=self.threads)
        loss, g1, g2 = batch_terms(
            params, batch, self.data, self.freqs,
            want_w1=(stage == 1), want_w2=(stage == 2),
            chunk_size=self.train.chunk_size, threads=self.threads
        )
        grad = g1 if stage == 1 else g2
        if stage == 1:
            updated = params.W1 - self.train.eta1 * grad
        else:
            updated = params.W2 - self.train.eta2 * grad
        if not (np.isfinite(loss) and np.all(np.isfinite(grad)) and np.all(np.isfinite(updated))):
            raise DivergedError(
                f"Non-finite loss or gradient at step {t} (stage {stage})",
                details={"step": t, "stage": stage, "loss": loss}
            )
        if stage == 1:
            return ReducedParams(W1=updated, W2=params.W2)
        return ReducedParams(W1=params.W1, W2=updated)

    def _check_pulse(self) -> bool:
        N = self.data.N
        result = pulse_check(self.freqs, N, tolerance=0.0)
        passed = result.eps_fn <= abs(result.c1) / N
        if not passed:
            logger.warning(
                f"Cone band does not approximate a pulse over horizon {N}: eps_fn={result.eps_fn:.3e}, C1={result.c1:.3e}"
            )
        return passed

    def run(self) -> TrainingResult:
        start_time = time.time()
        pulse_passed = self._check_pulse()
        params = ReducedParams.initial(self.data)
        every = self.train.snapshot_every
        t = 0
        self.snapshots = []

        logger.info(f"Stage I: eta1={self.train.eta1}, cap {self.train.tau1} steps, target min_prev_score >= {1 - self.eps1:.4f}")
        self._record(params, t, stage=1)
        stage1_steps = 0
        for _ in range(self.train.tau1):
            S1 = causal_softmax(layer1_logits(params, self.data, self.freqs))
            if min_prev_score(S1) >= 1.0 - self.eps1:
                logger.info(f"Stage I reached its target after {stage1_steps} steps")
                break
            params = self._step(params, t, stage=1)
            t += 1
            stage1_steps += 1
            if t % every == 0:
                self._record(params, t, stage=1)
        self._record(params, t, stage=1)
        stage2_start = len(self.snapshots) - 1

        logger.info(f"Stage II: eta2={self.train.eta2}, cap {self.train.tau2} steps")
        stage2_steps = 0
        for _ in range(self.train.tau2):
            params = self._step(params, t, stage=2)
            t += 1
            stage2_steps += 1
            if t % every == 0:
                snap = self._record(params, t, stage=2)
                if self.train.stage2_early_stop and np.all(snap.feature_errors <= self.eps2):
                    logger.info(f"Stage II reached its target after {stage2_steps} steps")
                    break
        self._record(params, t, stage=2)

        elapsed = time.time() - start_time
        log_operation(
            logger, "two_stage_gd", duration_ms=elapsed * 1000.0,
            metrics={"stage1_steps": stage1_steps, "stage2_steps": stage2_steps}
        )
        return TrainingResult(
            params=params,
            snapshots=self.snapshots,
            stage1_steps=stage1_steps,
            stage2_steps=stage2_steps,
            stage2_start=stage2_start,
            pulse_passed=pulse_passed,
            elapsed_s=elapsed,
        )

def two_stage_gd(
    train_config: TrainConfig,
    data_config: DataConfig,
    freqs: FrequencySequence,
    threads: int = 1
) -> Tuple[ReducedParams, List[DynamicsSnapshot]]:
    """
    Run both training stages from W1 = 0, W2 = I

    Args:
        train_config: Learning rates, step caps, batch size and seed
        data_config: Data model of the prompts
        freqs: Rotary frequencies with the cone band first
        threads: Worker threads; results are identical for any count

    Returns:
        Final parameters and every tracking snapshot in step order

    Raises:
        DivergedError: A non-finite loss, gradient or update, with its step
    """
    result = TwoStageTrainer(data_config, train_config, freqs, threads=threads).run()
    return result.params, result.snapshots
