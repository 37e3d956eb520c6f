"""
Slash-dominance scoring: attention from raw queries/keys, average slash scores,
head detection, frequency-band ablation and out-of-distribution comparison
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.data import DataConfig
from models.slash import SlashConfig
from services.rope_core import FrequencySequence, rotate_rows
from services.icl_data import sample_batch, STREAM_EVAL, STREAM_OOD
from services.shallow_model import (
    ReducedParams,
    causal_softmax,
    layer1_logits,
    layer1_qk,
    layer2_logits,
    predict,
)
from utils.logging_config import get_logger
from utils.error_handlers import InvalidArgumentError
from utils.parallel import ordered_map, fixed_order_mean

logger = get_logger(__name__)

LOCAL_LAG_LIMIT = 5
LONG_RANGE_LAG = 500

@dataclass
class SlashReport:
    """Batch-mean slash score per lag, with detection flags against kappa"""
    lags: List[int]
    scores: List[float]
    detected: List[bool]
    sample_count: int
    kappa: float
    excluded_prefix: int
    logit_scale: float
    uniform_baseline: List[float] = field(default_factory=list)
    ood_ratios: Optional[List[Optional[float]]] = None

    @property
    def regimes(self) -> List[str]:
        return [lag_regime(lag) for lag in self.lags]

    @property
    def detected_lags(self) -> List[int]:
        return [lag for lag, hit in zip(self.lags, self.detected) if hit]

    def score_at(self, lag: int) -> float:
        return self.scores[self.lags.index(lag)]

    def to_rows(self) -> List[Dict]:
        rows = []
        for idx, lag in enumerate(self.lags):
            baseline = self.uniform_baseline[idx] if self.uniform_baseline else None
            rows.append({
                "lag": lag,
                "score": self.scores[idx],
                "detected": self.detected[idx],
                "regime": lag_regime(lag),
                "uniform_baseline": baseline,
                "enrichment": self.scores[idx] / baseline if baseline else None,
                "ood_ratio": self.ood_ratios[idx] if self.ood_ratios else None,
            })
        return rows

    def to_dict(self) -> Dict:
        return {
            "sample_count": self.sample_count,
            "kappa": self.kappa,
            "excluded_prefix": self.excluded_prefix,
            "logit_scale": self.logit_scale,
            "detected_lags": self.detected_lags,
            "lags": self.to_rows(),
        }

@dataclass
class AblationResult:
    """Per-lag slash scores before and after leaving some frequency blocks unrotated"""
    lags: List[int]
    removed: List[int]
    baseline: List[float]
    ablated: List[float]
    ratios: List[Optional[float]]

    def to_rows(self, band: str = "") -> List[Dict]:
        return [
            {"band": band, "lag": lag, "baseline": b, "ablated": a, "ratio": r}
            for lag, b, a, r in zip(self.lags, self.baseline, self.ablated, self.ratios)
        ]

@dataclass
class OODResult:
    slash_ratio: float
    in_slash_score: float
    ood_slash_score: float
    in_mae: float
    ood_mae: float
    scale: float
    prompts: int

    @property
    def mae_ratio(self) -> float:
        return self.ood_mae / self.in_mae if self.in_mae > 0 else float("inf")

    def to_dict(self) -> Dict:
        return {
            "scale": self.scale,
            "prompts": self.prompts,
            "slash_ratio": self.slash_ratio,
            "in_slash_score": self.in_slash_score,
            "ood_slash_score": self.ood_slash_score,
            "in_mae": self.in_mae,
            "ood_mae": self.ood_mae,
            "mae_ratio": self.mae_ratio,
        }

def lag_regime(lag: int) -> str:
    """local below 5, confounded by semantics up to 500, long_range beyond"""
    if lag < LOCAL_LAG_LIMIT:
        return "local"
    if lag < LONG_RANGE_LAG:
        return "confounded"
    return "long_range"

def _check_qk(Q: np.ndarray, K: np.ndarray, freqs: FrequencySequence) -> None:
    if Q.shape != K.shape:
        raise InvalidArgumentError(f"Q {Q.shape} and K {K.shape} differ in shape", details={"Q": list(Q.shape), "K": list(K.shape)})
    if Q.shape[-1] != freqs.dim:
        raise InvalidArgumentError(
            f"head dimension {Q.shape[-1]} does not match {len(freqs)} frequencies",
            details={"d_h": int(Q.shape[-1]), "freqs": len(freqs)}
        )

def without_frequencies(freqs: FrequencySequence, removed: Iterable[int]) -> FrequencySequence:
    """Copy of freqs with the removed blocks set to θ = 0 (left unrotated)"""
    removed = sorted(set(int(idx) for idx in removed))
    if removed and (removed[0] < 0 or removed[-1] >= len(freqs)):
        raise InvalidArgumentError(
            f"removed indices must lie in [0, {len(freqs)})",
            details={"removed": removed}
        )
    values = freqs.values.copy()
    values[removed] = 0.0
    return FrequencySequence(values, freqs.cone_band_len)

def attention_from_qk(
    Q: np.ndarray,
    K: np.ndarray,
    freqs: FrequencySequence,
    config: SlashConfig,
    rope_applied: bool = False
) -> np.ndarray:
    """
    Causal softmax of logit_scale · Q̃K̃^T

    Q and K are (N, d_h) or stacked (B, N, d_h). When ``rope_applied`` is set
    they are taken as already rotated.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    _check_qk(Q, K, freqs)
    if not rope_applied:
        positions = np.arange(1, Q.shape[-2] + 1, dtype=np.float64)
        Q = rotate_rows(Q, positions, freqs)
        K = rotate_rows(K, positions, freqs)
    logits = config.logit_scale * np.matmul(Q, np.swapaxes(K, -1, -2))
    return causal_softmax(logits)

def average_slash_score(S: np.ndarray, lag: int, excluded_prefix: int = 0) -> float:
    """
    Mean of S[i, i−Δ] over 1-based rows i with both i and i−Δ beyond the
    excluded prefix; a stack of matrices is averaged over all its rows
    """
    S = np.asarray(S, dtype=np.float64)
    N = S.shape[-1]
    if not (0 <= lag < N):
        raise InvalidArgumentError(f"lag {lag} outside [0, {N})", details={"lag": lag, "N": N})
    diagonal = np.diagonal(S, offset=-lag, axis1=-2, axis2=-1)[..., excluded_prefix:]
    if diagonal.shape[-1] == 0:
        raise InvalidArgumentError(
            f"no admissible rows for lag {lag} with excluded prefix {excluded_prefix}",
            details={"lag": lag, "excluded_prefix": excluded_prefix, "N": N}
        )
    return float(np.mean(diagonal))

def uniform_slash_score(N: int, lag: int, excluded_prefix: int = 0) -> float:
    """Average slash score of uniform causal attention: mean of 1/i over admissible rows"""
    if not (0 <= lag < N):
        raise InvalidArgumentError(f"lag {lag} outside [0, {N})", details={"lag": lag, "N": N})
    rows = np.arange(lag + excluded_prefix + 1, N + 1, dtype=np.float64)
    if rows.size == 0:
        raise InvalidArgumentError(f"no admissible rows for lag {lag}", details={"lag": lag, "N": N})
    return float(np.mean(1.0 / rows))

def _as_batch(batch) -> List[np.ndarray]:
    if isinstance(batch, np.ndarray):
        return [batch] if batch.ndim == 2 else list(batch)
    return [np.asarray(S, dtype=np.float64) for S in batch]

def detect_sdh(batch, config: SlashConfig, threads: int = 1) -> SlashReport:
    """
    Score every configured lag on a batch of score matrices

    Args:
        batch: One N × N score matrix, a stacked array, or a list of matrices
        config: Lags, threshold kappa and excluded prefix
        threads: Workers for the per-prompt scores; the mean is taken in a
            fixed order so the report does not depend on it

    Returns:
        SlashReport with the mean score per lag, every lag at or above kappa
        flagged, and the uniform-attention baseline

    Raises:
        InvalidArgumentError: Empty batch, or a lag outside the matrix
    """
    matrices = _as_batch(batch)
    if not matrices:
        raise InvalidArgumentError("detect_sdh needs at least one score matrix")
    N = matrices[0].shape[-1]

    def score(S: np.ndarray) -> np.ndarray:
        return np.array([average_slash_score(S, lag, config.excluded_prefix) for lag in config.lags])

    per_prompt = ordered_map(score, matrices, threads)
    scores = fixed_order_mean(per_prompt)
    report = SlashReport(
        lags=list(config.lags),
        scores=[float(s) for s in scores],
        detected=[bool(s >= config.kappa) for s in scores],
        sample_count=len(matrices),
        kappa=config.kappa,
        excluded_prefix=config.excluded_prefix,
        logit_scale=config.logit_scale,
        uniform_baseline=[uniform_slash_score(N, lag, config.excluded_prefix) for lag in config.lags],
    )
    if any(lag_regime(lag) == "confounded" for lag in report.lags):
        logger.info("Lags between 5 and 499 mix positional and semantic effects")
    logger.debug(f"Slash detection over {len(matrices)} prompts: detected lags {report.detected_lags}")
    return report

def _ratio(ablated: float, baseline: float) -> Optional[float]:
    return ablated / baseline if baseline > 0 else None

def band_ablation(
    Q: np.ndarray,
    K: np.ndarray,
    freqs: FrequencySequence,
    removed: Iterable[int],
    lags: Sequence[int],
    config: SlashConfig
) -> AblationResult:
    """
    Ratio of ablated to baseline slash score per lag when the removed
    frequency blocks are left unrotated

    Args:
        Q: Pre-RoPE queries, N × d
        K: Pre-RoPE keys, N × d
        freqs: Frequencies of the unablated head
        removed: Frequency indices to leave unrotated
        lags: Offsets to score
        config: Excluded prefix and logit scale

    Returns:
        AblationResult; a zero baseline gives ratio None for that lag

    Raises:
        InvalidArgumentError: A removed index outside the frequency sequence
    """
    removed = sorted(set(int(idx) for idx in removed))
    ablated_freqs = without_frequencies(freqs, removed)
    S_base = attention_from_qk(Q, K, freqs, config)
    S_ablated = attention_from_qk(Q, K, ablated_freqs, config)
    baseline = [average_slash_score(S_base, lag, config.excluded_prefix) for lag in lags]
    ablated = [average_slash_score(S_ablated, lag, config.excluded_prefix) for lag in lags]
    return AblationResult(
        lags=list(lags),
        removed=removed,
        baseline=baseline,
        ablated=ablated,
        ratios=[_ratio(a, b) for a, b in zip(ablated, baseline)],
    )

def mean_attention_map(batch) -> np.ndarray:
    """Element-wise mean of a batch of score matrices"""
    matrices = _as_batch(batch)
    if not matrices:
        raise InvalidArgumentError("mean_attention_map needs at least one score matrix")
    return fixed_order_mean(matrices)

def prompt_shuffled_qk(Q: np.ndarray, K: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Resample token rows i.i.d. from the prompt (same draw for Q and K),
    giving a prompt of uniformly drawn tokens; inputs must be pre-RoPE
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.shape != K.shape:
        raise InvalidArgumentError("Q and K differ in shape")
    idx = rng.integers(0, Q.shape[-2], size=Q.shape[-2])
    return Q[..., idx, :], K[..., idx, :]

def simulator_attention(params: ReducedParams, embeddings: np.ndarray, config: DataConfig, freqs: FrequencySequence) -> np.ndarray:
    """Layer-1 scores recomputed from the full-width queries and keys of each prompt"""
    Q, K = layer1_qk(params, embeddings, config)
    return attention_from_qk(Q, K, freqs, SlashConfig())

def ood_evaluation(
    params: ReducedParams,
    data_config: DataConfig,
    freqs: FrequencySequence,
    seed: int,
    scale: float,
    prompts: int = 1000,
    chunk_size: int = 50,
    threads: int = 1
) -> OODResult:
    """
    Layer-1 slash score at lag 1 and prediction MAE on in-distribution
    prompts and on prompts whose task has ‖w‖ = scale·sqrt(d_X)

    Args:
        params: Trained reduced parameters
        data_config: Data model of the run
        freqs: Frequencies of the run
        seed: Seed of the evaluation and OOD streams
        scale: Task norm multiplier, above 1
        prompts: Prompts per distribution
        chunk_size: Prompts per worker chunk
        threads: Worker threads

    Returns:
        OODResult with both distributions and their ratios
    """
    S1 = causal_softmax(layer1_logits(params, data_config, freqs))

    def evaluate(tag: int, ood_scale: Optional[float]) -> Tuple[float, float]:
        batch = sample_batch(data_config, prompts, seed, tag, ood_scale=ood_scale, threads=threads)
        starts = list(range(0, prompts, chunk_size))

        def run(start: int) -> np.ndarray:
            E = batch.embeddings[start:start + chunk_size]
            S = simulator_attention(params, E, data_config, freqs)
            return np.array([average_slash_score(S_b, 1) for S_b in S])

        slash = float(np.mean(np.concatenate(ordered_map(run, starts, threads))))
        u = layer2_logits(params, S1, batch.embeddings, freqs)
        _, _, y_hat = predict(u, batch.embeddings, data_config)
        mae = float(np.mean(np.abs(y_hat - batch.targets)))
        return slash, mae

    in_slash, in_mae = evaluate(STREAM_EVAL, None)
    ood_slash, ood_mae = evaluate(STREAM_OOD, scale)
    result = OODResult(
        slash_ratio=ood_slash / in_slash if in_slash > 0 else float("nan"),
        in_slash_score=in_slash,
        ood_slash_score=ood_slash,
        in_mae=in_mae,
        ood_mae=ood_mae,
        scale=float(scale),
        prompts=prompts,
    )
    logger.info(f"OOD evaluation at scale {scale}: slash ratio {result.slash_ratio:.6f}, MAE {in_mae:.4f} -> {ood_mae:.4f}")
    return result
