"""
Spectral and subspace-alignment metrics for query/key weights and hidden states

Direction indices are 0-based throughout; when a bias vector is supplied it
occupies slot 0 of the alignment and power arrays and the weight directions
follow from slot 1.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.logging_config import get_logger
from utils.error_handlers import (
    InvalidArgumentError,
    DegenerateSpectrumError,
    DegenerateMeanError,
)

logger = get_logger(__name__)

RMSN_EPS = 1e-6
MEAN_FLOOR = 1e-12
# relative tolerance for cumulative power sums landing just under tau < 1
CUMSUM_SLACK = 1e-12

@dataclass
class SpectralReport:
    singular_values: np.ndarray
    power_ratios: np.ndarray
    effective_rank: int
    tau: float

    def to_dict(self) -> Dict:
        return {
            "singular_values": self.singular_values.tolist(),
            "power_ratios": self.power_ratios.tolist(),
            "effective_rank": self.effective_rank,
            "tau": self.tau,
        }

@dataclass
class AlignmentReport:
    """
    Share of a vector's (or sequence's) energy along each weight direction

    ``selection`` lists direction indices in ranked order; ``scores`` holds
    the unsorted per-direction power in the same indexing.
    """
    aligned_ratios: np.ndarray
    aligned_rank: int
    selection: np.ndarray
    scores: np.ndarray
    bias_pinned: bool
    tau: float

    def to_dict(self) -> Dict:
        return {
            "aligned_ratios": self.aligned_ratios.tolist(),
            "aligned_rank": self.aligned_rank,
            "selection": self.selection.tolist(),
            "bias_pinned": self.bias_pinned,
            "tau": self.tau,
        }

def _check_tau(tau: float) -> None:
    if not (0 < tau <= 1):
        raise InvalidArgumentError(f"tau must lie in (0, 1], got {tau}", details={"tau": tau})

def _as_matrix(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.size == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty matrix, got shape {X.shape}", details={"shape": list(X.shape)})
    return X

def effective_rank(ratios: np.ndarray, tau: float) -> int:
    """
    Smallest R with the first R ratios summing to at least tau

    tau = 1 keeps every direction, however small its share.
    """
    _check_tau(tau)
    if tau >= 1.0:
        return int(ratios.size)
    cumulative = np.cumsum(ratios)
    rank = int(np.searchsorted(cumulative, tau * (1.0 - CUMSUM_SLACK), side="left")) + 1
    return min(rank, int(ratios.size))

def spectral_report(X, tau: float = 0.95) -> SpectralReport:
    """
    Singular values of X, their power ratios and the effective rank at tau

    Args:
        X: Any non-empty matrix (queries, keys or a weight)
        tau: Cumulative power threshold in (0, 1]

    Returns:
        SpectralReport; the ratios sum to 1

    Raises:
        InvalidArgumentError: Empty or non-matrix X, or tau outside (0, 1]
        DegenerateSpectrumError: X is all zeros
    """
    X = _as_matrix(X, "X")
    _check_tau(tau)
    sigma = np.linalg.svd(X, compute_uv=False)
    power = sigma ** 2
    total = float(power.sum())
    if total == 0.0:
        raise DegenerateSpectrumError("All singular values are zero", details={"shape": list(X.shape)})
    ratios = power / total
    return SpectralReport(
        singular_values=sigma,
        power_ratios=ratios,
        effective_rank=effective_rank(ratios, tau),
        tau=float(tau),
    )

def _rank_scores(scores: np.ndarray, pin_first: bool, tau: float) -> AlignmentReport:
    total = float(scores.sum())
    if total == 0.0:
        raise DegenerateSpectrumError("No power along any weight direction or bias")
    if pin_first:
        rest = np.argsort(-scores[1:], kind="stable") + 1
        selection = np.concatenate([[0], rest])
    else:
        selection = np.argsort(-scores, kind="stable")
    ratios = scores[selection] / total
    return AlignmentReport(
        aligned_ratios=ratios,
        aligned_rank=effective_rank(ratios, tau),
        selection=selection,
        scores=scores,
        bias_pinned=pin_first,
        tau=float(tau),
    )

def _weight_svd(W) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    W = _as_matrix(W, "W")
    U, sigma, Vt = np.linalg.svd(W, full_matrices=False)
    return U, sigma, Vt

def _check_bias(bias, W: np.ndarray) -> Optional[np.ndarray]:
    if bias is None:
        return None
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if bias.size != W.shape[1]:
        raise InvalidArgumentError(
            f"bias has {bias.size} entries, W has {W.shape[1]} columns",
            details={"bias": int(bias.size), "columns": int(W.shape[1])}
        )
    return bias

def aligned_report(x, W, bias=None, tau: float = 0.95) -> AlignmentReport:
    """
    Rank the directions of W by the power (σ_ℓ u_ℓ^T x)² they carry for x

    u_ℓ are the left singular vectors of W (d-dimensional, like x). A bias is
    scored by its squared norm and pinned to rank position 0.
    """
    W = _as_matrix(W, "W")
    _check_tau(tau)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != W.shape[0]:
        raise InvalidArgumentError(
            f"x has {x.size} entries, W has {W.shape[0]} rows",
            details={"x": int(x.size), "rows": int(W.shape[0])}
        )
    bias = _check_bias(bias, W)
    U, sigma, _ = _weight_svd(W)
    scores = (sigma * (U.T @ x)) ** 2
    if bias is not None:
        scores = np.concatenate([[float(bias @ bias)], scores])
    return _rank_scores(scores, bias is not None, tau)

def aligned_report_matrix(H, W, bias=None, tau: float = 0.95) -> AlignmentReport:
    """Sequence-level alignment: direction ℓ scores σ_ℓ²‖H u_ℓ‖² summed over the rows of H"""
    H = _as_matrix(H, "H")
    W = _as_matrix(W, "W")
    _check_tau(tau)
    if H.shape[1] != W.shape[0]:
        raise InvalidArgumentError(
            f"H has width {H.shape[1]}, W has {W.shape[0]} rows",
            details={"H": list(H.shape), "W": list(W.shape)}
        )
    bias = _check_bias(bias, W)
    U, sigma, _ = _weight_svd(W)
    scores = sigma ** 2 * np.sum((H @ U) ** 2, axis=0)
    if bias is not None:
        scores = np.concatenate([[H.shape[0] * float(bias @ bias)], scores])
    return _rank_scores(scores, bias is not None, tau)

def average_power(W, hidden_states: Sequence[np.ndarray], bias=None) -> np.ndarray:
    """
    Per-direction power ratios averaged across prompts, in direction order

    Slot 0 is the bias when one is given. The result sums to 1 and feeds
    low_rank_truncate.
    """
    if not hidden_states:
        raise InvalidArgumentError("average_power needs at least one hidden-state matrix")
    per_prompt = []
    for H in hidden_states:
        report = aligned_report_matrix(H, W, bias)
        per_prompt.append(report.scores / report.scores.sum())
    return np.mean(per_prompt, axis=0)

def rmsn(x, eps: float = RMSN_EPS) -> np.ndarray:
    """x / sqrt(mean(x²) + eps) along the last axis, unit gain"""
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x ** 2, axis=-1, keepdims=True) + eps)

def _tokens(token_set, d: int) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(token_set, dtype=np.float64))
    if tokens.size == 0:
        raise InvalidArgumentError("token_set cannot be empty")
    if tokens.shape[1] != d:
        raise InvalidArgumentError(
            f"tokens have width {tokens.shape[1]}, expected {d}",
            details={"width": int(tokens.shape[1]), "expected": d}
        )
    return tokens

def dominant_direction(W, token_set) -> Tuple[np.ndarray, int]:
    """
    Left singular vector of W carrying the most power over the normalized tokens

    Returns (u_ℓ*, ℓ*); ties go to the smaller index.
    """
    U, sigma, _ = _weight_svd(W)
    if not np.any(sigma > 0):
        raise DegenerateSpectrumError("W has a zero spectrum")
    tokens = rmsn(_tokens(token_set, U.shape[0]))
    power = np.sum((tokens @ U * sigma) ** 2, axis=0)
    best = int(np.argmax(power))
    return U[:, best].copy(), best

def projection_rv(projections) -> float:
    """Population std over |mean| of a set of projections"""
    projections = np.asarray(projections, dtype=np.float64).reshape(-1)
    if projections.size == 0:
        raise InvalidArgumentError("No projections supplied")
    mean = float(projections.mean())
    if abs(mean) < MEAN_FLOOR:
        raise DegenerateMeanError(f"Projection mean {mean:.3e} is too close to zero", details={"mean": mean})
    return float(projections.std(ddof=0) / abs(mean))

def relative_variation(direction, token_set) -> float:
    direction = np.asarray(direction, dtype=np.float64).reshape(-1)
    tokens = rmsn(_tokens(token_set, direction.size))
    return projection_rv(tokens @ direction)

def random_direction_rv(token_set, rng: np.random.Generator) -> float:
    """Relative variation along a Gaussian direction, the no-cone baseline"""
    tokens = np.atleast_2d(np.asarray(token_set, dtype=np.float64))
    direction = rng.standard_normal(tokens.shape[1])
    return relative_variation(direction / np.linalg.norm(direction), tokens)

def bias_dominance(W, token_set, bias) -> Dict[str, float]:
    """Compare ‖b‖ with the mean ‖W^T RMSN(h)‖ over the tokens"""
    W = _as_matrix(W, "W")
    bias = _check_bias(bias, W)
    tokens = rmsn(_tokens(token_set, W.shape[0]))
    weight_norm = float(np.mean(np.linalg.norm(tokens @ W, axis=1)))
    bias_norm = float(np.linalg.norm(bias))
    return {
        "bias_norm": bias_norm,
        "mean_weight_norm": weight_norm,
        "ratio": bias_norm / weight_norm if weight_norm > 0 else float("inf"),
    }

def truncation_directions(avg_power, thre: float, has_bias: bool = False) -> List[int]:
    """
    Direction slots kept by power-threshold truncation, in ranked order

    Slots are sorted by averaged power with the bias slot pinned first; the
    minimal prefix whose power reaches ``thre`` is kept.
    """
    avg_power = np.asarray(avg_power, dtype=np.float64).reshape(-1)
    if abs(float(avg_power.sum()) - 1.0) > 1e-6:
        raise InvalidArgumentError(f"avg_power must sum to 1, got {avg_power.sum()}")
    if not (0 < thre <= 1):
        raise InvalidArgumentError(f"thre must lie in (0, 1], got {thre}", details={"thre": thre})
    report = _rank_scores(avg_power, has_bias, thre)
    return [int(slot) for slot in report.selection[:report.aligned_rank]]

def low_rank_truncate(W, avg_power, thre: float, rank_thre: int, has_bias: bool = False) -> np.ndarray:
    """
    Rebuild W from its highest-power directions

    Returns W itself when every direction is kept (always the case for
    thre = 1) or when more than ``rank_thre`` weight directions would be
    needed.
    """
    W = _as_matrix(W, "W")
    if rank_thre < 1:
        raise InvalidArgumentError(f"rank_thre must be at least 1, got {rank_thre}", details={"rank_thre": rank_thre})
    U, sigma, Vt = _weight_svd(W)
    offset = 1 if has_bias else 0
    avg_power = np.asarray(avg_power, dtype=np.float64).reshape(-1)
    if avg_power.size != sigma.size + offset:
        raise InvalidArgumentError(
            f"avg_power has {avg_power.size} slots, expected {sigma.size + offset}",
            details={"slots": int(avg_power.size), "expected": int(sigma.size + offset)}
        )
    kept = [slot - offset for slot in truncation_directions(avg_power, thre, has_bias) if slot >= offset]
    if len(kept) == sigma.size or len(kept) > rank_thre:
        logger.debug(f"Truncation keeps W as is ({len(kept)} of {sigma.size} directions, cap {rank_thre})")
        return W

    kept = np.sort(np.asarray(kept, dtype=int))
    return (U[:, kept] * sigma[kept]) @ Vt[kept]

def parameter_reduction(shapes: Sequence[Tuple[int, int]], kept_ranks: Sequence[Optional[int]]) -> float:
    """
    Fraction of parameters saved: (N_total − N_eff) / N_total

    A matrix of shape (d_model, d_head) truncated to rank R costs
    R·(d_model + d_head); an untouched one (rank None) costs d_model·d_head.
    """
    if len(shapes) != len(kept_ranks) or not shapes:
        raise InvalidArgumentError("shapes and kept_ranks must be non-empty and equally long")
    total = 0
    effective = 0
    for (d_model, d_head), rank in zip(shapes, kept_ranks):
        full = d_model * d_head
        total += full
        effective += full if rank is None else rank * (d_model + d_head)
    return (total - effective) / total
