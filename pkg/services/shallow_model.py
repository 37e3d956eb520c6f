"""
Two-layer disentangled attention model with RoPE

The reduced path keeps only the two trainable query blocks: W1 (d_b × d_b)
sets content-free layer-1 logits a(Δ) = c^T W1 R_{−Δ} c̃ on the cone band, and
W2 ((d_X+2) × (d_X+2)) matches the question against the layer-1 outputs on the
semantic band. ``full_disentangled_forward`` evaluates the same model through
the sparse full-width matrices and serves as an independent check.

Positions are 1-based in the maths and 0-based in arrays: row r holds
position r + 1.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from models.data import DataConfig
from services.rope_core import FrequencySequence, rotate_rows
from services.icl_data import EmbeddingMatrix
from utils.logging_config import get_logger
from utils.error_handlers import InvalidArgumentError

logger = get_logger(__name__)

@dataclass
class ReducedParams:
    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        self.W1 = np.array(self.W1, dtype=np.float64)
        self.W2 = np.array(self.W2, dtype=np.float64)
        if not (np.all(np.isfinite(self.W1)) and np.all(np.isfinite(self.W2))):
            raise InvalidArgumentError("Model parameters must be finite")

    @classmethod
    def initial(cls, config: DataConfig) -> "ReducedParams":
        """W1 = 0, W2 = I at block sizes"""
        return cls(W1=np.zeros((config.d_b, config.d_b)), W2=np.eye(config.d_X + 2))

    def copy(self) -> "ReducedParams":
        return ReducedParams(W1=self.W1.copy(), W2=self.W2.copy())

@dataclass
class ForwardTrace:
    """
    Intermediate states of one reduced forward pass

    A is zero above the diagonal; ``causal_mask`` marks the entries that take
    part in the softmax.
    """
    A: np.ndarray
    S1: np.ndarray
    u: np.ndarray
    S2: np.ndarray
    S2_by_feature: np.ndarray
    y_hat: float

@dataclass
class FullForward:
    output: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    S1: np.ndarray
    S2: np.ndarray

    @property
    def y_hat(self) -> float:
        return float(self.output[-1, -1])

def causal_mask(N: int) -> np.ndarray:
    return np.tril(np.ones((N, N), dtype=bool))

def lag_matrix(N: int) -> np.ndarray:
    """Entry (r, s) = r − s, clipped at 0 above the diagonal"""
    idx = np.arange(N)
    return np.maximum(idx[:, None] - idx[None, :], 0)

def _check_cone_band(config: DataConfig, freqs: FrequencySequence) -> FrequencySequence:
    if freqs.cone_band_len != config.d_b // 2:
        raise InvalidArgumentError(
            f"cone band has {freqs.cone_band_len} frequencies, d_b = {config.d_b} needs {config.d_b // 2}",
            details={"cone_band_len": freqs.cone_band_len, "d_b": config.d_b}
        )
    return freqs.cone_sequence()

def _semantic_sequence(width: int, freqs: FrequencySequence) -> FrequencySequence:
    semantic = freqs.semantic_sequence() if len(freqs.semantic_band) else None
    if semantic is None or semantic.dim != width:
        raise InvalidArgumentError(
            f"semantic band has {len(freqs.semantic_band)} frequencies, embedding block of width {width} needs {width // 2}",
            details={"semantic_len": len(freqs.semantic_band), "width": width}
        )
    return semantic

def cone_key_rotations(config: DataConfig, freqs: FrequencySequence, N: Optional[int] = None) -> np.ndarray:
    """Row Δ = R_{−Δ} c̃ for Δ = 0..N−1"""
    cone = _check_cone_band(config, freqs)
    N = config.N if N is None else N
    lags = np.arange(N, dtype=np.float64)
    return rotate_rows(np.tile(config.cone_key, (N, 1)), -lags, cone)

def lag_logits(W1: np.ndarray, config: DataConfig, freqs: FrequencySequence, N: Optional[int] = None) -> np.ndarray:
    """a(Δ) = c^T W1 R_{−Δ} c̃ for Δ = 0..N−1"""
    return cone_key_rotations(config, freqs, N) @ (np.asarray(W1).T @ config.cone)

def layer1_logits(params: ReducedParams, config: DataConfig, freqs: FrequencySequence) -> np.ndarray:
    """Causal Toeplitz logits A[r, s] = a(r − s); zero above the diagonal"""
    N = config.N
    a = lag_logits(params.W1, config, freqs, N)
    return np.where(causal_mask(N), a[lag_matrix(N)], 0.0)

def causal_softmax(A: np.ndarray) -> np.ndarray:
    """
    Row-wise softmax over the causal part of A (columns ≤ row)

    Works on stacks of square matrices. The row max is subtracted before
    exponentiation; masked entries come out as exact zeros.
    """
    A = np.asarray(A, dtype=np.float64)
    N = A.shape[-1]
    mask = causal_mask(N)
    row_max = np.max(A, axis=-1, where=mask, initial=-np.inf, keepdims=True)
    shifted = np.where(mask, A - row_max, 0.0)
    weights = np.where(mask, np.exp(shifted), 0.0)
    return weights / weights.sum(axis=-1, keepdims=True)

def softmax(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(u - np.max(u, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)

def _xy_block(E: np.ndarray, d_b: int) -> np.ndarray:
    return np.asarray(E, dtype=np.float64)[..., d_b:]

def layer1_outputs(S1: np.ndarray, E: np.ndarray, d_b: int) -> np.ndarray:
    """Z = S1 E^{x,y}, the semantic part of the layer-1 attention output"""
    return np.matmul(S1, _xy_block(E, d_b))

def layer2_logits(params: ReducedParams, S1: np.ndarray, E, freqs: FrequencySequence) -> np.ndarray:
    """
    Question-row logits u_r = ⟨R_N W2^T E_q^{x,y}, R_{r+1} Z_r⟩

    E may be an EmbeddingMatrix, an N × d array or a (B, N, d) stack.
    """
    if isinstance(E, EmbeddingMatrix):
        d_b, E = E.d_b, E.E
    else:
        d_b = freqs.cone_band_len * 2
    E = np.asarray(E, dtype=np.float64)
    width = E.shape[-1] - d_b
    if params.W2.shape != (width, width):
        raise InvalidArgumentError(
            f"W2 has shape {params.W2.shape}, embedding block needs ({width}, {width})",
            details={"W2": list(params.W2.shape), "width": width}
        )
    semantic = _semantic_sequence(width, freqs)
    N = E.shape[-2]
    positions = np.arange(1, N + 1, dtype=np.float64)

    Z = layer1_outputs(S1, E, d_b)
    query = _xy_block(E, d_b)[..., -1, :] @ params.W2
    Z_rot = rotate_rows(Z, positions, semantic)
    q_rot = rotate_rows(query[..., None, :], np.array([float(N)]), semantic)[..., 0, :]
    return np.einsum("...nd,...d->...n", Z_rot, q_rot)

def feature_membership(E: np.ndarray, config: DataConfig) -> np.ndarray:
    """(…, N_in, K) inner products of each example input with v_1..v_K"""
    X = np.asarray(E)[..., 0:-1:2, config.d_b:config.d_b + config.d_X]
    return X @ config.features.T

def predict(u: np.ndarray, E, config: DataConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    S2 = softmax(u), per-feature aggregates over even positions, and
    ŷ = ⟨S2, E^y⟩

    Works on a single prompt or a batch; returns (S2, S2_by_feature, y_hat).
    u must be finite.
    """
    E = E.E if isinstance(E, EmbeddingMatrix) else np.asarray(E, dtype=np.float64)
    S2 = softmax(u)
    y_hat = np.einsum("...n,...n->...", S2, E[..., -1])
    by_feature = np.einsum("...i,...ik->...k", S2[..., 1:-1:2], feature_membership(E, config))
    return S2, by_feature, y_hat

def reduced_forward(
    params: ReducedParams,
    embedding: EmbeddingMatrix,
    config: DataConfig,
    freqs: FrequencySequence,
    S1: Optional[np.ndarray] = None
) -> ForwardTrace:
    """Closed-form prediction of the reduced model; S1 may be passed in since it is content-free"""
    A = layer1_logits(params, config, freqs)
    if S1 is None:
        S1 = causal_softmax(A)
    u = layer2_logits(params, S1, embedding, freqs)
    S2, by_feature, y_hat = predict(u, embedding, config)
    return ForwardTrace(A=A, S1=S1, u=u, S2=S2, S2_by_feature=by_feature, y_hat=float(y_hat))

def full_weights(params: ReducedParams, config: DataConfig) -> dict:
    """Sparse full-width matrices of both layers and the output projection"""
    d, d_b = config.d, config.d_b
    W_Q1 = np.zeros((d, d))
    W_Q1[:d_b, :d_b] = params.W1
    W_K1 = np.zeros((d, d))
    W_K1[:d_b, :d_b] = np.outer(config.cone, config.cone_key)

    W_Q2 = np.zeros((2 * d, 2 * d))
    W_Q2[d_b:d, d_b:d] = params.W2
    W_K2 = np.zeros((2 * d, 2 * d))
    W_K2[d:, :d] = np.eye(d)

    W_O = np.zeros((4 * d, d))
    W_O[2 * d:3 * d, :] = np.eye(d)
    return {
        "W_Q1": W_Q1, "W_K1": W_K1, "W_V1": np.eye(d),
        "W_Q2": W_Q2, "W_K2": W_K2, "W_V2": np.eye(2 * d),
        "W_O": W_O,
    }

def layer1_qk(params: ReducedParams, E, config: DataConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Pre-RoPE layer-1 queries and keys (N × d, or stacked) of the full-width model"""
    E = E.E if isinstance(E, EmbeddingMatrix) else np.asarray(E, dtype=np.float64)
    W = full_weights(params, config)
    return E @ W["W_Q1"], E @ W["W_K1"]

def causal_self_attention(
    H: np.ndarray,
    W_Q: np.ndarray,
    W_K: np.ndarray,
    W_V: np.ndarray,
    freqs: FrequencySequence
) -> Tuple[np.ndarray, np.ndarray]:
    """Single-head RoPE attention without logit scaling; returns (output, scores)"""
    positions = np.arange(1, H.shape[0] + 1, dtype=np.float64)
    Q = rotate_rows(H @ W_Q, positions, freqs)
    K = rotate_rows(H @ W_K, positions, freqs)
    S = causal_softmax(Q @ K.T)
    return S @ (H @ W_V), S

def full_disentangled_forward(
    E,
    freqs: FrequencySequence,
    params: ReducedParams,
    config: DataConfig
) -> FullForward:
    """
    Layers concatenate input and attention output: H1 = [E, CSA(E)],
    H2 = [H1, CSA(H1)], output H2 W_O; layer 2 rotates with (ϑ, ϑ)
    """
    E = E.E if isinstance(E, EmbeddingMatrix) else np.asarray(E, dtype=np.float64)
    if E.shape[1] != freqs.dim or E.shape[1] != config.d:
        raise InvalidArgumentError(
            f"embedding width {E.shape[1]} does not match d = {config.d} and frequencies ({freqs.dim})",
            details={"width": int(E.shape[1]), "d": config.d, "freqs": freqs.dim}
        )
    W = full_weights(params, config)
    out1, S1 = causal_self_attention(E, W["W_Q1"], W["W_K1"], W["W_V1"], freqs)
    H1 = np.concatenate([E, out1], axis=1)
    out2, S2 = causal_self_attention(H1, W["W_Q2"], W["W_K2"], W["W_V2"], freqs.doubled())
    H2 = np.concatenate([H1, out2], axis=1)
    return FullForward(output=H2 @ W["W_O"], H1=H1, H2=H2, S1=S1, S2=S2)
