"""
Rotary position embedding core: frequency construction, rotations, the pulse
condition check and the per-frequency decomposition of attention logits
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from utils.logging_config import get_logger
from utils.error_handlers import InvalidArgumentError, AliasingError

logger = get_logger(__name__)

ArrayLike = Union[Sequence[float], np.ndarray]

@dataclass(frozen=True)
class FrequencySequence:
    """
    Ordered RoPE angular frequencies (radians per position)

    The first ``cone_band_len`` entries act on the cone-axis subspace, the
    rest on the semantic subspace. Vectors rotated with this sequence have
    dimension ``2 * len(values)``.
    """
    values: np.ndarray
    cone_band_len: int

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise InvalidArgumentError("Frequency sequence cannot be empty")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidArgumentError("Frequencies must be finite and non-negative")
        if not (0 <= self.cone_band_len <= values.size):
            raise InvalidArgumentError(
                f"cone_band_len {self.cone_band_len} outside [0, {values.size}]",
                details={"cone_band_len": self.cone_band_len, "length": int(values.size)}
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def dim(self) -> int:
        return 2 * len(self)

    @property
    def cone_band(self) -> np.ndarray:
        return self.values[:self.cone_band_len]

    @property
    def semantic_band(self) -> np.ndarray:
        return self.values[self.cone_band_len:]

    def cone_sequence(self) -> "FrequencySequence":
        return FrequencySequence(self.cone_band, self.cone_band_len)

    def semantic_sequence(self) -> "FrequencySequence":
        return FrequencySequence(self.semantic_band, 0)

    def doubled(self) -> "FrequencySequence":
        """Sequence (ϑ, ϑ) used by a layer whose input is twice as wide"""
        return FrequencySequence(np.concatenate([self.values, self.values]), self.cone_band_len)

    def to_dict(self) -> Dict:
        return {"values": self.values.tolist(), "cone_band_len": self.cone_band_len}

@dataclass
class PulseCheckResult:
    """Fit of a cosine sum to C1·δ0(x) + C2 over integer offsets |x| ≤ horizon"""
    c1: float
    c2: float
    eps_fn: float
    horizon: int
    tolerance: float
    passed: bool

    def to_dict(self) -> Dict:
        return {
            "c1": self.c1,
            "c2": self.c2,
            "eps_fn": self.eps_fn,
            "horizon": self.horizon,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }

@dataclass
class InPDecomposition:
    """Per-frequency split of one attention logit: InP_ℓ = A_ℓ cos(θ_ℓ (i−j) + φ_ℓ)"""
    contributions: np.ndarray
    total: float
    amplitudes: np.ndarray
    phases: np.ndarray
    offset: int

    def reconstruct(self, freqs: "FrequencySequence") -> np.ndarray:
        return self.amplitudes * np.cos(freqs.values * self.offset + self.phases)

def _check_dim(v: np.ndarray, freqs: FrequencySequence, name: str = "vector") -> None:
    if v.shape[-1] != freqs.dim:
        raise InvalidArgumentError(
            f"{name} has dimension {v.shape[-1]}, frequencies need {freqs.dim}",
            details={"dim": int(v.shape[-1]), "expected": freqs.dim}
        )

def classic_frequencies(d: int, base: float = 10000.0, cone_band_len: Optional[int] = None) -> FrequencySequence:
    """θ_ℓ = base^(−2ℓ/d) for ℓ = 1..d/2; strictly decreasing"""
    if d < 2 or d % 2:
        raise InvalidArgumentError(f"d must be even and at least 2, got {d}", details={"d": d})
    if not base > 1:
        raise InvalidArgumentError(f"base must exceed 1, got {base}", details={"base": base})
    ell = np.arange(1, d // 2 + 1, dtype=np.float64)
    values = float(base) ** (-2.0 * ell / d)
    return FrequencySequence(values, d // 2 if cone_band_len is None else cone_band_len)

def pulse_frequencies(m: int, horizon: int) -> FrequencySequence:
    """
    Dirichlet-kernel frequencies θ_s = 2πs/(2m+1), s = 1..m, stored high to low

    For integer x the cosine sum equals m when x ≡ 0 (mod 2m+1) and −1/2
    otherwise, so with 2m+1 > 2·horizon the pulse condition holds with
    C1 = m + 1/2, C2 = −1/2 and zero error.
    """
    if m < 1 or horizon < 1:
        raise InvalidArgumentError("m and horizon must be positive", details={"m": m, "horizon": horizon})
    if 2 * m + 1 <= 2 * horizon:
        raise AliasingError(
            f"pulse repeats inside the horizon: 2m+1 = {2 * m + 1} <= 2N = {2 * horizon}",
            details={"m": m, "horizon": horizon}
        )
    s = np.arange(m, 0, -1, dtype=np.float64)
    return FrequencySequence(2.0 * np.pi * s / (2 * m + 1), m)

def semantic_frequencies(count: int, horizon: int, alpha: float = 2.0, scale: float = 1.0) -> np.ndarray:
    """Decreasing low frequencies, all at most scale·horizon^(−alpha)"""
    if count < 1 or horizon < 1:
        raise InvalidArgumentError("count and horizon must be positive", details={"count": count, "horizon": horizon})
    top = scale * float(horizon) ** (-alpha)
    return top * 0.5 ** np.arange(count, dtype=np.float64)

def compose_frequencies(cone: ArrayLike, semantic: ArrayLike) -> FrequencySequence:
    cone = np.asarray(cone, dtype=np.float64).reshape(-1)
    semantic = np.asarray(semantic, dtype=np.float64).reshape(-1)
    return FrequencySequence(np.concatenate([cone, semantic]), int(cone.size))

def rotate_rows(X: np.ndarray, positions: ArrayLike, freqs: FrequencySequence) -> np.ndarray:
    """
    Rotate each row of X by its position: block ℓ of row r turns by positions[r]·θ_ℓ

    X has shape (..., n, d); positions has shape (n,) or broadcasts against
    the leading axes.
    """
    X = np.asarray(X, dtype=np.float64)
    _check_dim(X, freqs, "rows")
    angles = np.asarray(positions, dtype=np.float64)[..., None] * freqs.values
    cos, sin = np.cos(angles), np.sin(angles)
    even = X[..., 0::2]
    odd = X[..., 1::2]
    rotated_even = even * cos - odd * sin
    rotated_odd = even * sin + odd * cos
    out = np.empty(rotated_even.shape[:-1] + (2 * rotated_even.shape[-1],))
    out[..., 0::2] = rotated_even
    out[..., 1::2] = rotated_odd
    return out

def apply_rope(v: ArrayLike, pos: int, freqs: FrequencySequence) -> np.ndarray:
    """Rotate sub-vector (2ℓ−1, 2ℓ) of v by angle pos·θ_ℓ"""
    v = np.asarray(v, dtype=np.float64)
    _check_dim(v, freqs)
    return rotate_rows(v, pos, freqs)

def rotation_matrix(pos: float, freqs: FrequencySequence) -> np.ndarray:
    """Block-diagonal d×d rotation R_{ϑ,pos}"""
    # row j of the rotated identity is R e_j
    return rotate_rows(np.eye(freqs.dim), np.full(freqs.dim, float(pos)), freqs).T

def relative_logit(q: ArrayLike, k: ArrayLike, i: int, j: int, freqs: FrequencySequence) -> float:
    """q^T R_{j−i} k, which equals <apply_rope(q, i), apply_rope(k, j)>"""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_dim(q, freqs, "query")
    _check_dim(k, freqs, "key")
    return float(q @ apply_rope(k, j - i, freqs))

def _as_complex(v: np.ndarray) -> np.ndarray:
    return v[..., 0::2] + 1j * v[..., 1::2]

def _normalize_phase(phi: np.ndarray) -> np.ndarray:
    return np.where(phi <= -np.pi, np.pi, phi)

def inp_decompose(q: ArrayLike, k: ArrayLike, i: int, j: int, freqs: FrequencySequence) -> InPDecomposition:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_dim(q, freqs, "query")
    _check_dim(k, freqs, "key")

    q_rot = _as_complex(apply_rope(q, i, freqs))
    k_rot = _as_complex(apply_rope(k, j, freqs))
    contributions = np.real(q_rot * np.conj(k_rot))

    cross = _as_complex(q) * np.conj(_as_complex(k))
    amplitudes = np.abs(cross)
    phases = _normalize_phase(np.angle(cross))

    return InPDecomposition(
        contributions=contributions,
        total=float(np.sum(contributions)),
        amplitudes=amplitudes,
        phases=phases,
        offset=int(i - j),
    )

def inp_at_lag(Q: np.ndarray, K: np.ndarray, lag: int, freqs: FrequencySequence) -> np.ndarray:
    """
    InP contributions for every pair (i, i−lag) of pre-RoPE rows

    Returns an array of shape (N − lag, d/2).
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    _check_dim(Q, freqs, "queries")
    _check_dim(K, freqs, "keys")
    n = Q.shape[0]
    if not (0 <= lag < n):
        raise InvalidArgumentError(f"lag {lag} outside [0, {n})", details={"lag": lag, "N": n})
    cross = _as_complex(Q[lag:]) * np.conj(_as_complex(K[:n - lag]))
    return np.real(cross * np.exp(1j * freqs.values * lag))

def cosine_sum(values: ArrayLike, offsets: ArrayLike) -> np.ndarray:
    """Σ_s cos(θ_s x) for each integer offset x"""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1)
    return np.cos(np.outer(offsets, values)).sum(axis=1)

def pulse_check(freqs: Union[FrequencySequence, ArrayLike], horizon: int, tolerance: float) -> PulseCheckResult:
    """
    Fit the cone-band cosine sum f(x) to C1·δ0(x) + C2 for |x| ≤ horizon

    C2 is the median of f over nonzero offsets and C1 = f(0) − C2; eps_fn is
    the largest absolute residual. f is even, so offsets 0..horizon suffice.

    Args:
        freqs: Frequency sequence (its cone band is used) or raw frequencies
        horizon: Largest offset N the pulse must hold over
        tolerance: Allowed eps_fn

    Returns:
        PulseCheckResult with C1, C2, eps_fn and whether eps_fn <= tolerance

    Raises:
        InvalidArgumentError: Empty band or horizon below 1
    """
    band = freqs.cone_band if isinstance(freqs, FrequencySequence) else np.asarray(freqs, dtype=np.float64).reshape(-1)
    if band.size == 0:
        raise InvalidArgumentError("Cone band is empty")
    if horizon < 1:
        raise InvalidArgumentError(f"horizon must be at least 1, got {horizon}", details={"horizon": horizon})

    f = cosine_sum(band, np.arange(horizon + 1))
    c2 = float(np.median(f[1:]))
    c1 = float(f[0] - c2)
    residual = f - c2
    residual[0] -= c1
    eps_fn = float(np.max(np.abs(residual)))

    result = PulseCheckResult(
        c1=c1,
        c2=c2,
        eps_fn=eps_fn,
        horizon=int(horizon),
        tolerance=float(tolerance),
        passed=bool(eps_fn <= tolerance),
    )
    logger.debug(f"Pulse check over {band.size} frequencies, horizon {horizon}: eps_fn={eps_fn:.3e}, passed={result.passed}")
    return result

def frequency_bands(freqs: FrequencySequence, parts: int = 3) -> List[List[int]]:
    """
    Contiguous high-to-low index bands; the last band takes the remainder

    64 frequencies split into 21/21/22 indices.
    """
    length = len(freqs)
    if not (1 <= parts <= length):
        raise InvalidArgumentError(f"parts must be in [1, {length}], got {parts}", details={"parts": parts})
    base = length // parts
    sizes = [base] * parts
    sizes[-1] += length - base * parts
    bands, start = [], 0
    for size in sizes:
        bands.append(list(range(start, start + size)))
        start += size
    return bands

def active_frequencies(
    Q: np.ndarray,
    K: np.ndarray,
    lags: Sequence[int],
    freqs: FrequencySequence,
    fraction: float = 0.1
) -> List[int]:
    """
    Indices whose mean |InP| over the (i, i−Δ) pairs of all lags exceeds
    ``fraction`` of the largest mean; empty when every contribution is zero
    """
    if not lags:
        raise InvalidArgumentError("active_frequencies needs at least one lag")
    per_lag = [inp_at_lag(Q, K, lag, freqs) for lag in lags]
    mean_inp = np.abs(np.concatenate(per_lag, axis=0)).mean(axis=0)
    peak = float(np.max(mean_inp))
    if peak <= 0:
        return []
    return [int(idx) for idx in np.flatnonzero(mean_inp > fraction * peak)]

def build_frequencies(freq_config, data_config) -> FrequencySequence:
    """
    Frequency sequence for an experiment: cone band of width d_b/2 followed by
    a semantic band of width (d_X + 2)/2
    """
    horizon = data_config.N
    if freq_config.mode == "classic":
        return classic_frequencies(data_config.d, freq_config.base, cone_band_len=data_config.d_b // 2)

    m = freq_config.m if freq_config.m is not None else data_config.d_b // 2
    if 2 * m != data_config.d_b:
        raise InvalidArgumentError(
            f"pulse band of {m} frequencies does not fill d_b = {data_config.d_b}",
            details={"m": m, "d_b": data_config.d_b}
        )
    cone = pulse_frequencies(m, horizon)
    semantic = semantic_frequencies(
        (data_config.d_X + 2) // 2,
        horizon,
        alpha=freq_config.semantic_alpha,
        scale=freq_config.semantic_scale,
    )
    freqs = compose_frequencies(cone.values, semantic)
    logger.info(f"Built pulse frequencies: m={m}, horizon={horizon}, semantic band {semantic.size}")
    return freqs
