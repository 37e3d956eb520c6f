"""
SDHA tensor dumps: reader, writer and the analysis pipeline for dumped heads

Layout (little-endian):
    "SDHA" | u32 version=1 | u32 count |
    count × ( u32 name_len | name | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim × u64 | payload ) |
    u32 CRC32 of every byte after the magic and before the checksum

The manifest lives next to the dump as ``<name>.json``.
"""
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from models.dump import DumpManifest
from models.slash import SlashConfig
from services.icl_data import STREAM_EVAL, make_rng
from services.rope_core import FrequencySequence, classic_frequencies
from services.rank_metrics import (
    AlignmentReport,
    SpectralReport,
    aligned_report_matrix,
    average_power,
    bias_dominance,
    dominant_direction,
    low_rank_truncate,
    parameter_reduction,
    random_direction_rv,
    relative_variation,
    spectral_report,
    truncation_directions,
)
from services.slash_analysis import SlashReport, attention_from_qk, detect_sdh, prompt_shuffled_qk
from utils.logging_config import get_logger
from utils.error_handlers import (
    DegenerateMeanError,
    DumpCorruptError,
    DumpFormatError,
    InvalidArgumentError,
    MissingTensorError,
)
from utils.validation import validate_tensor_name

logger = get_logger(__name__)

MAGIC = b"SDHA"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
DEFAULT_FREQ_BASE = 10000.0
# keys within the evaluation stream
SHUFFLE_KEY = 0
CONE_BASELINE_KEY = 1

PathLike = Union[str, Path]

@dataclass
class TensorDump:
    tensors: Dict[str, np.ndarray]
    manifest: Optional[DumpManifest] = None

    def get(self, name: str) -> Optional[np.ndarray]:
        """Tensor widened to float64, or None"""
        tensor = self.tensors.get(name)
        return None if tensor is None else tensor.astype(np.float64)

@dataclass
class ConeReport:
    """
    Dominant direction of a projection over the dumped hidden states

    ``relative_variation`` is the spread of the normalized tokens along that
    direction and ``random_relative_variation`` the same along a Gaussian
    direction; either is None when the projections average to zero.
    """
    direction_index: int
    relative_variation: Optional[float]
    random_relative_variation: Optional[float]
    bias: Optional[Dict[str, float]] = None

    def to_dict(self) -> Dict:
        return {
            "direction_index": self.direction_index,
            "relative_variation": self.relative_variation,
            "random_relative_variation": self.random_relative_variation,
            "bias": self.bias,
        }

@dataclass
class TruncationReport:
    """Power-threshold truncation of W_Q and W_K; ranks are None for untouched matrices"""
    thre: float
    kept_ranks: Dict[str, Optional[int]]
    relative_errors: Dict[str, float]
    parameter_reduction: float

    def to_dict(self) -> Dict:
        return {
            "thre": self.thre,
            "kept_ranks": self.kept_ranks,
            "relative_errors": self.relative_errors,
            "parameter_reduction": self.parameter_reduction,
        }

@dataclass
class HeadAnalysis:
    head: int
    slash: Optional[SlashReport]
    spectral: Dict[str, SpectralReport] = field(default_factory=dict)
    alignment: Dict[str, AlignmentReport] = field(default_factory=dict)
    cone: Dict[str, ConeReport] = field(default_factory=dict)
    truncation: Optional[TruncationReport] = None

    def to_dict(self) -> Dict:
        return {
            "head": self.head,
            "slash": self.slash.to_dict() if self.slash else None,
            "spectral": {name: report.to_dict() for name, report in self.spectral.items()},
            "alignment": {name: report.to_dict() for name, report in self.alignment.items()},
            "cone": {name: report.to_dict() for name, report in self.cone.items()},
            "truncation": self.truncation.to_dict() if self.truncation else None,
        }

def manifest_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")

def encode_dump(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize tensors in the given order; identical input gives identical bytes"""
    body = bytearray(struct.pack("<II", VERSION, len(tensors)))
    for name, tensor in tensors.items():
        validate_tensor_name(name)
        array = np.asarray(tensor)
        code = CODE_FOR_DTYPE.get(array.dtype)
        if code is None:
            raise InvalidArgumentError(
                f"Tensor '{name}' has unsupported dtype {array.dtype}; use float32 or float64",
                details={"tensor": name, "dtype": str(array.dtype)}
            )
        if array.ndim > 255:
            raise InvalidArgumentError(f"Tensor '{name}' has too many dimensions", details={"tensor": name})
        encoded_name = name.encode("utf-8")
        body += struct.pack("<I", len(encoded_name)) + encoded_name
        body += struct.pack("<BB", code, array.ndim)
        body += struct.pack(f"<{array.ndim}Q", *array.shape)
        body += np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))

def write_dump(tensors: Mapping[str, np.ndarray], manifest: Optional[DumpManifest], path: PathLike) -> Path:
    path = Path(path)
    data = encode_dump(tensors)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    if manifest is not None:
        manifest_path(path).write_text(json.dumps(manifest.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(tensors)} tensors to {path} ({len(data)} bytes)")
    return path

def decode_dump(data: bytes) -> Dict[str, np.ndarray]:
    """Tensors of an SDHA byte string; errors carry the byte offset where decoding stopped"""
    if data[:4] != MAGIC:
        raise DumpFormatError("Bad magic bytes, not an SDHA dump", details={"offset": 0})
    # the last 4 bytes are the checksum; tensors must end before it
    limit = len(data) - 4
    if limit < 12:
        raise DumpFormatError("Dump too short for a header", details={"offset": len(data)})
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DumpFormatError(f"Unsupported dump version {version}", details={"offset": 4, "version": version})

    offset = 12
    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        if offset + 4 > limit:
            raise DumpCorruptError(f"Dump ends before tensor #{index}", details={"offset": offset, "tensor": index})
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + name_len + 2 > limit:
            raise DumpCorruptError(f"Dump ends inside the header of tensor #{index}", details={"offset": offset, "tensor": index})
        try:
            name = data[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise DumpFormatError(f"Tensor #{index} name is not UTF-8", details={"offset": offset})
        offset += name_len
        code, ndim = struct.unpack_from("<BB", data, offset)
        if code not in DTYPE_CODES:
            raise DumpFormatError(f"Tensor '{name}' has unknown dtype code {code}", details={"offset": offset, "tensor": name})
        offset += 2
        if offset + 8 * ndim > limit:
            raise DumpCorruptError(f"Dump ends inside the shape of tensor '{name}'", details={"offset": offset, "tensor": name})
        shape = struct.unpack_from(f"<{ndim}Q", data, offset)
        offset += 8 * ndim
        dtype = DTYPE_CODES[code]
        if name in tensors:
            raise DumpFormatError(f"Tensor '{name}' appears twice", details={"offset": offset, "tensor": name})
        nbytes = math.prod(shape) * dtype.itemsize
        if offset + nbytes > limit:
            raise DumpCorruptError(
                f"Payload of tensor '{name}' is truncated: shape {list(shape)} needs {nbytes} bytes",
                details={"offset": offset, "tensor": name, "shape": list(shape)}
            )
        tensors[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes

    if offset != limit:
        raise DumpFormatError(f"{limit - offset} unexpected bytes after the last tensor", details={"offset": offset})
    (stored,) = struct.unpack_from("<I", data, limit)
    if zlib.crc32(data[4:limit]) != stored:
        raise DumpFormatError("Checksum mismatch", details={"offset": limit})
    return tensors

def read_manifest(path: PathLike) -> Optional[DumpManifest]:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        return None
    try:
        return DumpManifest.model_validate(json.loads(sidecar.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise DumpFormatError(f"Invalid manifest {sidecar}: {e}", details={"path": str(sidecar)})

def read_dump(path: PathLike) -> TensorDump:
    """
    Read an SDHA dump and its manifest sidecar

    Args:
        path: Dump file; the manifest is looked up at ``<name>.json``

    Returns:
        TensorDump with tensors in file order and the manifest, or None when
        there is no sidecar

    Raises:
        FileNotFoundError: No such dump
        DumpFormatError: Bad magic, version, checksum, duplicate name or manifest
        DumpCorruptError: Truncated header or payload, naming the tensor
    """
    path = Path(path)
    tensors = decode_dump(path.read_bytes())
    logger.debug(f"Read {len(tensors)} tensors from {path}")
    return TensorDump(tensors=tensors, manifest=read_manifest(path))

def _heads(array: Optional[np.ndarray], name: str) -> Optional[List[np.ndarray]]:
    if array is None:
        return None
    if array.ndim == 2:
        return [array]
    if array.ndim == 3:
        return list(array)
    raise InvalidArgumentError(f"Tensor '{name}' must be 2-D or 3-D (heads first)", details={"tensor": name})

def _projected(H: np.ndarray, W: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if W is None:
        return None
    out = H @ W
    return out + b if b is not None else out

def _variation_or_none(compute: Callable[[], float]) -> Optional[float]:
    try:
        return compute()
    except DegenerateMeanError as e:
        logger.warning(f"Relative variation undefined: {e}")
        return None

def cone_report(W: np.ndarray, H: np.ndarray, bias: Optional[np.ndarray], rng: np.random.Generator) -> ConeReport:
    """
    Dominant direction of W over the rows of H, its relative variation, the
    random-direction baseline and, with a bias, the bias-to-weight norm ratio
    """
    direction, index = dominant_direction(W, H)
    return ConeReport(
        direction_index=index,
        relative_variation=_variation_or_none(lambda: relative_variation(direction, H)),
        random_relative_variation=_variation_or_none(lambda: random_direction_rv(H, rng)),
        bias=bias_dominance(W, H, bias) if bias is not None else None,
    )

def truncation_report(
    weights: Mapping[str, Tuple[np.ndarray, Optional[np.ndarray]]],
    H: np.ndarray,
    thre: float
) -> TruncationReport:
    """
    Truncate each (W, bias) to the directions carrying ``thre`` of the power over H

    The parameter reduction counts untouched matrices at full size.
    """
    kept_ranks: Dict[str, Optional[int]] = {}
    errors: Dict[str, float] = {}
    shapes = []
    for name, (W, bias) in weights.items():
        has_bias = bias is not None
        avg = average_power(W, [H], bias)
        truncated = low_rank_truncate(W, avg, thre, rank_thre=min(W.shape), has_bias=has_bias)
        offset = 1 if has_bias else 0
        kept = [slot for slot in truncation_directions(avg, thre, has_bias) if slot >= offset]
        kept_ranks[name] = None if truncated is W else len(kept)
        errors[name] = float(np.sum((W - truncated) ** 2) / np.sum(W ** 2))
        shapes.append(W.shape)
    return TruncationReport(
        thre=float(thre),
        kept_ranks=kept_ranks,
        relative_errors=errors,
        parameter_reduction=parameter_reduction(shapes, list(kept_ranks.values())),
    )

def analyze_dump(
    dump: TensorDump,
    slash_config: SlashConfig,
    tau: float = 0.95,
    freqs: Optional[FrequencySequence] = None,
    shuffle: bool = False,
    seed: int = 0
) -> List[HeadAnalysis]:
    """
    Slash, spectral, alignment and cone reports for every head in a dump

    Accepts Q/K (N × d_h, or heads × N × d_h) and/or the hidden states H with
    W_Q/W_K (and optional b_Q/b_K). Queries and keys built from H are always
    pre-RoPE; dumped Q/K are rotated only when the manifest says RoPE was not
    applied. With H and the weights, every head also gets a cone section and
    a truncation of W_Q/W_K at threshold ``tau``.

    Args:
        dump: Tensors with their manifest
        slash_config: Lags, detection threshold and logit scale
        tau: Power threshold for effective and aligned ranks
        freqs: Rotary frequencies; classic at the manifest's base by default
        shuffle: Also score each head on a uniform-token prompt (rows
            resampled before RoPE) and store shuffled / original per lag in
            ``slash.ood_ratios``
        seed: Seed of the shuffle and random-direction streams

    Returns:
        One HeadAnalysis per head, numbered from the manifest's head index

    Raises:
        DumpFormatError: No manifest
        MissingTensorError: Neither Q/K nor H with W_Q/W_K
        InvalidArgumentError: Mismatched heads, or shuffle on post-RoPE Q/K
    """
    if dump.manifest is None:
        raise DumpFormatError("Dump has no manifest; rope_applied is unknown")
    rope_applied = dump.manifest.rope_applied

    Q_heads = _heads(dump.get("Q"), "Q")
    K_heads = _heads(dump.get("K"), "K")
    H = dump.get("H")
    W_Q, W_K = dump.get("W_Q"), dump.get("W_K")
    b_Q, b_K = dump.get("b_Q"), dump.get("b_K")

    has_qk = Q_heads is not None and K_heads is not None
    has_weights = H is not None and W_Q is not None and W_K is not None
    if not (has_qk or has_weights):
        raise MissingTensorError(
            "Dump needs Q and K, or H with W_Q and W_K",
            details={"tensors": sorted(dump.tensors)}
        )
    if has_qk and len(Q_heads) != len(K_heads):
        raise InvalidArgumentError("Q and K hold different numbers of heads")

    if not has_qk:
        Q_heads = [_projected(H, W_Q, b_Q)]
        K_heads = [_projected(H, W_K, b_K)]
        rope_applied = False

    if shuffle and rope_applied:
        raise InvalidArgumentError("Shuffled-prompt comparison needs pre-RoPE queries and keys")

    d_h = Q_heads[0].shape[-1]
    if freqs is None:
        freqs = classic_frequencies(d_h, dump.manifest.freq_base or DEFAULT_FREQ_BASE)

    cone: Dict[str, ConeReport] = {}
    truncation = None
    if has_weights:
        baseline_rng = make_rng(seed, STREAM_EVAL, CONE_BASELINE_KEY)
        cone = {name: cone_report(W, H, b, baseline_rng) for name, W, b in (("W_Q", W_Q, b_Q), ("W_K", W_K, b_K))}
        truncation = truncation_report({"W_Q": (W_Q, b_Q), "W_K": (W_K, b_K)}, H, tau)
    shuffle_rng = make_rng(seed, STREAM_EVAL, SHUFFLE_KEY) if shuffle else None

    results = []
    for offset, (Q, K) in enumerate(zip(Q_heads, K_heads)):
        S = attention_from_qk(Q, K, freqs, slash_config, rope_applied=rope_applied)
        analysis = HeadAnalysis(
            head=dump.manifest.head + offset,
            slash=detect_sdh([S], slash_config),
            spectral={"Q": spectral_report(Q, tau), "K": spectral_report(K, tau)},
        )
        if shuffle_rng is not None:
            Q_shuffled, K_shuffled = prompt_shuffled_qk(Q, K, shuffle_rng)
            shuffled = detect_sdh([attention_from_qk(Q_shuffled, K_shuffled, freqs, slash_config)], slash_config)
            analysis.slash.ood_ratios = [
                after / before if before > 0 else None
                for before, after in zip(analysis.slash.scores, shuffled.scores)
            ]
        if has_weights:
            analysis.spectral["W_Q"] = spectral_report(W_Q, tau)
            analysis.spectral["W_K"] = spectral_report(W_K, tau)
            analysis.alignment["W_Q"] = aligned_report_matrix(H, W_Q, b_Q, tau)
            analysis.alignment["W_K"] = aligned_report_matrix(H, W_K, b_K, tau)
            analysis.cone = dict(cone)
            analysis.truncation = truncation
        results.append(analysis)

    logger.info(f"Analyzed {len(results)} head(s) from dump of model '{dump.manifest.model}'")
    return results
