"""
Command handlers: each takes the parsed arguments and returns an exit code

Handlers raise; ``main`` wraps them with ``safe_execute`` so failures map to
the exit-code contract (1 usage, 2 config/data, 3 acceptance, 4 divergence).
"""
import json
import time
from argparse import Namespace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import settings
from models.dump import DumpManifest
from models.experiment import ExperimentConfig, FrequencyConfig
from models.data import DataConfig
from models.slash import SlashConfig
from services.rope_core import (
    FrequencySequence,
    active_frequencies,
    build_frequencies,
    classic_frequencies,
    frequency_bands,
    pulse_check,
    pulse_frequencies,
)
from services.icl_data import STREAM_EVAL, sample_batch
from services.shallow_model import ReducedParams, layer1_qk
from services.training import TwoStageTrainer, TrainingResult, gradient_check
from services.slash_analysis import (
    band_ablation,
    detect_sdh,
    mean_attention_map,
    ood_evaluation,
    simulator_attention,
)
from services.ingest import TensorDump, analyze_dump, read_dump, write_dump
from services.report_service import ReportWriter, FixedDigitsEncoder, get_report_writer
from utils.logging_config import get_logger, log_operation
from utils.error_handlers import (
    EXIT_ACCEPTANCE,
    EXIT_OK,
    AcceptanceError,
    InvalidArgumentError,
    MissingTensorError,
    UsageError,
)

logger = get_logger(__name__)

SIMULATOR_MODEL = "slashlab-simulator"
REPORT_PROMPTS = 64
ABLATION_PROMPTS = 64
SLASH_COLUMNS = ["head", "lag", "score", "detected", "regime", "uniform_baseline", "enrichment", "ood_ratio"]
ABLATION_COLUMNS = ["band", "lag", "baseline", "ablated", "ratio"]
ATTENTION_COLUMNS = ["row", "col", "score"]

def load_experiment(args: Namespace) -> ExperimentConfig:
    """Experiment file (or defaults) with the --seed override applied"""
    config = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"seed": args.seed})})
    return config

def resolve_threads(args: Namespace) -> int:
    threads = args.threads if getattr(args, "threads", None) is not None else settings.THREADS
    if threads < 1:
        raise UsageError(f"--threads must be at least 1, got {threads}", details={"threads": threads})
    return threads

def resolve_formats(args: Namespace, config: Optional[ExperimentConfig] = None) -> List[str]:
    if getattr(args, "format", None):
        return sorted(set(args.format))
    return list(config.formats) if config is not None else ["csv", "json"]

def resolve_out_dir(args: Namespace, config: Optional[ExperimentConfig] = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if config is not None and config.output_dir:
        return Path(config.output_dir)
    return Path(settings.OUTPUT_DIR)

def _writer(args: Namespace, command: str, extra: Dict, config: Optional[ExperimentConfig] = None) -> ReportWriter:
    manifest = {"command": command, **extra}
    if config is not None:
        manifest["config"] = config.model_dump(mode="json")
    return get_report_writer(resolve_out_dir(args, config), manifest)

def _attention_rows(S: np.ndarray) -> List[Dict]:
    rows, cols = np.tril_indices(S.shape[-1])
    return [
        {"row": int(r) + 1, "col": int(c) + 1, "score": float(S[r, c])}
        for r, c in zip(rows, cols)
    ]

def _acceptance(result: TrainingResult, eps1: float, eps2: float) -> Dict[str, bool]:
    stage1 = result.stage2_start_snapshot
    final = result.final
    return {
        "stage1_min_prev_score": bool(stage1.min_prev_score >= 1.0 - eps1),
        "stage2_feature_errors": bool(np.all(final.feature_errors <= eps2)),
        "stage2_loss": bool(final.loss_estimate <= eps2),
    }

def cmd_train(args: Namespace) -> int:
    """Two-stage training run; writes trajectory, parameters, summary and slash reports"""
    config = load_experiment(args)
    threads = resolve_threads(args)
    formats = resolve_formats(args, config)
    data = config.data
    seed = config.train.seed
    freqs = build_frequencies(config.freqs, data)
    writer = _writer(args, "train", {"seed": seed}, config)

    logger.info(
        f"Training '{config.name}': K={data.K}, N={data.N}, d={data.d}, {config.freqs.mode} frequencies",
        extra={"experiment": config.name, "command": "train"}
    )
    trainer = TwoStageTrainer(data, config.train, freqs, threads=threads)
    result = trainer.run()
    params = result.params

    rows = [snap.to_row() for snap in result.snapshots]
    writer.write_csv("trajectory.csv", rows, list(rows[0].keys()))
    if "json" in formats:
        writer.write_json("trajectory.json", {"rows": rows})

    manifest = DumpManifest(model=SIMULATOR_MODEL, layer=1, head=0, context_len=data.N, rope_applied=False)
    write_dump({"W1": params.W1, "W2": params.W2}, manifest, writer.out_dir / "params.sdha")

    batch = sample_batch(data, REPORT_PROMPTS, seed, STREAM_EVAL, threads=threads)
    scores = simulator_attention(params, batch.embeddings, data, freqs)
    slash = detect_sdh(scores, config.slash, threads=threads)
    writer.write_report(
        "slash_report", slash.to_dict(),
        [{"head": 0, **row} for row in slash.to_rows()], SLASH_COLUMNS, formats
    )
    writer.write_csv("attention_map.csv", _attention_rows(mean_attention_map(scores)), ATTENTION_COLUMNS)

    Q, K = layer1_qk(params, batch.embeddings[0], data)
    write_dump({"Q": Q, "K": K}, manifest, writer.out_dir / "layer1_qk.sdha")

    ood = ood_evaluation(params, data, freqs, seed, config.ood_scale, config.ood_prompts, threads=threads)

    eps1, eps2 = trainer.eps1, trainer.eps2
    final = result.final
    stage1 = result.stage2_start_snapshot
    acceptance = _acceptance(result, eps1, eps2)
    summary = {
        "stage1_steps": result.stage1_steps,
        "stage2_steps": result.stage2_steps,
        "pulse_passed": result.pulse_passed,
        "eps1": eps1,
        "eps2": eps2,
        "stage1": {
            "t": stage1.t,
            "min_prev_score": stage1.min_prev_score,
            "logit_gap": stage1.logit_gap,
            "slash_score_d1": stage1.slash_score_d1,
            "loss": stage1.loss_estimate,
        },
        "final": {
            "t": final.t,
            "min_prev_score": final.min_prev_score,
            "logit_gap": final.logit_gap,
            "loss": final.loss_estimate,
            "S_k": final.feature_scores,
            "feature_errors": final.feature_errors,
            "feature_logit_means": final.feature_logit_means,
        },
        "loss_decreased_in_stage2": bool(final.loss_estimate <= stage1.loss_estimate),
        "slash": {"lags": slash.lags, "scores": slash.scores, "detected_lags": slash.detected_lags},
        "ood": ood.to_dict(),
        "acceptance": acceptance,
    }
    writer.write_json("summary.json", summary)
    log_operation(logger, "train", duration_ms=result.elapsed_s * 1000.0, experiment=config.name, metrics=acceptance)

    if getattr(args, "gate", False) and not all(acceptance.values()):
        failed = [name for name, ok in acceptance.items() if not ok]
        raise AcceptanceError(f"Run missed its acceptance thresholds: {', '.join(failed)}", details={"failed": failed})
    return EXIT_OK

def check_frequencies(args: Namespace) -> FrequencySequence:
    if args.horizon < 1:
        raise UsageError(f"--horizon must be at least 1, got {args.horizon}", details={"horizon": args.horizon})
    if args.mode == "pulse":
        m = args.m if args.m is not None else (args.d_b // 2 if args.d_b else None)
        if m is None:
            raise UsageError("pulse mode needs --m or --d-b")
        return pulse_frequencies(m, args.horizon)
    if not args.d_b:
        raise UsageError("classic mode needs --d-b")
    return classic_frequencies(args.d_b, args.base)

def cmd_check_freq(args: Namespace) -> int:
    """Pulse check of a cone band; prints the result and exits 0 only when it passes"""
    freqs = check_frequencies(args)
    result = pulse_check(freqs, args.horizon, args.tolerance)
    payload = {"mode": args.mode, "frequencies": len(freqs), **result.to_dict()}
    print(json.dumps(payload, cls=FixedDigitsEncoder, digits=settings.FLOAT_DIGITS, sort_keys=True))
    if getattr(args, "out", None):
        writer = _writer(args, "check-freq", {"mode": args.mode, "horizon": args.horizon})
        writer.write_json("pulse_check.json", payload)
    return EXIT_OK if result.passed else EXIT_ACCEPTANCE

def _slash_config(args: Namespace, base: SlashConfig) -> SlashConfig:
    updates = {}
    if getattr(args, "lags", None):
        updates["lags"] = args.lags
    for name in ("kappa", "excluded_prefix", "logit_scale"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    return SlashConfig(**{**base.model_dump(), **updates}) if updates else base

def _head_dim(dump: TensorDump) -> int:
    for name in ("Q", "W_Q"):
        tensor = dump.tensors.get(name)
        if tensor is not None:
            return int(tensor.shape[-1])
    raise MissingTensorError("Dump needs Q and K, or H with W_Q and W_K", details={"tensors": sorted(dump.tensors)})

def _dump_slash_defaults(args: Namespace, dump: TensorDump) -> SlashConfig:
    if getattr(args, "long_range", False):
        base = SlashConfig.long_range()
    elif dump.manifest is not None and dump.manifest.model == SIMULATOR_MODEL:
        base = SlashConfig()
    else:
        base = SlashConfig.ingested(_head_dim(dump))
    if dump.manifest is not None and dump.manifest.logit_scale_hint is not None:
        base = base.model_copy(update={"logit_scale": dump.manifest.logit_scale_hint})
    return _slash_config(args, base)

def cmd_analyze(args: Namespace) -> int:
    """Slash, spectral, alignment and cone reports for every head of a tensor dump"""
    dump = read_dump(args.dump)
    config = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else None
    freqs = build_frequencies(config.freqs, config.data) if config is not None else None
    slash_config = _slash_config(args, config.slash) if config is not None else _dump_slash_defaults(args, dump)
    seed = args.seed if args.seed is not None else settings.SEED

    start = time.time()
    heads = analyze_dump(dump, slash_config, tau=args.tau, freqs=freqs, shuffle=args.shuffle, seed=seed)
    formats = resolve_formats(args, config)
    writer = _writer(args, "analyze", {
        "dump": Path(args.dump).name,
        "dump_manifest": dump.manifest.model_dump() if dump.manifest else None,
        "slash": slash_config.model_dump(),
        "tau": args.tau,
        "seed": seed,
    }, config)

    rows = [{"head": head.head, **row} for head in heads for row in head.slash.to_rows()]
    writer.write_report("slash_report", {"heads": [head.to_dict() for head in heads]}, rows, SLASH_COLUMNS, formats)
    log_operation(logger, "analyze", duration_ms=(time.time() - start) * 1000.0, heads=len(heads))
    return EXIT_OK

def parse_band(band: str, freqs: FrequencySequence, Q: np.ndarray, K: np.ndarray, lags: Sequence[int]) -> List[int]:
    """
    Band name to frequency indices: none, cone, semantic, high, medium, low,
    active, or a comma list of indices and ranges such as ``0-9,12``
    """
    band = band.strip().lower()
    if band == "none":
        return []
    if band == "cone":
        return list(range(freqs.cone_band_len))
    if band == "semantic":
        return list(range(freqs.cone_band_len, len(freqs)))
    if band in ("high", "medium", "low"):
        return frequency_bands(freqs, 3)[("high", "medium", "low").index(band)]
    if band == "active":
        first_Q = Q[0] if Q.ndim == 3 else Q
        first_K = K[0] if K.ndim == 3 else K
        return active_frequencies(first_Q, first_K, lags, freqs)

    indices = []
    try:
        for part in band.split(","):
            if "-" in part:
                low, high = part.split("-", 1)
                indices.extend(range(int(low), int(high) + 1))
            else:
                indices.append(int(part))
    except ValueError:
        raise UsageError(f"Unrecognized band '{band}'", details={"band": band})
    return indices

def _params_from_dump(dump: TensorDump, data: DataConfig) -> ReducedParams:
    W1, W2 = dump.get("W1"), dump.get("W2")
    if W1 is None or W2 is None:
        raise MissingTensorError("Parameter dump needs W1 and W2", details={"tensors": sorted(dump.tensors)})
    expected = {"W1": (data.d_b, data.d_b), "W2": (data.d_X + 2, data.d_X + 2)}
    for name, tensor in (("W1", W1), ("W2", W2)):
        if tensor.shape != expected[name]:
            raise InvalidArgumentError(
                f"{name} has shape {tensor.shape}, the data config needs {expected[name]}",
                details={"tensor": name, "shape": list(tensor.shape)}
            )
    return ReducedParams(W1=W1, W2=W2)

def cmd_ablate(args: Namespace) -> int:
    """Slash scores with frequency bands left unrotated, relative to the full rotation"""
    threads = resolve_threads(args)
    if args.params:
        config = load_experiment(args)
        data = config.data
        freqs = build_frequencies(config.freqs, data)
        params = _params_from_dump(read_dump(args.params), data)
        batch = sample_batch(data, args.prompts, config.train.seed, STREAM_EVAL, threads=threads)
        Q, K = layer1_qk(params, batch.embeddings, data)
        slash_config = _slash_config(args, SlashConfig())
        default_bands = ["none", "cone", "semantic"]
        source = {"params": Path(args.params).name}
    else:
        config = None
        dump = read_dump(args.dump)
        if dump.manifest is None or dump.manifest.rope_applied:
            raise InvalidArgumentError("Ablation needs pre-RoPE queries and keys (manifest rope_applied = false)")
        Q, K = dump.get("Q"), dump.get("K")
        if Q is None or K is None:
            raise MissingTensorError("Ablation needs Q and K in the dump", details={"tensors": sorted(dump.tensors)})
        freqs = classic_frequencies(Q.shape[-1], dump.manifest.freq_base or 10000.0)
        slash_config = _dump_slash_defaults(args, dump)
        default_bands = ["none", "high", "medium", "low"]
        source = {"dump": Path(args.dump).name}

    lags = list(slash_config.lags)
    bands = args.band or default_bands
    rows, results = [], {}
    for band in bands:
        removed = parse_band(band, freqs, Q, K, lags)
        result = band_ablation(Q, K, freqs, removed, lags, slash_config)
        results[band] = {"removed": result.removed, "rows": result.to_rows(band)}
        rows.extend(result.to_rows(band))
        logger.info(f"Ablation '{band}': removed {len(result.removed)} frequencies, ratios {result.ratios}")

    writer = _writer(args, "ablate", {**source, "slash": slash_config.model_dump(), "bands": bands}, config)
    writer.write_report("ablation", {"bands": results}, rows, ABLATION_COLUMNS, resolve_formats(args, config))
    return EXIT_OK

def cmd_gradcheck(args: Namespace) -> int:
    """Closed-form gradients against central differences; exit 0 only within tolerance"""
    try:
        data = DataConfig(K=args.K, N_in=args.n_in, d_X=args.d_x, d_b=args.d_b)
    except ValueError as e:
        raise UsageError(f"Invalid gradient-check dimensions: {e}")
    freqs = build_frequencies(FrequencyConfig(), data)
    seed = args.seed if args.seed is not None else settings.SEED

    start = time.time()
    result = gradient_check(data, freqs, points=args.points, batch_size=args.batch_size, seed=seed, h=args.h)
    log_operation(
        logger, "gradcheck", duration_ms=(time.time() - start) * 1000.0,
        metrics={"max_rel_error": result.max_rel_error}
    )
    writer = _writer(args, "gradcheck", {"seed": seed, "data": data.model_dump()})
    writer.write_json("gradcheck.json", result.to_dict())
    print(json.dumps({"max_rel_error": result.max_rel_error, "passed": result.passed},
                     cls=FixedDigitsEncoder, digits=settings.FLOAT_DIGITS, sort_keys=True))
    return EXIT_OK if result.passed else EXIT_ACCEPTANCE
