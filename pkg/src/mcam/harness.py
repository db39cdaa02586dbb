"""Experiment pipeline: flat key=value configs, dataset caching, the model
lineup (single_channel, concat, beamformed, alstm, alstm_phase, plus the
optional alstm_time), training runs with on-disk artifacts, and run comparison.

Artifacts are written atomically and are byte-reproducible from
(config, seed); wall-clock timing goes to a separate timing.json so the
reproducible artifacts stay timing-free.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .acoustic import ModelDims, ModelParams, forward_utterance, predict_labels
from .checkpoint import load_checkpoint, params_from_checkpoint, save_checkpoint
from .errors import ConfigError, McamError
from .features import (
    FeatureTensor,
    PhaseDiffTensor,
    featurize,
    load_feature_cache,
    pool_phase,
    save_feature_cache,
)
from .learn import (
    Dataset,
    EpochStats,
    TrainConfig,
    Utterance,
    cross_entropy,
    evaluate_frames,
    train,
)
from .scene import (
    NoiseSegment,
    SceneConfig,
    delay_and_sum,
    generate_scene,
    read_labels,
    read_wav,
    write_labels,
    write_wav,
)

VARIANTS = ("single_channel", "concat", "beamformed", "alstm", "alstm_phase", "alstm_time")
ATTENTION_VARIANTS = ("alstm", "alstm_phase", "alstm_time")
SINGLE_CHANNEL_VARIANTS = ("single_channel", "beamformed", "alstm_time")

ATTENTION_TRACE_MAGIC = b"AMAT"

HISTORY_FILE = "history.csv"
CHECKPOINT_FILE = "checkpoint.amck"
SUMMARY_FILE = "summary.json"
TIMING_FILE = "timing.json"
ATTENTION_FILE = "attention.bin"
INCOMPLETE_FILE = "INCOMPLETE"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class ScenePolicy:
    """Template every utterance's SceneConfig is derived from."""

    num_channels: int = 5
    sample_rate: int = 16000
    num_classes: int = 10
    utterance_seconds: float = 2.0
    channel_delays: tuple[int, ...] = (0, 80, 160, 240, 320)
    block_seconds: float = 0.5
    snr_clean_db: float = 20.0
    snr_noisy_db: float = -5.0
    num_utterances: int = 20
    seed: int = 1


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "alstm"
    hidden: int = 64
    context: int = 7
    phase_bands: int = 40


@dataclass(frozen=True)
class ExperimentConfig:
    scene: ScenePolicy
    train: TrainConfig
    model: ModelSpec
    data_dir: str
    out_dir: str
    raw_text: str

    def validate(self) -> None:
        if self.model.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.model.variant!r}; expected one of {VARIANTS}"
            )
        if self.model.context % 2 != 1 or self.model.context < 1:
            raise ConfigError(f"model.context must be odd, got {self.model.context}")
        if self.model.hidden < 1:
            raise ConfigError("model.hidden must be >= 1")
        if self.scene.num_utterances < 5:
            raise ConfigError("need at least 5 utterances for a 60/20/20 split")
        if self.scene.num_channels < 1:
            raise ConfigError("scene.num_channels must be >= 1")
        self.train.validate()


# --- flat key=value config text ---

_SCENE_KEYS = {
    "num_channels": int,
    "sample_rate": int,
    "num_classes": int,
    "utterance_seconds": float,
    "channel_delays": "ints",
    "block_seconds": float,
    "snr_clean_db": float,
    "snr_noisy_db": float,
    "num_utterances": int,
    "seed": int,
}
_TRAIN_KEYS = {
    "learning_rate": float,
    "decay_factor": float,
    "decay_after_epoch": int,
    "clip_norm": float,
    "epochs": int,
    "init_range": float,
    "seed": int,
}
_MODEL_KEYS = {"variant": str, "hidden": int, "context": int, "phase_bands": int}
_PATH_KEYS = {"data_dir": str, "out": str}


def parse_kv(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def _convert(key: str, value: str, kind):
    try:
        if kind == "ints":
            return tuple(int(part) for part in value.split(",") if part.strip())
        if kind is float:
            return float(value)  # accepts "inf"
        if kind is int:
            return int(value)
        return value
    except ValueError as err:
        raise ConfigError(f"{key}: cannot parse {value!r}") from err


def _section(pairs: dict[str, str], prefix: str, schema: dict) -> dict:
    out = {}
    for key, kind in schema.items():
        dotted = f"{prefix}.{key}"
        if dotted in pairs:
            out[key] = _convert(dotted, pairs.pop(dotted), kind)
    return out


def parse_experiment_config(text: str) -> ExperimentConfig:
    pairs = parse_kv(text)
    scene_kwargs = _section(pairs, "scene", _SCENE_KEYS)
    train_kwargs = _section(pairs, "train", _TRAIN_KEYS)
    model_kwargs = _section(pairs, "model", _MODEL_KEYS)
    path_kwargs = _section(pairs, "paths", _PATH_KEYS)
    if pairs:
        raise ConfigError(f"unknown config keys: {sorted(pairs)}")
    scene = ScenePolicy(**scene_kwargs)
    if "channel_delays" in scene_kwargs and len(scene.channel_delays) != scene.num_channels:
        raise ConfigError(
            f"scene.channel_delays has {len(scene.channel_delays)} entries "
            f"for {scene.num_channels} channels"
        )
    if "channel_delays" not in scene_kwargs and scene.num_channels != 5:
        scene = replace(scene, channel_delays=tuple([0] * scene.num_channels))
    config = ExperimentConfig(
        scene=scene,
        train=TrainConfig(**train_kwargs),
        model=ModelSpec(**model_kwargs),
        data_dir=path_kwargs.get("data_dir", "data"),
        out_dir=path_kwargs.get("out", "run"),
        raw_text=text,
    )
    config.validate()
    return config


def load_experiment_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_experiment_config(text)


def apply_overrides(text: str, out_dir=None, seed=None) -> str:
    """Rewrite paths.out / train.seed lines so the snapshot matches the run."""
    overrides = {}
    if out_dir is not None:
        overrides["paths.out"] = str(out_dir)
    if seed is not None:
        overrides["train.seed"] = str(seed)
    if not overrides:
        return text
    lines = []
    for line in text.splitlines():
        key = line.split("=", 1)[0].strip() if "=" in line else None
        if key in overrides:
            lines.append(f"{key} = {overrides.pop(key)}")
        else:
            lines.append(line)
    lines.extend(f"{key} = {value}" for key, value in overrides.items())
    return "\n".join(lines) + "\n"


# --- dataset generation and caching ---


def split_counts(n: int) -> tuple[int, int, int]:
    """60/20/20 by utterance count; every split non-empty."""
    n_train = max(1, int(n * 0.6))
    n_dev = max(1, int(n * 0.2))
    n_test = n - n_train - n_dev
    if n_test < 1:
        raise ConfigError(f"{n} utterances leave no test split")
    return n_train, n_dev, n_test


def split_indices(n: int) -> dict[str, list[int]]:
    n_train, n_dev, _ = split_counts(n)
    return {
        "train": list(range(n_train)),
        "dev": list(range(n_train, n_train + n_dev)),
        "test": list(range(n_train + n_dev, n)),
    }


def scene_config_for(policy: ScenePolicy, index: int) -> SceneConfig:
    """Per-utterance scene: rotating clean channel, seeded by (policy.seed, index)."""
    rng = np.random.default_rng((policy.seed, index))
    schedule = []
    n_blocks = max(1, math.ceil(policy.utterance_seconds / policy.block_seconds))
    for b in range(n_blocks):
        start = b * policy.block_seconds
        end = min((b + 1) * policy.block_seconds, policy.utterance_seconds)
        if b == n_blocks - 1:
            end = policy.utterance_seconds
        clean = int(rng.integers(policy.num_channels))
        for ch in range(policy.num_channels):
            snr = policy.snr_clean_db if ch == clean else policy.snr_noisy_db
            schedule.append(NoiseSegment(start, end, ch, snr))
    return SceneConfig(
        num_channels=policy.num_channels,
        sample_rate=policy.sample_rate,
        num_classes=policy.num_classes,
        utterance_seconds=policy.utterance_seconds,
        channel_delays=policy.channel_delays,
        noise_schedule=tuple(schedule),
        seed=int(rng.integers(2**62)),
    )


def _utt_name(index: int) -> str:
    return f"utt_{index:03d}"


def _policy_echo(policy: ScenePolicy) -> dict:
    echo = policy.__dict__.copy()
    echo["channel_delays"] = list(policy.channel_delays)
    return echo


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as src:
        for chunk in iter(lambda: src.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_atomic(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as out:
        out.write(data)
    os.replace(tmp, path)


def _dump_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def ensure_dataset(policy: ScenePolicy, data_dir) -> dict:
    """Generate scenes, label files, and feature caches unless already present.

    Returns the manifest. A data_dir generated under a different policy is
    refused rather than silently mixed.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = data_dir / MANIFEST_FILE
    echo = _policy_echo(policy)
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest["scene"] != echo:
            raise ConfigError(
                f"{data_dir} was generated under a different scene policy; "
                "use a fresh data_dir"
            )
        missing = [
            name
            for name in manifest["hashes"]
            if not (data_dir / name).exists()
        ]
        if not missing:
            return manifest

    hashes: dict[str, str] = {}
    for index in range(policy.num_utterances):
        name = _utt_name(index)
        wav_path = data_dir / f"{name}.wav"
        label_path = data_dir / f"{name}.csv"
        cache_path = data_dir / f"{name}.amf"
        ds_cache_path = data_dir / f"{name}.ds.amf"
        scene_cfg = scene_config_for(policy, index)
        waveform = generate_scene(scene_cfg)
        write_wav(wav_path, waveform.samples, waveform.sample_rate)
        write_labels(label_path, waveform.frame_labels, waveform.clean_channel_trace)
        # Features come from the PCM file so `featurize --in x.wav` reproduces them.
        samples, rate = read_wav(wav_path)
        feats, phase = featurize(samples, rate)
        save_feature_cache(cache_path, feats, phase)
        enhanced = delay_and_sum(samples, policy.channel_delays)
        ds_feats, ds_phase = featurize(enhanced[None, :], rate)
        save_feature_cache(ds_cache_path, ds_feats, ds_phase)
        for path in (cache_path, ds_cache_path):
            hashes[path.name] = _sha256(path)

    manifest = {
        "scene": echo,
        "splits": split_indices(policy.num_utterances),
        "hashes": hashes,
    }
    _write_atomic(manifest_path, _dump_json(manifest))
    return manifest


def dims_for(config: ExperimentConfig) -> ModelDims:
    variant = config.model.variant
    channels = 1 if variant in SINGLE_CHANNEL_VARIANTS else config.scene.num_channels
    phase_bands = config.model.phase_bands if variant == "alstm_phase" else None
    return ModelDims(
        channels=channels,
        context=config.model.context,
        feat_dim=40,
        hidden=config.model.hidden,
        classes=config.scene.num_classes,
        phase_bands=phase_bands,
        attention=variant in ATTENTION_VARIANTS,
    )


@dataclass
class LoadedUtterance:
    utterance: Utterance
    clean_channel_trace: np.ndarray


def load_utterance(config: ExperimentConfig, index: int) -> LoadedUtterance:
    data_dir = Path(config.data_dir)
    name = _utt_name(index)
    labels, trace = read_labels(data_dir / f"{name}.csv")
    variant = config.model.variant
    cache = f"{name}.ds.amf" if variant == "beamformed" else f"{name}.amf"
    feats, phase = load_feature_cache(data_dir / cache)
    values = feats.values
    if variant in ("single_channel", "alstm_time"):
        values = values[:, :1, :]
    pooled = None
    if variant == "alstm_phase":
        pooled = pool_phase(phase, config.model.phase_bands, config.scene.sample_rate)
    if len(labels) != values.shape[0]:
        raise ConfigError(
            f"{name}: {len(labels)} labels for {values.shape[0]} feature frames"
        )
    return LoadedUtterance(
        utterance=Utterance(feats=values, phase=pooled, labels=labels),
        clean_channel_trace=trace,
    )


def _load_split(config: ExperimentConfig, indices: list[int]) -> list[LoadedUtterance]:
    return [load_utterance(config, i) for i in indices]


def attention_mass_on_clean(attention: np.ndarray, trace: np.ndarray) -> np.ndarray:
    """Per-frame attention mass on the scheduled clean channel, (T,)."""
    frames = np.arange(attention.shape[0])
    return attention[frames, trace, :].sum(axis=1)


def write_attention_traces(path, traces: list[np.ndarray]) -> None:
    parts = [ATTENTION_TRACE_MAGIC, struct.pack("<I", len(traces))]
    for trace in traces:
        parts.append(struct.pack("<3I", *trace.shape))
        parts.append(np.ascontiguousarray(trace, dtype="<f8").tobytes())
    _write_atomic(Path(path), b"".join(parts))


def read_attention_traces(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != ATTENTION_TRACE_MAGIC:
        raise ConfigError(f"{path}: bad attention trace magic")
    (count,) = struct.unpack("<I", data[4:8])
    offset = 8
    traces = []
    for _ in range(count):
        dims = struct.unpack("<3I", data[offset : offset + 12])
        offset += 12
        n_bytes = 8 * int(np.prod(dims))
        traces.append(
            np.frombuffer(data[offset : offset + n_bytes], dtype="<f8").reshape(dims)
        )
        offset += n_bytes
    if offset != len(data):
        raise ConfigError(f"{path}: trailing bytes in attention traces")
    return traces


def history_csv(history: list[EpochStats]) -> str:
    lines = ["epoch,train_loss,dev_frame_accuracy,learning_rate"]
    for row in history:
        lines.append(
            f"{row.epoch},{row.train_loss!r},{row.dev_accuracy!r},{row.learning_rate!r}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    out_dir: str
    variant: str
    history: list[EpochStats]
    dev_accuracy: float
    test_accuracy: float
    test_loss: float
    attention_clean_mass: float | None
    train_seconds: float


def _evaluate_split(
    config: ExperimentConfig,
    params: ModelParams,
    dims: ModelDims,
    loaded: list[LoadedUtterance],
) -> tuple[float, float, float | None, list[np.ndarray]]:
    """(accuracy, loss, clean-channel attention mass or None, attention traces)."""
    accuracy, loss = evaluate_frames([lu.utterance for lu in loaded], params, dims)
    traces: list[np.ndarray] = []
    mass = None
    if dims.attention:
        masses = []
        for lu in loaded:
            trace = forward_utterance(lu.utterance.feats, lu.utterance.phase, params, dims)
            traces.append(trace.attention)
            if config.scene.num_channels == dims.channels:
                masses.append(attention_mass_on_clean(trace.attention, lu.clean_channel_trace))
        if masses:
            mass = float(np.mean(np.concatenate(masses)))
    return accuracy, loss, mass, traces


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Dataset -> train -> evaluate -> artifacts (history, checkpoint, summary)."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    incomplete = out_dir / INCOMPLETE_FILE
    _write_atomic(incomplete, "run in progress\n")
    try:
        result = _run_experiment_inner(config, out_dir)
    except McamError as err:
        _write_atomic(incomplete, f"{type(err).__name__}: {err}\n")
        raise
    incomplete.unlink()
    return result


def _run_experiment_inner(config: ExperimentConfig, out_dir: Path) -> RunResult:
    manifest = ensure_dataset(config.scene, config.data_dir)
    splits = manifest["splits"]
    start = time.perf_counter()
    dataset = Dataset(
        train=[lu.utterance for lu in _load_split(config, splits["train"])],
        dev=[lu.utterance for lu in _load_split(config, splits["dev"])],
    )
    dims = dims_for(config)
    params, history = train(dataset, dims, config.train)
    train_seconds = time.perf_counter() - start

    test_loaded = _load_split(config, splits["test"])
    test_accuracy, test_loss, clean_mass, traces = _evaluate_split(
        config, params, dims, test_loaded
    )
    dev_accuracy = max(h.dev_accuracy for h in history)

    _write_atomic(out_dir / HISTORY_FILE, history_csv(history))
    save_checkpoint(
        params,
        out_dir / CHECKPOINT_FILE,
        config_text=config.raw_text,
        rng_state=np.random.default_rng(config.train.seed).bit_generator.state,
        epoch=len(history),
    )
    if traces:
        write_attention_traces(out_dir / ATTENTION_FILE, traces)
    summary = {
        "variant": config.model.variant,
        "scene_seed": config.scene.seed,
        "train_seed": config.train.seed,
        "hidden": config.model.hidden,
        "context": config.model.context,
        "phase_bands": config.model.phase_bands if config.model.variant == "alstm_phase" else None,
        "num_utterances": config.scene.num_utterances,
        "splits": splits,
        "epochs": len(history),
        "dev_accuracy": dev_accuracy,
        "test_accuracy": test_accuracy,
        "test_loss": test_loss,
        "attention_clean_mass": clean_mass,
        "data_hashes": manifest["hashes"],
    }
    _write_atomic(out_dir / SUMMARY_FILE, _dump_json(summary))
    _write_atomic(out_dir / TIMING_FILE, _dump_json({"train_seconds": train_seconds}))
    return RunResult(
        out_dir=str(out_dir),
        variant=config.model.variant,
        history=history,
        dev_accuracy=dev_accuracy,
        test_accuracy=test_accuracy,
        test_loss=test_loss,
        attention_clean_mass=clean_mass,
        train_seconds=train_seconds,
    )


def evaluate_run(
    config: ExperimentConfig, checkpoint_path=None, split: str = "test"
) -> dict:
    """Score a stored checkpoint on one split of the config's dataset."""
    config.validate()
    if split not in ("train", "dev", "test"):
        raise ConfigError(f"split must be train/dev/test, got {split!r}")
    manifest = ensure_dataset(config.scene, config.data_dir)
    dims = dims_for(config)
    path = checkpoint_path or Path(config.out_dir) / CHECKPOINT_FILE
    checkpoint = load_checkpoint(path, dims)
    params = params_from_checkpoint(checkpoint, dims)
    loaded = _load_split(config, manifest["splits"][split])
    accuracy, loss, mass, _ = _evaluate_split(config, params, dims, loaded)
    return {
        "split": split,
        "num_utterances": len(loaded),
        "frame_accuracy": accuracy,
        "loss": loss,
        "attention_clean_mass": mass,
    }


COMPARE_COLUMNS = (
    "variant",
    "dev_accuracy",
    "test_accuracy",
    "train_seconds",
    "attention_clean_mass",
)


def compare_runs(run_dirs: list[str]) -> tuple[list[dict], str]:
    """One row per finished run; refuses mixed scenes or mismatched data."""
    if not run_dirs:
        raise ConfigError("nothing to compare")
    rows = []
    reference = None
    for run_dir in run_dirs:
        run_path = Path(run_dir)
        summary_path = run_path / SUMMARY_FILE
        if (run_path / INCOMPLETE_FILE).exists():
            raise ConfigError(f"{run_dir}: run is incomplete")
        if not summary_path.exists():
            raise ConfigError(f"{run_dir}: no {SUMMARY_FILE}; run the experiment first")
        summary = json.loads(summary_path.read_text())
        timing_path = run_path / TIMING_FILE
        timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
        key = (summary["scene_seed"], json.dumps(summary["data_hashes"], sort_keys=True))
        if reference is None:
            reference = key
        elif key[0] != reference[0]:
            raise ConfigError(
                f"{run_dir}: scene seed {key[0]} differs from {reference[0]}; "
                "runs are not comparable"
            )
        elif key[1] != reference[1]:
            raise ConfigError(f"{run_dir}: feature caches differ; runs are not comparable")
        rows.append(
            {
                "variant": summary["variant"],
                "dev_accuracy": summary["dev_accuracy"],
                "test_accuracy": summary["test_accuracy"],
                "train_seconds": timing.get("train_seconds"),
                "attention_clean_mass": summary["attention_clean_mass"],
            }
        )
    lines = [",".join(COMPARE_COLUMNS)]
    for row in rows:
        cells = []
        for col in COMPARE_COLUMNS:
            value = row[col]
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(repr(value))
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    return rows, "\n".join(lines) + "\n"


def format_compare_table(rows: list[dict]) -> str:
    headers = list(COMPARE_COLUMNS)
    formatted = [
        [
            (f"{row[col]:.4f}" if isinstance(row[col], float) else str(row[col] or ""))
            for col in headers
        ]
        for row in rows
    ]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in formatted)) if formatted else len(headers[i])
        for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in formatted:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
