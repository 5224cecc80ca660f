"""Experiment configuration and the prepare -> train -> attack -> report chain.

Output layout under ``out``::

    effective_config.json
    cache/                        spectrogram cache (unless MERBENCH_CACHE is set)
    <variant>/manifest.json
    <variant>/<seed>/checkpoint
    <variant>/<seed>/trainlog.jsonl
    <variant>/<seed>/delta/<clip>.bin, delta/attack.json
    <variant>/<seed>/predictions.csv
    report/
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attack import AttackConfig, StopRule, bim_attack, snr_db
from .container import load_file, save_file
from .datapipe import (Dataset, IngestionError, clip_filename, make_split, prepare_corpus, read_cache,
                       read_manifest, synth_dataset, write_cache)
from .models import ConfigError, ModelSpec, forward, load_params
from .report import SeedPredictions, read_predictions_csv, robustness_report, write_predictions_csv
from .training import (AdversarialConfig, TrainConfig, config_digest, run_experiment, variant_dir,
                       variant_label)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CACHE_ENV = "MERBENCH_CACHE"
ALL_VARIANTS = ("A2E", "A2B2E", "A2M2E", "aA2E", "aA2B2E")


class MissingArtifactError(IngestionError):
    """A command needs outputs of an earlier stage that are not on disk."""


@dataclass(frozen=True)
class DataSource:
    kind: str = "synthetic"           # "synthetic" | "audio"
    n: int = 400
    n_freq: int = 32
    n_time: int = 64
    seed: int = 0
    noise: float = 0.05
    audio_dir: str | None = None
    emotion_csv: str | None = None
    midlevel_csv: str | None = None
    crop_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "audio"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'audio', got {self.kind!r}")
        if self.kind == "audio" and not (self.audio_dir and self.emotion_csv):
            raise ConfigError("audio data source needs data.audio_dir and data.emotion_csv")


def _toy_model() -> dict:
    return {"conv_blocks": [{"out_channels": 8, "kernel": 3, "pool": 2},
                            {"out_channels": 16, "kernel": 3, "pool": 2}],
            "embedding_dim": 32}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines the numbers of an experiment.

    Defaults reproduce the published full-scale setup; :func:`toy_config`
    gives the desk-scale preset.
    """

    schema_version: int = SCHEMA_VERSION
    data: DataSource = field(default_factory=DataSource)
    split_seed: int = 0
    model: dict = field(default_factory=dict)            # ModelSpec overrides (all variants)
    variant_overrides: dict = field(default_factory=dict)  # label -> ModelSpec overrides
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    variants: tuple = ALL_VARIANTS
    out: str = "runs"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {self.schema_version} is not supported "
                              f"(expected {SCHEMA_VERSION})")
        if isinstance(self.data, dict):
            object.__setattr__(self, "data", DataSource(**self.data))
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig(**self.train))
        if isinstance(self.attack, dict):
            object.__setattr__(self, "attack", AttackConfig(**self.attack))
        labels = tuple(self.variants)
        for label in labels:
            if label not in ALL_VARIANTS:
                raise ConfigError(f"unknown variant {label!r}; expected one of {ALL_VARIANTS}")
        object.__setattr__(self, "variants", labels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        return d

    def semantic_dict(self) -> dict:
        """The fields that influence results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out")
        return d

    def digest(self) -> str:
        return config_digest(self.semantic_dict())

    def model_spec(self, label: str) -> ModelSpec:
        base = label[1:] if label.startswith("a") else label
        fields = {**self.model, **self.variant_overrides.get(label, {}), "variant": base}
        return ModelSpec.from_dict(fields)

    def run_digest(self, label: str) -> str:
        """Digest guarding ``<out>/<variant>``: data, split, model and training settings.

        The seed count is left out so that more seeds can be added to a finished run.
        """
        train = self.train.to_dict()
        train.pop("n_seeds")
        return config_digest({"data": asdict(self.data), "split": self.split_seed,
                              "spec": self.model_spec(label).to_dict(), "train": train,
                              "adversarial": label.startswith("a")})


def full_config(**overrides) -> ExperimentConfig:
    return replace(ExperimentConfig(), **overrides)


def toy_config(**overrides) -> ExperimentConfig:
    """Desk-scale preset: synthetic corpus, small trunk, 5 seeds."""
    cfg = ExperimentConfig(
        data=DataSource("synthetic", n=400, n_freq=32, n_time=64, seed=0, noise=0.05),
        model=_toy_model(),
        train=TrainConfig(learning_rate=0.002, batch_size=8, max_epochs=100, patience=25, n_seeds=5,
                          adversarial=AdversarialConfig(5, AttackConfig(0.02, 0.005, 10,
                                                                        StopRule.avg_corr_below(-1.0)))),
        attack=AttackConfig(0.02, 0.005, 200, StopRule.avg_corr_below(-1.0)),
        out="runs/toy",
    )
    return replace(cfg, **overrides)


PRESETS = {"full": full_config, "toy": toy_config}


def load_config(path: Path | str | None = None, preset: str | None = None) -> ExperimentConfig:
    """Preset defaults, then values from a JSON file on top."""
    base = PRESETS[preset or "full"]()
    if path is None:
        return base
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    merged = base.to_dict()
    for key, value in raw.items():
        if key not in merged:
            raise ConfigError(f"unknown config field {key!r}")
        if isinstance(value, dict) and isinstance(merged[key], dict) and key != "variant_overrides":
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def save_effective_config(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.json"
    payload = {**cfg.to_dict(), "digest": cfg.digest()}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


# -- data ---------------------------------------------------------------------------------

def cache_dir(cfg: ExperimentConfig) -> Path:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else Path(cfg.out) / "cache"


def data_digest(cfg: ExperimentConfig) -> str:
    return config_digest(asdict(cfg.data))


def cmd_prepare(cfg: ExperimentConfig) -> tuple[Path, bool]:
    """Build the spectrogram cache; returns (manifest path, whether work was done)."""
    root = cache_dir(cfg)
    want = data_digest(cfg)
    manifest = read_manifest(root)
    if manifest is not None and manifest.get("digest") == want and all(
            (root / e["file"]).is_file() for e in manifest["clips"]):
        log.info("cache %s is complete; nothing to do", root)
        return root / "manifest.json", False
    if manifest is not None and manifest.get("digest") != want:
        raise ConfigError(f"cache {root} was built from a different data source; "
                          f"point {CACHE_ENV} or --out elsewhere")
    src = cfg.data
    if src.kind == "synthetic":
        data = synth_dataset(src.n, (src.n_freq, src.n_time), src.seed, src.noise)
    else:
        audio_dir = Path(src.audio_dir)
        if not audio_dir.is_dir() or not any(audio_dir.iterdir()):
            raise IngestionError(f"audio directory {audio_dir} is missing or empty; "
                                 f"expected <clip_id>.wav files for every annotated clip")
        data = prepare_corpus(audio_dir, src.emotion_csv, src.midlevel_csv, src.crop_seed)
    return write_cache(data, root, want), True


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    root = cache_dir(cfg)
    manifest = read_manifest(root)
    if manifest is None and cfg.data.kind == "synthetic":
        cmd_prepare(cfg)
        manifest = read_manifest(root)
    if manifest is None:
        raise MissingArtifactError(f"no spectrogram cache at {root}; run `prepare` first")
    if manifest.get("digest") != data_digest(cfg):
        raise ConfigError(f"cache {root} does not match the configured data source; rerun `prepare`")
    return read_cache(root)


# -- training -------------------------------------------------------------------------------

def _labels(cfg: ExperimentConfig, variant: str | None, adversarial: bool) -> list[str]:
    if variant is None:
        return [v for v in cfg.variants if v.startswith("a") or not adversarial]
    label = variant_label(variant, adversarial)
    if label not in ALL_VARIANTS:
        raise ConfigError(f"no adversarially trained counterpart of {variant.upper()}")
    return [label]


def seed_list(cfg: ExperimentConfig) -> list[int]:
    return list(range(cfg.train.n_seeds))


def cmd_train(cfg: ExperimentConfig, variant: str | None = None, adversarial: bool = False,
              workers: int = 1) -> list:
    """Train every seed of the selected variant(s); finished runs are skipped."""
    data = load_dataset(cfg)
    split = make_split(len(data), cfg.split_seed)
    artifacts = []
    for label in _labels(cfg, variant, adversarial):
        spec = cfg.model_spec(label)
        if spec.variant == "A2M2E" and data.y_midlevel is None:
            raise ConfigError("A2M2E needs mid-level targets, but the data source has none "
                              "(set data.midlevel_csv)")
        artifacts += run_experiment([spec], data, split, cfg.train, cfg.out, adversarial=label.startswith("a"),
                                    seeds=seed_list(cfg), workers=workers, digest=cfg.run_digest(label))
    return artifacts


# -- attack -------------------------------------------------------------------------------

def run_dir(cfg: ExperimentConfig, label: str, seed: int) -> Path:
    return Path(cfg.out) / variant_dir(label) / str(seed)


def _check_run_manifest(cfg: ExperimentConfig, label: str) -> None:
    path = Path(cfg.out) / variant_dir(label) / "manifest.json"
    if not path.is_file():
        raise MissingArtifactError(f"{label}: no trained runs under {path.parent}; run `train` first")
    if json.loads(path.read_text()).get("digest") != cfg.run_digest(label):
        raise ConfigError(f"{path.parent}: runs were trained with a different configuration")


def attack_seed(cfg: ExperimentConfig, label: str, seed: int, data: Dataset, test_idx: Sequence[int]) -> dict:
    """Attack the whole test split of one trained run and persist everything."""
    spec = cfg.model_spec(label)
    rdir = run_dir(cfg, label, seed)
    ckpt = rdir / "checkpoint"
    if not ckpt.is_file():
        raise MissingArtifactError(f"{label} seed {seed}: missing checkpoint {ckpt}")
    params = load_params(ckpt.read_bytes(), spec, seed)
    idx = np.asarray(test_idx)
    x = data.x[idx]
    y = data.y_emotion[idx]
    mid = None if data.y_midlevel is None else data.y_midlevel[idx]
    with T.no_grad():
        clean = forward(params, spec, x).emotions.data.copy()
    pert = bim_attack(params, spec, x, y, cfg.attack, y_midlevel=mid)
    if pert.max_abs > cfg.attack.epsilon:
        raise AssertionError(f"perturbation {pert.max_abs} outside the epsilon ball")
    ids = [data.clip_ids[i] for i in idx]
    ddir = rdir / "delta"
    ddir.mkdir(parents=True, exist_ok=True)
    snrs = []
    for k, clip in enumerate(ids):
        save_file(ddir / f"{clip_filename(clip)}.bin", {"delta": pert.delta[k]})
        snrs.append(snr_db(x[k], pert.delta[k]))
    sidecar = {"config": cfg.attack.to_dict(), "iterations_run": pert.iterations_run,
               "stop_reason": pert.stop_reason, "loss_trace": pert.loss_trace,
               "clip_ids": ids, "snr_db": [s if math.isfinite(s) else None for s in snrs],
               "unperturbed": [c for c, s in zip(ids, snrs) if not math.isfinite(s)]}
    (ddir / "attack.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    write_predictions_csv(SeedPredictions(seed, ids, y.astype(np.float64), clean.astype(np.float64),
                                          pert.adversarial_pred.astype(np.float64)),
                          rdir / "predictions.csv")
    return sidecar


def cmd_attack(cfg: ExperimentConfig, variant: str | None = None, adversarial: bool = False) -> dict:
    data = load_dataset(cfg)
    split = make_split(len(data), cfg.split_seed)
    done = {}
    for label in _labels(cfg, variant, adversarial):
        _check_run_manifest(cfg, label)
        for seed in seed_list(cfg):
            done[(label, seed)] = attack_seed(cfg, label, seed, data, split.test)
            log.info("%s seed %d attacked (%d iterations, %s)", label, seed,
                     done[(label, seed)]["iterations_run"], done[(label, seed)]["stop_reason"])
    return done


def load_delta(cfg: ExperimentConfig, label: str, seed: int, clip_id: str) -> np.ndarray:
    _, arrays = load_file(run_dir(cfg, label, seed) / "delta" / f"{clip_filename(clip_id)}.bin")
    return arrays["delta"]


# -- report -------------------------------------------------------------------------------

def collect_predictions(cfg: ExperimentConfig) -> tuple[dict, list[str]]:
    runs: dict[str, list[SeedPredictions]] = {}
    gaps = []
    for label in cfg.variants:
        for seed in seed_list(cfg):
            rdir = run_dir(cfg, label, seed)
            pred = rdir / "predictions.csv"
            if not pred.is_file():
                if (rdir / "checkpoint").is_file():
                    gaps.append(f"{label} seed {seed}: trained but not attacked")
                else:
                    gaps.append(f"{label} seed {seed}: not trained")
                continue
            sidecar = rdir / "delta" / "attack.json"
            snr = None
            if sidecar.is_file():
                raw = json.loads(sidecar.read_text())["snr_db"]
                snr = np.array([math.inf if s is None else s for s in raw])
            runs.setdefault(label, []).append(read_predictions_csv(pred, seed, snr))
    return runs, gaps


def cmd_report(cfg: ExperimentConfig) -> dict:
    runs, gaps = collect_predictions(cfg)
    if not runs:
        raise MissingArtifactError(f"no attacked predictions under {cfg.out}; run `attack` first")
    return robustness_report(runs, Path(cfg.out) / "report", gaps)


def cmd_run(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """prepare -> train -> attack -> report for every configured variant."""
    save_effective_config(cfg)
    cmd_prepare(cfg)
    for label in cfg.variants:
        base = label[1:] if label.startswith("a") else label
        cmd_train(cfg, base, label.startswith("a"), workers)
        cmd_attack(cfg, base, label.startswith("a"))
    return cmd_report(cfg)
