"""Adam, early stopping, clean and adversarial training, multi-seed experiments."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attack import AttackConfig, bim_attack
from .datapipe import Dataset, DatasetSplit
from .models import (ConfigError, ModelParams, ModelSpec, build_model, forward, load_params,
                     save_params, variant_loss)

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Training produced non-finite values."""


@dataclass(frozen=True)
class AdversarialConfig:
    every_n_epochs: int = 5
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(max_iterations=50))

    def __post_init__(self):
        if self.every_n_epochs < 1:
            raise ConfigError("every_n_epochs must be >= 1")
        if isinstance(self.attack, dict):
            object.__setattr__(self, "attack", AttackConfig(**self.attack))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 50
    n_seeds: int = 10
    adversarial: AdversarialConfig | None = None

    def __post_init__(self):
        if isinstance(self.adversarial, dict):
            object.__setattr__(self, "adversarial", AdversarialConfig(**self.adversarial))
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ConfigError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- Adam ------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()),
                   OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()))


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float) -> ModelParams:
    """One bias-corrected Adam update; returns new parameter tensors.

    ``state`` is advanced in place.  Parameters without a gradient entry
    (``None``) are treated as having zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = OrderedDict()
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new[name] = T.Tensor(p.data - update, requires_grad=True, dtype=p.dtype)
    return ModelParams(new, params.seed)


# -- training loops --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    adversarial: bool
    attacks: int
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return sum(1 for r in self.records if r.epoch > 0)

    @property
    def attack_count(self) -> int:
        return sum(r.attacks for r in self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def same_curves(self, other: "TrainLog") -> bool:
        strip = lambda log_: [(r.epoch, r.train_loss, r.val_loss, r.adversarial, r.attacks)  # noqa: E731
                              for r in log_.records]
        return strip(self) == strip(other) and self.best_epoch == other.best_epoch


def _loss_on(params: ModelParams, spec: ModelSpec, data: Dataset, idx: Sequence[int], batch: int = 64) -> float:
    """Size-weighted mean of the variant loss over ``idx`` (no graph)."""
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(idx), batch):
            sel = np.asarray(idx[start:start + batch])
            out = forward(params, spec, data.x[sel])
            mid = None if data.y_midlevel is None else data.y_midlevel[sel]
            total += float(variant_loss(spec, out, data.y_emotion[sel], mid).item()) * len(sel)
            count += len(sel)
    return total / count


def _gradient_step(params, spec, state, lr, x, y, mid):
    params.zero_grad()
    out = forward(params, spec, T.Tensor(x, dtype=params["head.weight"].dtype))
    loss = variant_loss(spec, out, y, mid)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss {value}")
    loss.backward()
    grads = {k: t.grad for k, t in params.items()}
    return adam_step(params, grads, state, lr), value


def _check_inputs(spec: ModelSpec, data: Dataset, split: DatasetSplit) -> None:
    if not split.train or not split.val:
        raise ConfigError("training needs non-empty train and validation splits")
    if spec.variant == "A2M2E" and data.y_midlevel is None:
        raise ConfigError("A2M2E training needs mid-level targets (y_midlevel)")


def _fit(spec: ModelSpec, data: Dataset, split: DatasetSplit, cfg: TrainConfig, seed: int,
         adversarial: AdversarialConfig | None) -> tuple[ModelParams, TrainLog]:
    _check_inputs(spec, data, split)
    params = build_model(spec, seed, dtype=np.float32)
    state = AdamState.for_params(params)
    train_idx = np.asarray(split.train)
    trainlog = TrainLog()
    t0 = time.perf_counter()
    best = params
    best_val = _loss_on(params, spec, data, split.val)
    trainlog.records.append(EpochRecord(0, _loss_on(params, spec, data, split.train), best_val,
                                        False, 0, 0.0))
    trainlog.best_val_loss = best_val
    waited = 0
    for epoch in range(1, cfg.max_epochs + 1):
        adv_epoch = adversarial is not None and epoch % adversarial.every_n_epochs == 0
        order = train_idx[np.random.default_rng([seed, epoch]).permutation(len(train_idx))]
        total, count, attacks = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            x, y = data.x[sel], data.y_emotion[sel]
            mid = None if data.y_midlevel is None else data.y_midlevel[sel]
            params, value = _gradient_step(params, spec, state, cfg.learning_rate, x, y, mid)
            total += value * len(sel)
            count += len(sel)
            if adv_epoch:
                pert = bim_attack(params, spec, x, y, adversarial.attack, y_midlevel=mid)
                attacks += 1
                params, value = _gradient_step(params, spec, state, cfg.learning_rate,
                                               x + pert.delta, y, mid)
        val = _loss_on(params, spec, data, split.val)
        trainlog.records.append(EpochRecord(epoch, total / count, val, adv_epoch, attacks,
                                            time.perf_counter() - t0))
        if val < best_val:
            best, best_val, waited = params, val, 0
            trainlog.best_epoch, trainlog.best_val_loss = epoch, val
        else:
            waited += 1
            if waited >= cfg.patience:
                trainlog.stopped_early = True
                break
    log.info("%s seed %d: best epoch %d, val loss %.5f", spec.variant, seed, trainlog.best_epoch, best_val)
    return best, trainlog


def train_clean(spec: ModelSpec, data: Dataset, split: DatasetSplit, cfg: TrainConfig,
                seed: int) -> tuple[ModelParams, TrainLog]:
    """Adam on shuffled mini-batches with early stopping on validation loss."""
    return _fit(spec, data, split, cfg, seed, None)


def train_adversarial(spec: ModelSpec, data: Dataset, split: DatasetSplit, cfg: TrainConfig,
                      seed: int) -> tuple[ModelParams, TrainLog]:
    """Clean training plus, every n-th epoch, an extra step on attacked batches."""
    adv = cfg.adversarial or AdversarialConfig()
    return _fit(spec, data, split, cfg, seed, adv)


# -- experiments --------------------------------------------------------------------------------

def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunArtifact:
    variant: str          # A2E, A2B2E, A2M2E, aA2E, aA2B2E
    seed: int
    directory: Path
    best_epoch: int
    best_val_loss: float


def variant_label(variant: str, adversarial: bool) -> str:
    return ("a" if adversarial else "") + variant.upper()


def variant_dir(label: str) -> str:
    return label.lower()


def _train_one(spec_dict, data, split, cfg_dict, seed, adversarial, run_dir):
    # module-level so process pools can pickle it
    spec = ModelSpec.from_dict(spec_dict)
    cfg = TrainConfig(**cfg_dict)
    fit = train_adversarial if adversarial else train_clean
    params, trainlog = fit(spec, data, split, cfg, seed)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoint").write_bytes(save_params(params, spec))
    (run_dir / "trainlog.jsonl").write_text(trainlog.to_jsonl())
    return seed, trainlog.best_epoch, trainlog.best_val_loss


def run_experiment(specs: Sequence[ModelSpec], data: Dataset, split: DatasetSplit, cfg: TrainConfig,
                   out_dir: Path | str, adversarial: bool = False, seeds: Sequence[int] | None = None,
                   workers: int = 1, digest: str | None = None) -> list[RunArtifact]:
    """Train ``cfg.n_seeds`` initializations per spec, skipping runs already on disk.

    Completed runs are recorded in ``<out>/<variant>/manifest.json`` together
    with a config digest; a manifest with a different digest is refused.
    """
    out_dir = Path(out_dir)
    seeds = list(range(cfg.n_seeds)) if seeds is None else list(seeds)
    artifacts: list[RunArtifact] = []
    for spec in specs:
        label = variant_label(spec.variant, adversarial)
        vdir = out_dir / variant_dir(label)
        want = digest or config_digest({"spec": spec.to_dict(), "train": cfg.to_dict(),
                                        "adversarial": adversarial, "split": split.split_seed,
                                        "n": len(data)})
        manifest_path = vdir / "manifest.json"
        manifest = {"digest": want, "variant": label, "completed": {}}
        if manifest_path.is_file():
            prior = json.loads(manifest_path.read_text())
            if prior.get("digest") != want:
                raise ConfigError(f"{vdir}: existing runs were made with a different configuration; "
                                  f"use a fresh output directory")
            manifest = prior
        vdir.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        todo = [s for s in seeds if str(s) not in manifest["completed"]
                or not (vdir / str(s) / "checkpoint").is_file()]
        jobs = [(spec.to_dict(), data, split, cfg.to_dict(), s, adversarial, str(vdir / str(s))) for s in todo]
        if workers > 1 and len(jobs) > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_train_one, *zip(*jobs)))
        else:
            results = []
            for job in jobs:
                results.append(_train_one(*job))
                s, be, bv = results[-1]
                manifest["completed"][str(s)] = {"best_epoch": be, "best_val_loss": bv}
                manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        for s, be, bv in results:
            manifest["completed"][str(s)] = {"best_epoch": be, "best_val_loss": bv}
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        for s in seeds:
            info = manifest["completed"][str(s)]
            artifacts.append(RunArtifact(label, s, vdir / str(s), info["best_epoch"], info["best_val_loss"]))
    return artifacts


def load_run(artifact: RunArtifact, spec: ModelSpec) -> ModelParams:
    return load_params((artifact.directory / "checkpoint").read_bytes(), spec, artifact.seed)
