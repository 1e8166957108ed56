"""Supervised training of the U-net on (observed, iY) pairs, and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pvckit.autodiff import Tape, Tensor, backward, no_grad
from pvckit.dataset import Sample, augment_samples, make_sample, read_cohort
from pvckit.errors import ConfigError, ContractError, DegenerateRegionError, NonFiniteError
from pvckit.fileio import Checkpoint, load_checkpoint, save_checkpoint
from pvckit.losses import LossWeights, combine, imbv, loss_components
from pvckit.metrics import AgreementReport, CaseMetrics, agreement, case_metrics
from pvckit.network import Model, NetworkConfig, build, forward
from pvckit.optim import AdamState, adam_step
from pvckit.phantom import dataset_split

log = logging.getLogger(__name__)

MAX_EPOCHS = 200


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 6
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = MAX_EPOCHS
    patience: int = 10
    seed: int = 0
    augmentation: bool = False
    rotation_step: float = 30.0
    iy_iterations: int = 10
    split: tuple[float, float, float] = (15 / 28, 3 / 28, 10 / 28)
    data_dir: str | None = None
    out_dir: str | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.weights, dict):
            try:
                self.weights = LossWeights(**self.weights)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad loss weights: {e}") from None
        self.split = tuple(float(f) for f in self.split)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if not (1 <= self.epochs <= MAX_EPOCHS):
            raise ConfigError(f"epochs must lie in [1, {MAX_EPOCHS}]")
        if self.lr <= 0 or self.patience < 1 or self.checkpoint_every < 1:
            raise ConfigError("lr, patience and checkpoint_every must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    history: list[dict]
    best_epoch: int
    checkpoint_path: Path | None = None


def load_samples(config: TrainConfig) -> dict[str, list[Sample]]:
    """Read the cohort, split it, and build iY-labelled samples per split."""
    if config.data_dir is None:
        raise ConfigError("data_dir is not set")
    cohort = read_cohort(config.data_dir)
    parts = dataset_split(cohort, config.split, config.seed)
    ch = config.network.input_channels
    return {
        name: [make_sample(cid, case, ch, config.iy_iterations) for cid, case in part]
        for name, part in zip(("train", "val", "test"), parts)
    }


def _stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, list]:
    x = np.stack([s.x for s in samples])
    y = np.stack([s.y for s in samples])
    return x, y, [s.templates for s in samples]


def batch_loss(model: Model, samples: Sequence[Sample], weights: LossWeights) -> tuple[Tensor, dict[str, Tensor]]:
    x, y, templates = _stack(samples)
    out = forward(model, Tensor(x))
    parts = loss_components(Tensor(y), out, templates, weights)
    return combine(parts, weights), parts


def _check_finite(value: float, epoch: int, step: int, parts: dict[str, Tensor]):
    if not math.isfinite(value):
        detail = {k: float(v.data) for k, v in parts.items()}
        raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}: {detail}")


def evaluate_loss(model: Model, samples: Sequence[Sample], weights: LossWeights, batch_size: int) -> dict[str, float]:
    """Sample-weighted mean of composite and component losses without gradients."""
    totals: dict[str, float] = {}
    n = 0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            loss, parts = batch_loss(model, chunk, weights)
            for k, v in {"loss": loss, **parts}.items():
                totals[k] = totals.get(k, 0.0) + float(v.data) * len(chunk)
            n += len(chunk)
    return {k: v / n for k, v in totals.items()}


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def make_checkpoint(model: Model, adam: AdamState, config: TrainConfig, meta: dict) -> Checkpoint:
    full_meta = {"train": config.to_dict(), "lr": config.lr, "model_seed": model.seed, **meta}
    return Checkpoint(model.config.to_dict(), model.state_dict(), adam, full_meta)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build(NetworkConfig.from_dict(ckpt.network), int(ckpt.meta.get("model_seed", 0)))
    model.load_state(ckpt.params)
    return model


DEAD_START_TRIES = 20


def live_model(config: NetworkConfig, seed: int, probe: Sample) -> Model:
    """Build a model whose initial output on ``probe`` is not identically zero.

    With zero biases and a terminal ReLU some initialisations switch every
    output voxel off, which leaves no gradient at all; those are rebuilt
    from a derived seed.
    """
    for k in range(DEAD_START_TRIES):
        model = build(config, seed + 1_000_003 * k)
        if np.any(predict(model, probe).data > 0):
            if k:
                log.warning("model seed %d gave a dead output, using %d", seed, model.seed)
            return model
    raise ContractError(f"no live initialisation within {DEAD_START_TRIES} seeds")


def train(
    config: TrainConfig,
    samples: dict[str, list[Sample]] | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Minimise the composite loss with Adam and validation early stopping.

    ``samples`` maps ``train``/``val`` to sample lists and defaults to
    :func:`load_samples`.  With ``out_dir`` set, per-epoch records go to
    ``train_log.jsonl`` and checkpoints to ``last.ckpt`` / ``best.ckpt``.
    ``stop_after`` ends the run after that many epochs in this call (used to
    exercise resumption).
    """
    if samples is None:
        samples = load_samples(config)
    train_set = list(samples["train"])
    val_set = list(samples.get("val") or [])
    if not train_set:
        raise ContractError("training split is empty")
    if config.augmentation:
        train_set = augment_samples(train_set, config.rotation_step)
    for s in train_set + val_set:
        if not np.all(np.isfinite(s.x)):
            raise NonFiniteError(f"input of sample {s.case_id} is not finite")
    shapes = {s.x.shape for s in train_set + val_set}
    if len(shapes) != 1:
        raise ContractError(f"samples have differing shapes: {sorted(shapes)}")
    c = next(iter(shapes))[0]
    if c != config.network.input_channels:
        raise ConfigError(f"network takes {config.network.input_channels} channels, data has {c}")

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    model = live_model(config.network, config.seed, train_set[0]) if resume is None else None
    adam = AdamState()
    history: list[dict] = []
    start_epoch = 1
    best_val, best_epoch, bad = math.inf, 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model = model_from_checkpoint(ckpt)
        adam = ckpt.adam
        rng.bit_generator.state = ckpt.meta["rng_state"]
        history = list(ckpt.meta.get("history", []))
        start_epoch = int(ckpt.meta["epoch"]) + 1
        best_val = float(ckpt.meta.get("best_val", math.inf))
        best_epoch = int(ckpt.meta.get("best_epoch", 0))
        bad = int(ckpt.meta.get("bad_epochs", 0))
        best_path = Path(resume).with_name("best.ckpt")
        best_state = load_checkpoint(best_path).params if best_path.exists() else model.state_dict()
    else:
        best_state = model.state_dict()

    params = model.parameters()
    id_to_name = {p.id: name for name, p in params.items()}
    log_path = out_dir / "train_log.jsonl" if out_dir else None
    ckpt_path = None
    done = 0
    for epoch in range(start_epoch, config.epochs + 1):
        order = rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        for step, i in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_set[j] for j in order[i:i + config.batch_size]]
            with Tape() as tape:
                loss, parts = batch_loss(model, chunk, config.weights)
            _check_finite(float(loss.data), epoch, step, parts)
            raw = backward(loss)
            tape.clear()
            grads = {id_to_name[k]: g for k, g in raw.items() if k in id_to_name}
            adam_step(params, grads, adam, config.lr, config.beta1, config.beta2)
            for k, v in {"loss": loss, **parts}.items():
                sums[k] = sums.get(k, 0.0) + float(v.data) * len(chunk)
        record = {"epoch": epoch, "step": adam.step}
        record.update({f"train_{k}": v / len(train_set) for k, v in sums.items()})
        if val_set:
            val = evaluate_loss(model, val_set, config.weights, config.batch_size)
            record.update({f"val_{k}": v for k, v in val.items()})
            monitor = val["loss"]
        else:
            monitor = record["train_loss"]
        if monitor < best_val:
            best_val, best_epoch, bad = monitor, epoch, 0
            best_state = model.state_dict()
            if out_dir:
                save_checkpoint(out_dir / "best.ckpt", make_checkpoint(model, adam, config, {
                    "epoch": epoch, "best_val": best_val, "rng_state": _rng_state(rng)}))
        else:
            bad += 1
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        meta = {
            "epoch": epoch,
            "rng_state": _rng_state(rng),
            "history": history,
            "best_val": best_val,
            "best_epoch": best_epoch,
            "bad_epochs": bad,
        }
        stopping = bad >= config.patience or epoch == config.epochs
        if out_dir and (epoch % config.checkpoint_every == 0 or stopping):
            ckpt_path = save_checkpoint(out_dir / "last.ckpt", make_checkpoint(model, adam, config, meta))
        done += 1
        if stopping or (stop_after is not None and done >= stop_after):
            break

    model.load_state(best_state)
    return TrainResult(model, adam, history, best_epoch, ckpt_path)


def predict(model: Model, sample: Sample):
    with no_grad():
        out = forward(model, Tensor(sample.x[None]))
    return sample.observed.like(out.data[0, 0])


METHODS = ("non-pvc", "iy", "network")


@dataclass
class Evaluation:
    rows: list[CaseMetrics]
    agreements: list[AgreementReport]
    imbv: dict[str, list[float]]  # method -> per-case IMBV


def _imbv_or_nan(img, templates) -> float:
    try:
        return imbv(img, templates)
    except DegenerateRegionError:
        return float("nan")


def evaluate(model: Model | None, samples: Sequence[Sample], heart_only: bool = True) -> Evaluation:
    """Metrics of non-PVC, iY and (if given) network output against iY and truth."""
    if not samples:
        raise ContractError("no samples to evaluate")
    if model is not None and samples[0].x.shape[0] != model.config.input_channels:
        raise ConfigError(
            f"checkpoint takes {model.config.input_channels} channels, data has {samples[0].x.shape[0]}"
        )
    rows: list[CaseMetrics] = []
    values: dict[str, list[float]] = {}
    for s in samples:
        images = {"non-pvc": s.observed, "iy": s.label}
        if model is not None:
            images["network"] = predict(model, s)
        refs = {"iy": s.label}
        if s.truth is not None:
            refs["truth"] = s.truth
        for ref_name, ref in refs.items():
            for method, img in images.items():
                rows.append(case_metrics(s.case_id, method, ref_name, ref, img, s.templates, heart_only))
        for method, img in images.items():
            values.setdefault(method, []).append(_imbv_or_nan(img, s.templates))
    reports = []
    if len(samples) >= 2:
        for method, vals in values.items():
            if method != "iy":
                reports.append(agreement(method, vals, "iy", values["iy"]))
        truths = [imbv(s.truth, s.templates) for s in samples if s.truth is not None]
        if len(truths) == len(samples):
            for method, vals in values.items():
                reports.append(agreement(method, vals, "truth", truths))
    return Evaluation(rows, reports, values)
