"""Batching, the Adam training loop, k-fold splitting and cross-validation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, TrainingDivergedError
from .evaluation import EvalReport
from .models import Model, ModelSpec
from .numeric import AdamState, OptimizerConfig, adam_step, clip_global_norm, derive_seed, make_rng, softmax_cross_entropy

log = logging.getLogger(__name__)

MAX_FRAMES = 1548  # 15.5 s at a 10 ms shift


@dataclass
class Dataset:
    """Utterance-level features, each item a (T, d) float32 array (time-major)."""

    features: list[np.ndarray]
    labels: np.ndarray
    class_names: list[str]
    speakers: list[str] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature arrays but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")
        if not self.speakers:
            self.speakers = ["unknown"] * len(self.labels)
        if not self.names:
            self.names = [f"item{i:05d}" for i in range(len(self.labels))]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([f.shape[0] for f in self.features], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        indices = [int(i) for i in indices]
        return Dataset(
            features=[self.features[i] for i in indices],
            labels=self.labels[indices],
            class_names=self.class_names,
            speakers=[self.speakers[i] for i in indices],
            names=[self.names[i] for i in indices],
        )

    def with_features(self, features: list[np.ndarray]) -> "Dataset":
        return Dataset(features, self.labels, self.class_names, self.speakers, self.names)


@dataclass
class SequenceBatch:
    features: np.ndarray  # (batch, T_pad, d), zero beyond each length
    lengths: np.ndarray
    labels: np.ndarray
    indices: np.ndarray  # positions in the source dataset

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    optimizer: OptimizerConfig = OptimizerConfig()
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    padding_mode: str = "global_max"
    mask_attention: bool = False
    validation_fraction: float = 0.1
    normalize: bool = True
    clip_norm: float | None = None
    max_frames: int = MAX_FRAMES

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_patience < 0:
            raise ConfigError(f"early_stop_patience must be >= 0, got {self.early_stop_patience}")
        if self.padding_mode not in ("global_max", "per_batch"):
            raise ConfigError(f"padding_mode must be 'global_max' or 'per_batch', got {self.padding_mode!r}")
        if not 0 <= self.validation_fraction <= 0.5:
            raise ConfigError(f"validation_fraction must lie in [0, 0.5], got {self.validation_fraction}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["optimizer"] = OptimizerConfig(**data.get("optimizer", {}))
        return cls(**data)


@dataclass(frozen=True)
class FoldPlan:
    k: int = 5
    mode: str = "stratified_random"

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.mode not in ("stratified_random", "speaker_grouped"):
            raise ConfigError(f"fold mode must be 'stratified_random' or 'speaker_grouped', got {self.mode!r}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc"]
        for i in range(self.epochs):
            lines.append(
                f"{i + 1}\t{self.train_loss[i]:.6f}\t{self.train_acc[i]:.4f}\t{self.val_loss[i]:.6f}\t{self.val_acc[i]:.4f}"
            )
        lines.append(f"# best_epoch\t{self.best_epoch + 1}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8", newline="")


# -- normalization ----------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Per-coefficient standardization fitted on real (unpadded) training frames."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: Sequence[np.ndarray]) -> "Normalizer":
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    @classmethod
    def identity(cls, dim: int = 13) -> "Normalizer":
        return cls(np.zeros(dim, np.float32), np.ones(dim, np.float32))

    def apply(self, features: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [((np.asarray(f, dtype=np.float32) - self.mean) / self.std).astype(np.float32) for f in features]

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(np.array(data["mean"], dtype=np.float32), np.array(data["std"], dtype=np.float32))


# -- batching ---------------------------------------------------------------


def pad_sequences(features: Sequence[np.ndarray], pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in features], dtype=np.int64)
    steps = int(lengths.max()) if pad_to is None else int(pad_to)
    if steps < lengths.max():
        raise DataError(f"cannot pad to {steps} frames; longest item has {lengths.max()}")
    dim = features[0].shape[1]
    out = np.zeros((len(features), steps, dim), dtype=np.float32)
    for i, f in enumerate(features):
        out[i, : f.shape[0]] = f
    return out, lengths


def make_batches(
    features: Sequence[np.ndarray],
    labels,
    cfg: TrainConfig,
    rng=None,
    pad_to: int | None = None,
    shuffle: bool = True,
) -> list[SequenceBatch]:
    """Split into batches of ``cfg.batch_size`` with zero padding on the time axis.

    ``global_max`` pads every batch to ``pad_to`` (default: longest item in
    ``features``); ``per_batch`` pads to the longest item of each batch.
    """
    if len(features) == 0:
        raise DataError("cannot batch an empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    lengths = np.array([f.shape[0] for f in features], dtype=np.int64)
    too_long = np.flatnonzero(lengths > cfg.max_frames)
    if too_long.size:
        i = int(too_long[0])
        raise DataError(f"item {i} has {lengths[i]} frames, above the configured maximum of {cfg.max_frames}")
    order = rng.permutation(len(features)) if shuffle else np.arange(len(features))
    global_steps = int(lengths.max()) if pad_to is None else max(int(pad_to), int(lengths.max()))
    batches = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        steps = global_steps if cfg.padding_mode == "global_max" else int(lengths[idx].max())
        x, lens = pad_sequences([features[i] for i in idx], steps)
        batches.append(SequenceBatch(x, lens, labels[idx], idx))
    return batches


# -- training ---------------------------------------------------------------


def evaluate_loss(model: Model, batches: Sequence[SequenceBatch], mask: bool = False) -> tuple[float, float, np.ndarray]:
    """Mean loss, accuracy and (N, classes) probabilities in infer mode."""
    total_loss, correct, count = 0.0, 0, 0
    probs_all = []
    for batch in batches:
        result = model.forward(batch.features, batch.lengths, mode="infer", mask=mask)
        loss, probs, _ = softmax_cross_entropy(result.logits, batch.labels)
        total_loss += loss * len(batch)
        correct += int(np.sum(np.argmax(probs, axis=1) == batch.labels))
        count += len(batch)
        probs_all.append(probs)
    return total_loss / count, correct / count, np.concatenate(probs_all, axis=0)


def train(
    model: Model,
    train_set: Dataset,
    val_set: Dataset | None,
    cfg: TrainConfig,
    pad_to: int | None = None,
    on_epoch: Callable[[int, TrainHistory], None] | None = None,
) -> tuple[Model, TrainHistory]:
    """Adam + softmax cross-entropy with early stopping on validation loss.

    Returns the model with the parameters of the best validation epoch (or of
    the best training-loss epoch when there is no validation data).
    """
    if len(train_set) == 0:
        raise DataError("empty training set")
    shuffle_rng = make_rng(cfg.seed, 1)
    dropout_rng = make_rng(cfg.seed, 2)
    mask = cfg.mask_attention
    if pad_to is None:
        pad_to = int(train_set.lengths.max())
        if val_set is not None and len(val_set):
            pad_to = max(pad_to, int(val_set.lengths.max()))
    val_batches = None
    if val_set is not None and len(val_set):
        val_batches = make_batches(val_set.features, val_set.labels, cfg, pad_to=pad_to, shuffle=False)

    params = dict(model.params)
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    best_loss, best_params, waited = np.inf, params, 0
    for epoch in range(cfg.max_epochs):
        batches = make_batches(train_set.features, train_set.labels, cfg, shuffle_rng, pad_to=pad_to)
        current = Model(model.spec, params)
        loss_sum, correct = 0.0, 0
        for b, batch in enumerate(batches):
            try:
                result = current.forward(batch.features, batch.lengths, mode="train", rng=dropout_rng, mask=mask)
                loss, probs, dlogits = softmax_cross_entropy(result.logits, batch.labels)
            except NumericError as exc:
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch + 1}, batch {b + 1}: {exc}", epoch=epoch + 1, batch=b + 1, value=float("nan")
                ) from exc
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch + 1}, batch {b + 1}", epoch=epoch + 1, batch=b + 1, value=loss
                )
            grads = current.backward(dlogits, result.tape)
            if cfg.clip_norm is not None:
                grads, _ = clip_global_norm(grads, cfg.clip_norm)
            params, state = adam_step(params, grads, state, cfg.optimizer)
            current = Model(model.spec, params)
            loss_sum += loss * len(batch)
            correct += int(np.sum(np.argmax(probs, axis=1) == batch.labels))
        history.train_loss.append(loss_sum / len(train_set))
        history.train_acc.append(correct / len(train_set))
        if val_batches is not None:
            try:
                val_loss, val_acc, _ = evaluate_loss(current, val_batches, mask)
            except NumericError as exc:
                raise TrainingDivergedError(
                    f"non-finite validation output after epoch {epoch + 1}: {exc}", epoch=epoch + 1, value=float("nan")
                ) from exc
        else:
            val_loss, val_acc = float("nan"), float("nan")
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        monitored = val_loss if val_batches is not None else history.train_loss[-1]
        if not np.isfinite(monitored):
            raise TrainingDivergedError(f"non-finite monitored loss {monitored} after epoch {epoch + 1}", epoch=epoch + 1, value=monitored)
        if monitored < best_loss:
            best_loss, best_params, waited = monitored, params, 0
            history.best_epoch = epoch
        else:
            waited += 1
        log.debug(
            "epoch %d train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
            epoch + 1, history.train_loss[-1], history.train_acc[-1], val_loss, val_acc,
        )
        if on_epoch is not None:
            on_epoch(epoch, history)
        if waited > cfg.early_stop_patience:
            break
    return Model(model.spec, best_params), history


def predict_proba(model: Model, features: Sequence[np.ndarray], batch_size: int = 32, pad_to: int | None = None, mask: bool = False) -> np.ndarray:
    lengths = np.array([f.shape[0] for f in features])
    steps = int(lengths.max()) if pad_to is None else max(int(pad_to), int(lengths.max()))
    out = []
    for start in range(0, len(features), batch_size):
        x, lens = pad_sequences(features[start : start + batch_size], steps)
        out.append(model.forward(x, lens, mode="infer", mask=mask).probs)
    return np.concatenate(out, axis=0)


# -- k-fold -----------------------------------------------------------------


def kfold_split(labels, plan: FoldPlan, rng, speakers: Sequence[str] | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """k disjoint test folds covering every item, each paired with its training complement."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    fold_of = np.full(n, -1, dtype=np.int64)
    if plan.mode == "stratified_random":
        classes, counts = np.unique(labels, return_counts=True)
        small = classes[counts < plan.k]
        if small.size:
            raise ConfigError(f"classes {small.tolist()} have fewer than k={plan.k} items; cannot stratify")
        offset = 0
        for cls in classes:
            members = rng.permutation(np.flatnonzero(labels == cls))
            fold_of[members] = (offset + np.arange(members.size)) % plan.k
            offset = (offset + members.size) % plan.k
    else:
        if speakers is None or len(speakers) != n:
            raise ConfigError("speaker_grouped folds need one speaker id per item")
        groups = sorted(set(speakers))
        if len(groups) < plan.k:
            raise ConfigError(f"only {len(groups)} speakers; cannot build {plan.k} speaker-disjoint folds")
        groups = [groups[i] for i in rng.permutation(len(groups))]
        sizes = {g: 0 for g in groups}
        for s in speakers:
            sizes[s] += 1
        groups.sort(key=lambda g: -sizes[g])  # stable: ties keep the shuffled order
        load = np.zeros(plan.k, dtype=np.int64)
        spk = np.asarray(speakers)
        for g in groups:
            target = int(np.argmin(load))
            fold_of[spk == g] = target
            load[target] += sizes[g]
    everything = np.arange(n)
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(plan.k)]


def validation_split(labels, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Stratified hold-out: returns (fit indices, validation indices) into ``labels``."""
    labels = np.asarray(labels)
    if fraction <= 0:
        return np.arange(len(labels)), np.array([], dtype=np.int64)
    val = []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        take = min(int(round(fraction * members.size)), members.size - 1)
        val.extend(members[:take].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    fit = np.setdiff1d(np.arange(len(labels)), val)
    return fit, val


@dataclass
class FoldResult:
    fold: int
    report: EvalReport
    history: TrainHistory
    test_indices: np.ndarray
    predictions: np.ndarray
    model: Model | None = None
    normalizer: Normalizer | None = None


@dataclass
class CVResult:
    folds: list[FoldResult]

    @property
    def accuracies(self) -> list[float]:
        return [f.report.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies))


def fit_fold(
    spec: ModelSpec,
    dataset: Dataset,
    train_idx,
    cfg: TrainConfig,
    seed: int,
    pad_to: int | None = None,
) -> tuple[Model, TrainHistory, Normalizer]:
    """Normalize, split off validation data, initialize and train one model."""
    train_part = dataset.subset(train_idx)
    normalizer = Normalizer.fit(train_part.features) if cfg.normalize else Normalizer.identity(spec.input_dim)
    train_part = train_part.with_features(normalizer.apply(train_part.features))
    fit_idx, val_idx = validation_split(train_part.labels, cfg.validation_fraction, make_rng(seed, 3))
    model = Model.initialize(spec, derive_seed(seed, 0))
    fold_cfg = replace(cfg, seed=derive_seed(seed, 1))
    trained, history = train(model, train_part.subset(fit_idx), train_part.subset(val_idx), fold_cfg, pad_to=pad_to)
    return trained, history, normalizer


def _run_fold(args) -> FoldResult:
    fold, builder, dataset, train_idx, test_idx, cfg, fold_seed, pad_to = args
    spec = builder(len(dataset.class_names))
    try:
        model, history, normalizer = fit_fold(spec, dataset, train_idx, cfg, fold_seed, pad_to)
    except TrainingDivergedError as exc:
        exc.fold = fold
        exc.args = (f"fold {fold + 1}: {exc.args[0]}",)
        raise
    test = dataset.subset(test_idx)
    probs = predict_proba(model, normalizer.apply(test.features), cfg.batch_size, pad_to, cfg.mask_attention)
    predictions = np.argmax(probs, axis=1)
    report = EvalReport.from_predictions(dataset.class_names, test.labels, predictions)
    log.info("fold %d: accuracy %.4f after %d epochs", fold + 1, report.accuracy, history.epochs)
    return FoldResult(fold, report, history, np.asarray(test_idx), predictions, model, normalizer)


def fold_splits(dataset: Dataset, plan: FoldPlan, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """The (train, test) index pairs :func:`cross_validate` uses for ``seed``."""
    return kfold_split(dataset.labels, plan, make_rng(seed, 7), dataset.speakers)


def cross_validate(
    builder: Callable[[int], ModelSpec],
    dataset: Dataset,
    plan: FoldPlan,
    cfg: TrainConfig,
    workers: int = 1,
) -> CVResult:
    """Train one fresh model per fold and evaluate it on the held-out fold.

    Each fold draws its seeds from ``(cfg.seed, fold)`` only, so results do not
    depend on ``workers``. ``builder`` must be picklable when ``workers > 1``.
    """
    splits = fold_splits(dataset, plan, cfg.seed)
    pad_to = int(dataset.lengths.max()) if cfg.padding_mode == "global_max" else None
    jobs = [
        (fold, builder, dataset, train_idx, test_idx, cfg, derive_seed(cfg.seed, 100 + fold), pad_to)
        for fold, (train_idx, test_idx) in enumerate(splits)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_run_fold, jobs))
    else:
        folds = [_run_fold(job) for job in jobs]
    return CVResult(folds)
