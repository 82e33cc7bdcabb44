"""Training loop, optimiser, scheduler and evaluation helpers."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset, Spectrogram, WindowSpec, majority_label, window_count
from .model import ModelConfig, RadMamba
from .ssm import SsmError
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "TrainingError",
    "cross_entropy",
    "AdamState",
    "adamw_step",
    "AdamW",
    "PlateauScheduler",
    "plateau_scheduler",
    "TrainConfig",
    "RunReport",
    "train",
    "train_seeds",
    "evaluate",
    "predict_logits",
    "confusion_matrix",
    "ContinuousResult",
    "eval_continuous",
    "config_hash",
]


class TrainingError(RuntimeError):
    """Training diverged or received invalid gradients."""


# ----------------------------------------------------------------------------
# Loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, Q = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {B}")
    if np.any(labels < 0) or np.any(labels >= Q):
        raise ValueError(f"labels must lie in [0, {Q}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(lse - z[rows, labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ----------------------------------------------------------------------------
# Optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update; returns new parameter arrays and the advanced state.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` happens before, and
    independently of, the bias-corrected adaptive step.  Missing gradients
    count as zero.
    """
    t = state.step + 1
    new_m, new_v, out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"optimiser state for {name} does not match parameter shape {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        q = p * (1 - lr * weight_decay)
        out[name] = (q - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return out, AdamState(t, new_m, new_v)


class AdamW:
    """Stateful wrapper over :func:`adamw_step` that updates tensors in place."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        arrays = {n: t.data for n, t in self.params}
        grads = {n: t.grad for n, t in self.params}
        new, self.state = adamw_step(arrays, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay)
        for n, t in self.params:
            t.data = new[n]

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


# ----------------------------------------------------------------------------
# Scheduler


class PlateauScheduler:
    """Reduce the learning rate when a monitored metric stops improving.

    Matches the common ``ReduceLROnPlateau`` semantics with an absolute
    threshold and no cooldown: the first value sets the baseline, and the
    rate drops once more than ``patience`` consecutive values fail to beat
    the best by ``threshold``.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, threshold: float = 1e-4, min_lr: float = 0.0, mode: str = "max"):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {factor}")
        if mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {mode!r}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.mode = mode
        self.best: float | None = None
        self.num_bad = 0

    def _better(self, v: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "max":
            return v > self.best + self.threshold
        return v < self.best - self.threshold

    def step(self, value: float) -> float:
        if self._better(value):
            self.best = value
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad > self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.num_bad = 0
        return self.lr


def plateau_scheduler(history: Sequence[float], lr0: float, factor: float = 0.5, patience: int = 5, threshold: float = 1e-4, min_lr: float = 0.0, mode: str = "max") -> float:
    """Learning rate after feeding ``history`` through a fresh :class:`PlateauScheduler`."""
    s = PlateauScheduler(lr0, factor, patience, threshold, min_lr, mode)
    for v in history:
        s.step(v)
    return s.lr


# ----------------------------------------------------------------------------
# Configuration and report


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 4e-3
    batch_size: int = 16
    epochs: int = 15
    weight_decay: float = 0.01
    factor: float = 0.5
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 1e-6
    monitor: str = "test"
    val_fraction: float = 0.2
    eval_batch_size: int = 64
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def problems(self) -> list[str]:
        out = []
        if not self.lr0 > 0:
            out.append(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            out.append(f"epochs must be >= 0, got {self.epochs}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.factor < 1:
            out.append(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 0:
            out.append(f"patience must be >= 0, got {self.patience}")
        if self.min_lr < 0:
            out.append(f"min_lr must be >= 0, got {self.min_lr}")
        if self.monitor not in ("test", "val"):
            out.append(f"monitor must be 'test' or 'val', got {self.monitor!r}")
        if not 0 < self.val_fraction < 1:
            out.append(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not self.seeds:
            out.append("seeds must not be empty")
        return out

    def validate(self) -> "TrainConfig":
        probs = self.problems()
        if probs:
            raise ValueError("invalid train config:\n  - " + "\n  - ".join(probs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**dict(d))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int, data_hash: str = "") -> str:
    payload = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "seed": seed, "data": data_hash}
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    """Outcome of one training run.

    ``history[0]`` is the evaluation of the initial weights; entry ``e`` for
    ``e >= 1`` follows training epoch ``e``.  The confusion matrix belongs to
    the retained (best) checkpoint.  ``wall_time_s`` is kept out of the JSON
    form so reruns serialise identically.
    """

    seed: int
    config_hash: str
    model_config: dict
    train_config: dict
    n_params: int
    class_names: list[str]
    history: list[dict]
    best_epoch: int
    best_accuracy: float
    final_accuracy: float
    confusion: list[list[int]]
    data_hash: str = ""
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def save(self, path, include_timing: bool = False) -> None:
        Path(path).write_text(self.to_json(include_timing))

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunReport":
        return cls(**dict(d))

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------
# Evaluation


def predict_logits(model: RadMamba, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    dtype = model.params["head.weight"].dtype
    with no_grad():
        for i in range(0, len(X), batch_size):
            out.append(model(np.asarray(X[i : i + batch_size], dtype=dtype)).data)
    if not out:
        return np.zeros((0, model.cfg.n_classes))
    return np.concatenate(out, axis=0)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows index the true class, columns the predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def evaluate(model: RadMamba, ds: Dataset, batch_size: int = 64) -> tuple[float, np.ndarray, np.ndarray]:
    """(accuracy, confusion matrix, predictions); accuracy is trace / total."""
    if len(ds) == 0:
        return float("nan"), np.zeros((model.cfg.n_classes,) * 2, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pred = predict_logits(model, ds.X, batch_size).argmax(axis=1)
    cm = confusion_matrix(ds.y, pred, model.cfg.n_classes)
    return float(np.trace(cm) / cm.sum()), cm, pred


# ----------------------------------------------------------------------------
# Training


def _carve_validation(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    from .data import stratified_split

    tr, va = stratified_split(ds.y, 1.0 - fraction, seed)
    if len(va) == 0:
        raise ValueError("validation split is empty; increase val_fraction or the training set")
    return ds.subset(tr), ds.subset(va)


def train(
    model_cfg: ModelConfig,
    train_ds: Dataset,
    test_ds: Dataset | None,
    cfg: TrainConfig,
    seed: int = 0,
    progress: Callable[[dict], None] | None = None,
    data_hash: str = "",
) -> tuple[RunReport, RadMamba]:
    """Train one model from ``seed`` and return its report and best checkpoint.

    The scheduler monitors test accuracy (or a held-out slice of the training
    set with ``monitor="val"``).  Without a test set it monitors training
    loss instead and keeps the last epoch.
    """
    cfg.validate()
    if test_ds is not None and len(test_ds) and train_ds.ids and test_ds.ids:
        overlap = set(train_ds.ids) & set(test_ds.ids)
        if overlap:
            raise ValueError(f"train and test share {len(overlap)} sample ids, e.g. {sorted(overlap)[0]!r}")
    if train_ds.n_classes != model_cfg.n_classes:
        raise ValueError(f"dataset has {train_ds.n_classes} classes but the model is configured for {model_cfg.n_classes}")
    t0 = time.perf_counter()
    model_cfg = model_cfg.replace(seed=seed)
    model = RadMamba(model_cfg)
    shuffle_ss, val_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(shuffle_ss)

    fit_ds = train_ds
    monitor_ds = test_ds if test_ds is not None and len(test_ds) else None
    if cfg.monitor == "val":
        fit_ds, monitor_ds = _carve_validation(train_ds, cfg.val_fraction, int(val_ss.generate_state(1)[0]))
    use_loss = monitor_ds is None
    sched = PlateauScheduler(cfg.lr0, cfg.factor, cfg.patience, cfg.threshold, cfg.min_lr, "min" if use_loss else "max")
    opt = AdamW(list(model.named_parameters()), cfg.lr0, cfg.weight_decay)
    dtype = model.params["head.weight"].dtype

    def test_acc():
        if test_ds is None or not len(test_ds):
            return None
        return evaluate(model, test_ds, cfg.eval_batch_size)[0]

    def monitored(train_loss):
        if use_loss:
            return train_loss
        if monitor_ds is test_ds:
            return history[-1]["test_accuracy"]
        return evaluate(model, monitor_ds, cfg.eval_batch_size)[0]

    history: list[dict] = []
    acc0 = test_acc()
    history.append({"epoch": 0, "train_loss": None, "test_accuracy": acc0, "lr": cfg.lr0})
    best_epoch, best_acc = 0, acc0
    best_state = model.state_dict()

    n = len(fit_ds)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            xb = np.asarray(fit_ds.X[idx], dtype=dtype)
            try:
                loss = cross_entropy(model(xb, training=True), fit_ds.y[idx])
            except SsmError as e:
                raise TrainingError(f"epoch {epoch}: {e}") from e
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except TrainingError as e:
                raise TrainingError(f"epoch {epoch}: {e}") from e
            total += lv * len(idx)
            count += len(idx)
        train_loss = total / max(count, 1)
        acc = test_acc()
        entry = {"epoch": epoch, "train_loss": train_loss, "test_accuracy": acc, "lr": opt.lr}
        history.append(entry)
        opt.lr = sched.step(monitored(train_loss))
        if acc is None or (best_acc is not None and acc > best_acc):
            best_epoch, best_acc = epoch, acc
            best_state = model.state_dict()
        if progress is not None:
            progress(entry)

    final_acc = history[-1]["test_accuracy"]
    model.load_state_dict(best_state)
    if test_ds is not None and len(test_ds):
        _, cm, _ = evaluate(model, test_ds, cfg.eval_batch_size)
        confusion = cm.tolist()
    else:
        confusion = []
    report = RunReport(
        seed=seed,
        config_hash=config_hash(model_cfg, cfg, seed, data_hash),
        model_config=model_cfg.to_dict(),
        train_config=cfg.to_dict(),
        n_params=model.n_params(),
        class_names=list(train_ds.class_names),
        history=history,
        best_epoch=best_epoch,
        best_accuracy=best_acc,
        final_accuracy=final_acc,
        confusion=confusion,
        data_hash=data_hash,
        wall_time_s=time.perf_counter() - t0,
    )
    return report, model


def train_seeds(model_cfg: ModelConfig, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig, seeds: Sequence[int] | None = None, progress=None) -> list[RunReport]:
    """Independent runs, one per seed, each with private model state."""
    reports = []
    for s in seeds if seeds is not None else cfg.seeds:
        reports.append(train(model_cfg, train_ds, test_ds, cfg, s, progress)[0])
    return reports


# ----------------------------------------------------------------------------
# Continuous recordings


@dataclass
class ContinuousResult:
    starts: np.ndarray
    predictions: np.ndarray
    truth: np.ndarray | None
    accuracy: float | None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window_start_bin", "predicted_class", "true_class"])
            for i, (s, p) in enumerate(zip(self.starts, self.predictions)):
                w.writerow([int(s), int(p), "" if self.truth is None else int(self.truth[i])])


def eval_continuous(model: RadMamba, seq: Spectrogram, spec: WindowSpec = WindowSpec(), batch_size: int = 64) -> ContinuousResult:
    """Slide a frame over the recording and classify every window.

    Accuracy compares each prediction with the majority per-bin label of
    its window (``None`` when the recording carries no labels).
    """
    C, H, W = seq.data.shape
    if (C, H, spec.frame_len) != model.cfg.input_shape:
        raise ShapeError(f"frames of shape {(C, H, spec.frame_len)} do not match model input {model.cfg.input_shape}")
    n = window_count(W, spec)
    starts = np.arange(n) * spec.stride
    dtype = model.params["head.weight"].dtype
    preds = []
    with no_grad():
        for i in range(0, n, batch_size):
            batch = np.stack([seq.data[:, :, s : s + spec.frame_len] for s in starts[i : i + batch_size]]).astype(dtype)
            preds.append(model(batch).data.argmax(axis=1))
    preds = np.concatenate(preds)
    truth = None
    acc = None
    if seq.continuous:
        truth = np.array([majority_label(seq.label[s : s + spec.frame_len]) for s in starts], dtype=np.int64)
        acc = float(np.mean(preds == truth))
    elif seq.label is not None:
        truth = np.full(n, int(seq.label), dtype=np.int64)
        acc = float(np.mean(preds == truth))
    return ContinuousResult(starts, preds, truth, acc)
