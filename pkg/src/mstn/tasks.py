"""Task runners (forecast, impute, classify, ablation), metrics and baselines."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import VARIANTS, MstnConfig, make_ablated
from .data import (PAPER_MASK_RATIOS, LabeledSet, MaskSpec, TimeSeriesDataset, WindowSpec, make_segments,
                   make_windows, mask_windows, stratified_split)
from .errors import ConfigError, DataError, DegenerateError
from .model import MSTN, window_level
from .rng import Rng
from .tensor import no_grad
from .training import TrainConfig, fit, focal_loss, masked_mse_loss, mse_loss

log = logging.getLogger(__name__)

BASELINES = ("LastValueRepeat", "MeanFill", "GlobalMeanClassifier")
EVAL_BATCH = 256


# -------------------------------------------------------------------- records
@dataclass
class MetricsRecord:
    task: str
    dataset: str
    variant: str
    model: str
    mse: float | None = None
    mae: float | None = None
    horizon: int | None = None
    ratio: float | None = None
    accuracy: float | None = None
    f1_macro: float | None = None
    precision: float | None = None
    recall: float | None = None
    seconds: float | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("mse", "mae"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise DegenerateError(f"{name} must be >= 0, got {v}")
        for name in ("accuracy", "f1_macro", "precision", "recall"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise DegenerateError(f"{name} must lie in [0, 1], got {v}")

    def to_json(self, timing: bool = True) -> str:
        d = asdict(self)
        if not timing:
            d["seconds"] = None
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


@dataclass
class RunOutcome:
    """Model record, the baseline on identical inputs, and the training trace."""

    record: MetricsRecord
    baseline: MetricsRecord
    model: MSTN
    history: list
    extra: dict = field(default_factory=dict)

    @property
    def records(self) -> list[MetricsRecord]:
        return [self.record, self.baseline]


# -------------------------------------------------------------------- metrics
def classification_metrics(pred, true, n_classes: int, average: str = "macro") -> dict:
    """Accuracy plus precision, recall and F1 averaged over classes.

    With ``average="macro"`` every class counts once; a class that never
    occurs in either ``pred`` or ``true`` contributes 0 to each average.
    ``average="weighted"`` weights classes by their support in ``true``.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise DataError(f"{len(pred)} predictions for {len(true)} labels")
    if len(true) == 0:
        raise DegenerateError("classification_metrics needs at least one sample")
    for ids in (pred, true):
        if ids.max() >= n_classes or ids.min() < 0:
            raise IndexError(f"class id {int(ids.max())} out of range for {n_classes} classes")
    if average not in ("macro", "weighted"):
        raise ConfigError(f"average must be 'macro' or 'weighted', got {average!r}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(float)
    pred_pos = conf.sum(axis=0)
    real_pos = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        rec = np.where(real_pos > 0, tp / real_pos, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    w = np.full(n_classes, 1.0 / n_classes) if average == "macro" else real_pos / real_pos.sum()
    return {"accuracy": float(tp.sum() / len(true)), "precision": float(w @ prec),
            "recall": float(w @ rec), "f1": float(w @ f1)}


def _mse_mae(pred: np.ndarray, true: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, float]:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    if mask is not None:
        sel = np.asarray(mask) > 0.5
        if not sel.any():
            raise DegenerateError("mask selects no positions")
        err = err[sel]
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


# ------------------------------------------------------------------ baselines
def last_value_repeat(X: np.ndarray, horizon: int) -> np.ndarray:
    """Forecast every future step as the last observed value, ``[N, H, D]``."""
    return np.repeat(X[:, -1:, :], horizon, axis=1)


def mean_fill(x_masked: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill masked cells with the mean of the observed cells of the same window and feature."""
    level = window_level(np.asarray(x_masked, dtype=np.float64), np.asarray(mask, dtype=np.float64))
    return np.where(mask > 0.5, level, x_masked)


class GlobalMeanClassifier:
    """Always predicts the most frequent training class (ties go to the lowest id)."""

    def fit(self, y: np.ndarray, n_classes: int) -> "GlobalMeanClassifier":
        self.label = int(np.argmax(np.bincount(np.asarray(y, dtype=np.int64), minlength=n_classes)))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.full(len(X), self.label, dtype=np.int64)


# -------------------------------------------------------------------- helpers
def _predict(model: MSTN, X: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(X), EVAL_BATCH):
            m = None if mask is None else mask[s:s + EVAL_BATCH]
            out.append(model(X[s:s + EVAL_BATCH], mask=m).data)
    return np.concatenate(out)


def _model_name(cfg: MstnConfig) -> str:
    return f"MSTN-{cfg.core}"


def _seed_all(cfg: MstnConfig, train_cfg: TrainConfig) -> tuple[MstnConfig, TrainConfig]:
    # one seed drives init, shuffling, dropout and masks
    if cfg.seed != train_cfg.seed:
        train_cfg = replace(train_cfg, seed=cfg.seed)
    return cfg, train_cfg


# ----------------------------------------------------------------- evaluation
# Runners and the ``eval`` command share these, so both report identical numbers.
def _unscale(ds: TimeSeriesDataset, inverse: bool, *arrays):
    if not inverse:
        return arrays
    if ds.scaler is None:
        raise DataError("inverse metrics need a fitted scaler")
    return tuple(ds.scaler.inverse_transform(a) for a in arrays)


def evaluate_forecast(model: MSTN, ds: TimeSeriesDataset, window: WindowSpec, split: str = "test",
                      inverse: bool = False) -> tuple[MetricsRecord, MetricsRecord]:
    """Model and LastValueRepeat scores on the same windows of one split.

    Scores are in normalized units unless ``inverse`` maps both sides back
    through the dataset's scaler.
    """
    X, Y = make_windows(ds, window, split)
    pred, base_pred, Y = _unscale(ds, inverse, _predict(model, X), last_value_repeat(X, window.horizon), Y)
    mse, mae = _mse_mae(pred, Y)
    cfg = model.cfg
    common = dict(task="forecast", dataset=ds.name, variant=cfg.variant, horizon=window.horizon,
                  seed=cfg.seed)
    b_mse, b_mae = _mse_mae(base_pred, Y)
    return (MetricsRecord(model=_model_name(cfg), mse=mse, mae=mae, **common),
            MetricsRecord(model="LastValueRepeat", mse=b_mse, mae=b_mae, seconds=0.0, **common))


def eval_stride(length: int) -> int:
    return max(1, length // 2)


def impute_segments(ds: TimeSeriesDataset, length: int) -> dict[str, np.ndarray]:
    """Train segments use stride 1; val/test segments overlap by half a segment."""
    return {"train": make_segments(ds, length, "train", 1),
            "val": make_segments(ds, length, "val", eval_stride(length)),
            "test": make_segments(ds, length, "test", eval_stride(length))}


def fixed_masks(segments: np.ndarray, spec: MaskSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """The evaluation masks of one split; a function of the spec's seed alone."""
    return mask_windows(segments, spec, Rng(spec.seed, "mask", split))


def evaluate_impute(model: MSTN, ds: TimeSeriesDataset, spec: MaskSpec, split: str = "test",
                    inverse: bool = False) -> tuple[MetricsRecord, MetricsRecord, np.ndarray]:
    """Masked-position scores of the model and of MeanFill on identical masks."""
    cfg = model.cfg
    segs = make_segments(ds, cfg.seq_len, split, eval_stride(cfg.seq_len))
    masked, mask = fixed_masks(segs, spec, split)
    pred, base_pred, truth = _unscale(ds, inverse, _predict(model, masked, mask), mean_fill(masked, mask), segs)
    mse, mae = _mse_mae(pred, truth, mask)
    common = dict(task="impute", dataset=ds.name, variant=cfg.variant, ratio=spec.ratio, seed=cfg.seed)
    b_mse, b_mae = _mse_mae(base_pred, truth, mask)
    return (MetricsRecord(model=_model_name(cfg), mse=mse, mae=mae, **common),
            MetricsRecord(model="MeanFill", mse=b_mse, mae=b_mae, seconds=0.0, **common), mask)


def _class_record(common: dict, model_name: str, m: dict, seconds=None) -> MetricsRecord:
    return MetricsRecord(model=model_name, accuracy=m["accuracy"], f1_macro=m["f1"],
                         precision=m["precision"], recall=m["recall"], seconds=seconds, **common)


def evaluate_classify(model: MSTN, data: LabeledSet, name: str = "labeled", average: str = "macro",
                      split: str = "test") -> tuple[MetricsRecord, MetricsRecord, float]:
    """Scores on one split of the seeded stratified split, the majority-class
    baseline on the same samples, and the model's train accuracy."""
    cfg = model.cfg
    parts = stratified_split(data.y, cfg.seed)
    X = np.asarray(data.X)

    def scores(idx):
        pred = _predict(model, X[idx]).argmax(axis=1)
        return classification_metrics(pred, data.y[idx], data.n_classes, average)

    common = dict(task="classify", dataset=name, variant=cfg.variant, seed=cfg.seed)
    rec = _class_record(common, _model_name(cfg), scores(parts[split]))
    gm = GlobalMeanClassifier().fit(data.y[parts["train"]], data.n_classes)
    idx = parts[split]
    base = _class_record(common, "GlobalMeanClassifier",
                         classification_metrics(gm.predict(X[idx]), data.y[idx], data.n_classes, average), 0.0)
    return rec, base, scores(parts["train"])["accuracy"]


# -------------------------------------------------------------------- runners
def forecast_config(cfg: MstnConfig, ds: TimeSeriesDataset, window: WindowSpec) -> MstnConfig:
    return cfg.replace(task="forecast", input_dim=ds.n_features, seq_len=window.lookback,
                       horizon=window.horizon).validate()


def impute_config(cfg: MstnConfig, ds: TimeSeriesDataset) -> MstnConfig:
    return cfg.replace(task="impute", input_dim=ds.n_features).validate()


def classify_config(cfg: MstnConfig, data: LabeledSet) -> MstnConfig:
    X = np.asarray(data.X)
    return cfg.replace(task="classify", input_dim=X.shape[2], seq_len=X.shape[1],
                       num_classes=data.n_classes).validate()


def run_forecast(ds: TimeSeriesDataset, window: WindowSpec, cfg: MstnConfig,
                 train_cfg: TrainConfig | None = None, on_epoch=None) -> RunOutcome:
    """Train on train windows, early-stop on val windows, score test windows."""
    cfg, train_cfg = _seed_all(forecast_config(cfg, ds, window), train_cfg or TrainConfig())
    t0 = time.perf_counter()
    model = MSTN(cfg)

    def objective(m, batch, train, rng):
        return mse_loss(m(batch[0], train=train, rng=rng), batch[1])

    _, history = fit(model, make_windows(ds, window, "train"), make_windows(ds, window, "val"),
                     train_cfg, objective, on_epoch)
    rec, base = evaluate_forecast(model, ds, window)
    rec.seconds = time.perf_counter() - t0
    return RunOutcome(rec, base, model, history)


def run_impute_ratio(ds: TimeSeriesDataset, ratio: float, cfg: MstnConfig,
                     train_cfg: TrainConfig | None = None, unit: str = "cell", on_epoch=None) -> RunOutcome:
    """One mask ratio: masks are redrawn every training batch; val and test masks are fixed."""
    cfg, train_cfg = _seed_all(impute_config(cfg, ds), train_cfg or TrainConfig())
    spec = MaskSpec(ratio, seed=cfg.seed, unit=unit)
    segs = impute_segments(ds, cfg.seq_len)
    val_masked, val_mask = fixed_masks(segs["val"], spec, "val")
    t0 = time.perf_counter()
    model = MSTN(cfg)

    def objective(m, batch, train, rng):
        if len(batch) == 1:
            x_true = batch[0]
            x_in, mask = mask_windows(x_true, spec, rng)
        else:
            x_in, mask, x_true = batch
        return masked_mse_loss(m(x_in, train=train, mask=mask, rng=rng), x_true, mask)

    _, history = fit(model, (segs["train"],), (val_masked, val_mask, segs["val"]), train_cfg,
                     objective, on_epoch)
    rec, base, mask = evaluate_impute(model, ds, spec)
    rec.seconds = time.perf_counter() - t0
    return RunOutcome(rec, base, model, history, {"test_mask": mask})


def run_impute(ds: TimeSeriesDataset, ratios: Sequence[float] = PAPER_MASK_RATIOS, cfg: MstnConfig | None = None,
               train_cfg: TrainConfig | None = None, unit: str = "cell", on_epoch=None) -> list[RunOutcome]:
    if not len(ratios):
        raise ConfigError("run_impute needs at least one mask ratio")
    cfg = cfg or MstnConfig()
    return [run_impute_ratio(ds, r, cfg, train_cfg, unit, on_epoch) for r in ratios]


def run_classify(data: LabeledSet, cfg: MstnConfig, train_cfg: TrainConfig | None = None,
                 name: str = "labeled", average: str = "macro", on_epoch=None) -> RunOutcome:
    """Stratified 70/10/20 split, focal-loss training, test accuracy/precision/recall/F1."""
    cfg, train_cfg = _seed_all(classify_config(cfg, data), train_cfg or TrainConfig(loss="focal"))
    parts = stratified_split(data.y, cfg.seed)
    X = np.asarray(data.X)
    sets = {s: (X[idx], data.y[idx]) for s, idx in parts.items()}
    t0 = time.perf_counter()
    model = MSTN(cfg)

    def objective(m, batch, train, rng):
        logits = m(batch[0], train=train, rng=rng)
        return focal_loss(logits, batch[1], train_cfg.focal_gamma, train_cfg.focal_alpha)

    _, history = fit(model, sets["train"], sets["val"], train_cfg, objective, on_epoch)
    rec, base, train_acc = evaluate_classify(model, data, name, average)
    rec.seconds = time.perf_counter() - t0
    return RunOutcome(rec, base, model, history, {"train_accuracy": train_acc})


# ------------------------------------------------------------------- ablation
@dataclass
class AblationTable:
    task: str
    variants: tuple
    outcomes: dict

    @property
    def records(self) -> list[MetricsRecord]:
        return [self.outcomes[v].record for v in self.variants]

    def grid(self) -> str:
        """Aligned text table: one column per variant, one row per metric."""
        metrics = ("accuracy", "f1_macro") if self.task == "classify" else ("mse", "mae")
        width = max(10, *(len(v) for v in self.variants))
        lines = ["metric".ljust(8) + "".join(v.rjust(width + 2) for v in self.variants)]
        for name in metrics:
            cells = []
            for v in self.variants:
                value = getattr(self.outcomes[v].record, name)
                cells.append(("-" if value is None else f"{value:.4f}").rjust(width + 2))
            lines.append(name.ljust(8) + "".join(cells))
        return "\n".join(lines)


def resolve_variants(spec: str | Sequence[str]) -> tuple:
    """``"all"`` or a comma list of variant names (case-insensitive), kept in table order."""
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [n.strip() for n in names if n.strip()]
    if len(names) == 1 and names[0].lower() == "all":
        return VARIANTS
    lookup = {v.lower(): v for v in VARIANTS}
    bad = [n for n in names if n.lower() not in lookup]
    if bad or not names:
        raise ConfigError(f"unknown variant(s) {bad or names}; valid: all, {', '.join(VARIANTS)}")
    chosen = {lookup[n.lower()] for n in names}
    return tuple(v for v in VARIANTS if v in chosen)


def run_ablation(data, task: str, cfg: MstnConfig, train_cfg: TrainConfig | None = None,
                 variants: Sequence[str] | str = VARIANTS, window: WindowSpec | None = None,
                 ratio: float = 0.25, on_epoch=None) -> AblationTable:
    """Run every variant on identical data with the same seed.

    ``data`` is a :class:`TimeSeriesDataset` for forecast/impute and a
    :class:`LabeledSet` for classify.
    """
    variants = resolve_variants(variants)
    outcomes = {}
    for v in variants:
        vcfg = make_ablated(cfg, v)
        log.info("ablation %s: variant %s", task, v)
        if task == "forecast":
            if window is None:
                raise ConfigError("forecast ablation needs a WindowSpec")
            outcomes[v] = run_forecast(data, window, vcfg, train_cfg, on_epoch)
        elif task == "impute":
            outcomes[v] = run_impute_ratio(data, ratio, vcfg, train_cfg, on_epoch=on_epoch)
        elif task == "classify":
            outcomes[v] = run_classify(data, vcfg, train_cfg, on_epoch=on_epoch)
        else:
            raise ConfigError(f"unknown task {task!r}")
    return AblationTable(task, variants, outcomes)

