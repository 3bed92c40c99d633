"""Experiment runner: data pipeline, the three training schemes, sweeps, diagnostics."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .data import (
    CsvSchema,
    Dataset,
    ImbalanceSpec,
    NoiseSpec,
    apply_imbalance,
    inject_label_noise,
    load_csv,
    split_validation_balanced,
    synth_gaussian,
)
from .metrics import MetricsReport, confusion, confusion_csv
from .nn import MlpModel
from .optim import History, TrainConfig, train_baseline, train_reweighted, train_weighted_sampler

log = logging.getLogger(__name__)

SCHEMES = ("baseline", "weighted_sampler", "reweight")
OUT_ENV = "METAWEIGHT_OUT"
PRESETS = ("toy-2class", "toy-10class", "noisy-40")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scheme: str = "reweight"
    # data
    dataset: str = "synthetic"
    classes: int = 2
    per_class: int = 1000
    dim: int = 2
    separation: float = 4.0
    csv_path: str | None = None
    csv_header: bool = False
    dominant_class: int = 0
    proportion: float | None = None
    imbalance_total: int | None = None
    flip_rate: float = 0.0
    meta_per_class: int = 3
    eval_per_class: int = 15
    # model and optimizer
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    activation: str = "sigmoid"
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.dataset not in ("synthetic", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("dataset 'csv' needs csv_path")
        if self.scheme == "reweight" and self.meta_per_class < 1:
            raise ConfigError("reweighting needs a non-empty meta-validation set (meta_per_class >= 1)")
        if self.eval_per_class < 1:
            raise ConfigError("eval_per_class must be at least 1")
        if self.proportion is not None and not 0 < self.proportion < 1:
            raise ConfigError("proportion must lie in (0, 1)")
        if not 0 <= self.flip_rate < 1:
            raise ConfigError("flip_rate must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and momentum in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - SweepConfig.KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in d.items() if k in known})
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig(**d)


@dataclass
class SweepConfig:
    KEYS = frozenset({"proportions", "seeds_per_point", "schemes", "workers"})

    proportions: list[float] = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9])
    seeds_per_point: int = 5
    schemes: list[str] = field(default_factory=lambda: ["baseline", "reweight"])
    workers: int = 1

    def __post_init__(self):
        p = list(self.proportions)
        if not p or any(not 0 < x < 1 for x in p) or any(b <= a for a, b in zip(p, p[1:])):
            raise ConfigError("proportions must be strictly increasing and inside (0, 1)")
        if self.seeds_per_point < 1:
            raise ConfigError("seeds_per_point must be at least 1")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError(f"unknown schemes {bad}")

    @classmethod
    def from_dict(cls, d: dict) -> SweepConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.KEYS})


def load_config_dict(ref: str) -> dict:
    """A preset name or a path to a JSON file."""
    if ref in PRESETS:
        text = resources.files("metaweight").joinpath("presets", f"{ref}.json").read_text(encoding="utf-8")
    else:
        try:
            text = Path(ref).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {ref!r}: {e}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {ref!r} is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return d


def load_config(ref: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(load_config_dict(ref))


@dataclass
class Splits:
    train: Dataset
    meta_val: Dataset
    eval_val: Dataset
    flipped: np.ndarray


def build_data(config: ExperimentConfig) -> Splits:
    """Clean balanced validation sets first, then imbalance and noise on the rest."""
    seed = config.seed
    if config.dataset == "csv":
        full = load_csv(config.csv_path, CsvSchema(header=config.csv_header))
    else:
        full = synth_gaussian(config.classes, config.per_class, config.dim, config.separation, seed=seed)
    train, meta_val, eval_val = split_validation_balanced(
        full, per_class=config.meta_per_class, eval_per_class=config.eval_per_class, seed=seed + 1)
    if config.proportion is not None:
        spec = ImbalanceSpec(config.dominant_class, config.proportion)
        train = apply_imbalance(train, spec, seed=seed + 2, total=config.imbalance_total)
    flipped = np.zeros(len(train), dtype=bool)
    if config.flip_rate > 0:
        train, flipped = inject_label_noise(train, NoiseSpec(config.flip_rate, seed + 3))
    return Splits(train, meta_val, eval_val, flipped)


def train(config: ExperimentConfig, splits: Splits):
    sizes = [splits.train.dim, *config.hidden, splits.train.class_count]
    model = MlpModel.init(sizes, config.activation, seed=config.seed + 4)
    tc = TrainConfig(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
                     momentum=config.momentum, seed=config.seed)
    if config.scheme == "baseline":
        return train_baseline(model, splits.train, tc, splits.meta_val)
    if config.scheme == "weighted_sampler":
        return train_weighted_sampler(model, splits.train, tc, splits.meta_val)
    return train_reweighted(model, splits.train, splits.meta_val, tc)


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def run_experiment(config: ExperimentConfig, write: bool = True) -> tuple[MetricsReport, History]:
    """Train one scheme and evaluate on the held-out balanced set.

    Writes ``report.json``, ``history.jsonl`` and ``confusion.csv`` into
    ``config.out`` (default: ``$METAWEIGHT_OUT`` or ``./runs``).
    """
    config.validate()
    splits = build_data(config)
    model, history = train(config, splits)
    preds = model.predict(splits.eval_val.features)
    cm = confusion(preds, splits.eval_val.labels, splits.eval_val.class_count)
    report = MetricsReport.from_confusion(cm)
    if write:
        out = Path(config.out) if config.out else default_out()
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            # the output location is not part of the experiment
            "config": {k: v for k, v in config.to_dict().items() if k != "out"},
            "metrics": json.loads(report.to_json()),
            "data": {
                "train_size": len(splits.train),
                "meta_val_size": len(splits.meta_val),
                "eval_size": len(splits.eval_val),
                "train_class_counts": splits.train.class_counts().tolist(),
                "flipped": int(splits.flipped.sum()),
            },
            "epochs_run": len(history.epochs),
        }
        (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        (out / "history.jsonl").write_text(history.to_jsonl(), encoding="utf-8")
        (out / "confusion.csv").write_text(confusion_csv(cm), encoding="utf-8")
    return report, history


SWEEP_FIELDS = ("kind", "proportion", "scheme", "seed", "balanced_accuracy")


def run_bias_sweep(sweep: SweepConfig, base: ExperimentConfig, out: Path | str | None = None) -> list[dict]:
    """Balanced accuracy for every (proportion, scheme, seed), then per-proportion means.

    Runs execute on a thread pool; rows come back in a fixed order.
    """
    out = Path(out) if out else Path(base.out) if base.out else default_out()
    jobs = []
    for p in sweep.proportions:
        for scheme in sweep.schemes:
            for s in range(sweep.seeds_per_point):
                sub = out / f"p{p:.2f}" / scheme / f"seed{base.seed + s}"
                jobs.append(base.replace(scheme=scheme, proportion=p, seed=base.seed + s, out=str(sub)))

    def work(cfg):
        report, _ = run_experiment(cfg)
        log.info("p=%.2f %s seed=%d: %.4f", cfg.proportion, cfg.scheme, cfg.seed, report.balanced_accuracy)
        return report.balanced_accuracy

    with ThreadPoolExecutor(max_workers=max(1, sweep.workers)) as pool:
        accs = list(pool.map(work, jobs))

    rows = [
        {"kind": "run", "proportion": cfg.proportion, "scheme": cfg.scheme, "seed": cfg.seed, "balanced_accuracy": acc}
        for cfg, acc in zip(jobs, accs)
    ]
    for p in sweep.proportions:
        summary = {"kind": "summary", "proportion": p, "scheme": "", "seed": "", "balanced_accuracy": ""}
        for scheme in sweep.schemes:
            vals = [r["balanced_accuracy"] for r in rows if r["proportion"] == p and r["scheme"] == scheme]
            summary[f"mean_{scheme}"] = float(np.mean(vals))
            summary[f"std_{scheme}"] = float(np.std(vals))
        rows.append(summary)

    header = list(SWEEP_FIELDS) + [f"{k}_{s}" for s in sweep.schemes for k in ("mean", "std")]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def moving_average(values, window: int = 5) -> np.ndarray:
    """Trailing mean; the first entries average over what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def min_so_far(values) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(values, dtype=np.float64))


DIAG_FIELDS = ("epoch", "val_loss", "val_loss_ma5", "grad_sq", "grad_sq_min")


def emit_convergence_diagnostics(history: History, path: Path | str | None = None) -> list[dict]:
    """Per-epoch validation loss, its 5-epoch moving average and the gradient-norm series."""
    epochs = history.epochs
    if not epochs or any("val_loss" not in r or "val_grad_sq" not in r for r in epochs):
        raise ValueError("history lacks per-epoch val_loss / val_grad_sq records")
    loss = [r["val_loss"] for r in epochs]
    grad = [r["val_grad_sq"] for r in epochs]
    ma = moving_average(loss)
    gmin = min_so_far(grad)
    rows = [
        {"epoch": r["epoch"], "val_loss": l, "val_loss_ma5": float(m), "grad_sq": g, "grad_sq_min": float(gm)}
        for r, l, m, g, gm in zip(epochs, loss, ma, grad, gmin)
    ]
    if path is not None:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=DIAG_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return rows
