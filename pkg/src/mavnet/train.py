"""Training loop, prediction, evaluation and the inference benchmark.

Each step's minibatch and augmentation draws come from rng streams keyed by
(seed, step, slot), so a run resumed from a checkpoint replays exactly the
same steps as an uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as D
from .autodiff import OptimizerConfig, Tape, Var, adam_step
from .checkpoint import Checkpoint
from .losses import FocalLossConfig
from .metrics import MetricsReport, evaluate_masks
from .model import Model, ModelConfig
from .tensor import argmax_over_channels

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass
class RunConfig:
    model: Optional[ModelConfig] = None
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    loss: str = "focal"  # or "cross_entropy"
    gamma: float = 2.0
    class_weights: Optional[tuple] = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 4
    max_steps: int = 1000
    eval_interval: int = 0
    checkpoint_interval: int = 0
    patience: Optional[int] = None
    seed: int = 0
    augmentation: Optional[D.AugmentationConfig] = field(default_factory=D.AugmentationConfig)
    centroid_class: Optional[int] = None

    def __post_init__(self):
        if self.loss not in ("focal", "cross_entropy"):
            raise ValueError(f"loss must be 'focal' or 'cross_entropy', got {self.loss!r}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")

    def loss_config(self, ignore_index=D.IGNORE_INDEX) -> FocalLossConfig:
        gamma = self.gamma if self.loss == "focal" else 0.0
        return FocalLossConfig(gamma, self.class_weights, ignore_index)

    def to_dict(self) -> dict:
        o = self.optimizer
        return {
            "model": None if self.model is None else self.model.to_dict(),
            "train_manifest": self.train_manifest, "val_manifest": self.val_manifest,
            "loss": self.loss, "gamma": self.gamma,
            "class_weights": None if self.class_weights is None else list(self.class_weights),
            "optimizer": {"learning_rate": o.learning_rate, "beta1": o.beta1, "beta2": o.beta2,
                          "epsilon": o.epsilon},
            "batch_size": self.batch_size, "max_steps": self.max_steps,
            "eval_interval": self.eval_interval, "checkpoint_interval": self.checkpoint_interval,
            "patience": self.patience, "seed": self.seed,
            "augmentation": None if self.augmentation is None else self.augmentation.to_dict(),
            "centroid_class": self.centroid_class,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if doc.get("model") is not None:
            doc["model"] = ModelConfig.from_dict(doc["model"])
        if "optimizer" in doc:
            doc["optimizer"] = OptimizerConfig(**doc["optimizer"])
        if "augmentation" in doc:
            aug = doc["augmentation"]
            doc["augmentation"] = None if aug is None else D.AugmentationConfig.from_dict(aug)
        if doc.get("class_weights") is not None:
            doc["class_weights"] = tuple(doc["class_weights"])
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def batch_indices(seed: int, step: int, n_samples: int, batch_size: int) -> np.ndarray:
    rng = D.sample_rng(seed, 0, step)
    return rng.choice(n_samples, size=batch_size, replace=n_samples < batch_size)


def make_batch(samples, cfg: RunConfig, step: int, ignore_index=D.IGNORE_INDEX):
    idx = batch_indices(cfg.seed, step, len(samples), cfg.batch_size)
    chosen = [samples[i] for i in idx]
    if cfg.augmentation is not None:
        chosen = [D.augment(s, cfg.augmentation, D.sample_rng(cfg.augmentation.seed, 1, step, slot), ignore_index)
                  for slot, s in enumerate(chosen)]
    return D.batches(chosen)


def train_step(model: Model, images, labels, loss_cfg: FocalLossConfig, opt: OptimizerConfig) -> float:
    tape = Tape()
    logits = model.forward_var(tape, Var(images))
    loss = tape.softmax_loss(logits, labels, loss_cfg)
    value = float(loss.value)
    if not math.isfinite(value):
        return value
    tape.backward(loss)
    adam_step(model.parameters(), opt)
    return value


@dataclass
class TrainResult:
    model: Model
    step: int
    losses: list
    reports: list = field(default_factory=list)
    stopped_early: bool = False


def format_log_line(step: int, loss: float, lr: float) -> str:
    return f"{step}\t{loss!r}\t{lr!r}\n"


def train(model: Model, train_samples: Sequence[D.LabeledImage], cfg: RunConfig,
          val_samples: Optional[Sequence[D.LabeledImage]] = None, start_step: int = 0,
          log_path=None, checkpoint_path=None, class_names=None,
          ignore_index=D.IGNORE_INDEX, meta: Optional[dict] = None,
          on_eval: Optional[Callable[[int, MetricsReport], None]] = None) -> TrainResult:
    """Run steps ``start_step + 1 .. cfg.max_steps``; step k is the k-th Adam update."""
    if not train_samples:
        raise ValueError("no training samples")
    loss_cfg = cfg.loss_config(ignore_index)
    class_names = class_names or [f"class{k}" for k in range(model.config.num_classes)]
    meta = dict(meta or {})
    state = meta.setdefault("early_stop", {"best": None, "bad": 0, "window": []})
    losses, reports = [], []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    stopped = False
    step = start_step

    def checkpoint(step):
        if checkpoint_path:
            Checkpoint.from_model(model, step, cfg.optimizer, meta).save(checkpoint_path)

    try:
        for step in range(start_step + 1, cfg.max_steps + 1):
            images, labels = make_batch(train_samples, cfg, step, ignore_index)
            loss = train_step(model, images, labels, loss_cfg, cfg.optimizer)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            losses.append(loss)
            if log_file:
                log_file.write(format_log_line(step, loss, cfg.optimizer.learning_rate))
                log_file.flush()
            state["window"].append(loss)
            interval = cfg.eval_interval
            if interval and step % interval == 0:
                if val_samples:
                    report = evaluate(model, val_samples, class_names, ignore_index, cfg.centroid_class)
                    reports.append((step, report))
                    log.info("step %d  loss %.5f  mean IoU %.4f", step, loss, report.mean_iou)
                    if on_eval:
                        on_eval(step, report)
                if cfg.patience is not None:
                    mean = float(np.mean(state["window"]))
                    state["window"] = []
                    if state["best"] is None or mean < state["best"]:
                        state["best"], state["bad"] = mean, 0
                    else:
                        state["bad"] += 1
                    if state["bad"] >= cfg.patience:
                        log.info("loss stopped decreasing; stopping at step %d", step)
                        stopped = True
                else:
                    state["window"] = []
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                checkpoint(step)
            if stopped:
                break
    finally:
        if log_file:
            log_file.close()
    checkpoint(step)
    return TrainResult(model, step, losses, reports, stopped)


def predict(model: Model, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Class-id masks (n, h, w) for a stack of images (n, c, h, w)."""
    out = []
    for k in range(0, len(images), batch_size):
        out.append(argmax_over_channels(model.forward(images[k:k + batch_size])))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.int64)


def evaluate(model: Model, samples: Sequence[D.LabeledImage], class_names, ignore_index=D.IGNORE_INDEX,
             centroid_class=None, batch_size=4) -> MetricsReport:
    images, labels = D.batches(samples)
    preds = predict(model, images, batch_size)
    return evaluate_masks(preds, labels, class_names, ignore_index, centroid_class)


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchReport:
    height: int
    width: int
    batch: int
    iterations: int
    warmup: int
    latencies: list
    block_times: list  # (kind, mean seconds)

    @property
    def mean(self):
        return statistics.fmean(self.latencies)

    @property
    def median(self):
        return statistics.median(self.latencies)

    @property
    def p95(self):
        return float(np.percentile(self.latencies, 95))

    @property
    def fps(self):
        return self.batch / self.mean

    def to_dict(self):
        return {"height": self.height, "width": self.width, "batch": self.batch,
                "iterations": self.iterations, "warmup": self.warmup,
                "mean_s": self.mean, "median_s": self.median, "p95_s": self.p95, "fps": self.fps,
                "blocks": [{"index": k, "kind": kind, "mean_s": t} for k, (kind, t) in enumerate(self.block_times)]}

    def to_text(self):
        lines = [f"input {self.batch}x{self.height}x{self.width}, {self.iterations} timed passes "
                 f"after {self.warmup} warm-up",
                 f"latency mean {1e3 * self.mean:.2f} ms  median {1e3 * self.median:.2f} ms  "
                 f"p95 {1e3 * self.p95:.2f} ms  ->  {self.fps:.3f} fps"]
        for k, (kind, t) in enumerate(self.block_times):
            lines.append(f"  block {k:2d} {kind:<18} {1e3 * t:9.2f} ms")
        return "\n".join(lines) + "\n"


def estimate_forward_bytes(config: ModelConfig, height: int, width: int, batch: int = 1) -> int:
    """Rough peak working set of one float32 forward pass (largest layer input + patches + output)."""
    from .ops import ConvSpec, output_shape
    peak = 0
    shape = (batch, config.input_channels, height, width)
    for layer in config.layer_stack():
        nxt = output_shape([layer], shape)
        elems = np.prod(shape) + np.prod(nxt)
        if isinstance(layer, ConvSpec) and layer.groups == 1 and (layer.kernel_h, layer.kernel_w) != (1, 1):
            elems += np.prod(nxt) // layer.out_channels * layer.in_channels * layer.kernel_h * layer.kernel_w
        peak = max(peak, int(elems) * 4)
        shape = tuple(nxt)
    return peak


def available_memory() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_AVPHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 4 << 30


def bench(model: Model, height=1024, width=1280, iterations=10, warmup=2, batch=1, seed=0,
          max_bytes: Optional[int] = None) -> BenchReport:
    """Time ``iterations`` forward passes after ``warmup`` discarded ones (forward call only)."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    model.check_input((batch, model.config.input_channels, height, width))
    need = estimate_forward_bytes(model.config, height, width, batch)
    limit = int(0.8 * available_memory()) if max_bytes is None else max_bytes
    if need > limit:
        raise MemoryError(f"a {batch}x{height}x{width} forward pass needs about {need / 2**30:.2f} GiB, "
                          f"limit is {limit / 2**30:.2f} GiB")
    x = np.random.default_rng(seed).random((batch, model.config.input_channels, height, width), dtype=np.float32)
    for _ in range(warmup):
        model.forward(x)
    latencies = []
    per_block = None
    for _ in range(iterations):
        timings = []
        t0 = time.perf_counter()
        model.forward(x, timings)
        latencies.append(time.perf_counter() - t0)
        if per_block is None:
            per_block = [[kind, 0.0] for kind, _ in timings]
        for acc, (_, t) in zip(per_block, timings):
            acc[1] += t
    blocks = [(kind, total / iterations) for kind, total in per_block]
    return BenchReport(height, width, batch, iterations, warmup, latencies, blocks)
