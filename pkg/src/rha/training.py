"""Adam with step decay, the deterministic training loop, and checkpoints."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Metrics, evaluate, ground_truths, load_manifest
from .model import Dims, Prepared, forward, init_params, instance_loss, predict, prepare, profile
from . import numerics as nx
from .numerics import Tensor
from .predictor import LossWeights

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "total", "answer", "spatial", "temporal", "eval_total", "accuracy", "temp_miou", "asa")


@dataclass
class TrainConfig:
    data: str = ""
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    dropout: float = 0.1
    loss_weights: tuple[float, float, float] = (1.0, 0.5, 0.5)
    seed: int = 0
    dims: str = "reduced"
    max_span_len: int | None = None
    out_dir: str = "run"
    plot: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.lr_decay_every < 1:
            raise ValueError("epochs must be >= 0 and lr_decay_every >= 1")
        profile(self.dims)
        LossWeights(*self.loss_weights)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> TrainConfig:
        path = Path(path)
        doc = json.loads(path.read_text())
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = cls(**doc)
        if cfg.data and not os.path.isabs(cfg.data):
            cfg.data = str(path.parent / cfg.data)
        if "loss_weights" in doc:
            cfg.loss_weights = tuple(doc["loss_weights"])
        cfg.validate()
        return cfg


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def step_decay(base: float, factor: float, every: int, epoch: int) -> float:
    return base * factor ** (epoch // every)


def batch_gradients(params: dict[str, Tensor], batch: Sequence[tuple[int, Prepared]], dims: Dims,
                    cfg: TrainConfig, epoch: int) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Mean gradient and mean loss parts over a batch, accumulated in instance-index order."""
    weights = LossWeights(*cfg.loss_weights)
    grads = {k: np.zeros(p.shape) for k, p in params.items()}
    sums = dict.fromkeys(("total", "answer", "spatial", "temporal"), 0.0)
    for idx, prep in sorted(batch, key=lambda b: b[0]):
        for p in params.values():
            p.grad = None
        out = forward(params, prep, dims, training=True, dropout=cfg.dropout,
                      seed=[cfg.seed, epoch, idx], max_span_len=cfg.max_span_len)
        parts = instance_loss(out, prep, weights)
        parts.total.backward()
        for k, p in params.items():
            if p.grad is not None:
                grads[k] += p.grad
        for k, v in parts.values().items():
            sums[k] += v
    n = len(batch)
    return {k: g / n for k, g in grads.items()}, {k: v / n for k, v in sums.items()}


def evaluate_params(params: dict[str, Tensor], preps: Sequence[Prepared], dims: Dims,
                    max_span_len: int | None = None) -> tuple[Metrics, list[tuple[int, object]]]:
    preds = [predict(params, p, dims, max_span_len) for p in preps]
    return evaluate(preds, ground_truths(p.instance for p in preps)), preds


def _epoch_end_pass(params: dict[str, Tensor], preps: Sequence[Prepared], dims: Dims,
                    cfg: TrainConfig) -> tuple[Metrics, float]:
    # one dropout-free forward per instance gives both the metrics and the mean total loss
    weights = LossWeights(*cfg.loss_weights)
    preds, total = [], 0.0
    with nx.no_grad():
        for p in preps:
            out = forward(params, p, dims, max_span_len=cfg.max_span_len)
            preds.append((out.answer, out.span))
            total += instance_loss(out, p, weights).total.item()
    return evaluate(preds, ground_truths(p.instance for p in preps)), total / len(preps)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[dict[str, float]] = field(default_factory=list)


def train(cfg: TrainConfig, dataset: Dataset,
          on_epoch: Callable[[dict[str, float]], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of Adam; returns final parameters and the per-epoch log.

    Batches are drawn from a per-epoch permutation seeded by (seed, epoch).
    Logged losses are batch-size weighted means over the epoch's training
    steps. ``eval_total`` and the metrics come from a dropout-free pass after
    the epoch's last step, so they are free of dropout noise.
    """
    cfg.validate()
    dims = profile(cfg.dims)
    check_dims(dims, dataset.dims)
    preps = [prepare(i) for i in dataset.instances]
    params = init_params(dims, cfg.seed)
    opt = Adam(params, cfg.learning_rate)
    result = TrainResult(params)
    n = len(preps)
    for epoch in range(cfg.epochs):
        opt.lr = step_decay(cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_every, epoch)
        order = np.random.Generator(np.random.PCG64([cfg.seed, epoch])).permutation(n)
        totals = dict.fromkeys(("total", "answer", "spatial", "temporal"), 0.0)
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            grads, means = batch_gradients(params, [(int(i), preps[i]) for i in idx], dims, cfg, epoch)
            opt.step(grads)
            for k, v in means.items():
                totals[k] += v * len(idx) / n
        metrics, eval_total = _epoch_end_pass(params, preps, dims, cfg)
        row = {"epoch": epoch, "lr": opt.lr, **totals, "eval_total": eval_total, **metrics.as_dict()}
        result.log.append(row)
        logger.info("epoch %d loss %.4f acc %.3f miou %.3f asa %.3f", epoch, totals["total"],
                    metrics.accuracy, metrics.temp_miou, metrics.asa)
        if on_epoch:
            on_epoch(row)
    return result


def check_dims(dims: Dims, data_dims: dict[str, int]) -> None:
    want = dims.inputs()
    bad = {k: (want[k], data_dims.get(k)) for k in want if want[k] != data_dims.get(k)}
    if bad:
        raise ValueError("dimension mismatch between model and data (model, data): "
                         + ", ".join(f"{k}={v}" for k, v in bad.items()))


# ---------------------------------------------------------------- checkpoints / logs

def save_checkpoint(path: str | os.PathLike, params: dict[str, Tensor], dims: Dims, cfg: TrainConfig) -> None:
    """Symbol-keyed flat arrays under a dims header, as JSON (floats round-trip exactly)."""
    doc = {
        "dims": dims.as_dict(),
        "config": asdict(cfg),
        "params": {k: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                   for k, p in params.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], Dims, dict]:
    doc = json.loads(Path(path).read_text())
    dims = Dims(**doc["dims"])
    params = {k: Tensor(np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]), requires_grad=True)
              for k, v in doc["params"].items()}
    return params, dims, doc.get("config", {})


def write_log(path: str | os.PathLike, rows: Sequence[dict[str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(int(r[c])) if c == "epoch" else repr(float(r[c])) for c in LOG_COLUMNS) + "\n")


def run_training(cfg: TrainConfig) -> Path:
    """Train from ``cfg.data`` and write checkpoint.json and losses.csv to ``cfg.out_dir``."""
    dataset = load_manifest(cfg.data)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, dataset)
    save_checkpoint(out / "checkpoint.json", result.params, profile(cfg.dims), cfg)
    write_log(out / "losses.csv", result.log)
    if cfg.plot:
        from .plotting import plot_training
        plot_training(result.log, out / "losses.png")
    return out
