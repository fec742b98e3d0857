"""Minibatch training over datasets, evaluation, and the epoch log."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import DatasetBatch
from .model import ElboNoise, ElboTerms, NeuralStatistician
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "r_d", "c_d", "l_d", "seconds")


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mc_samples: int = 1
    # 0 writes only the final checkpoint
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    r_d: float
    c_d: float
    l_d: float
    seconds: float

    def row(self, include_seconds: bool = True) -> list[str]:
        vals = [str(self.epoch)] + [f"{v:.17g}" for v in (self.loss, self.r_d, self.c_d, self.l_d)]
        if include_seconds:
            vals.append(f"{self.seconds:.3f}")
        return vals


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, include_seconds: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS if include_seconds else LOG_COLUMNS[:-1])
        for r in self.records:
            w.writerow(r.row(include_seconds))
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["r_d"]), float(r["c_d"]),
                                float(r["l_d"]), float(r["seconds"])) for r in rows])


def _check_corpus(model: NeuralStatistician, corpus: DatasetBatch) -> None:
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if corpus.n_features != model.config.n_features:
        raise ShapeError(f"corpus has {corpus.n_features} features, model expects {model.config.n_features}")


def fit(model: NeuralStatistician, corpus: DatasetBatch, cfg: TrainConfig,
        on_epoch_end: Callable[[int, NeuralStatistician, EpochRecord], None] | None = None) -> TrainLog:
    """Train with Adam on minibatches of whole datasets; returns the per-epoch log.

    Dataset order is reshuffled every epoch from ``cfg.seed``; a trailing
    partial batch is kept.
    """
    _check_corpus(model, corpus)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    train_log = TrainLog()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = None
    if cfg.log_path:
        log_fh = open(cfg.log_path, "w", newline="")
        log_fh.write(",".join(LOG_COLUMNS) + "\n")
        log_fh.flush()
    try:
        n = len(corpus)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(n)
            sums = np.zeros(4)
            for b, lo in enumerate(range(0, n, cfg.batch_size)):
                x = corpus.values[order[lo:lo + cfg.batch_size]]
                try:
                    loss, terms = _step_loss(model, x, rng, cfg.mc_samples)
                except ShapeError as exc:
                    raise ShapeError(f"epoch {epoch}, batch {b}: {exc}") from None
                T.backward(loss)
                for p in params:
                    T.adam_step(p, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
                    p.grad = None
                sums += len(x) * terms
            means = sums / n
            rec = EpochRecord(epoch, -means[3], means[0], means[1], means[2], time.perf_counter() - t0)
            train_log.append(rec)
            log.info("epoch %d loss %.4f r_d %.4f c_d %.4f l_d %.4f (%.1fs)",
                     epoch, rec.loss, rec.r_d, rec.c_d, rec.l_d, rec.seconds)
            if log_fh is not None:
                log_fh.write(",".join(rec.row()) + "\n")
                log_fh.flush()
            if ckpt_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                model.save(ckpt_dir / f"epoch_{epoch:04d}.nstm")
            if on_epoch_end is not None:
                on_epoch_end(epoch, model, rec)
    finally:
        if log_fh is not None:
            log_fh.close()
    if ckpt_dir is not None:
        model.save(ckpt_dir / "final.nstm")
    return train_log


def _step_loss(model: NeuralStatistician, x: np.ndarray, rng: np.random.Generator,
               mc_samples: int) -> tuple[Tensor, np.ndarray]:
    loss = None
    acc = np.zeros(4)
    for _ in range(mc_samples):
        terms = model.elbo(x, rng=rng, training=True)
        loss = -terms.total if loss is None else loss - terms.total
        acc += [terms.r_d.item(), terms.c_d.item(), terms.l_d.item(), terms.total.item()]
    if mc_samples > 1:
        loss = loss * (1.0 / mc_samples)
    return loss, acc / mc_samples


def set_key(values: np.ndarray) -> int:
    """Stable 64-bit key of a set's contents, used to seed its evaluation noise."""
    return int.from_bytes(hashlib.blake2b(np.ascontiguousarray(values, dtype="<f8").tobytes(),
                                          digest_size=8).digest(), "little")


def keyed_noise(model: NeuralStatistician, sets: np.ndarray, seed: int) -> ElboNoise:
    """Noise for each set drawn from its own stream keyed by (seed, contents)."""
    return ElboNoise.concat([
        model.draw_noise(1, s.shape[0], np.random.default_rng([int(seed), set_key(s)])) for s in sets])


def evaluate(model: NeuralStatistician, corpus: DatasetBatch, seed: int = 0, batch_size: int = 64) -> ElboTerms:
    """The noise-sampled bound averaged over every set of ``corpus``; no parameter changes.

    Each set's noise depends only on ``seed`` and the set's contents, so the
    result does not depend on corpus order or batching (up to float rounding).
    """
    _check_corpus(model, corpus)
    per_set = {k: [] for k in ("r_d", "c_d", "l_d", "total")}
    with T.no_grad():
        for lo in range(0, len(corpus), batch_size):
            x = corpus.values[lo:lo + batch_size]
            terms = model.elbo(x, noise=keyed_noise(model, x, seed))
            for k in per_set:
                per_set[k].append(terms.per_set[k])
    arrays = {k: np.concatenate(v) for k, v in per_set.items()}
    return ElboTerms(*(Tensor(arrays[k].mean()) for k in ("r_d", "c_d", "l_d", "total")), per_set=arrays)


def block_means(values, window: int = 5) -> np.ndarray:
    """Means over consecutive non-overlapping windows (a trailing partial window is dropped)."""
    values = np.asarray(values, dtype=float)
    n = len(values) // window
    return values[:n * window].reshape(n, window).mean(axis=1)
