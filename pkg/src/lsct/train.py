"""Adam with decoupled weight decay, cosine-annealed learning rate and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .model import LSCT, Normalizer, save_checkpoint
from .signal import ManifestRecord, derive_seed, mask_ppg, read_manifest, read_segment, resolve

__all__ = ["TrainConfig", "AdamState", "adam_step", "cosine_lr", "Dataset", "load_split", "fit",
           "FitResult", "TrainingError", "LOG_COLUMNS", "validation_loss"]

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "train_loss", "val_rmse", "val_prd", "val_fd"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 50
    mask_ratio: float = 0.1
    eval_mask_ratio: float = 0.1
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("invalid train config: " + "; ".join(errors))

    def violations(self) -> list[str]:
        out = []
        if not self.learning_rate > 0:
            out.append("learning_rate must be > 0")
        if self.lr_min < 0 or self.lr_min > self.learning_rate:
            out.append("lr_min must lie in [0, learning_rate]")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if self.checkpoint_every < 1:
            out.append("checkpoint_every must be >= 1")
        for name in ("mask_ratio", "eval_mask_ratio"):
            if not 0 <= getattr(self, name) < 1:
                out.append(f"{name} must lie in [0, 1)")
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> bool:
    """One in-place Adam update of ``params`` (name -> ndarray) from ``grads``.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` precedes the Adam
    move. Returns False, leaving everything untouched, if any gradient is
    non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; step rejected", name)
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            theta -= lr * weight_decay * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        raise ValueError("cosine schedule needs a positive horizon")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------


@dataclass
class Dataset:
    ids: list[str]
    ppg: np.ndarray
    abp: np.ndarray
    bp: list[tuple[float, float]] | None = None

    def __len__(self) -> int:
        return len(self.ids)


def load_split(manifest_path, split: str, records: list[ManifestRecord] | None = None) -> Dataset:
    records = records if records is not None else read_manifest(manifest_path)
    chosen = [r for r in records if r.split == split]
    ppg = np.stack([read_segment(resolve(manifest_path, r.ppg_path), "PPG", r.id).samples
                    for r in chosen]) if chosen else np.zeros((0, 1024))
    abp = np.stack([read_segment(resolve(manifest_path, r.abp_path), "ABP", r.id).samples
                    for r in chosen]) if chosen else np.zeros((0, 1024))
    bp = None
    if chosen and all("sbp" in r.extra and "dbp" in r.extra for r in chosen):
        bp = [(float(r.extra["sbp"]), float(r.extra["dbp"])) for r in chosen]
    return Dataset([r.id for r in chosen], ppg, abp, bp)


# ----------------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------------


@dataclass
class FitResult:
    rows: list[dict]
    best_val_rmse: float
    checkpoints: list[Path]
    log_text: str


def _masked(ds: Dataset, idx: np.ndarray, ratio: float, *seed_parts) -> np.ndarray:
    return np.stack([mask_ppg(ds.ppg[i], ratio, derive_seed(*seed_parts, ds.ids[i])) for i in idx])


def validation_loss(model: LSCT, ds: Dataset, ratio: float, seed: int, batch_size: int = 64) -> float:
    """Objective on the validation split at the fixed evaluation masks."""
    total = 0.0
    for i in range(0, len(ds), batch_size):
        idx = np.arange(i, min(i + batch_size, len(ds)))
        x = _masked(ds, idx, ratio, seed, "val")
        total += model.objective(x, ds.abp[idx]).item() * idx.size
    return total / len(ds)


def _validate(model: LSCT, ds: Dataset, ratio: float, seed: int) -> dict:
    idx = np.arange(len(ds))
    x = _masked(ds, idx, ratio, seed, "val")
    pred = model.predict(x)
    return {
        "val_rmse": float(np.mean([metrics.rmse(a, b) for a, b in zip(ds.abp, pred)])),
        "val_prd": float(np.mean([metrics.prd(a, b) for a, b in zip(ds.abp, pred)])),
        "val_fd": float(np.mean([metrics.frechet(a, b) for a, b in zip(ds.abp, pred)])),
    }


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([str(r["epoch"])] + [f"{r[c]:.12g}" for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def fit(model: LSCT, train: Dataset, val: Dataset | None, cfg: TrainConfig,
        out_dir=None, fit_normalizer: bool = True) -> FitResult:
    """Train ``model`` in place.

    Per epoch: seeded shuffle, per-sample masks derived from
    (seed, epoch, sample id), Adam on the loss, validation at the fixed
    evaluation masks. With ``out_dir`` set, writes ``train_log.csv``,
    ``last.ckpt``, ``best.ckpt`` and ``epoch_XXX.ckpt`` every
    ``checkpoint_every`` epochs.
    """
    if len(train) == 0:
        raise TrainingError("training split is empty")
    if fit_normalizer:
        model.norm = Normalizer.fit(train.ppg, train.abp, model.stft_cfg).resolved(2 * model.cfg.bins)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    state = AdamState()
    params = {k: p.data for k, p in model.params.items()}
    rows: list[dict] = []
    written: list[Path] = []
    best = math.inf
    step = 0

    def save(name, epoch, extra):
        if out is None:
            return
        path = out / name
        meta = {"epoch": epoch, **extra}
        save_checkpoint(path, model, step=step, meta=meta)
        if path not in written:
            written.append(path)

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch)).permutation(n)
        loss_sum = 0.0
        lr = cfg.learning_rate
        for bstart in range(0, n, cfg.batch_size):
            idx = order[bstart:bstart + cfg.batch_size]
            x = _masked(train, idx, cfg.mask_ratio, cfg.seed, epoch)
            lr = cosine_lr(step, total, cfg.learning_rate, cfg.lr_min)
            model.zero_grad()
            L = model.objective(x, train.abp[idx])
            value = L.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bstart // cfg.batch_size}")
            L.backward()
            adam_step(params, {k: p.grad for k, p in model.params.items()}, state, lr,
                      cfg.weight_decay)
            loss_sum += value * idx.size
            step += 1
        row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / n}
        if val is not None and len(val):
            row.update(_validate(model, val, cfg.eval_mask_ratio, cfg.seed))
        else:
            row.update(val_rmse=float("nan"), val_prd=float("nan"), val_fd=float("nan"))
        rows.append(row)
        log.info("epoch %d lr %.3g loss %.5f val_rmse %.4f", epoch, lr, row["train_loss"],
                 row["val_rmse"])
        if out is not None:
            extra = {k: row[k] for k in LOG_COLUMNS[1:]}
            if val is not None and len(val):
                extra["val_loss"] = validation_loss(model, val, cfg.eval_mask_ratio, cfg.seed)
            if epoch % cfg.checkpoint_every == 0:
                save(f"epoch_{epoch:03d}.ckpt", epoch, extra)
            if row["val_rmse"] < best:
                best = row["val_rmse"]
                save("best.ckpt", epoch, extra)
        best = min(best, row["val_rmse"]) if math.isfinite(row["val_rmse"]) else best

    text = _csv(rows)
    if out is not None:
        extra = {}
        if val is not None and len(val):
            extra["val_loss"] = validation_loss(model, val, cfg.eval_mask_ratio, cfg.seed)
        save("last.ckpt", cfg.epochs, extra)
        (out / "train_log.csv").write_text(text)
    return FitResult(rows, best, written, text)
