"""Seeded training loop: Adam on NLL (probabilistic) or MAE (deterministic).

Scenes are shuffled per epoch, then bucketed by their effective label
tuple so each batch stacks structurally identical scenes; buckets are
visited in sorted order, making the whole loop a pure function of
(records, settings). The epoch log carries no wall-clock fields so equal
seeds produce byte-identical logs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Standardization, standardize
from .errors import ConfigError, NumericError
from .hierarchy import aggregate_targets
from .model import Forecaster, save_checkpoint
from .optim import Adam
from .seeding import make_rng


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    loss: str = "nll"
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("nll", "mae"):
            raise ConfigError(f"loss must be 'nll' or 'mae', got {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _buckets(model, records, order):
    """Group scene indices by effective label tuple, preserving given order."""
    buckets = {}
    for idx in order:
        rec = records[idx]
        key = (len(rec.labels), model.extractor.effective_labels(rec.labels),
               rec.hierarchy is not None)
        buckets.setdefault(key, []).append(idx)
    return [buckets[k] for k in sorted(buckets, key=repr)]


def _batched_loss(model, records, idxs, kind):
    batch = [records[i] for i in idxs]
    first = batch[0]
    xb = np.stack([r.x for r in batch])
    tree = first.hierarchy
    if tree is not None:
        yb = np.stack([aggregate_targets(r.y, tree) for r in batch])
    else:
        yb = np.stack([r.y for r in batch])
    return model.loss(xb, first.labels, yb, kind=kind, tree=tree)


def _split_loss(model, records, idxs, kind, batch_size):
    """Scene-weighted mean loss over a list of scene indices (no gradients)."""
    total, count = 0.0, 0
    with T.no_grad():
        for bucket in _buckets(model, records, idxs):
            for at in range(0, len(bucket), batch_size):
                chunk = bucket[at:at + batch_size]
                val = float(_batched_loss(model, records, chunk, kind).item())
                total += val * len(chunk)
                count += len(chunk)
    return total / max(count, 1)


def train_model(model: Forecaster, records, settings: TrainSettings,
                out_dir=None, stats: Standardization | None = None,
                log_path=None, config_echo=None, quiet=True):
    """Run the loop; returns (history, best_val). Saves the best-validation
    checkpoint (with standardization stats) under out_dir when given."""
    train_ids = [i for i, r in enumerate(records) if r.split == "train"]
    val_ids = [i for i, r in enumerate(records) if r.split == "val"]
    if not train_ids:
        raise ConfigError("training split is empty")
    opt = Adam(model.params(), lr=settings.lr)
    rng = make_rng(settings.seed, 1)
    history = []
    best_val = np.inf
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh and config_echo is not None:
        log_fh.write(json.dumps({"record": "header", **config_echo}) + "\n")
    try:
        for epoch in range(1, settings.epochs + 1):
            order = np.array(train_ids)
            rng.shuffle(order)
            epoch_total, epoch_count = 0.0, 0
            for bucket in _buckets(model, records, order.tolist()):
                for at in range(0, len(bucket), settings.batch_size):
                    chunk = bucket[at:at + settings.batch_size]
                    loss = _batched_loss(model, records, chunk, settings.loss)
                    val = float(loss.item())
                    if not np.isfinite(val):
                        raise NumericError(
                            f"non-finite loss at epoch {epoch}, "
                            f"batch starting with scene {records[chunk[0]].scene_id}")
                    T.backward(loss)
                    opt.step()
                    opt.zero_grad()
                    epoch_total += val * len(chunk)
                    epoch_count += len(chunk)
            train_loss = epoch_total / epoch_count
            val_loss = (_split_loss(model, records, val_ids, settings.loss,
                                    settings.batch_size * 4)
                        if val_ids else float("nan"))
            entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps({"record": "epoch", **entry}) + "\n")
                log_fh.flush()
            if not quiet:
                print(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f}")
            improved = val_ids and val_loss < best_val
            if improved:
                best_val = val_loss
            if out_dir and (improved or not val_ids):
                extra = {"train_settings": settings.to_dict(),
                         "best_val_loss": best_val if val_ids else None,
                         "epoch": epoch}
                if stats is not None:
                    extra["standardization"] = stats.to_dict()
                if config_echo:
                    extra["config_echo"] = config_echo
                save_checkpoint(model, os.path.join(out_dir, "checkpoint"), extra=extra)
    finally:
        if log_fh:
            log_fh.close()
    return history, best_val


def run_training(records, model_cfg, settings: TrainSettings, out_dir=None,
                 log_path=None, config_echo=None, quiet=True):
    """Standardize, build the model, train; returns (model, stats, history)."""
    std_records, stats = standardize(records)
    model = Forecaster(model_cfg, seed=settings.seed)
    history, _ = train_model(model, std_records, settings, out_dir=out_dir,
                             stats=stats, log_path=log_path,
                             config_echo=config_echo, quiet=quiet)
    return model, stats, history
