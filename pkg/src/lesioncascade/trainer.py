"""Training loops for the segmenter and the classifier.

Both stages share one loop: seeded shuffling per epoch, optional per-sample
augmentation, Adam with a constant learning rate, early stopping on the
monitored loss and best-weights retention.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment_image, augment_pair, sample_seed
from .checkpoint import load_checkpoint, save_checkpoint
from .clsmodel import ClsModel
from .dataio import DatasetManifest, NormalizationPolicy, labels_of, load_batch
from .losses import cls_loss, seg_loss
from .metrics import classification_report, segmentation_report
from .segmodel import SegModel, model_dtype

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.001
    max_epochs: int = 15
    early_stop_patience: int = 5
    early_stop_min_delta: float = 1e-4
    seed: int = 0
    monitor: str | None = None  # None: val_loss when validation data exists, else train_loss
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.monitor not in (None, "train_loss", "val_loss"):
            raise ValueError(f"monitor must be train_loss or val_loss, got {self.monitor!r}")


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_components: dict
    val_loss: float | None = None
    metric_snapshot: dict | None = None
    wall_time_s: float = 0.0

    def log_line(self) -> str:
        # wall time is kept out of the log so reruns are byte-identical
        d = asdict(self)
        d.pop("wall_time_s")
        return json.dumps(d, sort_keys=True)


def adam_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place.

    ``state`` holds ``step`` and the per-parameter moment lists ``m``/``v``;
    an empty dict is a fresh state.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    b1, b2 = betas
    if not state:
        state.update(step=0, m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params])
    state["step"] += 1
    t = state["step"]
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise FloatingPointError("non-finite gradient")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params, state


class Adam:
    """Thin optimizer wrapper over ``adam_step``."""

    def __init__(self, params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)

    def state_dict(self) -> dict:
        return copy.deepcopy(self.state)

    def load_state_dict(self, state: dict):
        self.state = copy.deepcopy(state)


def early_stop_check(history, patience: int, min_delta: float = 0.0) -> bool:
    """True once ``patience`` consecutive epochs fail to beat the best by more than ``min_delta``."""
    history = list(history)
    if not history:
        return False
    best = history[0]
    since = 0
    for v in history[1:]:
        if v < best - min_delta:
            best, since = v, 0
        else:
            since += 1
    return since >= patience


def _nchw(batch: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).to(dtype)


class _Task:
    """Batch assembly, loss and evaluation for one model type."""

    def __init__(self, model, x, y, augment, value_range, seed):
        self.model, self.x, self.y = model, x, y
        self.augment, self.value_range, self.seed = augment, value_range, seed
        self.dtype = model_dtype(model)
        self.seg = isinstance(model, SegModel)

    def batch(self, idx, epoch):
        xs, ys = [], []
        for i in idx:
            img, tgt = self.x[i], self.y[i]
            if self.augment is not None:
                s = sample_seed(self.seed, epoch, int(i))
                if self.seg:
                    img, tgt = augment_pair(img, tgt, self.augment, s, self.value_range)
                else:
                    img = augment_image(img, self.augment, s, self.value_range)
            xs.append(img)
            ys.append(tgt)
        x = _nchw(np.stack(xs), self.dtype)
        if self.seg:
            return x, _nchw(np.stack(ys), self.dtype)
        return x, torch.as_tensor(np.array(ys), dtype=torch.long)

    def loss(self, x, y):
        if self.seg:
            return seg_loss(self.model(x), y)
        return cls_loss(self.model(x), y, self.model.config.num_classes)


@torch.no_grad()
def _evaluate(model, x, y, batch_size):
    """Mean loss, loss components and a metrics snapshot on fixed data (no augmentation)."""
    was_training = model.training
    model.eval()
    dtype = model_dtype(model)
    seg = isinstance(model, SegModel)
    total, comps, outputs = 0.0, {}, []
    for start in range(0, len(x), batch_size):
        xb = _nchw(x[start:start + batch_size], dtype)
        if seg:
            yb = _nchw(y[start:start + batch_size], dtype)
            pred = model(xb)
            lv = seg_loss(pred, yb)
            outputs.append((pred >= 0.5).to(torch.uint8).permute(0, 2, 3, 1).numpy())
        else:
            yb = torch.as_tensor(y[start:start + batch_size], dtype=torch.long)
            logits = model(xb)
            lv = cls_loss(logits, yb, model.config.num_classes)
            outputs.append(torch.softmax(logits, dim=1).argmax(dim=1).numpy())
        n = len(xb)
        total += lv.item() * n
        for k, v in lv.as_floats().items():
            comps[k] = comps.get(k, 0.0) + v * n
    model.train(was_training)
    n = len(x)
    if seg:
        preds = np.concatenate(outputs)
        report = segmentation_report(zip(preds, y))
    else:
        preds = np.concatenate(outputs)
        report = classification_report(preds.tolist(), list(y), model.config.class_names)
    return total / n, {k: v / n for k, v in comps.items()}, report


def fit(model, x_train, y_train, config: TrainConfig, x_val=None, y_val=None,
        augment: AugmentConfig | None = None, value_range=(0.0, 1.0), log_path=None,
        checkpoint_path=None, checkpoint_meta: dict | None = None, resume: bool = False):
    """Train ``model`` on in-memory arrays.

    ``x_*`` are NHWC float arrays; ``y_*`` are NHWC binary masks for a
    segmenter or integer class indices for a classifier. Returns
    ``(model, records)`` with the best-monitored weights loaded.
    """
    if len(x_train) == 0:
        raise ValueError("training set is empty")
    has_val = x_val is not None and len(x_val) > 0
    monitor = config.monitor or ("val_loss" if has_val else "train_loss")
    if monitor == "val_loss" and not has_val:
        raise ValueError("monitor=val_loss requires validation data")
    meta = checkpoint_meta or {}
    task = _Task(model, x_train, y_train, augment, value_range, config.seed)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    records: list[EpochRecord] = []
    history: list[float] = []
    best_value, best_state = math.inf, None
    start_epoch = 1
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        _, payload = load_checkpoint(checkpoint_path)
        ts = payload["train_state"]
        model.load_state_dict(ts["last_state"])
        opt.load_state_dict(ts["optimizer"])
        records = [EpochRecord(**r) for r in ts["records"]]
        history = list(ts["history"])
        best_value, best_state = ts["best_value"], ts["best_state"]
        start_epoch = ts["epoch"] + 1
        if ts.get("stopped"):
            start_epoch = config.max_epochs + 1
        log.info("resuming from epoch %d", start_epoch)
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w")
        for r in records:
            log_fh.write(r.log_line() + "\n")
    stopped = False
    try:
        for epoch in range(start_epoch, config.max_epochs + 1):
            t0 = time.perf_counter()
            torch.manual_seed(config.seed * 100003 + epoch)
            order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(len(x_train))
            model.train()
            total, comps = 0.0, {}
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                xb, yb = task.batch(idx, epoch)
                lv = task.loss(xb, yb)
                if not torch.isfinite(lv.total):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, batch {b} (sample indices {idx.tolist()})")
                opt.zero_grad()
                lv.total.backward()
                opt.step()
                total += lv.item() * len(idx)
                for k, v in lv.as_floats().items():
                    comps[k] = comps.get(k, 0.0) + v * len(idx)
            n = len(order)
            train_loss = total / n
            comps = {k: v / n for k, v in comps.items()}
            if has_val:
                val_loss, _, report = _evaluate(model, x_val, y_val, config.eval_batch_size)
            else:
                val_loss = None
                _, _, report = _evaluate(model, x_train, y_train, config.eval_batch_size)
            monitored = val_loss if monitor == "val_loss" else train_loss
            history.append(monitored)
            if monitored < best_value:
                best_value, best_state = monitored, copy.deepcopy(model.state_dict())
            rec = EpochRecord(epoch, train_loss, comps, val_loss, report.to_dict(),
                              time.perf_counter() - t0)
            records.append(rec)
            if log_fh is not None:
                log_fh.write(rec.log_line() + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.5f monitored %.5f", epoch, train_loss, monitored)
            stopped = early_stop_check(history, config.early_stop_patience, config.early_stop_min_delta)
            if checkpoint_path is not None:
                state = {
                    "epoch": epoch,
                    "optimizer": opt.state_dict(),
                    "records": [asdict(r) for r in records],
                    "history": history,
                    "best_value": best_value,
                    "best_state": best_state,
                    "last_state": copy.deepcopy(model.state_dict()),
                    "stopped": stopped,
                }
                save_checkpoint(checkpoint_path, model, train_state=state, state_dict=best_state, **meta)
            if stopped:
                log.info("early stop after epoch %d", epoch)
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, records


def _policy_for(model, policy: NormalizationPolicy | None) -> NormalizationPolicy:
    h, w, _ = model.config.input_size
    if policy is None:
        return NormalizationPolicy("unit_interval", (h, w))
    if tuple(policy.target_size) != (h, w):
        raise ValueError(f"policy target size {policy.target_size} does not match model input {(h, w)}")
    return policy


def train_segmentation(model: SegModel, train_manifest: DatasetManifest, val_manifest: DatasetManifest | None,
                       config: TrainConfig, policy: NormalizationPolicy | None = None,
                       augment: AugmentConfig | None = None, **kw):
    if len(train_manifest) == 0:
        raise ValueError("training manifest is empty")
    policy = _policy_for(model, policy)
    x, y = load_batch(train_manifest.samples, policy)
    xv = yv = None
    if val_manifest is not None and len(val_manifest):
        xv, yv = load_batch(val_manifest.samples, policy)
    return fit(model, x, y, config, xv, yv, augment, policy.value_range, **kw)


def train_classification(model: ClsModel, train_manifest: DatasetManifest, val_manifest: DatasetManifest | None,
                         config: TrainConfig, policy: NormalizationPolicy | None = None,
                         augment: AugmentConfig | None = None, **kw):
    if len(train_manifest) == 0:
        raise ValueError("training manifest is empty")
    policy = _policy_for(model, policy)
    x = load_batch(train_manifest.samples, policy, with_masks=False)
    y = labels_of(train_manifest.samples)
    xv = yv = None
    if val_manifest is not None and len(val_manifest):
        xv = load_batch(val_manifest.samples, policy, with_masks=False)
        yv = labels_of(val_manifest.samples)
    return fit(model, x, y, config, xv, yv, augment, policy.value_range, **kw)
