"""Pretraining and fine-tuning loops, cosine schedule, AdamW, stratified
k-fold cross-validation and binary classification metrics."""

from __future__ import annotations

import ast
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from . import numcore as nc
from .data import AugmentConfig, augment, perturb
from .model import Classifier, MaeConfig, MaeModel, mae_forward, reconstruction_loss
from .volume3d import sample_mask

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 4
    warmup_frac: float = 0.05
    seed: int = 0
    mode: str = "pretrain"
    clip_norm: float | None = 1.0
    augment: AugmentConfig | None = None

    @classmethod
    def full_pretrain(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 1000, "base_lr": 1e-3, "weight_decay": 0.05, **kw})

    @classmethod
    def full_finetune(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 100, "base_lr": 1e-4, "weight_decay": 0.05, "mode": "finetune", **kw})

    @classmethod
    def desk_pretrain(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 30, "base_lr": 1e-3, "batch_size": 16, **kw})

    @classmethod
    def desk_finetune(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 10, "base_lr": 1e-2, "batch_size": 16, "mode": "finetune", **kw})


def cosine_lr(step: int, total: int, base_lr: float, warmup: int = 0) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then half-cosine to 0."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params, weight_decay: float = 0.05, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.ndim >= 2:
                update = update + self.wd * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _fit(params, n: int, cfg: TrainConfig, loss_fn: Callable, what: str,
         on_epoch: Callable | None = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params, cfg.weight_decay)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = int(round(cfg.warmup_frac * total))
    result = TrainResult()
    step = 0
    for epoch in range(cfg.epochs):
        running = []
        for idx in _batches(n, cfg.batch_size, rng):
            lr = cosine_lr(step, total, cfg.base_lr, warmup)
            opt.zero_grad()
            try:
                loss = loss_fn(np.sort(idx), rng)
            except FloatingPointError as exc:
                raise TrainingError(f"{what}: non-finite values at epoch {epoch}, step {step}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"{what}: loss is {value} at epoch {epoch}, step {step}")
            nc.backward(loss)
            if cfg.clip_norm:
                clip_grad_norm(opt.params, cfg.clip_norm)
            opt.step(lr)
            running.append(value)
            step += 1
        result.losses.append(float(np.mean(running)))
        log.info("%s epoch %d/%d loss %.6f", what, epoch + 1, cfg.epochs, result.losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, result.losses[-1])
    result.steps = step
    return result


def _augmented(volumes: np.ndarray, idx, cfg: TrainConfig, rng) -> np.ndarray:
    batch = volumes[idx]
    if cfg.augment is None:
        return batch
    seeds = rng.integers(2 ** 63, size=len(idx))
    return np.stack([augment(v, cfg.augment, int(s)) for v, s in zip(batch, seeds)])


def pretrain(model: MaeModel, volumes: np.ndarray, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Masked-reconstruction training; one fresh random mask per step."""
    mcfg = model.cfg
    T = mcfg.geometry().tokens

    def loss_fn(idx, rng):
        plan = sample_mask(T, mcfg.mask_ratio, rng)
        pred, target = mae_forward(model, _augmented(volumes, idx, cfg, rng), plan)
        return reconstruction_loss(pred, target, plan, mcfg.norm_targets)

    return _fit(model.parameters(), len(volumes), cfg, loss_fn, "pretrain", on_epoch)


def finetune(clf: Classifier, volumes: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
             on_epoch=None) -> TrainResult:
    """Cross-entropy training of the encoder and classification head."""
    labels = np.asarray(labels)

    def loss_fn(idx, rng):
        return nc.cross_entropy(clf(_augmented(volumes, idx, cfg, rng)), labels[idx])

    return _fit(clf.parameters(), len(volumes), cfg, loss_fn, "finetune", on_epoch)


def predict_scores(clf: Classifier, volumes: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Softmax probability of class 1 for each volume."""
    out = []
    with nc.no_grad():
        for i in range(0, len(volumes), batch_size):
            z = clf(volumes[i:i + batch_size]).data
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            out.append(p[:, 1] / p.sum(axis=1))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# evaluation protocol
# --------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    folds: list[tuple[np.ndarray, np.ndarray]]
    seed: int | None = None


def stratified_kfold(labels, k: int = 5, seed=0) -> FoldPlan:
    """Shuffle each class and deal it into ``k`` near-equal parts.

    Classes take turns absorbing the remainder parts so fold sizes stay
    within one sample of each other overall.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    tests: list[list[int]] = [[] for _ in range(k)]
    shift = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < k:
            raise ValueError(f"class {c} has {members.size} members, fewer than k={k}")
        parts = np.array_split(rng.permutation(members), k)
        for f, part in enumerate(parts):
            tests[(f + shift) % k].extend(part.tolist())
        shift += members.size % k
    everything = np.arange(labels.size)
    folds = []
    for t in tests:
        test = np.sort(np.array(t, dtype=np.int64))
        folds.append((np.setdiff1d(everything, test), test))
    return FoldPlan(k, folds, seed if isinstance(seed, (int, np.integer)) else None)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = (scores >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    denom = 2 * tp + fp + fn
    return {
        "accuracy": float((pred == labels).mean()),
        "f1": 2 * tp / denom if denom else 0.0,
        "auc": roc_auc(scores, labels),
    }


@dataclass
class CvReport:
    folds: list[dict]
    mean: dict
    std: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _summarize(rows: list[dict]) -> CvReport:
    keys = ["accuracy", "f1", "auc"]
    return CvReport(rows,
                    {k: float(np.mean([r[k] for r in rows])) for k in keys},
                    {k: float(np.std([r[k] for r in rows])) for k in keys})


def _fold_classifier(mcfg: MaeConfig, encoder_state, seed: int) -> Classifier:
    clf = Classifier(mcfg, seed)
    if encoder_state is not None:
        clf.encoder.load_state_dict(encoder_state)
    return clf


def encoder_state(mae: MaeModel) -> dict[str, np.ndarray]:
    return mae.encoder.state_dict()


def cross_validate(volumes, labels, mcfg: MaeConfig, ft: TrainConfig, encoder_state=None,
                   k: int = 5, seed: int = 0) -> CvReport:
    """Fine-tune a fresh classifier per fold (from ``encoder_state`` when given,
    else random init) and score its held-out fold."""
    plan = stratified_kfold(labels, k, seed)
    rows = []
    for f, (train, test) in enumerate(plan.folds):
        clf = _fold_classifier(mcfg, encoder_state, seed + f)
        res = finetune(clf, volumes[train], labels[train], replace(ft, seed=ft.seed + f))
        m = metrics(predict_scores(clf, volumes[test]), labels[test])
        m.update(fold=f, n_train=int(train.size), n_test=int(test.size), final_loss=res.losses[-1] if res.losses else None)
        rows.append(m)
        log.info("fold %d: %s", f, m)
    return _summarize(rows)


PERTURBATIONS = [("none", 0.0), ("rotation", 10.0), ("rotation", 45.0), ("rotation", 90.0),
                 ("bias_field", 0.1), ("bias_field", 0.4), ("bias_field", 0.5)]


def perturbation_label(kind: str, amount: float) -> str:
    if kind == "none":
        return "None"
    if kind == "rotation":
        return f"Rotation {amount:g}°"
    return f"Bias Field (C={amount:g})"


def perturb_eval(clf: Classifier, volumes, labels, perturbations=PERTURBATIONS,
                 seed: int = 0, axis: int = 0) -> list[dict]:
    """Accuracy of a trained classifier under each test-time perturbation."""
    rows = []
    for kind, amount in perturbations:
        if kind == "none":
            pv = volumes
        else:
            pv = np.stack([perturb(v, kind, amount, seed=seed + i, axis=axis)
                           for i, v in enumerate(volumes)])
        scores = predict_scores(clf, pv)
        acc = float(((scores >= 0.5).astype(int) == np.asarray(labels)).mean())
        rows.append({"perturbation": perturbation_label(kind, amount), "kind": kind,
                     "amount": amount, "accuracy": acc})
    return rows


def format_perturb_table(rows: list[dict]) -> str:
    names = [r["perturbation"] for r in rows]
    widths = [max(len(n), 8) for n in names]
    head = "Test-time Perturbation | " + " | ".join(n.rjust(w) for n, w in zip(names, widths))
    body = "Accuracy               | " + " | ".join(f"{r['accuracy']:.3f}".rjust(w) for r, w in zip(rows, widths))
    return head + "\n" + body


# --------------------------------------------------------------------------
# run configuration and reports
# --------------------------------------------------------------------------


def read_config(path) -> dict:
    """``key = value`` lines; values parsed as Python literals when possible."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def write_folds_csv(path, report: CvReport) -> None:
    cols = ["fold", "n_train", "n_test", "accuracy", "f1", "auc", "final_loss"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.folds:
            w.writerow([r.get(c) for c in cols])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")
