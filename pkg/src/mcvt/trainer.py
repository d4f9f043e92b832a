"""Training and experiment harness: cross-entropy + Adam with cosine
annealing, k-fold evaluation, timing, and ablation sweeps."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .tensor import Tensor, no_grad
from .dataset import kfold_split
from .model import MultiViewNet, save_checkpoint
from . import fusion as fusion_mod

__all__ = [
    "TrainConfig", "TrainReport", "cross_entropy", "Adam", "cosine_lr",
    "train", "train_fold", "evaluate", "predict", "ablation_sweep",
    "stack_views",
]


@dataclass
class TrainConfig:
    lr0: float = 0.0002
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 8
    seed: int = 42
    lr_min: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class TrainReport:
    seed: int
    strategy: str
    modalities: list
    views: int
    epoch_losses: list = field(default_factory=list)    # per fold: list of floats
    epoch_lrs: list = field(default_factory=list)
    fold_accuracies: list = field(default_factory=list)  # percent
    mean_accuracy: float = 0.0
    std_accuracy: float = 0.0
    per_instance_ms: float = 0.0
    label: str = ""

    def finalize(self):
        if self.fold_accuracies:
            self.mean_accuracy = float(np.mean(self.fold_accuracies))
            self.std_accuracy = float(np.std(self.fold_accuracies))
        return self

    def to_json(self):
        return json.dumps(asdict(self), indent=1)

    def summary_line(self):
        return (f"{self.label or self.strategy}: "
                f"acc {self.mean_accuracy:.2f} +/- {self.std_accuracy:.2f} %, "
                f"{self.per_instance_ms:.2f} ms/instance")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under the logits."""
    targets = np.asarray(targets)
    B, C = logits.shape
    if targets.shape != (B,):
        raise ValueError(f"targets shape {targets.shape} does not match batch {B}")
    if targets.min() < 0 or targets.max() >= C:
        raise ValueError(f"targets out of range [0, {C})")
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), targets] = 1.0
    logp = logits.log_softmax(axis=-1)
    return -(logp * Tensor(onehot)).sum() * (1.0 / B)


def cosine_lr(t, total, lr0, lr_min=0.0):
    """lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / total))."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t / total))


class Adam:
    """Bias-corrected Adam over a list of parameters."""

    def __init__(self, params, betas=(0.9, 0.98), eps=1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ----------------------------------------------------------------- batching

def stack_views(samples, modalities, dtype=np.float32):
    """Samples -> dict modality -> (n, l, C, H, W) arrays, plus labels."""
    labels = np.array([s.label for s in samples], dtype=np.int64)
    out = {}
    if "rgb" in modalities:
        rgb = np.stack([[v.rgb for v in s.views] for s in samples])
        out["rgb"] = np.ascontiguousarray(
            rgb.transpose(0, 1, 4, 2, 3).astype(dtype) / 255.0)
    if "depth" in modalities:
        depth = np.stack([[v.depth for v in s.views] for s in samples])
        out["depth"] = depth[:, :, None, :, :].astype(dtype)
    return out, labels


def _forward_batch(model, arrays, idx):
    batch = {m: Tensor(arr[idx]) for m, arr in arrays.items()}
    return model(batch)


def train_fold(model, arrays, labels, train_idx, cfg, log=None):
    """Train one model on one fold's training indices; returns loss/lr lists."""
    opt = Adam(list(model.parameters()), betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    losses, lrs = [], []
    model.train()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        nb = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = train_idx[order[start:start + cfg.batch_size]]
            opt.zero_grad()
            logits = _forward_batch(model, arrays, idx)
            loss = cross_entropy(logits, labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"training diverged (NaN loss) at epoch {epoch}")
            loss.backward(free_graph=True)
            opt.step(lr)
            epoch_loss += value
            nb += 1
        losses.append(epoch_loss / max(nb, 1))
        lrs.append(float(lr))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.4f} lr {lr:.6f}")
    return losses, lrs


def predict(model, arrays, batch_size=16):
    """Eval-mode class predictions for stacked view arrays."""
    n = next(iter(arrays.values())).shape[0]
    model.eval()
    preds = np.empty(n, dtype=np.int64)
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            logits = _forward_batch(model, arrays, idx)
            preds[idx] = np.argmax(logits.data, axis=1)
    return preds


def evaluate(model, samples_or_arrays, labels=None, batch_size=16, timing_reps=3):
    """(accuracy %, per-instance ms). Timing is the median of full test
    passes; accuracy is deterministic across repetitions (eval mode)."""
    if labels is None:
        arrays, labels = stack_views(samples_or_arrays, model.config.modalities)
    else:
        arrays = samples_or_arrays
    n = len(labels)
    if n == 0:
        raise ValueError("evaluate requires a non-empty sample set")
    durations = []
    preds = None
    for _ in range(timing_reps):
        t0 = time.perf_counter()
        preds = predict(model, arrays, batch_size=batch_size)
        durations.append((time.perf_counter() - t0) / n * 1000.0)
    accuracy = float((preds == labels).mean() * 100.0)
    return accuracy, float(np.median(durations))


def train(samples, model_config, train_config, folds=5, out_dir=None,
          log=None, label=""):
    """k-fold cross-validated training; returns a TrainReport.

    A fresh model is built per fold with a fold-dependent seed. The best fold
    checkpoint (by held-out accuracy) is written to <out>/fold<i>/best.ckpt.
    """
    arrays, labels = stack_views(samples, model_config.modalities)
    n_views = samples[0].views.__len__() if samples else 0
    splits = kfold_split(len(samples), folds, train_config.seed)
    report = TrainReport(seed=train_config.seed, strategy=model_config.fusion,
                         modalities=list(model_config.modalities),
                         views=n_views, label=label)
    times = []
    for i, (train_idx, test_idx) in enumerate(splits):
        rng = np.random.default_rng(train_config.seed + 1000 * i)
        model = MultiViewNet(model_config, rng)
        t0 = time.perf_counter()
        losses, lrs = train_fold(model, arrays, labels, train_idx,
                                 train_config, log=log)
        fold_seconds = time.perf_counter() - t0
        acc, ms = evaluate(model, {m: a[test_idx] for m, a in arrays.items()},
                           labels[test_idx])
        report.epoch_losses.append(losses)
        report.epoch_lrs.append(lrs)
        report.fold_accuracies.append(acc)
        times.append(ms)
        if out_dir is not None:
            fold_dir = Path(out_dir) / f"fold{i}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, fold_dir / "best.ckpt")
            with open(fold_dir / "config.json", "w") as fh:
                fh.write(json.dumps(model_config.to_dict(), indent=1))
        if log:
            log(f"fold {i}: accuracy {acc:.2f} % "
                f"({fold_seconds:.1f} s train, {ms:.2f} ms/instance)")
    if out_dir is not None and report.fold_accuracies:
        best = int(np.argmax(report.fold_accuracies))
        src = Path(out_dir) / f"fold{best}" / "best.ckpt"
        (Path(out_dir) / "best.ckpt").write_bytes(src.read_bytes())
    report.per_instance_ms = float(np.median(times))
    return report.finalize()


# ------------------------------------------------------------------ ablation

def _format_table(col_names, rows):
    widths = [max(len(str(c)), max((len(str(r[i])) for r in rows), default=0))
              for i, c in enumerate(col_names)]
    def fmt(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    lines = [fmt(col_names), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)


def ablation_sweep(axis, samples, model_config, train_config, folds=5,
                   grid=None, log=None):
    """Run a grid of k-fold trainings and emit a machine-readable table.

    axis="fusion": strategies x input modality sets (accuracy table).
    axis="views":  view counts with ACC and per-instance time columns.
    axis="blocks": (pre, mid) residual block count pairs.
    Returns {"axis", "columns", "rows", "reports", "text"}.
    """
    from dataclasses import replace

    reports = []
    if axis == "fusion":
        strategies = grid or list(fusion_mod.STRATEGIES)
        input_sets = [("rgb",), ("rgb", "depth")]
        rows = []
        for mods in input_sets:
            row = ["RGB" if mods == ("rgb",) else "RGBD"]
            for strat in strategies:
                cfg = replace(model_config, fusion=strat, modalities=mods)
                rep = train(samples, cfg, train_config, folds=folds, log=log,
                            label=f"{row[0]}/{strat}")
                reports.append(rep)
                row.append(f"{rep.mean_accuracy:.1f}")
            rows.append(row)
        columns = ["Inputs"] + [s.upper() for s in strategies]
    elif axis == "views":
        max_views = min(len(s.views) for s in samples)
        view_counts = grid or list(range(1, min(max_views, 4) + 1))
        rows = []
        for l in view_counts:
            trimmed = [type(s)(sample_id=s.sample_id, label=s.label,
                               views=s.views[:l]) for s in samples]
            if any(len(s.views) < l for s in samples):
                raise ValueError(f"dataset has fewer than {l} views per sample")
            rep = train(trimmed, model_config, train_config, folds=folds,
                        log=log, label=f"views={l}")
            reports.append(rep)
            rows.append([str(l), f"{rep.mean_accuracy:.1f}",
                         f"{rep.per_instance_ms:.2f}"])
        columns = ["Views", "ACC (%)", "Time (ms)"]
    elif axis == "blocks":
        pairs = grid or [(0, 0), (2, 7)]
        rows = []
        for m, s in pairs:
            cfg = replace(model_config, pre_blocks=m, mid_blocks=s)
            rep = train(samples, cfg, train_config, folds=folds, log=log,
                        label=f"M={m},S={s}")
            reports.append(rep)
            rows.append([str(m), str(s), f"{rep.mean_accuracy:.1f}"])
        columns = ["Pre", "Mid", "ACC (%)"]
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")

    return {
        "axis": axis,
        "columns": columns,
        "rows": rows,
        "reports": [asdict(r) for r in reports],
        "text": _format_table(columns, rows),
    }
