"""Binary classification metrics and evaluation passes over a split.

The positive class is reduced ejection fraction: EF <= 50% (the boundary
value itself counts as reduced). Inference never masks: scoring runs the
full token sequence deterministically, so evaluating twice yields the
identical report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, load_params_into_model
from .config import Config
from .datasets import ClipStore
from .errors import LengthMismatch, OutOfRange, SingleClassOnly
from .model import TemporalMAE, build_model_from_config
from .utils import atomic_write_text, derive_seed

EF_THRESHOLD_PERCENT = 50.0


def label_from_ef(ef_percent: float) -> bool:
    """True for the positive (reduced-EF) class: EF <= 50%, inclusive."""
    if not (0.0 <= ef_percent <= 100.0):
        raise OutOfRange(f"EF {ef_percent} outside [0, 100]")
    return ef_percent <= EF_THRESHOLD_PERCENT


@dataclass(frozen=True)
class ConfusionMetrics:
    f1: float
    recall: float
    precision: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    flags: frozenset[str] = frozenset()


def confusion_metrics(
    predictions: Sequence[bool], labels: Sequence[bool]
) -> ConfusionMetrics:
    """Standard confusion-matrix metrics; empty denominators give 0 plus a flag."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise LengthMismatch("need at least one example")
    tp = fp = fn = tn = 0
    for p, y in zip(predictions, labels):
        if p and y:
            tp += 1
        elif p:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    flags = set()
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.add("no_positive_predictions")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.add("no_positive_labels")
    if precision + recall:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.add("f1_undefined")
    accuracy = (tp + tn) / len(labels)
    return ConfusionMetrics(
        f1=f1, recall=recall, precision=precision, accuracy=accuracy,
        tp=tp, fp=fp, fn=fn, tn=tn, flags=frozenset(flags),
    )


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) with ties counted 0.5.

    Computed from tie-averaged ranks, which equals the pairwise definition
    exactly.
    """
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassOnly(f"need both classes, got {n_pos} pos / {n_neg} neg")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    rank_sum_pos = float(ranks[y].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class MetricsReport:
    f1: float
    recall: float
    precision: float
    accuracy: float
    auroc: float
    n_pos: int
    n_neg: int
    threshold: float
    flags: frozenset[str] = frozenset()
    metadata: dict[str, Any] = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [
            f"f1,{self.f1!r}",
            f"recall,{self.recall!r}",
            f"precision,{self.precision!r}",
            f"accuracy,{self.accuracy!r}",
            f"auroc,{self.auroc!r}",
            f"n_pos,{self.n_pos}",
            f"n_neg,{self.n_neg}",
            f"threshold,{self.threshold!r}",
        ]

    def to_csv(self) -> str:
        meta = [f"# {k} = {v}" for k, v in sorted(self.metadata.items())]
        flagged = [f"# flag = {name}" for name in sorted(self.flags)]
        return "\n".join(meta + flagged + ["metric,value"] + self.lines()) + "\n"

    def pretty(self) -> str:
        rows = [
            ("F1", self.f1), ("Recall", self.recall), ("Precision", self.precision),
            ("Accuracy", self.accuracy), ("AUROC", self.auroc),
        ]
        width = max(len(name) for name, _ in rows)
        out = [f"{name:<{width}}  {value:.4f}" for name, value in rows]
        out.append(f"{'n':<{width}}  {self.n_pos} pos / {self.n_neg} neg @ thr {self.threshold}")
        for name in sorted(self.flags):
            out.append(f"flag: {name}")
        return "\n".join(out)


def score_split(
    model: TemporalMAE,
    store: ClipStore,
    split: str,
    oracle: bool,
    T: int,
    window_s: float,
    H: int,
    W: int,
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic unmasked scoring pass; returns (probabilities, labels)."""
    indices = store.split(split)
    if not indices:
        raise SingleClassOnly(f"split {split!r} is empty")
    probs = []
    labels = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(indices), batch_size):
            batch = indices[i : i + batch_size]
            frames = np.stack(
                [
                    store.sample(
                        idx,
                        store.start_frame(idx, oracle, T, window_s),
                        T,
                        window_s,
                        H,
                        W,
                    ).frames
                    for idx in batch
                ]
            )
            logits = model.score_clips(torch.from_numpy(frames))
            probs.extend(torch.sigmoid(logits).tolist())
            labels.extend(label_from_ef(store.records[idx].ef_percent) for idx in batch)
    return np.asarray(probs, dtype=np.float64), np.asarray(labels, dtype=bool)


def evaluate_checkpoint(
    checkpoint_path: Path | str,
    store: ClipStore,
    cfg: Config,
    split: str = "test",
    oracle: Optional[bool] = None,
    threshold: Optional[float] = None,
) -> MetricsReport:
    """Score a split with a trained checkpoint and compute the metric suite."""
    from .train import adopt_checkpoint_config  # local: avoids module cycle

    ckpt = load_checkpoint(checkpoint_path)
    cfg = adopt_checkpoint_config(cfg, ckpt)
    model = build_model_from_config(cfg, init_seed=derive_seed(cfg.get("train", "seed"), "init"))
    load_params_into_model(ckpt, model)
    if oracle is None:
        oracle = cfg.get("train", "oracle")
    if threshold is None:
        threshold = cfg.get("eval", "threshold")
    d = cfg.values["data"]
    probs, labels = score_split(
        model, store, split, oracle, d["frames"], d["window_s"], d["height"], d["width"],
        batch_size=cfg.get("train", "batch_size"),
    )
    if labels.all() or not labels.any():
        raise SingleClassOnly(f"split {split!r} contains a single class")
    preds = probs >= threshold
    cm = confusion_metrics(preds.tolist(), labels.tolist())
    return MetricsReport(
        f1=cm.f1,
        recall=cm.recall,
        precision=cm.precision,
        accuracy=cm.accuracy,
        auroc=auroc(probs, labels),
        n_pos=int(labels.sum()),
        n_neg=int((~labels).sum()),
        threshold=threshold,
        flags=cm.flags,
        metadata={
            "split": split,
            "oracle": oracle,
            "checkpoint": Path(checkpoint_path).name,
            "mode": cfg.get("train", "mode"),
        },
    )


def save_report(report: MetricsReport, path: Path | str) -> None:
    atomic_write_text(path, report.to_csv())
