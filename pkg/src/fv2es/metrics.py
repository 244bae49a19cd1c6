"""Per-class binary metrics and six-class macro averages."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, DegenerateClass, LengthMismatch


@dataclass(frozen=True)
class BinaryCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def total(self) -> int:
        return self.positives + self.negatives

    @classmethod
    def from_labels(cls, pred, truth) -> "BinaryCounts":
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        return cls(int(np.sum(pred & truth)), int(np.sum(~pred & ~truth)),
                   int(np.sum(pred & ~truth)), int(np.sum(~pred & truth)))


def weighted_accuracy(c: BinaryCounts) -> float:
    """``(TP·N/P + TN) / 2N``: positives and negatives weigh equally."""
    p, n = c.positives, c.negatives
    if p == 0 or n == 0:
        raise DegenerateClass(f"weighted accuracy undefined with P={p}, N={n}")
    return (c.tp * n / p + c.tn) / (2 * n)


def f1(c: BinaryCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def accuracy(c: BinaryCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


@dataclass
class EvalReport:
    classes: list[str]
    counts: list[BinaryCounts]
    weighted_acc: list[float | None]
    f1: list[float]
    acc: list[float]
    degenerate: list[bool] = field(default_factory=list)

    @property
    def macro_weighted_acc(self) -> float | None:
        vals = [v for v in self.weighted_acc if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def macro_f1(self) -> float:
        return float(np.mean([v for v, d in zip(self.f1, self.degenerate) if not d] or [0.0]))

    @property
    def macro_acc(self) -> float:
        return float(np.mean([v for v, d in zip(self.acc, self.degenerate) if not d] or [0.0]))

    def confusion(self, k: int) -> np.ndarray:
        """2×2 matrix, rows = truth (neg, pos), columns = prediction (neg, pos)."""
        c = self.counts[k]
        return np.array([[c.tn, c.fp], [c.fn, c.tp]])

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "per_class": [
                {"class": name, "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn,
                 "weighted_acc": wa, "f1": f, "acc": a, "degenerate": d,
                 "confusion": self.confusion(i).tolist()}
                for i, (name, c, wa, f, a, d) in enumerate(zip(
                    self.classes, self.counts, self.weighted_acc, self.f1, self.acc, self.degenerate))
            ],
            "macro": {"weighted_acc": self.macro_weighted_acc, "f1": self.macro_f1, "acc": self.macro_acc},
            "excluded_from_macro": [n for n, d in zip(self.classes, self.degenerate) if d],
        }

    def table(self) -> str:
        lines = [f"{'class':<12} {'W_Acc':>7} {'F1':>7} {'Acc':>7}   TP   TN   FP   FN"]
        for name, c, wa, f, a, d in zip(self.classes, self.counts, self.weighted_acc,
                                        self.f1, self.acc, self.degenerate):
            was = "   n/a " if wa is None else f"{wa:7.4f}"
            flag = "  (degenerate, excluded)" if d else ""
            lines.append(f"{name:<12} {was} {f:7.4f} {a:7.4f} {c.tp:4d} {c.tn:4d} {c.fp:4d} {c.fn:4d}{flag}")
        mw = self.macro_weighted_acc
        lines.append(f"{'macro':<12} {'   n/a ' if mw is None else f'{mw:7.4f}'} "
                     f"{self.macro_f1:7.4f} {self.macro_acc:7.4f}")
        return "\n".join(lines)


def evaluate(preds, truth, classes: list[str] | None = None) -> EvalReport:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise LengthMismatch(f"predictions {preds.shape} vs labels {truth.shape}")
    if preds.ndim != 2 or preds.shape[0] == 0:
        raise LengthMismatch(f"expected samples×classes arrays, got {preds.shape}")
    n_cls = preds.shape[1]
    classes = list(classes) if classes else [f"class{i}" for i in range(n_cls)]
    counts, wacc, f1s, accs, degen = [], [], [], [], []
    for k in range(n_cls):
        c = BinaryCounts.from_labels(preds[:, k], truth[:, k])
        counts.append(c)
        try:
            wacc.append(weighted_accuracy(c))
            degen.append(False)
        except DegenerateClass:
            wacc.append(None)
            degen.append(True)
        f1s.append(f1(c))
        accs.append(accuracy(c))
    return EvalReport(classes, counts, wacc, f1s, accs, degen)


def read_label_file(path, key: str = "labels") -> dict[int, list[int]]:
    """``[{"segment_index": i, "labels": [6 ints]}, ...]``; records without a
    ``segment_index`` (video aggregates) are skipped."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        out = {}
        for rec in data:
            if "segment_index" not in rec:
                continue
            out[int(rec["segment_index"])] = [int(v) for v in rec[key]]
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"{path}: malformed label file ({e})") from None
    return out
