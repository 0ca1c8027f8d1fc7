"""Segmentation losses, confusion counts and the evaluation scores."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossConfig

EPS = 1e-7

METRIC_FIELDS = ("precision", "recall", "f1", "landslide_iou", "background_iou", "miou")


def binary_cross_entropy(p: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-element ``-[y log p + (1 - y) log(1 - p)]`` with logs clamped at ``eps``."""
    y = y.to(p.dtype)
    return -(y * torch.log(p.clamp(eps, 1.0)) + (1 - y) * torch.log((1 - p).clamp(eps, 1.0)))


def cross_entropy(score_map: torch.Tensor, label: torch.Tensor, eps: float = EPS):
    """Pixelwise binary cross-entropy of a two-class score map.

    ``score_map`` is (..., 2, H, W) logits and ``label`` (..., H, W). The
    landslide probability is the softmax of channel 1; the background
    probability is read from channel 0 directly rather than as ``1 - p``.
    Returns ``(per_pixel, mean)``.
    """
    if score_map.shape[-3] != 2:
        raise ValueError(f"score map must have 2 channels, got {tuple(score_map.shape)}")
    if score_map.shape[:-3] + score_map.shape[-2:] != label.shape:
        raise ValueError(f"label shape {tuple(label.shape)} does not match score map {tuple(score_map.shape)}")
    probs = torch.softmax(score_map, dim=-3)
    p_bg, p_fg = probs.unbind(dim=-3)
    y = label.to(score_map.dtype)
    per_pixel = -(y * torch.log(p_fg.clamp(eps, 1.0)) + (1 - y) * torch.log(p_bg.clamp(eps, 1.0)))
    return per_pixel, per_pixel.mean()


def total_loss(ce_terms, sc_terms, config: LossConfig):
    """``alpha * sum(ce_terms) + beta * sum(sc_terms)``; empty SC terms contribute 0."""
    ce = sum(ce_terms) if len(ce_terms) else 0.0
    sc = sum(sc_terms) if len(sc_terms) else 0.0
    return config.alpha * ce + config.beta * sc


@dataclass
class ConfusionCounts:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.TP + other.TP, self.TN + other.TN,
                               self.FP + other.FP, self.FN + other.FN)


def accumulate_confusion(pred, label, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    label = np.asarray(label).astype(bool)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs label {label.shape}")
    c = ConfusionCounts(
        TP=int(np.count_nonzero(pred & label)),
        TN=int(np.count_nonzero(~pred & ~label)),
        FP=int(np.count_nonzero(pred & ~label)),
        FN=int(np.count_nonzero(~pred & label)),
    )
    return c if counts is None else counts + c


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    landslide_iou: float
    background_iou: float
    miou: float
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    undefined: List[str] = field(default_factory=list)
    averaging: str = "micro"

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS}

    def to_text(self) -> str:
        lines = [f"# averaging={self.averaging} pixels={self.counts.total}"]
        lines += [f"{k} {getattr(self, k):.6f}" for k in METRIC_FIELDS]
        lines.append(f"TP {self.counts.TP}\nTN {self.counts.TN}\nFP {self.counts.FP}\nFN {self.counts.FN}")
        if self.undefined:
            lines.append("undefined " + ",".join(self.undefined))
        return "\n".join(lines) + "\n"

    def to_record(self) -> Dict[str, object]:
        rec: Dict[str, object] = dict(self.as_dict())
        rec.update(asdict(self.counts))
        rec["undefined"] = list(self.undefined)
        rec["averaging"] = self.averaging
        return rec

    def write(self, stem: Union[str, Path]) -> None:
        stem = Path(stem)
        stem.with_suffix(".txt").write_text(self.to_text())
        stem.with_suffix(".json").write_text(json.dumps(self.to_record(), indent=2))

    @classmethod
    def from_record(cls, rec: Dict[str, object]) -> "MetricReport":
        counts = ConfusionCounts(*(int(rec[k]) for k in ("TP", "TN", "FP", "FN")))
        return cls(**{k: float(rec[k]) for k in METRIC_FIELDS}, counts=counts,
                   undefined=list(rec.get("undefined", [])), averaging=str(rec.get("averaging", "micro")))


def _ratio(num: float, den: float, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> MetricReport:
    """Precision, recall, F1 and IoUs; a 0/0 becomes 0 and is listed in ``undefined``."""
    undefined: List[str] = []
    precision = _ratio(c.TP, c.TP + c.FP, "precision", undefined)
    recall = _ratio(c.TP, c.TP + c.FN, "recall", undefined)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", undefined)
    l_iou = _ratio(c.TP, c.TP + c.FP + c.FN, "landslide_iou", undefined)
    b_iou = _ratio(c.TN, c.TN + c.FN + c.FP, "background_iou", undefined)
    return MetricReport(precision, recall, f1, l_iou, b_iou, 0.5 * (l_iou + b_iou), c, undefined)


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def summarize_reports(reports: Sequence[MetricReport]) -> Dict[str, Dict[str, float]]:
    """Mean and (population) standard deviation of each score across folds."""
    out = {}
    for k in METRIC_FIELDS:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
