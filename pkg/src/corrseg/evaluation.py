"""Dice metric and the 15-subset missing-modality evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .blocks import MODALITIES
from .network import REGIONS, SegNetwork, forward, substitute_missing

# Present/missing patterns in the standard missing-modality table order
# (FLAIR, T1, T1c, T2): singles, pairs, triples, then all four.
SUBSET_ORDER = (
    (0, 0, 0, 1),
    (0, 0, 1, 0),
    (0, 1, 0, 0),
    (1, 0, 0, 0),
    (0, 0, 1, 1),
    (0, 1, 1, 0),
    (1, 1, 0, 0),
    (0, 1, 0, 1),
    (1, 0, 0, 1),
    (1, 0, 1, 0),
    (1, 1, 1, 0),
    (1, 1, 0, 1),
    (1, 0, 1, 1),
    (0, 1, 1, 1),
    (1, 1, 1, 1),
)

REPORT_HEADER = ["subset", "flair", "t1", "t1c", "t2", "dice_complete", "dice_core", "dice_enhancing"]


@dataclass(frozen=True)
class ModalitySubset:
    present: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.present) != 4 or not any(self.present):
            raise ValueError(f"a modality subset needs four flags with at least one present: {self.present}")

    @property
    def is_full(self) -> bool:
        return all(self.present)

    @property
    def label(self) -> str:
        return "+".join(m for m, p in zip(MODALITIES, self.present) if p)


def enumerate_subsets() -> list[ModalitySubset]:
    return [ModalitySubset(tuple(bool(v) for v in row)) for row in SUBSET_ORDER]


def dice_score(pred_mask, true_mask) -> float:
    """``2|P & T| / (|P| + |T|)``; 1.0 when both masks are empty."""
    p = pred_mask.data if isinstance(pred_mask, Tensor) else np.asarray(pred_mask)
    t = true_mask.data if isinstance(true_mask, Tensor) else np.asarray(true_mask)
    if p.shape != t.shape:
        raise ValueError(f"dice: mask shapes {p.shape} and {t.shape} differ")
    for name, m in (("prediction", p), ("target", t)):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError(f"dice: {name} mask is not binary")
    p = p.astype(bool)
    t = t.astype(bool)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


@dataclass
class ReportRow:
    subset: ModalitySubset
    dice_complete: float
    dice_core: float
    dice_enhancing: float

    @property
    def dice(self) -> tuple[float, float, float]:
        return (self.dice_complete, self.dice_core, self.dice_enhancing)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, present: Sequence[bool]) -> ReportRow:
        key = tuple(bool(v) for v in present)
        for r in self.rows:
            if r.subset.present == key:
                return r
        raise KeyError(f"no row for subset {key}")

    @property
    def full_row(self) -> ReportRow:
        return self.row((True,) * 4)

    def mean_dice(self) -> float:
        """Mean over all rows and regions."""
        return float(np.mean([r.dice for r in self.rows]))


def predict_masks(net: SegNetwork, volumes, mask, threshold: float = 0.5) -> np.ndarray:
    vols = substitute_missing(volumes, mask)
    out = forward(net, vols)
    return out.probs.data > threshold


def evaluate(
    net: SegNetwork,
    test_set: Sequence,
    threshold: float = 0.5,
    subsets: Sequence[ModalitySubset] | None = None,
    save_masks: dict | None = None,
) -> EvalReport:
    """Per-region dice for every modality subset, averaged over test samples.

    ``save_masks``, when a dict, receives ``(subset_label, sample_pos) -> bool[3,D,H,W]``.
    """
    if not test_set:
        raise ValueError("evaluation test set is empty")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    subsets = list(subsets) if subsets is not None else enumerate_subsets()
    report = EvalReport()
    for subset in subsets:
        scores = np.zeros((len(test_set), len(REGIONS)))
        for pos, sample in enumerate(test_set):
            pred = predict_masks(net, sample.volumes, subset.present, threshold)
            if save_masks is not None:
                save_masks[(subset.label, pos)] = pred
            truth = sample.labels.data
            for r in range(len(REGIONS)):
                scores[pos, r] = dice_score(pred[r], truth[r])
        mean = scores.mean(axis=0)
        report.rows.append(ReportRow(subset, *map(float, mean)))
    return report


def format_report(report: EvalReport) -> str:
    if len(report.rows) != 15:
        raise ValueError(f"a report needs 15 subset rows, got {len(report.rows)}")
    buf = io.StringIO()
    buf.write("# dice is the per-sample mean; an empty prediction of an empty region scores 1.0\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in report.rows:
        flags = [int(p) for p in r.subset.present]
        w.writerow([r.subset.label, *flags, *(f"{d:.4f}" for d in r.dice)])
    return buf.getvalue()


def write_report(report: EvalReport, path) -> None:
    text = format_report(report)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def read_report(path) -> EvalReport:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != REPORT_HEADER:
        raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
    report = EvalReport()
    for rec in reader:
        present = tuple(bool(int(rec[m])) for m in MODALITIES)
        report.rows.append(
            ReportRow(
                ModalitySubset(present),
                float(rec["dice_complete"]),
                float(rec["dice_core"]),
                float(rec["dice_enhancing"]),
            )
        )
    return report
