"""Overlap, lesion-, sector- and patient-level detection metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .postproc import connected_components

LESION, SECTOR, PATIENT = "lesion", "sector", "patient"


def _same_grid(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")


def dsc(pred, gt) -> Optional[float]:
    """2|P & G| / (|P| + |G|); None when both masks are empty."""
    p, g = np.asarray(pred) > 0, np.asarray(gt) > 0
    _same_grid(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return None
    return 2.0 * int((p & g).sum()) / denom


# ---------------------------------------------------------------------------
# lesions


@dataclass
class Lesion:
    id: int
    voxels: np.ndarray  # flat indices
    size: int


@dataclass
class LesionSet:
    lesions: List[Lesion]
    shape: Tuple[int, ...]
    source: str  # "ground-truth" or "prediction"

    def __len__(self):
        return len(self.lesions)


def lesions_from_mask(mask, source: str, connectivity: int = 26) -> LesionSet:
    m = (np.asarray(mask) > 0).astype(np.uint8)
    cc = connected_components(m, connectivity)
    flat = cc.labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, cc.n + 2))
    lesions = [Lesion(k + 1, order[bounds[k] : bounds[k + 1]], int(cc.counts[k])) for k in range(cc.n)]
    return LesionSet(lesions, m.shape, source)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    level: str = LESION

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn, self.level)


@dataclass
class LesionMatch:
    counts: ConfusionCounts
    gt_detected: Dict[int, bool]
    gt_matched_by: Dict[int, List[int]]  # gt lesion id -> detecting prediction ids
    pred_true: Dict[int, bool]


def overlap_fraction(pred: Lesion, gt: Lesion, mode: str = "gt") -> float:
    inter = np.intersect1d(pred.voxels, gt.voxels, assume_unique=True).size
    if mode == "gt":
        return inter / gt.size
    if mode == "iou":
        return inter / (pred.size + gt.size - inter)
    raise ValueError(f"unknown overlap mode {mode!r}")


def match_lesions(
    pred_lesions: LesionSet,
    gt_lesions: LesionSet,
    overlap_threshold: float = 0.20,
    mode: str = "gt",
) -> LesionMatch:
    """A ground-truth lesion is detected when some predicted lesion overlaps it
    by strictly more than ``overlap_threshold`` (fraction of the GT lesion, or
    IoU in ``iou`` mode). Predictions detecting no GT lesion are false positives.
    """
    if pred_lesions.shape != gt_lesions.shape:
        raise ValueError(f"grid mismatch: {pred_lesions.shape} vs {gt_lesions.shape}")
    gt_detected = {g.id: False for g in gt_lesions.lesions}
    matched: Dict[int, List[int]] = {g.id: [] for g in gt_lesions.lesions}
    pred_true = {p.id: False for p in pred_lesions.lesions}
    for p in pred_lesions.lesions:
        for g in gt_lesions.lesions:
            if overlap_fraction(p, g, mode) > overlap_threshold:
                gt_detected[g.id] = True
                matched[g.id].append(p.id)
                pred_true[p.id] = True
    tp = sum(gt_detected.values())
    counts = ConfusionCounts(
        tp=tp, fn=len(gt_detected) - tp, fp=sum(not v for v in pred_true.values()), tn=0, level=LESION
    )
    return LesionMatch(counts, gt_detected, matched, pred_true)


# ---------------------------------------------------------------------------
# sectors


@dataclass
class SectorMap:
    regions: np.ndarray  # 0 outside the prostate, 1..sectors*thirds inside
    sectors: int
    thirds: int
    counts: np.ndarray  # counts[r - 1] voxels in region r

    @property
    def n_regions(self) -> int:
        return self.sectors * self.thirds


def sector_partition(
    prostate_mask,
    sectors: int = 13,
    thirds: int = 3,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    axis: int = 2,
) -> SectorMap:
    """Split the gland into ``thirds`` slabs of near-equal voxel count along the
    probe axis, then into ``sectors`` equal angular bins around each slab's
    centroid in the perpendicular plane."""
    m = np.moveaxis(np.asarray(prostate_mask) > 0, axis, -1)
    if not m.any():
        raise ValueError("empty prostate mask")
    sp = list(spacing)
    sp_plane = [s for i, s in enumerate(sp) if i != axis]
    slab_counts = m.sum(axis=(0, 1))
    total = slab_counts.sum()
    before = np.cumsum(slab_counts) - slab_counts
    mid = (before + 0.5 * slab_counts) / total
    third_of_slab = np.minimum((mid * thirds).astype(int), thirds - 1)
    regions = np.zeros(m.shape, dtype=np.int32)
    ii, jj, kk = np.nonzero(m)
    t = third_of_slab[kk]
    for th in range(thirds):
        sel = t == th
        if not sel.any():
            continue
        x = ii[sel] * sp_plane[0]
        y = jj[sel] * sp_plane[1]
        ang = np.arctan2(y - y.mean(), x - x.mean())
        b = np.floor((ang + np.pi) / (2 * np.pi) * sectors).astype(int) % sectors
        regions[ii[sel], jj[sel], kk[sel]] = th * sectors + b + 1
    regions = np.moveaxis(regions, -1, axis)
    counts = np.bincount(regions.ravel(), minlength=sectors * thirds + 1)[1:]
    return SectorMap(regions, sectors, thirds, counts)


def sector_status(mask, regions: np.ndarray, n_regions: int, min_voxels: int = 1) -> np.ndarray:
    """Boolean per region: at least ``min_voxels`` mask voxels fall in it."""
    m = np.asarray(mask) > 0
    _same_grid(m, regions)
    hits = np.bincount(regions[m].ravel(), minlength=n_regions + 1)[1 : n_regions + 1]
    return hits >= min_voxels


def sector_confusion(pred_mask, gt_mask, sector_map: SectorMap, min_voxels: int = 1) -> ConfusionCounts:
    n = sector_map.n_regions
    p = sector_status(pred_mask, sector_map.regions, n, min_voxels)
    g = sector_status(gt_mask, sector_map.regions, n, min_voxels)
    return ConfusionCounts(
        tp=int((p & g).sum()), fp=int((p & ~g).sum()), fn=int((~p & g).sum()), tn=int((~p & ~g).sum()), level=SECTOR
    )


def combined_lesion_counts(lesion: ConfusionCounts, sector: ConfusionCounts) -> ConfusionCounts:
    """Lesion-level TP/FN with sector-level FP/TN as the negative regions."""
    return ConfusionCounts(tp=lesion.tp, fn=lesion.fn, fp=sector.fp, tn=sector.tn, level=LESION)


# ---------------------------------------------------------------------------
# patients


def patient_level(pred_mask, gt_mask) -> Tuple[bool, bool]:
    return bool(np.any(np.asarray(pred_mask) > 0)), bool(np.any(np.asarray(gt_mask) > 0))


def patient_counts(pairs: Sequence[Tuple[bool, bool]]) -> ConfusionCounts:
    c = ConfusionCounts(level=PATIENT)
    for pred, gt in pairs:
        if pred and gt:
            c.tp += 1
        elif pred:
            c.fp += 1
        elif gt:
            c.fn += 1
        else:
            c.tn += 1
    return c


# ---------------------------------------------------------------------------
# reports


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]
    f1: Optional[float]
    dsc: Optional[float] = None

    def as_row(self) -> dict:
        c = self.counts
        return {
            "level": c.level,
            "tp": c.tp,
            "fp": c.fp,
            "fn": c.fn,
            "tn": c.tn,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "ppv": self.ppv,
            "npv": self.npv,
            "f1": self.f1,
            "dsc": self.dsc,
        }


def metrics(counts: ConfusionCounts, dsc_value: Optional[float] = None) -> MetricsReport:
    c = counts
    sens = _ratio(c.tp, c.tp + c.fn)
    ppv = _ratio(c.tp, c.tp + c.fp)
    if sens is None or ppv is None or sens + ppv == 0:
        f1 = None
    else:
        # same value as the harmonic mean, but one correctly rounded division
        f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return MetricsReport(
        counts=c,
        sensitivity=sens,
        specificity=_ratio(c.tn, c.tn + c.fp),
        accuracy=_ratio(c.tp + c.tn, c.total),
        ppv=ppv,
        npv=_ratio(c.tn, c.tn + c.fn),
        f1=f1,
        dsc=dsc_value,
    )


@dataclass
class CaseResult:
    case: str
    dsc: Optional[float]
    lesion: ConfusionCounts
    sector: ConfusionCounts
    combined: ConfusionCounts
    patient: Tuple[bool, bool]


def evaluate_case(
    case: str,
    pred_mask,
    gt_mask,
    prostate_mask=None,
    sector_map: Optional[SectorMap] = None,
    sectors: int = 13,
    thirds: int = 3,
    overlap_threshold: float = 0.20,
    overlap_mode: str = "gt",
    sector_min_voxels: int = 1,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> CaseResult:
    pred = np.asarray(pred_mask) > 0
    gt = np.asarray(gt_mask) > 0
    _same_grid(pred, gt)
    if sector_map is None:
        if prostate_mask is None:
            raise ValueError("need a prostate mask or a sector map")
        sector_map = sector_partition(prostate_mask, sectors, thirds, spacing)
    lm = match_lesions(lesions_from_mask(pred, "prediction"), lesions_from_mask(gt, "ground-truth"), overlap_threshold, overlap_mode)
    sc = sector_confusion(pred, gt, sector_map, sector_min_voxels)
    return CaseResult(case, dsc(pred, gt), lm.counts, sc, combined_lesion_counts(lm.counts, sc), patient_level(pred, gt))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cohort_report(results: Sequence[CaseResult]) -> dict:
    """Per-case rows plus pooled and per-case-mean cohort summaries."""
    rows = []
    for r in results:
        for name, counts in (("lesion", r.combined), ("lesion_only", r.lesion), ("sector", r.sector)):
            row = metrics(counts, r.dsc).as_row()
            row.update(case=r.case, level=name)
            rows.append(row)
    summary = {}
    if results:
        pooled = {
            "lesion": sum((r.combined for r in results[1:]), results[0].combined),
            "lesion_only": sum((r.lesion for r in results[1:]), results[0].lesion),
            "sector": sum((r.sector for r in results[1:]), results[0].sector),
        }
        dscs = [r.dsc for r in results if r.dsc is not None]
        mean_dsc = float(np.mean(dscs)) if dscs else None
        for name, counts in pooled.items():
            row = metrics(counts, mean_dsc).as_row()
            row.update(case="pooled", level=name)
            summary[f"pooled_{name}"] = row
        for name in ("lesion", "sector"):
            per = [metrics(r.combined if name == "lesion" else r.sector).as_row() for r in results]
            mean_row = {}
            for key in ("sensitivity", "specificity", "accuracy", "ppv", "npv", "f1"):
                vals = [p[key] for p in per if p[key] is not None]
                mean_row[key] = float(np.mean(vals)) if vals else None
            mean_row.update(case="per_case_mean", level=name, dsc=mean_dsc)
            summary[f"mean_{name}"] = mean_row
        prow = metrics(patient_counts([r.patient for r in results])).as_row()
        prow.update(case="cohort", level="patient")
        summary["patient"] = prow
    return {"cases": rows, "summary": summary}


CSV_FIELDS = ["case", "level", "tp", "fp", "fn", "tn", "sensitivity", "specificity", "accuracy", "ppv", "npv", "f1", "dsc"]


def write_report(report: dict, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in list(report["cases"]) + list(report["summary"].values()):
            w.writerow([_fmt(row.get(k)) for k in CSV_FIELDS])
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
