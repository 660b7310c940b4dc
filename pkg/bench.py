"""
Region-based geometric evaluation.

For each facial region the ground truth is rigidly aligned onto the prediction (Kabsch, no scale)
using an alignment mask (mouth and cheek share their union), then per-vertex distances are taken
over the region. Frames aggregate into a RegionReport per (region, view); reports can be compared
with a two-sided Wilcoxon signed-rank test and written as CSV / JSON.
"""

import csv
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import scipy.stats

from geometry_core import REGION_NAMES, Mesh, load_mesh, load_topology

log = logging.getLogger(__name__)

ALIGNMENT_GROUPS: dict[str, tuple[str, ...]] = {
    'cheek': ('cheek', 'mouth'),
    'forehead': ('forehead',),
    'mouth': ('cheek', 'mouth'),
    'nose': ('nose',),
}
SIGNIFICANCE_LEVEL: float = 0.001
EXACT_LIMIT: int = 12
EXACT_HARD_LIMIT: int = 20
REPORT_COLUMNS: tuple[str, ...] = ('region', 'view', 'mean', 'std', 'n', 'significant')
AGGREGATION_POLICY: str = 'per-frame means averaged across frames; std over pooled per-vertex errors'


class BenchError(Exception):
    """
    Signals invalid benchmark input; `kind` is a stable machine-readable label.
    """

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind: str = kind


## -- alignment -------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def kabsch_align(source: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None) -> RigidTransform:
    """
    Least-squares rotation + translation mapping `source` onto `target`, reflections excluded.
    """
    src: np.ndarray = np.asarray(source, dtype=np.float64)
    tgt: np.ndarray = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise BenchError('shape_mismatch', f'point sets must both be N x 3, got {src.shape} and {tgt.shape}')
    if src.shape[0] < 3:
        raise BenchError('too_few_points', f'need at least 3 point pairs, got {src.shape[0]}')
    w: np.ndarray = np.ones(src.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (src.shape[0],) or np.any(w < 0) or w.sum() <= 0:
        raise BenchError('invalid_weights', 'weights must be non-negative, one per point, with a positive sum')
    w = w / w.sum()
    src_center: np.ndarray = w @ src
    tgt_center: np.ndarray = w @ tgt
    covariance: np.ndarray = (src - src_center).T @ ((tgt - tgt_center) * w[:, None])
    u, singular, vt = np.linalg.svd(covariance)
    if singular[0] <= 0.0 or singular[1] <= 1e-10 * singular[0]:
        raise BenchError('degenerate_alignment', 'point configuration is collinear or degenerate')
    sign: float = 1.0 if np.linalg.det(vt.T @ u.T) > 0 else -1.0
    rotation: np.ndarray = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return RigidTransform(rotation=rotation, translation=tgt_center - rotation @ src_center)


def _mask(masks: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in masks or len(masks[name]) == 0:
        raise BenchError('empty_mask', f'region mask ``{name}`` is missing or empty')
    return np.asarray(masks[name], dtype=np.int64)


def region_error(gt: Mesh, pred: Mesh, region: str, masks: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """
    Aligns the ground truth onto the prediction over the region's alignment mask and returns the
    per-vertex distances over the region itself.
    """
    if gt.topology_id != pred.topology_id:
        raise BenchError('topology_mismatch', 'ground truth and prediction use different topologies')
    if region not in ALIGNMENT_GROUPS:
        raise BenchError('unknown_region', f'unknown region ``{region}``')
    region_masks: dict[str, np.ndarray] = masks if masks is not None else gt.topology.region_masks
    evaluated: np.ndarray = _mask(region_masks, region)
    aligned_on: np.ndarray = np.concatenate([_mask(region_masks, name) for name in ALIGNMENT_GROUPS[region]])
    transform: RigidTransform = kabsch_align(gt.vertices[aligned_on], pred.vertices[aligned_on])
    moved: np.ndarray = transform.apply(gt.vertices[evaluated])
    return np.linalg.norm(moved - pred.vertices[evaluated], axis=-1)


## -- reports ---------------------------------------------------------


@dataclass(frozen=True)
class RegionStats:
    region: str
    view: str
    mean: float
    std: float
    n: int
    frame_means: tuple[float, ...] = ()
    p_value: float | None = None
    significant: bool = False


@dataclass(frozen=True)
class RegionReport:
    """
    Per (region, view) statistics; the overall average is the unweighted mean of the four region means.
    """

    entries: tuple[RegionStats, ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    def views(self) -> list[str]:
        return sorted({entry.view for entry in self.entries})

    def entry(self, region: str, view: str) -> RegionStats:
        for candidate in self.entries:
            if candidate.region == region and candidate.view == view:
                return candidate
        raise BenchError('missing_entry', f'no entry for region ``{region}`` in view ``{view}``')

    def region_mean(self, region: str, view: str | None = None) -> float:
        """
        Mean of per-frame means for a region, within one view or pooled across views.
        """
        frames: list[float] = []
        for entry in self.entries:
            if entry.region == region and (view is None or entry.view == view):
                frames.extend(entry.frame_means if entry.frame_means else [entry.mean] * entry.n)
        if not frames:
            raise BenchError('missing_entry', f'no frames for region ``{region}``')
        return float(np.mean(frames))

    def overall(self, view: str | None = None) -> float:
        return float(np.mean([self.region_mean(region, view) for region in REGION_NAMES]))

    def merge(self, other: 'RegionReport') -> 'RegionReport':
        """
        Combines reports covering different views.
        """
        keys: set[tuple[str, str]] = {(e.region, e.view) for e in self.entries}
        clashes: list[tuple[str, str]] = [(e.region, e.view) for e in other.entries if (e.region, e.view) in keys]
        if clashes:
            raise BenchError('duplicate_entry', f'both reports contain {clashes[0]}')
        merged: list[RegionStats] = sorted(self.entries + other.entries, key=lambda e: (e.view, e.region))
        return RegionReport(entries=tuple(merged), metadata={**other.metadata, **self.metadata})


def _frame_errors(gt: Mesh, pred: Mesh, masks: dict[str, np.ndarray] | None) -> dict[str, np.ndarray]:
    return {region: region_error(gt, pred, region, masks) for region in REGION_NAMES}


def evaluate_run(
    gt_sequence: Sequence[Mesh],
    pred_sequence: Sequence[Mesh],
    view: str,
    masks: dict[str, np.ndarray] | None = None,
    threads: int = 1,
) -> RegionReport:
    """
    Evaluates frame-aligned sequences captured from one view.
    """
    if len(gt_sequence) != len(pred_sequence):
        raise BenchError('length_mismatch', f'{len(gt_sequence)} ground-truth frames vs {len(pred_sequence)} predictions')
    if not gt_sequence:
        raise BenchError('empty_run', 'no frames to evaluate')
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        per_frame: list[dict[str, np.ndarray]] = list(
            pool.map(lambda pair: _frame_errors(pair[0], pair[1], masks), zip(gt_sequence, pred_sequence, strict=True))
        )
    entries: list[RegionStats] = []
    for region in REGION_NAMES:
        frame_means: tuple[float, ...] = tuple(float(np.mean(errors[region])) for errors in per_frame)
        pooled: np.ndarray = np.concatenate([errors[region] for errors in per_frame])
        entries.append(
            RegionStats(
                region=region,
                view=view,
                mean=float(np.mean(frame_means)),
                std=float(np.std(pooled)),
                n=len(frame_means),
                frame_means=frame_means,
            )
        )
    metadata: dict[str, Any] = {'aggregation': AGGREGATION_POLICY, 'significance_level': SIGNIFICANCE_LEVEL}
    return RegionReport(entries=tuple(entries), metadata=metadata)


def evaluate_frames(
    frames: Sequence[tuple[Mesh, Mesh, str]], masks: dict[str, np.ndarray] | None = None, threads: int = 1
) -> RegionReport:
    """
    Groups (gt, pred, view) frames by view, keeping frame order within each view, and merges the reports.
    """
    by_view: dict[str, list[tuple[Mesh, Mesh]]] = {}
    for gt, pred, view in frames:
        by_view.setdefault(view, []).append((gt, pred))
    report: RegionReport | None = None
    for view in sorted(by_view):
        pairs: list[tuple[Mesh, Mesh]] = by_view[view]
        partial: RegionReport = evaluate_run([g for g, _ in pairs], [p for _, p in pairs], view, masks, threads)
        report = partial if report is None else report.merge(partial)
    if report is None:
        raise BenchError('empty_run', 'no frames to evaluate')
    return report


## -- significance ----------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


def wilcoxon_signed_rank(
    errors_a: Sequence[float], errors_b: Sequence[float], method: str = 'auto', continuity: bool = True
) -> WilcoxonResult:
    """
    Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and ties get midranks. For n <= 12 (or `method='exact'`) the p-value
    enumerates every sign assignment; otherwise it uses the tie-corrected normal approximation.
    The statistic is min(W+, W-).
    """
    a: np.ndarray = np.asarray(errors_a, dtype=np.float64)
    b: np.ndarray = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise BenchError('length_mismatch', f'paired samples differ in shape: {a.shape} vs {b.shape}')
    if a.size < 5:
        raise BenchError('too_few_pairs', f'need at least 5 pairs, got {a.size}')
    if method not in ('auto', 'exact', 'approx'):
        raise BenchError('invalid_method', f'unknown method ``{method}``')
    differences: np.ndarray = a - b
    differences = differences[differences != 0.0]
    if differences.size == 0:
        raise BenchError('all_zero_differences', 'all paired differences are zero')
    n: int = int(differences.size)
    ranks: np.ndarray = scipy.stats.rankdata(np.abs(differences))
    w_plus: float = float(ranks[differences > 0].sum())
    total: float = float(ranks.sum())
    expected: float = total / 2.0
    use_exact: bool = method == 'exact' or (method == 'auto' and n <= EXACT_LIMIT)
    if use_exact:
        if n > EXACT_HARD_LIMIT:
            raise BenchError('too_many_pairs', f'exact enumeration is limited to n <= {EXACT_HARD_LIMIT}')
        signs: np.ndarray = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        all_w_plus: np.ndarray = signs @ ranks
        observed: float = abs(w_plus - expected)
        p_value: float = float(np.mean(np.abs(all_w_plus - expected) >= observed - 1e-9))
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        variance: float = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        deviation: float = abs(w_plus - expected) - (0.5 if continuity else 0.0)
        z: float = max(deviation, 0.0) / np.sqrt(variance) if variance > 0 else 0.0
        p_value = float(min(1.0, 2.0 * scipy.stats.norm.sf(z)))
    used: str = 'exact' if use_exact else 'approx'
    return WilcoxonResult(statistic=min(w_plus, total - w_plus), p_value=p_value, n=n, method=used)


def compare_reports(report: RegionReport, baseline: RegionReport, level: float = SIGNIFICANCE_LEVEL) -> RegionReport:
    """
    Attaches per-(region, view) Wilcoxon p-values against a baseline and flags p < `level`.

    Entries whose frame vectors cannot be tested keep `p_value=None` and are not significant.
    """
    updated: list[RegionStats] = []
    for entry in report.entries:
        other: RegionStats = baseline.entry(entry.region, entry.view)
        p_value: float | None = None
        try:
            p_value = wilcoxon_signed_rank(entry.frame_means, other.frame_means).p_value
        except BenchError as exc:
            log.debug(f'no test for {entry.region}/{entry.view}; ``{exc}``')
        updated.append(replace(entry, p_value=p_value, significant=p_value is not None and p_value < level))
    metadata: dict[str, Any] = {**report.metadata, 'significance_level': level, 'compared_against_baseline': True}
    return RegionReport(entries=tuple(updated), metadata=metadata)


## -- emission --------------------------------------------------------


def report_to_json_dict(report: RegionReport) -> dict[str, Any]:
    views: list[str] = report.views()
    overall: dict[str, float] = {}
    for view in views:
        try:
            overall[view] = report.overall(view)
        except BenchError:
            continue
    return {
        'columns': list(REPORT_COLUMNS),
        'entries': [
            {
                'region': e.region,
                'view': e.view,
                'mean': e.mean,
                'std': e.std,
                'n': e.n,
                'significant': e.significant,
                'p_value': e.p_value,
                'frame_means': list(e.frame_means),
            }
            for e in report.entries
        ],
        'overall': overall,
        'metadata': report.metadata,
    }


def emit_report(report: RegionReport, csv_path: Path, json_path: Path | None = None) -> None:
    """
    Writes the CSV (fixed column order) and, optionally, the JSON rendering with per-frame vectors.
    """
    with Path(csv_path).open('w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(REPORT_COLUMNS)
        for e in report.entries:
            writer.writerow([e.region, e.view, f'{e.mean:.9g}', f'{e.std:.9g}', e.n, str(e.significant).lower()])
    if json_path is not None:
        payload: str = json.dumps(report_to_json_dict(report), indent=2, sort_keys=True)
        Path(json_path).write_text(payload + '\n', encoding='utf-8')
    log.info(f'wrote report with {len(report.entries)} entries to ``{csv_path}``')


def load_report_json(path: Path) -> RegionReport:
    data: dict[str, Any] = json.loads(Path(path).read_text(encoding='utf-8'))
    entries: tuple[RegionStats, ...] = tuple(
        RegionStats(
            region=e['region'],
            view=e['view'],
            mean=float(e['mean']),
            std=float(e['std']),
            n=int(e['n']),
            frame_means=tuple(float(x) for x in e.get('frame_means', [])),
            p_value=None if e.get('p_value') is None else float(e['p_value']),
            significant=bool(e['significant']),
        )
        for e in data['entries']
    )
    return RegionReport(entries=entries, metadata=data.get('metadata', {}))


def load_report_csv(path: Path) -> RegionReport:
    """
    Reads a report CSV; per-frame vectors are not part of the CSV and come back empty.
    """
    with Path(path).open('r', encoding='utf-8', newline='') as fh:
        rows: list[dict[str, str]] = list(csv.DictReader(fh))
    entries: tuple[RegionStats, ...] = tuple(
        RegionStats(
            region=row['region'],
            view=row['view'],
            mean=float(row['mean']),
            std=float(row['std']),
            n=int(row['n']),
            significant=row['significant'] == 'true',
        )
        for row in rows
    )
    return RegionReport(entries=entries)


## -- manifests -------------------------------------------------------


def run_manifest(manifest_path: Path, threads: int = 1) -> RegionReport:
    """
    Evaluates a run manifest `{gt_dir, pred_dir, masks_path, frames:[{gt, pred, view}]}`.

    `masks_path` names the topology JSON whose region masks are used. An optional `baseline_dir`
    holds alternative predictions with the same file names; when present the report carries
    significance flags against that baseline.
    """
    path: Path = Path(manifest_path)
    manifest: dict[str, Any] = json.loads(path.read_text(encoding='utf-8'))
    unknown: list[str] = sorted(set(manifest) - {'gt_dir', 'pred_dir', 'masks_path', 'frames', 'baseline_dir'})
    if unknown:
        raise BenchError('unknown_manifest_key', f'{path}: unknown key(s) {unknown}')
    base: Path = path.parent
    topology = load_topology(base / manifest['masks_path'])
    gt_dir: Path = base / manifest['gt_dir']
    pred_dir: Path = base / manifest['pred_dir']
    frames: list[tuple[Mesh, Mesh, str]] = [
        (load_mesh(gt_dir / f['gt'], topology), load_mesh(pred_dir / f['pred'], topology), str(f['view']))
        for f in manifest['frames']
    ]
    report: RegionReport = evaluate_frames(frames, None, threads)
    if manifest.get('baseline_dir'):
        baseline_dir: Path = base / manifest['baseline_dir']
        baseline_frames: list[tuple[Mesh, Mesh, str]] = [
            (gt, load_mesh(baseline_dir / f['pred'], topology), view)
            for (gt, _, view), f in zip(frames, manifest['frames'], strict=True)
        ]
        report = compare_reports(report, evaluate_frames(baseline_frames, None, threads))
    return report
