"""Average localization error by distance bin, accuracy, and loss comparisons.

Bin rule: a sample with ground-truth distance ``gt <= cutoff`` belongs to the
nearest bin centre (ties go to the smaller centre); samples beyond the cutoff
are counted as excluded.  The overall ALE is the unweighted mean over all
included samples.

Machine-readable report (CSV, header included)::

    method,bin_center,count,ale_m

one row per bin, then ``all`` (overall) and ``excluded`` rows.  Undefined
values (empty bins, unknown counts) are written as ``-``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np

DEFAULT_CENTERS = (3.0, 8.0, 12.5, 17.5, 22.5, 27.5, 35.0)
DEFAULT_CUTOFF = 40.0
CSV_FIELDS = ("method", "bin_center", "count", "ale_m")
UNDEFINED = "-"


@dataclass(frozen=True)
class AleBins:
    centers: tuple = DEFAULT_CENTERS
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        c = tuple(float(x) for x in self.centers)
        if not c:
            raise ValueError("need at least one bin centre")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("bin centres must be strictly increasing")
        if self.cutoff < c[-1]:
            raise ValueError("cutoff must be >= the last centre")
        object.__setattr__(self, "centers", c)

    def describe(self):
        return (f"bins: nearest of centres {', '.join(_num(c) for c in self.centers)} m "
                f"(ties to smaller), gt > {_num(self.cutoff)} m excluded; "
                "overall = mean over samples")

    def assign(self, gt) -> np.ndarray:
        """Bin index per ground-truth distance, -1 when beyond the cutoff."""
        gt = np.asarray(gt, dtype=float)
        if np.any(~(gt > 0)):
            raise ValueError("ground-truth distances must be > 0")
        centers = np.asarray(self.centers)
        dist = np.abs(gt[..., None] - centers)
        # argmin returns the first minimum, i.e. the smaller centre on ties
        idx = np.argmin(dist, axis=-1)
        return np.where(gt <= self.cutoff, idx, -1)


def _num(x):
    return f"{x:g}"


@dataclass(frozen=True)
class AleReport:
    method: str
    centers: tuple
    counts: tuple  # ints, or None entries when unknown (ingested)
    errors: tuple  # metres, NaN for empty bins
    overall: float = math.nan
    overall_count: Optional[int] = None
    excluded: Optional[int] = None
    rule: str = ""


def ale_report(predictions, bins: AleBins = AleBins(), method: str = "model") -> AleReport:
    """ALE per bin from ``(predicted, gt)`` pairs (or an (n, 2) array)."""
    arr = np.asarray(predictions, dtype=float).reshape(-1, 2)
    pred, gt = arr[:, 0], arr[:, 1]
    idx = bins.assign(gt)
    err = np.abs(pred - gt)
    counts, errors = [], []
    for b in range(len(bins.centers)):
        sel = err[idx == b]
        counts.append(int(len(sel)))
        errors.append(float(np.mean(sel)) if len(sel) else math.nan)
    inc = err[idx >= 0]
    return AleReport(
        method=method,
        centers=bins.centers,
        counts=tuple(counts),
        errors=tuple(errors),
        overall=float(np.mean(inc)) if len(inc) else math.nan,
        overall_count=int(len(inc)),
        excluded=int(np.sum(idx < 0)),
        rule=bins.describe(),
    )


def ingest_report(method: str, values: Sequence, bins: AleBins = AleBins(), overall=math.nan) -> AleReport:
    """Wrap externally published per-bin ALE values (no recomputation)."""
    values = tuple(math.nan if v is None else float(v) for v in values)
    if len(values) != len(bins.centers):
        raise ValueError(f"expected {len(bins.centers)} values, got {len(values)}")
    return AleReport(method, bins.centers, (None,) * len(values), values, overall,
                     rule="ingested values, not recomputed")


def reference_reports() -> list:
    """Published KITTI pedestrian ALE rows shipped with the package."""
    text = resources.files("pedloc").joinpath("data/kitti_ale_reference.csv").read_text(encoding="utf-8")
    return read_report_csv(io.StringIO(text))


# ---------------------------------------------------------------------------
# rendering


def _fmt_err(x):
    return UNDEFINED if x is None or not math.isfinite(x) else f"{x:.2f}"


def render_table(reports: Sequence[AleReport], show_overall: bool = True, show_counts: bool = False) -> str:
    """Plain-text table: methods as rows, bin centres as columns."""
    if not reports:
        raise ValueError("need at least one report")
    centers = reports[0].centers
    if any(r.centers != centers for r in reports):
        raise ValueError("reports use different bins")
    header = ["Method"] + [_num(c) for c in centers] + (["All"] if show_overall else [])
    rows = []
    for r in reports:
        cells = [r.method] + [_fmt_err(e) for e in r.errors]
        if show_overall:
            cells.append(_fmt_err(r.overall))
        rows.append(cells)
        if show_counts:
            counts = [UNDEFINED if c is None else str(c) for c in r.counts]
            tail = [UNDEFINED if r.overall_count is None else str(r.overall_count)] if show_overall else []
            rows.append(["  n"] + counts + tail)
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    lines = []
    for row in [header] + rows:
        first = row[0].ljust(widths[0])
        rest = [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join([first] + rest).rstrip())
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_report_csv(reports: Sequence[AleReport], stream):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        for c, n, e in zip(r.centers, r.counts, r.errors):
            w.writerow([r.method, _num(c), UNDEFINED if n is None else n, _csv_float(e)])
        w.writerow([r.method, "all", UNDEFINED if r.overall_count is None else r.overall_count,
                    _csv_float(r.overall)])
        w.writerow([r.method, "excluded", UNDEFINED if r.excluded is None else r.excluded, UNDEFINED])


def _csv_float(x):
    return UNDEFINED if x is None or not math.isfinite(x) else repr(float(x))


def report_csv(reports) -> str:
    buf = io.StringIO()
    write_report_csv(reports, buf)
    return buf.getvalue()


def read_report_csv(stream, bins: Optional[AleBins] = None) -> list:
    """Parse the machine-readable schema back into reports (method order kept)."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_FIELDS:
        raise ValueError(f"expected header {','.join(CSV_FIELDS)}, got {header}")
    rows = {}
    for line_no, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip() or row[0].startswith("#"):
            continue
        if len(row) != 4:
            raise ValueError(f"line {line_no}: expected 4 fields, got {len(row)}")
        method, center, count, ale = (c.strip() for c in row)
        try:
            cnt = None if count == UNDEFINED else int(count)
            val = math.nan if ale == UNDEFINED else float(ale)
        except ValueError:
            raise ValueError(f"line {line_no}: bad count or ale value") from None
        rows.setdefault(method, []).append((center, cnt, val, line_no))
    reports = []
    for method, entries in rows.items():
        cells = [(float(c), n, v) for c, n, v, _ in entries if c not in ("all", "excluded")]
        overall = [(n, v) for c, n, v, _ in entries if c == "all"]
        excluded = [n for c, n, v, _ in entries if c == "excluded"]
        try:
            centers = AleBins(tuple(c for c, _, _ in cells), cutoff=bins.cutoff if bins else max(c for c, _, _ in cells)).centers
        except ValueError as exc:
            raise ValueError(f"method {method!r}: {exc}") from None
        if bins is not None and centers != bins.centers:
            raise ValueError(f"method {method!r}: bin centres differ from the expected bins")
        reports.append(AleReport(
            method=method,
            centers=centers,
            counts=tuple(n for _, n, _ in cells),
            errors=tuple(v for _, _, v in cells),
            overall=overall[0][1] if overall else math.nan,
            overall_count=overall[0][0] if overall else None,
            excluded=excluded[0] if excluded else None,
            rule="ingested values, not recomputed",
        ))
    return reports


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class AccuracyReport:
    accuracy: float  # percent
    per_class_recall: dict
    total: int
    correct: int

    def render(self, name: str = "model") -> str:
        lines = [f"{name}  Accuracy (%): {self.accuracy:.1f}  ({self.correct}/{self.total})"]
        for c in sorted(self.per_class_recall):
            lines.append(f"  class {c}: recall {100.0 * self.per_class_recall[c]:.1f}%")
        return "\n".join(lines) + "\n"


def accuracy_report(predicted, gt) -> AccuracyReport:
    predicted = np.asarray(predicted)
    gt = np.asarray(gt)
    if len(predicted) != len(gt):
        raise ValueError(f"length mismatch: {len(predicted)} predictions, {len(gt)} labels")
    if len(gt) == 0:
        raise ValueError("empty input")
    hit = predicted == gt
    recall = {int(c): float(np.mean(hit[gt == c])) for c in np.unique(gt)}
    correct = int(hit.sum())
    return AccuracyReport(100.0 * correct / len(gt), recall, int(len(gt)), correct)


# ---------------------------------------------------------------------------
# loss comparison


@dataclass(frozen=True)
class LossExperiment:
    """Identical data and architecture for every loss; only the loss kind varies."""

    synth: object = None  # geometry.SynthConfig; None -> defaults
    n_samples: int = 20000
    val_fraction: float = 0.2
    n_test: int = 10000
    seed: int = 0
    net: object = None  # locnet.LocNetConfig template; None -> defaults
    bins: AleBins = field(default_factory=AleBins)
    # relative sigma of zero-mean Gaussian noise added to training and validation
    # targets (a symmetric-noise control); test targets stay clean
    target_noise: float = 0.0


def compare_losses(experiment: LossExperiment, loss_kinds: Sequence[str], spec=None,
                   return_models: bool = False):
    """Train one model per loss kind on the same seeded data; ALE report per kind.

    Returns ``{kind: AleReport}`` (and ``{kind: model}`` when requested).
    """
    from . import geometry as G
    from . import locnet as L

    synth = experiment.synth or G.SynthConfig()
    net = experiment.net or L.LocNetConfig()
    spec = spec or L.TrainSpec(seed=experiment.seed)
    k = synth.intrinsics
    x, y = G.sample_arrays(G.synth_scene(experiment.n_samples, experiment.seed, synth), k)
    # test samples come from a disjoint index range of the same seed
    xt, yt = G.sample_arrays(G.synth_scene(experiment.n_test, experiment.seed, synth,
                                           start=experiment.n_samples), k)
    order = np.random.default_rng([experiment.seed, 1]).permutation(len(y))
    if experiment.target_noise > 0:
        noise_rng = np.random.default_rng([experiment.seed, 2])
        y = y * (1.0 + experiment.target_noise * noise_rng.standard_normal(len(y)))
    n_train = int(math.floor(len(y) * (1.0 - experiment.val_fraction)))
    tr, va = order[:n_train], order[n_train:]
    reports, models = {}, {}
    for kind in loss_kinds:
        cfg = replace(net, loss_kind=kind)
        model = L.init_model(cfg, seed=experiment.seed, mean_distance=float(y[tr].mean()))
        model, _ = L.train(model, (x[tr], y[tr]), (x[va], y[va]), spec)
        pred = L.point_estimate(model, xt)
        reports[kind] = ale_report(np.column_stack([pred, yt]), experiment.bins, method=kind)
        models[kind] = model
    return (reports, models) if return_models else reports
