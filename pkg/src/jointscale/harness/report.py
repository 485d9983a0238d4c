"""Row records, CSV output, summary statistics and a small SVG plotter.

``summary.csv`` is computed from ``rows.csv`` alone, and every SVG is
computed from ``summary.csv`` alone.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


@dataclass
class ResultRow:
    experiment: str
    image: int
    mode: str  # attack / sampling mode, or benign / attack population for detect
    param: float  # epsilon, kappa, query budget, epoch, ...
    scaled_l2: float = math.nan
    success: bool = False
    success_quantized: bool = False
    queries: int = 0
    score: float = math.nan  # detection score, accuracy, loss ...
    group: str = ""  # defense or detector

    def key(self):
        return (self.experiment, self.group, self.mode, self.param, self.image)


COLUMNS = [f.name for f in fields(ResultRow)]


def _fmt(v) -> str:
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(rows: list[ResultRow], path) -> None:
    """RFC-4180 CSV sorted by grid point, then image id."""
    rows = sorted(rows, key=ResultRow.key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in COLUMNS])


def read_rows(path) -> list[ResultRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(ResultRow(
                experiment=rec["experiment"], image=int(rec["image"]), mode=rec["mode"], param=float(rec["param"]),
                scaled_l2=float(rec["scaled_l2"]), success=rec["success"] == "1",
                success_quantized=rec["success_quantized"] == "1", queries=int(rec["queries"]),
                score=float(rec["score"]), group=rec["group"]))
    return out


# ---------------------------------------------------------------------------
# Summary (long format: experiment, group, mode, param, metric, value)


HIST_BINS = 20


def _median_l2(rows: list[ResultRow]) -> float:
    vals = [r.scaled_l2 if r.success else math.inf for r in rows]
    return float(np.median(vals)) if vals else math.nan


def summarize(rows: list[ResultRow]) -> list[tuple]:
    out = []
    groups = defaultdict(list)
    for r in rows:
        groups[(r.experiment, r.group, r.mode, r.param)].append(r)
    for (exp, grp, mode, param), rs in sorted(groups.items()):
        n = len(rs)
        rate = sum(r.success for r in rs) / n
        out.append((exp, grp, mode, param, "n", float(n)))
        out.append((exp, grp, mode, param, "success_rate", rate))
        out.append((exp, grp, mode, param, "success_rate_quantized", sum(r.success_quantized for r in rs) / n))
        out.append((exp, grp, mode, param, "accuracy", 1.0 - rate))
        out.append((exp, grp, mode, param, "median_scaled_l2", _median_l2(rs)))
        scores = [r.score for r in rs if not math.isnan(r.score)]
        if scores:
            out.append((exp, grp, mode, param, "median_score", float(np.median(scores))))
        qs = [r.queries for r in rs]
        out.append((exp, grp, mode, param, "max_queries", float(max(qs))))
    # detection histograms share bin edges across populations of one detector
    det = defaultdict(list)
    for r in rows:
        if r.experiment == "detect" and not math.isnan(r.score):
            det[r.group].append(r)
    for grp, rs in sorted(det.items()):
        edges = histogram_edges([r.score for r in rs])
        for mode in sorted({r.mode for r in rs}):
            counts, _ = np.histogram([r.score for r in rs if r.mode == mode], bins=edges)
            for k, c in enumerate(counts):
                out.append(("detect-hist", grp, mode, float(edges[k]), "count", float(c)))
    return out


def histogram_edges(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, HIST_BINS + 1)


def write_summary(summary: list[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["experiment", "group", "mode", "param", "metric", "value"])
        for rec in summary:
            w.writerow([_fmt(v) for v in rec])


def read_summary(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        return [(e, g, m, float(p), k, float(v)) for e, g, m, p, k, v in rd]


# ---------------------------------------------------------------------------
# SVG

W, H, PAD = 480, 320, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _axes(title: str, xlabel: str, ylabel: str, xr, yr) -> list[str]:
    x0, x1 = xr
    y0, y1 = yr
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<polyline points="{PAD},{PAD - 20} {PAD},{H - PAD} {W - 20},{H - PAD}" fill="none" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<text x="{PAD}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{x0:.3g}</text>',
        f'<text x="{W - 20}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{x1:.3g}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{PAD - 4}" y="{PAD - 16}" text-anchor="end" font-size="10">{y1:.3g}</text>',
    ]
    return parts


def _range(vals) -> tuple[float, float]:
    vals = [v for v in vals if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    return (lo, hi) if hi > lo else (lo - 0.5, hi + 0.5)


def _map(v, r, a, b):
    return a + (v - r[0]) / (r[1] - r[0]) * (b - a)


def line_chart(series: dict[str, tuple[list, list]], title: str, xlabel: str, ylabel: str) -> str:
    xr = _range([x for xs, _ in series.values() for x in xs])
    yr = _range([y for _, ys in series.values() for y in ys])
    parts = _axes(title, xlabel, ylabel, xr, yr)
    for k, (name, (xs, ys)) in enumerate(sorted(series.items())):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{_map(x, xr, PAD, W - 20):.1f},{_map(y, yr, H - PAD, PAD - 20):.1f}"
                       for x, y in zip(xs, ys) if math.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - 130}" y="{PAD + 14 * k}" font-size="11" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def histogram_chart(edges: list[float], counts: dict[str, list[float]], title: str, xlabel: str) -> str:
    width = edges[1] - edges[0] if len(edges) > 1 else 1.0
    xr = (edges[0], edges[-1] + width)
    yr = (0.0, max([max(c) for c in counts.values()] + [1.0]))
    parts = _axes(title, xlabel, "count", xr, yr)
    for k, (name, cs) in enumerate(sorted(counts.items())):
        color = COLORS[k % len(COLORS)]
        for e, c in zip(edges, cs):
            x0, x1 = _map(e, xr, PAD, W - 20), _map(e + width, xr, PAD, W - 20)
            y = _map(c, yr, H - PAD, PAD - 20)
            parts.append(f'<rect x="{x0:.1f}" y="{y:.1f}" width="{max(x1 - x0, 0.5):.1f}" height="{H - PAD - y:.1f}" '
                         f'fill="{color}" fill-opacity="0.45"/>')
        parts.append(f'<text x="{W - 130}" y="{PAD + 14 * k}" font-size="11" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


PLOT_METRIC = {
    "whitebox": ("accuracy", "accuracy"),
    "robust-scalers": ("accuracy", "accuracy"),
    "blackbox": ("median_scaled_l2", "median scaled L2"),
    "scale-attack": ("success_rate", "success rate"),
    "train": ("median_score", "value"),
}


def render_svgs(summary: list[tuple], out_dir) -> list[Path]:
    """One chart per (experiment, group); returns written paths."""
    out_dir = Path(out_dir)
    written = []
    curves = defaultdict(lambda: defaultdict(lambda: ([], [])))
    hists = defaultdict(dict)
    hist_edges = defaultdict(set)
    for exp, grp, mode, param, metric, value in summary:
        if exp == "detect-hist":
            hists[grp].setdefault(mode, {})[param] = value
            hist_edges[grp].add(param)
        elif exp in PLOT_METRIC and metric == PLOT_METRIC[exp][0]:
            xs, ys = curves[(exp, grp)][mode]
            xs.append(param)
            ys.append(value)
    # vanilla baselines are overlaid on every chart of the same experiment
    for (exp, grp), series in list(curves.items()):
        if grp.endswith("-vanilla"):
            for (e2, g2), s2 in curves.items():
                if e2 == exp and not g2.endswith("-vanilla"):
                    s2.update(series)
            if any(e2 == exp and not g2.endswith("-vanilla") for e2, g2 in curves):
                del curves[(exp, grp)]
    for (exp, grp), series in sorted(curves.items()):
        name = f"{exp}-{grp}.svg" if grp else f"{exp}.svg"
        path = out_dir / name
        path.write_text(line_chart(dict(series), f"{exp} {grp}".strip(), "budget", PLOT_METRIC[exp][1]))
        written.append(path)
    for grp, modes in sorted(hists.items()):
        edges = sorted(hist_edges[grp])
        counts = {m: [vals.get(e, 0.0) for e in edges] for m, vals in modes.items()}
        path = out_dir / f"detect-hist-{grp}.svg"
        path.write_text(histogram_chart(edges, counts, f"{grp} detection scores", "score"))
        written.append(path)
    return written
