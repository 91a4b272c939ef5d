"""Self-rendered SVG plots: learning curves, alpha traces and ablation boxes."""
from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from prpd.env.dr import ConfigError
from prpd.harness import read_metrics_csv

W, H = 640, 400
PAD_L, PAD_R, PAD_T, PAD_B = 64, 150, 30, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


@dataclass
class Run:
    label: str
    rows: list[dict]
    wall: list[float] | None = None  # wall-clock per iteration, from timing.csv

    @property
    def rungs(self) -> list[tuple[int, float]]:
        """(iteration, new delta) wherever the training resolution changed."""
        out = []
        for a, b in zip(self.rows, self.rows[1:]):
            if b["delta_mm"] != a["delta_mm"]:
                out.append((b["iteration"], b["delta_mm"]))
        return out


def group_label(path: Path) -> str:
    """``.../<variant>/seed3/metrics.csv`` -> ``variant``; otherwise the parent dir."""
    parent = path.parent
    if parent.name.startswith("seed") and parent.parent.name:
        return parent.parent.name
    return parent.name or path.stem


def load_run(path, label: str | None = None) -> Run:
    path = Path(path)
    rows = read_metrics_csv(path)
    if not rows:
        raise ConfigError(f"{path}: metrics file has no rows")
    wall = None
    tpath = path.with_name("timing.csv")
    if tpath.is_file():
        with open(tpath, newline="") as fh:
            t = {int(r["iteration"]): float(r["wall_clock_s"]) for r in csv.DictReader(fh)}
        if all(r["iteration"] in t for r in rows):
            wall = [t[r["iteration"]] for r in rows]
    return Run(label or group_label(path), rows, wall)


@dataclass
class Canvas:
    title: str
    xlabel: str
    ylabel: str
    x0: float
    x1: float
    y0: float
    y1: float
    parts: list[str] = field(default_factory=list)

    def sx(self, x: float) -> float:
        span = (self.x1 - self.x0) or 1.0
        return PAD_L + (x - self.x0) / span * (W - PAD_L - PAD_R)

    def sy(self, y: float) -> float:
        span = (self.y1 - self.y0) or 1.0
        return H - PAD_B - (y - self.y0) / span * (H - PAD_T - PAD_B)

    def line(self, xs, ys, color, width=1.5, dash=None):
        pts = " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{d} points="{pts}"/>')

    def band(self, xs, lo, hi, color):
        pts = [f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, hi)]
        pts += [f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(reversed(xs), reversed(lo))]
        self.parts.append(f'<polygon fill="{color}" fill-opacity="0.2" stroke="none" points="{" ".join(pts)}"/>')

    def vline(self, x, color, label=None):
        X = self.sx(x)
        self.parts.append(f'<line x1="{X:.2f}" y1="{PAD_T}" x2="{X:.2f}" y2="{H - PAD_B}" '
                          f'stroke="{color}" stroke-dasharray="3,3" stroke-width="1"/>')
        if label:
            self.text(X + 2, PAD_T + 10, label, size=9, color=color)

    def rect(self, x, y, w, h, color, opacity=0.35):
        self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
                          f'fill="{color}" fill-opacity="{opacity}" stroke="{color}"/>')

    def text(self, x, y, s, size=11, color="#000", anchor="start"):
        self.parts.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" fill="{color}" '
                          f'text-anchor="{anchor}" font-family="sans-serif">{escape(str(s))}</text>')

    def legend(self, entries):
        for k, (label, color) in enumerate(entries):
            y = PAD_T + 14 + 16 * k
            self.parts.append(f'<rect x="{W - PAD_R + 12}" y="{y - 9}" width="12" height="10" fill="{color}"/>')
            self.text(W - PAD_R + 30, y, label, size=10)

    def render(self) -> str:
        axes = [
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="#fff"/>',
            f'<line x1="{PAD_L}" y1="{H - PAD_B}" x2="{W - PAD_R}" y2="{H - PAD_B}" stroke="#000"/>',
            f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{H - PAD_B}" stroke="#000"/>',
        ]
        ticks = []
        for k in range(5):
            xv = self.x0 + (self.x1 - self.x0) * k / 4
            yv = self.y0 + (self.y1 - self.y0) * k / 4
            ticks.append(_text_el(self.sx(xv), H - PAD_B + 16, _num(xv), anchor="middle"))
            ticks.append(_text_el(PAD_L - 6, self.sy(yv) + 4, _num(yv), anchor="end"))
        labels = [
            _text_el(W / 2 - PAD_R / 2, 18, self.title, size=13, anchor="middle"),
            _text_el((PAD_L + W - PAD_R) / 2, H - 10, self.xlabel, anchor="middle"),
            f'<text x="16" y="{H / 2:.1f}" font-size="11" font-family="sans-serif" text-anchor="middle" '
            f'transform="rotate(-90 16 {H / 2:.1f})">{escape(self.ylabel)}</text>',
        ]
        body = "\n".join(axes + ticks + labels + self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
                f'viewBox="0 0 {W} {H}">\n{body}\n</svg>\n')


def _text_el(x, y, s, size=10, anchor="start") -> str:
    return (f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}" '
            f'font-family="sans-serif">{escape(str(s))}</text>')


def _num(v: float) -> str:
    if v == 0 or 0.01 <= abs(v) < 1e5:
        return f"{v:.3g}"
    return f"{v:.2e}"


def _step_interp(xs, ys, grid):
    """Value of a step function (last observation carried forward) on ``grid``."""
    out, k = [], 0
    for g in grid:
        while k + 1 < len(xs) and xs[k + 1] <= g:
            k += 1
        out.append(ys[k] if g >= xs[0] else ys[0])
    return out


def _x_of(run: Run, axis: str) -> list[float]:
    if axis == "wall_clock_s":
        if run.wall is None:
            raise ConfigError(f"run {run.label!r} has no timing.csv; use the samples axis")
        return run.wall
    return [float(r[axis]) for r in run.rows]


def learning_curve_svg(runs: list[Run], axis: str = "wall_clock_s", key: str = "tau") -> str:
    """Success rate against wall-clock (or samples); mean line and std band per group."""
    if not runs:
        raise ConfigError("no runs to plot")
    groups: dict[str, list[Run]] = {}
    for r in runs:
        groups.setdefault(r.label, []).append(r)
    xmax = max(max(_x_of(r, axis)) for r in runs)
    cv = Canvas("Success rate", "wall-clock [s]" if axis == "wall_clock_s" else "samples",
                key, 0.0, xmax, 0.0, 1.0)
    legend = []
    for k, (label, members) in enumerate(groups.items()):
        color = COLORS[k % len(COLORS)]
        if len(members) == 1:
            r = members[0]
            cv.line(_x_of(r, axis), [float(row[key]) for row in r.rows], color)
        else:
            grid = sorted({x for r in members for x in _x_of(r, axis)})
            curves = [_step_interp(_x_of(r, axis), [float(row[key]) for row in r.rows], grid)
                      for r in members]
            mean = [statistics.fmean(c[i] for c in curves) for i in range(len(grid))]
            std = [statistics.pstdev([c[i] for c in curves]) for i in range(len(grid))]
            cv.band(grid, [m - s for m, s in zip(mean, std)], [m + s for m, s in zip(mean, std)], color)
            cv.line(grid, mean, color)
        for r in members:
            xs = _x_of(r, axis)
            for it, delta in r.rungs:
                cv.vline(xs[[row["iteration"] for row in r.rows].index(it)], color)
        legend.append((f"{label} (n={len(members)})", color))
    cv.legend(legend)
    return cv.render()


def alpha_trace_svg(runs: list[Run]) -> str:
    """Mixture rate per iteration with dashed markers at every rung change."""
    if not runs:
        raise ConfigError("no runs to plot")
    n = max(len(r.rows) for r in runs)
    cv = Canvas("Mixture rate", "iteration", "alpha", 0.0, float(max(n - 1, 1)), 0.0, 1.0)
    legend = []
    for k, r in enumerate(runs):
        color = COLORS[k % len(COLORS)]
        cv.line([row["iteration"] for row in r.rows], [float(row["alpha"]) for row in r.rows], color)
        for it, delta in r.rungs:
            cv.vline(it, color, f"{delta:g}")
        legend.append((r.label, color))
    cv.legend(legend)
    return cv.render()


def ablation_svg(values: dict[str, list[float]], ylabel: str = "samples to target",
                 censored: dict[str, list[float]] | None = None) -> str:
    """Box summary (min, quartiles, median, max) per variant; censored runs drawn as crosses."""
    censored = censored or {}
    labels = [k for k in values if values[k] or censored.get(k)]
    if not labels:
        raise ConfigError("no values to plot")
    allv = [v for k in labels for v in values[k] + censored.get(k, [])]
    top = max(allv) * 1.05 or 1.0
    cv = Canvas("Ablation", "variant", ylabel, 0.0, float(len(labels)), 0.0, top)
    for k, label in enumerate(labels):
        color = COLORS[k % len(COLORS)]
        cx = cv.sx(k + 0.5)
        vals = sorted(values[label])
        if vals:
            q1, med, q3 = _quartiles(vals)
            cv.parts.append(f'<line x1="{cx:.2f}" y1="{cv.sy(vals[0]):.2f}" x2="{cx:.2f}" '
                            f'y2="{cv.sy(vals[-1]):.2f}" stroke="{color}"/>')
            cv.rect(cx - 18, cv.sy(q3), 36, max(cv.sy(q1) - cv.sy(q3), 1.0), color)
            cv.parts.append(f'<line x1="{cx - 18:.2f}" y1="{cv.sy(med):.2f}" x2="{cx + 18:.2f}" '
                            f'y2="{cv.sy(med):.2f}" stroke="#000" stroke-width="2"/>')
        for v in censored.get(label, []):
            y = cv.sy(v)
            cv.parts.append(f'<path d="M{cx - 4:.2f},{y - 4:.2f} L{cx + 4:.2f},{y + 4:.2f} '
                            f'M{cx - 4:.2f},{y + 4:.2f} L{cx + 4:.2f},{y - 4:.2f}" stroke="{color}"/>')
        cv.text(cx, H - PAD_B + 30, label, size=10, anchor="middle")
    return cv.render()


def _quartiles(vals: list[float]) -> tuple[float, float, float]:
    if len(vals) == 1:
        return vals[0], vals[0], vals[0]
    q = statistics.quantiles(vals, n=4, method="inclusive")
    return q[0], q[1], q[2]


def samples_to_target(run: Run, target: float = 0.95, final: float | None = None):
    """(samples, reached) from a run's rows; unreached runs report the budget point."""
    final = min(r["delta_mm"] for r in run.rows) if final is None else final
    for row in run.rows:
        if row["delta_mm"] == final and row["tau"] >= target:
            return float(row["samples_total"]), True
    return float(run.rows[-1]["samples_total"]), False


def plot_runs(paths, out_dir, axis: str = "wall_clock_s", target: float = 0.95) -> list[Path]:
    """Write learning-curve, alpha-trace and ablation SVGs for metrics CSVs."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ConfigError("no metrics CSVs given")
    runs = [load_run(p) for p in paths]
    if axis == "wall_clock_s" and any(r.wall is None for r in runs):
        axis = "samples_total"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, svg in (("learning_curve.svg", learning_curve_svg(runs, axis)),
                      ("alpha_trace.svg", alpha_trace_svg(runs))):
        (out / name).write_text(svg)
        written.append(out / name)
    done: dict[str, list[float]] = {}
    cens: dict[str, list[float]] = {}
    for r in runs:
        s, ok = samples_to_target(r, target)
        (done if ok else cens).setdefault(r.label, []).append(s)
        done.setdefault(r.label, [])
    (out / "ablation.svg").write_text(ablation_svg(done, censored=cens))
    written.append(out / "ablation.svg")
    return written
