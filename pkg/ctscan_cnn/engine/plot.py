"""SVG charts built as plain strings.

``curve_svg`` draws one metric per epoch for the training and validation
splits; ``comparison_svg`` draws grouped bars of testing accuracy, AUC and
loss per model. Coordinates are formatted to two decimals so identical
inputs give identical bytes.
"""

from typing import List, Sequence, Tuple
from xml.sax.saxutils import escape

from ..errors import UsageError
from .metrics import METRIC_NAMES
from .report import ReportRow
from .train import EpochLog

WIDTH, HEIGHT = 640, 400
PAD_LEFT, PAD_RIGHT, PAD_TOP, PAD_BOTTOM = 64, 24, 32, 56
SERIES = (("train", "Training", "#1f77b4"), ("val", "Validation", "#ff7f0e"))
METRIC_TITLES = {"accuracy": "Accuracy", "auc": "AUC", "recall": "Recall", "loss": "Loss"}
BAR_METRICS = (("accuracy", "#1f77b4"), ("auc", "#2ca02c"), ("loss", "#d62728"))


def _f(v: float) -> str:
    return f"{v:.2f}"


def _header(title: str) -> List[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def _value_range(values: Sequence[float]) -> Tuple[float, float]:
    lo, hi = min(values), max(values)
    lo = min(lo, 0.0)
    if hi == lo:
        hi = lo + 1.0
    return lo, hi


def _axes(lo: float, hi: float, x_label: str, y_label: str) -> List[str]:
    x0, x1 = PAD_LEFT, WIDTH - PAD_RIGHT
    y0, y1 = HEIGHT - PAD_BOTTOM, PAD_TOP
    parts = [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2:.0f}" y="{HEIGHT - 16}" text-anchor="middle">{escape(x_label)}</text>',
        f'<text x="16" y="{(y0 + y1) / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2:.0f})">{escape(y_label)}</text>',
    ]
    for i in range(5):
        value = lo + (hi - lo) * i / 4
        y = y0 - (y0 - y1) * i / 4
        parts.append(f'<text x="{x0 - 6}" y="{_f(y + 4)}" text-anchor="end">{value:.3g}</text>')
    return parts


def _legend(entries: Sequence[Tuple[str, str]]) -> List[str]:
    parts = []
    x = WIDTH - PAD_RIGHT - 130
    for i, (label, color) in enumerate(entries):
        y = PAD_TOP + 8 + 18 * i
        parts.append(f'<rect x="{x}" y="{y - 9}" width="12" height="12" fill="{color}"/>')
        parts.append(f'<text x="{x + 18}" y="{y + 1}">{escape(label)}</text>')
    return parts


def curve_svg(logs: Sequence[EpochLog], metric: str) -> str:
    """Training and validation ``metric`` against epoch."""
    if metric not in METRIC_NAMES:
        raise UsageError(f"unknown metric {metric!r}; choose one of {', '.join(METRIC_NAMES)}")
    if not logs:
        raise UsageError("RunLog has no epoch records to plot")

    epochs = [log.epoch for log in logs]
    values = {split: [log.metric(split, metric) for log in logs] for split, _, _ in SERIES}
    lo, hi = _value_range(values["train"] + values["val"])

    def xy(epoch: int, value: float) -> Tuple[float, float]:
        span = max(epochs[-1] - epochs[0], 1)
        x = PAD_LEFT + (WIDTH - PAD_LEFT - PAD_RIGHT) * (epoch - epochs[0]) / span
        y = (HEIGHT - PAD_BOTTOM) - (HEIGHT - PAD_BOTTOM - PAD_TOP) * (value - lo) / (hi - lo)
        return x, y

    title = METRIC_TITLES[metric]
    parts = _header(f"{title} curve")
    parts += _axes(lo, hi, "Epoch", title)
    for split, label, color in SERIES:
        points = [xy(e, v) for e, v in zip(epochs, values[split])]
        if len(points) == 1:
            x, y = points[0]
            parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="4" fill="{color}" data-series="{split}"/>')
        else:
            coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in points)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                         f'stroke-width="2" data-series="{split}"/>')
    parts += _legend([(label, color) for _, label, color in SERIES])
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def comparison_svg(rows: Sequence[ReportRow], split: str = "test") -> str:
    """Grouped bars per model: accuracy, AUC and loss on one value axis."""
    part = [r for r in rows if r.split == split]
    if not part:
        raise UsageError(f"no {split} rows to chart")

    lo, hi = _value_range([r.metric(name) for r in part for name, _ in BAR_METRICS])
    plot_w = WIDTH - PAD_LEFT - PAD_RIGHT
    plot_h = HEIGHT - PAD_BOTTOM - PAD_TOP
    group_w = plot_w / len(part)
    bar_w = group_w * 0.8 / len(BAR_METRICS)
    base_y = (HEIGHT - PAD_BOTTOM) - plot_h * (0.0 - lo) / (hi - lo)

    parts = _header("Model comparison")
    parts += _axes(lo, hi, "Model", "Value")
    for g, row in enumerate(part):
        gx = PAD_LEFT + group_w * g + group_w * 0.1
        for b, (name, color) in enumerate(BAR_METRICS):
            value = row.metric(name)
            top = (HEIGHT - PAD_BOTTOM) - plot_h * (value - lo) / (hi - lo)
            y, h = min(top, base_y), abs(base_y - top)
            parts.append(f'<rect x="{_f(gx + bar_w * b)}" y="{_f(y)}" width="{_f(bar_w)}" '
                         f'height="{_f(h)}" fill="{color}"><title>{escape(row.model)} '
                         f'{name} {value:.4g}</title></rect>')
        parts.append(f'<text x="{_f(gx + group_w * 0.4)}" y="{HEIGHT - PAD_BOTTOM + 16}" '
                     f'text-anchor="middle">{escape(row.model)}</text>')
    parts += _legend([(METRIC_TITLES[name], color) for name, color in BAR_METRICS])
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
