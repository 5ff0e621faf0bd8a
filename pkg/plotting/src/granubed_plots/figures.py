"""Figure builders: per-step timing traces, size-sweep bars, weak-scaling
curves and fixed-vs-adaptive comparisons.

Every figure also writes a plain-text export of exactly the series drawn
(``<image>.data.txt``), so correctness is testable without comparing image
bytes.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .schema import SchemaError, read_csv  # noqa: E402

KINDS = ("trace", "sizes", "weak", "ats")


@dataclass
class FigureSpec:
    inputs: list
    kind: str
    output: str
    log_x: bool = False
    log_y: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}")


def _write_export(path, series: dict[str, tuple[list, list]]) -> str:
    export = str(path) + ".data.txt"
    with open(export, "w", encoding="utf-8") as fh:
        for name, (xs, ys) in series.items():
            fh.write(f"# series: {name}\n")
            for x, y in zip(xs, ys):
                fh.write(f"{x},{y:.17g}\n")
    return export


def read_export(path) -> dict[str, tuple[list, list]]:
    """Parse a data export back into {series: (xs, ys)} (for tests/tools)."""
    series: dict[str, tuple[list, list]] = {}
    name = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# series:"):
                name = line.split(":", 1)[1].strip()
                series[name] = ([], [])
            elif line:
                x, y = line.split(",")
                series[name][0].append(x)
                series[name][1].append(float(y))
    return series


def plot_trace(csv_path, output, log_y: bool = False) -> str:
    """Dual-axis history of the fluid step size and the cost per step."""
    cols = read_csv(csv_path, "trace")
    if not cols["t"]:
        print(f"warning: {csv_path} has no data rows; emitting empty axes",
              file=sys.stderr)
    fig, ax_dt = plt.subplots(figsize=(7, 4))
    ax_w = ax_dt.twinx()
    ax_dt.plot(cols["t"], cols["dt_f"], color="tab:blue", label="dt_f")
    ax_w.plot(cols["t"], cols["w_total"], color="tab:red", label="w_total")
    ax_dt.set_xlabel("simulated time (s)")
    ax_dt.set_ylabel("fluid step size (s)", color="tab:blue")
    ax_w.set_ylabel("wall seconds per step", color="tab:red")
    if log_y and cols["t"]:
        ax_dt.set_yscale("log")
        ax_w.set_yscale("log")
    fig.tight_layout()
    fig.savefig(output, dpi=120)
    plt.close(fig)
    return _write_export(output, {
        "dt_f": (cols["t"], cols["dt_f"]),
        "w_total": (cols["t"], cols["w_total"]),
    })


def plot_scaling(csv_path, kind: str, output, log_y: bool = False) -> str:
    """Grouped bars (sizes/ats) or lines vs rank count (weak)."""
    if kind == "weak":
        return _plot_weak(csv_path, output)
    if kind == "sizes":
        return _plot_sizes(csv_path, output, log_y)
    if kind == "ats":
        return _plot_ats(csv_path, output)
    raise SchemaError(f"unknown scaling kind {kind!r}")


def _plot_weak(csv_path, output) -> str:
    cols = read_csv(csv_path, "weak")
    fig, (ax_w, ax_e) = plt.subplots(1, 2, figsize=(9, 4))
    series = {}
    variants = sorted(set(cols["ats"]))
    for variant in variants:
        rows = [i for i, v in enumerate(cols["ats"]) if v == variant]
        ranks = [cols["ranks"][i] for i in rows]
        wall = [cols["wall_s"][i] for i in rows]
        eff = [cols["efficiency"][i] for i in rows]
        ax_w.plot(ranks, wall, marker="o", label=f"ats {variant}")
        ax_e.plot(ranks, eff, marker="o", label=f"ats {variant}")
        series[f"wall_s[ats={variant}]"] = (ranks, wall)
        series[f"efficiency[ats={variant}]"] = (ranks, eff)
    ax_e.axhline(1.0, color="gray", linestyle="--", label="ideal")
    if cols["ranks"]:
        ideal_x = sorted(set(cols["ranks"]))
        series["ideal_efficiency"] = (ideal_x, [1.0] * len(ideal_x))
    ax_w.set_xlabel("ranks")
    ax_w.set_ylabel("wall seconds")
    ax_e.set_xlabel("ranks")
    ax_e.set_ylabel("efficiency")
    ax_e.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(output, dpi=120)
    plt.close(fig)
    return _write_export(output, series)


def _plot_sizes(csv_path, output, log_y: bool) -> str:
    cols = read_csv(csv_path, "sizes")
    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(cols["label"]))
    width = 0.4
    ax.bar([i - width / 2 for i in x], cols["wall_s"], width, label="observed")
    ax.bar([i + width / 2 for i in x], cols["ideal_wall_s"], width,
           label="ideal scaling")
    ax.set_xticks(list(x), cols["label"])
    ax.set_xlabel("problem size factor")
    ax.set_ylabel("wall seconds")
    if log_y and cols["label"]:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(output, dpi=120)
    plt.close(fig)
    return _write_export(output, {
        "wall_s": (cols["label"], cols["wall_s"]),
        "ideal_wall_s": (cols["label"], cols["ideal_wall_s"]),
    })


def _plot_ats(csv_path, output) -> str:
    cols = read_csv(csv_path, "ats")
    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(cols["label"]))
    width = 0.4
    ax.bar([i - width / 2 for i in x], cols["substeps_fixed"], width,
           label="fixed dt")
    ax.bar([i + width / 2 for i in x], cols["substeps_ats"], width,
           label="adaptive dt")
    ax.set_xticks(list(x), cols["label"])
    ax.set_xlabel("case")
    ax.set_ylabel("particle substeps")
    ax.legend()
    fig.tight_layout()
    fig.savefig(output, dpi=120)
    plt.close(fig)
    return _write_export(output, {
        "substeps_fixed": (cols["label"], cols["substeps_fixed"]),
        "substeps_ats": (cols["label"], cols["substeps_ats"]),
        "substep_ratio": (cols["label"], cols["substep_ratio"]),
    })


def render(spec: FigureSpec) -> str:
    """Render one FigureSpec; returns the data-export path."""
    if spec.kind == "trace":
        return plot_trace(spec.inputs[0], spec.output, log_y=spec.log_y)
    return plot_scaling(spec.inputs[0], spec.kind, spec.output, log_y=spec.log_y)
