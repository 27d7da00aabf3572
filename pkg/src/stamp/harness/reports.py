"""CSV / JSON tables and PNG figures for experiment reports."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import ROW_FIELDS, RunReport  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
COLORS = {"full": "#444444", "stamp": "#c0392b", "random": "#2e86c1", "bbdropout": "#27ae60"}


def _write_csv(path: Path, rows: list[dict], fields) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def curve_points(report: RunReport) -> list[dict]:
    """Accuracy against kept ratios, one point per successful (method, seed)."""
    return [{"method": r.method, "seed": r.seed, "params_ratio": r.params_ratio, "flops_ratio": r.flops_ratio,
             "accuracy": r.accuracy} for r in report.runs if r.status == "ok"]


def kept_channel_map(report: RunReport) -> dict:
    """``{method: {seed: {layer: keep indices}}}`` for every pruned arm."""
    out: dict = {}
    for r in report.runs:
        if r.status == "ok" and r.keep_indices is not None and r.method != "full":
            out.setdefault(r.method, {})[str(r.seed)] = r.keep_indices
    return out


def load_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


def emit_reports(report: RunReport, outdir, formats=("csv", "json", "png")) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(_write_csv(outdir / "table.csv", report.rows, ROW_FIELDS))
        written.append(_write_csv(outdir / "curve.csv", curve_points(report),
                                  ("method", "seed", "params_ratio", "flops_ratio", "accuracy")))
    if "json" in formats:
        for name, payload in (("report.json", report.to_dict()), ("curve.json", curve_points(report)),
                              ("kept_channels.json", kept_channel_map(report))):
            (outdir / name).write_text(json.dumps(payload, indent=2))
            written.append(outdir / name)
    if "png" in formats and report.runs:
        written.extend(plot_report(report, outdir))
    log.info("wrote %d report files to %s", len(written), outdir)
    return written


def plot_report(report: RunReport, outdir: Path) -> list[Path]:
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method in dict.fromkeys(r.method for r in report.runs):
            pts = [p for p in curve_points(report) if p["method"] == method]
            if pts:
                ax.scatter([p["flops_ratio"] for p in pts], [100 * p["accuracy"] for p in pts],
                           label=method, color=COLORS.get(method), s=22)
        kappa = report.config.get("kappa")
        if kappa:
            ax.axvline(kappa, ls="--", lw=0.8, color="k", alpha=0.5, label="FLOPs target")
        ax.set_xlabel("FLOPs ratio")
        ax.set_ylabel("accuracy (%)")
        ax.set_xlim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        paths.append(outdir / "accuracy_vs_flops.png")
        fig.savefig(paths[-1])
        plt.close(fig)

        maps = kept_channel_map(report).get("stamp")
        if maps:
            paths.append(plot_kept_channels(maps, report.widths, outdir / "kept_channels.png"))
    return paths


def plot_kept_channels(maps: dict, widths: dict, path: Path) -> Path:
    """Grid of kept (dark) and pruned (light) channels, one panel per seed.

    Cells past a layer's width stay blank.
    """
    seeds = sorted(maps, key=int)
    layers = list(next(iter(maps.values())))
    widths = {n: widths.get(n, 1 + max(max(m[n]) for m in maps.values())) for n in layers}
    width = max(widths.values())
    cmap = plt.get_cmap("Greys").copy()
    cmap.set_bad("white")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(seeds), 1, figsize=(6, 1.0 + 0.9 * len(seeds)), squeeze=False)
        for ax, seed in zip(axes[:, 0], seeds):
            grid = np.full((len(layers), width), np.nan)
            for i, layer in enumerate(layers):
                grid[i, :widths[layer]] = 0.0
                grid[i, maps[seed][layer]] = 1.0
            ax.imshow(grid, aspect="auto", cmap=cmap, vmin=-0.3, vmax=1.0, interpolation="nearest")
            ax.set_yticks(range(len(layers)), layers)
            ax.set_title(f"seed {seed}", loc="left")
            ax.grid(False)
        axes[-1, 0].set_xlabel("channel index")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def emit_data_size(study: dict, outdir, formats=("csv", "json", "png")) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(_write_csv(outdir / "data_size.csv", study["table"],
                                  ("method", "size", "n_ok", "accuracy_median", "search_time_median_s",
                                   "finetune_time_median_s")))
    if "json" in formats:
        (outdir / "data_size.json").write_text(json.dumps(study, indent=2))
        written.append(outdir / "data_size.json")
    if "png" in formats and study["table"]:
        with plt.rc_context(STYLE):
            fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2))
            for method in dict.fromkeys(r["method"] for r in study["table"]):
                rows = [r for r in study["table"] if r["method"] == method and r["n_ok"]]
                sizes = [r["size"] for r in rows]
                left.plot(sizes, [100 * r["accuracy_median"] for r in rows], "o-", label=method,
                          color=COLORS.get(method))
                right.plot(sizes, [r["search_time_median_s"] + r["finetune_time_median_s"] for r in rows], "o-",
                           label=method, color=COLORS.get(method))
            left.set(xlabel="target instances per class", ylabel="accuracy (%)", xscale="log")
            right.set(xlabel="target instances per class", ylabel="search + fine-tune time (s)", xscale="log")
            left.legend()
            fig.tight_layout()
            written.append(outdir / "data_size.png")
            fig.savefig(written[-1])
            plt.close(fig)
    return written
