"""Markdown report and static plots over completed run directories."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .checkpoint import load_checkpoint  # noqa: E402
from .config import load as load_config  # noqa: E402
from .evaluation.complexity import strategy_complexity  # noqa: E402
from .evaluation.diagnostics import (confidence_histograms, cosine_domain_shift,  # noqa: E402
                                     histogram_divergence, pooled_features)
from .evaluation.metrics import AP_PROTOCOL  # noqa: E402
from .evaluation.projection import feature_projection_2d  # noqa: E402
from .experiment import load_data, read_forgetting, read_map_table  # noqa: E402

log = logging.getLogger(__name__)

COMPLEXITY_STRATEGIES = ("uft", "incr_mtda_kd", "mtda_dtm")


class Run:
    def __init__(self, d: Path):
        self.dir = d
        self.config = load_config(d / "config.ini")
        self.targets, self.rows = read_map_table(d)
        self.forgetting = read_forgetting(d)

    @property
    def strategy(self) -> str:
        return self.config.strategy

    @property
    def label(self) -> str:
        return self.dir.name


def _pct(v: float) -> str:
    return "-" if v is None or math.isnan(v) else f"{100 * v:.1f}"


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return out


def map_tables(runs: list[Run]) -> list[str]:
    lines = ["## Final mAP per target (%)", ""]
    names = []
    for r in runs:
        names += [t for t in r.targets if t not in names]
    rows = []
    for r in runs:
        last = r.rows[-1]
        vals = [last.get(t, float("nan")) for t in names]
        present = [v for v in vals if not math.isnan(v)]
        rows.append([r.label] + [_pct(v) for v in vals] + [_pct(float(np.mean(present)) if present else float("nan"))])
    lines += _table(["run"] + names + ["mean"], rows)
    for r in runs:
        lines += ["", f"### {r.label}: mAP after each step (%)", ""]
        lines += _table(["step"] + r.targets, [[row["step"]] + [_pct(row[t]) for t in r.targets] for row in r.rows])
        if r.forgetting:
            lines += ["", "forgetting: " + ", ".join(f"F({t}) = {_pct(v)}" for t, v in r.forgetting.items())]
    return lines


def forgetting_plot(runs: list[Run], path: Path) -> Path | None:
    """mAP of each run's first target against the adaptation step."""
    series = [r for r in runs if len(r.rows) > 1]
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in series:
        first = r.targets[0]
        ax.plot([row["step"] for row in r.rows], [row[first] for row in r.rows], marker="o",
                label=f"{r.label} ({first})")
    ax.set_xlabel("step")
    ax.set_ylabel("mAP on first target")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def complexity_lines(strategies) -> list[str]:
    rows = []
    for s in strategies:
        rep = strategy_complexity(s)
        det = rep["detector"]
        extra = rep["dtm"].params / det.params if "dtm" in rep else 0.0
        rows.append([s, f"{rep['total'].params:,}", f"{rep['total'].macs:,}", f"{rep['total'].flops:,}",
                     f"{100 * extra:.2f}%"])
    return ["## Training-time complexity (input 3x96x96)", "",
            *_table(["strategy", "params", "MACs", "FLOPs (2xMAC)", "DTM / detector params"], rows)]


def _model_sections(run: Run, runs: list[Run], out: Path) -> list[str]:
    source, targets = load_data(run.config)
    src_det, _, _, _ = load_checkpoint(run.dir / "step_0")
    lines = ["## Domain shift (source-only detector)", ""]
    shift = [[t.name, f"{cosine_domain_shift(src_det, source, t):.4f}"] for t in targets]
    lines += _table(["target", "cosine distance to source"], shift)

    # confidence histograms, source-only model
    for stage in ("rpn", "classifier"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        hists = {}
        for ds in [source] + targets:
            counts, edges = confidence_histograms(src_det, ds, stage=stage)
            hists[ds.name] = counts
            norm = counts / counts.sum() if counts.sum() else counts
            ax.step(edges[:-1], norm, where="post", label=ds.name)
        ax.set_xlabel(f"{stage} score")
        ax.set_ylabel("fraction")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"hist_{stage}.png", dpi=100)
        plt.close(fig)
        lines += ["", f"![{stage} confidence](hist_{stage}.png)", "",
                  f"{stage} histogram L1 divergence from source: " + ", ".join(
                      f"{t.name} {histogram_divergence(hists[source.name], hists[t.name]):.3f}" for t in targets)]

    # feature overlap scatter with the DTM of the first mtda_dtm run, if any
    dtm_run = next((r for r in runs if r.strategy == "mtda_dtm" and (r.dir / "step_1").exists()), None)
    det = src_det
    sets = {source.name: pooled_features(det, [im for im, _ in source.eval])}
    if dtm_run is not None:
        det, _, _, _ = load_checkpoint(dtm_run.dir / "step_1")
        _, _, g, _ = load_checkpoint(dtm_run.dir / "step_1")
        sets = {source.name: pooled_features(det, [im for im, _ in source.eval])}
        with torch.no_grad():
            x = torch.stack([torch.from_numpy(im.pixels) for im, _ in source.eval])
            sets["DTM(source)"] = pooled_features(det, g(x).float())
    for t in targets:
        sets[t.name] = pooled_features(det, [im for im, _ in t.eval])
    proj = feature_projection_2d(sets)
    fig, ax = plt.subplots(figsize=(5, 4))
    for name in sets:
        c = proj.of(name)
        ax.scatter(c[:, 0], c[:, 1], s=6, label=name, alpha=0.6)
    ax.legend(fontsize=7)
    ax.set_title("PCA of pooled backbone features")
    fig.tight_layout()
    fig.savefig(out / "features_pca.png", dpi=100)
    plt.close(fig)
    who = dtm_run.label + " step 1" if dtm_run else "source-only"
    lines += ["", f"## Feature overlap ({who} detector)", "", "![features](features_pca.png)"]
    return lines


def build_report(run_dirs, out, with_models: bool = True) -> Path:
    """Write ``report.md`` (plus PNGs) to ``out``; returns the markdown path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runs, missing = [], []
    for d in run_dirs:
        d = Path(d)
        if (d / "map_table.csv").exists() and (d / "config.ini").exists():
            runs.append(Run(d))
        else:
            missing.append(str(d))
    lines = ["# Experiment report", "", f"AP protocol: {AP_PROTOCOL}", ""]
    if missing:
        lines += ["Missing or incomplete runs:", ""] + [f"- {m}" for m in missing] + [""]
    if runs:
        lines += map_tables(runs)
        plot = forgetting_plot(runs, out / "forgetting.png")
        if plot is not None:
            lines += ["", "## Forgetting curves", "", "![forgetting](forgetting.png)"]
    strategies = list(dict.fromkeys([r.strategy for r in runs] + list(COMPLEXITY_STRATEGIES)))
    lines += [""] + complexity_lines(strategies)
    if runs and with_models:
        try:
            lines += [""] + _model_sections(runs[0], runs, out)
        except (FileNotFoundError, ValueError) as e:
            lines += ["", f"model diagnostics skipped: {e}"]
    path = out / "report.md"
    path.write_text("\n".join(lines) + "\n")
    return path
