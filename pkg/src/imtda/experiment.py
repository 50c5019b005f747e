"""On-disk experiments: dataset generation, resumable runs, sweeps and re-evaluation.

A run directory looks like::

    <out>/<experiment_id>/
        config.ini  manifest.txt
        step_0/  weights.idka manifest.txt eval.csv access.tsv COMPLETE
        step_1/  ... (plus targets/<name>/ for one-detector-per-target strategies)
        map.csv  map_table.csv  forgetting.csv  access_log.tsv  DONE

A step directory counts only once its ``COMPLETE`` marker exists, so an
interrupted run resumes after the last complete step.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dumps
from .evaluation.diagnostics import map_over_dataset
from .synth_domains import (build_domain_dataset, load_domain_dataset,
                            manifest_text, parse_manifest, save_domain_dataset, verify_domain_dir)
from .trainer import ExperimentState, StepRecord, run_strategy
from .training import AccessRecord, DivergenceError

log = logging.getLogger(__name__)

COMPLETE = "COMPLETE"
DONE = "DONE"
ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
SWEEP_AXES = ("alpha", "order", "seed", "dtm_variant")


# -- data ----------------------------------------------------------------------

def data_root(cfg: ExperimentConfig, base=None) -> Path:
    root = Path(cfg.data_root)
    return root if root.is_absolute() or base is None else Path(base) / root


def generate_data(cfg: ExperimentConfig, root=None) -> list[tuple[str, Path, str]]:
    """Build and save every configured domain; returns ``(name, dir, status)``.

    Existing directories whose manifest matches are only checksum-verified
    (status ``up to date``); a tampered file raises :class:`ChecksumError`.
    """
    root = Path(root) if root is not None else Path(cfg.data_root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create data directory {root}: {e.strerror}") from None
    src, tgts = cfg.domain_specs()
    out = []
    for spec in [src] + tgts:
        d = root / spec.name
        expected = manifest_text(spec, cfg.n_train, cfg.n_eval, spec.kind == "source")
        mpath = d / "manifest.txt"
        if mpath.exists() and parse_manifest(mpath.read_text()) == parse_manifest(expected):
            verify_domain_dir(d)
            out.append((spec.name, d, "up to date"))
            continue
        if d.exists():
            shutil.rmtree(d)
        tmp = root / f".{spec.name}.tmp"
        if tmp.exists():
            shutil.rmtree(tmp)
        save_domain_dataset(build_domain_dataset(spec, cfg.n_train, cfg.n_eval), tmp)
        tmp.replace(d)
        out.append((spec.name, d, "written"))
    return out


def load_data(cfg: ExperimentConfig, root=None):
    root = Path(root) if root is not None else Path(cfg.data_root)
    src, tgts = cfg.domain_specs()
    loaded = []
    for spec in [src] + tgts:
        d = root / spec.name
        if not (d / "manifest.txt").exists():
            raise FileNotFoundError(f"{d}: dataset missing; run generate-data first")
        ds = load_domain_dataset(d)
        if ds.spec != spec:
            raise ValueError(f"{d}: dataset was generated from a different config; re-run generate-data")
        loaded.append(ds)
    return loaded[0], loaded[1:]


# -- runs ----------------------------------------------------------------------

def experiment_id(cfg: ExperimentConfig) -> str:
    order = "-".join(str(i) for i in (cfg.order or range(len(cfg.targets))))
    return f"{cfg.strategy}_seed{cfg.seed}_order{order}"


def run_dir(cfg: ExperimentConfig, out=None) -> Path:
    return Path(out if out is not None else cfg.out) / experiment_id(cfg)


def _config_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v)) if isinstance(v, float) else str(v)


def _persist_step(d: Path, state: ExperimentState, rec: StepRecord) -> None:
    sd = d / f"step_{rec.step}"
    if sd.exists():
        shutil.rmtree(sd)
    sd.mkdir(parents=True)
    hyper = state.hyper
    save_checkpoint(sd, rec.det_state, hyper.seed, rec.step, disc=rec.disc_state,
                    dtm=rec.dtm_state, dtm_variant=hyper.dtm_variant if rec.dtm_state else None)
    for name, st in (rec.det_states or {}).items():
        save_checkpoint(sd / "targets" / name, st, hyper.seed, rec.step)
    rows = []
    for target, rep in rec.reports.items():
        for r in rep.to_rows(rec.step, state.strategy, target):
            rows.append([r["step"], r["strategy"], r["target"], r["cls"], _fmt(r["AP"]), _fmt(r["mAP"])])
    _write_csv(sd / "eval.csv", ["step", "strategy", "target", "class", "AP", "mAP"], rows)
    _write_csv(sd / "maps.csv", ["target", "mAP"], [[t, _fmt(v)] for t, v in rec.maps.items()])
    acc = [r for r in state.access_log.records if r.step == rec.step]
    (sd / "access.tsv").write_text("".join(
        f"{r.step}\t{r.purpose}\t{r.domain}\t{r.split}\t{r.index}\n" for r in acc))
    (sd / COMPLETE).write_text("ok\n")


def _load_steps(d: Path, cfg: ExperimentConfig) -> ExperimentState | None:
    steps, records = [], []
    k = 0
    while (d / f"step_{k}" / COMPLETE).exists():
        sd = d / f"step_{k}"
        det, disc, g, _ = load_checkpoint(sd)
        det_states = None
        if (sd / "targets").exists():
            det_states = {p.name: load_checkpoint(p)[0].state_dict() for p in sorted((sd / "targets").iterdir())}
        with (sd / "maps.csv").open() as f:
            maps = {r["target"]: float(r["mAP"]) for r in csv.DictReader(f)}
        steps.append(StepRecord(k, det.state_dict(), disc.state_dict() if disc else None,
                                g.state_dict() if g else None, maps, det_states=det_states))
        for line in (sd / "access.tsv").read_text().splitlines():
            s, purpose, dom, split, idx = line.split("\t")
            records.append(AccessRecord(int(s), dom, split, int(idx), purpose))
        k += 1
    if not steps:
        return None
    st = ExperimentState(cfg.strategy, cfg.hyper(), [], list(cfg.order or range(len(cfg.targets))), steps)
    st.access_log.records = records
    return st


def _finalize(d: Path, state: ExperimentState) -> None:
    rows = []
    for rec in state.steps:
        with (d / f"step_{rec.step}" / "eval.csv").open() as f:
            r = csv.reader(f)
            next(r)
            rows.extend(r)
    _write_csv(d / "map.csv", ["step", "strategy", "target", "class", "AP", "mAP"], rows)
    _write_csv(d / "map_table.csv", ["step"] + state.targets,
               [[rec.step] + [_fmt(rec.maps[t]) for t in state.targets] for rec in state.steps])
    f = state.forgetting()
    _write_csv(d / "forgetting.csv", ["strategy", "target", "learned_at_step", "mAP_at_step", "mAP_final", "forgetting"],
               [[state.strategy, t, state.targets.index(t) + 1,
                 _fmt(state.steps[state.targets.index(t) + 1].maps[t]),
                 _fmt(state.steps[-1].maps[t]), _fmt(v)] for t, v in f.items()])
    (d / "access_log.tsv").write_text("step\tpurpose\tdomain\tsplit\tindex\n"
                                      + "".join(l + "\n" for l in state.access_log.lines()))
    (d / DONE).write_text("ok\n")


def expected_steps(strategy: str, n_targets: int) -> int:
    if strategy == "source_only":
        return 0
    return 1 if strategy in ("mixed", "sup_mixed") else n_targets


def run_experiment(cfg: ExperimentConfig, out=None, data=None, max_steps: int | None = None,
                   cache: dict | None = None) -> tuple[ExperimentState, Path]:
    """Run (or resume) ``cfg`` under ``out``; returns the state and run directory."""
    d = run_dir(cfg, out)
    text = dumps(cfg)
    if (d / "config.ini").exists() and (d / "config.ini").read_text() != text:
        raise ValueError(f"{d} holds a run with a different config; choose another --out")
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.ini").write_text(text)
    (d / "manifest.txt").write_text(
        f"experiment_id={experiment_id(cfg)}\ncode_version={__version__}\n"
        f"config_sha256={_config_digest(text)}\nstrategy={cfg.strategy}\nseed={cfg.seed}\n")
    source, targets = data if data is not None else load_data(cfg)
    start = _load_steps(d, cfg)
    if start is not None:
        start.targets = [targets[i].name for i in (cfg.order or range(len(targets)))]
        log.info("resuming %s after step %d", d, start.current_step)
    if (d / DONE).exists():
        (d / DONE).unlink()

    def persist(state):
        _persist_step(d, state, state.steps[-1])

    state = run_strategy(cfg.strategy, source, targets, cfg.hyper(), order=cfg.order,
                         start_state=start, on_step=persist, max_steps=max_steps, cache=cache)
    if state.current_step == expected_steps(cfg.strategy, len(targets)):
        _finalize(d, state)
    return state, d


def read_map_table(d) -> tuple[list[str], list[dict]]:
    with (Path(d) / "map_table.csv").open() as f:
        r = csv.DictReader(f)
        rows = [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in r]
        return [c for c in r.fieldnames if c != "step"], rows


def read_forgetting(d) -> dict[str, float]:
    p = Path(d) / "forgetting.csv"
    if not p.exists():
        return {}
    with p.open() as f:
        return {r["target"]: float(r["forgetting"]) for r in csv.DictReader(f)}


# -- sweeps ----------------------------------------------------------------------

def sweep_values(cfg: ExperimentConfig, axis: str, values=None) -> list:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if values is not None:
        return list(values)
    if axis == "alpha":
        return list(ALPHA_GRID)
    if axis == "order":
        return list(itertools.permutations(range(len(cfg.targets))))
    if axis == "seed":
        return [0, 1, 2]
    from .dtm import VARIANTS
    return list(VARIANTS)


def sweep_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "alpha":
        return cfg.with_(train={**cfg.train, "alpha": float(value)})
    if axis == "order":
        return cfg.with_(order=tuple(value))
    if axis == "seed":
        return cfg.with_(seed=int(value))
    return cfg.with_(dtm_variant=str(value))


@dataclass
class SweepRow:
    axis: str
    value: str
    status: str
    experiment_id: str
    final: dict
    mean_map: float
    forgetting: dict


def _value_str(v) -> str:
    return ",".join(str(i) for i in v) if isinstance(v, tuple) else str(v)


def run_sweep(cfg: ExperimentConfig, axis: str, values=None, out=None, data=None,
              cache: dict | None = None) -> tuple[list[SweepRow], Path]:
    """Run one experiment per value of ``axis``; failures are recorded, not raised."""
    vals = sweep_values(cfg, axis, values)
    base = Path(out if out is not None else cfg.out) / f"sweep_{axis}"
    data = data if data is not None else load_data(cfg)
    cache = {} if cache is None else cache
    rows = []
    for v in vals:
        vs = _value_str(v)
        run_id = f"{axis}={vs}"
        try:
            sub = sweep_config(cfg, axis, v)
            run_id = experiment_id(sub)
            state, _ = run_experiment(sub, out=base / vs.replace(",", "-"), data=data, cache=cache)
            final = state.final_maps()
            rows.append(SweepRow(axis, vs, "ok", run_id, final,
                                 float(sum(final.values()) / len(final)), state.forgetting()))
        except (DivergenceError, ValueError, RuntimeError, OSError) as e:
            log.error("sweep %s=%s failed: %s", axis, vs, e)
            rows.append(SweepRow(axis, vs, f"failed: {e}", run_id, {}, float("nan"), {}))
    names = [data[1][i].name for i in (cfg.order or range(len(data[1])))] if axis != "order" else \
        [t.name for t in data[1]]
    base.mkdir(parents=True, exist_ok=True)
    header = ["axis", "value", "status", "experiment_id"] + [f"mAP_{n}" for n in names] + ["mean_mAP"] + \
        [f"F_{n}" for n in names]
    _write_csv(base.parent / f"sweep_{axis}.csv", header,
               [[r.axis, r.value, r.status, r.experiment_id] + [_fmt(r.final.get(n, float("nan"))) for n in names]
                + [_fmt(r.mean_map)] + [_fmt(r.forgetting.get(n, float("nan"))) for n in names] for r in rows])
    (base.parent / f"sweep_{axis}.md").write_text(sweep_markdown(rows, names))
    return rows, base.parent / f"sweep_{axis}.csv"


def sweep_markdown(rows: list[SweepRow], names: list[str]) -> str:
    axis = rows[0].axis if rows else "value"
    lines = [f"| {axis} | " + " | ".join(names) + " | mean |",
             "|" + "---|" * (len(names) + 2)]
    for r in rows:
        cells = [f"{100 * r.final[n]:.1f}" if n in r.final else "-" for n in names]
        mean = "-" if math.isnan(r.mean_map) else f"{100 * r.mean_map:.1f}"
        lines.append(f"| {r.value} | " + " | ".join(cells) + f" | {mean} |")
    ok = [r.mean_map for r in rows if r.status == "ok"]
    if len(ok) > 1:
        lines.append("")
        lines.append(f"range of mean mAP: {100 * (max(ok) - min(ok)):.2f} points over {len(ok)} runs")
    return "\n".join(lines) + "\n"


# -- re-evaluation ---------------------------------------------------------------

def evaluate_checkpoint(checkpoint_dir, domain_dir, verify: bool = True):
    det, _, _, meta = load_checkpoint(checkpoint_dir)
    ds = load_domain_dataset(domain_dir, verify=verify)
    return map_over_dataset(det, ds), meta, ds.name
