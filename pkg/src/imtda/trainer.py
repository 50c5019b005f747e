"""Incremental multi-target adaptation strategies and their schedules.

Every strategy starts from a detector pre-trained on the labeled source
(step 0) and walks the ordered target list. ``mtda_dtm`` trains a fresh
domain transfer module after each completed step and feeds its outputs as
pseudo-target samples into the next step.
"""

from __future__ import annotations

import copy
import itertools
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .adversarial import DiscriminatorSet
from .detector import Detector
from .dtm import DTM, train_dtm
from .evaluation.diagnostics import map_over_dataset
from .seeding import sub_seed
from .training import (AccessLog, DAPhase, Schedule, SupervisedPhase, run_phase,
                       schedule_from)

log = logging.getLogger(__name__)

STRATEGIES = ("source_only", "uft", "uft_prev", "mixed", "only_da", "incr_mtda_kd",
              "mtda_dtm", "sup_only", "sup_ft", "sup_mixed")
SUPERVISED = ("sup_only", "sup_ft", "sup_mixed")
# strategies that must never touch earlier targets' images
NO_RETENTION = ("uft", "incr_mtda_kd", "mtda_dtm")
# strategies whose first adaptation step is plain single-target DA
STDA_FIRST = ("uft", "uft_prev", "incr_mtda_kd", "mtda_dtm")


@dataclass
class HyperParams:
    lam: float = 1.0
    alpha: float = 1.0
    lr_initial: float = 1e-3
    lr_decayed: float = 1e-4
    iters_per_phase: int = 1500
    decay_point: float = 5 / 7
    seed: int = 0
    l_c_kind: str = "focal"
    kd_weight: float = 1.0
    momentum: float = 0.9
    later_lr_scale: float = 0.1
    grl_lambda: float = 1.0
    pretrain_iters: int = 4000
    pretrain_lr: float = 0.01
    dtm_iters: int = 300
    dtm_lr: float = 0.01
    dtm_variant: str = "original"
    dtm_trained: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lam and alpha must be non-negative")
        if min(self.lr_initial, self.lr_decayed, self.pretrain_lr, self.dtm_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay_point <= 1:
            raise ValueError("decay_point must lie in (0, 1]")
        if self.l_c_kind not in ("focal", "cross_entropy"):
            raise ValueError("l_c_kind must be 'focal' or 'cross_entropy'")

    def with_(self, **kw) -> "HyperParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class Strategy:
    id: str
    hyper: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if self.id not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.id!r}")


def make_schedule(hyper: HyperParams, phase_index: int) -> Schedule:
    """Learning-rate plan for phase ``phase_index``.

    Phase 0 is source pre-training, phase 1 the first adaptation, later
    phases run at ``later_lr_scale`` times the phase-1 rates. Within a phase
    the rate drops by ``lr_decayed / lr_initial`` at ``decay_point``.
    """
    decay = hyper.lr_decayed / hyper.lr_initial
    if phase_index == 0:
        return schedule_from(hyper.pretrain_iters, hyper.pretrain_lr, decay,
                             hyper.decay_point, hyper.momentum)
    lr = hyper.lr_initial if phase_index == 1 else hyper.lr_initial * hyper.later_lr_scale
    return schedule_from(hyper.iters_per_phase, lr, decay, hyper.decay_point, hyper.momentum)


def permute_targets(targets: Sequence, order: Sequence[int]) -> list:
    order = list(order)
    if sorted(order) != list(range(len(targets))):
        raise ValueError(f"{order} is not a permutation of 0..{len(targets) - 1}")
    return [targets[i] for i in order]


def all_orders(n: int) -> list[tuple[int, ...]]:
    return list(itertools.permutations(range(n)))


# -- state -------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    det_state: dict
    disc_state: dict | None
    dtm_state: dict | None
    maps: dict[str, float]
    reports: dict = field(default_factory=dict, repr=False)
    det_states: dict | None = None  # only_da / sup_only: one detector per target

    def detector(self, target: str | None = None) -> Detector:
        det = Detector()
        state = self.det_states.get(target, self.det_state) if (self.det_states and target) else self.det_state
        det.load_state_dict(state)
        return det


@dataclass
class ExperimentState:
    strategy: str
    hyper: HyperParams
    targets: list[str]
    order: list[int] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    access_log: AccessLog = field(default_factory=AccessLog)

    @property
    def current_step(self) -> int:
        return self.steps[-1].step if self.steps else -1

    @property
    def experiment_id(self) -> str:
        order = "-".join(str(i) for i in self.order) if self.order else "natural"
        return f"{self.strategy}_seed{self.hyper.seed}_order{order}"

    def map_table(self) -> list[dict]:
        return [dict(step=r.step, **r.maps) for r in self.steps]

    def final_maps(self) -> dict[str, float]:
        return dict(self.steps[-1].maps)

    def mean_final_map(self) -> float:
        return float(np.mean(list(self.steps[-1].maps.values())))

    def forgetting(self) -> dict[str, float]:
        """Drop in mAP of each non-final target between its own step and the end."""
        if not self.steps or self.steps[-1].step == 0:
            return {}
        by_step = {r.step: r.maps for r in self.steps}
        last = self.steps[-1].maps
        out = {}
        for j, name in enumerate(self.targets[:-1], start=1):
            if j in by_step:
                out[name] = by_step[j][name] - last[name]
        return out

    def dtm(self, step: int | None = None) -> DTM | None:
        rec = self.steps[-1] if step is None else next(r for r in self.steps if r.step == step)
        if rec.dtm_state is None:
            return None
        g = DTM(self.hyper.dtm_variant)
        g.load_state_dict(rec.dtm_state)
        return g


def _state(m: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in m.state_dict().items()}


def _load(m: torch.nn.Module, state: dict) -> torch.nn.Module:
    m.load_state_dict(state)
    return m


# -- steps -------------------------------------------------------------------

def _memo(cache: dict | None, key, access_log: AccessLog | None, fn):
    """Run ``fn`` once per ``key``; replays the recorded dataset reads on a hit.

    ``fn`` returns a tuple of modules; the cache keeps their state dicts.
    """
    if cache is not None and key in cache:
        states, records = cache[key]
        if access_log is not None:
            access_log.records.extend(copy.deepcopy(records))
        return states, True
    mark = len(access_log.records) if access_log is not None else 0
    states = tuple(_state(m) for m in fn())
    if cache is not None:
        recs = copy.deepcopy(access_log.records[mark:]) if access_log is not None else []
        cache[key] = (states, recs)
    return states, False


def _data_key(*datasets) -> tuple:
    return tuple((repr(d.spec), len(d.train_images), len(d.eval)) for d in datasets)


def pretrain_source(source, hyper: HyperParams, access_log: AccessLog | None = None,
                    cache: dict | None = None) -> tuple[Detector, DiscriminatorSet]:
    """Supervised source training of a fresh detector (the adaptation start)."""
    key = ("pretrain", _data_key(source), hyper.seed, hyper.pretrain_iters, hyper.pretrain_lr,
           hyper.lr_decayed / hyper.lr_initial, hyper.decay_point, hyper.momentum, hyper.grl_lambda)

    def fit():
        det = Detector(seed=sub_seed(hyper.seed, "init", "detector"))
        phase = SupervisedPhase(det, [(source, source.reveal_train_labels())], seed=hyper.seed,
                                step=0, access_log=access_log)
        run_phase(phase, make_schedule(hyper, 0))
        return det, DiscriminatorSet(hyper.grl_lambda, seed=sub_seed(hyper.seed, "init", "disc"))

    (det_state, disc_state), _ = _memo(cache, key, access_log, fit)
    return _load(Detector(), det_state), _load(DiscriminatorSet(hyper.grl_lambda), disc_state)


def uft_step(det, disc, source, target, hyper: HyperParams, step: int,
             access_log: AccessLog | None = None,
             phase_index: int | None = None) -> tuple[Detector, DiscriminatorSet]:
    """Plain single-target adversarial step (fine-tunes copies of the inputs)."""
    det, disc = copy.deepcopy(det), copy.deepcopy(disc)
    phase = DAPhase(det=det, disc=disc, source=source, targets=[target], lam=hyper.lam,
                    kind=hyper.l_c_kind, seed=hyper.seed, step=step, access_log=access_log,
                    grl_lambda=hyper.grl_lambda)
    run_phase(phase, make_schedule(hyper, step if phase_index is None else phase_index))
    return det, disc


def ida_step(det, disc, g: DTM | None, source, target, hyper: HyperParams, step: int,
             access_log: AccessLog | None = None) -> tuple[Detector, DiscriminatorSet]:
    """Incremental step with pseudo-target samples from the frozen ``g``."""
    if step < 2:
        raise ValueError("incremental steps start at step 2")
    if g is None:
        raise ValueError("ida_step needs the DTM trained after the previous step")
    det, disc = copy.deepcopy(det), copy.deepcopy(disc)
    phase = DAPhase(det=det, disc=disc, source=source, targets=[target], lam=hyper.lam,
                    kind=hyper.l_c_kind, seed=hyper.seed, step=step, access_log=access_log,
                    dtm=g, alpha=hyper.alpha, grl_lambda=hyper.grl_lambda)
    run_phase(phase, make_schedule(hyper, step))
    return det, disc


def kd_step(det, disc, source, target, hyper: HyperParams, step: int,
            access_log: AccessLog | None = None):
    teacher = copy.deepcopy(det)
    det, disc = copy.deepcopy(det), copy.deepcopy(disc)
    phase = DAPhase(det=det, disc=disc, source=source, targets=[target], lam=hyper.lam,
                    kind=hyper.l_c_kind, seed=hyper.seed, step=step, access_log=access_log,
                    teacher=teacher, kd_weight=hyper.kd_weight, grl_lambda=hyper.grl_lambda)
    run_phase(phase, make_schedule(hyper, step))
    return det, disc


def make_dtm(det, disc, source, hyper: HyperParams, step: int,
             access_log: AccessLog | None = None) -> DTM:
    seed = sub_seed(hyper.seed, "dtm", step)
    if not hyper.dtm_trained:
        return DTM(hyper.dtm_variant, seed=seed)
    return train_dtm(det, disc, source, iterations=hyper.dtm_iters, lr=hyper.dtm_lr,
                     momentum=hyper.momentum, variant=hyper.dtm_variant, seed=seed,
                     kind=hyper.l_c_kind, step=step, access_log=access_log)


def _supervised(det, pools, hyper, step, access_log, phase_index):
    det = copy.deepcopy(det)
    run_phase(SupervisedPhase(det, pools, seed=hyper.seed, step=step, access_log=access_log),
              make_schedule(hyper, phase_index))
    return det


# -- orchestration -------------------------------------------------------------

def evaluate_all(det_for: Callable[[str], Detector], targets, access_log: AccessLog | None,
                 step: int) -> tuple[dict[str, float], dict]:
    maps, reports = {}, {}
    for t in targets:
        rep = map_over_dataset(det_for(t.name), t, access_log=access_log, step=step)
        maps[t.name] = rep.mAP
        reports[t.name] = rep
    return maps, reports


def _check_labels(strategy: str, source, targets) -> None:
    if not source.labeled:
        raise ValueError("source domain must be labeled")
    names = [t.name for t in targets]
    if len(set(names)) != len(names):
        raise ValueError(f"target names must be unique, got {names}")
    if strategy not in SUPERVISED and any(t.labeled for t in targets):
        raise ValueError(f"strategy {strategy!r} is unsupervised but a target is labeled")


def run_strategy(strategy, source, targets: Sequence, hyper: HyperParams | None = None,
                 order: Sequence[int] | None = None, start_state: ExperimentState | None = None,
                 on_step: Callable[[ExperimentState], None] | None = None,
                 max_steps: int | None = None, cache: dict | None = None) -> ExperimentState:
    """Run ``strategy`` over ``targets`` and record per-step mAP on every target.

    ``start_state`` resumes after its last completed step. ``max_steps``
    stops early (used to emulate interruption). ``cache`` shares source
    pre-training between runs with identical settings.
    """
    if isinstance(strategy, Strategy):
        hyper = hyper or strategy.hyper
        strategy = strategy.id
    Strategy(strategy)
    hyper = hyper or HyperParams()
    if order is not None:
        targets = permute_targets(targets, order)
    targets = list(targets)
    _check_labels(strategy, source, targets)
    names = [t.name for t in targets]

    if start_state is not None:
        if start_state.targets != names:
            raise ValueError("start_state was recorded for a different target order")
        state = ExperimentState(strategy, hyper, names, list(order or start_state.order),
                                list(start_state.steps), start_state.access_log)
    else:
        state = ExperimentState(strategy, hyper, names, list(order or range(len(targets))))
    alog = state.access_log

    def emit(rec: StepRecord):
        state.steps.append(rec)
        log.info("%s step %d: %s", state.experiment_id, rec.step,
                 ", ".join(f"{k}={v:.3f}" for k, v in rec.maps.items()))
        if on_step is not None:
            on_step(state)

    def stop(i):
        return max_steps is not None and i > max_steps

    # step 0: pre-trained source model
    if not state.steps:
        det, disc = pretrain_source(source, hyper, alog, cache)
        maps, reps = evaluate_all(lambda _: det, targets, alog, 0)
        emit(StepRecord(0, _state(det), _state(disc), None, maps, reps))
    base = state.steps[0]
    if strategy == "source_only":
        return state

    n_done = len(state.steps) - 1
    det = _load(Detector(), state.steps[-1].det_state)
    disc = _load(DiscriminatorSet(hyper.grl_lambda), state.steps[-1].disc_state)
    per_target: dict[str, dict] = dict(state.steps[-1].det_states or {})

    if strategy in ("mixed", "sup_mixed"):
        if n_done == 0 and not stop(1):
            if strategy == "mixed":
                phase = DAPhase(det=det, disc=disc, source=source, targets=targets, lam=hyper.lam,
                                kind=hyper.l_c_kind, seed=hyper.seed, step=1, access_log=alog,
                                grl_lambda=hyper.grl_lambda)
                run_phase(phase, make_schedule(hyper, 1))
            else:
                det = _supervised(det, [(t, t.reveal_train_labels()) for t in targets],
                                  hyper, 1, alog, 1)
            maps, reps = evaluate_all(lambda _: det, targets, alog, 1)
            emit(StepRecord(1, _state(det), _state(disc), None, maps, reps))
        return state

    g = state.dtm() if strategy == "mtda_dtm" and n_done >= 1 else None
    for i in range(n_done + 1, len(targets) + 1):
        if stop(i):
            break
        tgt = targets[i - 1]
        dtm_state = None
        if i == 1 and strategy in STDA_FIRST:
            # first step is the same single-target DA for all of these
            step1 = replace(hyper, alpha=0.0, kd_weight=0.0, dtm_iters=0, dtm_lr=1.0,
                            dtm_variant="original", dtm_trained=True)
            key = ("stda", _data_key(source, tgt), repr(step1))
            (ds, cs), _ = _memo(cache, key, alog, lambda: uft_step(det, disc, source, tgt, hyper, 1, alog))
            det = _load(Detector(), ds)
            disc = _load(DiscriminatorSet(hyper.grl_lambda), cs)
        elif strategy == "uft":
            det, disc = uft_step(det, disc, source, tgt, hyper, i, alog)
        elif strategy == "uft_prev":
            pooled = targets[:i]
            det, disc = copy.deepcopy(det), copy.deepcopy(disc)
            phase = DAPhase(det=det, disc=disc, source=source, targets=pooled, lam=hyper.lam,
                            kind=hyper.l_c_kind, seed=hyper.seed, step=i, access_log=alog,
                            grl_lambda=hyper.grl_lambda)
            run_phase(phase, make_schedule(hyper, i))
        elif strategy == "incr_mtda_kd":
            det, disc = kd_step(det, disc, source, tgt, hyper, i, alog)
        elif strategy == "mtda_dtm":
            det, disc = ida_step(det, disc, g, source, tgt, hyper, i, alog)
        elif strategy == "only_da":
            d0 = _load(Detector(), base.det_state)
            c0 = _load(DiscriminatorSet(hyper.grl_lambda), base.disc_state)
            det, disc = uft_step(d0, c0, source, tgt, hyper, i, alog, phase_index=1)
            per_target[tgt.name] = _state(det)
        elif strategy == "sup_ft":
            det = _supervised(det, [(tgt, tgt.reveal_train_labels())], hyper, i, alog, i)
        elif strategy == "sup_only":
            d0 = _load(Detector(), base.det_state)
            det = _supervised(d0, [(tgt, tgt.reveal_train_labels())], hyper, i, alog, 1)
            per_target[tgt.name] = _state(det)
        if strategy == "mtda_dtm":
            if i == 1:
                dkey = ("dtm", key, hyper.dtm_iters, hyper.dtm_lr, hyper.dtm_variant, hyper.dtm_trained)
                (dtm_state,), _ = _memo(cache, dkey, alog, lambda: (make_dtm(det, disc, source, hyper, 1, alog),))
                g = _load(DTM(hyper.dtm_variant), dtm_state)
                for p in g.parameters():
                    p.requires_grad_(False)
            else:
                g = make_dtm(det, disc, source, hyper, i, alog)
                dtm_state = _state(g)

        if strategy in ("only_da", "sup_only"):
            snapshot = {k: v for k, v in per_target.items()}

            def det_for(name, _snap=snapshot):
                return _load(Detector(), _snap.get(name, base.det_state))
            maps, reps = evaluate_all(det_for, targets, alog, i)
            emit(StepRecord(i, _state(det), _state(disc), None, maps, reps, det_states=snapshot))
        else:
            maps, reps = evaluate_all(lambda _: det, targets, alog, i)
            emit(StepRecord(i, _state(det), _state(disc), dtm_state, maps, reps))
    return state


def retention_violations(state: ExperimentState) -> list[str]:
    """Training reads of earlier targets' images during later steps."""
    out = []
    for r in state.access_log.records:
        if r.purpose == "eval" or r.step <= 1:
            continue
        pos = state.targets.index(r.domain) + 1 if r.domain in state.targets else None
        if pos is not None and pos < r.step:
            out.append(f"step {r.step} read {r.domain}/{r.split}/{r.index} ({r.purpose})")
    return out


def hyper_dict(h: HyperParams) -> dict:
    return asdict(h)


def hyper_fields() -> list[str]:
    return [f.name for f in fields(HyperParams)]
