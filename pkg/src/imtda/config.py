"""INI experiment configuration.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#``
starts a comment line. Four sections are recognised::

    [data]   root, seed, n_train, n_eval, source, targets, param.<name>.<key>
    [model]  architecture, dtm_variant, l_c_kind
    [train]  every HyperParams field except seed, dtm_variant and l_c_kind
    [run]    strategy, order, seed, out

``targets`` is a comma list of domain kinds (``fog, noise``); a target may be
renamed with ``name:kind``. ``param.fog.a = 0.4, 0.7`` overrides a domain
parameter range. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .detector import ARCHITECTURE_ID
from .dtm import VARIANTS
from .seeding import sub_seed
from .synth_domains import KINDS, DomainSpec, DomainSpecError
from .trainer import STRATEGIES, HyperParams

_MODEL_KEYS = ("architecture", "dtm_variant", "l_c_kind")
_TRAIN_KEYS = tuple(f.name for f in fields(HyperParams) if f.name not in ("seed", "dtm_variant", "l_c_kind"))


class ConfigError(ValueError):
    """Malformed configuration; the message names the line and field."""


@dataclass(frozen=True)
class TargetEntry:
    name: str
    kind: str


@dataclass
class ExperimentConfig:
    data_root: str = "data"
    data_seed: int = 0
    n_train: int = 200
    n_eval: int = 100
    source: str = "source"
    targets: tuple[TargetEntry, ...] = (TargetEntry("fog", "fog"), TargetEntry("colorshift", "colorshift"),
                                        TargetEntry("noise", "noise"))
    domain_params: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)
    dtm_variant: str = "original"
    l_c_kind: str = "focal"
    train: dict[str, object] = field(default_factory=dict)
    strategy: str = "mtda_dtm"
    order: tuple[int, ...] | None = None
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"[run] strategy: unknown strategy {self.strategy!r}")
        if self.dtm_variant not in VARIANTS:
            raise ConfigError(f"[model] dtm_variant: unknown variant {self.dtm_variant!r}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("[data] n_train and n_eval must be positive")
        names = [self.source] + [t.name for t in self.targets]
        if len(set(names)) != len(names):
            raise ConfigError(f"[data] domain names must be unique: {names}")
        for t in self.targets:
            if t.kind not in KINDS or t.kind == "source":
                raise ConfigError(f"[data] targets: {t.kind!r} is not a target domain kind")
        if self.order is not None and sorted(self.order) != list(range(len(self.targets))):
            raise ConfigError(f"[run] order: {self.order} is not a permutation of the targets")
        for key in self.train:
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"[train] {key}: unknown key")
        try:
            self.hyper()
            self.domain_specs()
        except (ValueError, TypeError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    def hyper(self) -> HyperParams:
        return HyperParams(seed=self.seed, dtm_variant=self.dtm_variant, l_c_kind=self.l_c_kind,
                           **self.train)

    def domain_specs(self) -> tuple[DomainSpec, list[DomainSpec]]:
        def spec(name, kind):
            try:
                return DomainSpec(kind, self.domain_params.get(name, {}),
                                  seed=sub_seed(self.data_seed, "domain", name), name=name)
            except DomainSpecError as e:
                raise ConfigError(f"[data] param.{name}: {e}") from None
        return spec(self.source, "source"), [spec(t.name, t.kind) for t in self.targets]

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


# -- text round trip -------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(cfg: ExperimentConfig) -> str:
    lines = ["[data]", f"root = {cfg.data_root}", f"seed = {cfg.data_seed}",
             f"n_train = {cfg.n_train}", f"n_eval = {cfg.n_eval}", f"source = {cfg.source}",
             "targets = " + ", ".join(t.kind if t.name == t.kind else f"{t.name}:{t.kind}"
                                      for t in cfg.targets)]
    for name in sorted(cfg.domain_params):
        for key, (lo, hi) in sorted(cfg.domain_params[name].items()):
            lines.append(f"param.{name}.{key} = {lo!r}, {hi!r}")
    lines += ["", "[model]", f"architecture = {ARCHITECTURE_ID}",
              f"dtm_variant = {cfg.dtm_variant}", f"l_c_kind = {cfg.l_c_kind}", "", "[train]"]
    for key in _TRAIN_KEYS:
        if key in cfg.train:
            lines.append(f"{key} = {_fmt(cfg.train[key])}")
    lines += ["", "[run]", f"strategy = {cfg.strategy}"]
    if cfg.order is not None:
        lines.append("order = " + ",".join(str(i) for i in cfg.order))
    lines += [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    return "\n".join(lines) + "\n"


def _line_of(text: str, section: str, key: str | None) -> int:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
        elif current == section and key is not None and re.match(rf"{re.escape(key)}(\.[\w.]+)?\s*[=:]", s):
            return n
    return 0


def _coerce(key: str, raw: str):
    default = HyperParams.__dataclass_fields__[key].default
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_order(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x != "")
    except ValueError:
        raise ConfigError(f"order must be comma-separated integers, got {raw!r}") from None


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"line {getattr(e, 'lineno', '?')}: {e.message if hasattr(e, 'message') else e}") from None

    def err(section, key, msg):
        return ConfigError(f"line {_line_of(text, section, key)}: [{section}] {key or ''}: {msg}".replace(" : ", ": "))

    for sec in cp.sections():
        if sec not in ("data", "model", "train", "run"):
            raise err(sec, None, "unknown section")
    kw: dict = {}
    domain_params: dict = {}
    if cp.has_section("data"):
        for key, raw in cp["data"].items():
            try:
                if key == "root":
                    kw["data_root"] = raw
                elif key == "seed":
                    kw["data_seed"] = int(raw)
                elif key in ("n_train", "n_eval"):
                    kw[key] = int(raw)
                elif key == "source":
                    kw["source"] = raw
                elif key == "targets":
                    entries = []
                    for item in (x.strip() for x in raw.split(",") if x.strip()):
                        name, _, kind = item.partition(":")
                        entries.append(TargetEntry(name, kind or name))
                    kw["targets"] = tuple(entries)
                elif key.startswith("param."):
                    _, name, pkey = key.split(".", 2)
                    lo, hi = (float(v) for v in raw.split(","))
                    domain_params.setdefault(name, {})[pkey] = (lo, hi)
                else:
                    raise err("data", key, "unknown key")
            except ConfigError:
                raise
            except ValueError as e:
                raise err("data", key, str(e)) from None
    kw["domain_params"] = domain_params
    if cp.has_section("model"):
        for key, raw in cp["model"].items():
            if key not in _MODEL_KEYS:
                raise err("model", key, "unknown key")
            if key == "architecture":
                if raw != ARCHITECTURE_ID:
                    raise err("model", key, f"only {ARCHITECTURE_ID!r} is available")
            else:
                kw[key] = raw
    train = {}
    if cp.has_section("train"):
        for key, raw in cp["train"].items():
            if key not in _TRAIN_KEYS:
                raise err("train", key, "unknown key")
            try:
                train[key] = _coerce(key, raw)
            except ValueError as e:
                raise err("train", key, str(e)) from None
    kw["train"] = train
    if cp.has_section("run"):
        for key, raw in cp["run"].items():
            if key == "strategy":
                kw["strategy"] = raw
            elif key == "order":
                kw["order"] = parse_order(raw)
            elif key == "seed":
                try:
                    kw["seed"] = int(raw)
                except ValueError:
                    raise err("run", key, f"expected an integer, got {raw!r}") from None
            elif key == "out":
                kw["out"] = raw
            else:
                raise err("run", key, "unknown key")
    try:
        return ExperimentConfig(**kw)
    except ConfigError as e:
        m = re.match(r"\[(\w+)\] ([\w.]+)", str(e))
        if m:
            line = _line_of(text, m.group(1), m.group(2))
            raise ConfigError(f"line {line}: {e}") from None
        raise


def load(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    try:
        return loads(text)
    except ConfigError as e:
        raise ConfigError(f"{p}: {e}") from None


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
