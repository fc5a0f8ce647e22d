"""INI run configuration: one section per component, plus run-level settings.

Each section maps onto a config dataclass; keys are the dataclass field names
and tuples are written comma-separated. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .classifier import BaselineConfig, HeadConfig
from .datasets import SyntheticConfig
from .embeddings import GroupingPolicy
from .errors import ConfigError
from .moco import EncoderConfig, Stage1Config
from .pipeline import EvalConfig

SECTIONS = {
    "augment": AugmentConfig,
    "encoder": EncoderConfig,
    "stage1": Stage1Config,
    "grouping": GroupingPolicy,
    "head": HeadConfig,
    "baseline": BaselineConfig,
    "eval": EvalConfig,
}
# per-run seeds are injected by the CLI, never read from these sections
SEEDED = ("stage1", "grouping", "head", "baseline")


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    manifest: str | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    grouping: GroupingPolicy = field(default_factory=GroupingPolicy)
    head: HeadConfig = field(default_factory=HeadConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    balanced_per_class: int | None = None
    source: Path | None = None

    def validate(self) -> None:
        self.synthetic.validate()
        self.head.check_policy(self.grouping, self.encoder.output_dim)
        if not self.seeds:
            raise ConfigError("[run] seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"[run] seeds contain duplicates: {self.seeds}")

    def section_dict(self, name: str) -> dict:
        d = dataclasses.asdict(getattr(self, name))
        if name in SEEDED:
            d.pop("seed", None)
        return d


def _coerce(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in text.replace(",", " ").split())
    except (KeyError, ValueError):
        raise ConfigError(f"cannot read {key} = {text!r} as {type(default).__name__}") from None
    return text


def _build(cls, items: dict, where: str):
    defaults = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in items.items():
        if key not in defaults:
            raise ConfigError(f"[{where}] unknown key {key!r}; expected one of {sorted(defaults)}")
        f = defaults[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[key] = _coerce(default, text, f"[{where}] {key}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[{where}] {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] invalid values: {exc}") from None


def _synthetic(items: dict) -> SyntheticConfig:
    items = dict(items)
    counts = {}
    for split in ("train", "validation"):
        key = f"n_{split}_per_class"
        if key in items:
            counts[split] = _coerce(0, items.pop(key), f"[synthetic] {key}")
    cfg = _build(SyntheticConfig, items, "synthetic")
    if counts:
        cfg = dataclasses.replace(cfg, n_patients_per_class={**cfg.n_patients_per_class, **counts})
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate an INI run config (cross-section checks included)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep K and n_g case as written
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    known = set(SECTIONS) | {"synthetic", "data", "run"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}")

    kwargs: dict = {"source": path}
    if parser.has_section("synthetic"):
        kwargs["synthetic"] = _synthetic(dict(parser["synthetic"]))
    if parser.has_section("data"):
        data = dict(parser["data"])
        manifest = data.pop("manifest", "").strip()
        if data:
            raise ConfigError(f"[data] unknown key(s) {sorted(data)}")
        if manifest:
            kwargs["manifest"] = str((path.parent / manifest).resolve())
    for name, cls in SECTIONS.items():
        if parser.has_section(name):
            kwargs[name] = _build(cls, dict(parser[name]), name)

    # the baseline sees images the same way stage 1 does unless told otherwise
    if "augment" in kwargs:
        given = dict(parser["baseline"]) if parser.has_section("baseline") else {}
        aug = kwargs["augment"]
        inherit = {k: getattr(aug, k) for k in ("output_size", "mean", "std") if k not in given}
        kwargs["baseline"] = dataclasses.replace(kwargs.get("baseline", BaselineConfig()), **inherit)

    if parser.has_section("run"):
        run = dict(parser["run"])
        if "seeds" in run:
            kwargs["seeds"] = _coerce((0,), run.pop("seeds"), "[run] seeds")
        if "output_dir" in run:
            kwargs["output_dir"] = run.pop("output_dir").strip()
        if "balanced_per_class" in run:
            kwargs["balanced_per_class"] = _coerce(0, run.pop("balanced_per_class"), "[run] balanced_per_class")
        if run:
            raise ConfigError(f"[run] unknown key(s) {sorted(run)}")

    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def config_hash(*parts) -> str:
    """Short SHA-256 of a JSON rendering of ``parts``."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
