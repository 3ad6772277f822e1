"""JSON run configuration: schema checks, defaults, and per-stage seeds."""

import json
import zlib
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any, Final

import numpy as np

from py_rce_detect.attacks import AttackConfig, AttackFamily
from py_rce_detect.classifier import TrainConfig
from py_rce_detect.detectors import DEFAULT_PERCENTILE, Metric, default_bandwidth
from py_rce_detect.evaluation import EPSILON_GRID
from py_rce_detect.exception import ConfigError
from py_rce_detect.factories import ARCHITECTURES, DATASETS
from py_rce_detect.network import Objective

DEFAULT_NOISE_EPSILON: Final = 0.04
WHITE_BOX_KAPPAS: Final = (0.0, 5.0)
DETECTION_ATTACKS: Final = (
    AttackFamily.FGSM,
    AttackFamily.BIM,
    AttackFamily.ILCM,
    AttackFamily.JSMA,
    AttackFamily.CW,
    AttackFamily.CW_HC,
)
CURVE_FAMILIES: Final = (AttackFamily.FGSM, AttackFamily.BIM, AttackFamily.ILCM, AttackFamily.JSMA)


class Subcommand(StrEnum):
    TRAIN = "train"
    ATTACK = "attack"
    DETECT = "detect"
    EVAL = "eval"
    VERIFY_THEORY = "verify-theory"


def stage_seed(seed: int, stage: str) -> int:
    """Seed for one pipeline stage, derived from the run seed and the stage name."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(stage.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


@dataclass(frozen=True, slots=True)
class DatasetSpec:
    name: str
    path: Path | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    synthetic_classes: int = 3
    synthetic_per_class: int = 100
    synthetic_dim: int = 16
    synthetic_separation: float = 1.0


@dataclass(frozen=True, slots=True)
class ModelSpec:
    architecture: str = "shallow-cnn"
    objective: Objective = Objective.CE
    checkpoint: Path | None = None


@dataclass(frozen=True, slots=True)
class DetectorConfig:
    metric: Metric = Metric.KDENSITY
    sigma2: float | None = None
    percentile: float = DEFAULT_PERCENTILE
    max_bank_size: int | None = None
    checkpoint: Path | None = None

    def bandwidth(self, objective: Objective) -> float:
        return self.sigma2 if self.sigma2 is not None else default_bandwidth(objective)


@dataclass(frozen=True, slots=True)
class EvalConfig:
    attacks: tuple[AttackFamily, ...] = DETECTION_ATTACKS
    metrics: tuple[Metric, ...] = (Metric.CONFIDENCE, Metric.NON_ME, Metric.KDENSITY)
    epsilons: tuple[float, ...] = EPSILON_GRID
    curve_families: tuple[AttackFamily, ...] = CURVE_FAMILIES
    cw_constants: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    white_box_kappas: tuple[float, ...] = WHITE_BOX_KAPPAS
    noise_epsilon: float = DEFAULT_NOISE_EPSILON
    limit: int = 200
    histogram_bins: int = 20
    substitute: Path | None = None


@dataclass(frozen=True, slots=True)
class VerifyConfig:
    geometries: int = 1000
    theorem2_trials: int = 10_000
    class_counts: tuple[int, ...] = (2, 3, 10)


@dataclass(frozen=True, slots=True)
class RunConfig:
    subcommand: Subcommand
    seed: int
    out: Path
    threads: int = 1
    dataset: DatasetSpec | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig | None = None
    attack_limit: int | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)


# ============================================================================
# Field readers
# ============================================================================

_MISSING: Final = object()


class _Section:
    """Typed access to one JSON object; every violation is appended to the shared error list."""

    def __init__(self, data: object, path: str, errors: list[str]) -> None:
        self._path = path
        self._errors = errors
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            errors.append(f"{path or '<root>'}: expected an object")
            data = {}
        self._data: Mapping[str, Any] = data
        self._seen: set[str] = set()

    def _name(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key

    def has(self, key: str) -> bool:
        return key in self._data

    def section(self, key: str) -> "_Section":
        self._seen.add(key)
        return _Section(self._data.get(key), self._name(key), self._errors)

    def error(self, key: str, message: str) -> None:
        self._errors.append(f"{self._name(key)}: {message}")

    def reject_unknown(self) -> None:
        for key in self._data:
            if key not in self._seen:
                self.error(key, "unknown key")

    def _read(self, key: str, default: Any, check: Callable[[Any], Any], expected: str) -> Any:
        self._seen.add(key)
        if key not in self._data or self._data[key] is None:
            if default is _MISSING:
                self.error(key, "required")
                return None
            return default
        try:
            return check(self._data[key])
        except (TypeError, ValueError):
            self.error(key, f"expected {expected}, got {self._data[key]!r}")
            return default if default is not _MISSING else None

    def integer(self, key: str, default: Any = _MISSING, *, minimum: int | None = None) -> Any:
        value = self._read(key, default, _as_int, "an integer")
        if isinstance(value, int) and minimum is not None and value < minimum:
            self.error(key, f"must be at least {minimum}")
        return value

    def number(self, key: str, default: Any = _MISSING, *, minimum: float | None = None) -> Any:
        value = self._read(key, default, _as_float, "a number")
        if isinstance(value, float) and minimum is not None and value < minimum:
            self.error(key, f"must be at least {minimum}")
        return value

    def boolean(self, key: str, default: Any = _MISSING) -> Any:
        return self._read(key, default, _as_bool, "a boolean")

    def string(self, key: str, default: Any = _MISSING) -> Any:
        return self._read(key, default, _as_str, "a string")

    def path(self, key: str, default: Any = _MISSING, *, must_exist: bool = False) -> Any:
        value = self._read(key, default, lambda v: Path(_as_str(v)), "a path")
        if must_exist and isinstance(value, Path) and not value.exists():
            self.error(key, f"{value} does not exist")
        return value

    def choice[E: StrEnum](self, key: str, enum: type[E], default: Any = _MISSING) -> Any:
        choices = ", ".join(member.value for member in enum)
        return self._read(key, default, enum, f"one of {choices}")

    def numbers(self, key: str, default: Any) -> Any:
        return self._read(key, default, lambda v: tuple(_as_float(x) for x in _as_list(v)), "a list of numbers")

    def integers(self, key: str, default: Any) -> Any:
        return self._read(key, default, lambda v: tuple(_as_int(x) for x in _as_list(v)), "a list of integers")

    def choices[E: StrEnum](self, key: str, enum: type[E], default: Any) -> Any:
        names = ", ".join(member.value for member in enum)
        return self._read(key, default, lambda v: tuple(enum(x) for x in _as_list(v)), f"a list drawn from {names}")


def _as_int(value: object) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError
    return value


def _as_float(value: object) -> float:
    if isinstance(value, bool) or not isinstance(value, int | float):
        raise TypeError
    return float(value)


def _as_bool(value: object) -> bool:
    if not isinstance(value, bool):
        raise TypeError
    return value


def _as_str(value: object) -> str:
    if not isinstance(value, str):
        raise TypeError
    return value


def _as_list(value: object) -> list[Any]:
    if not isinstance(value, list):
        raise TypeError
    return value


# ============================================================================
# Blocks
# ============================================================================


def _dataset(section: _Section) -> DatasetSpec | None:
    name = section.string("name")
    if name is not None and name not in DATASETS:
        section.error("name", f"expected one of {', '.join(DATASETS)}, got {name!r}")
    needs_files = name in {"mnist", "cifar10"}
    path = section.path("path", _MISSING if needs_files else None, must_exist=needs_files)
    spec = DatasetSpec(
        name=name or "",
        path=path,
        train_limit=section.integer("train_limit", None, minimum=1),
        test_limit=section.integer("test_limit", None, minimum=1),
        synthetic_classes=section.integer("synthetic_classes", 3, minimum=2),
        synthetic_per_class=section.integer("synthetic_per_class", 100, minimum=1),
        synthetic_dim=section.integer("synthetic_dim", 16, minimum=1),
        synthetic_separation=section.number("synthetic_separation", 1.0),
    )
    return spec if name is not None else None


def _model(section: _Section, *, needs_checkpoint: bool) -> ModelSpec:
    architecture = section.string("architecture", "shallow-cnn")
    if architecture not in ARCHITECTURES:
        section.error("architecture", f"expected one of {', '.join(ARCHITECTURES)}, got {architecture!r}")
    return ModelSpec(
        architecture=architecture,
        objective=section.choice("objective", Objective, Objective.CE),
        checkpoint=section.path("checkpoint", _MISSING if needs_checkpoint else None, must_exist=needs_checkpoint),
    )


def _train(section: _Section, objective: Objective, seed: int) -> TrainConfig:
    defaults = TrainConfig()
    values = {
        "batch_size": section.integer("batch_size", defaults.batch_size, minimum=1),
        "steps": section.integer("steps", defaults.steps, minimum=0),
        "lr_boundaries": section.integers("lr_boundaries", defaults.lr_boundaries),
        "lr_rates": section.numbers("lr_rates", defaults.lr_rates),
        "momentum": section.number("momentum", defaults.momentum, minimum=0.0),
        "weight_decay": section.number("weight_decay", defaults.weight_decay, minimum=0.0),
        "leak": section.number("leak", defaults.leak, minimum=0.0),
        "smoothing": section.number("smoothing", defaults.smoothing, minimum=0.0),
        "augment": section.boolean("augment", defaults.augment),
        "log_every": section.integer("log_every", defaults.log_every, minimum=1),
    }
    if len(values["lr_rates"]) != len(values["lr_boundaries"]) + 1:
        section.error("lr_rates", "needs exactly one more entry than lr_boundaries")
    if not 0.0 <= values["leak"] < 1.0:
        section.error("leak", "must lie in [0, 1)")
    try:
        return TrainConfig(objective=objective, seed=stage_seed(seed, "train"), **values)
    except (TypeError, ValueError) as e:
        section.error("", str(e))
        return TrainConfig(objective=objective)


def _attack(section: _Section, seed: int, *, required: bool) -> tuple[AttackConfig | None, int | None]:
    family = section.choice("family", AttackFamily, _MISSING if required else None)
    values = {
        "epsilon": section.number("epsilon", None, minimum=0.0),
        "iterations": section.integer("iterations", 10, minimum=1),
        "kappa": section.number("kappa", None, minimum=0.0),
        "step_size": section.number("step_size", 0.01),
        "search_rounds": section.integer("search_rounds", 9, minimum=1),
        "initial_c": section.number("initial_c", 0.01),
        "max_iterations": section.integer("max_iterations", 10000, minimum=1),
        "abort_early": section.boolean("abort_early", True),
        "jsma_offset": section.number("jsma_offset", 1.0),
        "max_pixels": section.integer("max_pixels", 100, minimum=1),
        "eta": section.number("eta", None),
        "chunk_size": section.integer("chunk_size", 16, minimum=1),
    }
    limit = section.integer("limit", None, minimum=1)
    if family is None:
        return None, limit
    if values["epsilon"] is None:
        values["epsilon"] = DEFAULT_NOISE_EPSILON if family is AttackFamily.RAND else 0.1
    try:
        return AttackConfig(family=family, seed=stage_seed(seed, "attack"), **values), limit
    except (TypeError, ValueError) as e:
        section.error("", str(e))
        return None, limit


def _detector(section: _Section, *, needs_checkpoint: bool) -> DetectorConfig:
    sigma2 = section.number("sigma2", None)
    if sigma2 is not None and sigma2 <= 0:
        section.error("sigma2", "must be positive")
    percentile = section.number("percentile", DEFAULT_PERCENTILE, minimum=0.0)
    if isinstance(percentile, float) and percentile >= 100.0:  # noqa: PLR2004
        section.error("percentile", "must be below 100")
    return DetectorConfig(
        metric=section.choice("metric", Metric, Metric.KDENSITY),
        sigma2=sigma2,
        percentile=percentile,
        max_bank_size=section.integer("max_bank_size", None, minimum=1),
        checkpoint=section.path(
            "checkpoint",
            _MISSING if needs_checkpoint else None,
            must_exist=needs_checkpoint or section.has("checkpoint"),
        ),
    )


def _eval(section: _Section) -> EvalConfig:
    defaults = EvalConfig()
    curve_families = section.choices("curve_families", AttackFamily, defaults.curve_families)
    for family in curve_families or ():
        if not family.sweeps_epsilon:
            section.error("curve_families", f"{family.value} has no perturbation size to sweep")
    return EvalConfig(
        attacks=section.choices("attacks", AttackFamily, defaults.attacks),
        metrics=section.choices("metrics", Metric, defaults.metrics),
        epsilons=section.numbers("epsilons", defaults.epsilons),
        curve_families=curve_families,
        cw_constants=section.numbers("cw_constants", defaults.cw_constants),
        white_box_kappas=section.numbers("white_box_kappas", defaults.white_box_kappas),
        noise_epsilon=section.number("noise_epsilon", defaults.noise_epsilon, minimum=0.0),
        limit=section.integer("limit", defaults.limit, minimum=1),
        histogram_bins=section.integer("histogram_bins", defaults.histogram_bins, minimum=1),
        substitute=section.path("substitute", None, must_exist=section.has("substitute")),
    )


def _verify(section: _Section) -> VerifyConfig:
    defaults = VerifyConfig()
    counts = section.integers("class_counts", defaults.class_counts)
    if any(count < 2 for count in counts):  # noqa: PLR2004
        section.error("class_counts", "every class count must be at least 2")
    return VerifyConfig(
        geometries=section.integer("geometries", defaults.geometries, minimum=1),
        theorem2_trials=section.integer("theorem2_trials", defaults.theorem2_trials, minimum=1),
        class_counts=counts,
    )


def validate_config(text: str, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Parse and check a JSON run configuration, reporting every violation at once."""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError([f"<root>: invalid JSON ({e.msg} at line {e.lineno})"]) from e
    if isinstance(data, dict) and overrides:
        data = {**data, **{key: value for key, value in overrides.items() if value is not None}}

    errors: list[str] = []
    root = _Section(data, "", errors)
    subcommand = root.choice("subcommand", Subcommand)
    needs_data = subcommand is not Subcommand.VERIFY_THEORY
    seed = root.integer("seed", _MISSING if needs_data else 0, minimum=0)
    out = root.path("out", Path("out"))
    threads = root.integer("threads", 1, minimum=1)
    dataset_section = root.section("dataset")
    dataset = _dataset(dataset_section) if needs_data and root.has("dataset") else None
    if needs_data and not root.has("dataset"):
        errors.append("dataset: required")

    seed_value = seed if isinstance(seed, int) else 0
    needs_model = subcommand in {Subcommand.ATTACK, Subcommand.DETECT, Subcommand.EVAL}
    sections = {name: root.section(name) for name in ("model", "train", "attack", "detector", "eval", "verify")}
    model = _model(sections["model"], needs_checkpoint=needs_model)
    train = _train(sections["train"], model.objective, seed_value)
    attack, attack_limit = _attack(sections["attack"], seed_value, required=subcommand is Subcommand.ATTACK)
    white_box = attack is not None and attack.family is AttackFamily.CW_WB and subcommand is Subcommand.ATTACK
    detector = _detector(sections["detector"], needs_checkpoint=white_box)
    evaluation = _eval(sections["eval"])
    verify = _verify(sections["verify"])

    root.reject_unknown()
    for section in sections.values():
        section.reject_unknown()
    if dataset is not None:
        dataset_section.reject_unknown()

    if errors:
        raise ConfigError(errors)
    return RunConfig(
        subcommand=subcommand,
        seed=seed,
        out=out,
        threads=threads,
        dataset=dataset,
        model=model,
        train=train,
        attack=attack,
        attack_limit=attack_limit,
        detector=detector,
        eval=evaluation,
        verify=verify,
    )
