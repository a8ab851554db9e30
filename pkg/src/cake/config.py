"""Run configuration: INI files checked against the shipped schema.

Values are resolved in three layers (schema default, config file,
``--section.key=value`` overrides) and every field is validated before a
command starts any work.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .data import default_data_dir
from .errors import CakeError, ConfigError
from .losses import LossWeights
from .models import Network, lenet5_new, mlp_new
from .synthesis import ExtractionConfig
from .training import TrainConfig

DATASETS = {"two_moons": ((2,), 2), "mnist": ((1, 32, 32), 10)}


@dataclass(frozen=True)
class SchemaField:
    type: str
    default: str
    doc: str


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), empty_lines_in_values=False)


def load_schema() -> dict[str, dict[str, SchemaField]]:
    text = resources.files("cake").joinpath("schema.ini").read_text(encoding="utf-8")
    cp = _parser()
    cp.read_string(text, source="schema.ini")
    schema: dict[str, dict[str, SchemaField]] = {}
    for section in cp.sections():
        schema[section] = {}
        for key, spec in cp.items(section):
            typ, default, doc = (s.strip() for s in spec.split("|", 2))
            schema[section][key] = SchemaField(typ, default, doc)
    return schema


def _parse(f: SchemaField, raw: str, where: str) -> Any:
    raw = raw.strip()
    typ = f.type
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ in ("str", "path"):
            return raw
        if typ in ("ints", "floats"):
            conv = int if typ == "ints" else float
            return tuple(conv(p) for p in raw.split(",") if p.strip()) if raw else ()
        if typ.startswith("choice:"):
            options = typ[len("choice:") :].split("/")
            if raw not in options:
                raise ConfigError(f"{where}: {raw!r} is not one of {', '.join(options)}")
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ}") from None
    raise ConfigError(f"schema error: unknown type {typ!r} for {where}")


def parse_override(arg: str) -> tuple[str, str, str]:
    """Split ``--section.key=value`` (leading dashes optional)."""
    body = arg.lstrip("-")
    if "=" not in body or "." not in body.split("=", 1)[0]:
        raise ConfigError(f"override {arg!r} must look like --section.key=value")
    name, value = body.split("=", 1)
    section, key = name.split(".", 1)
    return section, key.lower(), value


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    hidden: tuple[int, ...]

    def build(self, input_shape: Sequence[int], num_classes: int, rng: np.random.Generator) -> Network:
        if self.arch == "mlp":
            dim = int(np.prod(input_shape))
            return mlp_new(dim, list(self.hidden), num_classes, rng, input_shape=input_shape)
        if tuple(input_shape) != (1, 32, 32):
            raise ConfigError(f"{self.arch} needs 1x32x32 inputs, dataset gives {tuple(input_shape)}")
        return lenet5_new(self.arch == "lenet5_half", rng, num_classes)


@dataclass(frozen=True)
class RunConfig:
    dataset: str
    seed: int
    data_dir: str
    out_dir: str
    n_train: int
    n_test: int
    noise_std: float
    teacher: ModelSpec
    student: ModelSpec
    teacher_train: TrainConfig
    student_train: TrainConfig
    synthesis: ExtractionConfig
    paths: dict[str, str]
    ablate_seeds: tuple[int, ...]
    baseline_fixed_step: bool
    reuse_teacher: bool
    bounds: tuple[float, float, float, float]
    resolution: int
    values: dict[str, dict[str, Any]] = field(default_factory=dict, repr=False, compare=False)

    @property
    def weights(self) -> LossWeights:
        return self.synthesis.weights

    @property
    def input_shape(self) -> tuple[int, ...]:
        return DATASETS[self.dataset][0]

    @property
    def num_classes(self) -> int:
        return DATASETS[self.dataset][1]

    def path(self, name: str) -> Path:
        """Artifact path from ``[paths]``, falling back to ``out_dir``."""
        given = self.paths.get(name, "")
        if given:
            return Path(given)
        suffix = {"teacher": "teacher.ckpt", "synth": "synth.csyn", "student": "student.ckpt"}[name]
        return Path(self.out_dir) / suffix

    def data_root(self) -> Path:
        if self.data_dir:
            return Path(self.data_dir)
        return default_data_dir()

    def with_seed(self, seed: int) -> RunConfig:
        return load_config(None, [], base=self.values, extra={"run": {"seed": str(seed)}})

    def to_ini(self) -> str:
        lines = []
        for section, entries in self.values.items():
            lines.append(f"[{section}]")
            for k, v in entries.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _raw_layers(
    schema: dict[str, dict[str, SchemaField]],
    path: str | os.PathLike | None,
    overrides: Iterable[str],
) -> dict[str, dict[str, tuple[str, str]]]:
    """Raw string values with provenance, after checking every name."""
    raw = {s: {k: (f.default, "default") for k, f in keys.items()} for s, keys in schema.items()}

    def put(section: str, key: str, value: str, where: str) -> None:
        if section not in schema:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in schema[section]:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        raw[section][key] = (value, where)

    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cp = _parser()
        try:
            cp.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}".replace("\n", " ")) from None
        for section in cp.sections():
            if section not in schema:
                raise ConfigError(f"{p}: unknown section [{section}]")
            for key, value in cp.items(section):
                put(section, key, value, str(p))
    for arg in overrides:
        section, key, value = parse_override(arg)
        put(section, key, value, f"override {arg}")
    return raw


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Iterable[str] = (),
    *,
    base: dict[str, dict[str, Any]] | None = None,
    extra: dict[str, dict[str, str]] | None = None,
) -> RunConfig:
    """Build and validate a :class:`RunConfig`.

    ``base`` (already-typed values, e.g. from another config) replaces the
    schema defaults; ``extra`` is applied last, like overrides.
    """
    schema = load_schema()
    raw = _raw_layers(schema, path, overrides)
    values: dict[str, dict[str, Any]] = {}
    for section, keys in schema.items():
        values[section] = {}
        for key, f in keys.items():
            text, where = raw[section][key]
            if extra and key in extra.get(section, {}):
                text, where = extra[section][key], "internal"
            elif where == "default" and base is not None and key in base.get(section, {}):
                values[section][key] = base[section][key]
                continue
            values[section][key] = _parse(f, text, f"{section}.{key} ({where})")
    return _build(values)


def _train(v: dict[str, Any], section: str, seed: int) -> TrainConfig:
    try:
        return TrainConfig(**v, seed=seed)
    except CakeError as e:
        raise ConfigError(f"[{section}] {e}") from None


def _build(values: dict[str, dict[str, Any]]) -> RunConfig:
    run, data = values["run"], values["data"]
    dataset = run["dataset"]
    input_shape, num_classes = DATASETS[dataset]
    for key in ("n_train", "n_test"):
        n = data[key]
        if n <= 0 or n % 2:
            raise ConfigError(f"data.{key} must be a positive even count, got {n}")
    if data["noise_std"] < 0:
        raise ConfigError(f"data.noise_std must be >= 0, got {data['noise_std']}")

    models = {}
    for role in ("teacher", "student"):
        spec = ModelSpec(values[role]["arch"], tuple(values[role]["hidden"]))
        if spec.arch == "mlp" and (not spec.hidden or min(spec.hidden) <= 0):
            raise ConfigError(f"{role}.hidden must list positive widths, got {spec.hidden}")
        if spec.arch != "mlp" and dataset != "mnist":
            raise ConfigError(f"{role}.arch={spec.arch} needs image inputs, dataset is {dataset}")
        models[role] = spec

    try:
        weights = LossWeights(**values["weights"])
        synthesis = ExtractionConfig(
            **values["synthesis"], weights=weights, num_classes=num_classes, input_shape=input_shape
        )
    except CakeError as e:
        raise ConfigError(str(e)) from None

    ablate = values["ablate"]
    if not ablate["seeds"]:
        raise ConfigError("ablate.seeds must list at least one seed")
    bnd = values["boundary"]
    bounds = tuple(bnd["bounds"])
    if len(bounds) != 4 or not (bounds[0] < bounds[1] and bounds[2] < bounds[3]):
        raise ConfigError(f"boundary.bounds must be xmin,xmax,ymin,ymax with min < max, got {bounds}")
    if bnd["resolution"] < 1:
        raise ConfigError(f"boundary.resolution must be >= 1, got {bnd['resolution']}")

    return RunConfig(
        dataset=dataset,
        seed=run["seed"],
        data_dir=run["data_dir"],
        out_dir=run["out_dir"] or ".",
        n_train=data["n_train"],
        n_test=data["n_test"],
        noise_std=data["noise_std"],
        teacher=models["teacher"],
        student=models["student"],
        teacher_train=_train(values["teacher_train"], "teacher_train", run["seed"]),
        student_train=_train(values["student_train"], "student_train", run["seed"]),
        synthesis=synthesis,
        paths=dict(values["paths"]),
        ablate_seeds=tuple(ablate["seeds"]),
        baseline_fixed_step=ablate["baseline_fixed_step"],
        reuse_teacher=ablate["reuse_teacher"],
        bounds=bounds,  # type: ignore[arg-type]
        resolution=bnd["resolution"],
        values=values,
    )
