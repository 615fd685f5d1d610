"""Run configuration: YAML key trees merged over the packaged defaults.

Errors carry the source name and line so a bad config points at itself.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, TypeVar

import yaml

from .benchmark import BenchGains, BenchModel, PacejkaCoeffs
from .experiments import Condition, HeadToHeadSetup, Vehicle
from .observer import GainSet, ObserverSettings, StageSchedule
from .rigidbody import LoadConfig, PointMass, VehicleParams
from .scenario import NoiseSettings, Scenario
from .twin import TwinConfig

T = TypeVar("T")
Path_ = tuple[Any, ...]

LOAD_NAMES = ("front_passenger", "rear_left", "rear_center", "rear_right", "trunk_left", "trunk_right")
LOAD_MASSES = (75.0, 80.0, 65.0, 75.0, 30.0, 30.0)

# subtrees whose keys are not fixed by the defaults
_FREE_FORM = {("twin",), ("scenario", "noise", "sigma"), ("tune", "bounds")}


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line


def _read_data(name: str) -> str:
    return resources.files("twinloop").joinpath("data", name).read_text(encoding="utf-8")


def _line_map(node: yaml.Node, path: Path_, out: dict[Path_, int]) -> None:
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out[path + (key.value,)] = key.start_mark.line + 1
            _line_map(value, path + (key.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            _line_map(value, path + (i,), out)


def parse_yaml(text: str, source: str = "<config>") -> tuple[Any, dict[Path_, int]]:
    """Parse YAML text; returns the data and a map from key path to 1-based line."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"YAML parse error: {problem}", source, line) from exc
    lines: dict[Path_, int] = {}
    if node is not None:
        _line_map(node, (), lines)
    return data, lines


def _check_keys(user: Any, defaults: Any, path: Path_, lines: dict[Path_, int], source: str) -> None:
    if path in _FREE_FORM or defaults is None or not isinstance(defaults, dict):
        return
    if not isinstance(user, dict):
        raise ConfigError(f"'{'.'.join(map(str, path))}' must be a mapping", source, lines.get(path))
    for key, value in user.items():
        if key not in defaults:
            where = ".".join(map(str, path + (key,)))
            raise ConfigError(f"unknown key '{where}'", source, lines.get(path + (key,)))
        _check_keys(value, defaults[key], path + (key,), lines, source)


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def default_tree() -> dict:
    data, _ = parse_yaml(_read_data("defaults.yaml"), "defaults.yaml")
    return data


def fitted_tree() -> dict:
    data, _ = parse_yaml(_read_data("fitted.yaml"), "fitted.yaml")
    return data


@dataclass
class RunConfig:
    """Resolved configuration tree plus where each key came from."""

    tree: dict
    source: str = "<defaults>"
    lines: dict[Path_, int] = field(default_factory=dict)

    def line(self, *path: Any) -> int | None:
        p = tuple(path)
        while p:
            if p in self.lines:
                return self.lines[p]
            p = p[:-1]
        return None

    def get(self, *path: Any) -> Any:
        node: Any = self.tree
        for key in path:
            node = node[key]
        return node

    def build(self, path: Sequence[Any], factory: Callable[[], T]) -> T:
        """Run ``factory`` and turn value errors into a ConfigError at ``path``."""
        try:
            return factory()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
            raise ConfigError(f"{'.'.join(map(str, path))}: {msg}", self.source,
                              self._blame(tuple(path), str(msg))) from exc

    def _blame(self, path: Path_, message: str) -> int | None:
        # point at a child key named in the message when there is one
        children = [p for p in self.lines if len(p) == len(path) + 1 and p[:-1] == path]
        for child in children:
            name = str(child[-1])
            if name in message.replace("_", " ") or name in message:
                return self.lines[child]
        return self.line(*path)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return RunConfig(_merge(self.tree, overrides), self.source, self.lines)

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False)

    # -- typed views ------------------------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.build(("seed",), lambda: int(self.tree["seed"]))

    def base_vehicle(self) -> VehicleParams:
        def make() -> VehicleParams:
            b = dict(self.get("vehicle", "base"))
            b["cm"] = tuple(float(c) for c in b["cm"])
            return VehicleParams(**{k: (v if k == "cm" else float(v)) for k, v in b.items()})
        return self.build(("vehicle", "base"), make)

    def loads(self) -> LoadConfig:
        def make() -> LoadConfig:
            items = self.get("vehicle", "loads")
            if items is None:
                items = fitted_tree()["loads"]
            return LoadConfig(tuple(PointMass(float(i["mass"]), tuple(i["position"]), str(i.get("name", "")))
                                    for i in items))
        return self.build(("vehicle", "loads"), make)

    def twin_config(self) -> TwinConfig:
        return self.build(("twin",), lambda: TwinConfig.from_dict(self.get("twin")))

    def vehicle(self) -> Vehicle:
        return Vehicle(self.base_vehicle(), self.loads(), self.twin_config())

    def noise(self) -> NoiseSettings:
        def make() -> NoiseSettings:
            n = dict(self.get("scenario", "noise"))
            snr = n.get("snr")
            return NoiseSettings(snr=None if snr is None else float(snr),
                                 channels=tuple(n.get("channels", ())),
                                 sigma={k: float(v) for k, v in (n.get("sigma") or {}).items()},
                                 road_eps=float(n.get("road_eps", 0.0)))
        return self.build(("scenario", "noise"), make)

    def scenario(self, seed: int | None = None) -> Scenario:
        def make() -> Scenario:
            s = {k: v for k, v in self.get("scenario").items() if k != "noise"}
            num = {k: float(v) for k, v in s.items() if k != "kind"}
            return Scenario(kind=str(s["kind"]), seed=self.seed if seed is None else int(seed),
                            noise=self.noise(), loads=self.loads(), **num)
        return self.build(("scenario",), make)

    @property
    def target(self) -> str:
        return str(self.get("estimation", "target"))

    def gains(self) -> GainSet:
        return self.build(("estimation", "gains"), lambda: GainSet.from_dict(self.get("estimation", "gains")))

    def settings(self) -> ObserverSettings:
        def make() -> ObserverSettings:
            s = dict(self.get("estimation", "settings"))
            for key in ("cutoff_hz", "wdot_deadband"):
                if isinstance(s.get(key), list):
                    s[key] = tuple(float(v) for v in s[key])
            return ObserverSettings(**s)
        return self.build(("estimation", "settings"), make)

    def schedule(self) -> StageSchedule | None:
        items = self.get("estimation", "schedule")
        if items is None:
            return None
        return self.build(("estimation", "schedule"), lambda: StageSchedule.from_list(items))

    def initial(self) -> tuple[float, float, float, float]:
        def make() -> tuple[float, float, float, float]:
            i = self.get("estimation", "initial")
            return (float(i["dm"]), float(i["djxx"]), float(i["djyy"]), float(i["djzz"]))
        return self.build(("estimation", "initial"), make)

    def conditions(self) -> tuple[Condition, ...] | None:
        """None means one run using the scenario's own noise settings."""
        from .experiments import CONDITION_TABLES

        raw = self.get("estimation", "conditions")
        est = self.get("estimation")
        if raw is None:
            noise = self.noise()
            snr = None if noise.noiseless else noise.snr
            return (Condition("", snr, noise.road_eps, bool(est["correct_mass"]), bool(est["correct_cm"])),)
        if raw == "table":
            return self.build(("estimation", "target"), lambda: CONDITION_TABLES[self.target])

        def make() -> tuple[Condition, ...]:
            out = []
            for item in raw:
                snr = item.get("snr", 10.0)
                out.append(Condition(str(item.get("label", "")), None if snr is None else float(snr),
                                     float(item.get("road_eps", 0.0)),
                                     bool(item.get("correct_mass", True)),
                                     bool(item.get("correct_cm", True))))
            return tuple(out)
        return self.build(("estimation", "conditions"), make)

    def seeds(self) -> tuple[int, ...]:
        raw = self.get("estimation", "seeds")
        return (self.seed,) if raw is None else self.build(("estimation", "seeds"),
                                                            lambda: tuple(int(s) for s in raw))

    def bench_tires(self) -> PacejkaCoeffs:
        raw = self.get("benchmark", "tires")
        return self.build(("benchmark", "tires"),
                          lambda: PacejkaCoeffs.from_dict(fitted_tree()["tires"] if raw is None else raw))

    def bench_model(self) -> BenchModel:
        return BenchModel.from_twin(self.base_vehicle(), self.twin_config(), self.bench_tires())

    def bench_gains(self) -> BenchGains:
        return self.build(("benchmark", "gains"), lambda: BenchGains.from_dict(self.get("benchmark", "gains")))

    def head_to_head_setup(self) -> HeadToHeadSetup:
        def make() -> HeadToHeadSetup:
            t = self.get("tune")
            snr = self.noise().snr
            return HeadToHeadSetup(
                tuning_kind=str(t["tuning_kind"]), tuning_duration=float(t["tuning_duration"]),
                validation_kind=str(t["validation_kind"]),
                validation_duration=float(t["validation_duration"]),
                drag_scale=float(t["drag_scale"]), tire_stiffness_scale=float(t["tire_stiffness_scale"]),
                snr=None if snr is None or math.isinf(snr) else snr,
                initial_dm=float(t["initial_dm"]), iterations=int(t["iterations"]),
                n_seed=int(t["n_seed"]), seed=self.seed if t["seed"] is None else int(t["seed"]),
                jobs=int(t["jobs"]))
        return self.build(("tune",), make)

    def tune_bounds(self) -> dict[str, tuple[float, float]]:
        return self.build(("tune", "bounds"), lambda: {k: (float(v[0]), float(v[1]))
                                                       for k, v in self.get("tune", "bounds").items()})


def load_config(path: str | Path | None = None, text: str | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file (or ``text``), then ``overrides``; unknown keys are errors."""
    tree = default_tree()
    source, lines = "<defaults>", {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source) from exc
    elif text is not None:
        source = "<text>"
    if text is not None:
        user, lines = parse_yaml(text, source)
        if user is None:
            user = {}
        if not isinstance(user, dict):
            raise ConfigError("top level must be a mapping", source, 1)
        _check_keys(user, tree, (), lines, source)
        tree = _merge(tree, user)
    cfg = RunConfig(tree, source, lines)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def _base_from_defaults() -> VehicleParams:
    return RunConfig(default_tree()).base_vehicle()


BASE_VEHICLE = _base_from_defaults()


def default_loads() -> LoadConfig:
    return RunConfig(default_tree()).loads()
