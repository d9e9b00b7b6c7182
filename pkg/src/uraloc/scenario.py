"""Declarative scenario files.

A scenario is a YAML document in which every physical quantity carries its
unit in the key name (``center_m``, ``cfo_hz``, ``snr_db``, ``orientation_deg``).
Angles stay in degrees on this type and are converted to radians when domain
objects are built.  Validation errors name the file and line.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .simulate import snr_to_noise_variance


class ScenarioError(ValueError):
    """Invalid scenario document; the message starts with ``file:line:``."""


# --- line-tracking YAML loading -------------------------------------------------


class _Map(dict):
    line: int = 0
    key_lines: dict


class _List(list):
    line: int = 0
    item_lines: list


def _build(node: yaml.Node, constructor: yaml.constructor.SafeConstructor):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = _Map()
        out.line, out.key_lines = line, {}
        for k, v in node.value:
            key = constructor.construct_object(k, deep=True)
            out[key] = _build(v, constructor)
            out.key_lines[key] = k.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        out = _List(_build(v, constructor) for v in node.value)
        out.line, out.item_lines = line, [v.start_mark.line + 1 for v in node.value]
        return out
    return constructor.construct_object(node, deep=True)


class _Reader:
    """Typed access to one mapping with file/line diagnostics."""

    def __init__(self, data: Any, where: str, source: str, line: int = 1):
        self.source = source
        self.where = where
        if not isinstance(data, dict):
            raise ScenarioError(f"{source}:{getattr(data, 'line', line)}: {where} must be a mapping")
        self.data = data
        self.line = getattr(data, "line", line)
        self.seen: set[str] = set()

    def line_of(self, key: str) -> int:
        return getattr(self.data, "key_lines", {}).get(key, self.line)

    def fail(self, key: str | None, msg: str):
        line = self.line if key is None else self.line_of(key)
        name = self.where if key is None else f"{self.where}.{key}"
        raise ScenarioError(f"{self.source}:{line}: {name}: {msg}")

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, kind, default=None, required: bool = False):
        self.seen.add(key)
        if key not in self.data or self.data[key] is None:
            if required:
                self.fail(None, f"missing required key {key!r}")
            return default
        try:
            return kind(self.data[key])
        except (TypeError, ValueError) as exc:
            self.fail(key, str(exc))

    def sub(self, key: str, required: bool = False) -> "_Reader | None":
        self.seen.add(key)
        if key not in self.data or self.data[key] is None:
            if required:
                self.fail(None, f"missing required block {key!r}")
            return None
        return _Reader(self.data[key], f"{self.where}.{key}", self.source, self.line_of(key))

    def items(self, key: str, required: bool = False) -> list["_Reader"]:
        self.seen.add(key)
        value = self.data.get(key)
        if value is None:
            if required:
                self.fail(None, f"missing required list {key!r}")
            return []
        if not isinstance(value, list):
            self.fail(key, "must be a list")
        lines = getattr(value, "item_lines", [self.line_of(key)] * len(value))
        return [_Reader(v, f"{self.where}.{key}[{i}]", self.source, n) for i, (v, n) in enumerate(zip(value, lines))]

    def done(self) -> None:
        extra = [k for k in self.data if k not in self.seen]
        if extra:
            self.fail(extra[0], "unknown key (physical quantities need a unit suffix such as _m, _deg, _hz, _db, _s)")


# --- converters -----------------------------------------------------------------


def _number(v) -> float:
    # YAML 1.1 reads exponents without a dot or sign (5e9) as strings
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            pass
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _integer(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _boolean(v) -> bool:
    if not isinstance(v, bool):
        raise ValueError(f"expected true or false, got {v!r}")
    return v


def _text(v) -> str:
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _vector(n: int | None = None, conv=_number):
    def parse(v):
        if not isinstance(v, list):
            raise ValueError(f"expected a list, got {v!r}")
        out = tuple(conv(x) for x in v)
        if n is not None and len(out) != n:
            raise ValueError(f"expected {n} values, got {len(out)}")
        return out

    return parse


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v

    return parse


def _positive(conv=_number):
    def parse(v):
        out = conv(v)
        if not out > 0:
            raise ValueError(f"must be positive, got {out}")
        return out

    return parse


def _nonnegative(v) -> float:
    out = _number(v)
    if out < 0:
        raise ValueError(f"must be nonnegative, got {out}")
    return out


def _range(v) -> tuple[float, float]:
    lo, hi = _vector(2)(v)
    if hi < lo:
        raise ValueError(f"range upper bound {hi} below lower bound {lo}")
    return lo, hi


# --- scenario types ---------------------------------------------------------------


@dataclass(frozen=True)
class ArrayBlock:
    array_id: str
    mx: int
    my: int
    spacing_m: float | None = None
    spacing_wavelengths: float | None = None
    center_m: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    groups: tuple[tuple[int, ...], ...] | None = None
    cpas: tuple[int, ...] | None = None


@dataclass(frozen=True)
class SourceBlock:
    position_m: tuple[float, float, float] | None = None
    direction_deg: tuple[float, float] | None = None
    power: float = 1.0
    coherence_group: str | None = None
    gain_phase_deg: float | None = None


@dataclass(frozen=True)
class ImpairmentBlock:
    mode: str = "ideal"
    snr_db: float | None = None
    pll_phases_deg: tuple[float, float, float] | None = None
    cable_delays_s: tuple[float, ...] | None = None
    cfo_hz: float = 0.0
    randomize: bool = False
    max_cfo_hz: float = 10e3
    max_cable_delay_s: float = 2e-9
    noise_variance: float = field(init=False, compare=False)

    def __post_init__(self) -> None:
        # the one place where dB becomes linear
        object.__setattr__(self, "noise_variance", 0.0 if self.snr_db is None else snr_to_noise_variance(self.snr_db))


@dataclass(frozen=True)
class ScheduleBlock:
    packets_per_group: int = 50
    packet_interval_s: float = 0.0005
    group_order: tuple[int, ...] | None = None


@dataclass(frozen=True)
class EstimatorBlock:
    methods: tuple[str, ...] = ("i-ssmusic",)
    smoothing: tuple[int, int] | None = None
    grid_step_deg: float = 0.2
    sources: int | None = None
    dimension: int | None = None
    refine: bool = True


@dataclass(frozen=True)
class LocatorBlock:
    methods: tuple[str, ...] = ("gp", "dpd")
    lsoi_radius_m: float = 0.1
    voxel_m: float = 0.005
    max_iters: int = 4
    model: str = "plane"
    polish: bool = True


@dataclass(frozen=True)
class MonteCarloBlock:
    trials: int = 1
    x_m: tuple[float, float] | None = None
    y_m: tuple[float, float] | None = None
    z_m: tuple[float, float] | None = None
    pitch_m: float = 0.2
    snr_db_range: tuple[float, float] | None = None


@dataclass(frozen=True)
class TrajectoryBlock:
    """Explicit ``waypoints_m``, or ``count`` points evenly spaced by arc length along ``vertices_m``."""

    waypoints_m: tuple[tuple[float, float, float], ...] | None = None
    vertices_m: tuple[tuple[float, float, float], ...] | None = None
    count: int | None = None
    window: int = 5

    def points(self) -> list[tuple[float, float, float]]:
        if self.waypoints_m is not None:
            return list(self.waypoints_m)
        verts = [tuple(v) for v in self.vertices_m]
        seg = [sum((b[i] - a[i]) ** 2 for i in range(3)) ** 0.5 for a, b in zip(verts, verts[1:])]
        total = sum(seg)
        out = []
        for k in range(self.count):
            s = total * k / (self.count - 1) if self.count > 1 else 0.0
            j = 0
            while j < len(seg) - 1 and s > seg[j]:
                s -= seg[j]
                j += 1
            f = s / seg[j] if seg[j] > 0 else 0.0
            out.append(tuple(verts[j][i] + f * (verts[j + 1][i] - verts[j][i]) for i in range(3)))
        return out


@dataclass(frozen=True)
class BenchBlock:
    repeats: int = 3
    stages: tuple[str, ...] = ("simulate", "calibrate", "aoa", "locate")


@dataclass(frozen=True)
class Scenario:
    name: str
    arrays: tuple[ArrayBlock, ...]
    sources: tuple[SourceBlock, ...]
    seed: int = 0
    frequency_hz: float = 5.2e9
    snapshots: int = 50
    propagation: str = "exact"
    impairments: ImpairmentBlock = ImpairmentBlock()
    schedule: ScheduleBlock = ScheduleBlock()
    estimator: EstimatorBlock = EstimatorBlock()
    locator: LocatorBlock = LocatorBlock()
    monte_carlo: MonteCarloBlock | None = None
    trajectory: TrajectoryBlock | None = None
    bench: BenchBlock | None = None


STAGES = ("simulate", "calibrate", "aoa", "locate", "track")


# --- parsing ----------------------------------------------------------------------


def _parse_array(r: _Reader, index: int) -> ArrayBlock:
    block = ArrayBlock(
        array_id=r.get("id", _text, f"ura{index}"),
        mx=r.get("mx", _positive(_integer), required=True),
        my=r.get("my", _positive(_integer), required=True),
        spacing_m=r.get("spacing_m", _positive()),
        spacing_wavelengths=r.get("spacing_wavelengths", _positive()),
        center_m=r.get("center_m", _vector(3), (0.0, 0.0, 0.0)),
        orientation_deg=r.get("orientation_deg", _vector(3), (0.0, 0.0, 0.0)),
        groups=r.get("groups", _vector(None, _vector(None, _integer))),
        cpas=r.get("cpas", _vector(None, _integer)),
    )
    if block.spacing_m is not None and block.spacing_wavelengths is not None:
        r.fail("spacing_m", "give spacing_m or spacing_wavelengths, not both")
    r.done()
    return block


def _parse_source(r: _Reader) -> SourceBlock:
    block = SourceBlock(
        position_m=r.get("position_m", _vector(3)),
        direction_deg=r.get("direction_deg", _vector(2)),
        power=r.get("power", _nonnegative, 1.0),
        coherence_group=r.get("coherence_group", lambda v: str(v)),
        gain_phase_deg=r.get("gain_phase_deg", _number),
    )
    if (block.position_m is None) == (block.direction_deg is None):
        r.fail(None, "a source needs exactly one of position_m or direction_deg")
    if block.direction_deg is not None and not 0.0 <= block.direction_deg[0] <= 90.0:
        r.fail("direction_deg", f"elevation {block.direction_deg[0]} outside [0, 90]")
    r.done()
    return block


def _parse_impairments(r: _Reader | None) -> ImpairmentBlock:
    if r is None:
        return ImpairmentBlock()
    block = ImpairmentBlock(
        mode=r.get("mode", _choice("ideal", "switched"), "ideal"),
        snr_db=r.get("snr_db", _number),
        pll_phases_deg=r.get("pll_phases_deg", _vector(3)),
        cable_delays_s=r.get("cable_delays_s", _vector()),
        cfo_hz=r.get("cfo_hz", _number, 0.0),
        randomize=r.get("randomize", _boolean, False),
        max_cfo_hz=r.get("max_cfo_hz", _nonnegative, 10e3),
        max_cable_delay_s=r.get("max_cable_delay_s", _nonnegative, 2e-9),
    )
    r.done()
    return block


def _parse_schedule(r: _Reader | None) -> ScheduleBlock:
    if r is None:
        return ScheduleBlock()
    block = ScheduleBlock(
        packets_per_group=r.get("packets_per_group", _positive(_integer), 50),
        packet_interval_s=r.get("packet_interval_s", _positive(), 0.0005),
        group_order=r.get("group_order", _vector(None, _integer)),
    )
    r.done()
    return block


def _parse_estimator(r: _Reader | None) -> EstimatorBlock:
    if r is None:
        return EstimatorBlock()
    methods = r.get("methods", _vector(None, _choice("music", "ss-music", "i-ssmusic")), ("i-ssmusic",))
    if not methods:
        r.fail("methods", "needs at least one method")
    block = EstimatorBlock(
        methods=methods,
        smoothing=r.get("smoothing", _vector(2, _positive(_integer))),
        grid_step_deg=r.get("grid_step_deg", _positive(), 0.2),
        sources=r.get("sources", _positive(_integer)),
        dimension=r.get("dimension", _integer),
        refine=r.get("refine", _boolean, True),
    )
    r.done()
    return block


def _parse_locator(r: _Reader | None) -> LocatorBlock:
    if r is None:
        return LocatorBlock()
    methods = r.get("methods", _vector(None, _choice("gp", "dpd")), ("gp", "dpd"))
    if not methods:
        r.fail("methods", "needs at least one method")
    block = LocatorBlock(
        methods=methods,
        lsoi_radius_m=r.get("lsoi_radius_m", _positive(), 0.1),
        voxel_m=r.get("voxel_m", _positive(), 0.005),
        max_iters=r.get("max_iters", _positive(_integer), 4),
        model=r.get("model", _choice("plane", "exact"), "plane"),
        polish=r.get("polish", _boolean, True),
    )
    if block.voxel_m > block.lsoi_radius_m:
        r.fail("voxel_m", "voxel larger than the search radius")
    r.done()
    return block


def _parse_monte_carlo(r: _Reader | None) -> MonteCarloBlock | None:
    if r is None:
        return None
    block = MonteCarloBlock(
        trials=r.get("trials", _positive(_integer), 1),
        x_m=r.get("x_m", _range),
        y_m=r.get("y_m", _range),
        z_m=r.get("z_m", _range),
        pitch_m=r.get("pitch_m", _positive(), 0.2),
        snr_db_range=r.get("snr_db_range", _range),
    )
    region = (block.x_m, block.y_m, block.z_m)
    if any(v is None for v in region) and any(v is not None for v in region):
        r.fail(None, "a sampling region needs all of x_m, y_m and z_m")
    r.done()
    return block


def _parse_trajectory(r: _Reader | None) -> TrajectoryBlock | None:
    if r is None:
        return None
    block = TrajectoryBlock(
        waypoints_m=r.get("waypoints_m", _vector(None, _vector(3))),
        vertices_m=r.get("vertices_m", _vector(None, _vector(3))),
        count=r.get("count", _positive(_integer)),
        window=r.get("window", _positive(_integer), 5),
    )
    if block.waypoints_m is not None:
        if block.vertices_m is not None or block.count is not None:
            r.fail("waypoints_m", "give waypoints_m or vertices_m with count, not both")
        if not block.waypoints_m:
            r.fail("waypoints_m", "trajectory is empty")
    elif block.vertices_m is None or block.count is None:
        r.fail(None, "a trajectory needs waypoints_m, or vertices_m with count")
    elif len(block.vertices_m) < 2:
        r.fail("vertices_m", "a path needs at least two vertices")
    if block.window % 2 == 0:
        r.fail("window", "median window must be odd")
    r.done()
    return block


def _parse_bench(r: _Reader | None) -> BenchBlock | None:
    if r is None:
        return None
    block = BenchBlock(
        repeats=r.get("repeats", _positive(_integer), 3),
        stages=r.get("stages", _vector(None, _choice(*STAGES[:4])), ("simulate", "calibrate", "aoa", "locate")),
    )
    r.done()
    return block


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse and validate a scenario document."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ScenarioError(f"{source}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if node is None:
        raise ScenarioError(f"{source}:1: scenario is empty")
    data = _build(node, yaml.constructor.SafeConstructor())
    r = _Reader(data, "scenario", source)
    arrays = tuple(_parse_array(a, i) for i, a in enumerate(r.items("arrays", required=True)))
    if not arrays:
        r.fail("arrays", "needs at least one array")
    ids = [a.array_id for a in arrays]
    if len(set(ids)) != len(ids):
        r.fail("arrays", f"duplicate array ids {ids}")
    sources = tuple(_parse_source(s) for s in r.items("sources", required=True))
    if not sources:
        r.fail("sources", "needs at least one source")
    scn = Scenario(
        name=r.get("name", _text, required=True),
        arrays=arrays,
        sources=sources,
        seed=r.get("seed", _integer, 0),
        frequency_hz=r.get("frequency_hz", _positive(), 5.2e9),
        snapshots=r.get("snapshots", _positive(_integer), 50),
        propagation=r.get("propagation", _choice("exact", "plane"), "exact"),
        impairments=_parse_impairments(r.sub("impairments")),
        schedule=_parse_schedule(r.sub("schedule")),
        estimator=_parse_estimator(r.sub("estimator")),
        locator=_parse_locator(r.sub("locator")),
        monte_carlo=_parse_monte_carlo(r.sub("monte_carlo")),
        trajectory=_parse_trajectory(r.sub("trajectory")),
        bench=_parse_bench(r.sub("bench")),
    )
    r.done()
    if scn.impairments.mode == "switched" and scn.impairments.cable_delays_s is not None:
        total = sum(a.mx * a.my for a in arrays)
        if len(scn.impairments.cable_delays_s) != total:
            raise ScenarioError(
                f"{source}:{r.line_of('impairments')}: impairments.cable_delays_s has "
                f"{len(scn.impairments.cable_delays_s)} entries, arrays have {total} elements"
            )
    return scn


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}:0: cannot read scenario: {exc.strerror}") from None
    return parse_scenario(text, str(path))


# --- serialization ----------------------------------------------------------------


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _block_dict(block, rename: dict[str, str] | None = None) -> dict[str, Any]:
    rename = rename or {}
    out = {}
    for f in fields(block):
        if not f.init:
            continue
        value = getattr(block, f.name)
        if value is None:
            continue
        if hasattr(value, "__dataclass_fields__"):
            value = _block_dict(value)
        elif isinstance(value, tuple) and value and hasattr(value[0], "__dataclass_fields__"):
            value = [_block_dict(v, {"array_id": "id"}) for v in value]
        out[rename.get(f.name, f.name)] = _plain(value)
    return out


def scenario_to_dict(scn: Scenario) -> dict[str, Any]:
    return _block_dict(scn)


def dump_scenario(scn: Scenario) -> str:
    """Serialize to YAML; ``parse_scenario(dump_scenario(s)) == s``."""
    return yaml.safe_dump(scenario_to_dict(scn), sort_keys=False, default_flow_style=None, width=100)
