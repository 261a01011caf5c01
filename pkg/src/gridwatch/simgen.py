"""Deterministic, seeded measurement-stream synthesis.

Per tick, every non-slack bus receives an independent zero-mean complex
Gaussian injection increment (real and imaginary parts independent with half
the variance each); voltage increments follow through the per-island inverse
of the grounded admittance matrix.  At the outage tick the network switches
to the post-outage matrix.  Dead islands emit exactly zero (plus measurement
noise); DER-backed islands run off their own grounded block.  Measurement
noise is added to the stacked real coordinates, i.i.d. per tick, from an RNG
substream separate from the injections so that changing the noise level
leaves the noiseless component bit-identical.

Magnitude channels report the real part of the complex increment (the
linearised magnitude increment around a flat operating point), aggregated
over the channel period: a channel with period p is fresh exactly at ticks
that are multiples of p and then carries the increment accumulated over the
last p ticks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import textconf
from .detector import GeometricPrior
from .gaussmodel import MAGNITUDE, PHASOR, CoordinateLayout, GaussianModel, model_from_topology
from .grid import (
    GridTopology,
    SingularBlockError,
    apply_outage,
    build_admittance,
    format_feeder,
    islands,
    parse_feeder,
)


def philox_key(seed: int, *labels) -> int:
    """Stable 128-bit Philox key for a named substream of a master seed."""
    text = "/".join([str(seed), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:16], "little")


def substream(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=philox_key(seed, *labels)))


@dataclass(frozen=True)
class SensorSchedule:
    """Per-bus channel kind and reporting period (in ticks)."""

    entries: tuple[tuple[int, str, int], ...]  # (bus, kind, period), sorted by bus

    def __post_init__(self):
        seen = set()
        for bus, kind, period in self.entries:
            if kind not in (PHASOR, MAGNITUDE):
                raise ValueError(f"unknown sensor kind {kind!r} at bus {bus}")
            if period < 1:
                raise ValueError(f"period must be >= 1, got {period} at bus {bus}")
            if bus in seen:
                raise ValueError(f"duplicate schedule entry for bus {bus}")
            seen.add(bus)
        if not self.entries:
            raise ValueError("schedule must sense at least one bus")
        object.__setattr__(self, "entries", tuple(sorted(self.entries)))

    @classmethod
    def all_phasor(cls, bus_count: int, period: int = 1) -> "SensorSchedule":
        return cls(tuple((b, PHASOR, period) for b in range(1, bus_count + 1)))

    @classmethod
    def all_magnitude(cls, bus_count: int, period: int = 1) -> "SensorSchedule":
        return cls(tuple((b, MAGNITUDE, period) for b in range(1, bus_count + 1)))

    @classmethod
    def from_kinds(cls, kinds: dict[int, tuple[str, int]]) -> "SensorSchedule":
        return cls(tuple((b, k, p) for b, (k, p) in sorted(kinds.items())))

    def layout(self) -> CoordinateLayout:
        return CoordinateLayout.from_kinds({b: k for b, k, _ in self.entries})

    def period_of(self, bus: int) -> int:
        for b, _, p in self.entries:
            if b == bus:
                return p
        raise KeyError(f"bus {bus} not in schedule")

    def channel_periods(self, layout: CoordinateLayout) -> list[int]:
        return [self.period_of(bus) for bus, _ in layout.entries]


@dataclass(frozen=True)
class Scenario:
    """One reproducible simulation setup.

    The outage time is either fixed (lam) or geometric (outage_rho); with an
    empty out_branches set the stream never changes.  mean_shift, when
    nonzero, adds a deterministic step to every energised coordinate from
    the outage tick on (stress option).
    """

    topology: GridTopology
    out_branches: tuple[tuple[int, int], ...] = ()
    lam: int | None = None
    outage_rho: float | None = None
    injection_variance: float | dict = 1.0
    noise_variance: float = 1e-8
    schedule: SensorSchedule | None = None
    horizon: int = 100
    seed: int = 0
    mean_shift: float = 0.0
    record_injections: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        object.__setattr__(self, "out_branches", self.normalized_outage())
        if self.out_branches:
            known = {br.pair for br in self.topology.branches}
            for pair in self.out_branches:
                if pair not in known:
                    raise ValueError(f"outage branch {pair} not in topology")
            if self.lam is None and self.outage_rho is None:
                raise ValueError("outage needs a fixed time (lam) or a rate (outage_rho)")
            if self.lam is not None and not 1 <= self.lam <= self.horizon:
                raise ValueError(f"lam {self.lam} outside 1..{self.horizon}")
        if self.schedule is None:
            object.__setattr__(
                self, "schedule", SensorSchedule.all_phasor(self.topology.bus_count))

    def normalized_outage(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted((min(i, j), max(i, j)) for i, j in self.out_branches))

    def pre_model(self) -> GaussianModel:
        return model_from_topology(self.topology, self.injection_variance,
                                   self.noise_variance)

    def post_model(self) -> GaussianModel:
        return model_from_topology(self.post_topology(), self.injection_variance,
                                   self.noise_variance)

    def post_topology(self) -> GridTopology:
        if not self.out_branches:
            return self.topology
        return apply_outage(self.topology, set(self.normalized_outage()))


@dataclass(frozen=True)
class MeasurementFrame:
    tick: int
    values: np.ndarray
    fresh: np.ndarray


@dataclass(frozen=True)
class GroundTruth:
    lam: int | None
    out_branches: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class MeasurementStream:
    """Frames stored column-wise: values/fresh are (horizon, dim) arrays with
    row t holding tick t+1."""

    layout: CoordinateLayout
    schedule: SensorSchedule
    values: np.ndarray = field(repr=False)
    fresh: np.ndarray = field(repr=False)
    truth: GroundTruth = GroundTruth(None, ())
    injections: np.ndarray | None = field(default=None, repr=False)
    meta: list = field(default_factory=list)  # sidecar scenario blocks, if loaded

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self):
        for t in range(self.horizon):
            yield MeasurementFrame(t + 1, self.values[t], self.fresh[t])

    def complex_values(self) -> np.ndarray:
        """(horizon, M) complex increments; full-phasor streams only."""
        buses = self.layout.buses
        kinds = {bus for bus, part in self.layout.entries if part == "im"}
        if set(buses) != kinds:
            raise ValueError("complex reconstruction needs phasor channels everywhere")
        re_idx = [self.layout.entries.index((b, "re")) for b in buses]
        im_idx = [self.layout.entries.index((b, "im")) for b in buses]
        return self.values[:, re_idx] + 1j * self.values[:, im_idx]


def sample_outage_time(prior, seed: int) -> int:
    """Geometric outage tick, deterministic per seed; accepts a
    GeometricPrior or a bare rate in (0, 1]."""
    rho = prior.rho if isinstance(prior, GeometricPrior) else float(prior)
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    if rho == 1.0:
        return 1
    return int(substream(seed, "outage-time").geometric(rho))


def generate(scenario: Scenario) -> MeasurementStream:
    """Synthesize the measurement stream for a scenario."""
    top = scenario.topology
    m = top.bus_count
    t_total = scenario.horizon

    lam: int | None = None
    if scenario.out_branches:
        lam = scenario.lam if scenario.lam is not None else sample_outage_time(
            scenario.outage_rho, scenario.seed)

    inj_rng = substream(scenario.seed, "injection")
    std = np.sqrt(_injection_vector(scenario.injection_variance, m) / 2.0)
    injections = (inj_rng.normal(size=(t_total, m)) +
                  1j * inj_rng.normal(size=(t_total, m))) * std

    volts = np.zeros((t_total, m), dtype=complex)
    pre_rows = np.arange(t_total) < (lam - 1 if lam is not None else t_total)
    _apply_transfer(volts, injections, pre_rows, top)
    if lam is not None and lam <= t_total:
        post_top = scenario.post_topology()
        _apply_transfer(volts, injections, ~pre_rows, post_top)
    else:
        post_top = top

    stacked = np.hstack([volts.real, volts.imag])  # re 1..M then im 1..M
    if scenario.mean_shift and lam is not None and lam <= t_total:
        shift = np.zeros(2 * m)
        for bus in _energized_buses(post_top):
            shift[bus - 1] = scenario.mean_shift
            shift[m + bus - 1] = scenario.mean_shift
        stacked[lam - 1:] += shift

    noise_rng = substream(scenario.seed, "noise")
    noise = noise_rng.normal(size=(t_total, 2 * m))
    if scenario.noise_variance:
        stacked = stacked + np.sqrt(scenario.noise_variance) * noise

    layout = scenario.schedule.layout()
    full = CoordinateLayout.full_phasor(m)
    cols = layout.indices_in(full)
    raw = stacked[:, cols]

    values = np.empty_like(raw)
    fresh = np.zeros(raw.shape, dtype=bool)
    for c, (bus, _part) in enumerate(layout.entries):
        period = scenario.schedule.period_of(bus)
        if period == 1:
            values[:, c] = raw[:, c]
            fresh[:, c] = True
            continue
        csum = np.concatenate([[0.0], np.cumsum(raw[:, c])])
        last = 0.0
        for t in range(t_total):
            if (t + 1) % period == 0:
                last = csum[t + 1] - csum[t + 1 - period]
                fresh[t, c] = True
            values[t, c] = last

    return MeasurementStream(
        layout=layout,
        schedule=scenario.schedule,
        values=values,
        fresh=fresh,
        truth=GroundTruth(lam, scenario.normalized_outage()),
        injections=injections if scenario.record_injections else None,
    )


def _injection_vector(injection_variance, m: int) -> np.ndarray:
    if isinstance(injection_variance, dict):
        out = np.zeros(m)
        for bus, var in injection_variance.items():
            if not 1 <= bus <= m:
                raise ValueError(f"injection bus {bus} outside 1..{m}")
            out[bus - 1] = float(var)
    else:
        out = np.full(m, float(injection_variance))
    if np.any(out < 0):
        raise ValueError("injection variances must be nonnegative")
    return out


def _grounding_set(topology: GridTopology) -> set[int]:
    grounding = set(topology.slack)
    for island in islands(topology):
        if island.kind == "der":
            grounding.add(min(island.buses & topology.der_buses))
    return grounding


def _energized_buses(topology: GridTopology) -> set[int]:
    out: set[int] = set()
    grounding = _grounding_set(topology)
    for island in islands(topology):
        if island.kind != "dead":
            out |= island.buses - grounding
    return out


def _apply_transfer(volts: np.ndarray, injections: np.ndarray, rows: np.ndarray,
                    topology: GridTopology) -> None:
    """volts[rows] = per-island Z @ injections[rows]; dead islands stay zero.

    Mirrors model_from_topology: same grounding (slack plus DER promotion),
    same per-component inverse, so simulated streams match the model
    covariance exactly.
    """
    if not rows.any():
        return
    Y = build_admittance(topology)
    grounding = _grounding_set(topology)
    for island in islands(topology):
        if island.kind == "dead":
            continue
        sub = sorted(island.buses - grounding)
        if not sub:
            continue
        idx = [b - 1 for b in sub]
        try:
            z = np.linalg.inv(Y.matrix[np.ix_(idx, idx)])
        except np.linalg.LinAlgError:
            raise SingularBlockError("Y[component]", f"buses {sub}") from None
        volts[np.ix_(rows, idx)] = injections[np.ix_(rows, idx)] @ z.T


# --- stream files ------------------------------------------------------------

def channel_id(bus: int, part: str) -> str:
    return f"{part}{bus}"


def write_stream(stream: MeasurementStream, data_path: str, meta_path: str,
                 scenario: Scenario | None = None,
                 injections_path: str | None = None) -> None:
    """CSV of (tick, coordinate, value, fresh) plus a sidecar with the
    schedule, ground truth and (when given) the full scenario echo."""
    if injections_path is not None and stream.injections is not None:
        with open(injections_path, "w", encoding="utf-8") as fh:
            fh.write("tick,bus,re,im\n")
            t_all, m = stream.injections.shape
            for t in range(t_all):
                for b in range(m):
                    z = stream.injections[t, b]
                    fh.write(f"{t + 1},{b + 1},{float(z.real)!r},{float(z.imag)!r}\n")
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write("tick,coordinate,value,fresh\n")
        for t in range(stream.horizon):
            for c, (bus, part) in enumerate(stream.layout.entries):
                fh.write(f"{t + 1},{channel_id(bus, part)},"
                         f"{float(stream.values[t, c])!r},{int(stream.fresh[t, c])}\n")
    blocks: list[tuple[str, dict[str, str]]] = []
    truth_fields = {"out_branches": ", ".join(f"{i}-{j}" for i, j in stream.truth.out_branches)}
    if stream.truth.lam is not None:
        truth_fields["lambda"] = str(stream.truth.lam)
    blocks.append(("truth", truth_fields))
    blocks.append(("stream", {"horizon": str(stream.horizon)}))
    for bus, kind, period in stream.schedule.entries:
        blocks.append(("sensor", {"bus": str(bus), "kind": kind, "period": str(period)}))
    if scenario is not None:
        blocks.extend(scenario_blocks(scenario))
    with open(meta_path, "w", encoding="utf-8") as fh:
        fh.write(textconf.format_blocks(blocks))


def parse_stream(data_path: str, meta_path: str,
                 injections_path: str | None = None) -> MeasurementStream:
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta_blocks = textconf.parse_blocks(fh.read())
    horizon = None
    lam = None
    out_branches: tuple[tuple[int, int], ...] = ()
    sensors: dict[int, tuple[str, int]] = {}
    for section, fields in meta_blocks:
        if section == "stream":
            horizon = textconf.as_int("stream", fields, "horizon")
        elif section == "truth":
            lam = textconf.as_int("truth", fields, "lambda", -1)
            lam = None if lam == -1 else lam
            out_branches = tuple(textconf.as_pairs("truth", fields, "out_branches", []))
        elif section == "sensor":
            bus = textconf.as_int("sensor", fields, "bus")
            sensors[bus] = (textconf.as_str("sensor", fields, "kind"),
                            textconf.as_int("sensor", fields, "period"))
    if horizon is None or not sensors:
        raise textconf.ConfigError("stream sidecar missing [stream] or [sensor] blocks")
    schedule = SensorSchedule.from_kinds(sensors)
    layout = schedule.layout()
    col = {channel_id(bus, part): k for k, (bus, part) in enumerate(layout.entries)}
    values = np.zeros((horizon, layout.dim))
    fresh = np.zeros((horizon, layout.dim), dtype=bool)
    with open(data_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "tick,coordinate,value,fresh":
            raise textconf.ConfigError(f"unexpected stream header {header!r}")
        for line in fh:
            tick_s, coord, value_s, fresh_s = line.rstrip("\n").split(",")
            t = int(tick_s) - 1
            c = col[coord]
            values[t, c] = float(value_s)
            fresh[t, c] = fresh_s == "1"
    injections = None
    if injections_path is not None:
        buses = max(b for b, _, _ in schedule.entries)
        with open(injections_path, "r", encoding="utf-8") as fh:
            if fh.readline().strip() != "tick,bus,re,im":
                raise textconf.ConfigError("unexpected injections header")
            injections = np.zeros((horizon, buses), dtype=complex)
            for line in fh:
                tick_s, bus_s, re_s, im_s = line.rstrip("\n").split(",")
                injections[int(tick_s) - 1, int(bus_s) - 1] = complex(float(re_s), float(im_s))
    scenario_meta = [(section, dict(fields)) for section, fields in meta_blocks
                     if section not in ("stream", "truth")]
    return MeasurementStream(layout=layout, schedule=schedule, values=values,
                             fresh=fresh, truth=GroundTruth(lam, out_branches),
                             injections=injections, meta=scenario_meta)


# --- scenario config blocks ---------------------------------------------------

_SCENARIO_KEYS = {"outage", "lambda", "outage_rho", "injection_variance",
                  "noise_variance", "horizon", "seed", "mean_shift",
                  "record_injections", "feeder"}


def scenario_blocks(scenario: Scenario) -> list[tuple[str, dict[str, str]]]:
    """Scenario echo as config blocks, feeder embedded inline."""
    fields: dict[str, str] = {}
    if scenario.out_branches:
        fields["outage"] = ", ".join(f"{i}-{j}" for i, j in scenario.normalized_outage())
        if scenario.lam is not None:
            fields["lambda"] = str(scenario.lam)
        else:
            fields["outage_rho"] = repr(scenario.outage_rho)
    if not isinstance(scenario.injection_variance, dict):
        fields["injection_variance"] = repr(float(scenario.injection_variance))
    fields["noise_variance"] = repr(scenario.noise_variance)
    fields["horizon"] = str(scenario.horizon)
    fields["seed"] = str(scenario.seed)
    if scenario.mean_shift:
        fields["mean_shift"] = repr(scenario.mean_shift)
    if scenario.record_injections:
        fields["record_injections"] = "true"
    blocks = [("scenario", fields)]
    if isinstance(scenario.injection_variance, dict):
        blocks.append(("injection", {f"bus{b}": repr(float(v))
                                     for b, v in sorted(scenario.injection_variance.items())}))
    blocks.extend(textconf.parse_blocks(format_feeder(scenario.topology)))
    for bus, kind, period in scenario.schedule.entries:
        blocks.append(("sensor", {"bus": str(bus), "kind": kind, "period": str(period)}))
    return blocks


def scenario_from_blocks(blocks: list[tuple[str, dict[str, str]]],
                         topology: GridTopology | None = None) -> Scenario:
    """Rebuild a Scenario from config blocks (inverse of scenario_blocks).

    A topology built from inline [bus]/[branch] blocks is used unless an
    explicit one is passed.
    """
    fields: dict[str, str] = {}
    injection: dict[int, float] = {}
    sensors: dict[int, tuple[str, int]] = {}
    feeder_blocks = []
    for section, block in blocks:
        if section == "scenario":
            fields = block
        elif section == "injection":
            for key, value in block.items():
                if not key.startswith("bus"):
                    raise textconf.ConfigError(f"[injection]: bad key {key!r}")
                injection[int(key[3:])] = float(value)
        elif section == "sensor":
            bus = textconf.as_int("sensor", block, "bus")
            sensors[bus] = (textconf.as_str("sensor", block, "kind"),
                            textconf.as_int("sensor", block, "period"))
        elif section in ("bus", "branch"):
            feeder_blocks.append((section, block))
    textconf.check_keys("scenario", fields, _SCENARIO_KEYS)
    if topology is None:
        if not feeder_blocks:
            raise textconf.ConfigError("no feeder given: need inline [bus]/[branch] "
                                       "blocks or a feeder reference")
        topology = parse_feeder(textconf.format_blocks(feeder_blocks))
    lam = textconf.as_int("scenario", fields, "lambda", -1)
    rho = textconf.as_float("scenario", fields, "outage_rho", -1.0)
    return Scenario(
        topology=topology,
        out_branches=tuple(textconf.as_pairs("scenario", fields, "outage", [])),
        lam=None if lam == -1 else lam,
        outage_rho=None if rho == -1.0 else rho,
        injection_variance=injection if injection else textconf.as_float(
            "scenario", fields, "injection_variance", 1.0),
        noise_variance=textconf.as_float("scenario", fields, "noise_variance", 1e-8),
        schedule=SensorSchedule.from_kinds(sensors) if sensors else None,
        horizon=textconf.as_int("scenario", fields, "horizon", 100),
        seed=textconf.as_int("scenario", fields, "seed", 0),
        mean_shift=textconf.as_float("scenario", fields, "mean_shift", 0.0),
        record_injections=textconf.as_bool("scenario", fields, "record_injections", False),
    )
