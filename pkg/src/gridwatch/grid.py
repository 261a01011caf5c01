"""Distribution network topology: admittance assembly, outage switching,
island analysis and Kron reduction.

Buses are numbered 1..M.  Bus 1 is the conventional slack (feeder head).
The admittance model is series-branch only: Y_ij = -y_ij for an in-service
branch (i, j) and Y_ii is the sum of incident branch admittances, so row
sums are exactly zero.  Shunt terms are out of scope.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, replace

import numpy as np

from . import textconf


class TopologyError(ValueError):
    """Invalid bus/branch structure."""


class SingularBlockError(np.linalg.LinAlgError):
    """A matrix block that must be inverted is singular; names the block."""

    def __init__(self, block: str, detail: str = ""):
        self.block = block
        message = f"singular block {block}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


def _norm_pair(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    admittance: complex
    in_service: bool = True

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise TopologyError(f"branch {self.from_bus}-{self.to_bus} is a self-loop")

    @property
    def pair(self) -> tuple[int, int]:
        return _norm_pair(self.from_bus, self.to_bus)


@dataclass(frozen=True)
class GridTopology:
    """Immutable network description.

    Parallel branches between the same bus pair are merged (admittance sum)
    at construction, matching how feeder files are loaded.
    """

    bus_count: int
    branches: tuple[Branch, ...]
    slack: frozenset[int] = frozenset({1})
    der_buses: frozenset[int] = frozenset()
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.bus_count < 1:
            raise TopologyError("bus_count must be >= 1")
        merged: dict[tuple[int, int], Branch] = {}
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if not 1 <= end <= self.bus_count:
                    raise TopologyError(f"branch endpoint {end} outside 1..{self.bus_count}")
            if br.pair in merged:
                prev = merged[br.pair]
                merged[br.pair] = Branch(
                    *br.pair,
                    admittance=prev.admittance + br.admittance,
                    in_service=prev.in_service and br.in_service,
                )
            else:
                merged[br.pair] = Branch(br.from_bus, br.to_bus, br.admittance, br.in_service)
        object.__setattr__(self, "branches", tuple(merged[p] for p in sorted(merged)))
        for bus_set, label in ((self.slack, "slack"), (self.der_buses, "der")):
            for b in bus_set:
                if not 1 <= b <= self.bus_count:
                    raise TopologyError(f"{label} bus {b} outside 1..{self.bus_count}")
        object.__setattr__(self, "slack", frozenset(self.slack))
        object.__setattr__(self, "der_buses", frozenset(self.der_buses))

    def branch_map(self) -> dict[tuple[int, int], Branch]:
        return {br.pair: br for br in self.branches}

    def in_service_pairs(self) -> list[tuple[int, int]]:
        return [br.pair for br in self.branches if br.in_service]

    def adjacency(self) -> dict[int, set[int]]:
        """Neighbour sets over in-service branches."""
        adj: dict[int, set[int]] = {b: set() for b in range(1, self.bus_count + 1)}
        for br in self.branches:
            if br.in_service:
                adj[br.from_bus].add(br.to_bus)
                adj[br.to_bus].add(br.from_bus)
        return adj


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Complex nodal admittance over an explicit, ordered bus tuple."""

    buses: tuple[int, ...]
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (len(self.buses), len(self.buses)):
            raise TopologyError(f"matrix shape {m.shape} does not match {len(self.buses)} buses")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return len(self.buses)

    def index_of(self, bus: int) -> int:
        try:
            return self.buses.index(bus)
        except ValueError:
            raise TopologyError(f"bus {bus} not in matrix") from None


def build_admittance(topology: GridTopology) -> AdmittanceMatrix:
    """Assemble the nodal admittance matrix by KCL stamping.

    Out-of-service branches contribute nothing; in-service branches must
    have nonzero admittance.
    """
    m = topology.bus_count
    matrix = np.zeros((m, m), dtype=complex)
    seen: set[tuple[int, int]] = set()
    for br in topology.branches:
        if br.pair in seen:
            raise TopologyError(f"duplicate branch {br.pair} after merge pass")
        seen.add(br.pair)
        if not br.in_service:
            continue
        if br.admittance == 0:
            raise TopologyError(f"in-service branch {br.pair} has zero admittance")
        i, j = br.from_bus - 1, br.to_bus - 1
        y = br.admittance
        matrix[i, j] -= y
        matrix[j, i] -= y
        matrix[i, i] += y
        matrix[j, j] += y
    return AdmittanceMatrix(tuple(range(1, m + 1)), matrix)


def apply_outage(topology: GridTopology, out: set[tuple[int, int]]) -> GridTopology:
    """Return a copy with the given branches switched out of service."""
    wanted = {_norm_pair(*p) for p in out}
    known = topology.branch_map()
    for pair in wanted:
        if pair not in known:
            raise TopologyError(f"unknown branch {pair}")
        if not known[pair].in_service:
            raise TopologyError(f"branch {pair} is already out of service")
    new_branches = tuple(
        replace(br, in_service=False) if br.pair in wanted else br
        for br in topology.branches
    )
    return replace(topology, branches=new_branches)


@dataclass(frozen=True)
class Island:
    """One connected component of the in-service graph.

    kind is "slack" (energised from the feeder head), "der" (energised by a
    local DER) or "dead" (no source: zero voltage)."""

    buses: frozenset[int]
    kind: str


def islands(topology: GridTopology) -> list[Island]:
    """Connected components labelled by their energisation source.

    Output is sorted by smallest bus id, independent of branch order.
    """
    adj = topology.adjacency()
    unseen = set(range(1, topology.bus_count + 1))
    out: list[Island] = []
    while unseen:
        start = min(unseen)
        comp = {start}
        stack = [start]
        while stack:
            node = stack.pop()
            for nxt in adj[node]:
                if nxt not in comp:
                    comp.add(nxt)
                    stack.append(nxt)
        unseen -= comp
        if comp & topology.slack:
            kind = "slack"
        elif comp & topology.der_buses:
            kind = "der"
        else:
            kind = "dead"
        out.append(Island(frozenset(comp), kind))
    return out


def kron_reduce(Y: AdmittanceMatrix, keep: set[int]) -> AdmittanceMatrix:
    """Eliminate buses outside `keep` by the Schur complement.

    The result satisfies I_A = Y_red V_A for any voltage/current solution of
    the full network with zero injections at the eliminated buses.
    """
    keep_list = [b for b in Y.buses if b in keep]
    if len(keep_list) != len(keep):
        missing = set(keep) - set(Y.buses)
        raise TopologyError(f"keep set references unknown buses {sorted(missing)}")
    drop_list = [b for b in Y.buses if b not in keep]
    if not drop_list:
        return AdmittanceMatrix(tuple(keep_list), Y.matrix.copy())
    a = [Y.index_of(b) for b in keep_list]
    b = [Y.index_of(x) for x in drop_list]
    Yaa = Y.matrix[np.ix_(a, a)]
    Yab = Y.matrix[np.ix_(a, b)]
    Yba = Y.matrix[np.ix_(b, a)]
    Ybb = Y.matrix[np.ix_(b, b)]
    try:
        X = np.linalg.solve(Ybb, Yba)
    except np.linalg.LinAlgError:
        raise SingularBlockError(
            "Y[eliminated, eliminated]",
            f"buses {drop_list} cannot be eliminated; ground one or shrink the set",
        ) from None
    if not np.all(np.isfinite(X)):
        raise SingularBlockError("Y[eliminated, eliminated]", f"buses {drop_list}")
    return AdmittanceMatrix(tuple(keep_list), Yaa - Yab @ X)


# --- bundled feeders -------------------------------------------------------

_FEEDER_KEYS_BUS = {"id", "slack", "der"}
_FEEDER_KEYS_BRANCH = {"from", "to", "conductance", "susceptance", "in_service"}


def parse_feeder(text: str, name: str = "") -> GridTopology:
    """Parse the feeder file format ([bus]/[branch] blocks)."""
    buses: list[int] = []
    slack: set[int] = set()
    der: set[int] = set()
    branches: list[Branch] = []
    for section, fields in textconf.parse_blocks(text):
        if section == "bus":
            textconf.check_keys("bus", fields, _FEEDER_KEYS_BUS, {"id"})
            bus = textconf.as_int("bus", fields, "id")
            if bus in buses:
                raise textconf.ConfigError(f"duplicate bus id {bus}")
            buses.append(bus)
            if textconf.as_bool("bus", fields, "slack", False):
                slack.add(bus)
            if textconf.as_bool("bus", fields, "der", False):
                der.add(bus)
        elif section == "branch":
            textconf.check_keys("branch", fields, _FEEDER_KEYS_BRANCH,
                                {"from", "to", "conductance", "susceptance"})
            branches.append(Branch(
                textconf.as_int("branch", fields, "from"),
                textconf.as_int("branch", fields, "to"),
                complex(textconf.as_float("branch", fields, "conductance"),
                        textconf.as_float("branch", fields, "susceptance")),
                textconf.as_bool("branch", fields, "in_service", True),
            ))
        else:
            raise textconf.ConfigError(f"unknown section [{section}] in feeder file")
    if not buses:
        raise textconf.ConfigError("feeder file has no [bus] entries")
    if sorted(buses) != list(range(1, len(buses) + 1)):
        raise textconf.ConfigError(f"bus ids must be 1..M, got {sorted(buses)}")
    return GridTopology(len(buses), tuple(branches), frozenset(slack), frozenset(der), name)


def format_feeder(topology: GridTopology) -> str:
    blocks: list[tuple[str, dict[str, str]]] = []
    for bus in range(1, topology.bus_count + 1):
        fields = {"id": str(bus)}
        if bus in topology.slack:
            fields["slack"] = "true"
        if bus in topology.der_buses:
            fields["der"] = "true"
        blocks.append(("bus", fields))
    for br in topology.branches:
        blocks.append(("branch", {
            "from": str(br.from_bus),
            "to": str(br.to_bus),
            "conductance": repr(br.admittance.real),
            "susceptance": repr(br.admittance.imag),
            "in_service": "true" if br.in_service else "false",
        }))
    return textconf.format_blocks(blocks)


def load_feeder(path_or_name: str) -> GridTopology:
    """Load a feeder by bundled name ("loop8") or filesystem path."""
    bundled = {t.name: t for t in bundled_feeders()}
    if path_or_name in bundled:
        return bundled[path_or_name]
    with open(path_or_name, "r", encoding="utf-8") as fh:
        return parse_feeder(fh.read(), name=path_or_name)


def bundled_feeders() -> list[GridTopology]:
    """The feeders shipped with the package, in a fixed order."""
    out = []
    root = importlib.resources.files("gridwatch").joinpath("feeders")
    for name in ("path3", "loop8", "loop12"):
        text = root.joinpath(f"{name}.feeder").read_text(encoding="utf-8")
        out.append(parse_feeder(text, name=name))
    return out


def random_feeder(bus_count: int, loops: int = 0, seed: int = 0,
                  der_buses: set[int] | None = None) -> GridTopology:
    """Seeded random radial feeder with optional loop branches.

    Bus 1 is the slack and keeps degree one (a single feeder-head trunk).
    Loop branches are only inserted between buses at graph distance >= 3,
    which keeps the topology triangle-free; see the feeder docs for why the
    localisation zero test needs that.
    """
    if bus_count < 2:
        raise TopologyError("random feeder needs at least 2 buses")
    rng = np.random.Generator(np.random.Philox(key=_philox_key(seed, "feeder")))
    branches: list[Branch] = []
    for bus in range(2, bus_count + 1):
        if bus == 2:
            parent = 1
        else:
            parent = int(rng.integers(2, bus))  # never the slack: keeps head degree 1
        branches.append(Branch(parent, bus, _random_admittance(rng)))

    adj: dict[int, set[int]] = {b: set() for b in range(1, bus_count + 1)}
    for br in branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)

    def distance(u: int, v: int) -> int:
        seen = {u: 0}
        queue = [u]
        while queue:
            nxt = []
            for node in queue:
                for w in adj[node]:
                    if w not in seen:
                        seen[w] = seen[node] + 1
                        if w == v:
                            return seen[w]
                        nxt.append(w)
            queue = nxt
        return 10 ** 9

    for _ in range(loops):
        candidates = [(u, v) for u in range(2, bus_count + 1)
                      for v in range(u + 1, bus_count + 1) if distance(u, v) >= 3]
        if not candidates:
            raise TopologyError(
                f"no room for another loop in a {bus_count}-bus feeder "
                f"(no bus pair at distance >= 3 left)")
        u, v = candidates[int(rng.integers(len(candidates)))]
        branches.append(Branch(u, v, _random_admittance(rng)))
        adj[u].add(v)
        adj[v].add(u)
    return GridTopology(bus_count, tuple(branches),
                        der_buses=frozenset(der_buses or ()),
                        name=f"random{bus_count}x{loops}s{seed}")


def _random_admittance(rng: np.random.Generator) -> complex:
    g = rng.uniform(2.0, 6.0)
    ratio = rng.uniform(0.5, 2.0)  # R/X of the underlying impedance
    return complex(g, -g / ratio)


def _philox_key(seed: int, label: str) -> int:
    import hashlib

    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")
