"""Static network model: case data, case-file parsing, per-unit handling,
and bus admittance matrix assembly from pi-equivalent branches.

Case files are JSON documents with the layout::

    {
      "system":    {"mva_base": 100.0, "frequency_hz": 50.0},
      "slack_bus": 31,
      "buses":     [{"id", "kind", "base_kv", "load_mw", "load_mvar"}, ...],
      "branches":  [{"from", "to", "r_pu", "x_pu", "b_pu", "tap", "in_service"}, ...],
      "generators":[{"bus", "m", "d", "xd_prime_pu", "p_mw", "v_set_pu", "infinite"}, ...]
    }

Loads are given in physical MW / MVAr and converted to per-unit on
``mva_base`` at parse time; branch impedances are already per-unit.
Bus ids may be arbitrary unique integers (1-based in the bundled data);
they are renumbered to a contiguous 0..N-1 internal index, with the
original id kept for display and lookups.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Shunt admittance (pu) added to a bus diagonal to represent a bolted
# three-phase fault; keeps the matrix order fixed across fault stages.
FAULT_SHUNT = 1.0e7

BUS_KINDS = ("generator", "load", "both")


class CaseError(Exception):
    """Base class for case-file problems."""


class CaseFormatError(CaseError):
    """Malformed case text (JSON syntax, missing/mistyped fields)."""


class CaseValidationError(CaseError):
    """Structurally valid file that violates a model invariant."""


@dataclass(frozen=True)
class Bus:
    index: int          # contiguous internal index, 0..N-1
    ext_id: int         # id as written in the case file
    kind: str           # "generator" | "load" | "both"
    base_kv: float
    load_p: float       # pu on system base, consumption positive
    load_q: float       # pu


@dataclass(frozen=True)
class Branch:
    index: int
    from_bus: int       # internal index
    to_bus: int
    r: float            # pu
    x: float            # pu
    b: float            # total line charging, pu
    tap: float = 1.0    # off-nominal ratio on the from side
    in_service: bool = True

    def series_admittance(self) -> complex:
        z = complex(self.r, self.x)
        if z == 0:
            raise CaseValidationError(
                f"branch {self.index}: series impedance is zero (r=x=0)")
        return 1.0 / z


@dataclass(frozen=True)
class Generator:
    index: int
    bus: int            # internal terminal-bus index
    m: float            # inertia, pu-power * s^2 / rad
    d: float            # damping, pu-power * s / rad
    xd_prime: float     # transient reactance, pu
    p_set: float        # scheduled active output, pu (ignored at slack)
    v_set: float        # terminal voltage setpoint, pu
    infinite: bool = False  # fixed-voltage source, excluded from the dynamic state


@dataclass(frozen=True)
class LoadAdmittance:
    """Constant shunt coefficients replacing a PQ load for dynamic runs.

    Defined so that at the initialization voltage V0 the shunt consumes
    exactly the power-flow load: P = V0^2 * g0 and Q = V0^2 * b0.
    """
    bus: int
    g0: float
    b0: float


@dataclass(frozen=True)
class PowerSystemCase:
    name: str
    mva_base: float
    frequency_hz: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    slack_bus: int      # internal index of the slack generator terminal
    _ext_to_index: dict = field(repr=False, default_factory=dict)

    # -- convenience views ------------------------------------------------

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    def bus_index(self, ext_id: int) -> int:
        """Internal index for a file-level bus id."""
        try:
            return self._ext_to_index[ext_id]
        except KeyError:
            raise CaseValidationError(f"unknown bus id {ext_id}") from None

    def ext_ids(self) -> np.ndarray:
        return np.array([b.ext_id for b in self.buses], dtype=int)

    def load_p(self) -> np.ndarray:
        return np.array([b.load_p for b in self.buses])

    def load_q(self) -> np.ndarray:
        return np.array([b.load_q for b in self.buses])

    def load_mw(self) -> np.ndarray:
        return self.load_p() * self.mva_base

    def total_load_mw(self) -> float:
        return float(self.load_p().sum() * self.mva_base)

    def branch_between(self, ext_from: int, ext_to: int) -> int:
        """Branch index for an (unordered) pair of file-level bus ids."""
        i, j = self.bus_index(ext_from), self.bus_index(ext_to)
        for br in self.branches:
            if {br.from_bus, br.to_bus} == {i, j}:
                return br.index
        raise CaseValidationError(f"no branch between buses {ext_from} and {ext_to}")


# ---------------------------------------------------------------------------
# Parsing


def _require(obj, key, where, typ=None):
    if key not in obj:
        raise CaseFormatError(f"{where}: missing field '{key}'")
    val = obj[key]
    if typ is not None:
        if typ is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            return float(val)
        if typ is int and isinstance(val, int) and not isinstance(val, bool):
            return val
        if not isinstance(val, typ):
            raise CaseFormatError(f"{where}: field '{key}' has wrong type "
                                  f"({type(val).__name__})")
    return val


def parse_case(text: str, name: str = "case") -> PowerSystemCase:
    """Parse case-file content into a validated :class:`PowerSystemCase`.

    All electrical quantities come out per-unit on the system MVA base and
    bus ids are renumbered to 0..N-1.  Raises :class:`CaseFormatError` with
    a line/field location for malformed text and
    :class:`CaseValidationError` for semantic problems.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(
            f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise CaseFormatError("top level must be an object")

    system = _require(raw, "system", "top level", dict)
    mva_base = _require(system, "mva_base", "system", float)
    freq = _require(system, "frequency_hz", "system", float)
    if mva_base <= 0 or freq <= 0:
        raise CaseValidationError("system mva_base and frequency_hz must be positive")

    raw_buses = _require(raw, "buses", "top level", list)
    raw_branches = _require(raw, "branches", "top level", list)
    raw_gens = _require(raw, "generators", "top level", list)
    if not raw_buses:
        raise CaseValidationError("case has no buses")
    if not raw_gens:
        raise CaseValidationError("case has no generators")

    # Renumber bus ids (sorted for determinism) to 0..N-1.
    ext_ids = []
    for k, rb in enumerate(raw_buses):
        ext_ids.append(_require(rb, "id", f"buses[{k}]", int))
    if len(set(ext_ids)) != len(ext_ids):
        dup = sorted({i for i in ext_ids if ext_ids.count(i) > 1})
        raise CaseValidationError(f"duplicate bus ids: {dup}")
    order = sorted(range(len(ext_ids)), key=lambda k: ext_ids[k])
    ext_to_index = {ext_ids[k]: i for i, k in enumerate(order)}

    buses = []
    for i, k in enumerate(order):
        rb = raw_buses[k]
        where = f"buses[{k}] (id {ext_ids[k]})"
        kind = _require(rb, "kind", where, str)
        if kind not in BUS_KINDS:
            raise CaseFormatError(f"{where}: kind must be one of {BUS_KINDS}")
        base_kv = _require(rb, "base_kv", where, float)
        if base_kv <= 0:
            raise CaseValidationError(f"{where}: base_kv must be positive")
        load_mw = float(rb.get("load_mw", 0.0))
        load_mvar = float(rb.get("load_mvar", 0.0))
        if load_mw != 0.0 and kind == "generator":
            raise CaseValidationError(
                f"{where}: nonzero load on a pure generator bus; use kind 'both'")
        buses.append(Bus(index=i, ext_id=ext_ids[k], kind=kind, base_kv=base_kv,
                         load_p=load_mw / mva_base, load_q=load_mvar / mva_base))

    branches = []
    for k, rb in enumerate(raw_branches):
        where = f"branches[{k}]"
        f_ext = _require(rb, "from", where, int)
        t_ext = _require(rb, "to", where, int)
        for e in (f_ext, t_ext):
            if e not in ext_to_index:
                raise CaseValidationError(f"{where}: endpoint bus {e} does not exist")
        if f_ext == t_ext:
            raise CaseValidationError(f"{where}: from and to are the same bus ({f_ext})")
        r = _require(rb, "r_pu", where, float)
        x = _require(rb, "x_pu", where, float)
        if r == 0.0 and x == 0.0:
            raise CaseValidationError(f"{where}: degenerate branch, r_pu = x_pu = 0")
        b = float(rb.get("b_pu", 0.0))
        if b < 0:
            raise CaseValidationError(f"{where}: negative line charging b_pu")
        tap = float(rb.get("tap", 1.0))
        if tap <= 0:
            raise CaseValidationError(f"{where}: tap ratio must be positive")
        branches.append(Branch(index=k, from_bus=ext_to_index[f_ext],
                               to_bus=ext_to_index[t_ext], r=r, x=x, b=b, tap=tap,
                               in_service=bool(rb.get("in_service", True))))

    gens = []
    gen_buses = set()
    for k, rg in enumerate(raw_gens):
        where = f"generators[{k}]"
        bus_ext = _require(rg, "bus", where, int)
        if bus_ext not in ext_to_index:
            raise CaseValidationError(f"{where}: terminal bus {bus_ext} does not exist")
        bus = ext_to_index[bus_ext]
        if buses[bus].kind == "load":
            raise CaseValidationError(
                f"{where}: terminal bus {bus_ext} has kind 'load'")
        infinite = bool(rg.get("infinite", False))
        m = float(rg.get("m", 0.0)) if infinite else _require(rg, "m", where, float)
        d = float(rg.get("d", 0.0)) if infinite else float(rg.get("d", 0.0))
        xd = _require(rg, "xd_prime_pu", where, float)
        if not infinite and m <= 0:
            raise CaseValidationError(f"{where}: inertia m must be positive")
        if d < 0:
            raise CaseValidationError(f"{where}: damping d must be non-negative")
        if xd <= 0:
            raise CaseValidationError(f"{where}: xd_prime_pu must be positive")
        p_mw = float(rg.get("p_mw", 0.0))
        v_set = float(rg.get("v_set_pu", 1.0))
        if v_set <= 0:
            raise CaseValidationError(f"{where}: v_set_pu must be positive")
        gens.append(Generator(index=k, bus=bus, m=m, d=d, xd_prime=xd,
                              p_set=p_mw / mva_base, v_set=v_set, infinite=infinite))
        gen_buses.add(bus)

    if "slack_bus" in raw:
        slack_ext = _require(raw, "slack_bus", "top level", int)
        if slack_ext not in ext_to_index:
            raise CaseValidationError(f"slack_bus {slack_ext} does not exist")
        slack = ext_to_index[slack_ext]
        if slack not in gen_buses:
            raise CaseValidationError(f"slack_bus {slack_ext} has no generator")
    else:
        slack = gens[0].bus

    case = PowerSystemCase(name=name, mva_base=mva_base, frequency_hz=freq,
                           buses=tuple(buses), branches=tuple(branches),
                           generators=tuple(gens), slack_bus=slack,
                           _ext_to_index=ext_to_index)
    _check_connected(case)
    return case


def _check_connected(case: PowerSystemCase) -> None:
    n = case.n_buses
    adj = [[] for _ in range(n)]
    for br in case.branches:
        if br.in_service:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not all(seen):
        missing = [case.buses[i].ext_id for i in range(n) if not seen[i]]
        raise CaseValidationError(
            f"network is not connected; unreachable buses {missing}")


def load_case(path) -> PowerSystemCase:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    import os
    return parse_case(text, name=os.path.splitext(os.path.basename(str(path)))[0])


def load_bundled_case(name: str) -> PowerSystemCase:
    """Load one of the cases shipped with the package ("case3", "case39")."""
    from importlib.resources import files
    res = files("pevgrid.cases").joinpath(f"{name}.json")
    if not res.is_file():
        raise CaseError(f"no bundled case named {name!r}")
    return parse_case(res.read_text(encoding="utf-8"), name=name)


def resolve_case(path_or_name: str) -> PowerSystemCase:
    """Accept either a filesystem path or a bundled case name."""
    import os
    if os.path.exists(path_or_name):
        return load_case(path_or_name)
    try:
        return load_bundled_case(path_or_name)
    except CaseError:
        raise CaseError(f"{path_or_name!r} is neither a file nor a bundled case")


# ---------------------------------------------------------------------------
# Admittance matrix


def build_ybus(case: PowerSystemCase,
               branch_out=(),
               faulted_buses=()) -> np.ndarray:
    """Assemble the N x N complex bus admittance matrix.

    Standard pi-model stamping with half the line charging at each
    terminal: series admittance y = 1/(r+jx) and shunt ysh = jb/2 add
    (y+ysh)/t^2 to the from diagonal, y+ysh to the to diagonal and -y/t to
    both off-diagonals (t is the off-nominal tap ratio, from side, so the
    matrix stays symmetric).  Generator transient
    reactances are NOT included here; the dynamic model attaches them via
    internal source nodes.

    ``branch_out`` lists branch indices to drop; ``faulted_buses`` lists
    internal bus indices that get the large fault shunt on their diagonal.
    """
    n = case.n_buses
    out = set(branch_out)
    for k in out:
        if not 0 <= k < len(case.branches):
            raise CaseValidationError(f"branch_out index {k} out of range")
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service or br.index in out:
            continue
        ys = br.series_admittance()
        ysh = 0.5j * br.b
        t = br.tap
        f, to = br.from_bus, br.to_bus
        y[f, f] += (ys + ysh) / (t * t)
        y[to, to] += ys + ysh
        y[f, to] -= ys / t
        y[to, f] -= ys / t
    for b in faulted_buses:
        if not 0 <= b < n:
            raise CaseValidationError(f"faulted bus index {b} out of range")
        y[b, b] += FAULT_SHUNT
    return y


def loads_to_admittance(case: PowerSystemCase, pf) -> list[LoadAdmittance]:
    """Freeze the PQ loads into constant shunt coefficients at the solved
    voltages: g0 = P/V^2, b0 = Q/V^2 (one entry per bus, zeros where there
    is no load).  Requires a converged power flow; flags suspicious data
    when a loaded bus initializes below 0.5 pu.
    """
    out = []
    for bus in case.buses:
        v = pf.v[bus.index]
        if (bus.load_p != 0.0 or bus.load_q != 0.0) and v < 0.5:
            raise CaseValidationError(
                f"bus {bus.ext_id}: initialization voltage {v:.3f} pu is below "
                "0.5 pu, case data looks wrong")
        v2 = v * v
        out.append(LoadAdmittance(bus=bus.index,
                                  g0=bus.load_p / v2 if bus.load_p else 0.0,
                                  b0=bus.load_q / v2 if bus.load_q else 0.0))
    return out


def case_summary(case: PowerSystemCase) -> dict:
    """Counts and totals used by the CLI info command."""
    n_load = sum(1 for b in case.buses if b.load_p != 0.0 or b.load_q != 0.0)
    return {
        "name": case.name,
        "buses": case.n_buses,
        "branches": len(case.branches),
        "generators": case.n_generators,
        "load_buses": n_load,
        "total_load_mw": round(case.total_load_mw(), 3),
        "total_load_mvar": round(float(case.load_q().sum() * case.mva_base), 3),
        "mva_base": case.mva_base,
        "frequency_hz": case.frequency_hz,
        "slack_bus": case.buses[case.slack_bus].ext_id,
    }
