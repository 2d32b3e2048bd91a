"""Netlist data model, text encodings, canonical keys, and structural checks.

A netlist is an ordered list of two-terminal device entries. Switches come in
two flavors: FET-A (n-type, gate/body implied to GATEN/0) and FET-B (p-type,
gate/body implied to GATEP/IN). Implied nets never appear in the explicit
terminal list.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterable, Optional

EXTERNAL_PORTS = ("IN", "OUT", "0", "GATEN", "GATEP")
GROUND = "0"
GATE_NETS = ("GATEN", "GATEP")
DUTY_CYCLES = (0.1, 0.3, 0.5, 0.7, 0.9)

ERROR = "error"
WARNING = "warning"


class Kind(Enum):
    CAPACITOR = "capacitor"
    INDUCTOR = "inductor"
    FET_A = "FET-A"
    FET_B = "FET-B"

    @property
    def roles(self) -> tuple[str, str]:
        return _ROLES[self]

    @property
    def implied_nets(self) -> tuple[str, ...]:
        """Gate/body nets wired implicitly (empty for passives)."""
        return _IMPLIED[self]

    @property
    def is_switch(self) -> bool:
        return self in (Kind.FET_A, Kind.FET_B)


_ROLES = {
    Kind.CAPACITOR: ("t1", "t2"),
    Kind.INDUCTOR: ("t1", "t2"),
    Kind.FET_A: ("drain", "source"),
    Kind.FET_B: ("drain", "source"),
}
_IMPLIED = {
    Kind.CAPACITOR: (),
    Kind.INDUCTOR: (),
    Kind.FET_A: ("GATEN", GROUND),
    Kind.FET_B: ("GATEP", "IN"),
}

_DEVICE_RE = re.compile(r"^(capacitor|inductor|FET-A|FET-B)-(0|[1-9][0-9]*)$")
_INTERNAL_RE = re.compile(r"^[1-9][0-9]*$")


class NetlistError(Exception):
    pass


class MalformedSyntax(NetlistError):
    pass


class UnknownDeviceName(NetlistError):
    pass


class ArityMismatch(NetlistError):
    pass


class DuplicateDevice(NetlistError):
    pass


class InvalidDuty(NetlistError):
    pass


class InconsistentIncidence(NetlistError):
    pass


def is_external(node: str) -> bool:
    return node in EXTERNAL_PORTS


def is_internal(node: str) -> bool:
    return not is_external(node)


def check_duty(d: float) -> float:
    for v in DUTY_CYCLES:
        if abs(d - v) < 1e-9:
            return v
    raise InvalidDuty(f"duty {d!r} not in {DUTY_CYCLES}")


@dataclass(frozen=True)
class Device:
    kind: Kind
    index: int

    @property
    def name(self) -> str:
        return f"{self.kind.value}-{self.index}"


@dataclass(frozen=True)
class Entry:
    device: Device
    nodes: tuple[str, ...]  # explicit terminals only, len == 2


@dataclass(frozen=True)
class Netlist:
    entries: tuple[Entry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def explicit_nodes(self) -> list[str]:
        """Distinct nodes touched by explicit terminals, in first-use order."""
        seen: dict[str, None] = {}
        for e in self.entries:
            for n in e.nodes:
                seen.setdefault(n)
        return list(seen)

    def internal_nodes(self) -> list[str]:
        return [n for n in self.explicit_nodes() if is_internal(n)]

    def kind_counts(self) -> dict[Kind, int]:
        counts = {k: 0 for k in Kind}
        for e in self.entries:
            counts[e.device.kind] += 1
        return counts


def parse_node(token: str) -> str:
    if token in EXTERNAL_PORTS:
        return token
    if _INTERNAL_RE.match(token):
        return token
    raise MalformedSyntax(f"node {token!r} is neither an external port nor an integer label")


def parse_device_name(name: str) -> Device:
    m = _DEVICE_RE.match(name)
    if not m:
        raise UnknownDeviceName(f"bad device name {name!r}")
    return Device(Kind(m.group(1)), int(m.group(2)))


def parse_triple_list(text: str) -> Netlist:
    """Parse the [['FET-A-0','IN','OUT'], ...] surface form."""
    try:
        raw = ast.literal_eval(text.strip())
    except (ValueError, SyntaxError) as exc:
        raise MalformedSyntax(f"not a bracketed triple list: {exc}") from None
    if not isinstance(raw, list):
        raise MalformedSyntax("top level must be a list")
    entries = []
    seen: set[Device] = set()
    for item in raw:
        if not isinstance(item, (list, tuple)) or not all(isinstance(s, str) for s in item):
            raise MalformedSyntax(f"entry {item!r} is not a list of strings")
        if len(item) < 1:
            raise MalformedSyntax("empty entry")
        dev = parse_device_name(item[0])
        nodes = tuple(parse_node(t) for t in item[1:])
        if len(nodes) != len(dev.kind.roles):
            raise ArityMismatch(f"{dev.name} expects {len(dev.kind.roles)} terminals, got {len(nodes)}")
        if dev in seen:
            raise DuplicateDevice(dev.name)
        seen.add(dev)
        entries.append(Entry(dev, nodes))
    return Netlist(tuple(entries))


def emit_triple_list(n: Netlist) -> str:
    parts = []
    for e in n.entries:
        terms = ",".join(f"'{t}'" for t in e.nodes)
        parts.append(f"['{e.device.name}',{terms}]")
    return "[" + ",".join(parts) + "]"


def _node_sort_key(node: str):
    # externals first in fixed order, then internals ascending
    if node in EXTERNAL_PORTS:
        return (0, EXTERNAL_PORTS.index(node))
    return (1, int(node))


def format_duty(d: float) -> str:
    return f"{d:g}"


def encode_incident(n: Netlist, d: float) -> str:
    """Per-node incidence text: which device terminals touch each node."""
    d = check_duty(d)
    incident: dict[str, list[str]] = {}
    for e in n.entries:
        for node, role in zip(e.nodes, e.device.kind.roles):
            incident.setdefault(node, []).append(f"{e.device.name}:{role}")
    lines = []
    for node in sorted(incident, key=_node_sort_key):
        lines.append(f"Node {node} connects: " + ", ".join(incident[node]) + ".")
    lines.append(f"Duty cycle: {format_duty(d)}.")
    return "\n".join(lines) + "\n"


_NODE_LINE_RE = re.compile(r"^Node (\S+) connects: (.+)\.$")
_DUTY_LINE_RE = re.compile(r"^Duty cycle: ([0-9.]+)\.$")
_ITEM_RE = re.compile(r"^(\S+):([a-z0-9]+)$")


def parse_incident(text: str) -> tuple[Netlist, float]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedSyntax("empty incident text")
    m = _DUTY_LINE_RE.match(lines[-1])
    if not m:
        raise MalformedSyntax("missing duty line")
    duty = check_duty(float(m.group(1)))

    order: list[Device] = []
    terms: dict[Device, dict[str, str]] = {}
    for ln in lines[:-1]:
        lm = _NODE_LINE_RE.match(ln)
        if not lm:
            raise MalformedSyntax(f"bad node line {ln!r}")
        node = parse_node(lm.group(1))
        for item in lm.group(2).split(", "):
            im = _ITEM_RE.match(item)
            if not im:
                raise MalformedSyntax(f"bad incidence item {item!r}")
            dev = parse_device_name(im.group(1))
            role = im.group(2)
            if role not in dev.kind.roles:
                raise MalformedSyntax(f"role {role!r} not valid for {dev.name}")
            if dev not in terms:
                terms[dev] = {}
                order.append(dev)
            if role in terms[dev]:
                raise InconsistentIncidence(f"{dev.name}:{role} assigned twice")
            terms[dev][role] = node

    entries = []
    for dev in order:
        got = terms[dev]
        if set(got) != set(dev.kind.roles):
            raise InconsistentIncidence(f"{dev.name} has terminals {sorted(got)}, expected {dev.kind.roles}")
        entries.append(Entry(dev, tuple(got[r] for r in dev.kind.roles)))
    return Netlist(tuple(entries)), duty


@dataclass(frozen=True)
class Violation:
    rule: str
    severity: str
    subject: str = ""


def structural_check(n: Netlist) -> list[Violation]:
    """All structural violations; warning severity does not block simulation."""
    out: list[Violation] = []
    if not n.entries:
        out.append(Violation("EmptyNetlist", ERROR))

    explicit = set(n.explicit_nodes())
    implied = {net for e in n.entries for net in e.device.kind.implied_nets}
    for port in ("IN", "OUT", GROUND):
        if port not in explicit | implied:
            out.append(Violation("MissingPort", ERROR, port))

    for e in n.entries:
        if e.nodes[0] == e.nodes[1]:
            out.append(Violation("SelfLoop", ERROR, e.device.name))

    # connectivity over the explicit incidence graph (implied gate/body nets
    # carry no current and must not mask floating power paths)
    if n.entries:
        parent: dict[str, str] = {}

        def find(x: str) -> str:
            while parent.setdefault(x, x) != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in n.entries:
            a, b = find(e.nodes[0]), find(e.nodes[1])
            if a != b:
                parent[a] = b
        roots = {find(x) for x in explicit}
        if len(roots) > 1:
            out.append(Violation("DisconnectedGraph", ERROR))

    touches: dict[str, int] = {}
    for e in n.entries:
        for node in e.nodes:
            touches[node] = touches.get(node, 0) + 1
    for node, count in sorted(touches.items(), key=lambda kv: _node_sort_key(kv[0])):
        if is_internal(node) and count < 2:
            out.append(Violation("DanglingInternal", ERROR, node))

    for node in sorted(explicit & set(GATE_NETS), key=_node_sort_key):
        out.append(Violation("ExplicitGateNet", WARNING, node))
    return out


def has_structural_errors(n: Netlist) -> bool:
    return any(v.severity == ERROR for v in structural_check(n))


# ---------------------------------------------------------------------------
# Canonical key: exact canonical labeling by color refinement plus
# individualization over ambiguous cells. Graphs are tiny (<= 10 devices),
# so full backtracking is affordable.
# ---------------------------------------------------------------------------

def _build_graph(n: Netlist):
    """Bipartite device/node incidence graph with terminal-role edge labels."""
    nodes = n.explicit_nodes()
    node_ix = {name: len(n.entries) + i for i, name in enumerate(nodes)}
    nv = len(n.entries) + len(nodes)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(nv)]
    for di, e in enumerate(n.entries):
        for role_ix, node in enumerate(e.nodes):
            v = node_ix[node]
            adj[di].append((role_ix, v))
            adj[v].append((role_ix, di))
    init: list = []
    for e in n.entries:
        init.append((0, e.device.kind.value))
    for name in nodes:
        init.append((1, name if is_external(name) else "~int"))
    return adj, init, nodes


def _refine(adj, colors):
    ncolors = len(set(colors))
    while True:
        sigs = [
            (colors[v], tuple(sorted((r, colors[u]) for r, u in adj[v])))
            for v in range(len(colors))
        ]
        rank = {s: i for i, s in enumerate(sorted(set(sigs)))}
        colors = [rank[s] for s in sigs]
        if len(rank) == ncolors:
            return colors
        ncolors = len(rank)


def _canonical_string(n: Netlist, adj, colors, nodes) -> str:
    ndev = len(n.entries)
    node_name: dict[int, str] = {}
    internal_rank = 0
    for v in sorted(range(ndev, ndev + len(nodes)), key=lambda v: colors[v]):
        name = nodes[v - ndev]
        if is_external(name):
            node_name[v] = name
        else:
            node_name[v] = f"~{internal_rank}"
            internal_rank += 1
    parts = []
    for di in sorted(range(ndev), key=lambda v: colors[v]):
        terms = [None, None]
        for r, v in adj[di]:
            terms[r] = node_name[v]
        parts.append(f"{n.entries[di].device.kind.value}({terms[0]},{terms[1]})")
    return ";".join(parts)


def _search(n: Netlist, adj, colors, nodes) -> str:
    colors = _refine(adj, colors)
    cells: dict[int, list[int]] = {}
    for v, c in enumerate(colors):
        cells.setdefault(c, []).append(v)
    # branch on the smallest ambiguous cell (selection depends only on the
    # refined coloring, so isomorphic graphs branch compatibly)
    target = None
    for c in sorted(cells, key=lambda c: (len(cells[c]), c)):
        if len(cells[c]) > 1:
            target = cells[c]
            break
    if target is None:
        return _canonical_string(n, adj, colors, nodes)
    best: Optional[str] = None
    seen_twins: set = set()
    for v in target:
        # vertices with identical (role, neighbor) edges are swappable by an
        # automorphism; their branches repeat verbatim, so explore only one.
        # without this, k parallel copies of a device cost k! branches
        sig = tuple(sorted(adj[v]))
        if sig in seen_twins:
            continue
        seen_twins.add(sig)
        branched = [c * 2 for c in colors]
        branched[v] -= 1
        cand = _search(n, adj, branched, nodes)
        if best is None or cand < best:
            best = cand
    return best


@lru_cache(maxsize=None)
def canonical_key(n: Netlist) -> bytes:
    """Topology fingerprint, invariant under entry order, device reindexing
    within a kind, and bijective internal-node relabeling."""
    adj, init, nodes = _build_graph(n)
    rank = {s: i for i, s in enumerate(sorted(set(init)))}
    colors = [rank[s] for s in init]
    return _search(n, adj, colors, nodes).encode()
