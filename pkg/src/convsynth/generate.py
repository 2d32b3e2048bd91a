"""Random-search topology generation, dataset assembly, and prompts.

Datasets pair an instruction prompt with a simulated design. Valid designs
are grouped by the (efficiency, |vout-vin|) regions G1..G4 and training
batches are drawn with fixed group weights so the rare optimal region is
oversampled.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from .netlist import (
    DUTY_CYCLES,
    Device,
    Entry,
    Kind,
    Netlist,
    canonical_key,
    emit_triple_list,
    has_structural_errors,
    parse_node,
    parse_triple_list,
)
from .sim import Design, SimConfig, SimResult, simulate

KIND_ORDER = (Kind.CAPACITOR, Kind.INDUCTOR, Kind.FET_A, Kind.FET_B)
GROUPS = ("G1", "G2", "G3", "G4")
GROUP_WEIGHTS = {"G1": 0.1, "G2": 0.25, "G3": 0.25, "G4": 0.4}
G3_VOUT_BAND = 0.2  # volts; |vout - vin| below this puts high-eff designs in G3
CATEGORY_MIX = (("C", 0.2), ("CE", 0.4), ("CV", 0.4))
CE_FLOOR_GRID = (0.3, 0.5, 0.6, 0.7, 0.8)
CV_BOUND_STEP = 0.25  # volts; CV bounds drawn from this grid over (0, vin)

_KIND_LABELS = {
    Kind.CAPACITOR: ("capacitor", "capacitors"),
    Kind.INDUCTOR: ("inductor", "inductors"),
    Kind.FET_A: ("n-type MOSFET", "n-type MOSFETs"),
    Kind.FET_B: ("p-type MOSFET", "p-type MOSFETs"),
}


class GenerateError(Exception):
    pass


class ExhaustedRetries(GenerateError):
    pass


class SpaceExhausted(GenerateError):
    def __init__(self, netlists: list[Netlist], draws: int):
        super().__init__(f"dedup saturated: {len(netlists)} unique after {draws} draws")
        self.netlists = netlists
        self.draws = draws


class EmptyDataset(GenerateError):
    pass


class MissingConstraint(GenerateError):
    pass


class InvalidInput(GenerateError):
    pass


@dataclass(frozen=True)
class Prompt:
    category: str  # C | CE | CV
    pool: tuple[int, int, int, int]  # counts in KIND_ORDER
    eff_floor: Optional[float] = None
    vout_relation: Optional[str] = None
    vout_bound: Optional[float] = None
    vin: Optional[float] = None

    def __post_init__(self):
        if self.category not in ("C", "CE", "CV"):
            raise InvalidInput(f"bad category {self.category!r}")
        if len(self.pool) != 4 or any(c < 0 for c in self.pool):
            raise InvalidInput("pool must be 4 non-negative counts")
        if self.category == "CE":
            if self.eff_floor is None or not (0 < self.eff_floor < 1):
                raise MissingConstraint("CE prompt needs eff_floor in (0,1)")
        else:
            if self.eff_floor is not None:
                raise InvalidInput("eff_floor only valid for CE")
        if self.category == "CV":
            if self.vout_relation not in ("<", ">") or self.vout_bound is None or self.vin is None:
                raise MissingConstraint("CV prompt needs relation, bound and vin")
        else:
            if self.vout_relation is not None or self.vout_bound is not None or self.vin is not None:
                raise InvalidInput("vout fields only valid for CV")

    @property
    def n_components(self) -> int:
        return sum(self.pool)

    def pool_counts(self) -> dict[Kind, int]:
        return dict(zip(KIND_ORDER, self.pool))


@dataclass(frozen=True)
class DatasetRecord:
    prompt: Prompt
    design: Design
    sim: SimResult
    group: str


def pool_of(n: Netlist) -> tuple[int, int, int, int]:
    counts = n.kind_counts()
    return tuple(counts[k] for k in KIND_ORDER)


# ---------------------------------------------------------------------------
# random search
# ---------------------------------------------------------------------------

def _feasible_multisets(n: int) -> list[tuple[int, int, int, int]]:
    out = []
    for c in range(n + 1):
        for l in range(n - c + 1):
            for fa in range(n - c - l + 1):
                fb = n - c - l - fa
                if fa + fb >= 1:
                    out.append((c, l, fa, fb))
    return out


def _node_pool(n: int, node_pool: Optional[tuple[str, ...]]) -> list[str]:
    if node_pool is None:
        return ["IN", "OUT", "0"] + [str(i) for i in range(1, n + 1)]
    if not node_pool:
        raise ValueError("node_pool must be non-empty")
    for name in node_pool:
        parse_node(name)
        if name in ("GATEN", "GATEP"):
            raise ValueError("gate rails are driven by switch phasing, not assignable")
    return list(node_pool)


def _draw_topology(n: int, rng: random.Random, retries: int, nodes: list[str]) -> Netlist:
    multisets = _feasible_multisets(n)
    for _ in range(retries):
        counts = rng.choice(multisets)
        kinds = [k for k, c in zip(KIND_ORDER, counts) for _ in range(c)]
        rng.shuffle(kinds)
        index = {k: 0 for k in KIND_ORDER}
        entries = []
        for k in kinds:
            entries.append(Entry(Device(k, index[k]), (rng.choice(nodes), rng.choice(nodes))))
            index[k] += 1
        netlist = Netlist(tuple(entries))
        if not has_structural_errors(netlist):
            return netlist
    raise ExhaustedRetries(f"no structurally clean {n}-component netlist in {retries} tries")


DEFAULT_DRAW_BUDGET = 20_000


def random_topology(
    n: int,
    rng_seed: int,
    retries: int = 500,
    node_pool: Optional[tuple[str, ...]] = None,
) -> Netlist:
    if not 4 <= n <= 10:
        raise ValueError(f"component count {n} outside [4, 10]")
    return _draw_topology(n, random.Random(rng_seed), retries, _node_pool(n, node_pool))


def generate_unique(
    n: int,
    target: int,
    rng_seed: int,
    max_draws: Optional[int] = None,
    node_pool: Optional[tuple[str, ...]] = None,
) -> list[Netlist]:
    """Random search deduplicated by canonical key."""
    if target < 1:
        raise ValueError("target >= 1")
    if not 4 <= n <= 10:
        raise ValueError(f"component count {n} outside [4, 10]")
    if max_draws is None:
        max_draws = DEFAULT_DRAW_BUDGET
    rng = random.Random(rng_seed)
    nodes = _node_pool(n, node_pool)
    seen: set[bytes] = set()
    out: list[Netlist] = []
    draws = 0
    while len(out) < target and draws < max_draws:
        netlist = _draw_topology(n, rng, retries=500, nodes=nodes)
        draws += 1
        key = canonical_key(netlist)
        if key not in seen:
            seen.add(key)
            out.append(netlist)
    if len(out) < target:
        raise SpaceExhausted(out, draws)
    return out


def sweep_duties(n: Netlist) -> list[Design]:
    return [Design(n, d) for d in DUTY_CYCLES]


# ---------------------------------------------------------------------------
# grouping and weighted sampling
# ---------------------------------------------------------------------------

def assign_group(sim: SimResult, vin: float = 2.0) -> str:
    if not sim.valid:
        raise InvalidInput("grouping is defined for valid results only")
    if sim.efficiency < 0.05:
        return "G1"
    if sim.efficiency <= 0.7:
        return "G2"
    return "G3" if abs(sim.vout - vin) < G3_VOUT_BAND else "G4"


def weighted_sample(records: list[DatasetRecord], batch: int, rng_seed: int) -> list[DatasetRecord]:
    if not records:
        raise EmptyDataset("no records to sample")
    rng = random.Random(rng_seed)
    by_group: dict[str, list[DatasetRecord]] = {}
    for r in records:
        by_group.setdefault(r.group, []).append(r)
    groups = [g for g in GROUPS if g in by_group]
    weights = [GROUP_WEIGHTS[g] for g in groups]  # renormalized by choices()
    out = []
    for _ in range(batch):
        g = rng.choices(groups, weights=weights)[0]
        out.append(rng.choice(by_group[g]))
    return out


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:g}"


def _join_names(names: list[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def render_prompt(p: Prompt) -> str:
    if p.n_components < 1:
        raise MissingConstraint("empty component pool")
    clauses = []
    names: list[str] = []
    for kind, count in zip(KIND_ORDER, p.pool):
        if count == 0:
            continue
        kind_names = [f"{kind.value}-{i}" for i in range(count)]
        names.extend(kind_names)
        label = _KIND_LABELS[kind][0 if count == 1 else 1]
        clauses.append(f"{label}: {_join_names(kind_names)}")
    if len(clauses) > 1:
        clauses[-1] = "and " + clauses[-1]
    listing = "; ".join(clauses)
    name_list = "[" + ", ".join(f"'{x}'" for x in names) + "]"
    text = (
        f"Generate a {p.n_components}-component circuit with {listing}; "
        f"representing different nodes: {name_list}"
    )
    if p.category == "CE":
        text += f" with efficiency greater than {_fmt(p.eff_floor)}"
    elif p.category == "CV":
        rel = "less than" if p.vout_relation == "<" else "greater than"
        text += f" with Vout {rel} {_fmt(p.vout_bound)}V when Vin equals {_fmt(p.vin)}V"
    return text


def prompt_for_record(design: Design, sim: SimResult, category: str, vin: float = 2.0) -> Prompt:
    """Constraint values derived from what the design actually achieves."""
    pool = pool_of(design.netlist)
    if category == "C":
        return Prompt("C", pool)
    if category == "CE":
        floors = [f for f in CE_FLOOR_GRID if sim.efficiency > f]
        if not floors:
            raise MissingConstraint(f"no grid floor below efficiency {sim.efficiency:.3f}")
        return Prompt("CE", pool, eff_floor=max(floors))
    if category == "CV":
        grid = [round(CV_BOUND_STEP * i, 2) for i in range(1, int(vin / CV_BOUND_STEP))]
        candidates = [b for b in grid if abs(sim.vout - b) > 1e-9]
        if not candidates:
            raise MissingConstraint("vout sits exactly on every grid point")
        bound = min(candidates, key=lambda b: (abs(sim.vout - b), b))
        relation = "<" if sim.vout < bound else ">"
        return Prompt("CV", pool, vout_relation=relation, vout_bound=bound, vin=vin)
    raise InvalidInput(f"bad category {category!r}")


def build_prompt(source, category: str, vin: float = 2.0) -> tuple[Prompt, str]:
    """Prompt plus rendered text, from a DatasetRecord-like source or a pool.

    `source` is either a (design, sim) carrier (anything with .design/.sim),
    an already-built Prompt (re-rendered), or a 4-tuple of pool counts for
    category C.
    """
    if isinstance(source, Prompt):
        prompt = source
    elif hasattr(source, "design") and hasattr(source, "sim"):
        prompt = prompt_for_record(source.design, source.sim, category, vin=vin)
    else:
        prompt = Prompt(category, tuple(source))
    text = render_prompt(prompt)
    return prompt, text


def pick_category(rng: random.Random) -> str:
    r = rng.random()
    acc = 0.0
    for cat, w in CATEGORY_MIX:
        acc += w
        if r < acc:
            return cat
    return CATEGORY_MIX[-1][0]


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class DatasetBuild:
    records: list[DatasetRecord]
    all_designs: list[tuple[Design, SimResult]]
    unique_netlists: int
    draws_exhausted: bool


def build_dataset(
    n: int,
    target: int,
    rng_seed: int,
    cfg: SimConfig = SimConfig(),
    max_draws: Optional[int] = None,
) -> DatasetBuild:
    """generate -> dedup -> duty sweep -> simulate -> group -> prompt."""
    exhausted = False
    try:
        netlists = generate_unique(n, target, rng_seed, max_draws=max_draws)
    except SpaceExhausted as exc:
        netlists = exc.netlists
        exhausted = True
    if not netlists:
        raise EmptyDataset("random search found nothing")
    rng = random.Random(rng_seed + 1)
    records: list[DatasetRecord] = []
    all_designs: list[tuple[Design, SimResult]] = []
    for netlist in netlists:
        for design in sweep_duties(netlist):
            sim = simulate(design, cfg)
            all_designs.append((design, sim))
            if not sim.valid:
                continue
            category = pick_category(rng)
            try:
                prompt = prompt_for_record(design, sim, category, vin=cfg.vin)
            except MissingConstraint:
                prompt = prompt_for_record(design, sim, "C", vin=cfg.vin)
            records.append(DatasetRecord(prompt, design, sim, assign_group(sim, vin=cfg.vin)))
    return DatasetBuild(records, all_designs, len(netlists), exhausted)


# ---------------------------------------------------------------------------
# JSON object mapping (serialization itself lives in the CLI layer)
# ---------------------------------------------------------------------------

def prompt_to_obj(p: Prompt) -> dict:
    return {
        "category": p.category,
        "pool": {k.value: c for k, c in zip(KIND_ORDER, p.pool)},
        "eff_floor": p.eff_floor,
        "vout_relation": p.vout_relation,
        "vout_bound": p.vout_bound,
        "vin": p.vin,
    }


def prompt_from_obj(obj: dict) -> Prompt:
    pool = tuple(int(obj.get("pool", {}).get(k.value, 0)) for k in KIND_ORDER)
    return Prompt(
        obj["category"],
        pool,
        eff_floor=obj.get("eff_floor"),
        vout_relation=obj.get("vout_relation"),
        vout_bound=obj.get("vout_bound"),
        vin=obj.get("vin"),
    )


def design_to_obj(d: Design) -> dict:
    return {"netlist": emit_triple_list(d.netlist), "duty": d.duty}


def design_from_obj(obj: dict) -> Design:
    return Design(parse_triple_list(obj["netlist"]), float(obj["duty"]))


def sim_to_obj(s: SimResult) -> dict:
    return {
        "valid": s.valid,
        "vout": s.vout,
        "efficiency": s.efficiency,
        "periods_run": s.periods_run,
        "failure": s.failure,
    }


def sim_from_obj(obj: dict) -> SimResult:
    return SimResult(
        bool(obj["valid"]),
        float(obj["vout"]),
        float(obj["efficiency"]),
        int(obj["periods_run"]),
        obj.get("failure"),
    )


def record_to_obj(r: DatasetRecord) -> dict:
    return {
        "prompt": prompt_to_obj(r.prompt),
        "design": design_to_obj(r.design),
        "sim": sim_to_obj(r.sim),
        "group": r.group,
    }


def record_from_obj(obj: dict) -> DatasetRecord:
    return DatasetRecord(
        prompt_from_obj(obj["prompt"]),
        design_from_obj(obj["design"]),
        sim_from_obj(obj["sim"]),
        obj["group"],
    )
