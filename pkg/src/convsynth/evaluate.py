"""Evaluation metrics over sampled generations.

Four expectation columns (estimator- and simulator-based validity and
efficiency), the duplicate generation rate, per-category success rates and
SuccessRate@m. Success is always simulator-adjudicated, even when training
used a learned reward estimator.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import torch

from .generate import Prompt, pool_of
from .netlist import canonical_key
from .policy import TrainConfig, Policy, sample_batch, tokens_to_design
from .reward import (
    VALID_THRESHOLD,
    RewardBackend,
    estimate_efficiency,
    estimate_validity,
    oracle_backend,
)
from .sim import Design, SimResult

CATEGORIES = ("C", "CE", "CV")
SUCCESS_AT = (1, 3, 5)
_SAMPLE_CHUNK = 50


class EvaluateError(Exception):
    pass


class EmptySampleSet(EvaluateError):
    pass


class EmptyPromptSet(EvaluateError):
    pass


class InvalidCounts(EvaluateError):
    pass


@dataclass
class EvalReport:
    e_valid_clf: float
    e_valid_sim: float
    e_eff_clf: float
    e_eff_sim: float
    dgr: float
    sigma: dict[str, float]  # category -> percentage, plus overall "O"
    success_at_m: dict[int, float]  # m -> percentage
    sample_count: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("e_valid_clf", "e_valid_sim", "e_eff_clf", "e_eff_sim"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")
        for v in list(self.sigma.values()) + list(self.success_at_m.values()):
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"rate {v} outside [0,100]")
        if self.dgr < 1.0:
            raise ValueError("dgr >= 1")

    def to_json(self) -> str:
        obj = {
            "e_valid_clf": self.e_valid_clf,
            "e_valid_sim": self.e_valid_sim,
            "e_eff_clf": self.e_eff_clf,
            "e_eff_sim": self.e_eff_sim,
            "dgr": self.dgr,
            "sigma": self.sigma,
            "success_at_m": {str(m): v for m, v in self.success_at_m.items()},
            "sample_count": self.sample_count,
            "extra": self.extra,
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    def csv_row(self) -> dict[str, float]:
        row = {
            "e_valid_clf": self.e_valid_clf,
            "e_valid_sim": self.e_valid_sim,
            "e_eff_clf": self.e_eff_clf,
            "e_eff_sim": self.e_eff_sim,
            "dgr": self.dgr,
            "sample_count": self.sample_count,
        }
        for cat, v in self.sigma.items():
            row[f"sigma_{cat}"] = v
        for m, v in self.success_at_m.items():
            row[f"success_at_{m}"] = v
        return row


def write_report_csv(reports: list[tuple[str, EvalReport]], path: str) -> None:
    """One flat row per (label, report)."""
    if not reports:
        return
    fields = ["label"] + list(reports[0][1].csv_row().keys())
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for label, report in reports:
            writer.writerow({"label": label, **report.csv_row()})
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# expectation columns and DGR
# ---------------------------------------------------------------------------

def expected_scores(samples: list[Design], backend: RewardBackend) -> tuple[float, float]:
    """(e_valid, e_eff) over a set of unique designs.

    Learned backends threshold their validity score at 0.6; the oracle counts
    simulator validity directly. Invalid designs contribute 0 efficiency.
    """
    if not samples:
        raise EmptySampleSet("no samples")
    n_valid = 0
    eff_total = 0.0
    for d in samples:
        if estimate_validity(d, backend) >= VALID_THRESHOLD:
            n_valid += 1
        eff_total += estimate_efficiency(d, backend)  # gated to 0 when invalid
    return n_valid / len(samples), eff_total / len(samples)


def dgr(generated: int, unique: int) -> float:
    """Duplicate generation rate: total generated over distinct topologies."""
    if unique < 1 or generated < unique:
        raise InvalidCounts(f"generated={generated} unique={unique}")
    return generated / unique


def dgr_of_designs(designs: list[Design]) -> float:
    """DGR over a sample set; samples collide on canonical topology.

    Duty is an operating point, not part of the topology, so the same
    netlist at two duty cycles still counts as one unique generation.
    """
    if not designs:
        raise EmptySampleSet("no designs")
    keys = {canonical_key(d.netlist) for d in designs}
    return dgr(len(designs), len(keys))


# ---------------------------------------------------------------------------
# success
# ---------------------------------------------------------------------------

def success(prompt: Prompt, d: Design, sim: SimResult) -> bool:
    """Simulator-adjudicated prompt satisfaction.

    Every category requires validity and an exact component-multiset match
    with the prompt's pool; CE adds the efficiency floor, CV the output
    voltage bound.
    """
    if not sim.valid:
        return False
    if pool_of(d.netlist) != prompt.pool:
        return False
    if prompt.category == "CE":
        return sim.efficiency > prompt.eff_floor
    if prompt.category == "CV":
        if prompt.vout_relation == "<":
            return sim.vout < prompt.vout_bound
        return sim.vout > prompt.vout_bound
    return True


def success_rate(
    policy: Policy,
    prompts: list[Prompt],
    m: int = max(SUCCESS_AT),
    rng_seed: int = 0,
    backend: RewardBackend | None = None,
    cfg: TrainConfig = TrainConfig(),
) -> "SuccessTable":
    """Draw m generations per prompt and score them with the simulator.

    SuccessRate@k uses the first k of the same m draws, which makes the
    curve monotone in k by construction.
    """
    if not prompts:
        raise EmptyPromptSet("no prompts")
    if m < 1:
        raise ValueError("m >= 1")
    backend = backend if backend is not None else oracle_backend()
    gen = torch.Generator().manual_seed(rng_seed)
    wins: list[list[bool]] = []
    designs: list[Design] = []
    for i in range(0, len(prompts), _SAMPLE_CHUNK):
        chunk = prompts[i : i + _SAMPLE_CHUNK]
        rows = [[] for _ in chunk]
        for _ in range(m):
            for row, x, (tokens, _) in zip(rows, chunk, sample_batch(policy, chunk, cfg, gen)):
                d = tokens_to_design(tokens)
                designs.append(d)
                row.append(success(x, d, backend.simulate_cached(d)))
        wins.extend(rows)
    return SuccessTable(prompts, wins, designs)


@dataclass
class SuccessTable:
    """Per-prompt success outcomes for the first k of m generations."""

    prompts: list[Prompt]
    wins: list[list[bool]]  # [prompt][draw]
    designs: list[Design]

    def at(self, k: int) -> float:
        """SuccessRate@k as a percentage."""
        if k < 1 or any(len(row) < k for row in self.wins):
            raise ValueError(f"k={k} exceeds drawn generations")
        hit = sum(1 for row in self.wins if any(row[:k]))
        return 100.0 * hit / len(self.wins)

    def sigma(self) -> dict[str, float]:
        """Per-category success percentages at m=1 plus the overall 'O'."""
        out: dict[str, float] = {}
        for cat in CATEGORIES:
            rows = [row for x, row in zip(self.prompts, self.wins) if x.category == cat]
            out[cat] = 100.0 * sum(1 for r in rows if r[0]) / len(rows) if rows else 0.0
        out["O"] = 100.0 * sum(1 for r in self.wins if r[0]) / len(self.wins)
        return out


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

def evaluate_policy(
    policy: Policy,
    prompts: list[Prompt],
    clf_backend: RewardBackend,
    oracle: RewardBackend,
    rng_seed: int = 0,
    m: int = max(SUCCESS_AT),
    cfg: TrainConfig = TrainConfig(),
    at_values: tuple[int, ...] | None = None,
) -> EvalReport:
    """Sample the policy over a prompt set and aggregate every metric."""
    table = success_rate(policy, prompts, m=m, rng_seed=rng_seed, backend=oracle, cfg=cfg)
    # designs are draw-major within each sampling chunk; pick draw 0 per prompt
    first_draw: list[Design] = []
    pos = 0
    for i in range(0, len(prompts), _SAMPLE_CHUNK):
        chunk_n = len(prompts[i : i + _SAMPLE_CHUNK])
        first_draw.extend(table.designs[pos : pos + chunk_n])
        pos += chunk_n * m
    unique: dict = {}
    for d in table.designs:
        unique.setdefault((canonical_key(d.netlist), d.duty), d)
    unique_designs = list(unique.values())
    e_valid_clf, e_eff_clf = expected_scores(unique_designs, clf_backend)
    e_valid_sim, e_eff_sim = expected_scores(unique_designs, oracle)
    return EvalReport(
        e_valid_clf=e_valid_clf,
        e_valid_sim=e_valid_sim,
        e_eff_clf=e_eff_clf,
        e_eff_sim=e_eff_sim,
        dgr=dgr_of_designs(first_draw),
        sigma=table.sigma(),
        success_at_m={k: table.at(k) for k in (at_values or SUCCESS_AT) if k <= m},
        sample_count=len(table.designs),
    )
