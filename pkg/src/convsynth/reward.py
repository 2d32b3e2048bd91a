"""Constraint score estimators and the RL reward.

Two interchangeable backends produce (s_valid, s_eff, s_vout) for a design:
the simulator oracle, and small learned models over hand-built graph
features. The reward maps scores plus the prompt's constraint to [-1, 1]:
invalid designs score -1, constraint-satisfying ones score 1, everything
else passes the efficiency estimate through.
"""
from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .generate import Prompt
from .netlist import DUTY_CYCLES, Kind, Netlist, canonical_key
from .sim import Design, SimConfig, SimResult, simulate

VALID_THRESHOLD = 0.6  # s_valid below this marks a design invalid for reward
FEATURE_VERSION = "graph-v2/58"
_DEGREE_BINS = 6  # histogram bins for node degrees 1..5 and >=6
_KINDS = (Kind.CAPACITOR, Kind.INDUCTOR, Kind.FET_A, Kind.FET_B)
_PORTS = ("IN", "OUT", "0")
_PORT_PAIRS = (("IN", "OUT"), ("IN", "0"), ("OUT", "0"))


class RewardError(Exception):
    pass


class UntrainedBackend(RewardError):
    pass


class VersionMismatch(RewardError):
    pass


@dataclass(frozen=True)
class RewardScores:
    s_valid: float
    s_eff: float
    s_vout: float

    def __post_init__(self):
        if not (0.0 <= self.s_valid <= 1.0 and 0.0 <= self.s_eff <= 1.0):
            raise ValueError("s_valid and s_eff must lie in [0, 1]")
        if not math.isfinite(self.s_vout):
            raise ValueError("s_vout must be finite")


# ---------------------------------------------------------------------------
# feature map
# ---------------------------------------------------------------------------

def _adjacency(n: Netlist) -> dict[str, set[str]]:
    adj: dict[str, set[str]] = {}
    for e in n.entries:
        a, b = e.nodes
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    return adj


def _flagged_reach(n: Netlist, want: set[Kind]) -> bool:
    """True when some IN->OUT walk crosses at least one device of `want`."""
    edges: dict[str, list[tuple[str, bool]]] = {}
    for e in n.entries:
        a, b = e.nodes
        flag = e.device.kind in want
        edges.setdefault(a, []).append((b, flag))
        edges.setdefault(b, []).append((a, flag))
    seen = {("IN", False)}
    queue = deque([("IN", False)])
    while queue:
        node, flagged = queue.popleft()
        if node == "OUT" and flagged:
            return True
        for nxt, f in edges.get(node, []):
            state = (nxt, flagged or f)
            if state not in seen:
                seen.add(state)
                queue.append(state)
    return False


def _diameter(adj: dict[str, set[str]]) -> int:
    best = 0
    for start in adj:
        dist = {start: 0}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in adj[node]:
                if nxt not in dist:
                    dist[nxt] = dist[node] + 1
                    queue.append(nxt)
        if dist:
            best = max(best, max(dist.values()))
    return best


def _dc_conductance(kind: Kind, phase_a: bool, r_on: float, r_off: float) -> Optional[float]:
    """Averaged-model element values: inductors short, capacitors open."""
    if kind is Kind.CAPACITOR:
        return None
    if kind is Kind.INDUCTOR:
        return 1e4
    if kind is Kind.FET_B:
        return 1.0 / (r_on if phase_a else r_off)
    return 1.0 / (r_on if not phase_a else r_off)


def _dc_phase(
    n: Netlist, phase_a: bool, vin: float, r_on: float, r_off: float, r_load: float
) -> tuple[float, float, float]:
    """Resistive DC solve of one switching phase: (vout, p_out, p_in)."""
    nodes = [x for x in n.explicit_nodes() if x not in ("0", "IN")]
    if "OUT" not in nodes:
        nodes.append("OUT")
    ix = {name: i for i, name in enumerate(nodes)}
    g = np.zeros((len(nodes), len(nodes)))
    rhs = np.zeros(len(nodes))

    def stamp(a: str, b: str, cond: float) -> None:
        for x, y in ((a, b), (b, a)):
            if x in ("0", "IN"):
                continue
            i = ix[x]
            g[i, i] += cond
            if y == "IN":
                rhs[i] += cond * vin
            elif y != "0":
                g[i, ix[y]] -= cond

    conds = []
    for e in n.entries:
        cond = _dc_conductance(e.device.kind, phase_a, r_on, r_off)
        conds.append(cond)
        if cond is not None:
            stamp(e.nodes[0], e.nodes[1], cond)
    stamp("OUT", "0", 1.0 / r_load)
    g[np.diag_indices_from(g)] += 1e-9
    try:
        v = np.linalg.solve(g, rhs)
    except np.linalg.LinAlgError:
        return 0.0, 0.0, 0.0
    if not np.all(np.isfinite(v)):
        return 0.0, 0.0, 0.0
    volt = {name: float(v[i]) for name, i in ix.items()}
    volt["0"] = 0.0
    volt["IN"] = vin
    i_in = 0.0
    for e, cond in zip(n.entries, conds):
        a, b = e.nodes
        if cond is None or "IN" not in (a, b):
            continue
        other = b if a == "IN" else a
        i_in += cond * (vin - volt[other])
    vout = volt["OUT"]
    return vout, vout * vout / r_load, vin * i_in


def _dc_proxy(d: Design, vin=2.0, r_on=0.05, r_off=10e6, r_load=10.0) -> list[float]:
    va, pout_a, pin_a = _dc_phase(d.netlist, True, vin, r_on, r_off, r_load)
    vb, pout_b, pin_b = _dc_phase(d.netlist, False, vin, r_on, r_off, r_load)
    w = d.duty
    p_in = w * pin_a + (1 - w) * pin_b
    p_out = w * pout_a + (1 - w) * pout_b
    eff = min(1.0, max(0.0, p_out / p_in)) if p_in > 1e-9 else 0.0
    return [va, vb, w * va + (1 - w) * vb, eff]


FEATURE_NAMES = (
    ["n_capacitor", "n_inductor", "n_fet_a", "n_fet_b"]
    + [f"duty_{d}" for d in DUTY_CYCLES]
    + [f"degree_hist_{i}" for i in range(1, _DEGREE_BINS + 1)]
    + ["switch_on_in_out_path", "inductor_on_in_out_path", "caps_on_out", "diameter"]
    + ["duty"]
    + [f"{k.value}_touches_{p}" for k in _KINDS for p in _PORTS]
    + [f"{k.value}_bridges_{a}_{b}" for k in _KINDS for a, b in _PORT_PAIRS]
    + [f"{k.value}_touches_internal" for k in _KINDS]
    + ["n_internal_nodes", "out_reachable", "in_out_hop_distance", "parallel_duplicates",
       "max_degree", "n_nodes"]
    + ["dc_vout_phase_a", "dc_vout_phase_b", "dc_vout_duty_avg", "dc_eff_duty_avg"]
)
_FEATURE_IX = {name: i for i, name in enumerate(FEATURE_NAMES)}


def feature_index(name: str) -> int:
    return _FEATURE_IX[name]


def featurize(d: Design) -> np.ndarray:
    """Relabel-invariant design features.

    Graph statistics (kind counts, duty one-hot, degree histogram, IN-OUT
    path flags, port incidences) plus a duty-averaged DC resistive proxy
    (inductors shorted, capacitors open) that captures first-order transfer
    behavior without running the transient simulator.
    """
    n = d.netlist
    counts = n.kind_counts()
    out = [float(counts[k]) for k in _KINDS]
    out += [1.0 if abs(d.duty - dc) < 1e-12 else 0.0 for dc in DUTY_CYCLES]

    degree: dict[str, int] = {}
    for e in n.entries:
        for node in e.nodes:
            degree[node] = degree.get(node, 0) + 1
    hist = [0.0] * _DEGREE_BINS
    for deg in degree.values():
        hist[min(deg, _DEGREE_BINS) - 1] += 1.0
    out += hist

    out.append(1.0 if _flagged_reach(n, {Kind.FET_A, Kind.FET_B}) else 0.0)
    out.append(1.0 if _flagged_reach(n, {Kind.INDUCTOR}) else 0.0)
    out.append(
        float(sum(1 for e in n.entries if e.device.kind is Kind.CAPACITOR and "OUT" in e.nodes))
    )
    adj = _adjacency(n)
    out.append(float(_diameter(adj)))

    out.append(d.duty)
    for k in _KINDS:
        for p in _PORTS:
            out.append(float(sum(1 for e in n.entries if e.device.kind is k and p in e.nodes)))
    for k in _KINDS:
        for a, b in _PORT_PAIRS:
            out.append(
                float(sum(1 for e in n.entries if e.device.kind is k and set(e.nodes) == {a, b}))
            )
    for k in _KINDS:
        out.append(
            float(
                sum(
                    1
                    for e in n.entries
                    if e.device.kind is k and any(x not in _PORTS for x in e.nodes)
                )
            )
        )
    out.append(float(len(n.internal_nodes())))

    dist = {"IN": 0}
    queue = deque(["IN"])
    while queue:
        node = queue.popleft()
        for nxt in adj.get(node, ()):
            if nxt not in dist:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    out.append(1.0 if "OUT" in dist else 0.0)
    out.append(float(dist.get("OUT", 0)))

    seen_pairs: dict[tuple, int] = {}
    for e in n.entries:
        key = (e.device.kind, frozenset(e.nodes))
        seen_pairs[key] = seen_pairs.get(key, 0) + 1
    out.append(float(sum(c - 1 for c in seen_pairs.values() if c > 1)))
    out.append(float(max(degree.values()) if degree else 0))
    out.append(float(len(degree)))

    out.extend(_dc_proxy(d))
    vec = np.array(out, dtype=np.float64)
    assert len(vec) == len(FEATURE_NAMES)
    return vec


def _poly2(x: np.ndarray) -> np.ndarray:
    """x plus all pairwise products x_i*x_j for i <= j."""
    cross = np.outer(x, x)
    iu = np.triu_indices(len(x))
    return np.concatenate([x, cross[iu]])


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

@dataclass
class RewardBackend:
    mode: str  # oracle | learned
    cfg: SimConfig = SimConfig()
    params: Optional[dict] = None
    metrics: dict = field(default_factory=dict)
    _sim_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def simulate_cached(self, d: Design) -> SimResult:
        key = (canonical_key(d.netlist), d.duty, self.cfg.fingerprint())
        hit = self._sim_cache.get(key)
        if hit is None:
            hit = simulate(d, self.cfg)
            self._sim_cache[key] = hit
        return hit


def oracle_backend(cfg: SimConfig = SimConfig()) -> RewardBackend:
    return RewardBackend("oracle", cfg)


def _standardize_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def fit_backend(
    pairs: list[tuple[Design, SimResult]],
    cfg: SimConfig = SimConfig(),
    holdout_frac: float = 0.25,
    rng_seed: int = 0,
) -> RewardBackend:
    """Train the learned estimators on simulated designs.

    Validity is a logistic model over the raw features; efficiency and vout
    are ridge regressions over degree-2 feature crosses, fit on valid
    designs only. Held-out metrics land in backend.metrics.
    """
    from sklearn.linear_model import LogisticRegression, Ridge
    from sklearn.metrics import f1_score, mean_squared_error

    if len(pairs) < 20:
        raise ValueError("need at least 20 simulated designs")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(pairs))
    cut = max(1, int(len(pairs) * (1 - holdout_frac)))
    train_ix, held_ix = order[:cut], order[cut:]

    feats = np.stack([featurize(d) for d, _ in pairs])
    valid = np.array([1.0 if s.valid else 0.0 for _, s in pairs])
    eff = np.array([s.efficiency for _, s in pairs])
    vout = np.array([s.vout for _, s in pairs])
    if len(set(valid[train_ix])) < 2:
        raise ValueError("training split needs both valid and invalid designs")

    mean, scale = _standardize_fit(feats[train_ix])
    z = (feats - mean) / scale
    zpoly = np.stack([_poly2(row) for row in z])

    clf = LogisticRegression(max_iter=5000, C=0.1)
    clf.fit(zpoly[train_ix], valid[train_ix])

    tv = train_ix[valid[train_ix] == 1.0]
    if len(tv) < 5:
        raise ValueError("too few valid designs to fit regressors")
    reg_eff = Ridge(alpha=10.0).fit(zpoly[tv], eff[tv])
    reg_vout = Ridge(alpha=10.0).fit(zpoly[tv], vout[tv])

    params = {
        "version": FEATURE_VERSION,
        "mean": mean.tolist(),
        "scale": scale.tolist(),
        "validity": {
            "coef": clf.coef_[0].tolist(),
            "intercept": float(clf.intercept_[0]),
        },
        "eff": {"coef": reg_eff.coef_.tolist(), "intercept": float(reg_eff.intercept_)},
        "vout": {"coef": reg_vout.coef_.tolist(), "intercept": float(reg_vout.intercept_)},
    }
    backend = RewardBackend("learned", cfg, params)

    metrics: dict = {"train_size": int(len(train_ix)), "held_size": int(len(held_ix))}
    if len(held_ix):
        pred_v = np.array(
            [estimate_validity(pairs[i][0], backend) >= VALID_THRESHOLD for i in held_ix]
        )
        metrics["validity_f1"] = float(f1_score(valid[held_ix] == 1.0, pred_v))
        hv = [i for i in held_ix if valid[i] == 1.0]
        if hv:
            pe = [estimate_efficiency(pairs[i][0], backend, gate_validity=False) for i in hv]
            pv = [estimate_vout(pairs[i][0], backend) for i in hv]
            metrics["eff_mse"] = float(mean_squared_error(eff[hv], pe))
            metrics["vout_mse"] = float(mean_squared_error(vout[hv], pv))
    backend.metrics = metrics
    return backend


def save_backend(backend: RewardBackend, path: str) -> None:
    if backend.mode != "learned" or backend.params is None:
        raise UntrainedBackend("only trained learned backends persist")
    blob = {"params": backend.params, "metrics": backend.metrics}
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(blob, fh)
    os.replace(tmp, path)


def load_backend(path: str, cfg: SimConfig = SimConfig()) -> RewardBackend:
    with open(path) as fh:
        blob = json.load(fh)
    version = blob.get("params", {}).get("version")
    if version != FEATURE_VERSION:
        raise VersionMismatch(f"feature map {version!r}, expected {FEATURE_VERSION!r}")
    return RewardBackend("learned", cfg, blob["params"], blob.get("metrics", {}))


def _require_params(backend: RewardBackend) -> dict:
    if backend.params is None:
        raise UntrainedBackend("learned backend has no parameters")
    return backend.params


def _z(backend: RewardBackend, d: Design) -> np.ndarray:
    p = _require_params(backend)
    return (featurize(d) - np.asarray(p["mean"])) / np.asarray(p["scale"])


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def estimate_validity(d: Design, backend: RewardBackend) -> float:
    if backend.mode == "oracle":
        return 1.0 if backend.simulate_cached(d).valid else 0.0
    p = _require_params(backend)["validity"]
    logit = float(np.dot(p["coef"], _poly2(_z(backend, d))) + p["intercept"])
    # exp() overflows beyond ~709; the probability saturates there anyway
    if logit < -700:
        return 0.0
    return 1.0 / (1.0 + math.exp(-logit))


def estimate_efficiency(d: Design, backend: RewardBackend, gate_validity: bool = True) -> float:
    if backend.mode == "oracle":
        return backend.simulate_cached(d).efficiency
    if gate_validity and estimate_validity(d, backend) < VALID_THRESHOLD:
        return 0.0  # mirror the oracle's zero efficiency for invalid designs
    p = _require_params(backend)["eff"]
    pred = float(np.dot(p["coef"], _poly2(_z(backend, d))) + p["intercept"])
    return min(1.0, max(0.0, pred))


def estimate_vout(d: Design, backend: RewardBackend) -> float:
    if backend.mode == "oracle":
        return backend.simulate_cached(d).vout
    p = _require_params(backend)["vout"]
    return float(np.dot(p["coef"], _poly2(_z(backend, d))) + p["intercept"])


def compute_scores(d: Design, backend: RewardBackend) -> RewardScores:
    return RewardScores(
        estimate_validity(d, backend),
        estimate_efficiency(d, backend),
        estimate_vout(d, backend),
    )


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

def constraint_met(x: Prompt, scores: RewardScores) -> bool:
    if x.category == "CE":
        return scores.s_eff > x.eff_floor
    if x.category == "CV":
        if x.vout_relation == "<":
            return scores.s_vout < x.vout_bound
        return scores.s_vout > x.vout_bound
    return False


def reward(x: Prompt, y: Design, scores: RewardScores) -> float:
    if scores.s_valid < VALID_THRESHOLD:
        return -1.0
    if constraint_met(x, scores):
        return 1.0
    return float(scores.s_eff)
