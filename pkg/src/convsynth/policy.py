"""Autoregressive netlist policy over a constrained token grammar.

A sequence spells out netlist entries (kind, index, two nodes) separated by
a divider, then a duty token and end-of-sequence. Grammar masking keeps
every sampled sequence decodable. Training covers supervised NLL, PPO with
an exact per-step KL penalty to a frozen reference, and iterative
self-adaptation rounds on high-efficiency samples.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import math
import random
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .generate import Prompt
from .netlist import DUTY_CYCLES, Device, Entry, Kind, Netlist, canonical_key, check_duty
from .reward import (
    VALID_THRESHOLD,
    RewardBackend,
    compute_scores,
    estimate_efficiency,
    estimate_validity,
    oracle_backend,
    reward as reward_fn,
)
from .sim import Design

MAX_ENTRIES = 10
MAX_INTERNAL = 10
MAX_SEQ_LEN = MAX_ENTRIES * 4 + (MAX_ENTRIES - 1) + 2  # entries + separators + duty + eos

_KINDS = (Kind.CAPACITOR, Kind.INDUCTOR, Kind.FET_A, Kind.FET_B)
KIND_TOKENS = tuple(k.value for k in _KINDS)
INDEX_TOKENS = tuple(f"#{i}" for i in range(MAX_ENTRIES))
NODE_TOKENS = ("IN", "OUT", "0") + tuple(str(i) for i in range(1, MAX_INTERNAL + 1))
SEP_TOKEN = ";"
DUTY_TOKENS = tuple(f"D={d}" for d in DUTY_CYCLES)
EOS_TOKEN = "<eos>"
VOCAB: tuple[str, ...] = (
    KIND_TOKENS + INDEX_TOKENS + NODE_TOKENS + (SEP_TOKEN,) + DUTY_TOKENS + (EOS_TOKEN,)
)
VOCAB_SIZE = len(VOCAB)
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}
_KIND_IDS = tuple(TOKEN_ID[t] for t in KIND_TOKENS)
_INDEX_IDS = tuple(TOKEN_ID[t] for t in INDEX_TOKENS)
_NODE_IDS = tuple(TOKEN_ID[t] for t in NODE_TOKENS)
_SEP_ID = TOKEN_ID[SEP_TOKEN]
_DUTY_IDS = tuple(TOKEN_ID[t] for t in DUTY_TOKENS)
_EOS_ID = TOKEN_ID[EOS_TOKEN]
_ID_TO_KIND = {TOKEN_ID[k.value]: k for k in _KINDS}
_DUTY_BY_ID = {TOKEN_ID[f"D={d}"]: d for d in DUTY_CYCLES}

PROMPT_DIM = 13


def vocab_hash() -> str:
    return hashlib.sha256("|".join(VOCAB).encode()).hexdigest()[:16]


class PolicyError(Exception):
    pass


class OutOfVocabulary(PolicyError):
    pass


class MalformedSequence(PolicyError):
    pass


class Diverged(PolicyError):
    pass


class Truncated(PolicyError):
    pass


class PoolStarvation(PolicyError):
    pass


class CheckpointMismatch(PolicyError):
    pass


# ---------------------------------------------------------------------------
# grammar
# ---------------------------------------------------------------------------

class GrammarState:
    """Tracks which tokens may come next while a sequence is produced."""

    __slots__ = ("mode", "kind_counts", "entries", "pending_kind")

    def __init__(self):
        self.mode = "kind"
        self.kind_counts = {k: 0 for k in _KINDS}
        self.entries = 0
        self.pending_kind: Optional[Kind] = None

    def legal_ids(self) -> tuple[int, ...]:
        if self.mode == "kind":
            return tuple(
                tid for tid, k in zip(_KIND_IDS, _KINDS) if self.kind_counts[k] < MAX_ENTRIES
            )
        if self.mode == "index":
            # device indices are forced to be sequential per kind
            return (_INDEX_IDS[self.kind_counts[self.pending_kind]],)
        if self.mode in ("node1", "node2"):
            return _NODE_IDS
        if self.mode == "sep_or_duty":
            if self.entries < MAX_ENTRIES:
                return (_SEP_ID,) + _DUTY_IDS
            return _DUTY_IDS
        if self.mode == "eos":
            return (_EOS_ID,)
        return ()

    @property
    def done(self) -> bool:
        return self.mode == "done"

    def advance(self, token_id: int) -> None:
        if token_id not in self.legal_ids():
            raise MalformedSequence(
                f"token {VOCAB[token_id]!r} illegal in state {self.mode!r}"
            )
        if self.mode == "kind":
            self.pending_kind = _ID_TO_KIND[token_id]
            self.mode = "index"
        elif self.mode == "index":
            self.mode = "node1"
        elif self.mode == "node1":
            self.mode = "node2"
        elif self.mode == "node2":
            self.kind_counts[self.pending_kind] += 1
            self.entries += 1
            self.pending_kind = None
            self.mode = "sep_or_duty"
        elif self.mode == "sep_or_duty":
            self.mode = "kind" if token_id == _SEP_ID else "eos"
        elif self.mode == "eos":
            self.mode = "done"


def sequence_masks(tokens: Sequence[int]) -> torch.Tensor:
    """Legal-token mask before each position; raises if the sequence strays."""
    state = GrammarState()
    masks = torch.zeros(len(tokens), VOCAB_SIZE, dtype=torch.bool)
    for t, tok in enumerate(tokens):
        if state.done:
            raise MalformedSequence("tokens after end-of-sequence")
        masks[t, list(state.legal_ids())] = True
        state.advance(tok)
    if not state.done:
        raise MalformedSequence("sequence ended before end-of-sequence token")
    return masks


# ---------------------------------------------------------------------------
# tokenize / detokenize
# ---------------------------------------------------------------------------

def tokenize(n: Netlist, duty: float) -> tuple[int, ...]:
    duty = check_duty(duty)
    if len(n.entries) > MAX_ENTRIES:
        raise MalformedSequence(f"{len(n.entries)} entries exceed the {MAX_ENTRIES} cap")
    expected = {k: 0 for k in _KINDS}
    out: list[int] = []
    for i, e in enumerate(n.entries):
        if i:
            out.append(_SEP_ID)
        if e.device.index != expected[e.device.kind]:
            raise MalformedSequence(
                f"{e.device.name} breaks sequential per-kind indexing"
            )
        expected[e.device.kind] += 1
        out.append(TOKEN_ID[e.device.kind.value])
        out.append(_INDEX_IDS[e.device.index])
        for node in e.nodes:
            tid = TOKEN_ID.get(node)
            if tid is None or tid not in _NODE_IDS:
                raise OutOfVocabulary(f"node {node!r} has no token")
            out.append(tid)
    if not n.entries:
        raise MalformedSequence("empty netlist has no token form")
    out.append(TOKEN_ID[f"D={duty}"])
    out.append(_EOS_ID)
    sequence_masks(out)  # sanity: emitted sequences are grammar-valid
    return tuple(out)


def detokenize(tokens: Sequence[int]) -> tuple[Netlist, float]:
    for tok in tokens:
        if not 0 <= tok < VOCAB_SIZE:
            raise OutOfVocabulary(f"token id {tok} outside vocabulary")
    sequence_masks(tokens)
    entries: list[Entry] = []
    duty: Optional[float] = None
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in _ID_TO_KIND:
            kind = _ID_TO_KIND[tok]
            index = _INDEX_IDS.index(tokens[i + 1])
            nodes = (VOCAB[tokens[i + 2]], VOCAB[tokens[i + 3]])
            entries.append(Entry(Device(kind, index), nodes))
            i += 4
        elif tok == _SEP_ID:
            i += 1
        elif tok in _DUTY_BY_ID:
            duty = _DUTY_BY_ID[tok]
            i += 1
        else:  # eos
            i += 1
    return Netlist(tuple(entries)), duty


def design_tokens(d: Design) -> tuple[int, ...]:
    return tokenize(d.netlist, d.duty)


def tokens_to_design(tokens: Sequence[int]) -> Design:
    n, duty = detokenize(tokens)
    return Design(n, duty)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def prompt_features(p: Prompt) -> np.ndarray:
    cat = [1.0 if p.category == c else 0.0 for c in ("C", "CE", "CV")]
    pool = [float(c) for c in p.pool]
    eff = [p.eff_floor if p.eff_floor is not None else 0.0]
    rel = [
        1.0 if p.vout_relation == "<" else 0.0,
        1.0 if p.vout_relation == ">" else 0.0,
    ]
    bound = [p.vout_bound if p.vout_bound is not None else 0.0]
    vin = [p.vin if p.vin is not None else 0.0]
    scale = [p.n_components / 10.0]
    vec = np.array(cat + pool + eff + rel + bound + vin + scale, dtype=np.float64)
    assert len(vec) == PROMPT_DIM
    return vec


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.1
    clip_eps: float = 0.2
    lr: float = 0.05
    sft_lr: float = 3e-3
    batch: int = 16
    nucleus_p: float = 0.9
    top_k: int = 40
    ia_iters: int = 3
    ia_pool: int = 500
    ia_eff_floor: float = 0.7
    sft_epochs: int = 40
    max_len: int = MAX_SEQ_LEN

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta >= 0")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps in (0,1)")
        if not 0 < self.nucleus_p <= 1:
            raise ValueError("nucleus_p in (0,1]")
        if self.top_k < 1 or self.batch < 1:
            raise ValueError("top_k and batch must be positive")
        if not 0 < self.ia_eff_floor < 1:
            raise ValueError("ia_eff_floor in (0,1)")


class Policy(nn.Module):
    """Single-layer GRU over token embeddings, prompt features joined at
    every step, masked softmax head over the vocabulary."""

    def __init__(self, emb: int = 48, hidden: int = 96, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.emb_dim = emb
        self.hidden_dim = hidden
        self.embed = nn.Embedding(VOCAB_SIZE, emb)
        self.bos = nn.Parameter(torch.zeros(emb))
        self.rnn = nn.GRU(emb + PROMPT_DIM, hidden, batch_first=True)
        self.head = nn.Linear(hidden, VOCAB_SIZE)
        self.double()

    def step_inputs(self, tokens: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """[B, L] target tokens -> [B, L, emb+prompt] teacher-forced inputs."""
        b, length = tokens.shape
        emb = self.embed(tokens)
        bos = self.bos.expand(b, 1, -1)
        shifted = torch.cat([bos, emb[:, :-1]], dim=1)
        prompt = feats.unsqueeze(1).expand(b, length, PROMPT_DIM)
        return torch.cat([shifted, prompt], dim=-1)

    def logits(self, tokens: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        out, _ = self.rnn(self.step_inputs(tokens, feats))
        return self.head(out)


def make_policy(seed: int = 0, emb: int = 48, hidden: int = 96) -> Policy:
    return Policy(emb=emb, hidden=hidden, seed=seed)


def freeze_reference(p: Policy) -> Policy:
    ref = copy.deepcopy(p)
    for param in ref.parameters():
        param.requires_grad_(False)
    ref.eval()
    return ref


def _prompt_tensor(prompts: Sequence[Prompt]) -> torch.Tensor:
    return torch.tensor(np.stack([prompt_features(p) for p in prompts]), dtype=torch.float64)


def _pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (tokens [B,L], step_mask [B,L], legal [B,L,V])."""
    length = max(len(s) for s in seqs)
    tokens = torch.zeros(len(seqs), length, dtype=torch.long)
    step = torch.zeros(len(seqs), length, dtype=torch.bool)
    legal = torch.zeros(len(seqs), length, VOCAB_SIZE, dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        step[i, : len(s)] = True
        legal[i, : len(s)] = sequence_masks(s)
        legal[i, len(s) :, _EOS_ID] = True  # harmless filler for padded steps
    return tokens, step, legal


def _masked_log_softmax(logits: torch.Tensor, legal: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits.masked_fill(~legal, -torch.inf), dim=-1)


def _batch_token_logps(
    p: Policy, prompts: Sequence[Prompt], seqs: Sequence[Sequence[int]]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(token_logps [B,L], step_mask, log_dists [B,L,V], legal) for scoring."""
    feats = _prompt_tensor(prompts)
    tokens, step, legal = _pad_batch(seqs)
    logp = _masked_log_softmax(p.logits(tokens, feats), legal)
    token_logps = logp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
    # padded positions gather -inf; zero them instead of multiplying (0 * -inf is nan)
    token_logps = token_logps.masked_fill(~step, 0.0)
    return token_logps, step, logp, legal


def log_prob(p: Policy, x: Prompt, y: Sequence[int]) -> float:
    with torch.no_grad():
        token_logps, _, _, _ = _batch_token_logps(p, [x], [tuple(y)])
    return float(token_logps.sum())


def mean_token_nll(p: Policy, pairs: Sequence[tuple[Prompt, Sequence[int]]]) -> float:
    with torch.no_grad():
        total = 0.0
        count = 0
        for i in range(0, len(pairs), 64):
            chunk = pairs[i : i + 64]
            logps, step, _, _ = _batch_token_logps(
                p, [x for x, _ in chunk], [y for _, y in chunk]
            )
            total -= float(logps.sum())
            count += int(step.sum())
    return total / count


def kl_estimate(p: Policy, ref: Policy, x: Prompt, y: Sequence[int]) -> float:
    with torch.no_grad():
        total = float(_kl_terms(p, ref, [x], [tuple(y)])[0].sum())
    return max(0.0, total)  # exact KL; clamp away -1e-18 style rounding


def _kl_terms(
    p: Policy, ref: Policy, prompts: Sequence[Prompt], seqs: Sequence[Sequence[int]]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-step exact KL(p || ref) over the legal vocabulary: ([B,L], step_mask)."""
    feats = _prompt_tensor(prompts)
    tokens, step, legal = _pad_batch(seqs)
    logp = _masked_log_softmax(p.logits(tokens, feats), legal)
    with torch.no_grad():
        logq = _masked_log_softmax(ref.logits(tokens, feats), legal)
    prob = logp.exp() * legal
    kl = (prob * (logp - logq).masked_fill(~legal, 0.0)).sum(-1)
    return kl * step, step


# ---------------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------------

def sft_train(
    dataset: Sequence[tuple[Prompt, Sequence[int]]],
    cfg: TrainConfig = TrainConfig(),
    rng_seed: int = 0,
    policy: Optional[Policy] = None,
) -> Policy:
    """Minimize mean per-token NLL over prompt->sequence pairs."""
    if not dataset:
        raise ValueError("empty dataset")
    p = policy if policy is not None else make_policy(seed=rng_seed)
    opt = torch.optim.Adam(p.parameters(), lr=cfg.sft_lr)
    rng = random.Random(rng_seed)
    order = list(range(len(dataset)))
    for _ in range(cfg.sft_epochs):
        rng.shuffle(order)
        for i in range(0, len(order), cfg.batch):
            chunk = [dataset[j] for j in order[i : i + cfg.batch]]
            logps, step, _, _ = _batch_token_logps(
                p, [x for x, _ in chunk], [y for _, y in chunk]
            )
            loss = -logps.sum() / step.sum()
            if not torch.isfinite(loss):
                raise Diverged("non-finite SFT loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return p


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _nucleus_pick(
    probs: torch.Tensor, nucleus_p: float, top_k: int, gen: torch.Generator
) -> int:
    values, order = torch.sort(probs, descending=True)
    values = values[:top_k]
    order = order[:top_k]
    keep = int(torch.searchsorted(values.cumsum(0), nucleus_p, right=False)) + 1
    keep = min(keep, len(values))
    values = values[:keep]
    pick = int(torch.multinomial(values / values.sum(), 1, generator=gen))
    return int(order[pick])


def sample_batch(
    p: Policy,
    prompts: Sequence[Prompt],
    cfg: TrainConfig,
    gen: torch.Generator,
) -> list[tuple[tuple[int, ...], tuple[float, ...]]]:
    """Grammar-masked nucleus sampling; returns (tokens, per-step logp)."""
    b = len(prompts)
    feats = _prompt_tensor(prompts)
    hidden = torch.zeros(1, b, p.hidden_dim, dtype=torch.float64)
    prev = p.bos.detach().expand(b, -1)
    states = [GrammarState() for _ in range(b)]
    seqs: list[list[int]] = [[] for _ in range(b)]
    logps: list[list[float]] = [[] for _ in range(b)]
    with torch.no_grad():
        for _ in range(cfg.max_len):
            inp = torch.cat([prev, feats], dim=-1).unsqueeze(1)
            out, hidden = p.rnn(inp, hidden)
            logits = p.head(out[:, 0])
            next_tokens = torch.zeros(b, dtype=torch.long)
            for i, state in enumerate(states):
                if state.done:
                    continue
                legal = torch.zeros(VOCAB_SIZE, dtype=torch.bool)
                legal[list(state.legal_ids())] = True
                dist = torch.softmax(logits[i].masked_fill(~legal, -torch.inf), dim=-1)
                tok = _nucleus_pick(dist, cfg.nucleus_p, cfg.top_k, gen)
                next_tokens[i] = tok
                seqs[i].append(tok)
                logps[i].append(float(torch.log(dist[tok])))
                state.advance(tok)
            if all(s.done for s in states):
                break
            prev = p.embed(next_tokens)
    for state in states:
        if not state.done:
            raise Truncated("length cap reached before end-of-sequence")
    return [(tuple(s), tuple(lp)) for s, lp in zip(seqs, logps)]


def sample_nucleus(
    p: Policy, x: Prompt, cfg: TrainConfig = TrainConfig(), rng_seed: int = 0
) -> tuple[int, ...]:
    gen = torch.Generator().manual_seed(rng_seed)
    return sample_batch(p, [x], cfg, gen)[0][0]


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------

def ppo_step(
    p: Policy,
    ref: Policy,
    rollouts: Sequence[tuple],
    cfg: TrainConfig = TrainConfig(),
    opt: Optional[torch.optim.Optimizer] = None,
    baseline: str = "batch_mean",
) -> Policy:
    """One clipped-surrogate update on (prompt, tokens, reward[, behavior_logps]).

    Sequence-level advantage (reward minus batch mean, or the raw reward with
    baseline="zero" for self-training passes over pre-filtered pools) weights
    token-level importance ratios; ratios are clamped to [1-eps, 1+eps] before
    use so an update can never act on one outside that range. Behavior
    log-probs, when present, come from sampling time; otherwise the current
    parameters stand in (entry ratio exactly 1). Pass `opt` to accumulate
    optimizer state across steps; the default is a one-shot SGD step.
    """
    if not rollouts:
        raise ValueError("empty rollout batch")
    if baseline not in ("batch_mean", "zero"):
        raise ValueError("baseline is 'batch_mean' or 'zero'")
    prompts = [r[0] for r in rollouts]
    seqs = [tuple(r[1]) for r in rollouts]
    rewards = torch.tensor([float(r[2]) for r in rollouts], dtype=torch.float64)
    adv = rewards - rewards.mean() if baseline == "batch_mean" else rewards

    token_logps, step, _, _ = _batch_token_logps(p, prompts, seqs)
    behavior = torch.zeros_like(token_logps)
    for i, r in enumerate(rollouts):
        if len(r) > 3 and r[3] is not None:
            lps = r[3]
            behavior[i, : len(lps)] = torch.tensor(lps, dtype=torch.float64)
        else:
            behavior[i] = token_logps[i].detach()
    ratio = torch.exp(token_logps - behavior)
    clamped = torch.clamp(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    used = clamped[step]
    assert bool(
        ((used >= 1 - cfg.clip_eps) & (used <= 1 + cfg.clip_eps)).all()
    ), "importance ratio escaped the clip range"
    surrogate = (clamped * adv.unsqueeze(1) * step).sum() / step.sum()

    kl, kstep = _kl_terms(p, ref, prompts, seqs)
    kl_mean = kl.sum() / kstep.sum()

    loss = -surrogate + cfg.eta * kl_mean
    if not torch.isfinite(loss):
        raise Diverged("non-finite PPO loss")
    if opt is None:
        opt = torch.optim.SGD(p.parameters(), lr=cfg.lr)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return p


# ---------------------------------------------------------------------------
# RL loop and iterative adaptation
# ---------------------------------------------------------------------------

def _adjudicate(design: Design, prompt: Prompt, oracle: RewardBackend) -> tuple[float, float, float]:
    scores = compute_scores(design, oracle)
    return reward_fn(prompt, design, scores), scores.s_valid, scores.s_eff


def rl_finetune(
    p: Policy,
    ref: Policy,
    backend: RewardBackend,
    prompts: Sequence[Prompt],
    cfg: TrainConfig = TrainConfig(),
    steps: int = 300,
    rng_seed: int = 0,
    csv_path: Optional[str] = None,
    oracle: Optional[RewardBackend] = None,
    baseline: str = "batch_mean",
    warmup_steps: int = 0,
) -> tuple[Policy, list[dict]]:
    """PPO loop: sample rollouts, score them, update; history row per step.

    The training reward comes from `backend`; the logged validity fraction,
    efficiency mean and oracle reward always come from the simulator so
    learning curves stay comparable across backends. `baseline` selects the
    advantage baseline (see ppo_step); `warmup_steps` ramps the learning rate
    linearly from zero so the opening of the reward curve reflects the
    starting policy rather than the first updates.
    """
    if not prompts:
        raise ValueError("no prompts to train on")
    if oracle is None:
        oracle = backend if backend.mode == "oracle" else oracle_backend(backend.cfg)
    gen = torch.Generator().manual_seed(rng_seed)
    rng = random.Random(rng_seed)
    opt = torch.optim.Adam(p.parameters(), lr=cfg.lr)
    history: list[dict] = []
    for step_ix in range(steps):
        if warmup_steps:
            ramp = min(1.0, (step_ix + 1) / warmup_steps)
            for group in opt.param_groups:
                group["lr"] = cfg.lr * ramp
        batch_prompts = [prompts[rng.randrange(len(prompts))] for _ in range(cfg.batch)]
        samples = sample_batch(p, batch_prompts, cfg, gen)
        rollouts = []
        oracle_rewards = []
        valids = []
        effs = []
        for prompt, (tokens, logps) in zip(batch_prompts, samples):
            design = tokens_to_design(tokens)
            train_reward = reward_fn(prompt, design, compute_scores(design, backend))
            o_reward, o_valid, o_eff = _adjudicate(design, prompt, oracle)
            rollouts.append((prompt, tokens, train_reward, logps))
            oracle_rewards.append(o_reward)
            valids.append(o_valid)
            effs.append(o_eff)
        ppo_step(p, ref, rollouts, cfg, opt=opt, baseline=baseline)
        kl_mean = float(
            np.mean([kl_estimate(p, ref, x, y) for x, y, *_ in rollouts[:4]])
        )
        history.append(
            {
                "step": step_ix,
                "reward_mean": float(np.mean([r[2] for r in rollouts])),
                "oracle_reward_mean": float(np.mean(oracle_rewards)),
                "kl_mean": kl_mean,
                "valid_frac": float(np.mean(valids)),
                "eff_mean": float(np.mean(effs)),
            }
        )
    if csv_path:
        write_history_csv(history, csv_path)
    return p, history


def write_history_csv(history: list[dict], path: str) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def iterative_adapt(
    p: Policy,
    ref: Policy,
    reward_backend: RewardBackend,
    cfg: TrainConfig,
    prompts: Sequence[Prompt],
    rng_seed: int = 0,
    oracle: Optional[RewardBackend] = None,
    sample_budget_factor: int = 20,
    refreeze: bool = False,
) -> tuple[Policy, list[dict]]:
    """Self-training rounds on high-efficiency samples.

    Each round samples candidates, keeps those the backend scores valid and
    above the efficiency floor, confirms the floor with the simulator, and
    runs PPO passes over the surviving pool. Starved rounds (empty pool)
    raise; partially filled pools proceed and are recorded. `refreeze`
    re-anchors the KL reference to the current policy at the start of each
    round instead of keeping the caller's reference throughout.
    """
    if oracle is None:
        oracle = (
            reward_backend if reward_backend.mode == "oracle" else oracle_backend(reward_backend.cfg)
        )
    gen = torch.Generator().manual_seed(rng_seed)
    rng = random.Random(rng_seed)
    rounds: list[dict] = []
    for round_ix in range(cfg.ia_iters):
        if refreeze:
            ref = freeze_reference(p)
        pool: list[tuple] = []
        seen: set = set()
        budget = cfg.ia_pool * sample_budget_factor
        drawn = 0
        min_oracle_eff = math.inf
        while len(pool) < cfg.ia_pool and drawn < budget:
            batch_prompts = [
                prompts[rng.randrange(len(prompts))] for _ in range(cfg.batch)
            ]
            samples = sample_batch(p, batch_prompts, cfg, gen)
            drawn += len(samples)
            for prompt, (tokens, logps) in zip(batch_prompts, samples):
                design = tokens_to_design(tokens)
                if estimate_validity(design, reward_backend) < VALID_THRESHOLD:
                    continue
                if estimate_efficiency(design, reward_backend) <= cfg.ia_eff_floor:
                    continue
                # simulator confirmation: the pool may never contain a
                # sample whose true efficiency sits at or below the floor
                true_eff = estimate_efficiency(design, oracle)
                if true_eff <= cfg.ia_eff_floor:
                    continue
                key = (canonical_key(design.netlist), design.duty)
                if key in seen:
                    continue
                seen.add(key)
                min_oracle_eff = min(min_oracle_eff, true_eff)
                r = reward_fn(prompt, design, compute_scores(design, reward_backend))
                pool.append((prompt, tokens, r, logps))
                if len(pool) >= cfg.ia_pool:
                    break
        if not pool:
            raise PoolStarvation(f"round {round_ix}: no admissible samples in {drawn} draws")
        starved = len(pool) < cfg.ia_pool
        rng.shuffle(pool)
        # every pool member passed the filter, so reinforce all of them:
        # zero-baseline keeps advantages positive instead of pushing the
        # below-average half of an already-good pool back down
        opt = torch.optim.Adam(p.parameters(), lr=cfg.lr)
        for i in range(0, len(pool), cfg.batch):
            ppo_step(p, ref, pool[i : i + cfg.batch], cfg, opt=opt, baseline="zero")
        rounds.append(
            {
                "round": round_ix,
                "pool_size": len(pool),
                "draws": drawn,
                "starved": starved,
                "min_oracle_eff": min_oracle_eff,
            }
        )
    return p, rounds


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(p: Policy, path: str, cfg: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    blob = {
        "state": p.state_dict(),
        "emb": p.emb_dim,
        "hidden": p.hidden_dim,
        "vocab_hash": vocab_hash(),
        "cfg": asdict(cfg) if cfg else None,
        "extra": extra or {},
    }
    torch.save(blob, path)


def load_checkpoint(path: str) -> tuple[Policy, dict]:
    blob = torch.load(path, weights_only=False)
    if blob.get("vocab_hash") != vocab_hash():
        raise CheckpointMismatch("checkpoint was written with a different vocabulary")
    p = Policy(emb=blob["emb"], hidden=blob["hidden"])
    p.load_state_dict(blob["state"])
    return p, {"cfg": blob.get("cfg"), "extra": blob.get("extra", {})}
