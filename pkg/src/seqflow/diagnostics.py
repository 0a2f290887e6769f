"""Plasticity, distribution-match and diversity diagnostics.

Dormancy follows the normalized activation-score rule: a unit's score is its
mean absolute activation over a fixed probe batch divided by the layer mean
of the same quantity, and a unit is dormant when the score falls at or below
a threshold tau (default 0: exactly inactive on the probe). The probe set is
sampled once per run from the reference model with a recorded seed so scores
are comparable across training rounds.

Distribution match is measured exactly: the policy's terminal distribution is
computed by walking the whole prefix tree (no sampling), then compared to the
enumeration oracle's target by total variation distance.

Diversity is the mean pairwise multiset-Jaccard distance between the token
multisets of samples (eos excluded) - a deliberately parameter-free,
embedding-free stand-in, and reports label it as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .env import (
    Condition,
    ENUMERATION_BUDGET,
    EnumerationBudgetError,
    EnumerationResult,
    ModeReward,
    Prefix,
    SyntheticTask,
    TokenSequence,
    enumerate_condition,
)
from .nn import ActivationTrace

DIVERSITY_METRIC = "mean pairwise multiset-jaccard distance over ordinary tokens"


@dataclass(eq=False)
class DormantReport:
    """Per-layer activation scores and dormant fractions at threshold tau."""

    tau: float
    probe_size: int
    scores: dict[str, np.ndarray]
    dormant_fraction: dict[str, float]
    overall_fraction: float
    silent_layers: tuple[str, ...]  # layers whose probe activity is all-zero

    def to_json_dict(self) -> dict:
        return {
            "tau": self.tau,
            "probe_size": self.probe_size,
            "scores": {k: v.tolist() for k, v in self.scores.items()},
            "dormant_fraction": dict(self.dormant_fraction),
            "overall_fraction": self.overall_fraction,
            "silent_layers": list(self.silent_layers),
        }


def dormant_ratio(trace: ActivationTrace, tau: float = 0.0) -> DormantReport:
    """Score every hidden unit against its layer's mean activity."""
    scores: dict[str, np.ndarray] = {}
    fractions: dict[str, float] = {}
    silent = []
    dormant_total = 0
    unit_total = 0
    for layer, acts in trace.layers.items():
        mean_abs = np.abs(acts).mean(axis=0)
        layer_mean = mean_abs.mean()
        if layer_mean == 0.0:
            s = np.zeros_like(mean_abs)
            silent.append(layer)
        else:
            s = mean_abs / layer_mean
        dormant = s <= tau
        scores[layer] = s
        fractions[layer] = float(dormant.mean())
        dormant_total += int(dormant.sum())
        unit_total += dormant.size
    return DormantReport(
        tau=tau,
        probe_size=trace.probe_size,
        scores=scores,
        dormant_fraction=fractions,
        overall_fraction=dormant_total / unit_total,
        silent_layers=tuple(silent),
    )


@dataclass(eq=False)
class ProbeSet:
    """Frozen batch of non-terminal prefixes drawn from the reference model."""

    cond_ids: np.ndarray
    prefixes: list[Prefix]
    seed_material: tuple[int, ...]


def build_probe_set(task: SyntheticTask, seed_material, size: int = 64) -> ProbeSet:
    """Sample ``size`` (condition, prefix) probes from p_ref, frozen thereafter."""
    rng = np.random.default_rng(seed_material)
    vocab = task.vocab
    cond_ids = []
    prefixes = []
    for _ in range(size):
        cid = int(rng.integers(0, task.n_conditions))
        tokens: list[int] = []
        prev: int | None = None
        while True:
            row = task.ref.row(cid, prev)
            t = int(rng.choice(vocab.alphabet_size, p=row / row.sum()))
            tokens.append(t)
            if t == vocab.eos_id or len(tokens) == vocab.max_len:
                break
            prev = t
        cut = int(rng.integers(0, len(tokens)))  # strict prefix -> non-terminal
        cond_ids.append(cid)
        prefixes.append(tuple(tokens[:cut]))
    material = tuple(seed_material) if isinstance(seed_material, (list, tuple)) else (int(seed_material),)
    return ProbeSet(np.asarray(cond_ids, dtype=np.int64), prefixes, material)


def exact_policy_distribution(policy, task: SyntheticTask, x: Condition) -> dict[Prefix, float]:
    """The policy's terminal distribution, computed exactly by a level-order
    walk of the prefix tree (probability of a terminal is the product of its
    step probabilities)."""
    if task.vocab.terminal_count() > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(
            f"task '{task.name}' has {task.vocab.terminal_count()} terminal sequences, above budget"
        )
    vocab = task.vocab
    out: dict[Prefix, float] = {}
    level: list[tuple[Prefix, float]] = [((), 0.0)]
    while level:
        prefixes = [p for p, _ in level]
        ids = np.full(len(prefixes), x.id, dtype=np.int64)
        rows = policy.step_log_probs_batch(ids, prefixes)
        nxt: list[tuple[Prefix, float]] = []
        for (prefix, logp), row in zip(level, rows):
            for t in vocab.next_token_ids():
                child = prefix + (t,)
                child_logp = logp + float(row[t])
                if t == vocab.eos_id or len(child) == vocab.max_len:
                    out[child] = math.exp(child_logp)
                else:
                    nxt.append((child, child_logp))
        level = nxt
    return out


def tvd(p: Mapping[Prefix, float], q: Mapping[Prefix, float]) -> float:
    """Total variation distance between two distributions over one support."""
    if set(p) != set(q):
        raise ValueError("distributions are indexed over different supports")
    return 0.5 * sum(abs(p[k] - q[k]) for k in p)


def _multiset(tokens: Prefix, eos_id: int) -> dict[int, int]:
    counts: dict[int, int] = {}
    for t in tokens:
        if t == eos_id:
            continue
        counts[t] = counts.get(t, 0) + 1
    return counts


def _jaccard_distance(a: dict[int, int], b: dict[int, int]) -> float:
    keys = set(a) | set(b)
    inter = sum(min(a.get(k, 0), b.get(k, 0)) for k in keys)
    union = sum(max(a.get(k, 0), b.get(k, 0)) for k in keys)
    if union == 0:
        return 0.0
    return 1.0 - inter / union


def diversity(samples: Sequence[TokenSequence | Prefix], eos_id: int) -> float:
    """Mean pairwise multiset-Jaccard distance; identical multisets give 0."""
    if len(samples) < 2:
        raise ValueError("diversity needs at least 2 samples")
    sets = [_multiset(s.tokens if isinstance(s, TokenSequence) else tuple(s), eos_id) for s in samples]
    total = 0.0
    n_pairs = 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            total += _jaccard_distance(sets[i], sets[j])
            n_pairs += 1
    return total / n_pairs


def mode_coverage(samples: Sequence[TokenSequence | Prefix], task: SyntheticTask) -> tuple[int, int]:
    """How many of the task's mode patterns appear in at least one sample."""
    if not isinstance(task.reward, ModeReward):
        raise ValueError("mode coverage is only defined for mode-pattern rewards")
    patterns = task.reward.patterns
    covered = set()
    eos = task.vocab.eos_id
    for s in samples:
        tokens = s.tokens if isinstance(s, TokenSequence) else tuple(s)
        tokens = tuple(t for t in tokens if t != eos)
        for k, pat in enumerate(patterns):
            if k in covered or len(pat) == 0:
                continue
            if any(tokens[i : i + len(pat)] == pat for i in range(len(tokens) - len(pat) + 1)):
                covered.add(k)
    return len(covered), len(patterns)


# -- run-level evaluation ---------------------------------------------------


@dataclass(eq=False)
class ConditionEval:
    condition_id: int
    tvd: float
    mean_log_r: float
    max_log_r: float
    max_task_reward: float
    diversity: float
    modes_covered: int | None


@dataclass(eq=False)
class EvalReport:
    """Per-condition and aggregate evaluation of a policy snapshot."""

    task: str
    n_samples: int
    seed: int
    per_condition: dict[int, ConditionEval]
    mean_tvd: float
    max_tvd: float
    mean_diversity: float
    mean_max_task_reward: float
    modes_covered: int | None
    modes_total: int | None
    diversity_metric: str = DIVERSITY_METRIC

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "diversity_metric": self.diversity_metric,
            "per_condition": {
                str(cid): {
                    "tvd": ce.tvd,
                    "mean_logR": ce.mean_log_r,
                    "max_logR": ce.max_log_r,
                    "max_task_reward": ce.max_task_reward,
                    "diversity": ce.diversity,
                    "modes_covered": ce.modes_covered,
                }
                for cid, ce in self.per_condition.items()
            },
            "mean_tvd": self.mean_tvd,
            "max_tvd": self.max_tvd,
            "mean_diversity": self.mean_diversity,
            "mean_max_task_reward": self.mean_max_task_reward,
            "modes_covered": self.modes_covered,
            "modes_total": self.modes_total,
        }


def evaluate_policy(
    policy,
    task: SyntheticTask,
    seed: int,
    n_samples: int = 16,
    oracles: dict[int, EnumerationResult] | None = None,
) -> EvalReport:
    """Sample ``n_samples`` sequences per condition at temperature 1, compare
    the exact policy distribution against the enumeration oracle, and compute
    reward/diversity/coverage statistics."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2 (diversity needs pairs)")
    from .training import _rollout_batch  # sampling shares the rollout machinery

    is_mode = isinstance(task.reward, ModeReward) and len(task.reward.patterns) > 0
    per_condition: dict[int, ConditionEval] = {}
    all_samples: list[Prefix] = []
    for x in task.conditions:
        oracle = (oracles or {}).get(x.id) or enumerate_condition(task, x)
        dist = exact_policy_distribution(policy, task, x)
        cond_tvd = tvd(dist, oracle.p_star())
        rngs = [np.random.default_rng([seed, x.id, i]) for i in range(n_samples)]
        toks, log_rs = _rollout_batch(policy, task, [x.id] * n_samples, rngs, temperature=1.0)
        rewards = [task.terminal_reward(x, TokenSequence(t, True)) for t in toks]
        covered = mode_coverage(toks, task)[0] if is_mode else None
        per_condition[x.id] = ConditionEval(
            condition_id=x.id,
            tvd=cond_tvd,
            mean_log_r=float(np.mean(log_rs)),
            max_log_r=float(np.max(log_rs)),
            max_task_reward=float(np.max(rewards)),
            diversity=diversity(toks, task.vocab.eos_id),
            modes_covered=covered,
        )
        all_samples.extend(toks)
    tvds = [ce.tvd for ce in per_condition.values()]
    run_coverage = mode_coverage(all_samples, task) if is_mode else (None, None)
    return EvalReport(
        task=task.name,
        n_samples=n_samples,
        seed=seed,
        per_condition=per_condition,
        mean_tvd=float(np.mean(tvds)),
        max_tvd=float(np.max(tvds)),
        mean_diversity=float(np.mean([ce.diversity for ce in per_condition.values()])),
        mean_max_task_reward=float(np.mean([ce.max_task_reward for ce in per_condition.values()])),
        modes_covered=run_coverage[0],
        modes_total=run_coverage[1],
    )
