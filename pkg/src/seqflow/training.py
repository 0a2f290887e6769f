"""Mixed on-policy/replay training rounds with reward-prioritized sampling
and periodic flow reactivation, plus a reward-maximizing policy-gradient
baseline for mode-collapse comparisons.

Each round draws a batch of sequences: every slot is independently either a
fresh rollout (which is stored in the replay buffer) or a buffer draw with
probability proportional to the stored reward. The round's objective loss is
averaged over sequences, one optimizer update is applied to the policy and
flow stores, and every ``reset_period`` rounds the flow head's output layer
is re-drawn.

All randomness flows from named streams derived from (seed, stream, round,
slot), so runs are reproducible bit-for-bit and rollouts are independent of
scheduling order.
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import diagnostics as diag
from .env import Condition, Prefix, SyntheticTask, TokenSequence
from .nn import (
    FlowHead,
    NetworkConfig,
    ParamStore,
    PolicyNetwork,
    backward_all,
    reset_flow_last_layer,
    save_checkpoint,
)
from .objectives import (
    LogZParam,
    build_sequence_batch,
    db_batch_loss,
    fldb_batch_loss,
    tb_batch_loss,
    vargrad_batch_loss,
)

# rng stream tags: every generator in a run is default_rng([seed, tag, ...]).
_STREAM_INIT = 101
_STREAM_PROBE = 102
_STREAM_ROUND = 103
_STREAM_SLOT = 104
_STREAM_REPLAY = 105
_STREAM_RESET = 106

PRIORITIZATION_MODES = ("softmax-logR", "literal-exp-R")
TRAINER_OBJECTIVES = ("tb", "vargrad", "db", "fldb", "reward_max")


class TrainingDiverged(RuntimeError):
    """The round loss became nonfinite."""


@dataclass(frozen=True)
class BufferEntry:
    condition_id: int
    tokens: Prefix
    log_r: float
    index: int


class ReplayBuffer:
    """Capacity-bounded FIFO store of terminal sequences with their shaped
    rewards; draws are i.i.d. with probability proportional to reward.

    The default prioritization is a stable softmax over log R (probability
    proportional to R). ``literal-exp-R`` instead exponentiates R itself,
    which is the numerically degenerate literal rule kept for study.
    """

    def __init__(self, capacity: int, priority_temperature: float = 1.0, mode: str = "softmax-logR"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if priority_temperature <= 0:
            raise ValueError("priority temperature must be positive")
        if mode not in PRIORITIZATION_MODES:
            raise ValueError(f"unknown prioritization mode {mode!r}")
        self.capacity = capacity
        self.temperature = priority_temperature
        self.mode = mode
        self._entries: deque[BufferEntry] = deque(maxlen=capacity)
        self._next_index = 0

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[BufferEntry]:
        return list(self._entries)

    def insert(self, condition_id: int, tokens: Prefix, log_r: float) -> None:
        self._entries.append(BufferEntry(condition_id, tuple(tokens), float(log_r), self._next_index))
        self._next_index += 1

    def sampling_probabilities(self, entries: Sequence[BufferEntry] | None = None) -> np.ndarray:
        entries = self.entries() if entries is None else list(entries)
        log_r = np.array([e.log_r for e in entries], dtype=np.float64)
        if self.mode == "literal-exp-R":
            scores = np.exp(log_r)  # R itself as the exponent
        else:
            scores = log_r / self.temperature
        scores -= scores.max()
        w = np.exp(scores)
        return w / w.sum()

    def sample_prioritized(
        self, rng: np.random.Generator, count: int, condition_id: int | None = None
    ) -> list[BufferEntry]:
        """``count`` i.i.d. draws with replacement; optionally restricted to
        one condition. Raises on an empty (sub-)buffer."""
        pool = self.entries()
        if condition_id is not None:
            pool = [e for e in pool if e.condition_id == condition_id]
        if not pool:
            raise ValueError("cannot sample from an empty replay buffer")
        p = self.sampling_probabilities(pool)
        idx = rng.choice(len(pool), size=count, replace=True, p=p)
        return [pool[i] for i in idx]


@dataclass(frozen=True)
class TrainerConfig:
    """Round/batch schedule, optimizer rates and replay behaviour.

    The defaults are the published training recipe: 1e4 rounds of batch 64, a
    5000-entry buffer, Adam at 1e-5 (policy) and 1e-4 (flow), beta 0.05 and a
    flow reset every 2000 rounds. ``beta`` overrides the task's value when
    set; ``reset_period=0`` disables reactivation.
    """

    rounds: int = 10_000
    batch_size: int = 64
    reset_period: int = 2000
    beta: float | None = 0.05
    lr_policy: float = 1e-5
    lr_flow: float = 1e-4
    lr_logz: float = 1e-2
    lr_reward_max: float = 1e-5
    objective: str = "fldb"
    replay_mix: float = 0.5
    buffer_capacity: int = 5000
    priority_temperature: float = 1.0
    prioritization: str = "softmax-logR"
    sample_temperature: float = 1.0
    vargrad_group_size: int = 16
    baseline_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reset_period < 0:
            raise ValueError("reset_period must be >= 0 (0 disables resets)")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")
        for name in ("lr_policy", "lr_flow", "lr_logz", "lr_reward_max", "priority_temperature", "sample_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.replay_mix <= 1.0:
            raise ValueError("replay_mix must be in [0, 1]")
        if self.objective not in TRAINER_OBJECTIVES:
            raise ValueError(f"objective must be one of {TRAINER_OBJECTIVES}, got {self.objective!r}")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if self.vargrad_group_size < 2:
            raise ValueError("vargrad_group_size must be >= 2")
        if not 0.0 < self.baseline_momentum <= 1.0:
            raise ValueError("baseline_momentum must be in (0, 1]")


@dataclass(frozen=True)
class RoundReport:
    round: int
    loss: float
    mean_log_r: float
    max_log_r: float
    replay_frac: float
    reset: bool
    seed: int


def metrics_line(report: RoundReport) -> dict:
    """The wire schema for one metrics.jsonl line."""
    return {
        "round": report.round,
        "loss": report.loss,
        "mean_logR": report.mean_log_r,
        "max_logR": report.max_log_r,
        "replay_frac": report.replay_frac,
        "reset": report.reset,
        "seed": report.seed,
    }


def rollout(
    policy, task: SyntheticTask, x: Condition, rng: np.random.Generator, temperature: float = 1.0
) -> tuple[TokenSequence, float]:
    """Sample one terminal sequence token-by-token from the tempered policy;
    returns it together with its log shaped reward."""
    tokens_list, log_rs = _rollout_batch(policy, task, [x.id], [rng], temperature)
    y = TokenSequence(tokens_list[0], True)
    return y, log_rs[0]


def _sample_row(rng: np.random.Generator, probs: np.ndarray) -> int:
    c = np.cumsum(probs)
    u = rng.random() * c[-1]
    i = int(np.searchsorted(c, u, side="right"))
    while i >= len(probs) or probs[i] <= 0.0:
        i -= 1
    return i


def _rollout_batch(
    policy, task: SyntheticTask, cond_ids: Sequence[int], rngs: Sequence[np.random.Generator], temperature: float
) -> tuple[list[Prefix], list[float]]:
    """Lockstep rollouts, one rng stream per slot."""
    n = len(cond_ids)
    vocab = task.vocab
    tokens: list[list[int]] = [[] for _ in range(n)]
    active = list(range(n))
    while active:
        prefixes = [tuple(tokens[i]) for i in active]
        ids = np.asarray([cond_ids[i] for i in active], dtype=np.int64)
        logits = policy.logits_batch(ids, prefixes) / temperature
        m = logits.max(axis=1, keepdims=True)
        probs = np.exp(logits - m)
        probs /= probs.sum(axis=1, keepdims=True)
        still = []
        for row, i in enumerate(active):
            t = _sample_row(rngs[i], probs[row])
            tokens[i].append(t)
            if not (t == vocab.eos_id or len(tokens[i]) == vocab.max_len):
                still.append(i)
        active = still
    out_tokens = [tuple(t) for t in tokens]
    log_rs = [
        task.log_shaped_reward(task.condition(cid), TokenSequence(toks, True))
        for cid, toks in zip(cond_ids, out_tokens)
    ]
    return out_tokens, log_rs


class Trainer:
    """Owns the networks, buffer and optimizer state for one training run."""

    def __init__(self, task: SyntheticTask, config: TrainerConfig, net_config: NetworkConfig | None = None):
        torch.set_num_threads(1)  # tiny matmuls; threading only risks nondeterminism
        self.config = config
        self.net_config = net_config or NetworkConfig()
        if config.beta is not None and config.beta != task.beta:
            task = dataclasses.replace(task, beta=config.beta)
        self.task = task
        rng_init = np.random.default_rng([config.seed, _STREAM_INIT])
        self.policy_store = ParamStore(self.net_config.dtype)
        self.policy = PolicyNetwork(task, self.net_config, self.policy_store, rng_init)
        self.flow_store = ParamStore(self.net_config.dtype)
        self.flow = FlowHead(self.policy, self.net_config, self.flow_store, rng_init)
        self.logz_store: ParamStore | None = None
        self.log_z: LogZParam | None = None
        if config.objective == "tb":
            self.logz_store = ParamStore(self.net_config.dtype)
            self.log_z = LogZParam(task.n_conditions, self.logz_store)
        self.buffer = ReplayBuffer(config.buffer_capacity, config.priority_temperature, config.prioritization)
        self.probe = diag.build_probe_set(task, seed_material=[config.seed, _STREAM_PROBE])
        self.reward_baseline = np.zeros(task.n_conditions)
        self.round = 0

    # -- one round ---------------------------------------------------------

    def train_round(self) -> RoundReport:
        """One batch, one optimizer update, maybe one flow reset."""
        cfg = self.config
        n = self.round + 1
        if cfg.objective == "reward_max":
            report = self._reward_max_round(n)
        else:
            report = self._flow_matching_round(n)
        self.round = n
        return report

    def _flow_matching_round(self, n: int) -> RoundReport:
        cfg = self.config
        rng_round = np.random.default_rng([cfg.seed, _STREAM_ROUND, n])
        rng_replay = np.random.default_rng([cfg.seed, _STREAM_REPLAY, n])
        b = cfg.batch_size

        if cfg.objective == "vargrad":
            slot_cond, group_of_slot = self._vargrad_conditions(rng_round, b)
        else:
            slot_cond = rng_round.integers(0, self.task.n_conditions, size=b)
            group_of_slot = None
        want_replay = rng_round.random(b) < cfg.replay_mix

        on_slots = [i for i in range(b) if not want_replay[i]]
        replay_slots = [i for i in range(b) if want_replay[i]]

        items: list[tuple[int, Prefix] | None] = [None] * b
        log_rs = np.zeros(b)
        if on_slots:
            rngs = [np.random.default_rng([cfg.seed, _STREAM_SLOT, n, i]) for i in on_slots]
            toks, lrs = _rollout_batch(
                self.policy, self.task, [int(slot_cond[i]) for i in on_slots], rngs, cfg.sample_temperature
            )
            for i, t, lr in zip(on_slots, toks, lrs):
                items[i] = (int(slot_cond[i]), t)
                log_rs[i] = lr
                self.buffer.insert(int(slot_cond[i]), t, lr)

        fallback_slots = []
        if replay_slots:
            if cfg.objective == "vargrad":
                # draws must match each slot's group condition
                by_cond: dict[int, list[int]] = {}
                for i in replay_slots:
                    by_cond.setdefault(int(slot_cond[i]), []).append(i)
                for cid in sorted(by_cond):
                    slots = by_cond[cid]
                    try:
                        entries = self.buffer.sample_prioritized(rng_replay, len(slots), condition_id=cid)
                    except ValueError:
                        fallback_slots.extend(slots)
                        continue
                    for i, entry in zip(slots, entries):
                        items[i] = (entry.condition_id, entry.tokens)
                        log_rs[i] = entry.log_r
            else:
                try:
                    entries = self.buffer.sample_prioritized(rng_replay, len(replay_slots))
                except ValueError:
                    entries = []
                    fallback_slots.extend(replay_slots)
                for i, entry in zip(replay_slots, entries):
                    items[i] = (entry.condition_id, entry.tokens)
                    log_rs[i] = entry.log_r
        if fallback_slots:
            # empty (sub-)buffer: those slots fall back to fresh rollouts
            rngs = [np.random.default_rng([cfg.seed, _STREAM_SLOT, n, i]) for i in fallback_slots]
            toks, lrs = _rollout_batch(
                self.policy, self.task, [int(slot_cond[i]) for i in fallback_slots], rngs, cfg.sample_temperature
            )
            for i, t, lr in zip(fallback_slots, toks, lrs):
                items[i] = (int(slot_cond[i]), t)
                log_rs[i] = lr
                self.buffer.insert(int(slot_cond[i]), t, lr)
        replayed = len(replay_slots) - len(fallback_slots)

        batch = build_sequence_batch(self.task, items, group_ids=group_of_slot)
        if cfg.objective == "fldb":
            loss = fldb_batch_loss(self.policy, self.flow, batch)
            stores = [self.policy_store, self.flow_store]
        elif cfg.objective == "db":
            loss = db_batch_loss(self.policy, self.flow, batch)
            stores = [self.policy_store, self.flow_store]
        elif cfg.objective == "tb":
            loss = tb_batch_loss(self.policy, self.log_z, batch)
            stores = [self.policy_store, self.logz_store]
        else:
            loss = vargrad_batch_loss(self.policy, batch)
            stores = [self.policy_store]

        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise TrainingDiverged(
                f"nonfinite loss {loss_val} at round {n} (objective {cfg.objective}, "
                f"batch mean logR {log_rs.mean():.4g}, buffer size {len(self.buffer)})"
            )
        backward_all(loss, stores)
        self.policy_store.adam_step(cfg.lr_policy)
        if self.flow_store in stores:
            self.flow_store.adam_step(cfg.lr_flow)
        if self.logz_store is not None and self.logz_store in stores:
            self.logz_store.adam_step(cfg.lr_logz)

        did_reset = cfg.reset_period > 0 and n % cfg.reset_period == 0
        if did_reset:
            reset_flow_last_layer(self.flow, np.random.default_rng([cfg.seed, _STREAM_RESET, n]))

        return RoundReport(
            round=n,
            loss=loss_val,
            mean_log_r=float(log_rs.mean()),
            max_log_r=float(log_rs.max()),
            replay_frac=replayed / b,
            reset=did_reset,
            seed=cfg.seed,
        )

    def _vargrad_conditions(self, rng_round: np.random.Generator, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Group slots so each group shares one condition (variance estimates
        are per-condition); group sizes are the configured k, remainder folded
        into the last group."""
        k = self.config.vargrad_group_size
        n_groups = max(1, b // k)
        group_cond = rng_round.integers(0, self.task.n_conditions, size=n_groups)
        group_of_slot = np.minimum(np.arange(b) // k, n_groups - 1)
        slot_cond = group_cond[group_of_slot]
        return slot_cond, group_of_slot

    def _reward_max_round(self, n: int) -> RoundReport:
        """Policy-gradient step on E[r] with a per-condition moving-average
        baseline. No flow head, no replay, no resets."""
        cfg = self.config
        rng_round = np.random.default_rng([cfg.seed, _STREAM_ROUND, n])
        b = cfg.batch_size
        slot_cond = rng_round.integers(0, self.task.n_conditions, size=b)
        rngs = [np.random.default_rng([cfg.seed, _STREAM_SLOT, n, i]) for i in range(b)]
        toks, log_rs = _rollout_batch(self.policy, self.task, [int(c) for c in slot_cond], rngs, cfg.sample_temperature)
        rewards = np.array(
            [
                self.task.terminal_reward(self.task.condition(int(c)), TokenSequence(t, True))
                for c, t in zip(slot_cond, toks)
            ]
        )
        advantages = rewards - self.reward_baseline[slot_cond]

        batch = build_sequence_batch(self.task, [(int(c), t) for c, t in zip(slot_cond, toks)])
        from .objectives import _sequence_sums, _step_log_probs_t  # shared batched machinery

        seq_lp = _sequence_sums(_step_log_probs_t(self.policy, batch), batch)
        loss = -(torch.from_numpy(advantages).to(seq_lp.dtype) * seq_lp).mean()
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise TrainingDiverged(f"nonfinite baseline loss at round {n}")
        backward_all(loss, [self.policy_store])
        self.policy_store.adam_step(cfg.lr_reward_max)

        for cid in range(self.task.n_conditions):
            mask = slot_cond == cid
            if mask.any():
                mean_r = rewards[mask].mean()
                self.reward_baseline[cid] += cfg.baseline_momentum * (mean_r - self.reward_baseline[cid])

        log_rs = np.asarray(log_rs)
        return RoundReport(
            round=n,
            loss=loss_val,
            mean_log_r=float(log_rs.mean()),
            max_log_r=float(log_rs.max()),
            replay_frac=0.0,
            reset=False,
            seed=cfg.seed,
        )

    # -- full runs -----------------------------------------------------------

    def train(
        self,
        diagnostics_every: int = 100,
        on_report: Callable[[RoundReport], None] | None = None,
        on_diagnostics: Callable[[int, "diag.DormantReport"], None] | None = None,
        stop_condition: Callable[["Trainer"], bool] | None = None,
    ) -> list[RoundReport]:
        """Run the configured number of rounds; emit metrics every round and a
        dormancy report every ``diagnostics_every`` rounds. ``stop_condition``
        is consulted at the diagnostics cadence."""
        reports = []
        for _ in range(self.config.rounds):
            report = self.train_round()
            reports.append(report)
            if on_report is not None:
                on_report(report)
            if diagnostics_every > 0 and report.round % diagnostics_every == 0:
                if on_diagnostics is not None:
                    on_diagnostics(report.round, self.dormant_report())
                if stop_condition is not None and stop_condition(self):
                    break
        return reports

    def dormant_report(self, tau: float = 0.0) -> "diag.DormantReport":
        return diag.dormant_ratio(self.capture_probe_activations(), tau=tau)

    def capture_probe_activations(self):
        from .nn import capture_activations

        return capture_activations(self.policy, self.flow, self.probe.cond_ids, self.probe.prefixes)

    def stores(self) -> dict[str, ParamStore]:
        out = {"policy": self.policy_store, "flow": self.flow_store}
        if self.logz_store is not None:
            out["log_z"] = self.logz_store
        return out

    def save_checkpoint(self, path) -> None:
        extra = {
            "seed": self.config.seed,
            "round": self.round,
            "objective": self.config.objective,
            "task": self.task.name,
            "reward_baseline": self.reward_baseline.tolist(),
            "network": dataclasses.asdict(self.net_config),
        }
        save_checkpoint(path, self.stores(), extra)


def train(task: SyntheticTask, config: TrainerConfig, net_config: NetworkConfig | None = None, **kwargs) -> tuple[Trainer, list[RoundReport]]:
    """Build a trainer and run it; returns the trained state and the metrics."""
    trainer = Trainer(task, config, net_config)
    reports = trainer.train(**kwargs)
    return trainer, reports


def train_reward_max_baseline(
    task: SyntheticTask, config: TrainerConfig, net_config: NetworkConfig | None = None, **kwargs
) -> tuple[Trainer, list[RoundReport]]:
    """The mode-collapse contrast: same rollout machinery, pure reward
    maximization with a moving-average baseline."""
    config = dataclasses.replace(config, objective="reward_max")
    return train(task, config, net_config, **kwargs)
