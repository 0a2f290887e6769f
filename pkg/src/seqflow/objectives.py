"""Training losses for reward-matching sequence policies.

All four objectives are squared log-ratio residuals computed entirely in log
domain, with backward transition probabilities identically one (prefix trees
have unique parents):

* trajectory balance: (log Z(x) + log P_F(y|x) - log R(x,y))^2 per sequence,
  with a learnable per-condition log Z table;
* the variance-of-log-Z variant: sample variance of log R - log P_F across a
  group of sequences sharing a condition (no explicit Z);
* detailed balance: per-edge flow matching, with the terminal state's flow
  pinned to the shaped reward;
* forward-looking detailed balance: detailed balance after reparameterizing
  flows by the step-wise reward extension, so every step carries a local
  residual; the per-sequence loss is the sum of squared step residuals and
  terminal reparameterized flows are fixed at 1.

Each loss has a generic single-sequence form accepting any policy/flow that
implements the small evaluation protocol (the tabular oracle adapters here
included), plus a batched fast path specialized to the network classes that
the trainer uses; the two are tested against each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .env import (
    Condition,
    EnumerationResult,
    Prefix,
    SyntheticTask,
    TokenSequence,
    Vocabulary,
)
from .nn import FlowHead, ParamStore, PolicyNetwork, sequence_log_prob

OBJECTIVES = ("tb", "vargrad", "db", "fldb")


@dataclass(eq=False)
class LossReport:
    """A scalar loss plus the residual structure behind it."""

    loss: torch.Tensor
    residuals: torch.Tensor | None = None
    log_z_estimates: torch.Tensor | None = None

    def item(self) -> float:
        return float(self.loss.detach())


class LogZParam:
    """Learnable log-partition scalar per condition (trajectory balance only)."""

    def __init__(self, n_conditions: int, store: ParamStore):
        self.store = store
        store.add("log_z", np.zeros(n_conditions))

    def value(self, condition_id: int) -> torch.Tensor:
        return self.store["log_z"][condition_id]


# -- tabular adapters (oracle-derived parameters) ---------------------------


class TabularPolicy:
    """Forward policy read off a table of per-prefix log next-token rows."""

    def __init__(self, rows: dict[int, dict[Prefix, np.ndarray]], vocab: Vocabulary):
        self.rows = rows
        self.vocab = vocab

    @staticmethod
    def from_oracle(results: dict[int, EnumerationResult], vocab: Vocabulary) -> "TabularPolicy":
        """The target policy: P(t | s) = F(s + t) / F(s) from exact flows."""
        rows: dict[int, dict[Prefix, np.ndarray]] = {}
        for cid, res in results.items():
            table: dict[Prefix, np.ndarray] = {}
            for prefix, log_f in res.prefix_flows.items():
                if prefix in res.table:
                    continue
                row = np.full(vocab.alphabet_size, -np.inf)
                for t in vocab.next_token_ids():
                    child = prefix + (t,)
                    if child in res.prefix_flows:
                        row[t] = res.prefix_flows[child] - log_f
                table[prefix] = row
            rows[cid] = table
        return TabularPolicy(rows, vocab)

    @staticmethod
    def from_reference(task: SyntheticTask) -> "TabularPolicy":
        """The reference model itself, as a policy over the same prefix tree."""
        rows: dict[int, dict[Prefix, np.ndarray]] = {}
        for x in task.conditions:
            table: dict[Prefix, np.ndarray] = {}

            def fill(prefix: Prefix) -> None:
                prev = prefix[-1] if prefix else None
                with np.errstate(divide="ignore"):
                    table[prefix] = task.ref.log_row(x.id, prev).copy()
                for t in range(task.vocab.size):
                    child = prefix + (t,)
                    if len(child) < task.vocab.max_len:
                        fill(child)

            fill(())
            rows[x.id] = table
        return TabularPolicy(rows, task.vocab)

    def step_log_probs(self, x: Condition, prefix: TokenSequence) -> torch.Tensor:
        return torch.from_numpy(self.rows[x.id][prefix.tokens])

    def step_log_probs_batch(self, cond_ids: np.ndarray, prefixes: Sequence[Prefix]) -> np.ndarray:
        return np.stack([self.rows[int(c)][p] for c, p in zip(cond_ids, prefixes)])


class TabularFlow:
    """State flows read off a table of log values; terminal handling matches
    the objective the table was built for."""

    def __init__(self, values: dict[int, dict[Prefix, float]]):
        self.values = values

    @staticmethod
    def exact_state_flows(results: dict[int, EnumerationResult]) -> "TabularFlow":
        """log F(s) from the oracle (detailed-balance parameterization)."""
        return TabularFlow({cid: dict(res.prefix_flows) for cid, res in results.items()})

    @staticmethod
    def exact_reparam_flows(task: SyntheticTask, results: dict[int, EnumerationResult]) -> "TabularFlow":
        """log(F(s) / R(x, s)): the forward-looking parameterization that makes
        every step residual vanish under the target policy."""
        values: dict[int, dict[Prefix, float]] = {}
        for cid, res in results.items():
            x = task.condition(cid)
            vals = {}
            for prefix, log_f in res.prefix_flows.items():
                terminal = prefix in res.table
                seq = TokenSequence(prefix, terminal)
                vals[prefix] = log_f - task.log_prefix_reward(x, seq)
            values[cid] = vals
        return TabularFlow(values)

    def log_flow(self, policy, x: Condition, prefix: TokenSequence) -> torch.Tensor:
        if prefix.terminal and prefix.tokens not in self.values[x.id]:
            return torch.zeros((), dtype=torch.float64)
        return torch.tensor(self.values[x.id][prefix.tokens], dtype=torch.float64)


# -- generic single-sequence losses -----------------------------------------


def tb_loss(policy, log_z: LogZParam, x: Condition, y: TokenSequence, log_r: float) -> LossReport:
    """Squared trajectory-balance residual for one terminal sequence."""
    residual = log_z.value(x.id) + sequence_log_prob(policy, x, y) - log_r
    return LossReport(loss=residual**2, residuals=residual.reshape(1))


def vargrad_loss(policy, x: Condition, batch: Sequence[tuple[TokenSequence, float]]) -> LossReport:
    """Sample variance of per-sequence log-partition estimates.

    Each sequence yields log Z_hat = log R - log P_F(y|x); minimizing the
    within-group variance drives all estimates to a common value. Invariant to
    shifting every log R by a constant.
    """
    if len(batch) < 2:
        raise ValueError(f"variance objective needs >= 2 sequences, got {len(batch)}")
    estimates = torch.stack([log_r - sequence_log_prob(policy, x, y) for y, log_r in batch])
    centered = estimates - estimates.mean()
    return LossReport(loss=(centered**2).mean(), residuals=centered, log_z_estimates=estimates.detach())


def db_loss(
    policy,
    flow,
    x: Condition,
    prefix: TokenSequence,
    next_prefix: TokenSequence,
    terminal_log_r: float | None = None,
) -> LossReport:
    """Squared detailed-balance residual for one edge of the prefix tree.

    At a terminal child the flow is replaced by the shaped reward, which the
    caller supplies as ``terminal_log_r``.
    """
    if next_prefix.tokens[: len(prefix.tokens)] != prefix.tokens or len(next_prefix.tokens) != len(prefix.tokens) + 1:
        raise ValueError("next_prefix must extend prefix by exactly one token")
    step_lp = policy.step_log_probs(x, prefix)[next_prefix.tokens[-1]]
    upstream = flow.log_flow(policy, x, prefix) + step_lp
    if next_prefix.terminal:
        if terminal_log_r is None:
            raise ValueError("terminal edge requires terminal_log_r")
        downstream = torch.as_tensor(terminal_log_r)
    else:
        downstream = flow.log_flow(policy, x, next_prefix)
    residual = upstream - downstream
    return LossReport(loss=residual**2, residuals=residual.reshape(1))


def fl_db_loss(policy, flow, task: SyntheticTask, x: Condition, y: TokenSequence) -> LossReport:
    """Sum of squared forward-looking step residuals along one trajectory.

    Step t compares log F~(s_t) + log P_F(t+1) + log R(x, s_t) against
    log F~(s_{t+1}) + log R(x, s_{t+1}), with log F~ = 0 at the terminal state.
    """
    if not y.terminal:
        raise ValueError("forward-looking loss is defined on terminal sequences")
    residuals = []
    n = len(y.tokens)
    log_r_here = task.log_prefix_reward(x, TokenSequence((), False))
    flow_here = flow.log_flow(policy, x, TokenSequence((), False))
    for t in range(n):
        prefix = TokenSequence(y.tokens[:t], False)
        nxt_tokens = y.tokens[: t + 1]
        nxt = TokenSequence(nxt_tokens, terminal=(t + 1 == n))
        step_lp = policy.step_log_probs(x, prefix)[y.tokens[t]]
        log_r_next = task.log_prefix_reward(x, nxt)
        flow_next = flow.log_flow(policy, x, nxt) if not nxt.terminal else torch.zeros(())
        residuals.append(flow_here + step_lp + log_r_here - flow_next - log_r_next)
        log_r_here = log_r_next
        flow_here = flow_next
    res = torch.stack(residuals)
    return LossReport(loss=(res**2).sum(), residuals=res)


# -- batched fast paths (network policies only) ------------------------------


@dataclass(eq=False)
class SequenceBatch:
    """Flattened per-step view of a batch of terminal sequences.

    Rows are grouped by sequence in step order, so "the next row" within a
    group is the next decision of the same sequence.
    """

    cond_ids: np.ndarray          # (rows,)
    prefixes: list[Prefix]        # rows
    chosen: np.ndarray            # (rows,)
    seq_index: np.ndarray         # (rows,) which sequence each row belongs to
    is_last: np.ndarray           # (rows,) bool
    log_r_prefix: np.ndarray      # (rows,) step-wise reward extension at the prefix
    log_r_next: np.ndarray        # (rows,) ... at the child (shaped reward at terminal)
    terminal_log_r: np.ndarray    # (n_sequences,)
    n_sequences: int
    group_ids: np.ndarray | None = None  # (n_sequences,) for grouped objectives


def build_sequence_batch(
    task: SyntheticTask, items: Sequence[tuple[int, Prefix]], group_ids: Sequence[int] | None = None
) -> SequenceBatch:
    """Precompute prefix rewards and row bookkeeping for a batch of terminal
    sequences given as (condition_id, tokens) pairs.

    The step-wise reward extension telescopes, so it is accumulated one bigram
    factor at a time, with the terminal correction r/beta added on the last
    step only.
    """
    cond_ids, prefixes, chosen, seq_index, is_last = [], [], [], [], []
    log_r_prefix, log_r_next, terminal_log_r = [], [], []
    eos = task.vocab.eos_id
    for i, (cid, tokens) in enumerate(items):
        x = task.condition(cid)
        n = len(tokens)
        running = 0.0
        prev: int | None = None
        for t in range(n):
            cond_ids.append(cid)
            prefixes.append(tokens[:t])
            chosen.append(tokens[t])
            seq_index.append(i)
            last = t + 1 == n
            is_last.append(last)
            log_r_prefix.append(running)
            running += float(task.ref.log_row(cid, prev)[tokens[t]])
            if last:
                running += task.terminal_reward(x, TokenSequence(tokens, True)) / task.beta
            log_r_next.append(running)
            prev = None if tokens[t] == eos else tokens[t]
        terminal_log_r.append(running)
    return SequenceBatch(
        cond_ids=np.asarray(cond_ids, dtype=np.int64),
        prefixes=prefixes,
        chosen=np.asarray(chosen, dtype=np.int64),
        seq_index=np.asarray(seq_index, dtype=np.int64),
        is_last=np.asarray(is_last, dtype=bool),
        log_r_prefix=np.asarray(log_r_prefix, dtype=np.float64),
        log_r_next=np.asarray(log_r_next, dtype=np.float64),
        terminal_log_r=np.asarray(terminal_log_r, dtype=np.float64),
        n_sequences=len(items),
        group_ids=None if group_ids is None else np.asarray(group_ids, dtype=np.int64),
    )


def _step_log_probs_t(policy: PolicyNetwork, batch: SequenceBatch, features_out: list | None = None) -> torch.Tensor:
    cond = torch.from_numpy(batch.cond_ids)
    win = torch.from_numpy(policy.windows_for(batch.prefixes))
    h2 = policy.trunk_features(cond, win)
    if features_out is not None:
        features_out.append(h2)
    logits = policy.head_logits(h2)
    mask = policy._mask_rows(batch.prefixes)
    if mask is not None:
        logits = logits + mask
    lp = torch.log_softmax(logits, dim=1)
    return lp.gather(1, torch.from_numpy(batch.chosen).unsqueeze(1)).squeeze(1)


def _sequence_sums(values: torch.Tensor, batch: SequenceBatch) -> torch.Tensor:
    sums = values.new_zeros(batch.n_sequences)
    return sums.index_add(0, torch.from_numpy(batch.seq_index), values)


def fldb_batch_loss(policy: PolicyNetwork, flow: FlowHead, batch: SequenceBatch) -> torch.Tensor:
    """Mean over sequences of summed squared forward-looking step residuals."""
    feats: list[torch.Tensor] = []
    lp = _step_log_probs_t(policy, batch, feats)
    f = flow.values_from_features(feats[0])
    shifted = torch.cat([f[1:], f.new_zeros(1)])
    last = torch.from_numpy(batch.is_last)
    f_next = torch.where(last, f.new_zeros(()), shifted)
    res = f + lp + torch.from_numpy(batch.log_r_prefix).to(f.dtype) - f_next - torch.from_numpy(batch.log_r_next).to(f.dtype)
    return (res**2).sum() / batch.n_sequences


def db_batch_loss(policy: PolicyNetwork, flow: FlowHead, batch: SequenceBatch) -> torch.Tensor:
    """Mean over sequences of summed squared detailed-balance edge residuals."""
    feats: list[torch.Tensor] = []
    lp = _step_log_probs_t(policy, batch, feats)
    f = flow.values_from_features(feats[0])
    shifted = torch.cat([f[1:], f.new_zeros(1)])
    last = torch.from_numpy(batch.is_last)
    terminal = torch.from_numpy(batch.terminal_log_r[batch.seq_index]).to(f.dtype)
    downstream = torch.where(last, terminal, shifted)
    res = f + lp - downstream
    return (res**2).sum() / batch.n_sequences


def tb_batch_loss(policy: PolicyNetwork, log_z: LogZParam, batch: SequenceBatch) -> torch.Tensor:
    """Mean squared trajectory-balance residual over the batch."""
    lp = _step_log_probs_t(policy, batch)
    seq_lp = _sequence_sums(lp, batch)
    cond_of_seq = np.asarray([batch.cond_ids[batch.seq_index == i][0] for i in range(batch.n_sequences)])
    z = log_z.store["log_z"][torch.from_numpy(cond_of_seq)]
    res = z + seq_lp - torch.from_numpy(batch.terminal_log_r).to(seq_lp.dtype)
    return (res**2).mean()


def vargrad_batch_loss(policy: PolicyNetwork, batch: SequenceBatch) -> torch.Tensor:
    """Mean over groups of the within-group variance of log-Z estimates.

    ``batch.group_ids`` assigns each sequence to a group; every group must
    share one condition and contain at least two sequences.
    """
    if batch.group_ids is None:
        raise ValueError("vargrad batch requires group ids")
    lp = _step_log_probs_t(policy, batch)
    seq_lp = _sequence_sums(lp, batch)
    estimates = torch.from_numpy(batch.terminal_log_r).to(seq_lp.dtype) - seq_lp
    gids = torch.from_numpy(batch.group_ids)
    n_groups = int(batch.group_ids.max()) + 1
    counts = torch.zeros(n_groups, dtype=estimates.dtype).index_add(0, gids, torch.ones_like(estimates))
    if (counts < 2).any():
        raise ValueError("every vargrad group needs >= 2 sequences")
    sums = torch.zeros(n_groups, dtype=estimates.dtype).index_add(0, gids, estimates)
    centered = estimates - (sums / counts)[gids]
    per_group = torch.zeros(n_groups, dtype=estimates.dtype).index_add(0, gids, centered**2) / counts
    return per_group.mean()
