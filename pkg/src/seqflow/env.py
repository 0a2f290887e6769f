"""Conditional token-sequence environments with exactly enumerable targets.

A task couples a tabular bigram reference model over token sequences with a
terminal reward. Together they define an unnormalized density over complete
sequences,

    log R(x, y) = log p_ref(y | x) + r(x, y) / beta,

whose normalizer Z(x), target distribution P*(y|x) = R(x,y)/Z(x) and exact
prefix flows F(prefix) = sum of R over terminal descendants are all computable
by brute force on small instances. Every distributional claim made elsewhere
in the package is checked against this oracle.

Sequences live on a prefix tree: a state is a tuple of token ids, extended one
token at a time until either the end-of-sequence token is emitted or the
ordinary-token count reaches ``max_len`` (a hard cap; capped sequences carry
no eos factor). Because every prefix has a unique parent, backward transition
probabilities are identically one and never appear explicitly.

This module is deliberately torch-free so the oracle stays independent of the
learned components it is used to test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

Prefix = tuple[int, ...]

# Refuse to enumerate terminal sets larger than this.
ENUMERATION_BUDGET = 10_000_000

_ROW_SUM_TOL = 1e-12


class ContractViolation(ValueError):
    """An operation was invoked outside its stated preconditions."""


class EnumerationBudgetError(RuntimeError):
    """The terminal set is too large to enumerate exactly."""


@dataclass(frozen=True)
class Vocabulary:
    """Token alphabet. Ordinary ids are 0..size-1; id ``size`` is reserved for eos.

    ``max_len`` caps the number of ordinary tokens per sequence. When
    ``eos_enabled`` is false the environment is fixed-length: eos is never a
    legal choice and every sequence terminates exactly at the cap.
    """

    size: int
    max_len: int
    eos_enabled: bool = True

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError(f"vocabulary size must be >= 1, got {self.size}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")

    @property
    def eos_id(self) -> int:
        return self.size

    @property
    def pad_id(self) -> int:
        return self.size + 1

    @property
    def alphabet_size(self) -> int:
        """Width of a next-token distribution: ordinary tokens plus eos."""
        return self.size + 1

    def next_token_ids(self) -> range:
        """Token ids choosable at any non-terminal prefix."""
        return range(self.size + 1) if self.eos_enabled else range(self.size)

    def terminal_count(self) -> int:
        """Number of terminal sequences in the prefix tree."""
        if not self.eos_enabled:
            return self.size**self.max_len
        # eos after k ordinary tokens (k < max_len), plus all capped sequences
        return sum(self.size**k for k in range(self.max_len)) + self.size**self.max_len


@dataclass(frozen=True)
class Condition:
    """The conditioning input: a dense integer id plus descriptive tokens."""

    id: int
    tokens: Prefix = ()


@dataclass(frozen=True)
class TokenSequence:
    """A (partial) generation: token ids plus the terminal flag.

    eos may appear at most once and only in final position; a sequence is
    terminal iff it ends in eos or its ordinary-token count equals max_len.
    Construct through :func:`sequence` or :func:`extend` so the flag and the
    structural invariants are always consistent.
    """

    tokens: Prefix
    terminal: bool

    def __len__(self) -> int:
        return len(self.tokens)


def sequence(vocab: Vocabulary, tokens: Iterable[int]) -> TokenSequence:
    """Validate ``tokens`` against ``vocab`` and build the TokenSequence."""
    toks = tuple(int(t) for t in tokens)
    has_eos = len(toks) > 0 and toks[-1] == vocab.eos_id
    ordinary = toks[:-1] if has_eos else toks
    for t in ordinary:
        if not 0 <= t < vocab.size:
            raise ContractViolation(f"token id {t} outside ordinary range [0, {vocab.size})")
    if has_eos and not vocab.eos_enabled:
        raise ContractViolation("eos token used in a fixed-length vocabulary")
    if vocab.eos_id in ordinary:
        raise ContractViolation("eos may only appear in final position")
    if len(ordinary) > vocab.max_len:
        raise ContractViolation(f"{len(ordinary)} ordinary tokens exceeds max_len={vocab.max_len}")
    if has_eos and len(ordinary) == vocab.max_len:
        raise ContractViolation("eos cannot follow a sequence already at max_len")
    terminal = has_eos or len(ordinary) == vocab.max_len
    return TokenSequence(toks, terminal)


def empty_sequence() -> TokenSequence:
    """The root of the prefix tree."""
    return TokenSequence((), False)


def extend(vocab: Vocabulary, prefix: TokenSequence, token: int) -> TokenSequence:
    """Append one token, updating the terminal flag.

    Extending a terminal sequence or using an unavailable token id is a
    contract violation.
    """
    if prefix.terminal:
        raise ContractViolation(f"cannot extend terminal sequence {prefix.tokens}")
    token = int(token)
    if token not in vocab.next_token_ids():
        raise ContractViolation(f"token id {token} not choosable (alphabet size {vocab.size}, eos_enabled={vocab.eos_enabled})")
    terminal = token == vocab.eos_id or len(prefix.tokens) + 1 == vocab.max_len
    return TokenSequence(prefix.tokens + (token,), terminal)


def prefix_of(vocab: Vocabulary, tokens: Prefix) -> TokenSequence:
    """Convenience wrapper: a validated TokenSequence from a raw tuple."""
    return sequence(vocab, tokens)


@dataclass(eq=False)
class BigramRefModel:
    """Tabular conditional bigram: a start row and per-previous-token rows.

    ``start`` has shape (n_conditions, size+1) and ``trans`` shape
    (n_conditions, size, size+1); the final column is the eos probability.
    Every row is stochastic, and every choosable entry is strictly positive so
    log p_ref is finite on all reachable sequences. For fixed-length
    vocabularies the eos column must be identically zero.
    """

    start: np.ndarray
    trans: np.ndarray
    _log_start: np.ndarray = field(init=False, repr=False)
    _log_trans: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.start = np.asarray(self.start, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        with np.errstate(divide="ignore"):
            self._log_start = np.log(self.start)
            self._log_trans = np.log(self.trans)

    def validate(self, vocab: Vocabulary, n_conditions: int) -> None:
        a = vocab.alphabet_size
        if self.start.shape != (n_conditions, a):
            raise ValueError(f"start shape {self.start.shape} != {(n_conditions, a)}")
        if self.trans.shape != (n_conditions, vocab.size, a):
            raise ValueError(f"trans shape {self.trans.shape} != {(n_conditions, vocab.size, a)}")
        rows = np.concatenate([self.start[:, None, :], self.trans], axis=1).reshape(-1, a)
        sums = rows.sum(axis=1)
        if np.abs(sums - 1.0).max() > _ROW_SUM_TOL:
            raise ValueError(f"reference rows must sum to 1 within {_ROW_SUM_TOL}; worst deviation {np.abs(sums - 1.0).max():.3e}")
        if vocab.eos_enabled:
            if rows.min() <= 0.0:
                raise ValueError("every reference row entry must be > 0 when eos is enabled")
        else:
            if rows[:, :-1].min() <= 0.0:
                raise ValueError("every ordinary-token entry must be > 0")
            if np.abs(rows[:, -1]).max() != 0.0:
                raise ValueError("eos column must be zero for a fixed-length vocabulary")

    def log_row(self, condition_id: int, prev_token: int | None) -> np.ndarray:
        """log next-token probabilities given the previous ordinary token (None = start)."""
        if prev_token is None:
            return self._log_start[condition_id]
        return self._log_trans[condition_id, prev_token]

    def row(self, condition_id: int, prev_token: int | None) -> np.ndarray:
        return self.start[condition_id] if prev_token is None else self.trans[condition_id, prev_token]


@dataclass(frozen=True)
class ModeReward:
    """r = r_hi if the sequence contains any mode pattern (as a contiguous
    run of ordinary tokens), else r_lo."""

    patterns: tuple[Prefix, ...]
    r_hi: float
    r_lo: float = 0.0

    def __call__(self, ordinary_tokens: Prefix) -> float:
        for pat in self.patterns:
            if _contains(ordinary_tokens, pat):
                return self.r_hi
        return self.r_lo


@dataclass(frozen=True)
class CountReward:
    """r = alpha * min(occurrences of ``token``, cap)."""

    token: int
    alpha: float
    cap: int

    def __call__(self, ordinary_tokens: Prefix) -> float:
        return self.alpha * min(ordinary_tokens.count(self.token), self.cap)


RewardSpec = Union[ModeReward, CountReward]


def _contains(haystack: Prefix, needle: Prefix) -> bool:
    n = len(needle)
    if n == 0 or n > len(haystack):
        return False
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


@dataclass(eq=False)
class SyntheticTask:
    """A fully specified environment: vocabulary, conditions, reference model,
    terminal reward and the inverse temperature beta of the shaped reward."""

    name: str
    vocab: Vocabulary
    conditions: tuple[Condition, ...]
    ref: BigramRefModel
    reward: RewardSpec
    beta: float
    source_config: dict | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        ids = [c.id for c in self.conditions]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"condition ids must be 0..{len(ids) - 1}, got {ids}")
        self.ref.validate(self.vocab, len(self.conditions))

    @property
    def n_conditions(self) -> int:
        return len(self.conditions)

    def condition(self, condition_id: int) -> Condition:
        return self.conditions[condition_id]

    # -- reward / likelihood surface ------------------------------------

    def ref_log_prob(self, x: Condition, prefix: TokenSequence) -> float:
        """log p_ref of a prefix: sum of bigram factors, eos factor included
        when present, empty prefix = 0."""
        total = 0.0
        prev: int | None = None
        for t in prefix.tokens:
            total += float(self.ref.log_row(x.id, prev)[t])
            prev = None if t == self.vocab.eos_id else t
        return total

    def terminal_reward(self, x: Condition, y: TokenSequence) -> float:
        """The task reward r(x, y); defined on terminal sequences only."""
        if not y.terminal:
            raise ContractViolation("terminal_reward called on a non-terminal sequence")
        return float(self.reward(_strip_eos(self.vocab, y.tokens)))

    def log_shaped_reward(self, x: Condition, y: TokenSequence) -> float:
        """log R(x, y) = log p_ref(y|x) + r(x, y) / beta."""
        if not y.terminal:
            raise ContractViolation("log_shaped_reward called on a non-terminal sequence")
        return self.ref_log_prob(x, y) + self.terminal_reward(x, y) / self.beta

    def log_prefix_reward(self, x: Condition, prefix: TokenSequence) -> float:
        """Step-wise extension of log R to all states: log p_ref of the prefix
        while non-terminal, the full shaped reward at terminal states."""
        if prefix.terminal:
            return self.log_shaped_reward(x, prefix)
        return self.ref_log_prob(x, prefix)


def _strip_eos(vocab: Vocabulary, tokens: Prefix) -> Prefix:
    if tokens and tokens[-1] == vocab.eos_id:
        return tokens[:-1]
    return tokens


# -- exact enumeration ---------------------------------------------------


class TerminalEntry(NamedTuple):
    log_r: float
    p_star: float


@dataclass(eq=False)
class EnumerationResult:
    """Ground truth for one condition: log Z, the terminal table and exact
    log prefix flows (terminal prefixes carry their own log R)."""

    condition_id: int
    log_z: float
    table: dict[Prefix, TerminalEntry]
    prefix_flows: dict[Prefix, float]

    def terminals(self) -> list[Prefix]:
        return sorted(self.table)

    def p_star(self) -> dict[Prefix, float]:
        return {t: e.p_star for t, e in self.table.items()}

    def to_json_dict(self) -> dict:
        return {
            "condition_id": self.condition_id,
            "log_z": self.log_z,
            "table": {
                _key(t): {"log_r": e.log_r, "p_star": e.p_star} for t, e in sorted(self.table.items())
            },
            "prefix_flows": {_key(p): f for p, f in sorted(self.prefix_flows.items())},
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "EnumerationResult":
        table = {
            _unkey(k): TerminalEntry(v["log_r"], v["p_star"]) for k, v in obj["table"].items()
        }
        flows = {_unkey(k): float(v) for k, v in obj["prefix_flows"].items()}
        return EnumerationResult(int(obj["condition_id"]), float(obj["log_z"]), table, flows)


def _key(prefix: Prefix) -> str:
    return " ".join(str(t) for t in prefix)


def _unkey(key: str) -> Prefix:
    return tuple(int(t) for t in key.split()) if key else ()


def _logsumexp(values: list[float]) -> float:
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in values))


def enumerate_condition(task: SyntheticTask, x: Condition) -> EnumerationResult:
    """Visit every terminal sequence for ``x``; compute log R, log Z, P* and
    exact prefix flows. Deterministic depth-first order."""
    n_terminals = task.vocab.terminal_count()
    if n_terminals > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(
            f"task '{task.name}' has {n_terminals} terminal sequences for condition "
            f"{x.id}, above the enumeration budget of {ENUMERATION_BUDGET}"
        )
    vocab = task.vocab
    beta = task.beta
    table: dict[Prefix, TerminalEntry] = {}
    flows: dict[Prefix, float] = {}

    def visit(prefix: Prefix, log_p: float) -> float:
        prev = prefix[-1] if prefix else None
        log_row = task.ref.log_row(x.id, prev)
        child_flows = []
        for t in vocab.next_token_ids():
            child = prefix + (t,)
            child_log_p = log_p + float(log_row[t])
            if t == vocab.eos_id or len(child) == vocab.max_len:
                r = task.reward(_strip_eos(vocab, child))
                log_r = child_log_p + r / beta
                table[child] = TerminalEntry(log_r, 0.0)
                flows[child] = log_r
                child_flows.append(log_r)
            else:
                child_flows.append(visit(child, child_log_p))
        f = _logsumexp(child_flows)
        flows[prefix] = f
        return f

    log_z = visit((), 0.0)
    total = 0.0
    for t, entry in table.items():
        p = math.exp(entry.log_r - log_z)
        table[t] = TerminalEntry(entry.log_r, p)
        total += p
    if abs(total - 1.0) > 1e-9:
        raise AssertionError(f"P* sums to {total}, not 1")
    return EnumerationResult(x.id, log_z, table, flows)


# -- task configuration --------------------------------------------------

_TASK_KEYS = {"name", "vocab", "conditions", "ref_model", "reward", "beta"}
_VOCAB_KEYS = {"size", "max_len", "eos_enabled"}


def build_task(config: dict) -> SyntheticTask:
    """Build a task from its JSON-style config dict. Unknown keys are rejected."""
    _check_keys(config, _TASK_KEYS, "task")
    vocab_cfg = dict(config["vocab"])
    _check_keys(vocab_cfg, _VOCAB_KEYS, "vocab")
    vocab = Vocabulary(
        size=int(vocab_cfg["size"]),
        max_len=int(vocab_cfg["max_len"]),
        eos_enabled=bool(vocab_cfg.get("eos_enabled", True)),
    )
    conditions = _build_conditions(config["conditions"])
    ref = _build_ref_model(config["ref_model"], vocab, len(conditions))
    reward = _build_reward(config["reward"], vocab)
    return SyntheticTask(
        name=str(config.get("name", "task")),
        vocab=vocab,
        conditions=conditions,
        ref=ref,
        reward=reward,
        beta=float(config["beta"]),
        source_config=json.loads(json.dumps(config)),
    )


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown {where} config keys: {sorted(unknown)}")


def _build_conditions(spec) -> tuple[Condition, ...]:
    if isinstance(spec, int):
        return tuple(Condition(i, (i,)) for i in range(spec))
    out = []
    for entry in spec:
        _check_keys(entry, {"id", "tokens"}, "condition")
        out.append(Condition(int(entry["id"]), tuple(int(t) for t in entry.get("tokens", ()))))
    return tuple(out)


def _build_ref_model(spec: dict, vocab: Vocabulary, n_conditions: int) -> BigramRefModel:
    kind = spec.get("kind")
    if kind == "explicit":
        _check_keys(spec, {"kind", "start", "trans"}, "ref_model")
        return BigramRefModel(
            start=np.asarray(spec["start"], dtype=np.float64),
            trans=np.asarray(spec["trans"], dtype=np.float64),
        )
    if kind == "seeded":
        _check_keys(spec, {"kind", "seed", "concentration", "eos_weight"}, "ref_model")
        return seeded_ref_model(
            vocab,
            n_conditions,
            seed=int(spec["seed"]),
            concentration=float(spec.get("concentration", 5.0)),
            eos_weight=float(spec.get("eos_weight", 1.0)),
        )
    raise ValueError(f"unknown ref_model kind: {kind!r}")


def seeded_ref_model(
    vocab: Vocabulary, n_conditions: int, seed: int, concentration: float = 5.0, eos_weight: float = 1.0
) -> BigramRefModel:
    """Dirichlet rows with a small probability floor; deterministic in the seed.

    ``eos_weight`` tilts the Dirichlet mean toward (or away from) eos, setting
    the typical sequence length; ordinary tokens stay exchangeable.
    """
    rng = np.random.default_rng(seed)
    width = vocab.alphabet_size if vocab.eos_enabled else vocab.size
    floor = 1e-4
    alphas = np.full(width, concentration)
    if vocab.eos_enabled:
        alphas[-1] *= eos_weight

    def rows(n: int) -> np.ndarray:
        raw = rng.dirichlet(alphas, size=n)
        raw = np.maximum(raw, floor)
        raw /= raw.sum(axis=1, keepdims=True)
        if not vocab.eos_enabled:
            raw = np.concatenate([raw, np.zeros((n, 1))], axis=1)
        return raw

    start = rows(n_conditions)
    trans = rows(n_conditions * vocab.size).reshape(n_conditions, vocab.size, vocab.alphabet_size)
    return BigramRefModel(start=start, trans=trans)


def _build_reward(spec: dict, vocab: Vocabulary) -> RewardSpec:
    kind = spec.get("kind")
    if kind == "mode":
        _check_keys(spec, {"kind", "patterns", "r_hi", "r_lo"}, "reward")
        patterns = tuple(tuple(int(t) for t in p) for p in spec["patterns"])
        for pat in patterns:
            if any(not 0 <= t < vocab.size for t in pat):
                raise ValueError(f"mode pattern {pat} has token ids outside the vocabulary")
        return ModeReward(patterns=patterns, r_hi=float(spec["r_hi"]), r_lo=float(spec.get("r_lo", 0.0)))
    if kind == "count":
        _check_keys(spec, {"kind", "token", "alpha", "cap"}, "reward")
        token = int(spec["token"])
        if not 0 <= token < vocab.size:
            raise ValueError(f"count token id {token} outside the vocabulary")
        return CountReward(token=token, alpha=float(spec["alpha"]), cap=int(spec["cap"]))
    raise ValueError(f"unknown reward kind: {kind!r}")


# Built-in task suite. The eight-modes instance is the workhorse for the
# training-level checks; the tiny fixed-length instances are for exactness
# gates where every quantity fits in a hand calculation.
BUILTIN_TASKS: dict[str, dict] = {
    "eight_modes": {
        "name": "eight_modes",
        "vocab": {"size": 6, "max_len": 6},
        "conditions": 2,
        "ref_model": {"kind": "seeded", "seed": 2061, "concentration": 60.0, "eos_weight": 2.5},
        "reward": {
            "kind": "mode",
            "patterns": [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 0], [2, 0], [3, 5]],
            "r_hi": 0.1,
            "r_lo": 0.0,
        },
        "beta": 0.05,
    },
    "single_mode": {
        "name": "single_mode",
        "vocab": {"size": 4, "max_len": 4},
        "conditions": 1,
        "ref_model": {"kind": "seeded", "seed": 411, "concentration": 5.0},
        "reward": {"kind": "mode", "patterns": [[2, 2]], "r_hi": 1.0, "r_lo": 0.0},
        "beta": 0.05,
    },
    "count": {
        "name": "count",
        "vocab": {"size": 4, "max_len": 5},
        "conditions": 2,
        "ref_model": {"kind": "seeded", "seed": 455, "concentration": 5.0},
        "reward": {"kind": "count", "token": 1, "alpha": 0.5, "cap": 3},
        "beta": 0.25,
    },
    "zero_reward": {
        "name": "zero_reward",
        "vocab": {"size": 4, "max_len": 4},
        "conditions": 2,
        "ref_model": {"kind": "seeded", "seed": 440, "concentration": 5.0},
        "reward": {"kind": "mode", "patterns": [], "r_hi": 0.0, "r_lo": 0.0},
        "beta": 1.0,
    },
    "v2t2": {
        "name": "v2t2",
        "vocab": {"size": 2, "max_len": 2, "eos_enabled": False},
        "conditions": 1,
        "ref_model": {
            "kind": "explicit",
            "start": [[0.5, 0.5, 0.0]],
            "trans": [[[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]]],
        },
        "reward": {"kind": "mode", "patterns": [[0, 0]], "r_hi": 1.0986122886681098, "r_lo": 0.0},
        "beta": 1.0,
    },
    "v4t4": {
        "name": "v4t4",
        "vocab": {"size": 4, "max_len": 4},
        "conditions": 2,
        "ref_model": {"kind": "seeded", "seed": 444, "concentration": 5.0},
        "reward": {"kind": "mode", "patterns": [[0, 1], [2, 3]], "r_hi": 1.0, "r_lo": 0.0},
        "beta": 0.5,
    },
}


def load_task(name_or_path: str | dict) -> SyntheticTask:
    """Resolve a task from a built-in name, a JSON file path, or an inline dict."""
    if isinstance(name_or_path, dict):
        return build_task(name_or_path)
    key = str(name_or_path).replace("-", "_")
    if key in BUILTIN_TASKS:
        return build_task(BUILTIN_TASKS[key])
    path = Path(name_or_path)
    if path.exists():
        with open(path) as f:
            return build_task(json.load(f))
    raise ValueError(f"unknown task {name_or_path!r}: not a built-in name or an existing file")
