"""Context-window networks, their parameter store and the optimizer around them.

The policy is a small MLP over the concatenation of a per-condition embedding
and the embeddings of the last ``window`` prefix tokens (left-padded), with a
zero-initialized output head so the untrained policy is uniform over unmasked
tokens. The flow head reads the trunk's final hidden activations and produces
a scalar log-flow; its output layer can be re-drawn in place while every other
parameter (and its optimizer state) stays bit-identical.

Parameters live in a ParamStore: named tensors plus per-array Adam moments and
step counters. Checkpoints are a JSON manifest plus one little-endian float32
blob per array, concatenated; round-trips are bit-exact for float32 stores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .env import Condition, ContractViolation, Prefix, SyntheticTask, TokenSequence, Vocabulary

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_NP_DTYPES = {"float32": np.float32, "float64": np.float64}


class GradientError(RuntimeError):
    """A gradient or updated parameter came out nonfinite."""


class ParamStore:
    """Named parameter arrays with per-array Adam state.

    Shapes are immutable after creation. ``backward`` populates gradients for
    every array (zeros for non-participating ones) and fails loudly, naming
    the offending array, if any gradient is nonfinite.
    """

    def __init__(self, dtype: str = "float32"):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}")
        self.dtype_name = dtype
        self.dtype = _DTYPES[dtype]
        self._params: dict[str, torch.Tensor] = {}
        self._m: dict[str, torch.Tensor] = {}
        self._v: dict[str, torch.Tensor] = {}
        self._steps: dict[str, int] = {}
        self.grads: dict[str, torch.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = torch.tensor(np.asarray(value), dtype=self.dtype, requires_grad=True)
        self._params[name] = t
        self._m[name] = torch.zeros_like(t, requires_grad=False)
        self._v[name] = torch.zeros_like(t, requires_grad=False)
        self._steps[name] = 0
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[torch.Tensor]:
        return list(self._params.values())

    def step_count(self, name: str) -> int:
        return self._steps[name]

    def moments(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        return self._m[name], self._v[name]

    def backward(self, loss: torch.Tensor) -> None:
        """Reverse-mode gradients of ``loss`` into ``self.grads``."""
        grads = torch.autograd.grad(
            loss, self.tensors(), allow_unused=True, retain_graph=False, create_graph=False
        )
        self.set_grads_from(zip(self.names(), grads))

    def set_grads_from(self, named_grads: Iterable[tuple[str, torch.Tensor | None]]) -> None:
        for name, g in named_grads:
            p = self._params[name]
            if g is None:
                g = torch.zeros_like(p)
            else:
                g = g.detach()
                if not torch.isfinite(g).all():
                    raise GradientError(f"nonfinite gradient for parameter {name!r}")
            self.grads[name] = g

    def adam_step(self, lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
        """Bias-corrected Adam update over all arrays using stored gradients."""
        if set(self.grads) != set(self._params):
            missing = set(self._params) - set(self.grads)
            raise RuntimeError(f"adam_step without gradients for {sorted(missing)}")
        with torch.no_grad():
            for name, p in self._params.items():
                g = self.grads[name]
                self._steps[name] += 1
                t = self._steps[name]
                m, v = self._m[name], self._v[name]
                m.mul_(beta1).add_(g, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
                m_hat = m / (1.0 - beta1**t)
                v_hat = v / (1.0 - beta2**t)
                p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
                if not torch.isfinite(p).all():
                    raise GradientError(f"nonfinite values in parameter {name!r} after update")

    def reset_array(self, name: str, value: np.ndarray) -> None:
        """Overwrite one array in place and zero its optimizer state."""
        p = self._params[name]
        new = torch.tensor(np.asarray(value), dtype=self.dtype)
        if new.shape != p.shape:
            raise ValueError(f"shape mismatch resetting {name!r}: {tuple(new.shape)} vs {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(new)
        self._m[name].zero_()
        self._v[name].zero_()
        self._steps[name] = 0

    def load_state(self, name: str, param: np.ndarray, m: np.ndarray, v: np.ndarray, step: int) -> None:
        with torch.no_grad():
            self._params[name].copy_(torch.tensor(param, dtype=self.dtype))
            self._m[name].copy_(torch.tensor(m, dtype=self.dtype))
            self._v[name].copy_(torch.tensor(v, dtype=self.dtype))
        self._steps[name] = step

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self._params.values())


def backward_all(loss: torch.Tensor, stores: Sequence[ParamStore]) -> None:
    """One reverse pass populating gradients across several stores."""
    tensors: list[torch.Tensor] = []
    owners: list[tuple[ParamStore, str]] = []
    for store in stores:
        for name in store.names():
            tensors.append(store[name])
            owners.append((store, name))
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    for (store, name), g in zip(owners, grads):
        store.set_grads_from([(name, g)])


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and initialization knobs shared by policy and flow head."""

    embed_dim: int = 16
    window: int = 6
    hidden_dim: int = 64
    flow_hidden_dim: int = 64
    init_scale: float = 1.0
    flow_init_scale: float = 1.0
    trunk_gain: float = 300.0
    logit_gain: float = 300.0
    flow_gain: float = 100.0
    mask_eos_at_start: bool = False
    dtype: str = "float32"

    def __post_init__(self) -> None:
        for name in ("embed_dim", "window", "hidden_dim", "flow_hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.trunk_gain <= 0 or self.logit_gain <= 0 or self.flow_gain <= 0:
            raise ValueError("layer gains must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")


def _uniform(rng: np.random.Generator, bound: float, shape: tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def _hidden_bound(fan_in: int, scale: float) -> float:
    # He-style uniform bound for rectifier layers.
    return scale * math.sqrt(6.0 / fan_in)


class PolicyNetwork:
    """Autoregressive forward policy over the task's prefix tree.

    Input features: condition embedding concatenated with the embeddings of
    the last ``window`` prefix tokens (left-padded with a dedicated pad id).
    Two rectifier hidden layers feed a linear head producing one logit per
    alphabet entry (ordinary tokens + eos); structurally unavailable tokens
    are masked to -inf before normalization.
    """

    def __init__(self, task: SyntheticTask, config: NetworkConfig, store: ParamStore, rng: np.random.Generator):
        self.vocab = task.vocab
        self.n_conditions = task.n_conditions
        self.config = config
        self.store = store
        d, w, h = config.embed_dim, config.window, config.hidden_dim
        a = self.vocab.alphabet_size
        in_dim = d * (1 + w)
        g = config.trunk_gain
        emb_bound = config.init_scale
        store.add("cond_emb", _uniform(rng, emb_bound, (self.n_conditions, d)))
        store.add("tok_emb", _uniform(rng, emb_bound, (self.vocab.size + 2, d)))
        store.add("trunk_w1", _uniform(rng, _hidden_bound(in_dim, config.init_scale) / g, (in_dim, h)))
        store.add("trunk_b1", np.zeros(h))
        store.add("trunk_w2", _uniform(rng, _hidden_bound(h, config.init_scale) / g, (h, h)))
        store.add("trunk_b2", np.zeros(h))
        store.add("head_w", np.zeros((h, a)))
        store.add("head_b", np.zeros(a))

    # -- feature assembly -------------------------------------------------

    def window_ids(self, prefix: Prefix) -> np.ndarray:
        w = self.config.window
        pad = self.vocab.pad_id
        tail = prefix[-w:] if len(prefix) >= w else prefix
        return np.array([pad] * (w - len(tail)) + list(tail), dtype=np.int64)

    def windows_for(self, prefixes: Sequence[Prefix]) -> np.ndarray:
        return np.stack([self.window_ids(p) for p in prefixes])

    def trunk_features(
        self, cond_ids: torch.Tensor, windows: torch.Tensor, capture: dict | None = None
    ) -> torch.Tensor:
        s = self.store
        g = self.config.trunk_gain
        cond = s["cond_emb"][cond_ids]
        toks = s["tok_emb"][windows].reshape(windows.shape[0], -1)
        x = torch.cat([cond, toks], dim=1)
        h1 = torch.relu(g * (x @ s["trunk_w1"] + s["trunk_b1"]))
        h2 = torch.relu(g * (h1 @ s["trunk_w2"] + s["trunk_b2"]))
        if capture is not None:
            capture["policy_hidden_1"] = h1.detach().numpy().copy()
            capture["policy_hidden_2"] = h2.detach().numpy().copy()
        return h2

    def _mask_rows(self, prefixes: Sequence[Prefix]) -> torch.Tensor | None:
        a = self.vocab.alphabet_size
        need_step0 = self.config.mask_eos_at_start and any(len(p) == 0 for p in prefixes)
        if self.vocab.eos_enabled and not need_step0:
            return None
        mask = torch.zeros((len(prefixes), a), dtype=self.store.dtype)
        if not self.vocab.eos_enabled:
            mask[:, self.vocab.eos_id] = -math.inf
        elif need_step0:
            for i, p in enumerate(prefixes):
                if len(p) == 0:
                    mask[i, self.vocab.eos_id] = -math.inf
        return mask

    def head_logits(self, h2: torch.Tensor) -> torch.Tensor:
        return self.config.logit_gain * (h2 @ self.store["head_w"] + self.store["head_b"])

    def logits(self, cond_ids: torch.Tensor, windows: torch.Tensor, prefixes: Sequence[Prefix]) -> torch.Tensor:
        out = self.head_logits(self.trunk_features(cond_ids, windows))
        mask = self._mask_rows(prefixes)
        return out if mask is None else out + mask

    # -- public evaluation surface -----------------------------------------

    def step_log_probs(self, x: Condition, prefix: TokenSequence) -> torch.Tensor:
        """Log next-token distribution at a non-terminal prefix (differentiable)."""
        if prefix.terminal:
            raise ContractViolation("policy evaluated at a terminal prefix")
        cond = torch.tensor([x.id], dtype=torch.int64)
        win = torch.from_numpy(self.windows_for([prefix.tokens]))
        logits = self.logits(cond, win, [prefix.tokens])
        return torch.log_softmax(logits, dim=1)[0]

    def logits_batch(self, cond_ids: np.ndarray, prefixes: Sequence[Prefix]) -> np.ndarray:
        """Masked raw logits for many prefixes, as float64 numpy (no grad)."""
        with torch.no_grad():
            logits = self.logits(
                torch.from_numpy(np.asarray(cond_ids, dtype=np.int64)),
                torch.from_numpy(self.windows_for(prefixes)),
                prefixes,
            )
        return logits.double().numpy()

    def step_log_probs_batch(self, cond_ids: np.ndarray, prefixes: Sequence[Prefix]) -> np.ndarray:
        """Log-softmax rows for many prefixes, as float64 numpy (no grad)."""
        return _log_softmax_np(self.logits_batch(cond_ids, prefixes))


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class FlowHead:
    """Scalar log-flow readout over the policy trunk's final hidden features.

    One rectifier hidden layer plus a linear output. The output layer is the
    resettable unit: :func:`reset_flow_last_layer` re-draws it from the
    initialization distribution and zeroes its optimizer state, touching
    nothing else.
    """

    LAST_LAYER = ("out_w", "out_b")

    def __init__(self, policy: PolicyNetwork, config: NetworkConfig, store: ParamStore, rng: np.random.Generator):
        self.policy = policy
        self.config = config
        self.store = store
        h, fh = config.hidden_dim, config.flow_hidden_dim
        store.add("hidden_w", _uniform(rng, _hidden_bound(h, config.flow_init_scale) / config.trunk_gain, (h, fh)))
        store.add("hidden_b", np.zeros(fh))
        store.add("out_w", self._draw_out_w(rng))
        store.add("out_b", np.zeros((1,)))

    def _draw_out_w(self, rng: np.random.Generator) -> np.ndarray:
        bound = _hidden_bound(self.config.flow_hidden_dim, self.config.flow_init_scale) / self.config.flow_gain
        return _uniform(rng, bound, (self.config.flow_hidden_dim, 1))

    def values_from_features(self, h2: torch.Tensor, capture: dict | None = None) -> torch.Tensor:
        s = self.store
        hf = torch.relu(self.config.trunk_gain * (h2 @ s["hidden_w"] + s["hidden_b"]))
        if capture is not None:
            capture["flow_hidden"] = hf.detach().numpy().copy()
        return self.config.flow_gain * (hf @ s["out_w"] + s["out_b"]).squeeze(1)

    def log_flow(self, policy: PolicyNetwork, x: Condition, prefix: TokenSequence) -> torch.Tensor:
        """log-flow of a non-terminal prefix; terminal prefixes are 0 by definition."""
        if prefix.terminal:
            return torch.zeros((), dtype=self.store.dtype)
        cond = torch.tensor([x.id], dtype=torch.int64)
        win = torch.from_numpy(policy.windows_for([prefix.tokens]))
        h2 = policy.trunk_features(cond, win)
        return self.values_from_features(h2)[0]

    def reset_last_layer(self, rng: np.random.Generator) -> None:
        self.store.reset_array("out_w", self._draw_out_w(rng))
        self.store.reset_array("out_b", np.zeros((1,)))


def flow_log_value(flow, policy, x: Condition, prefix: TokenSequence) -> torch.Tensor:
    """Scalar log-flow at ``prefix``; exactly 0 at terminal states."""
    return flow.log_flow(policy, x, prefix)


def reset_flow_last_layer(flow: FlowHead, rng: np.random.Generator) -> None:
    """Re-draw only the flow head's output layer; everything else untouched."""
    flow.reset_last_layer(rng)


def sequence_log_prob(policy, x: Condition, y: TokenSequence) -> torch.Tensor:
    """Sum of per-step log-probs along a terminal sequence's unique trajectory."""
    if not y.terminal:
        raise ContractViolation("sequence_log_prob called on a non-terminal sequence")
    total = None
    for t in range(len(y.tokens)):
        prefix = TokenSequence(y.tokens[:t], False)
        lp = policy.step_log_probs(x, prefix)[y.tokens[t]]
        total = lp if total is None else total + lp
    if total is None:
        raise ContractViolation("terminal sequence with no decisions")
    return total


@dataclass(eq=False)
class ActivationTrace:
    """Post-rectifier activations per hidden layer for a fixed probe batch."""

    layers: dict[str, np.ndarray]
    probe_size: int


def capture_activations(
    policy: PolicyNetwork, flow: FlowHead | None, cond_ids: np.ndarray, prefixes: Sequence[Prefix]
) -> ActivationTrace:
    """Record hidden activations for a probe batch without perturbing outputs."""
    if len(prefixes) == 0:
        raise ValueError("probe batch must be nonempty")
    capture: dict[str, np.ndarray] = {}
    with torch.no_grad():
        h2 = policy.trunk_features(
            torch.from_numpy(np.asarray(cond_ids, dtype=np.int64)),
            torch.from_numpy(policy.windows_for(prefixes)),
            capture=capture,
        )
        if flow is not None:
            flow.values_from_features(h2, capture=capture)
    return ActivationTrace(layers=capture, probe_size=len(prefixes))


# -- checkpoints ----------------------------------------------------------

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "arrays.bin"
_KINDS = ("param", "adam_m", "adam_v")


def save_checkpoint(path: str | Path, stores: dict[str, ParamStore], extra: dict | None = None) -> None:
    """Write a manifest plus concatenated little-endian float32 blobs.

    Only float32 stores are accepted: the on-disk format is 32-bit and the
    round-trip is required to be bit-exact.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    blobs = []
    offset = 0
    for store_name, store in stores.items():
        if store.dtype_name != "float32":
            raise ValueError(f"checkpoint format is float32; store {store_name!r} is {store.dtype_name}")
        for name in store.names():
            arrays = {
                "param": store[name].detach().numpy(),
                "adam_m": store.moments(name)[0].numpy(),
                "adam_v": store.moments(name)[1].numpy(),
            }
            for kind in _KINDS:
                raw = np.ascontiguousarray(arrays[kind], dtype="<f4").tobytes()
                records.append(
                    {
                        "store": store_name,
                        "name": name,
                        "kind": kind,
                        "shape": list(arrays[kind].shape),
                        "dtype": "float32",
                        "offset": offset,
                        "nbytes": len(raw),
                        "adam_step": store.step_count(name),
                    }
                )
                blobs.append(raw)
                offset += len(raw)
    manifest = {"format": "seqflow-checkpoint-v1", "arrays": records, "extra": extra or {}}
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / BLOB_NAME).write_bytes(b"".join(blobs))


def load_checkpoint(path: str | Path) -> tuple[dict[str, ParamStore], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    blob = (path / BLOB_NAME).read_bytes()
    stores: dict[str, ParamStore] = {}
    state: dict[tuple[str, str], dict] = {}
    for rec in manifest["arrays"]:
        arr = np.frombuffer(
            blob, dtype="<f4", count=int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1, offset=rec["offset"]
        ).reshape(rec["shape"])
        entry = state.setdefault((rec["store"], rec["name"]), {"step": rec["adam_step"]})
        entry[rec["kind"]] = arr
    for (store_name, name), entry in state.items():
        store = stores.setdefault(store_name, ParamStore("float32"))
        store.add(name, entry["param"])
        store.load_state(name, entry["param"], entry["adam_m"], entry["adam_v"], entry["step"])
    return stores, manifest["extra"]


def checkpoint_array_bytes(path: str | Path) -> dict[tuple[str, str, str], bytes]:
    """Per-(store, name, kind) raw bytes of a checkpoint, for byte-level diffs."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    blob = (path / BLOB_NAME).read_bytes()
    out = {}
    for rec in manifest["arrays"]:
        key = (rec["store"], rec["name"], rec["kind"])
        out[key] = blob[rec["offset"] : rec["offset"] + rec["nbytes"]]
        out[(rec["store"], rec["name"], "adam_step")] = str(rec["adam_step"]).encode()
    return out
