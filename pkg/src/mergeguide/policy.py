"""Tiny autoregressive thought-and-action policy with a value head.

The network is a fixed-window MLP: the observation features are projected to
one embedding slot and concatenated with the embeddings of the last ``W``
context tokens (formula tokens followed by the response so far, left-padded
with PAD), then passed through two tanh layers into a vocabulary head and a
scalar value head.

Parameters are stored as float32 arrays; every computation upcasts to
float64. Matrix products over rows are evaluated in fixed-size row chunks so
that a row's output does not depend on which other rows share the batch:
teacher-forced log-probs therefore match sampling-time log-probs bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointError

ACTION_TOKENS = ("1", "2", "3", "4", "5", "6", "7", "8", "9", "10",
                 "+", "-", "*", "/", "(", ")", "=")
STRUCTURAL_TOKENS = ("<bot>", "<eot>", "<boa>", "<eoa>", "<pad>")
TOKENS = ACTION_TOKENS + STRUCTURAL_TOKENS
VOCAB_SIZE = len(TOKENS)
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
BOT, EOT, BOA, EOA, PAD = (TOKEN_ID[t] for t in STRUCTURAL_TOKENS)
NUM_ACTIONS = len(ACTION_TOKENS)

ARCH_KEY = "__arch__.dims"
ROW_CHUNK = 32

# response token groups
THOUGHT_GROUP = 0
ACTION_GROUP = 1


def encode(tokens: Sequence[str]) -> list[int]:
    try:
        return [TOKEN_ID[t] for t in tokens]
    except KeyError as exc:
        raise ValueError(f"unknown token {exc.args[0]!r}") from None


def decode(ids: Sequence[int]) -> list[str]:
    return [TOKENS[i] for i in ids]


@dataclass(frozen=True)
class PolicySpec:
    embed_dim: int = 32
    hidden_dim: int = 64
    context_window: int = 16
    max_thought_len: int = 32
    obs_dim: int = 44

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "context_window", "max_thought_len", "obs_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, w = self.embed_dim, self.hidden_dim, self.context_window
        return {
            "embed.obs": (self.obs_dim, d),
            "embed.tok": (VOCAB_SIZE, d),
            "head.bias": (VOCAB_SIZE,),
            "head.weight": (h, VOCAB_SIZE),
            "hidden1.bias": (h,),
            "hidden1.weight": ((w + 1) * d, h),
            "hidden2.bias": (h,),
            "hidden2.weight": (h, h),
            "value.bias": (1,),
            "value.weight": (h, 1),
        }


Params = Mapping[str, np.ndarray]


def init_params(spec: PolicySpec, rng: np.random.Generator, scale: float = 1.0) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in spec.shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name.startswith("embed."):
            params[name] = (scale * 0.5 * rng.standard_normal(shape)).astype(np.float32)
        else:
            std = scale / math.sqrt(shape[0])
            params[name] = (std * rng.standard_normal(shape)).astype(np.float32)
    return params


def zero_params(spec: PolicySpec) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=np.float32) for name, shape in spec.shapes().items()}


def to_checkpoint(params: Params, spec: PolicySpec, step_id: int = 0, tag: str = "") -> Checkpoint:
    tensors = {name: params[name] for name in spec.shapes()}
    tensors[ARCH_KEY] = np.array(
        [spec.embed_dim, spec.hidden_dim, spec.context_window, spec.max_thought_len,
         spec.obs_dim, VOCAB_SIZE],
        dtype=np.float32,
    )
    return Checkpoint(tensors, step_id=step_id, tag=tag)


def from_checkpoint(ckpt: Checkpoint) -> tuple[dict[str, np.ndarray], PolicySpec]:
    if ARCH_KEY not in ckpt.params:
        raise CheckpointError("checkpoint carries no policy architecture metadata")
    dims = [int(x) for x in ckpt.params[ARCH_KEY]]
    if len(dims) != 6 or dims[5] != VOCAB_SIZE:
        raise CheckpointError(f"incompatible policy architecture {dims}")
    spec = PolicySpec(*dims[:5])
    shapes = spec.shapes()
    if set(ckpt.params) - {ARCH_KEY} != set(shapes):
        raise CheckpointError("checkpoint parameters do not match the policy architecture")
    params = {}
    for name, shape in shapes.items():
        if ckpt.params[name].shape != shape:
            raise CheckpointError(f"{name}: shape {ckpt.params[name].shape}, expected {shape}")
        params[name] = np.array(ckpt.params[name], dtype=np.float32)
    return params, spec


# --- forward / backward -------------------------------------------------------


def _rows_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    pad = (-n) % ROW_CHUNK
    if pad:
        x = np.concatenate([x, np.zeros((pad, x.shape[1]))])
    out = np.empty((x.shape[0], w.shape[1]))
    for s in range(0, x.shape[0], ROW_CHUNK):
        out[s : s + ROW_CHUNK] = x[s : s + ROW_CHUNK] @ w
    return out[:n]


@dataclass
class ForwardCache:
    obs: np.ndarray
    windows: np.ndarray
    z: np.ndarray
    h1: np.ndarray
    h2: np.ndarray


def _p64(params: Params, name: str) -> np.ndarray:
    return np.asarray(params[name], dtype=np.float64)


def forward(params: Params, obs: np.ndarray, windows: np.ndarray):
    """Evaluate rows of ``(obs features, token window)``.

    Returns ``(logits (N, V), values (N,), cache)``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    windows = np.asarray(windows, dtype=np.int64)
    if obs.ndim == 1:
        obs = obs[None]
    if windows.ndim == 1:
        windows = windows[None]
    tok = _p64(params, "embed.tok")
    proj = _p64(params, "embed.obs")
    n, w = windows.shape
    d = tok.shape[1]
    if obs.shape != (n, proj.shape[0]):
        raise ValueError(f"observation rows {obs.shape} do not match {n} windows of dim {proj.shape[0]}")
    if (w + 1) * d != params["hidden1.weight"].shape[0]:
        raise ValueError(f"window length {w} does not match the architecture")
    z = np.concatenate([_rows_matmul(obs, proj), tok[windows].reshape(n, w * d)], axis=1)
    h1 = np.tanh(_rows_matmul(z, _p64(params, "hidden1.weight")) + _p64(params, "hidden1.bias"))
    h2 = np.tanh(_rows_matmul(h1, _p64(params, "hidden2.weight")) + _p64(params, "hidden2.bias"))
    logits = _rows_matmul(h2, _p64(params, "head.weight")) + _p64(params, "head.bias")
    values = (_rows_matmul(h2, _p64(params, "value.weight")) + _p64(params, "value.bias"))[:, 0]
    return logits, values, ForwardCache(obs, windows, z, h1, h2)


def backward(params: Params, cache: ForwardCache, dlogits: np.ndarray, dvalues: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its derivatives w.r.t. logits and values."""
    n, w = cache.windows.shape
    d = params["embed.tok"].shape[1]
    dlogits = np.asarray(dlogits, dtype=np.float64)
    dv = np.zeros((n, 1)) if dvalues is None else np.asarray(dvalues, dtype=np.float64).reshape(n, 1)
    grads = {
        "head.weight": cache.h2.T @ dlogits,
        "head.bias": dlogits.sum(axis=0),
        "value.weight": cache.h2.T @ dv,
        "value.bias": dv.sum(axis=0),
    }
    dh2 = dlogits @ _p64(params, "head.weight").T + dv @ _p64(params, "value.weight").T
    da2 = dh2 * (1.0 - cache.h2**2)
    grads["hidden2.weight"] = cache.h1.T @ da2
    grads["hidden2.bias"] = da2.sum(axis=0)
    da1 = (da2 @ _p64(params, "hidden2.weight").T) * (1.0 - cache.h1**2)
    grads["hidden1.weight"] = cache.z.T @ da1
    grads["hidden1.bias"] = da1.sum(axis=0)
    dz = da1 @ _p64(params, "hidden1.weight").T
    grads["embed.obs"] = cache.obs.T @ dz[:, :d]
    dtok = np.zeros((VOCAB_SIZE, d))
    np.add.at(dtok, cache.windows.ravel(), dz[:, d:].reshape(n * w, d))
    grads["embed.tok"] = dtok
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# --- sequences ----------------------------------------------------------------


def context_windows(prefix: Sequence[int], tokens: Sequence[int], width: int) -> np.ndarray:
    """Window used to predict each of ``tokens`` after ``prefix``."""
    ctx = [PAD] * width + list(prefix) + list(tokens)
    base = width + len(prefix)
    return np.array([ctx[base + j - width : base + j] for j in range(len(tokens))], dtype=np.int64).reshape(len(tokens), width)


def window_of(context: Sequence[int], width: int) -> list[int]:
    tail = list(context[-width:]) if width else []
    return [PAD] * (width - len(tail)) + tail


@dataclass
class Response:
    tokens: list[int]
    logprobs: np.ndarray
    groups: np.ndarray
    well_formed: bool
    thought: list[int]
    action: int | None
    value: float
    windows: np.ndarray = field(repr=False)
    # log-probs under the distribution actually sampled from (temperature
    # and repetition penalty applied); equals ``logprobs`` at (1, 1)
    sample_logprobs: np.ndarray | None = field(default=None, repr=False)

    @property
    def thought_text(self) -> list[str]:
        return decode(self.thought)

    @property
    def action_text(self) -> str | None:
        return None if self.action is None else TOKENS[self.action]


def _penalize(logits: np.ndarray, present: np.ndarray, penalty: float) -> np.ndarray:
    if penalty == 1.0:
        return logits
    scaled = np.where(logits > 0, logits / penalty, logits * penalty)
    return np.where(present, scaled, logits)


def sampling_distribution(logits: np.ndarray, present: np.ndarray, temperature: float, penalty: float) -> np.ndarray:
    return softmax(_penalize(logits, present, penalty) / temperature)


def sampling_logits(logits: np.ndarray, present: np.ndarray, temperature: float, penalty: float):
    """Logits the sampler draws from and their derivative w.r.t. ``logits``
    (elementwise, since the penalty acts per entry)."""
    if penalty == 1.0:
        slope = np.ones_like(logits)
    else:
        slope = np.where(present, np.where(logits > 0, 1.0 / penalty, penalty), 1.0)
    return _penalize(logits, present, penalty) / temperature, slope / temperature


def sample_responses(
    params: Params,
    obs: np.ndarray,
    prefixes: Sequence[Sequence[int]],
    temperature: float,
    repetition_penalty: float,
    rng: np.random.Generator,
    max_thought_len: int,
) -> list[Response]:
    """Sample one response per row, all rows advancing in lockstep.

    Recorded log-probs are those of the unmodified policy (temperature 1, no
    penalty), i.e. what :func:`logprobs` returns for the same tokens.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if repetition_penalty < 1:
        raise ValueError("repetition penalty must be >= 1")
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    n = len(prefixes)
    width = params["hidden1.weight"].shape[0] // params["embed.tok"].shape[1] - 1
    contexts = [list(p) for p in prefixes]
    toks: list[list[int]] = [[] for _ in range(n)]
    lps: list[list[float]] = [[] for _ in range(n)]
    slps: list[list[float]] = [[] for _ in range(n)]
    grps: list[list[int]] = [[] for _ in range(n)]
    wins: list[list[list[int]]] = [[] for _ in range(n)]
    thoughts: list[list[int]] = [[] for _ in range(n)]
    actions: list[int | None] = [None] * n
    values = np.zeros(n)
    well = [False] * n
    phase = [0] * n  # 0 BOT, 1 thought, 2 BOA, 3 action, 4 EOA
    present = np.zeros((n, VOCAB_SIZE), dtype=bool)
    active = list(range(n))
    while active:
        win = np.array([window_of(contexts[i], width) for i in active], dtype=np.int64)
        logits, vals, _ = forward(params, obs[active], win)
        raw = log_softmax(logits)
        slog = log_softmax(_penalize(logits, present[active], repetition_penalty) / temperature)
        probs = np.exp(slog)
        u = rng.random(len(active))
        picks = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), VOCAB_SIZE - 1)
        still = []
        for row, i in enumerate(active):
            t = int(picks[row])
            if not toks[i]:
                values[i] = vals[row]
            grps[i].append(THOUGHT_GROUP if phase[i] <= 1 else ACTION_GROUP)
            toks[i].append(t)
            lps[i].append(raw[row, t])
            slps[i].append(slog[row, t])
            wins[i].append(list(win[row]))
            contexts[i].append(t)
            present[i, t] = True
            ph, ok = phase[i], True
            if ph == 0:
                ok = t == BOT
                phase[i] = 1
            elif ph == 1:
                if t == EOT:
                    phase[i] = 2
                elif t < NUM_ACTIONS and len(thoughts[i]) < max_thought_len:
                    thoughts[i].append(t)
                else:
                    ok = False
            elif ph == 2:
                ok = t == BOA
                phase[i] = 3
            elif ph == 3:
                ok = t < NUM_ACTIONS
                actions[i] = t
                phase[i] = 4
            else:
                ok = t == EOA
                well[i] = ok
                ok = False  # finished either way
            if ok:
                still.append(i)
        active = still
    out = []
    for i in range(n):
        out.append(Response(
            tokens=toks[i],
            logprobs=np.array(lps[i]),
            groups=np.array(grps[i], dtype=np.int64),
            well_formed=well[i],
            thought=thoughts[i],
            action=actions[i] if well[i] else None,
            value=float(values[i]),
            windows=np.array(wins[i], dtype=np.int64).reshape(len(toks[i]), width),
            sample_logprobs=np.array(slps[i]),
        ))
    return out


def sample_response(params, obs, prefix, temperature, repetition_penalty, rng, max_thought_len=32) -> Response:
    return sample_responses(params, np.atleast_2d(obs), [prefix], temperature,
                            repetition_penalty, rng, max_thought_len)[0]


def token_groups(tokens: Sequence[int]) -> np.ndarray:
    """Thought/action group of each response token, by position in the structure."""
    groups, seen_eot = [], False
    for t in tokens:
        groups.append(ACTION_GROUP if seen_eot else THOUGHT_GROUP)
        if t == EOT:
            seen_eot = True
    return np.array(groups, dtype=np.int64)


def logprobs(params: Params, obs: np.ndarray, prefix: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    """Teacher-forced log-probs of ``tokens`` following ``prefix``."""
    if len(tokens) == 0:
        raise ValueError("token list must be non-empty")
    if any(not 0 <= t < VOCAB_SIZE for t in tokens):
        raise ValueError("unknown token id")
    width = params["hidden1.weight"].shape[0] // params["embed.tok"].shape[1] - 1
    win = context_windows(prefix, tokens, width)
    rows = np.repeat(np.atleast_2d(obs), len(tokens), axis=0)
    logits, _, _ = forward(params, rows, win)
    return log_softmax(logits)[np.arange(len(tokens)), np.asarray(tokens)]


def state_values(params: Params, obs: np.ndarray, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    width = params["hidden1.weight"].shape[0] // params["embed.tok"].shape[1] - 1
    win = np.array([window_of(p, width) for p in prefixes], dtype=np.int64).reshape(len(prefixes), width)
    _, values, _ = forward(params, np.atleast_2d(obs), win)
    return values


# --- optimizer ----------------------------------------------------------------


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CosineSchedule:
    initial: float = 1e-5
    final: float = 1e-9
    max_step: int = 25

    def lr(self, step: int) -> float:
        if step >= self.max_step:
            return self.final
        step = max(step, 0)
        return self.final + 0.5 * (self.initial - self.final) * (1.0 + math.cos(math.pi * step / self.max_step))


def optimizer_step(params: Params, grads: Mapping[str, np.ndarray], step: int,
                   schedule: CosineSchedule = CosineSchedule()) -> dict[str, np.ndarray]:
    """Plain SGD update ``p - lr(step) * g`` rounded back to float32."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"non-finite gradient in {name} ({bad} entries)")
    lr = schedule.lr(step)
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = np.array(p, dtype=np.float32)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                out[name] = (np.asarray(p, dtype=np.float64) - lr * np.asarray(g, dtype=np.float64)).astype(np.float32)
            if not np.all(np.isfinite(out[name])):
                raise NonFiniteError(f"update overflowed {name}")
    return out


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``
    (``max_norm <= 0`` disables clipping). Returns the grads and the raw norm."""
    norm = math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: np.asarray(g, dtype=np.float64) * scale for k, g in grads.items()}, norm


class GradAccumulator:
    """Averages gradients over a fixed number of micro-batches."""

    def __init__(self, steps: int):
        if steps < 1:
            raise ValueError("accumulation steps must be >= 1")
        self.steps = steps
        self._sum: dict[str, np.ndarray] = {}
        self.count = 0

    def add(self, grads: Mapping[str, np.ndarray]) -> bool:
        for k, g in grads.items():
            if k in self._sum:
                self._sum[k] = self._sum[k] + g
            else:
                self._sum[k] = np.array(g, dtype=np.float64)
        self.count += 1
        return self.count >= self.steps

    def pop(self) -> dict[str, np.ndarray]:
        out = {k: v / self.count for k, v in self._sum.items()}
        self._sum, self.count = {}, 0
        return out

    def __bool__(self) -> bool:
        return self.count > 0
