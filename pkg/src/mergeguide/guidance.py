"""Thought guidance from the merged teacher.

Two channels: online imitation of teacher thoughts (an SFT loss over an
append-only thought dataset) and a reverse-KL auxiliary reward computed from
teacher-forced log-probs of the agent's own thought tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import (
    BOA,
    BOT,
    EOT,
    Params,
    THOUGHT_GROUP,
    VOCAB_SIZE,
    Response,
    backward,
    context_windows,
    forward,
    log_softmax,
    sample_responses,
    sampling_logits,
)

VARIANTS = ("sft", "kl")
SCOPES = ("thought", "full")
ESTIMATORS = ("k1", "clip", "abs", "k3", "forward")
KL_TARGETS = ("reward", "advantage")


@dataclass(frozen=True)
class GuidanceConfig:
    variant: str = "kl"
    scope: str = "thought"
    estimator: str = "clip"
    beta: float = 1.0
    thought_prob: float = 0.5
    format_penalty: float = -0.1
    kl_target: str = "reward"

    def __post_init__(self):
        for name, allowed in (("variant", VARIANTS), ("scope", SCOPES),
                              ("estimator", ESTIMATORS), ("kl_target", KL_TARGETS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.thought_prob <= 1.0:
            raise ValueError("thought_prob must lie in [0, 1]")


@dataclass(frozen=True)
class TeacherGeneration:
    temperature: float = 0.2
    max_temperature: float = 0.9
    retry_coef: float = 1.1
    repetition_penalty: float = 1.2
    max_thought_len: int = 32

    def temperatures(self) -> list[float]:
        """Retry schedule: multiply by ``retry_coef`` until capped at the maximum."""
        temps, t = [], self.temperature
        while True:
            temps.append(t)
            if t >= self.max_temperature:
                return temps
            t = min(t * self.retry_coef, self.max_temperature)


@dataclass(frozen=True)
class ThoughtExample:
    obs: np.ndarray
    prefix: tuple[int, ...]
    thought: tuple[int, ...]
    action: int | None = None


@dataclass
class ThoughtDataset:
    """Append-only store of teacher thoughts, sampled uniformly over its history."""

    examples: list[ThoughtExample] = field(default_factory=list)

    def append(self, example: ThoughtExample) -> None:
        self.examples.append(example)

    def __len__(self) -> int:
        return len(self.examples)

    def sample(self, rng: np.random.Generator, n: int) -> list[ThoughtExample]:
        if not self.examples:
            return []
        idx = rng.integers(0, len(self.examples), size=n)
        return [self.examples[i] for i in idx]


def teacher_references(teacher: Params, obs: np.ndarray, prefixes: Sequence[Sequence[int]],
                       gen: TeacherGeneration, rng: np.random.Generator) -> list[Response | None]:
    """Well-formed teacher responses, retrying malformed rows at higher temperature.

    Rows still malformed at the maximum temperature come back as ``None``.
    """
    obs = np.atleast_2d(obs)
    out: list[Response | None] = [None] * len(prefixes)
    pending = list(range(len(prefixes)))
    for temp in gen.temperatures():
        if not pending:
            break
        resp = sample_responses(teacher, obs[pending], [prefixes[i] for i in pending], temp,
                                gen.repetition_penalty, rng, gen.max_thought_len)
        again = []
        for i, r in zip(pending, resp):
            if r.well_formed:
                out[i] = r
            else:
                again.append(i)
        pending = again
    return out


def teacher_reference(teacher: Params, obs: np.ndarray, prefix: Sequence[int],
                      config: GuidanceConfig, gen: TeacherGeneration,
                      rng: np.random.Generator) -> list[int] | None:
    """Teacher thought for one step, or ``None`` when the coin flip skips the
    step or every retry came back malformed."""
    if config.thought_prob <= 0 or rng.random() >= config.thought_prob:
        return None
    ref = teacher_references(teacher, obs, [prefix], gen, rng)[0]
    return None if ref is None else list(ref.thought)


def _sft_targets(example: ThoughtExample, scope: str) -> tuple[list[int], list[int]]:
    """Full token sequence to teacher-force and the positions that are scored."""
    seq = [BOT, *example.thought]
    scored = list(range(1, len(seq)))
    if scope == "full" and example.action is not None:
        seq += [EOT, BOA, example.action]
        scored.append(len(seq) - 1)
    return seq, scored


def teacher_forced_nll(params: Params, items: Sequence[tuple], normalizer: int):
    """Summed NLL over scored positions divided by ``normalizer``.

    Each item is ``(obs, prefix, tokens, scored)``: the full token sequence
    is teacher-forced after ``prefix`` and only indices in ``scored`` count.
    Returns ``(loss, grads)``.
    """
    width = params["hidden1.weight"].shape[0] // params["embed.tok"].shape[1] - 1
    obs_rows, wins, targets = [], [], []
    for obs, prefix, seq, scored in items:
        if not scored:
            continue
        wins.append(context_windows(prefix, seq, width)[list(scored)])
        targets.extend(seq[j] for j in scored)
        obs_rows.append(np.repeat(np.atleast_2d(obs), len(scored), axis=0))
    if not targets:
        return 0.0, {k: np.zeros(v.shape) for k, v in params.items()}
    logits, _, cache = forward(params, np.concatenate(obs_rows), np.concatenate(wins))
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    tg = np.asarray(targets)
    loss = -logp[rows, tg].sum() / normalizer
    dlogits = np.exp(logp)
    dlogits[rows, tg] -= 1.0
    dlogits /= normalizer
    return float(loss), backward(params, cache, dlogits)


def sft_loss(params: Params, examples: Sequence[ThoughtExample], scope: str = "thought"):
    """Mean over examples of the summed NLL of the teacher tokens.

    Returns ``(loss, grads)``.
    """
    if not examples:
        raise ValueError("empty SFT batch")
    items = [(ex.obs, ex.prefix) + _sft_targets(ex, scope) for ex in examples]
    return teacher_forced_nll(params, items, len(examples))


# --- reverse KL ---------------------------------------------------------------


def guided_positions(response: Response, scope: str = "thought") -> list[int]:
    """Indices into ``response.tokens`` scored by the reverse KL.

    Every token generated in the thought phase: BOT, the thought span and the
    EOT closing it, or whatever token broke the structure. A response can
    therefore never escape the penalty by being malformed. ``full`` adds the
    action token.
    """
    pos = [j for j, g in enumerate(response.groups) if g == THOUGHT_GROUP]
    if scope == "full" and response.action is not None:
        pos.append(len(response.tokens) - 2)
    return pos


def revkl_batch(agent: Params, teacher: Params, obs_rows: Sequence[np.ndarray],
                responses: Sequence[Response], scope: str = "thought",
                temperature: float = 1.0, repetition_penalty: float = 1.0) -> list[np.ndarray]:
    """Per-token K1 values for each response using one teacher forward pass.

    Agent log-probs are the ones recorded at sampling time, which equal the
    teacher-forced values under ``agent`` exactly. With a temperature or
    penalty other than 1 both sides are compared under that generation
    distribution, the agent via its recorded sampling log-probs.
    """
    del agent  # recorded log-probs already belong to the agent
    generation = temperature != 1.0 or repetition_penalty != 1.0
    pieces, owners, agent_lp = [], [], []
    for k, (o, r) in enumerate(zip(obs_rows, responses)):
        pos = guided_positions(r, scope)
        if not pos:
            continue
        present = _present_mask(r.tokens)[pos] if generation else None
        pieces.append((np.repeat(np.atleast_2d(o), len(pos), axis=0), r.windows[pos],
                       np.asarray(r.tokens)[pos], present))
        owners.extend([k] * len(pos))
        agent_lp.append((r.sample_logprobs if generation else r.logprobs)[pos])
    out = [np.zeros(0) for _ in responses]
    if not pieces:
        return out
    obs = np.concatenate([p[0] for p in pieces])
    wins = np.concatenate([p[1] for p in pieces])
    toks = np.concatenate([p[2] for p in pieces])
    logits, _, _ = forward(teacher, obs, wins)
    if generation:
        logits, _ = sampling_logits(logits, np.concatenate([p[3] for p in pieces]),
                                    temperature, repetition_penalty)
    t_lp = log_softmax(logits)[np.arange(len(toks)), toks]
    k1 = np.concatenate(agent_lp) - t_lp
    owners_a = np.asarray(owners)
    for k in set(owners):
        out[k] = k1[owners_a == k]
    return out


def _present_mask(tokens: Sequence[int]) -> np.ndarray:
    """Row ``j``: tokens emitted before position ``j`` of the response."""
    mask = np.zeros((len(tokens), VOCAB_SIZE), dtype=bool)
    for j in range(1, len(tokens)):
        mask[j] = mask[j - 1]
        mask[j, tokens[j - 1]] = True
    return mask


def revkl(agent: Params, teacher: Params, obs: np.ndarray, prefix: Sequence[int],
          tokens: Sequence[int], positions: Sequence[int]):
    """Teacher-forced K1 at ``positions`` of ``tokens``.

    Returns ``(per_token, sentence_mean, ok)``; an empty selection gives a
    zero mean with ``ok`` False.
    """
    if not positions:
        return np.zeros(0), 0.0, False
    width = agent["hidden1.weight"].shape[0] // agent["embed.tok"].shape[1] - 1
    win = context_windows(prefix, tokens, width)[list(positions)]
    rows = np.repeat(np.atleast_2d(obs), len(positions), axis=0)
    tg = np.asarray(tokens)[list(positions)]
    idx = np.arange(len(tg))
    a_lp = log_softmax(forward(agent, rows, win)[0])[idx, tg]
    t_lp = log_softmax(forward(teacher, rows, win)[0])[idx, tg]
    k1 = a_lp - t_lp
    return k1, float(k1.mean()), True


def estimate(k1_tokens: Sequence[float], estimator: str) -> float:
    """Sentence-level KL estimate from per-token K1 values.

    ``clip``, ``abs`` and ``forward`` transform the sentence mean; ``k3`` is
    applied per token and then averaged.
    """
    k1 = np.asarray(k1_tokens, dtype=np.float64)
    if k1.size == 0:
        return 0.0
    mean = float(k1.mean())
    if estimator == "k1":
        return mean
    if estimator == "clip":
        return max(mean, 0.0)
    if estimator == "abs":
        return abs(mean)
    if estimator == "k3":
        return float(np.mean(k1 + np.expm1(-k1)))
    if estimator == "forward":
        return max(-mean, 0.0)
    raise ValueError(f"unknown estimator {estimator!r}")


def k3_token(k1: float) -> float:
    return k1 + math.expm1(-k1)


def shape_reward(env_reward: float, kl_estimate: float, beta: float) -> float:
    return env_reward - beta * kl_estimate


def format_reward(response: Response, penalty: float = -0.1) -> float:
    return 0.0 if response.well_formed else penalty
