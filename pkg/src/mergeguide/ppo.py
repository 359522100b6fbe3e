"""Rollout storage, GAE and the clipped PPO objective.

The surrogate is evaluated per token group: for every group listed in
``policy_groups`` a sample contributes ``-min(r * A, clip(r, 1-c, 1+c) * A)``
where ``r`` is the exponentiated sum of new-minus-old log-probs over that
group's tokens. The default is the action group alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .guidance import _present_mask
from .policy import (
    ACTION_GROUP,
    CosineSchedule,
    GradAccumulator,
    NonFiniteError,
    Params,
    clip_grad_norm,
    Response,
    backward,
    forward,
    log_softmax,
    optimizer_step,
    sampling_logits,
)


@dataclass
class Transition:
    obs: np.ndarray
    prefix: list[int]
    response: Response
    env_reward: float
    reward: float
    done: bool
    env_id: int = 0
    revkl: float | None = None
    success: bool = False
    legal: bool = True

    @property
    def value(self) -> float:
        return self.response.value


@dataclass
class RolloutBuffer:
    capacity: int
    transitions: list[Transition] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    def full(self) -> bool:
        return len(self.transitions) >= self.capacity

    def add(self, tr: Transition) -> None:
        if self.full():
            raise OverflowError("rollout buffer is full")
        if self.advantages is not None:
            raise RuntimeError("buffer already finalized")
        self.transitions.append(tr)

    def finalize(self, gamma: float, lam: float, bootstrap: dict[int, float] | None = None,
                 normalize: bool = True, offsets: Sequence[float] | None = None) -> None:
        """GAE per environment stream; ``bootstrap`` maps env id to the value of
        the state following that stream's last, non-terminal transition.

        ``offsets`` are added to the raw advantages (not the returns) before
        normalization, for penalties applied on the advantage side.
        """
        bootstrap = bootstrap or {}
        n = len(self.transitions)
        adv = np.zeros(n)
        ret = np.zeros(n)
        streams: dict[int, list[int]] = {}
        for i, tr in enumerate(self.transitions):
            streams.setdefault(tr.env_id, []).append(i)
        for env_id, idx in streams.items():
            last = self.transitions[idx[-1]]
            a, r = gae(
                [self.transitions[i].reward for i in idx],
                [self.transitions[i].value for i in idx],
                [self.transitions[i].done for i in idx],
                gamma, lam,
                last_value=0.0 if last.done else bootstrap.get(env_id, 0.0),
            )
            adv[idx] = a
            ret[idx] = r
        if offsets is not None:
            adv = adv + np.asarray(offsets, dtype=np.float64)
        if normalize and n >= 2:
            std = adv.std()
            adv = (adv - adv.mean()) / (std if std > 0 else 1.0)
        self.advantages, self.returns = adv, ret


def gae(rewards: Sequence[float], values: Sequence[float], dones: Sequence[bool],
        gamma: float, lam: float, last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets for one stream."""
    if not len(rewards) == len(values) == len(dones):
        raise ValueError("rewards, values and dones must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    next_value, next_adv = last_value, 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + np.asarray(values, dtype=np.float64)


# --- loss ---------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray          # (R, F) one row per response token
    windows: np.ndarray      # (R, W)
    targets: np.ndarray      # (R,)
    sample: np.ndarray       # (R,) owning sample index
    groups: np.ndarray       # (R,)
    old_logp: np.ndarray     # (R,)
    first_row: np.ndarray    # (M,) row carrying each sample's value estimate
    advantages: np.ndarray   # (M,)
    returns: np.ndarray      # (M,)
    present: np.ndarray | None = None  # (R, V) tokens already in the response

    @property
    def size(self) -> int:
        return len(self.first_row)


def make_batch(transitions: Sequence[Transition], advantages: Sequence[float],
               returns: Sequence[float], old_logp: Sequence[np.ndarray] | None = None,
               sampling: bool = False) -> Batch:
    """Stack transitions row-per-token. With ``sampling`` the frozen old
    log-probs are those of the sampling distribution rather than the raw
    policy, and the repetition-penalty mask is attached."""
    if not transitions:
        raise ValueError("empty minibatch")
    lengths = [len(t.response.tokens) for t in transitions]
    first = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    obs = np.concatenate([np.repeat(t.obs[None], n, axis=0) for t, n in zip(transitions, lengths)])
    if old_logp is not None:
        old = old_logp
    elif sampling:
        old = [t.response.sample_logprobs for t in transitions]
    else:
        old = [t.response.logprobs for t in transitions]
    return Batch(
        obs=obs,
        windows=np.concatenate([t.response.windows for t in transitions]),
        targets=np.concatenate([t.response.tokens for t in transitions]).astype(np.int64),
        sample=np.repeat(np.arange(len(transitions)), lengths),
        groups=np.concatenate([t.response.groups for t in transitions]),
        old_logp=np.concatenate(old),
        first_row=first,
        advantages=np.asarray(advantages, dtype=np.float64),
        returns=np.asarray(returns, dtype=np.float64),
        present=np.concatenate([_present_mask(t.response.tokens) for t in transitions]) if sampling else None,
    )


@dataclass
class LossStats:
    loss: float
    policy: float
    value: float
    entropy: float
    clip_frac: float
    ratio_mean: float


def ppo_loss(params: Params, batch: Batch, clip: float = 0.1, entropy_coef: float = 0.01,
             value_coef: float = 0.5, policy_groups: Sequence[int] = (ACTION_GROUP,),
             policy_coef: float = 1.0, temperature: float = 1.0, repetition_penalty: float = 1.0):
    """Return ``(loss, grads, stats)`` for one minibatch.

    Policy and entropy terms are evaluated on the distribution the rollout
    sampled from: logits penalized (using ``batch.present``) and divided by
    ``temperature``. The defaults give the raw policy.
    """
    m = batch.size
    if m == 0:
        raise ValueError("empty minibatch")
    logits, values, cache = forward(params, batch.obs, batch.windows)
    if temperature != 1.0 or repetition_penalty != 1.0:
        present = batch.present if batch.present is not None else np.zeros(logits.shape, dtype=bool)
        logits, slope = sampling_logits(logits, present, temperature, repetition_penalty)
    else:
        slope = None
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(len(batch.targets))
    logp = logp_all[rows, batch.targets]
    dlogp = np.zeros(len(rows))

    policy_total = 0.0
    clipped = 0
    ratios = []
    adv = batch.advantages
    for g in policy_groups:
        in_g = batch.groups == g
        diff = np.bincount(batch.sample[in_g], weights=(logp - batch.old_logp)[in_g], minlength=m)
        has = np.bincount(batch.sample[in_g], minlength=m) > 0
        ratio = np.exp(diff)
        clipped_ratio = np.clip(ratio, 1.0 - clip, 1.0 + clip)
        unclipped_obj = ratio * adv
        clipped_obj = clipped_ratio * adv
        use_unclipped = unclipped_obj <= clipped_obj
        obj = np.where(use_unclipped, unclipped_obj, clipped_obj)
        policy_total += -obj[has].sum() / m
        # d(-obj)/d(diff) = -A * r on the unclipped branch, 0 on a binding clip
        dd = np.where(has & use_unclipped, -adv * ratio, 0.0) / m
        dlogp[in_g] += dd[batch.sample[in_g]]
        clipped += int((has & ~use_unclipped).sum())
        ratios.extend(ratio[has].tolist())

    dlogits = policy_coef * dlogp[:, None] * (-probs)
    dlogits[rows, batch.targets] += policy_coef * dlogp

    # entropy of the action-group positions, averaged within then across samples
    ent_rows = batch.groups == ACTION_GROUP
    ent = -(probs * logp_all).sum(axis=1)
    counts = np.bincount(batch.sample[ent_rows], minlength=m).astype(np.float64)
    per_sample = np.bincount(batch.sample[ent_rows], weights=ent[ent_rows], minlength=m)
    has_ent = counts > 0
    entropy = float((per_sample[has_ent] / counts[has_ent]).sum() / m)
    row_w = np.zeros(len(rows))
    row_w[ent_rows] = 1.0 / (counts[batch.sample[ent_rows]] * m)
    # dH/dz = -p (log p + H)
    dent = -probs * (logp_all + ent[:, None])
    dlogits -= entropy_coef * row_w[:, None] * dent

    v = values[batch.first_row]
    err = v - batch.returns
    value_loss = float(np.mean(err**2))
    dvalues = np.zeros(len(rows))
    dvalues[batch.first_row] = value_coef * 2.0 * err / m

    loss = policy_coef * policy_total + value_coef * value_loss - entropy_coef * entropy
    if slope is not None:
        dlogits = dlogits * slope
    grads = backward(params, cache, dlogits, dvalues)
    n_terms = max(len(ratios), 1)
    stats = LossStats(loss=float(loss), policy=float(policy_total), value=value_loss,
                      entropy=entropy, clip_frac=clipped / n_terms,
                      ratio_mean=float(np.mean(ratios)) if ratios else 1.0)
    return float(loss), grads, stats


# --- update -------------------------------------------------------------------


@dataclass
class UpdateConfig:
    epochs: int = 4
    minibatch_size: int = 32
    grad_accum: int = 8
    clip: float = 0.1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    policy_groups: tuple[int, ...] = (ACTION_GROUP,)
    max_grad_norm: float = 0.0
    # sampling distribution the policy terms are evaluated on
    temperature: float = 1.0
    repetition_penalty: float = 1.0


ExtraLoss = Callable[[Params, np.random.Generator], tuple[float, dict]]


def _dump(path: Path | None, payload: dict) -> None:
    if path is not None:
        path.write_text(json.dumps(payload, indent=2, default=float))


def update(params: Params, rollout: RolloutBuffer, config: UpdateConfig, step: int,
           schedule: CosineSchedule, rng: np.random.Generator,
           extra_loss: ExtraLoss | None = None, diagnostics_path: Path | None = None):
    """Run the PPO epochs over a finalized rollout.

    Returns the updated parameters and one :class:`LossStats` per minibatch
    (``extra`` losses such as SFT are reported separately as a list).
    """
    if rollout.advantages is None:
        raise RuntimeError("rollout must be finalized before the update")
    params = dict(params)
    n = len(rollout)
    acc = GradAccumulator(config.grad_accum)
    history: list[LossStats] = []
    extra_history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            sampling = config.temperature != 1.0 or config.repetition_penalty != 1.0
            batch = make_batch([rollout.transitions[i] for i in idx],
                               rollout.advantages[idx], rollout.returns[idx], sampling=sampling)
            loss, grads, stats = ppo_loss(params, batch, config.clip, config.entropy_coef,
                                          config.value_coef, config.policy_groups,
                                          temperature=config.temperature,
                                          repetition_penalty=config.repetition_penalty)
            if extra_loss is not None:
                extra, extra_grads = extra_loss(params, rng)
                extra_history.append(extra)
                loss += extra
                grads = {k: grads[k] + extra_grads[k] for k in grads}
            if not np.isfinite(loss):
                _dump(diagnostics_path, {"epoch": epoch, "minibatch": start, "loss": loss,
                                         "stats": stats.__dict__})
                raise NonFiniteError(f"non-finite loss at PPO epoch {epoch}, minibatch {start}")
            history.append(stats)
            if acc.add(grads):
                params = optimizer_step(params, clip_grad_norm(acc.pop(), config.max_grad_norm)[0],
                                        step, schedule)
    if acc:
        params = optimizer_step(params, clip_grad_norm(acc.pop(), config.max_grad_norm)[0], step, schedule)
    return params, history, extra_history
