"""Shared fixtures for the test modules: tiny networks, synthetic rollouts and
a central finite-difference checker."""

from __future__ import annotations

import numpy as np

from mergeguide.guidance import ThoughtExample
from mergeguide.policy import (
    PolicySpec,
    forward,
    init_params,
    log_softmax,
    sample_responses,
    sampling_logits,
)
from mergeguide.ppo import Transition, make_batch

TINY = PolicySpec(embed_dim=3, hidden_dim=5, context_window=3, max_thought_len=6)


def tiny_params(rng, scale=1.5, spec=TINY):
    """Random float64 parameters (finite differences need the extra precision)."""
    p = init_params(spec, rng, scale)
    return {k: v.astype(np.float64) + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}


def random_obs(rng, n, spec=TINY):
    obs = np.zeros((n, spec.obs_dim))
    for i in range(n):
        for slot in range(4):
            obs[i, 11 * slot + rng.integers(11)] = 1.0
    return obs


def random_transitions(rng, params, n, temperature=1.0, penalty=1.0, spec=TINY):
    obs = random_obs(rng, n, spec)
    prefixes = [list(rng.integers(0, 17, size=rng.integers(0, 4))) for _ in range(n)]
    resp = sample_responses(params, obs, prefixes, temperature, penalty, rng, spec.max_thought_len)
    return [Transition(o, p, r, 0.0, 0.0, bool(rng.random() < 0.3), env_id=i)
            for i, (o, p, r) in enumerate(zip(obs, prefixes, resp))]


def ppo_fixture(rng, n=6, temperature=1.0, penalty=1.0, jitter=0.05):
    """Params plus a batch whose frozen log-probs are jittered away from the
    current ones so the ratio is not identically 1."""
    params = tiny_params(rng)
    trs = random_transitions(rng, params, n, temperature, penalty)
    adv = rng.normal(size=n)
    ret = rng.normal(size=n) * 3
    sampling = temperature != 1.0 or penalty != 1.0
    batch = make_batch(trs, adv, ret, sampling=sampling)
    batch.old_logp = batch.old_logp + jitter * rng.standard_normal(batch.old_logp.shape)
    return params, batch


def sft_fixture(rng, n=4, scope="thought"):
    params = tiny_params(rng)
    examples = []
    for o in random_obs(rng, n):
        thought = tuple(int(t) for t in rng.integers(0, 17, size=rng.integers(1, 6)))
        examples.append(ThoughtExample(o, tuple(int(t) for t in rng.integers(0, 17, size=rng.integers(0, 3))),
                                       thought, int(rng.integers(0, 17))))
    return params, examples


def directional_check(loss_fn, params, grads, rng, eps=1e-3, coords=4):
    """Relative errors of analytic vs central-difference derivatives along one
    random unit direction and along a few single coordinates."""
    errs = []
    d = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    norm = np.sqrt(sum((v**2).sum() for v in d.values()))
    dirs = [{k: v / norm for k, v in d.items()}]
    names = list(params)
    for _ in range(coords):
        name = names[rng.integers(len(names))]
        e = {k: np.zeros(v.shape) for k, v in params.items()}
        e[name].flat[rng.integers(e[name].size)] = 1.0
        dirs.append(e)
    for u in dirs:
        plus = loss_fn({k: params[k] + eps * u[k] for k in params})
        minus = loss_fn({k: params[k] - eps * u[k] for k in params})
        fd = (plus - minus) / (2 * eps)
        an = sum(float((grads[k] * u[k]).sum()) for k in params)
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-3))
    return errs


def kink_margin(params, batch, clip, groups, temperature=1.0, penalty=1.0):
    """Smallest distance of the fixture from a non-differentiable point: a
    group ratio at a clip boundary, or a penalized logit at zero."""
    logits, _, _ = forward(params, batch.obs, batch.windows)
    best = np.inf
    if temperature != 1.0 or penalty != 1.0:
        present = batch.present
        if penalty != 1.0 and present.any():
            best = float(np.min(np.abs(logits[present])))
        logits, _ = sampling_logits(logits, present, temperature, penalty)
    logp = log_softmax(logits)[np.arange(len(batch.targets)), batch.targets]
    for g in groups:
        m = batch.groups == g
        diff = np.bincount(batch.sample[m], weights=(logp - batch.old_logp)[m], minlength=batch.size)
        r = np.exp(diff)
        best = min(best, np.min(np.abs(r - (1 - clip))), np.min(np.abs(r - (1 + clip))))
    return best
