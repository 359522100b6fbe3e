"""End-to-end training: SFT initialization, rollouts, per-epoch merging,
guided PPO updates, evaluation and metrics.

Each outer epoch merges the checkpoint buffer into a teacher, fills a rollout
buffer of ``buffer_size`` transitions from ``num_envs`` environments stepped
in lockstep, applies the configured guidance, runs the PPO update and appends
the new parameters to the buffer. All randomness flows from the run seed
through independent streams, so a run is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math
import pickle
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import points24 as env
from .checkpoint import Checkpoint, CheckpointBuffer
from .guidance import (
    ESTIMATORS,
    KL_TARGETS,
    SCOPES,
    VARIANTS,
    GuidanceConfig,
    TeacherGeneration,
    ThoughtDataset,
    ThoughtExample,
    estimate,
    format_reward,
    revkl_batch,
    sft_loss,
    teacher_forced_nll,
    teacher_references,
)
from .merge import EMA_MODES, METHODS, WEIGHTINGS, MergeConfig, compute_weights, merge
from .policy import (
    ACTION_GROUP,
    BOA,
    BOT,
    EOA,
    EOT,
    THOUGHT_GROUP,
    CosineSchedule,
    NonFiniteError,
    PolicySpec,
    encode,
    from_checkpoint,
    init_params,
    optimizer_step,
    sample_responses,
    state_values,
    to_checkpoint,
)
from .ppo import RolloutBuffer, Transition, UpdateConfig, update

EVAL_TEMPERATURE = 1e-6
PPO_TOKENS = ("auto", "action", "response")


class ConfigError(ValueError):
    pass


def _in(allowed):
    return lambda v: v in allowed, f"one of {allowed}"


def _between(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        ok_lo = v > lo if lo_open else v >= lo
        ok_hi = v < hi if hi_open else v <= hi
        return ok_lo and ok_hi
    lb = "(" if lo_open else "["
    rb = ")" if hi_open else "]"
    return check, f"in {lb}{lo}, {hi}{rb}"


_POS = (lambda v: v > 0, "> 0")
_NONNEG = (lambda v: v >= 0, ">= 0")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    variant: str = "kl"
    out_dir: str = "runs/default"
    resume: bool = False
    # budget
    env_steps: int = 15360
    buffer_size: int = 256
    num_envs: int = 16
    require_all_cards: bool = False
    # ppo
    discount: float = 0.9
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.02
    clip: float = 0.1
    ppo_epochs: int = 4
    minibatch_size: int = 32
    grad_accum: int = 8
    ppo_tokens: str = "auto"
    normalize_advantages: bool = True
    max_grad_norm: float = 1.0
    ppo_logprobs: str = "sampling"
    lr_initial: float = 0.3
    lr_final: float = 0.003
    lr_max_step: int = 60
    # generation
    temperature: float = 0.2
    repetition_penalty: float = 1.2
    max_thought_len: int = 32
    # model
    embed_dim: int = 32
    hidden_dim: int = 64
    context_window: int = 16
    init_scale: float = 1.0
    # merging
    merge_method: str = "ties"
    ties_density: float = 0.8
    weighting: str = "sma"
    alpha: float = 0.5
    ema_mode: str = "closed_form"
    # guidance
    scope: str = "thought"
    estimator: str = "clip"
    beta: float = 1.0
    thought_prob: float = 0.5
    format_penalty: float = -0.1
    kl_target: str = "reward"
    kl_distribution: str = "raw"
    sft_batch: int = 16
    sft_coef: float = 1.0
    teacher_temperature: float = 0.2
    teacher_max_temperature: float = 0.9
    teacher_retry_coef: float = 1.1
    # supervised initialization
    sft_init: bool = True
    sft_init_hands: int = 1000
    sft_init_epochs: int = 3
    sft_init_lr: float = 0.1
    sft_init_batch: int = 32
    # evaluation and output
    eval_every: int = 1
    eval_episodes: int = 200
    eval_seed: int = 12345
    save_checkpoints: bool = True
    plots: bool = False

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            value = getattr(self, f.name)
            want = _FIELD_TYPES[f.name]
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                object.__setattr__(self, f.name, float(value))
                value = float(value)
            if not isinstance(value, want) or (want is int and isinstance(value, bool)):
                raise ConfigError(f"{f.name}: expected {want.__name__}, got {value!r}")
            if want is float and not math.isfinite(value):
                raise ConfigError(f"{f.name}: must be finite")
            check = _CHECKS.get(f.name)
            if check is not None and not check[0](value):
                raise ConfigError(f"{f.name}={value!r} must be {check[1]}")
        if self.minibatch_size > self.buffer_size:
            raise ConfigError("minibatch_size cannot exceed buffer_size")
        if self.teacher_temperature > self.teacher_max_temperature:
            raise ConfigError("teacher_temperature cannot exceed teacher_max_temperature")
        if self.lr_final > self.lr_initial:
            raise ConfigError("lr_final cannot exceed lr_initial")

    # derived pieces ---------------------------------------------------------

    @property
    def epochs(self) -> int:
        return self.env_steps // self.buffer_size

    def policy_spec(self) -> PolicySpec:
        return PolicySpec(self.embed_dim, self.hidden_dim, self.context_window, self.max_thought_len)

    def merge_config(self) -> MergeConfig:
        return MergeConfig(self.merge_method, self.ties_density, self.weighting, self.alpha, self.ema_mode)

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(self.variant, self.scope, self.estimator, self.beta,
                              self.thought_prob, self.format_penalty, self.kl_target)

    def teacher_generation(self) -> TeacherGeneration:
        return TeacherGeneration(self.teacher_temperature, self.teacher_max_temperature,
                                 self.teacher_retry_coef, self.repetition_penalty, self.max_thought_len)

    def schedule(self) -> CosineSchedule:
        return CosineSchedule(self.lr_initial, self.lr_final, self.lr_max_step)

    def policy_groups(self) -> tuple[int, ...]:
        tokens = self.ppo_tokens
        if tokens == "auto":
            # KL guidance shapes the reward of thought tokens, which only
            # reaches them if the PPO ratio covers the thought group too
            tokens = "response" if self.variant == "kl" else "action"
        return (ACTION_GROUP,) if tokens == "action" else (ACTION_GROUP, THOUGHT_GROUP)

    def update_config(self) -> UpdateConfig:
        return UpdateConfig(self.ppo_epochs, self.minibatch_size, self.grad_accum, self.clip,
                            self.entropy_coef, self.value_coef, self.policy_groups(),
                            self.max_grad_norm,
                            *((self.temperature, self.repetition_penalty)
                              if self.ppo_logprobs == "sampling" else (1.0, 1.0)))

    # serialization ----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={_format_value(v)}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: {"int": int, "float": float, "str": str, "bool": bool}[f.type]
                for f in fields(TrainConfig) if not f.name.startswith("_")}

_CHECKS = {
    "seed": _NONNEG,
    "variant": _in(VARIANTS),
    "env_steps": _NONNEG,
    "buffer_size": _POS,
    "num_envs": _POS,
    "discount": _between(0.0, 1.0),
    "gae_lambda": _between(0.0, 1.0),
    "entropy_coef": _NONNEG,
    "value_coef": _NONNEG,
    "max_grad_norm": _NONNEG,
    "clip": _between(0.0, 1.0, lo_open=True, hi_open=True),
    "ppo_epochs": _POS,
    "minibatch_size": _POS,
    "grad_accum": _POS,
    "ppo_tokens": _in(PPO_TOKENS),
    "ppo_logprobs": _in(("sampling", "raw")),
    "lr_initial": _NONNEG,
    "lr_final": _NONNEG,
    "lr_max_step": _POS,
    "temperature": _POS,
    "repetition_penalty": (lambda v: v >= 1.0, ">= 1"),
    "max_thought_len": _POS,
    "embed_dim": _POS,
    "hidden_dim": _POS,
    "context_window": _POS,
    "init_scale": _NONNEG,
    "merge_method": _in(METHODS),
    "ties_density": _between(0.0, 1.0, lo_open=True),
    "weighting": _in(WEIGHTINGS),
    "alpha": _between(0.0, 1.0, lo_open=True, hi_open=True),
    "ema_mode": _in(EMA_MODES),
    "scope": _in(SCOPES),
    "estimator": _in(ESTIMATORS),
    "beta": _NONNEG,
    "thought_prob": _between(0.0, 1.0),
    "format_penalty": (lambda v: v <= 0, "<= 0"),
    "kl_target": _in(KL_TARGETS),
    "kl_distribution": _in(("sampling", "raw")),
    "sft_batch": _POS,
    "sft_coef": _NONNEG,
    "teacher_temperature": _POS,
    "teacher_max_temperature": _POS,
    "teacher_retry_coef": (lambda v: v > 1.0, "> 1"),
    "sft_init_hands": _NONNEG,
    "sft_init_epochs": _NONNEG,
    "sft_init_lr": _NONNEG,
    "sft_init_batch": _POS,
    "eval_every": _NONNEG,
    "eval_episodes": _NONNEG,
    "eval_seed": _NONNEG,
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, raw: str):
    want = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if want is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if want is int:
            return int(raw)
        if want is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {want.__name__}") from None
    return raw


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment, unknown or
    repeated keys are errors."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    for key, v in overrides.items():
        if v is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, v) if isinstance(v, str) else v
    return TrainConfig(**values)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)


# --- metrics ------------------------------------------------------------------

METRIC_FIELDS = (
    "epoch", "env_steps", "episodes", "success_rate", "mean_return", "mean_thought_len",
    "illegal_rate", "malformed_rate", "revkl", "sft_loss", "policy_loss", "value_loss",
    "entropy", "lr", "eval_success_rate", "eval_return",
)
TIMING_FIELDS = ("epoch", "rollout_seconds", "update_seconds", "eval_seconds", "wall_seconds")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[h]) for h in header])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (int(v) if k in ("epoch", "env_steps", "episodes") else float(v)) for k, v in row.items()})
    return out


# --- evaluation ---------------------------------------------------------------


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    episodes: int
    successes: list[bool] = field(default_factory=list)


def eval_hands(episodes: int, seed: int) -> list[tuple[int, ...]]:
    rng = np.random.default_rng(seed)
    return [env.reset(rng).cards for _ in range(episodes)]


def policy_actor(params, temperature: float = EVAL_TEMPERATURE, repetition_penalty: float = 1.0,
                 max_thought_len: int = 32, seed: int = 0):
    """Batched actor for :func:`run_episodes` driven by a policy."""
    rng = np.random.default_rng(seed)

    def act(states: Sequence[env.Points24State]) -> list[str | None]:
        obs = np.stack([env.observation_features(s) for s in states])
        prefixes = [env.formula_ids(s) for s in states]
        responses = sample_responses(params, obs, prefixes, temperature, repetition_penalty,
                                     rng, max_thought_len)
        return [r.action_text for r in responses]

    return act


def solver_actor(require_all_cards: bool = False):
    """Actor replaying the solver witness for the full hand; gives up with "="
    on unsolvable hands."""

    def act(states: Sequence[env.Points24State]) -> list[str | None]:
        out = []
        for s in states:
            w = env.solve(s.cards, require_all_cards)
            out.append("=" if w is None else w[len(s.formula)])
        return out

    return act


def run_episodes(actor: Callable, hands: Sequence[tuple[int, ...]],
                 require_all_cards: bool = False) -> EvalResult:
    if not hands:
        raise ValueError("need at least one episode")
    states = [env.Points24State(cards=tuple(h)) for h in hands]
    returns = np.zeros(len(hands))
    success = [False] * len(hands)
    live = list(range(len(hands)))
    while live:
        actions = actor([states[i] for i in live])
        still = []
        for i, a in zip(live, actions):
            out = env.step(states[i], a, require_all_cards)
            returns[i] += out.reward
            states[i] = out.next_state
            if out.done:
                success[i] = out.info["success"]
            else:
                still.append(i)
        live = still
    return EvalResult(float(np.mean(success)), float(returns.mean()), len(hands), success)


def evaluate(checkpoint: Checkpoint | dict, episodes: int, seed: int,
             spec: PolicySpec | None = None, require_all_cards: bool = False) -> EvalResult:
    """Greedy evaluation on the hand sequence fixed by ``seed``."""
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    if isinstance(checkpoint, Checkpoint):
        params, spec = from_checkpoint(checkpoint)
    else:
        params = checkpoint
        spec = spec or PolicySpec()
    actor = policy_actor(params, max_thought_len=spec.max_thought_len, seed=seed)
    return run_episodes(actor, eval_hands(episodes, seed), require_all_cards)


# --- supervised initialization ------------------------------------------------


def sft_initialize(params: dict, config: TrainConfig, rng: np.random.Generator) -> tuple[dict, float]:
    """Fit solver-labelled full responses ``BOT witness EOT BOA action EOA``."""
    records = env.make_sft_dataset(config.sft_init_hands, rng, config.require_all_cards)
    if not records or config.sft_init_epochs == 0:
        return params, float("nan")
    items = []
    for r in records:
        thought = encode(r.thought)[: config.max_thought_len]
        seq = [BOT, *thought, EOT, BOA, encode([r.action])[0], EOA]
        items.append((env.observation_features(r.state), env.formula_ids(r.state), seq,
                      list(range(len(seq)))))
    schedule = CosineSchedule(config.sft_init_lr, config.sft_init_lr, 1)
    loss = float("nan")
    for _ in range(config.sft_init_epochs):
        order = rng.permutation(len(items))
        total, count = 0.0, 0
        for start in range(0, len(items), config.sft_init_batch):
            batch = [items[i] for i in order[start : start + config.sft_init_batch]]
            l, grads = teacher_forced_nll(params, batch, len(batch))
            params = optimizer_step(params, grads, 0, schedule)
            total += l * len(batch)
            count += len(batch)
        loss = total / count
    return params, loss


# --- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    run_dir: Path
    buffer: CheckpointBuffer
    thought_dataset: ThoughtDataset | None = None
    transitions: list[list[Transition]] = field(default_factory=list)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "hands", "sample", "guide", "update")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _ckpt_path(run_dir: Path, k: int) -> Path:
    return run_dir / f"ckpt_{k:04d}.gtck"


def _state_path(run_dir: Path) -> Path:
    return run_dir / "resume.pkl"


def build_teacher(history: Sequence[Checkpoint], config: MergeConfig) -> Checkpoint:
    """Merge every checkpoint in ``history`` anchored at the first one."""
    return merge(CheckpointBuffer(history[0], list(history)), config)


def collect(params, teacher_params, config: TrainConfig, rngs: dict, epoch: int,
            dataset: ThoughtDataset | None) -> tuple[RolloutBuffer, dict]:
    """Fill one rollout buffer; returns it with the rollout statistics."""
    gcfg = config.guidance_config()
    gen = config.teacher_generation()
    buf = RolloutBuffer(config.buffer_size)
    states = [env.reset(rngs["hands"]) for _ in range(config.num_envs)]
    ep_return = [0.0] * config.num_envs
    finished_returns, finished_success = [], []
    thought_lens, illegal, malformed, kl_values = [], 0, 0, []
    offsets: list[float] = []
    while not buf.full():
        live = list(range(min(config.num_envs, config.buffer_size - len(buf))))
        obs = np.stack([env.observation_features(states[i]) for i in live])
        prefixes = [env.formula_ids(states[i]) for i in live]
        responses = sample_responses(params, obs, prefixes, config.temperature,
                                     config.repetition_penalty, rngs["sample"], config.max_thought_len)
        guided = [gcfg.thought_prob > 0 and rngs["guide"].random() < gcfg.thought_prob for _ in live]
        est = [0.0] * len(live)
        if gcfg.variant == "kl" and any(guided) and gcfg.beta > 0:
            rows = [j for j, g in enumerate(guided) if g]
            gen_args = ((config.temperature, config.repetition_penalty)
                        if config.kl_distribution == "sampling" else (1.0, 1.0))
            k1s = revkl_batch(params, teacher_params, [obs[j] for j in rows],
                              [responses[j] for j in rows], gcfg.scope, *gen_args)
            for j, k1 in zip(rows, k1s):
                if k1.size:
                    est[j] = estimate(k1, gcfg.estimator)
                    kl_values.append(float(k1.mean()))
        elif gcfg.variant == "sft" and any(guided):
            rows = [j for j, g in enumerate(guided) if g]
            refs = teacher_references(teacher_params, obs[rows], [prefixes[j] for j in rows],
                                      gen, rngs["guide"])
            for j, ref in zip(rows, refs):
                if ref is not None:
                    dataset.append(ThoughtExample(obs[j], tuple(prefixes[j]), tuple(ref.thought),
                                                  ref.action))
        for j, i in enumerate(live):
            r = responses[j]
            out = env.step(states[i], r.action_text, config.require_all_cards)
            shaped = out.reward + format_reward(r, gcfg.format_penalty)
            penalty = gcfg.beta * est[j] if gcfg.variant == "kl" else 0.0
            if gcfg.kl_target == "reward":
                shaped -= penalty
                offsets.append(0.0)
            else:
                offsets.append(-penalty)
            buf.add(Transition(obs[j], prefixes[j], r, out.reward, shaped, out.done, env_id=i,
                               revkl=est[j] if guided[j] else None,
                               success=out.info["success"], legal=out.info["legal"]))
            thought_lens.append(len(r.thought))
            illegal += not out.info["legal"]
            malformed += not r.well_formed
            ep_return[i] += out.reward
            if out.done:
                finished_returns.append(ep_return[i])
                finished_success.append(out.info["success"])
                ep_return[i] = 0.0
                states[i] = env.reset(rngs["hands"])
            else:
                states[i] = out.next_state
    # bootstrap every stream whose last transition did not end the episode
    last = {}
    for tr in buf.transitions:
        last[tr.env_id] = tr
    open_ids = sorted(i for i, tr in last.items() if not tr.done)
    bootstrap = {}
    if open_ids:
        vals = state_values(params, np.stack([env.observation_features(states[i]) for i in open_ids]),
                            [env.formula_ids(states[i]) for i in open_ids])
        bootstrap = {i: float(v) for i, v in zip(open_ids, vals)}
    buf.finalize(config.discount, config.gae_lambda, bootstrap, config.normalize_advantages,
                 offsets if gcfg.kl_target == "advantage" else None)
    n = len(buf)
    stats = {
        "episodes": len(finished_returns),
        "success_rate": float(np.mean(finished_success)) if finished_success else 0.0,
        "mean_return": float(np.mean(finished_returns)) if finished_returns else float("nan"),
        "mean_thought_len": float(np.mean(thought_lens)),
        "illegal_rate": illegal / n,
        "malformed_rate": malformed / n,
        "revkl": float(np.mean(kl_values)) if kl_values else float("nan"),
    }
    return buf, stats


def _plot_svg(path: Path, rows: Sequence[dict], keys: Sequence[str]) -> None:
    """One polyline per metric, each scaled to its own range."""
    w, h, pad = 640, 240, 20
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']
    xs = [r["epoch"] for r in rows]
    for n, key in enumerate(keys):
        ys = [r[key] for r in rows]
        pts = [(x, y) for x, y in zip(xs, ys) if not math.isnan(y)]
        if len(pts) < 2:
            continue
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
        sx = (w - 2 * pad) / ((x1 - x0) or 1)
        sy = (h - 2 * pad) / ((y1 - y0) or 1)
        coords = " ".join(f"{pad + (x - x0) * sx:.1f},{h - pad - (y - y0) * sy:.1f}" for x, y in pts)
        color = colors[n % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                     f"<title>{key}</title></polyline>")
        parts.append(f'<text x="{pad + 4}" y="{pad + 12 * (n + 1)}" font-size="10" fill="{color}">{key}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def _save_resume(run_dir: Path, epoch: int, params, rngs, dataset, metrics, timing, weights) -> None:
    payload = {
        "epoch": epoch,
        "params": {k: np.array(v) for k, v in params.items()},
        "rngs": {k: g.bit_generator.state for k, g in rngs.items()},
        "dataset": dataset,
        "metrics": metrics,
        "timing": timing,
        "weights": weights,
    }
    tmp = _state_path(run_dir).with_suffix(".tmp")
    tmp.write_bytes(pickle.dumps(payload))
    tmp.replace(_state_path(run_dir))


def train(config: TrainConfig, keep_transitions: bool = False) -> TrainResult:
    """Run the full training loop and persist checkpoints and metrics.

    With ``resume`` set and a resume file in ``out_dir`` the run continues
    from the last completed epoch and produces the same outputs as an
    unbroken run.
    """
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    spec = config.policy_spec()
    gcfg = config.guidance_config()
    mcfg = config.merge_config()
    rngs = _streams(config.seed)
    schedule = config.schedule()
    ucfg = config.update_config()
    dataset = ThoughtDataset() if gcfg.variant == "sft" else None
    metrics: list[dict] = []
    timing: list[dict] = []
    weight_rows: list[dict] = []
    start_epoch = 0

    if config.resume and _state_path(run_dir).exists():
        state = pickle.loads(_state_path(run_dir).read_bytes())
        start_epoch = state["epoch"]
        ckpts = [ckpt_io.load(_ckpt_path(run_dir, k)) for k in range(start_epoch + 1)]
        params = state["params"]
        for k, g in rngs.items():
            g.bit_generator.state = state["rngs"][k]
        dataset = state["dataset"]
        metrics, timing, weight_rows = state["metrics"], state["timing"], state["weights"]
    else:
        params = init_params(spec, rngs["init"], config.init_scale)
        if config.sft_init:
            params, _ = sft_initialize(params, config, rngs["init"])
        ckpts = [to_checkpoint(params, spec, step_id=0, tag="init")]
        if config.save_checkpoints:
            ckpt_io.save(ckpts[0], _ckpt_path(run_dir, 0))

    all_transitions = []
    last_good = ckpts[-1]
    for k in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        teacher_ckpt = build_teacher(ckpts, mcfg)
        teacher_params, _ = from_checkpoint(teacher_ckpt)
        weight_rows.append({"epoch": k + 1, "weights": " ".join(repr(w) for w in compute_weights(len(ckpts), mcfg))})
        rollout, stats = collect(params, teacher_params, config, rngs, k, dataset)
        if keep_transitions:
            all_transitions.append(list(rollout.transitions))
        t1 = time.perf_counter()

        extra = None
        if dataset is not None and config.sft_coef > 0:
            def extra(p, rng, _ds=dataset):
                batch = _ds.sample(rng, config.sft_batch)
                if not batch:
                    return 0.0, {name: np.zeros(v.shape) for name, v in p.items()}
                loss, grads = sft_loss(p, batch, gcfg.scope)
                return config.sft_coef * loss, {n: config.sft_coef * g for n, g in grads.items()}
        try:
            new_params, history, extra_hist = update(params, rollout, ucfg, k, schedule, rngs["update"],
                                                     extra, run_dir / "diagnostics.json")
        except NonFiniteError:
            ckpt_io.save(last_good, run_dir / "last_good.gtck")
            raise
        params = new_params
        t2 = time.perf_counter()
        ck = to_checkpoint(params, spec, step_id=k + 1, tag=f"epoch{k + 1}")
        ckpts.append(ck)
        last_good = ck
        if config.save_checkpoints:
            ckpt_io.save(ck, _ckpt_path(run_dir, k + 1))

        ev = None
        if config.eval_every and config.eval_episodes and (k + 1) % config.eval_every == 0:
            ev = evaluate(params, config.eval_episodes, config.eval_seed, spec, config.require_all_cards)
        t3 = time.perf_counter()
        row = {
            "epoch": k + 1,
            "env_steps": (k + 1) * config.buffer_size,
            **stats,
            "sft_loss": float(np.mean(extra_hist)) if extra_hist else float("nan"),
            "policy_loss": float(np.mean([h.policy for h in history])),
            "value_loss": float(np.mean([h.value for h in history])),
            "entropy": float(np.mean([h.entropy for h in history])),
            "lr": schedule.lr(k),
            "eval_success_rate": ev.success_rate if ev else float("nan"),
            "eval_return": ev.mean_return if ev else float("nan"),
        }
        metrics.append(row)
        timing.append({"epoch": k + 1, "rollout_seconds": t1 - t0, "update_seconds": t2 - t1,
                       "eval_seconds": t3 - t2, "wall_seconds": t3 - t0})
        write_csv(run_dir / "metrics.csv", METRIC_FIELDS, metrics)
        write_csv(run_dir / "timing.csv", TIMING_FIELDS, timing)
        write_csv(run_dir / "merge_weights.csv", ("epoch", "weights"), weight_rows)
        _save_resume(run_dir, k + 1, params, rngs, dataset, metrics, timing, weight_rows)

    if not metrics:
        write_csv(run_dir / "metrics.csv", METRIC_FIELDS, [])
    if config.plots and metrics:
        _plot_svg(run_dir / "metrics.svg", metrics, ("success_rate", "eval_success_rate"))
    return TrainResult(ckpts[-1], metrics, run_dir, CheckpointBuffer(ckpts[0], ckpts[1:]),
                       dataset, all_transitions)


# --- analysis -----------------------------------------------------------------

FIG2_FIELDS = ("epoch", "current_success_rate", "merged_success_rate", "current_return", "merged_return")


def merged_vs_current(run_dir: str | Path, episodes: int | None = None, seed: int | None = None,
                      merge_config: MergeConfig | None = None) -> list[dict]:
    """Evaluate each epoch's checkpoint against the merge of all earlier ones.

    Epoch 1 is skipped since its only predecessor is the initial model.
    """
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.txt")
    episodes = episodes or config.eval_episodes or 200
    seed = config.eval_seed if seed is None else seed
    mcfg = merge_config or config.merge_config()
    paths = sorted(run_dir.glob("ckpt_*.gtck"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    ckpts = ckpt_io.load_many(paths)
    for k, c in enumerate(ckpts):
        if c.step_id != k:
            raise FileNotFoundError(f"checkpoint for epoch {k} missing from {run_dir}")
    rows = []
    for k in range(2, len(ckpts)):
        cur = evaluate(ckpts[k], episodes, seed, require_all_cards=config.require_all_cards)
        merged = evaluate(build_teacher(ckpts[:k], mcfg), episodes, seed,
                          require_all_cards=config.require_all_cards)
        rows.append({"epoch": k, "current_success_rate": cur.success_rate,
                     "merged_success_rate": merged.success_rate,
                     "current_return": cur.mean_return, "merged_return": merged.mean_return})
    write_csv(run_dir / "fig2.csv", FIG2_FIELDS, rows)
    return rows


def parse_sweep(spec: str) -> list[dict]:
    """``key=v1,v2;key2=v3`` into the cartesian product of assignments."""
    axes = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"sweep axis {part!r} must look like key=v1,v2")
        key, vals = part.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown sweep key {key!r}")
        values = [_parse_value(key, v) for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"sweep axis {key!r} has no values")
        axes.append((key, values))
    if not axes:
        raise ConfigError("empty sweep")
    keys = [a[0] for a in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(a[1] for a in axes))]


def final_success(metrics: Sequence[dict], last: int = 10) -> float:
    vals = [r["eval_success_rate"] for r in metrics[-last:] if not math.isnan(r["eval_success_rate"])]
    return float(np.mean(vals)) if vals else float("nan")


def ablate(config: TrainConfig, sweep: str | Sequence[dict]) -> list[dict]:
    """One seeded run per sweep cell under ``config.out_dir``; writes
    ``ablation.csv`` with the final-10-epoch evaluation success per cell."""
    cells = parse_sweep(sweep) if isinstance(sweep, str) else list(sweep)
    root = Path(config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for c in cells for k in c})
    rows = []
    for cell in cells:
        name = "_".join(f"{k}-{_format_value(cell[k])}" for k in sorted(cell))
        result = train(config.replace(out_dir=str(root / name), resume=False, **cell))
        m = result.metrics
        rows.append({"cell": name, **{k: _format_value(cell.get(k, getattr(config, k))) for k in keys},
                     "final_success_rate": final_success(m),
                     "final_return": float(np.mean([r["eval_return"] for r in m[-10:]])) if m else float("nan")})
    write_csv(root / "ablation.csv", ("cell", *keys, "final_success_rate", "final_return"), rows)
    return rows
