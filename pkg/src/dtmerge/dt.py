"""Decision transformer policy: tokenization, training, and evaluation.

Sequences interleave (return-to-go, state, action) per timestep, each token
embedded by a per-environment linear projection plus a learned absolute
timestep embedding. The action for timestep t is predicted from the state
token at t and squashed with tanh to respect the [-1, 1] action bounds.

Per-environment parameters live in an aux tree under `proj.*`; the shared
transformer tree uses the canonical block naming. Merging only ever touches
the transformer tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, OptimizerState, Tensor, optimizer_step
from .envs import OfflineDataset, ToyEnv, make_env, normalize_score
from .seeding import substream, substream_seed
from .transformer import ArchConfig, DropoutPlan, ParameterTree, model_forward

F32 = np.float32


@dataclass(frozen=True)
class EnvBinding:
    name: str
    state_dim: int
    action_dim: int
    horizon: int

    @classmethod
    def of(cls, env: ToyEnv) -> "EnvBinding":
        s = env.spec
        return cls(s.name, s.state_dim, s.action_dim, s.horizon)

    def to_dict(self) -> dict:
        return {"name": self.name, "state_dim": self.state_dim,
                "action_dim": self.action_dim, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvBinding":
        return cls(d["name"], d["state_dim"], d["action_dim"], d["horizon"])


@dataclass(frozen=True)
class DTConfig:
    context_length: int = 20
    batch_size: int = 64
    train_steps: int = 5000
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    rtg_scale: float = 0.01
    target_rtg_multiplier: float = 1.0
    eval_episodes: int = 25


@dataclass
class DTModel:
    arch: ArchConfig
    tree: ParameterTree
    aux: ParameterTree
    env: EnvBinding
    state_mean: np.ndarray
    state_std: np.ndarray
    rtg_scale: float = 0.01
    target_return_base: float = 0.0
    attn_removed: bool = False

    def all_params(self) -> ParameterTree:
        merged = ParameterTree(self.tree.items())
        for n, t in self.aux.items():
            merged[n] = t
        return merged

    def detached(self) -> "DTModel":
        """Read-only copy: leaf tensors without gradient tracking."""
        detach = lambda tr: ParameterTree((n, Tensor(t.data)) for n, t in tr.items())
        return replace(self, tree=detach(self.tree), aux=detach(self.aux),
                       state_mean=self.state_mean.copy(), state_std=self.state_std.copy())


def init_aux_tree(arch: ArchConfig, env: EnvBinding, rng: np.random.Generator) -> ParameterTree:
    d = arch.d_embed
    shapes = [
        ("proj.rtg.weight", (1, d)),
        ("proj.rtg.bias", (d,)),
        ("proj.state.weight", (env.state_dim, d)),
        ("proj.state.bias", (d,)),
        ("proj.action.weight", (env.action_dim, d)),
        ("proj.action.bias", (d,)),
        ("proj.timestep.table", (env.horizon + 1, d)),
        ("proj.ln.gamma", (d,)),
        ("proj.ln.beta", (d,)),
        ("proj.head.weight", (d, env.action_dim)),
        ("proj.head.bias", (env.action_dim,)),
    ]
    aux = ParameterTree()
    for name, shape in shapes:
        if name.endswith(".gamma"):
            data = np.ones(shape, dtype=F32)
        elif name.endswith((".beta", ".bias")):
            data = np.zeros(shape, dtype=F32)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(F32)
        aux[name] = Tensor(data, requires_grad=True, name=name)
    return aux


def init_dt_model(arch: ArchConfig, env: ToyEnv | EnvBinding, seed: int,
                  tree: ParameterTree | None = None) -> DTModel:
    """Fresh model bound to an environment; optionally adopt an existing
    transformer tree (shared initializations, merged inits)."""
    binding = env if isinstance(env, EnvBinding) else EnvBinding.of(env)
    from .transformer import init_transformer_tree

    if tree is None:
        tree = init_transformer_tree(arch, substream(seed, "init", "tree", binding.name))
    aux = init_aux_tree(arch, binding, substream(seed, "init", "aux", binding.name))
    return DTModel(
        arch=arch, tree=tree, aux=aux, env=binding,
        state_mean=np.zeros(binding.state_dim, F32),
        state_std=np.ones(binding.state_dim, F32),
    )


# ---------------------------------------------------------------------------
# return-to-go and tokenization
# ---------------------------------------------------------------------------

def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Suffix sums: rtg[t] = sum of rewards from t to the end.

    Accumulated backward in float64 then stored as float32, so rtg[0]
    agrees exactly with the trajectory's total return.
    """
    rewards = np.asarray(rewards)
    if rewards.size == 0:
        raise ValueError("compute_rtg: empty reward sequence")
    return np.cumsum(rewards[::-1], dtype=np.float64)[::-1].astype(F32)


@dataclass
class DTBatch:
    rtg: np.ndarray        # [B, K]
    states: np.ndarray     # [B, K, state_dim]
    actions: np.ndarray    # [B, K, action_dim]
    timesteps: np.ndarray  # [B, K] int
    mask: np.ndarray       # [B, K] 1 = real, 0 = padding

    @property
    def K(self) -> int:
        return self.rtg.shape[1]


def tokenize_window(rtg: np.ndarray, states: np.ndarray, actions: np.ndarray,
                    t0: int, K: int) -> tuple[np.ndarray, ...]:
    """Left-pad a window of <= K transitions to length K.

    Returns one (rtg, states, actions, timesteps, mask) batch row; real data
    sits right-aligned, padded slots are zero with mask 0.
    """
    L = len(rtg)
    if L > K:
        raise ValueError(f"window length {L} > context {K}")
    if L == 0:
        raise ValueError("empty window")
    pad = K - L
    sd, adim = states.shape[1], actions.shape[1]
    row_rtg = np.concatenate([np.zeros(pad, F32), np.asarray(rtg, F32)])
    row_states = np.concatenate([np.zeros((pad, sd), F32), np.asarray(states, F32)])
    row_actions = np.concatenate([np.zeros((pad, adim), F32), np.asarray(actions, F32)])
    row_t = np.concatenate([np.zeros(pad, np.int64), np.arange(t0, t0 + L)])
    row_mask = np.concatenate([np.zeros(pad, F32), np.ones(L, F32)])
    return row_rtg, row_states, row_actions, row_t, row_mask


def detokenize_window(row_rtg, row_states, row_actions, row_mask):
    """Inverse of tokenize_window: strip padding, return the real window."""
    real = row_mask > 0
    return row_rtg[real], row_states[real], row_actions[real]


class BatchSampler:
    """Uniform (trajectory, start) sampling with precomputed RTG arrays."""

    def __init__(self, dataset: OfflineDataset, K: int):
        self.dataset = dataset
        self.K = K
        self.rtgs = [compute_rtg(t.rewards) for t in dataset.trajectories]

    def sample(self, batch_size: int, rng: np.random.Generator) -> DTBatch:
        rows = []
        n = len(self.dataset.trajectories)
        for _ in range(batch_size):
            i = int(rng.integers(n))
            traj = self.dataset.trajectories[i]
            si = int(rng.integers(len(traj)))
            sl = slice(si, si + self.K)
            rows.append(tokenize_window(
                self.rtgs[i][sl], traj.states[sl], traj.actions[sl], si, self.K))
        rtg, states, actions, ts, mask = (np.stack(cols) for cols in zip(*rows))
        return DTBatch(rtg, states, actions, ts, mask)


# ---------------------------------------------------------------------------
# forward / training
# ---------------------------------------------------------------------------

def dt_forward(model: DTModel, batch: DTBatch, dropout_plan: DropoutPlan | None = None,
               capture: list | None = None) -> Tensor:
    """Predicted actions [B, K, action_dim] from the state-token outputs."""
    aux, K = model.aux, batch.K
    B = batch.rtg.shape[0]
    d = model.arch.d_embed

    norm_states = (batch.states - model.state_mean) / model.state_std
    rtg_in = Tensor(batch.rtg[..., None] * F32(model.rtg_scale))
    te = ad.embedding_lookup(aux["proj.timestep.table"], batch.timesteps)

    tok_r = rtg_in @ aux["proj.rtg.weight"] + aux["proj.rtg.bias"] + te
    tok_s = Tensor(norm_states.astype(F32)) @ aux["proj.state.weight"] + aux["proj.state.bias"] + te
    tok_a = Tensor(batch.actions) @ aux["proj.action.weight"] + aux["proj.action.bias"] + te

    def lane(t: Tensor) -> Tensor:
        return ad.reshape(t, (B, K, 1, d))

    tokens = ad.reshape(ad.concat([lane(tok_r), lane(tok_s), lane(tok_a)], axis=2), (B, 3 * K, d))
    tokens = ad.layer_norm(tokens, aux["proj.ln.gamma"], aux["proj.ln.beta"])
    if dropout_plan is not None:
        tokens = dropout_plan.apply(tokens)

    key_mask = np.repeat(batch.mask, 3, axis=1)
    hidden = model_forward(tokens, model.tree, model.arch, dropout_plan, key_mask,
                           capture, model.attn_removed)
    state_out = hidden[:, 1::3, :]
    return ad.tanh(state_out @ aux["proj.head.weight"] + aux["proj.head.bias"])


class TrainingDiverged(RuntimeError):
    pass


def dt_loss(model: DTModel, batch: DTBatch, dropout_plan: DropoutPlan | None = None) -> Tensor:
    pred = dt_forward(model, batch, dropout_plan)
    return ad.mse_loss(pred, Tensor(batch.actions), batch.mask[..., None])


@dataclass
class TrainResult:
    model: DTModel
    losses: list[float] = field(default_factory=list)
    curve: list[tuple[int, float]] = field(default_factory=list)  # (step, mean return)


def fit_normalization(model: DTModel, dataset: OfflineDataset) -> None:
    model.state_mean, model.state_std = dataset.state_stats()
    model.target_return_base = dataset.max_return


def train_dt(model: DTModel, dataset: OfflineDataset, config: DTConfig, seed: int,
             frozen: frozenset[str] = frozenset(), steps: int | None = None,
             eval_every: int = 0, eval_fn=None,
             step_hook=None) -> TrainResult:
    """MSE behavior cloning on RTG-conditioned windows.

    Gradients flow to every non-frozen parameter of the transformer tree and
    the aux projections. `step_hook(step, model)` runs after each optimizer
    step (used for freeze audits); `eval_fn(model) -> float` feeds the
    learning curve every `eval_every` steps when given.
    """
    if dataset.env_name != model.env.name:
        raise ValueError(f"dataset env {dataset.env_name!r} != model env {model.env.name!r}")
    if model.target_return_base == 0.0:
        fit_normalization(model, dataset)
    sampler = BatchSampler(dataset, config.context_length)
    params = model.all_params()
    trainable = {n: t for n, t in params.items() if n not in frozen}
    opt = OptimizerState(AdamConfig(
        lr=config.learning_rate, weight_decay=config.weight_decay,
        warmup_steps=config.warmup_steps))
    n_steps = config.train_steps if steps is None else steps
    rng = substream(seed, "train", "batches", model.env.name)
    drop_seed = substream_seed(seed, "train", "dropout", model.env.name)

    result = TrainResult(model)
    for step in range(1, n_steps + 1):
        batch = sampler.sample(config.batch_size, rng)
        plan = DropoutPlan(model.arch.dropout, drop_seed, step)
        loss = dt_loss(model, batch, plan)
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise TrainingDiverged(f"{model.env.name}: non-finite loss at step {step}")
        grads = ad.backward(loss, trainable)
        updated = optimizer_step(params, grads, opt, frozen=frozen)
        for name, t in updated.items():
            (model.tree if name in model.tree else model.aux)[name] = t
        params = model.all_params()
        trainable = {n: t for n, t in params.items() if n not in frozen}
        result.losses.append(lv)
        if step_hook is not None:
            step_hook(step, model)
        if eval_every and eval_fn is not None and step % eval_every == 0:
            result.curve.append((step, float(eval_fn(model))))
    return result


# ---------------------------------------------------------------------------
# evaluation rollouts
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    env_name: str
    raw_returns: list[float]
    mean_return: float
    normalized: float
    target_rtg: float
    episodes: int
    seed: int


def evaluate(model: DTModel, env: ToyEnv, target_rtg_multiplier: float = 1.0,
             episodes: int = 25, seed: int = 0) -> EvalResult:
    """Batched return-conditioned rollouts (all episodes in lockstep).

    Conditions on initial RTG = multiplier * max dataset return, decrements
    the remaining RTG by observed rewards, and truncates context to the
    last K transitions. Deterministic given (model, seed, episodes).
    """
    if env.spec.name != model.env.name:
        raise ValueError(f"env {env.spec.name!r} does not match model binding {model.env.name!r}")
    m = model.detached()
    K = model.arch.context_positions // 3
    target = float(target_rtg_multiplier) * float(model.target_return_base)
    T = env.spec.horizon
    E = episodes

    starts = [env.reset(substream(seed, "eval", "reset", i)) for i in range(E)]
    state = np.stack(starts).astype(F32)
    rtg = np.full(E, target, dtype=F32)
    states_h: list[np.ndarray] = []
    actions_h: list[np.ndarray] = []
    rtg_h: list[np.ndarray] = []
    total = np.zeros(E, dtype=np.float64)

    with ad.finite_checks(False):
        for t in range(T):
            states_h.append(state.copy())
            rtg_h.append(rtg.copy())
            actions_h.append(np.zeros((E, env.spec.action_dim), F32))
            lo = max(0, t + 1 - K)
            window = slice(lo, t + 1)
            batch = DTBatch(
                rtg=np.stack(rtg_h[window], axis=1),
                states=np.stack(states_h[window], axis=1),
                actions=np.stack(actions_h[window], axis=1),
                timesteps=np.tile(np.arange(lo, t + 1), (E, 1)),
                mask=np.ones((E, t + 1 - lo), F32),
            )
            pred = dt_forward(m, batch)
            action = np.asarray(pred.data[:, -1, :])
            actions_h[-1] = action
            state, reward = env.step(state, action)
            total += reward.astype(np.float64)
            rtg = rtg - reward

    raw = [float(x) for x in total]
    mean_raw = float(np.mean(total))
    return EvalResult(
        env_name=env.spec.name, raw_returns=raw, mean_return=mean_raw,
        normalized=normalize_score(env.spec.name, mean_raw),
        target_rtg=target, episodes=E, seed=seed,
    )
