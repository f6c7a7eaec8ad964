"""Online tuning agent: PPO over workload states with one categorical head
per knob, pre-trainable by behavioral cloning on the clustered database.

The networks are small enough (5 -> 64 -> per-knob heads) that everything is
plain numpy with hand-written backprop; gradients are exact and checkable
against finite differences. The joint action factorizes into independent
per-knob categoricals, so the output layer grows linearly with the catalog
instead of enumerating the joint configuration space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import artifacts
from .cluster import ClusterIndex, KMeansModel, knn_query
from .core import (
    ParamConfig,
    ParamSpace,
    PerfDatabase,
    ValidationError,
    WorkloadState,
    WS_DIM,
)

HIDDEN = 64
WEIGHTS_KIND = "policy-weights"


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.9
    learning_rate: float = 0.01
    n_steps: int = 4
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    epochs_per_update: int = 10
    minibatch: int = 4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must be in [0, 1)")
        if not self.clip_epsilon > 0:
            raise ValidationError("clip_epsilon must be positive")
        if self.n_steps < 1 or self.epochs_per_update < 1:
            raise ValidationError("n_steps and epochs_per_update must be >= 1")


class _Trunk:
    """Shared 5 -> 64 tanh layer; policy and value keep separate instances."""

    def __init__(self, rng: np.random.Generator):
        self.w1 = rng.normal(0.0, 1.0 / math.sqrt(WS_DIM), size=(WS_DIM, HIDDEN))
        self.b1 = np.zeros(HIDDEN)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1)

    def backward(self, x: np.ndarray, h: np.ndarray, dh: np.ndarray,
                 grads: dict) -> None:
        dpre = dh * (1.0 - h * h)
        grads["w1"] += x.T @ dpre
        grads["b1"] += dpre.sum(axis=0)


class PolicyNet:
    """Categorical policy: tanh trunk plus one softmax head per knob.

    Output heads start at zero so the untrained policy is exactly uniform
    over every knob's candidates.
    """

    def __init__(self, space: ParamSpace, seed: int = 0, head_scale: float = 0.0):
        self.space = space
        self.head_sizes = [len(s.candidates) for s in space.specs]
        rng = np.random.default_rng(seed)
        self.trunk = _Trunk(rng)
        self.heads = []
        for size in self.head_sizes:
            if head_scale > 0:
                wh = rng.normal(0.0, head_scale, size=(HIDDEN, size))
            else:
                wh = np.zeros((HIDDEN, size))
            self.heads.append({"w": wh, "b": np.zeros(size)})

    def params(self) -> list[np.ndarray]:
        out = [self.trunk.w1, self.trunk.b1]
        for h in self.heads:
            out.extend([h["w"], h["b"]])
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        """Returns (hidden, per-head log-probs, per-head probs) for a batch."""
        h = self.trunk.forward(x)
        logps, probs = [], []
        for head in self.heads:
            z = h @ head["w"] + head["b"]
            z = z - z.max(axis=1, keepdims=True)
            logZ = np.log(np.exp(z).sum(axis=1, keepdims=True))
            logp = z - logZ
            logps.append(logp)
            probs.append(np.exp(logp))
        return h, logps, probs

    def log_prob(self, logps: list[np.ndarray], actions: np.ndarray) -> np.ndarray:
        n = actions.shape[0]
        out = np.zeros(n)
        for i, logp in enumerate(logps):
            out += logp[np.arange(n), actions[:, i]]
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, s in zip(self.params(), snap):
            p[...] = s


class ValueNet:
    """Scalar state-value estimator with the same trunk shape, separate weights."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.trunk = _Trunk(rng)
        self.wv = np.zeros((HIDDEN, 1))
        self.bv = np.zeros(1)

    def params(self) -> list[np.ndarray]:
        return [self.trunk.w1, self.trunk.b1, self.wv, self.bv]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.trunk.forward(x)
        return h, (h @ self.wv + self.bv)[:, 0]

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, s in zip(self.params(), snap):
            p[...] = s


def policy_forward(net: PolicyNet, ws: WorkloadState) -> list[np.ndarray]:
    """Per-head probability vectors for one state. Non-finite activations are
    a training bug and raise immediately."""
    x = ws.as_array()[None, :]
    _, _, probs = net.forward(x)
    out = [p[0] for p in probs]
    if any(not np.all(np.isfinite(p)) for p in out):
        raise FloatingPointError("non-finite policy activations")
    return out


def value_forward(net: ValueNet, ws: WorkloadState) -> float:
    _, v = net.forward(ws.as_array()[None, :])
    return float(v[0])


def sample_action(probs: list[np.ndarray], rng: np.random.Generator,
                  space: ParamSpace) -> tuple[ParamConfig, float]:
    """Independent categorical draw per head; values are mapped back to the
    knob candidates and the joint log-prob is the sum over heads."""
    indices = []
    logp = 0.0
    for p in probs:
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(p), u))
        idx = min(idx, len(p) - 1)
        indices.append(idx)
        logp += float(np.log(p[idx]))
    return space.config_from_indices(indices), logp


@dataclass
class Trajectory:
    """One rollout buffer: n_steps transitions plus the bootstrap value of
    the state that follows the last transition."""

    states: np.ndarray       # (n, 5)
    actions: np.ndarray      # (n, heads) candidate indices
    log_probs: np.ndarray    # (n,)
    rewards: np.ndarray      # (n,)
    values: np.ndarray       # (n,)
    dones: np.ndarray        # (n,) bool
    bootstrap_value: float = 0.0

    def __post_init__(self):
        if np.any(np.abs(self.rewards) > 1.0 + 1e-12):
            raise ValidationError("rewards must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.rewards)


class Adam:
    """Standard Adam over a list of parameter arrays (state kept across calls)."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                bootstrap_value: float, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        nonterminal = 0.0 if dones[t] else 1.0
        next_v = values[t + 1] if t + 1 < n else bootstrap_value
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def ppo_loss_and_grads(policy: PolicyNet, value: ValueNet, states: np.ndarray,
                       actions: np.ndarray, old_log_probs: np.ndarray,
                       advantages: np.ndarray, returns: np.ndarray,
                       cfg: PPOConfig) -> tuple[float, dict, list[np.ndarray], list[np.ndarray]]:
    """Clipped-surrogate PPO objective and its exact gradients.

    Returns (total_loss, diagnostics, policy_grads, value_grads) where the
    grad lists are ordered like the nets' params() lists.
    """
    n = len(states)
    h, logps, probs = policy.forward(states)
    logp_new = policy.log_prob(logps, actions)
    ratio = np.exp(logp_new - old_log_probs)
    clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
    surr1 = ratio * advantages
    surr2 = clipped * advantages
    policy_loss = -float(np.minimum(surr1, surr2).mean())

    entropies = np.zeros(n)
    for logp, p in zip(logps, probs):
        entropies += -(p * logp).sum(axis=1)
    entropy = float(entropies.mean())

    hv, v = value.forward(states)
    value_loss = float(((v - returns) ** 2).mean())

    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # d(policy_loss)/d(logp_new): the unclipped branch carries the gradient;
    # where the clipped branch is strictly smaller the sample contributes none
    use_unclipped = surr1 <= surr2
    dlogp = np.where(use_unclipped, ratio * advantages, 0.0) * (-1.0 / n)

    pgrads = {"w1": np.zeros_like(policy.trunk.w1), "b1": np.zeros_like(policy.trunk.b1)}
    head_grads = []
    dh = np.zeros_like(h)
    idx = np.arange(n)
    for head_i, (head, logp, p) in enumerate(zip(policy.heads, logps, probs)):
        dlogits = -p * dlogp[:, None]
        dlogits[idx, actions[:, head_i]] += dlogp
        if cfg.entropy_coef != 0.0:
            # d(-coef * mean(H))/dz = coef/n * p * (logp + H_head)
            h_head = -(p * logp).sum(axis=1, keepdims=True)
            dlogits += (cfg.entropy_coef / n) * p * (logp + h_head)
        head_grads.append({"w": h.T @ dlogits, "b": dlogits.sum(axis=0)})
        dh += dlogits @ head["w"].T
    policy.trunk.backward(states, h, dh, pgrads)
    policy_grad_list = [pgrads["w1"], pgrads["b1"]]
    for hg in head_grads:
        policy_grad_list.extend([hg["w"], hg["b"]])

    dv = cfg.value_coef * 2.0 * (v - returns) / n
    vgrads = {"w1": np.zeros_like(value.trunk.w1), "b1": np.zeros_like(value.trunk.b1)}
    dwv = hv.T @ dv[:, None]
    dbv = np.array([dv.sum()])
    value.trunk.backward(states, hv, dv[:, None] @ value.wv.T, vgrads)
    value_grad_list = [vgrads["w1"], vgrads["b1"], dwv, dbv]

    diags = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "approx_kl": float(np.mean(old_log_probs - logp_new)),
        "max_ratio_dev": float(np.max(np.abs(ratio - 1.0))),
    }
    return total, diags, policy_grad_list, value_grad_list


def clip_grad_norm(grad_lists: list[list[np.ndarray]], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for gl in grad_lists for g in gl))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for gl in grad_lists:
            for g in gl:
                g *= scale
    return total


@dataclass
class OptState:
    """Persistent optimizer state so successive updates behave like one
    long-running optimizer."""

    policy_adam: Adam
    value_adam: Adam

    @classmethod
    def create(cls, policy: PolicyNet, value: ValueNet, lr: float) -> "OptState":
        return cls(policy_adam=Adam(policy.params(), lr),
                   value_adam=Adam(value.params(), lr))


def ppo_update(policy: PolicyNet, value: ValueNet, traj: Trajectory,
               cfg: PPOConfig, opt: OptState | None = None) -> dict:
    """One PPO policy/value update over a full rollout buffer.

    GAE advantages (normalized per batch), clipped surrogate, several
    gradient passes with global grad-norm clipping. A non-finite loss aborts
    and restores the previous weights.
    """
    if len(traj) != cfg.n_steps:
        raise ValidationError(f"trajectory has {len(traj)} steps, expected {cfg.n_steps}")
    if opt is None:
        opt = OptState.create(policy, value, cfg.learning_rate)
    adv, returns = compute_gae(traj.rewards, traj.values, traj.dones,
                               traj.bootstrap_value, cfg.gamma, cfg.gae_lambda)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    policy_snap = policy.snapshot()
    value_snap = value.snapshot()
    diags = {}
    for epoch in range(cfg.epochs_per_update):
        total, diags, pg, vg = ppo_loss_and_grads(
            policy, value, traj.states, traj.actions, traj.log_probs,
            adv, returns, cfg,
        )
        if epoch == 0:
            diags0_ratio_dev = diags["max_ratio_dev"]
        if not math.isfinite(total):
            policy.restore(policy_snap)
            value.restore(value_snap)
            diags["aborted"] = True
            return diags
        clip_grad_norm([pg, vg], cfg.max_grad_norm)
        opt.policy_adam.step(policy.params(), pg)
        opt.value_adam.step(value.params(), vg)
    diags["aborted"] = False
    diags["first_epoch_max_ratio_dev"] = diags0_ratio_dev
    return diags


@dataclass
class ExpertDataset:
    """State -> best-known-config pairs distilled from the clustered database."""

    states: np.ndarray        # (n, 5)
    actions: np.ndarray       # (n, heads) candidate indices
    space: ParamSpace

    def __len__(self) -> int:
        return len(self.states)


def build_expert_dataset(db: PerfDatabase, model: KMeansModel,
                         index: ClusterIndex, knn_k: int) -> ExpertDataset:
    """Label every database state with its cluster's best-IPC neighbor config."""
    states = db.ws_matrix()
    actions = np.zeros((len(db), len(db.space.specs)), dtype=np.int64)
    for i, point in enumerate(db.points):
        cfg, _, _ = knn_query(index, model, point.ws, knn_k)
        actions[i] = db.space.indices_of(cfg)
    return ExpertDataset(states=states, actions=actions, space=db.space)


def bc_pretrain(policy: PolicyNet, expert: ExpertDataset, epochs: int,
                lr: float = 0.01, seed: int = 0, batch_size: int = 32) -> float:
    """Behavioral cloning: minimize summed per-head cross-entropy against the
    expert action indices with minibatch gradient descent (Adam update rule).

    Mutates the policy in place; returns the final mean cross-entropy over
    the dataset. Zero epochs leave the policy untouched. Raises on divergence.
    """
    if len(expert) == 0:
        raise ValidationError("expert dataset is empty")
    rng = np.random.default_rng(seed)
    adam = Adam(policy.params(), lr)
    n = len(expert)
    idx_rows = np.arange(n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = perm[start:start + batch_size]
            x = expert.states[batch]
            a = expert.actions[batch]
            bn = len(batch)
            h, logps, probs = policy.forward(x)
            rows = np.arange(bn)
            loss = 0.0
            grads = {"w1": np.zeros_like(policy.trunk.w1),
                     "b1": np.zeros_like(policy.trunk.b1)}
            dh = np.zeros_like(h)
            head_grads = []
            for head_i, (head, logp, p) in enumerate(zip(policy.heads, logps, probs)):
                loss += -logp[rows, a[:, head_i]].sum() / bn
                dlogits = p / bn
                dlogits[rows, a[:, head_i]] -= 1.0 / bn
                head_grads.append({"w": h.T @ dlogits, "b": dlogits.sum(axis=0)})
                dh += dlogits @ head["w"].T
            if not math.isfinite(loss):
                raise FloatingPointError("behavioral cloning diverged (non-finite loss)")
            policy.trunk.backward(x, h, dh, grads)
            grad_list = [grads["w1"], grads["b1"]]
            for hg in head_grads:
                grad_list.extend([hg["w"], hg["b"]])
            adam.step(policy.params(), grad_list)
    return float(bc_cross_entropy(policy, expert))


def bc_cross_entropy(policy: PolicyNet, expert: ExpertDataset) -> float:
    """Mean summed per-head cross-entropy of the policy on the expert pairs."""
    _, logps, _ = policy.forward(expert.states)
    rows = np.arange(len(expert))
    ce = 0.0
    for head_i, logp in enumerate(logps):
        ce += -logp[rows, expert.actions[:, head_i]].mean()
    return float(ce)


class PPOAgent:
    """Rollout bookkeeping around the nets: act, collect rewarded transitions,
    update every n_steps. Confined to the single tuning thread."""

    def __init__(self, space: ParamSpace, cfg: PPOConfig | None = None,
                 policy: PolicyNet | None = None, value: ValueNet | None = None):
        self.space = space
        self.cfg = cfg if cfg is not None else PPOConfig()
        self.policy = policy if policy is not None else PolicyNet(space, seed=self.cfg.seed)
        self.value = value if value is not None else ValueNet(seed=self.cfg.seed)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.opt = OptState.create(self.policy, self.value, self.cfg.learning_rate)
        self._buffer: list[dict] = []
        self.updates = 0

    def act(self, ws: WorkloadState) -> dict:
        probs = policy_forward(self.policy, ws)
        config, logp = sample_action(probs, self.rng, self.space)
        return {
            "config": config,
            "log_prob": logp,
            "value": value_forward(self.value, ws),
            "indices": self.space.indices_of(config),
        }

    def observe(self, ws: WorkloadState, act_info: dict, reward: float,
                next_ws: WorkloadState, done: bool = False) -> dict | None:
        """Feed one completed transition; runs a PPO update when the rollout
        buffer fills. Returns update diagnostics when an update ran."""
        self._buffer.append({
            "state": ws.as_array(),
            "actions": np.asarray(act_info["indices"], dtype=np.int64),
            "log_prob": act_info["log_prob"],
            "reward": float(reward),
            "value": act_info["value"],
            "done": done,
        })
        if len(self._buffer) < self.cfg.n_steps:
            return None
        traj = Trajectory(
            states=np.array([t["state"] for t in self._buffer]),
            actions=np.array([t["actions"] for t in self._buffer]),
            log_probs=np.array([t["log_prob"] for t in self._buffer]),
            rewards=np.array([t["reward"] for t in self._buffer]),
            values=np.array([t["value"] for t in self._buffer]),
            dones=np.array([t["done"] for t in self._buffer]),
            bootstrap_value=value_forward(self.value, next_ws),
        )
        self._buffer.clear()
        self.updates += 1
        return ppo_update(self.policy, self.value, traj, self.cfg, opt=self.opt)


# -- weight artifact ----------------------------------------------------------

def save_weights(path: str, policy: PolicyNet, value: ValueNet) -> None:
    body = {
        "solution": policy.space.solution,
        "input_dim": WS_DIM,
        "hidden": HIDDEN,
        "head_sizes": policy.head_sizes,
        "policy": np.concatenate([p.ravel() for p in policy.params()]).tolist(),
        "value": np.concatenate([p.ravel() for p in value.params()]).tolist(),
    }
    artifacts.write_json(path, WEIGHTS_KIND, body)


def load_weights(path: str, space: ParamSpace) -> tuple[PolicyNet, ValueNet]:
    doc = artifacts.read_json(path, WEIGHTS_KIND)
    head_sizes = [len(s.candidates) for s in space.specs]
    if doc["head_sizes"] != head_sizes or doc["input_dim"] != WS_DIM or doc["hidden"] != HIDDEN:
        raise artifacts.ArtifactError(
            f"{path}: weight shapes {doc['head_sizes']} do not match "
            f"space {space.solution!r} ({head_sizes})"
        )
    policy = PolicyNet(space)
    value = ValueNet()
    for net, key in ((policy, "policy"), (value, "value")):
        flat = np.asarray(doc[key], dtype=np.float64)
        if not np.all(np.isfinite(flat)):
            raise artifacts.ArtifactError(f"{path}: non-finite weights in {key}")
        expected = net.n_params()
        if flat.size != expected:
            raise artifacts.ArtifactError(
                f"{path}: {key} has {flat.size} values, expected {expected}"
            )
        pos = 0
        for p in net.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
    return policy, value
