"""DQN loss-weight scheduler: state building, exploration, reward shaping,
prioritized replay, and the Q-network update rules."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

SNR_MAX_DB = 30.0


class AgentError(ValueError):
    pass


def _clip01(x: float) -> float:
    return min(max(float(x), 0.0), 1.0)


@dataclass(frozen=True)
class WeightPair:
    """Loss weights on the probability simplex: lambda_recon + lambda_cls = 1."""

    lambda_recon: float
    lambda_cls: float

    def __post_init__(self):
        if self.lambda_recon < 0 or self.lambda_cls < 0:
            raise AgentError(f"loss weights must be non-negative, got {self}")
        if abs(self.lambda_recon + self.lambda_cls - 1.0) > 1e-6:
            raise AgentError(f"loss weights must sum to 1, got {self}")

    @classmethod
    def from_lambda(cls, lambda_recon: float) -> "WeightPair":
        return cls(lambda_recon, 1.0 - lambda_recon)


@dataclass(frozen=True)
class AgentState:
    """Five-component observation; every entry is clipped to [0, 1]."""

    snr_norm: float
    recon_loss_norm: float
    acc_cls: float
    epoch_progress: float
    prev_lambda_recon: float

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (0.0 <= value <= 1.0):
                raise AgentError(f"state component {name}={value} outside [0, 1]")

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(
            [self.snr_norm, self.recon_loss_norm, self.acc_cls, self.epoch_progress, self.prev_lambda_recon],
            dtype=dtype,
        )


@dataclass
class RewardConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.1
    significance_threshold: float = 0.05
    entropy_window: int = 50
    entropy_bins: int = 10

    def __post_init__(self):
        if self.significance_threshold <= 0:
            raise AgentError("significance threshold must be > 0")
        if self.entropy_window < 1:
            raise AgentError("entropy window must be >= 1")


@dataclass
class Transition:
    state: AgentState
    action: int
    reward: float
    next_state: AgentState


def build_state(
    snr_db: float,
    recon_loss: float,
    recon_loss_ema: float,
    acc: float,
    epoch: int,
    total_epochs: int,
    prev_lambda: float,
    snr_max: float = SNR_MAX_DB,
) -> AgentState:
    if recon_loss_ema <= 0:
        raise AgentError(f"loss EMA must be positive, got {recon_loss_ema}")
    if total_epochs < 1:
        raise AgentError(f"total_epochs must be >= 1, got {total_epochs}")
    return AgentState(
        snr_norm=_clip01(snr_db / snr_max),
        recon_loss_norm=_clip01(recon_loss / recon_loss_ema),
        acc_cls=_clip01(acc),
        epoch_progress=_clip01(epoch / total_epochs),
        prev_lambda_recon=_clip01(prev_lambda),
    )


def epsilon_at(step: int, start: float = 1.0, end: float = 0.05, decay_steps: int = 50_000) -> float:
    if step >= decay_steps:
        return end
    return start + (end - start) * step / decay_steps


def action_grid(n_actions: int = 21) -> torch.Tensor:
    """Discrete lambda_recon values 0, 1/(n-1), ..., 1."""
    return torch.linspace(0.0, 1.0, n_actions)


class QNetwork(nn.Module):
    """State -> positive action values. LeakyReLU hidden, Softplus head."""

    def __init__(self, input_dim: int = 5, n_actions: int = 21, hidden=(64, 32), negative_slope: float = 0.01):
        super().__init__()
        if n_actions < 2:
            raise AgentError("need at least two actions")
        dims = [input_dim, *hidden]
        layers: list[nn.Module] = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(d_in, d_out), nn.LeakyReLU(negative_slope)]
        layers += [nn.Linear(dims[-1], n_actions), nn.Softplus()]
        self.net = nn.Sequential(*layers)
        self.n_actions = n_actions

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def sample_exploration_lambda(rng: torch.Generator) -> float:
    """Mixture: 70% uniform on [0,1], 30% Beta(0.5, 0.5) favoring the edges."""
    pick, u = (float(torch.rand(1, generator=rng)) for _ in range(2))
    if pick < 0.7:
        return u
    return math.sin(math.pi * u / 2.0) ** 2  # inverse-CDF sample of Beta(1/2, 1/2)


def select_action(
    state: AgentState,
    qnet: QNetwork,
    epsilon: float,
    rng: torch.Generator,
    grid: torch.Tensor | None = None,
) -> tuple[WeightPair, int]:
    if grid is None:
        grid = action_grid(qnet.n_actions)
    n = grid.shape[0]
    if float(torch.rand(1, generator=rng)) < epsilon:
        lam = sample_exploration_lambda(rng)
        idx = int(round(lam * (n - 1)))
    else:
        with torch.no_grad():
            q = qnet(state.to_tensor().unsqueeze(0)).squeeze(0)
        idx = int(torch.argmax(q))
    return WeightPair.from_lambda(float(grid[idx])), idx


def weight_entropy(lambdas, bins: int = 10) -> float:
    """Shannon entropy (nats) of the binned recent weight history."""
    if len(lambdas) == 0:
        return 0.0
    edges = torch.linspace(0.0, 1.0, bins + 1)
    values = torch.as_tensor(list(lambdas), dtype=torch.float64)
    idx = torch.clamp(torch.bucketize(values, edges, right=False) - 1, 0, bins - 1)
    counts = torch.bincount(idx, minlength=bins).double()
    p = counts[counts > 0] / counts.sum()
    return float(-(p * p.log()).sum())


def compute_reward(
    prev_loss: float,
    new_loss: float,
    prev_acc: float,
    new_acc: float,
    recent_lambdas,
    cfg: RewardConfig,
) -> float:
    if prev_loss <= 0:
        raise AgentError(f"previous loss must be positive, got {prev_loss}")
    if len(recent_lambdas) > cfg.entropy_window:
        raise AgentError(f"history longer than the {cfg.entropy_window}-action window")
    rel_improvement = (prev_loss - new_loss) / prev_loss
    acc_gain = new_acc - prev_acc
    significant = 1.0 if (rel_improvement > cfg.significance_threshold or acc_gain > cfg.significance_threshold) else 0.0
    entropy = weight_entropy(recent_lambdas, cfg.entropy_bins)
    return cfg.alpha * rel_improvement + cfg.beta * acc_gain + cfg.gamma * significant + cfg.delta * entropy


class ReplayBuffer:
    """Fixed-capacity transition store with priority-proportional sampling."""

    def __init__(self, capacity: int = 10_000, omega: float = 0.6, min_priority: float = 1e-3):
        self.capacity = capacity
        self.omega = omega
        self.min_priority = min_priority
        self._items: list[Transition] = []
        self._priorities: list[float] = []
        self._next = 0  # ring-buffer write position once full

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        priority = max(self._priorities) if self._priorities else 1.0
        if len(self._items) < self.capacity:
            self._items.append(transition)
            self._priorities.append(priority)
        else:
            self._items[self._next] = transition
            self._priorities[self._next] = priority
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: torch.Generator) -> tuple[list[Transition], torch.Tensor, torch.Tensor]:
        """Draw with probability proportional to priority^omega.

        Returns (transitions, indices, sampling probabilities).
        """
        if not self._items:
            raise AgentError("cannot sample from an empty replay buffer")
        weights = torch.tensor(self._priorities, dtype=torch.float64).pow(self.omega)
        probs = weights / weights.sum()
        idx = torch.multinomial(probs, batch_size, replacement=True, generator=rng)
        return [self._items[i] for i in idx.tolist()], idx, probs[idx]

    def update_priorities(self, indices: torch.Tensor, td_errors: torch.Tensor) -> None:
        for i, err in zip(indices.tolist(), td_errors.tolist()):
            self._priorities[i] = max(abs(float(err)), self.min_priority)

    def state_dict(self) -> dict:
        return {
            "items": [(t.state, t.action, t.reward, t.next_state) for t in self._items],
            "priorities": list(self._priorities),
            "next": self._next,
        }

    def load_state_dict(self, state: dict) -> None:
        self._items = [Transition(s, a, r, ns) for s, a, r, ns in state["items"]]
        self._priorities = list(state["priorities"])
        self._next = state["next"]


def _batch_tensors(batch: list[Transition], dtype=torch.float32):
    states = torch.stack([t.state.to_tensor(dtype) for t in batch])
    actions = torch.tensor([t.action for t in batch], dtype=torch.int64)
    rewards = torch.tensor([t.reward for t in batch], dtype=dtype)
    next_states = torch.stack([t.next_state.to_tensor(dtype) for t in batch])
    return states, actions, rewards, next_states


def dqn_update(
    batch: list[Transition],
    qnet: nn.Module,
    target_net: nn.Module,
    optimizer: torch.optim.Optimizer,
    gamma: float = 0.99,
) -> torch.Tensor:
    """One TD step on the policy net; returns |TD error| per sample."""
    if not batch:
        raise AgentError("dqn_update needs a non-empty batch")
    states, actions, rewards, next_states = _batch_tensors(batch)
    q = qnet(states).gather(1, actions.unsqueeze(1)).squeeze(1)
    with torch.no_grad():
        target = rewards + gamma * target_net(next_states).max(dim=1).values
    td = q - target
    loss = td.square().mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return td.detach().abs()


def polyak_update(qnet: nn.Module, target_net: nn.Module, tau: float = 0.005) -> None:
    """target <- tau * policy + (1 - tau) * target, parameter-wise."""
    with torch.no_grad():
        for p_t, p in zip(target_net.parameters(), qnet.parameters()):
            p_t.mul_(1.0 - tau).add_(p, alpha=tau)
        for b_t, b in zip(target_net.buffers(), qnet.buffers()):
            b_t.copy_(b)


@dataclass
class AgentConfig:
    enabled: bool = True
    n_actions: int = 21
    hidden: tuple[int, int] = (64, 32)
    negative_slope: float = 0.01
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 1e-3
    buffer_capacity: int = 10_000
    batch_size: int = 64
    omega: float = 0.6
    min_priority: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 50_000
    loss_ema_decay: float = 0.99
    reward: RewardConfig = field(default_factory=RewardConfig)
    static_lambda_recon: float = 0.5  # used when enabled=False


class WeightScheduler:
    """Owns the policy/target nets, replay, and per-step bookkeeping.

    Call pattern per training batch: ``act`` before the batch (returns the
    weights), ``observe`` after the batch's metrics are known. Rewards are
    computed from consecutive batch metrics; transitions are completed at the
    following ``act`` call, when the successor state is actually built.
    """

    def __init__(self, cfg: AgentConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = torch.Generator().manual_seed(seed)
        self.qnet = QNetwork(5, cfg.n_actions, cfg.hidden, cfg.negative_slope)
        self.target = QNetwork(5, cfg.n_actions, cfg.hidden, cfg.negative_slope)
        self.target.load_state_dict(self.qnet.state_dict())
        self.optimizer = torch.optim.Adam(self.qnet.parameters(), lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, cfg.omega, cfg.min_priority)
        self.grid = action_grid(cfg.n_actions)
        self.step = 0
        self.recent_lambdas: deque[float] = deque(maxlen=cfg.reward.entropy_window)
        self.loss_ema: float | None = None
        self.last_loss: float | None = None
        self.last_acc: float = 0.0
        self.prev_lambda: float = cfg.static_lambda_recon
        self._pending: tuple[AgentState, int] | None = None
        self._pending_reward: float | None = None
        self.last_reward: float = 0.0
        self.last_epsilon: float = cfg.epsilon_start

    def _state(self, snr_db: float, epoch: int, total_epochs: int) -> AgentState:
        loss = self.last_loss if self.last_loss is not None else 1.0
        ema = self.loss_ema if self.loss_ema is not None else max(loss, 1e-8)
        return build_state(snr_db, loss, ema, self.last_acc, epoch, total_epochs, self.prev_lambda)

    def act(self, snr_db: float, epoch: int, total_epochs: int) -> WeightPair:
        state = self._state(snr_db, epoch, total_epochs)
        if self._pending is not None and self._pending_reward is not None:
            prev_state, action = self._pending
            self.buffer.push(Transition(prev_state, action, self._pending_reward, state))
            self._learn()
        epsilon = epsilon_at(self.step, self.cfg.epsilon_start, self.cfg.epsilon_end, self.cfg.epsilon_decay_steps)
        weights, idx = select_action(state, self.qnet, epsilon, self.rng, self.grid)
        self.last_epsilon = epsilon
        self._pending = (state, idx)
        self._pending_reward = None
        self.recent_lambdas.append(weights.lambda_recon)
        self.prev_lambda = weights.lambda_recon
        self.step += 1
        return weights

    def observe(self, recon_loss: float, acc: float) -> float:
        """Record batch metrics; returns the reward credited to the last action."""
        reward = 0.0
        if self.last_loss is not None and self.last_loss > 0:
            reward = compute_reward(
                self.last_loss, recon_loss, self.last_acc, acc, list(self.recent_lambdas), self.cfg.reward
            )
        self._pending_reward = reward
        self.last_reward = reward
        self.last_loss = recon_loss
        self.last_acc = acc
        decay = self.cfg.loss_ema_decay
        self.loss_ema = recon_loss if self.loss_ema is None else decay * self.loss_ema + (1 - decay) * recon_loss
        return reward

    def _learn(self) -> None:
        if len(self.buffer) < self.cfg.batch_size:
            return
        batch, idx, _ = self.buffer.sample(self.cfg.batch_size, self.rng)
        td = dqn_update(batch, self.qnet, self.target, self.optimizer, self.cfg.gamma)
        self.buffer.update_priorities(idx, td)
        polyak_update(self.qnet, self.target, self.cfg.tau)

    def state_dict(self) -> dict:
        return {
            "qnet": self.qnet.state_dict(),
            "target": self.target.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "buffer": self.buffer.state_dict(),
            "rng": self.rng.get_state(),
            "step": self.step,
            "recent_lambdas": list(self.recent_lambdas),
            "loss_ema": self.loss_ema,
            "last_loss": self.last_loss,
            "last_acc": self.last_acc,
            "prev_lambda": self.prev_lambda,
            "pending": self._pending,
            "pending_reward": self._pending_reward,
        }

    def load_state_dict(self, state: dict) -> None:
        self.qnet.load_state_dict(state["qnet"])
        self.target.load_state_dict(state["target"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.buffer.load_state_dict(state["buffer"])
        self.rng.set_state(state["rng"])
        self.step = state["step"]
        self.recent_lambdas = deque(state["recent_lambdas"], maxlen=self.cfg.reward.entropy_window)
        self.loss_ema = state["loss_ema"]
        self.last_loss = state["last_loss"]
        self.last_acc = state["last_acc"]
        self.prev_lambda = state["prev_lambda"]
        self._pending = state["pending"]
        self._pending_reward = state["pending_reward"]
