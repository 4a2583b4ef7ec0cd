"""Exit gating: the variance-threshold rule and the learned policy.

Threshold gating continues iterating while the mean predicted variance exceeds
tau_var (ties exit). The learned gate is a two-layer policy over {EXIT,
CONTINUE} trained with REINFORCE: each decision's score is the reward of the
loop it leads to, minus a running-mean baseline. A softmax temperature knob
shifts the exit propensity after training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Tensor, ops
from .diffengine.layers import Linear

EXIT = 0
CONTINUE = 1
ACTION_NAMES = ("EXIT", "CONTINUE")
GATE_HIDDEN = 32


def threshold_gate(mean_var: float, tau_var: float) -> int:
    """CONTINUE iff the mean variance strictly exceeds the threshold."""
    return CONTINUE if mean_var > tau_var else EXIT


class GatePolicy:
    def __init__(self, feature_dim: int, tau: float = 1.0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if tau <= 0:
            raise ValueError(f"gate temperature must be positive, got {tau}")
        self.feature_dim = feature_dim
        self.tau = tau
        self.fc1 = Linear(feature_dim, GATE_HIDDEN, rng=rng, dtype=dtype)
        self.fc2 = Linear(GATE_HIDDEN, 2, rng=rng, dtype=dtype)

    def logits(self, f: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(f)))

    def probs(self, f) -> np.ndarray:
        """Action probabilities, (N, 2) numpy; no gradient."""
        f = f if isinstance(f, Tensor) else Tensor(np.atleast_2d(np.asarray(f)))
        return ops.softmax_temperature(self.logits(f.detach()), self.tau).data

    def params(self):
        return self.fc1.params() + self.fc2.params()


@dataclass
class GateDecision:
    action: int
    log_prob: float
    loop: int
    probs: np.ndarray


@dataclass
class TrajectoryStep:
    f: np.ndarray      # gate input feature at this loop
    action: int
    reward: float      # reward of the loop this action leads to
    loop: int


def gate_decide(f, policy: GatePolicy, rng: np.random.Generator | None = None,
                mode: str = "sample", loop: int = 0) -> GateDecision:
    if mode not in ("sample", "argmax"):
        raise ValueError(f"gate mode must be sample or argmax, got {mode!r}")
    p = policy.probs(f)[0]
    if mode == "argmax":
        action = int(np.argmax(p))
    else:
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        action = int(rng.choice(2, p=p))
    return GateDecision(action, float(np.log(p[action])), loop, p)


def reward(l2d: float, l3d: float, loop: int, per_loop_gflops: float,
           lam: float, cumulative: bool = True) -> float:
    """-lam*(L2D+L3D) minus the compute cost of having looped this far."""
    cost = loop if cumulative else (1.0 if loop > 0 else 0.0)
    return -lam * (l2d + l3d) - cost * per_loop_gflops


class RunningBaseline:
    """Running mean of batch rewards; subtracted to reduce gradient variance."""

    def __init__(self, momentum: float = 0.99):
        self.momentum = momentum
        self.value = 0.0
        self.initialized = False

    def update(self, batch_mean: float):
        if not self.initialized:
            self.value = float(batch_mean)
            self.initialized = True
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * float(batch_mean)


def policy_gradient_update(trajectories, policy: GatePolicy, optimizer,
                           baseline: RunningBaseline | None = None) -> dict:
    """One REINFORCE step over a batch of trajectories.

    Each trajectory is a sequence of TrajectoryStep records. The loss is
    -(1/B) sum over steps of (r - baseline) * log pi(action | f); the baseline
    is updated with the batch mean reward afterwards.
    """
    trajectories = [t for t in trajectories if len(t)]
    if not trajectories:
        raise ValueError("policy update needs at least one non-empty trajectory")
    steps = [s for t in trajectories for s in t]
    f = np.stack([s.f for s in steps]).astype(policy.fc1.weight.dtype)
    rewards = np.array([s.reward for s in steps], dtype=np.float64)
    base = baseline.value if baseline is not None and baseline.initialized else 0.0
    coeff = np.zeros((len(steps), 2), dtype=f.dtype)
    for i, s in enumerate(steps):
        coeff[i, s.action] = rewards[i] - base

    logp = ops.log_softmax(policy.logits(Tensor(f)), policy.tau)
    loss = -ops.sum_(Tensor(coeff) * logp) / float(len(trajectories))
    from .diffengine import backward
    backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    if baseline is not None:
        baseline.update(rewards.mean())
    return {"loss": float(loss.data), "mean_reward": float(rewards.mean()),
            "baseline": base, "steps": len(steps)}
