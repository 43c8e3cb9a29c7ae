"""Policy/value network and collision-prediction network.

PolicyNet: dense+ReLU observation encoder, fusion with the goal one-hot
and a collision-probability scalar, one LSTM layer, actor and critic
heads.  CollisionNet: two LSTM layers and a sigmoid head over the sensor
features (which already carry the last-action one-hot).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridworld import N_ACTIONS, Action, Observation
from .neuralnet import (
    Dense,
    LstmCache,
    LstmCell,
    ParamBlock,
    lstm_backward,
    lstm_forward,
    sigmoid,
    softmax,
)

POLICY_HIDDEN = 64
COLLISION_HIDDEN = 32


@dataclass
class PolicyStepCache:
    sensor: np.ndarray
    z: np.ndarray
    lstm: LstmCache
    h: np.ndarray


@dataclass
class CollisionStepCache:
    x: np.ndarray
    l1: LstmCache
    l2: LstmCache
    h2: np.ndarray
    p_hat: float


class PolicyNet:
    def __init__(self, sensor_size: int, n_classes: int, hidden: int = POLICY_HIDDEN,
                 encoder_size: int | None = None, rng: np.random.Generator | None = None,
                 dtype=np.float32, done_logit_init: float = 0.0):
        enc = hidden if encoder_size is None else encoder_size
        self.sensor_size, self.n_classes, self.hidden, self.encoder_size = sensor_size, n_classes, hidden, enc
        self.encoder = Dense("policy.enc", sensor_size, enc, rng=rng, dtype=dtype)
        self.lstm = LstmCell("policy.lstm", enc + n_classes + 1, hidden, rng=rng, dtype=dtype)
        self.actor = Dense("policy.actor", hidden, N_ACTIONS, rng=rng, scale=0.01, dtype=dtype)
        self.critic = Dense("critic.value", hidden, 1, rng=rng, scale=1.0, dtype=dtype)
        if rng is not None:
            # a low initial Done probability keeps early episodes exploring
            self.actor.b.value[int(Action.DONE)] = done_logit_init

    @property
    def actor_params(self) -> list[ParamBlock]:
        return self.encoder.params + self.lstm.params + self.actor.params

    @property
    def critic_params(self) -> list[ParamBlock]:
        return self.critic.params

    @property
    def params(self) -> list[ParamBlock]:
        return self.actor_params + self.critic_params

    def zero_state(self):
        return self.lstm.zero_state()

    def encode(self, sensor: np.ndarray) -> np.ndarray:
        z = self.encoder(sensor)
        return np.maximum(z, 0.0, out=z)

    def step(self, sensor, goal, p_in, state, z=None):
        """One forward step; returns ``(logits, value, state', cache)``."""
        if z is None:
            z = self.encode(sensor)
        u = np.concatenate((z, goal, np.array([p_in], dtype=z.dtype)))
        h, c, lc = lstm_forward(self.lstm, u, state[0], state[1])
        logits = self.actor(h)
        value = float(self.critic.W.value[0] @ h + self.critic.b.value[0])
        return logits, value, (h, c), PolicyStepCache(sensor, z, lc, h)

    def backward(self, caches: list[PolicyStepCache], dlogits: np.ndarray, dvalues: np.ndarray,
                 dz_extra: np.ndarray | None = None) -> None:
        """Accumulate parameter gradients for a segment.

        ``dlogits`` (T, 6) and ``dvalues`` (T,) are loss gradients w.r.t. the
        heads' outputs; ``dz_extra`` is extra gradient on the encoder output
        (shared-encoder variant).
        """
        dt = self.actor.W.value.dtype
        Hs = np.stack([k.h for k in caches])
        dlogits = dlogits.astype(dt, copy=False)
        dvalues = dvalues.astype(dt, copy=False)
        self.actor.W.grad += dlogits.T @ Hs
        self.actor.b.grad += dlogits.sum(axis=0)
        self.critic.W.grad += dvalues[None, :] @ Hs
        self.critic.b.grad += dvalues.sum(keepdims=True)
        dh_seq = dlogits @ self.actor.W.value + np.outer(dvalues, self.critic.W.value[0])
        dU, _, _ = lstm_backward(self.lstm, [k.lstm for k in caches], dh_seq)
        dz = dU[:, : self.encoder_size]
        if dz_extra is not None:
            dz = dz + dz_extra
        Z = np.stack([k.z for k in caches])
        dz = dz * (Z > 0)
        S = np.stack([k.sensor for k in caches])
        self.encoder.W.grad += dz.T @ S
        self.encoder.b.grad += dz.sum(axis=0)


class CollisionNet:
    def __init__(self, input_size: int, hidden: int = COLLISION_HIDDEN,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.input_size, self.hidden = input_size, hidden
        self.lstm1 = LstmCell("collision.lstm1", input_size, hidden, rng=rng, dtype=dtype)
        self.lstm2 = LstmCell("collision.lstm2", hidden, hidden, rng=rng, dtype=dtype)
        self.head = Dense("collision.head", hidden, 1, rng=rng, scale=1.0, dtype=dtype)

    @property
    def params(self) -> list[ParamBlock]:
        return self.lstm1.params + self.lstm2.params + self.head.params

    def zero_state(self):
        return (self.lstm1.zero_state(), self.lstm2.zero_state())

    def step(self, x, state):
        """Returns ``(p_hat, state', cache)``."""
        (h1, c1), (h2, c2) = state
        h1, c1, l1 = lstm_forward(self.lstm1, x, h1, c1)
        h2, c2, l2 = lstm_forward(self.lstm2, h1, h2, c2)
        logit = float(self.head.W.value[0] @ h2 + self.head.b.value[0])
        p = float(sigmoid(logit))
        return p, ((h1, c1), (h2, c2)), CollisionStepCache(x, l1, l2, h2, p)

    def backward(self, caches: list[CollisionStepCache], dlogit: np.ndarray) -> np.ndarray:
        """Accumulate gradients given d loss / d logit per step; returns d input."""
        dt = self.head.W.value.dtype
        dlogit = dlogit.astype(dt, copy=False)
        H2 = np.stack([k.h2 for k in caches])
        self.head.W.grad += dlogit[None, :] @ H2
        self.head.b.grad += dlogit.sum(keepdims=True)
        dh2 = np.outer(dlogit, self.head.W.value[0])
        dh1, _, _ = lstm_backward(self.lstm2, [k.l2 for k in caches], dh2)
        dx, _, _ = lstm_backward(self.lstm1, [k.l1 for k in caches], dh1)
        return dx


@dataclass
class AgentState:
    policy: tuple = None
    collision: tuple = None


@dataclass
class NavAgent:
    """Policy plus optional collision module.

    ``shared_encoder`` feeds the policy encoder output (instead of the raw
    sensor vector) into the collision module and lets its loss train the
    encoder.
    """

    policy: PolicyNet
    collision: CollisionNet | None = None
    shared_encoder: bool = False

    @classmethod
    def build(cls, sensor_size: int, n_classes: int, with_collision: bool = True,
              shared_encoder: bool = False, policy_hidden: int = POLICY_HIDDEN,
              collision_hidden: int = COLLISION_HIDDEN, rng: np.random.Generator | None = None,
              dtype=np.float32, done_logit_init: float = 0.0) -> "NavAgent":
        policy = PolicyNet(sensor_size, n_classes, policy_hidden, rng=rng, dtype=dtype,
                           done_logit_init=done_logit_init)
        coll = None
        if with_collision:
            n_in = policy.encoder_size + N_ACTIONS if shared_encoder else sensor_size
            coll = CollisionNet(n_in, collision_hidden, rng=rng, dtype=dtype)
        return cls(policy, coll, shared_encoder and with_collision)

    @property
    def params(self) -> list[ParamBlock]:
        return self.policy.params + (self.collision.params if self.collision else [])

    @property
    def collision_params(self) -> list[ParamBlock]:
        return self.collision.params if self.collision else []

    def reset(self) -> AgentState:
        return AgentState(self.policy.zero_state(),
                          self.collision.zero_state() if self.collision else None)

    def collision_input(self, sensor: np.ndarray, z: np.ndarray | None, last_action: np.ndarray):
        if self.shared_encoder:
            return np.concatenate((z, last_action.astype(z.dtype)))
        return sensor


def agent_step(agent: NavAgent, obs: Observation, state: AgentState, feed_p: bool,
               advance: bool = True):
    """Collision module then policy on one observation.

    Returns ``(logits, value, p_hat, p_in, policy_cache, collision_cache)``;
    ``p_hat`` is None without a collision module and ``p_in`` is what the
    policy saw (0 unless ``feed_p``).  ``state`` advances in place when
    ``advance``.
    """
    sensor = obs.sensor
    z = p_hat = ccache = None
    cstate = state.collision
    if agent.collision is not None:
        if agent.shared_encoder:
            z = agent.policy.encode(sensor)
        x = agent.collision_input(sensor, z, obs.last_action)
        p_hat, cstate, ccache = agent.collision.step(x, state.collision)
    p_in = p_hat if (p_hat is not None and feed_p) else 0.0
    logits, value, pstate, pcache = agent.policy.step(sensor, obs.goal, p_in, state.policy, z=z)
    if advance:
        state.policy, state.collision = pstate, cstate
    return logits, value, p_hat, p_in, pcache, ccache


def collision_forward(net: CollisionNet, obs: Observation, last_action: Action, state):
    """Collision probability for MoveAhead from the current observation.

    The sensor block of ``obs`` already encodes ``last_action``; passing a
    different one raises.
    """
    if int(np.argmax(obs.last_action)) != int(last_action):
        raise ValueError("observation encodes a different last action")
    p, state, _ = net.step(obs.sensor.astype(net.lstm1.W.value.dtype), state)
    return p, state


def policy_forward(net: PolicyNet, obs: Observation, goal: np.ndarray, p_in: float, state):
    if not 0.0 <= p_in <= 1.0:
        raise ValueError(f"collision probability input must be in [0, 1], got {p_in}")
    logits, value, state, _ = net.step(obs.sensor, goal, p_in, state)
    return logits, value, state


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> Action:
    p = softmax(logits.astype(np.float64))
    a = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return Action(min(a, N_ACTIONS - 1))


def greedy_action(logits: np.ndarray) -> Action:
    return Action(int(np.argmax(logits)))
