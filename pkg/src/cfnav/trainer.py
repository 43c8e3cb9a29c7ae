"""Asynchronous advantage actor-critic training with staged collision penalty.

Each worker follows the per-thread A3C loop: claim an episode index from
the shared counter, roll segments of at most ``t_max`` steps against a
synchronised local copy of the shared parameters, accumulate gradients and
apply them to the shared store with Adam.

Method variants differ only in three switches, evaluated per stage:
whether the collision module is trained, whether its prediction is fed to
the policy, and which collision penalty applies.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
import traceback
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import gridworld as gw
from .gridworld import Action, AgentPose, GridScene
from .navmodel import NavAgent, agent_step, sample_action
from .neuralnet import (
    NonFiniteError,
    ParamBlock,
    adam_step,
    assign_weights,
    bce,
    bce_logit_grad,
    clip_grad_norm,
    flatten_blocks,
    load_weights,
    log_softmax,
    save_weights,
    weights_to_bytes,
)

log = logging.getLogger(__name__)

TRAINLOG_FORMAT = "cfnav-trainlog v1"

STAGE1, STAGE2 = 1, 2


class MethodVariant(str, Enum):
    TWO_STAGE_CP = "TwoStageCP"
    REWARD_ONLY = "RewardOnly"
    SINGLE_STEP = "SingleStep"
    JOINT_CP = "JointCP"
    STAGE_ONLY = "StageOnly"
    CP_ONLY = "CPOnly"
    BASELINE = "Baseline"

    @classmethod
    def parse(cls, value) -> "MethodVariant":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown method {value!r}; choose from {[m.value for m in cls]}")


@dataclass(frozen=True)
class MethodSpec:
    has_cp_module: bool
    shared_encoder: bool
    cp_train: tuple[bool, bool]  # (stage 1, stage 2)
    feed_p: tuple[bool, bool]
    penalty: tuple[bool, bool]
    default_r_collision: float
    single_step: bool = False


METHODS = {
    MethodVariant.TWO_STAGE_CP: MethodSpec(True, False, (True, False), (False, True), (False, True), -0.5),
    MethodVariant.REWARD_ONLY: MethodSpec(False, False, (False, False), (False, False), (True, True), -0.1),
    MethodVariant.SINGLE_STEP: MethodSpec(False, False, (False, False), (False, False), (True, True), -0.1, True),
    MethodVariant.JOINT_CP: MethodSpec(True, True, (True, True), (True, True), (True, True), -0.1),
    MethodVariant.STAGE_ONLY: MethodSpec(False, False, (False, False), (False, False), (False, True), -0.5),
    MethodVariant.CP_ONLY: MethodSpec(True, False, (True, True), (True, True), (False, False), 0.0),
    MethodVariant.BASELINE: MethodSpec(False, False, (False, False), (False, False), (False, False), 0.0),
}


def method_spec(method) -> MethodSpec:
    return METHODS[MethodVariant.parse(method)]


@dataclass
class TrainConfig:
    E1: int = 20000
    E2: int = 40000
    gamma: float = 0.99
    t_max: int = 20
    max_episode_steps: int = 200
    lr: float = 7e-4
    r_collision: float | None = None  # None: the method's default
    r_success: float = 5.0
    r_step: float = -0.01
    lam: float | None = None  # single-step shaping scale, SingleStep only
    workers: int = 8
    method: MethodVariant = MethodVariant.TWO_STAGE_CP
    seeds: tuple[int, ...] = (0,)
    entropy_beta: float = 0.01
    value_coef: float = 0.5
    cp_loss_weight: float = 1.0
    max_grad_norm: float = 40.0
    policy_hidden: int = 64
    done_logit_init: float = -3.0
    collision_hidden: int = 32
    obs_noise: float = gw.DEFAULT_NOISE_SIGMA
    exclude_visible_starts: bool = True
    snapshot_interval: int = 0
    debug_steps: bool = False

    def __post_init__(self):
        self.method = MethodVariant.parse(self.method)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.E1 < 0 or self.E2 < 0:
            raise ValueError("E1 and E2 must be >= 0")
        if self.E1 + self.E2 < 1:
            raise ValueError("E1 + E2 must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if self.lam is not None and self.method is not MethodVariant.SINGLE_STEP:
            raise ValueError("lam is only valid for method SingleStep")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")

    @property
    def total_episodes(self) -> int:
        return self.E1 + self.E2

    @property
    def spec(self) -> MethodSpec:
        return METHODS[self.method]

    @property
    def collision_reward(self) -> float:
        return self.spec.default_r_collision if self.r_collision is None else self.r_collision

    @property
    def shaping_scale(self) -> float:
        return 0.01 if self.lam is None else self.lam

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["seeds"] = list(self.seeds)
        return d


TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


# --------------------------------------------------------------------------
# schedule and reward

def stage_of(E: int, cfg: TrainConfig) -> int:
    if not 0 <= E < cfg.total_episodes:
        raise ValueError(f"episode index {E} outside [0, {cfg.total_episodes})")
    return STAGE1 if E < cfg.E1 else STAGE2


@dataclass(frozen=True)
class StepEvent:
    collided: bool = False
    success_done: bool = False
    failed_done: bool = False
    d_prev: float | None = None
    d_cur: float | None = None


def reward(event: StepEvent, stage: int, cfg: TrainConfig, method=None) -> float:
    """Original reward plus the method/stage gated collision and shaping terms."""
    spec = cfg.spec if method is None else method_spec(method)
    r = cfg.r_success if event.success_done else cfg.r_step
    if event.collided and spec.penalty[stage - 1]:
        r += cfg.r_collision if cfg.r_collision is not None else spec.default_r_collision
    if spec.single_step:
        if event.d_prev is None or event.d_cur is None:
            raise ValueError("single-step shaping needs d_prev and d_cur")
        r += cfg.shaping_scale * (event.d_prev - event.d_cur)
    return r


def compute_returns(rewards, bootstrap: float, gamma: float) -> list[float]:
    if len(rewards) == 0:
        raise ValueError("rewards must be non-empty")
    out = [0.0] * len(rewards)
    R = bootstrap
    for i in range(len(rewards) - 1, -1, -1):
        R = rewards[i] + gamma * R
        out[i] = R
    return out


# --------------------------------------------------------------------------
# gradients

@dataclass
class Segment:
    """One unroll of at most ``t_max`` steps with everything backprop needs."""

    stage: int
    policy_caches: list = field(default_factory=list)
    collision_caches: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    collided: list = field(default_factory=list)
    p_hat: list = field(default_factory=list)
    bootstrap: float = 0.0

    def __len__(self):
        return len(self.actions)


@dataclass
class SegmentStats:
    policy_loss: float
    value_loss: float
    entropy: float
    cp_loss: float | None
    cp_terms: int
    phi_grad_norm: float
    per_step_phi_norm: list | None = None


def cp_window_open(spec: MethodSpec, stage: int) -> bool:
    return spec.has_cp_module and spec.cp_train[stage - 1]


def segment_loss_terms(logits: np.ndarray, values: np.ndarray, actions: np.ndarray,
                       returns: np.ndarray, advantages: np.ndarray, cfg: TrainConfig):
    """Scalar loss pieces for a segment; ``advantages`` are held constant."""
    logp = log_softmax(logits.astype(np.float64))
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    idx = np.arange(len(actions))
    policy_loss = float(-(logp[idx, actions] * advantages).sum())
    delta = returns - values
    value_loss = float(cfg.value_coef * (delta ** 2).sum())
    return policy_loss, value_loss, float(ent.sum())


def accumulate_gradients(segment: Segment, agent: NavAgent, cfg: TrainConfig,
                         per_step_phi: bool = False) -> SegmentStats:
    """Add this segment's loss gradients to the agent's parameter blocks.

    Loss = sum_i [-log pi(a_i) A_i - beta H(pi_i) + c_v (R_i - V_i)^2]
           + w_c * sum over MoveAhead steps of BCE(collided, p_hat)
    where the BCE sum is present only while the method's CP window is open.
    """
    spec = cfg.spec
    T = len(segment)
    actions = np.asarray(segment.actions, dtype=np.int64)
    values = np.asarray(segment.values, dtype=np.float64)
    returns = np.asarray(compute_returns(segment.rewards, segment.bootstrap, cfg.gamma))
    adv = returns - values
    logits = np.stack(segment.logits).astype(np.float64)
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(T), actions] = 1.0
    dlogits = (p - onehot) * adv[:, None] + cfg.entropy_beta * p * (logp + ent[:, None])
    dvalues = -2.0 * cfg.value_coef * adv
    policy_loss = float(-(logp[np.arange(T), actions] * adv).sum())
    value_loss = float(cfg.value_coef * (adv ** 2).sum())
    entropy = float(ent.sum())

    cp_loss = None
    cp_terms = 0
    phi_norm = 0.0
    per_step = None
    dz_extra = None
    if agent.collision is not None and cp_window_open(spec, segment.stage):
        mask = actions == int(Action.MOVE_AHEAD)
        cp_terms = int(mask.sum())
        if cp_terms:
            p_hat = np.asarray(segment.p_hat, dtype=np.float64)
            labels = np.asarray(segment.collided, dtype=np.float64)
            dlogit_c = np.where(mask, bce_logit_grad(labels, p_hat), 0.0) * cfg.cp_loss_weight
            cp_loss = float(cfg.cp_loss_weight * bce(labels[mask], p_hat[mask]).sum())
            if per_step_phi:
                per_step = _per_step_phi_norms(agent, segment.collision_caches, dlogit_c)
            before = [b.grad.copy() for b in agent.collision_params]
            dx = agent.collision.backward(segment.collision_caches, dlogit_c)
            phi_norm = float(np.sqrt(sum(float(np.sum((b.grad - g0) ** 2))
                                         for b, g0 in zip(agent.collision_params, before))))
            if agent.shared_encoder:
                dz_extra = dx[:, : agent.policy.encoder_size]
    if per_step_phi and per_step is None:
        per_step = [0.0] * T
    for v in (policy_loss, value_loss, entropy) + ((cp_loss,) if cp_loss is not None else ()):
        if not math.isfinite(v):
            raise NonFiniteError("non-finite segment loss")
    agent.policy.backward(segment.policy_caches, dlogits, dvalues, dz_extra)
    return SegmentStats(policy_loss, value_loss, entropy, cp_loss, cp_terms, phi_norm, per_step)


def _per_step_phi_norms(agent: NavAgent, caches, dlogit_c: np.ndarray) -> list[float]:
    """Norm of each step's own contribution to the collision-module gradient."""
    blocks = agent.collision_params
    saved = [b.grad.copy() for b in blocks]
    norms = []
    for i in range(len(dlogit_c)):
        for b in blocks:
            b.grad.fill(0.0)
        single = np.zeros_like(dlogit_c)
        single[i] = dlogit_c[i]
        agent.collision.backward(caches, single)
        norms.append(float(np.sqrt(sum(float(np.sum(b.grad.astype(np.float64) ** 2)) for b in blocks))))
    for b, g in zip(blocks, saved):
        b.grad[...] = g
    return norms


# --------------------------------------------------------------------------
# shared parameter store

def group_of(name: str) -> str:
    return "collision" if name.startswith("collision.") else "policy"


class SharedStore:
    """Global parameters, Adam moments and the episode counter.

    Blocks are grouped into the actor-critic parameters and the collision
    module; each group is one contiguous buffer with its own lock, so an
    update is atomic per group (hence per block).  With ``shared=True`` the
    buffers live in shared memory visible to forked workers.  The collision
    group is frozen (updates dropped) once the counter reaches ``freeze_at``.
    """

    def __init__(self, blocks: list[ParamBlock], total_episodes: int,
                 freeze_at: int | None = None, shared: bool = False):
        self.names = [b.name for b in blocks]
        self.shapes = [b.value.shape for b in blocks]
        self.total = total_episodes
        self.freeze_at = freeze_at
        self.frozen_prefix = "collision."
        self.shared = shared
        ctx = mp.get_context("fork") if shared else None
        self.groups: dict[str, list[int]] = {}
        for i, n in enumerate(self.names):
            self.groups.setdefault(group_of(n), []).append(i)
        self._arrays = {}
        self._steps = {}
        self._locks = {}
        for g, idx in self.groups.items():
            size = sum(blocks[i].value.size for i in idx)
            trip = []
            for attr in ("value", "adam_m", "adam_v"):
                if shared:
                    arr = np.frombuffer(ctx.RawArray("f", size), dtype=np.float32)
                else:
                    arr = np.empty(size, dtype=np.float32)
                arr[...] = np.concatenate([getattr(blocks[i], attr).ravel() for i in idx])
                trip.append(arr)
            self._arrays[g] = trip
            steps = np.frombuffer(ctx.RawArray("q", 1), dtype=np.int64) if shared else np.zeros(1, np.int64)
            steps[0] = blocks[idx[0]].step_count
            self._steps[g] = steps
            self._locks[g] = ctx.Lock() if shared else nullcontext()
        if shared:
            self._counter = ctx.Value("q", 0)
            self._frozen = ctx.Value("b", 0, lock=False)
        else:
            self._counter = None
            self._count = 0
            self._frozen_flag = False
        self.frozen_bytes = None

    # counter ------------------------------------------------------------
    def claim_episode(self) -> int | None:
        """Atomic fetch-increment; ``None`` once every index is claimed."""
        if self.shared:
            with self._counter.get_lock():
                E = self._counter.value
                if E >= self.total:
                    return None
                self._counter.value = E + 1
                if self.freeze_at is not None and E >= self.freeze_at and not self._frozen.value:
                    self._frozen.value = 1
        else:
            E = self._count
            if E >= self.total:
                return None
            self._count = E + 1
            if self.freeze_at is not None and E >= self.freeze_at:
                self._frozen_flag = True
        return E

    @property
    def episodes_claimed(self) -> int:
        return self._counter.value if self.shared else self._count

    @property
    def frozen(self) -> bool:
        return bool(self._frozen.value) if self.shared else self._frozen_flag

    def is_frozen_group(self, group: str) -> bool:
        return group == "collision" and self.frozen

    # parameters ---------------------------------------------------------
    def sync_into(self, local: dict[str, ParamBlock]) -> None:
        """Copy the global values into a worker's flattened local groups."""
        for g, flat in local.items():
            with self._locks[g]:
                flat.value[...] = self._arrays[g][0]

    def apply(self, local: dict[str, ParamBlock], lr: float) -> None:
        """Adam-apply each local group's gradient to the global parameters."""
        for g, flat in local.items():
            with self._locks[g]:
                if self.is_frozen_group(g):
                    flat.zero_grad()
                    continue
                val, m, v = self._arrays[g]
                blk = ParamBlock(g, val, flat.grad, m, v, int(self._steps[g][0]))
                adam_step(blk, lr)
                self._steps[g][0] = blk.step_count

    def blocks(self) -> list[ParamBlock]:
        """Consistent per-block copies of the global state."""
        out = [None] * len(self.names)
        for g, idx in self.groups.items():
            with self._locks[g]:
                val, m, v = (a.copy() for a in self._arrays[g])
                step = int(self._steps[g][0])
            off = 0
            for i in idx:
                shape = self.shapes[i]
                k = int(np.prod(shape))
                out[i] = ParamBlock(self.names[i], val[off:off + k].reshape(shape), None,
                                    m[off:off + k].reshape(shape), v[off:off + k].reshape(shape), step)
                off += k
        return out

    def save(self, path) -> None:
        save_weights(self.blocks(), path)

    def block_bytes(self, prefix: str) -> bytes:
        return weights_to_bytes([b for b in self.blocks() if b.name.startswith(prefix)])

    def any_nonfinite(self) -> bool:
        return any(not np.all(np.isfinite(a)) for trip in self._arrays.values() for a in trip)


# --------------------------------------------------------------------------
# rng streams

STREAMS = {"init": 0, "scene": 1, "start": 2, "goal": 3, "policy": 4, "noise": 5}


def rng_stream(seed: int, name: str, worker: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], int(worker)]))


def sample_start(scene: GridScene, goal: int, rng: np.random.Generator,
                 exclude_visible: bool = True) -> AgentPose:
    """Uniform free cell and heading, pitch 0.

    With ``exclude_visible`` the cell must not see the goal under any
    heading, so every episode needs travel (optimal length > 0).
    """
    cells = scene.free_cells()
    if exclude_visible:
        dist = gw.distance_field(scene, goal)
        cells = [c for c in cells if dist[c[1], c[0]] > 0] or cells
    x, y = cells[int(rng.integers(len(cells)))]
    return AgentPose(x, y, gw.HEADINGS[int(rng.integers(8))], 0)


def build_agent(cfg: TrainConfig, n_classes: int, rng: np.random.Generator | None = None,
                dtype=np.float32) -> NavAgent:
    spec = cfg.spec
    return NavAgent.build(gw.sensor_size(n_classes), n_classes, with_collision=spec.has_cp_module,
                          shared_encoder=spec.shared_encoder, policy_hidden=cfg.policy_hidden,
                          collision_hidden=cfg.collision_hidden, rng=rng, dtype=dtype,
                          done_logit_init=cfg.done_logit_init)


# --------------------------------------------------------------------------
# worker

class WorkerError(RuntimeError):
    pass


@dataclass
class _Env:
    scene: GridScene
    goal: int
    pose: AgentPose
    last_action: Action = Action.DONE  # episode-start sentinel
    t: int = 0
    collisions: int = 0


class Worker:
    """One A3C thread: a local agent copy plus its rng streams."""

    def __init__(self, worker_id: int, store: SharedStore, cfg: TrainConfig,
                 scene_pool: list[GridScene], seed: int, writer, snapshot_dir: Path | None = None):
        self.id = worker_id
        self.store = store
        self.cfg = cfg
        self.pool = scene_pool
        self.writer = writer
        self.snapshot_dir = snapshot_dir
        n_classes = scene_pool[0].n_classes
        self.agent = build_agent(cfg, n_classes)
        if [b.name for b in self.agent.params] != store.names:
            raise WorkerError(f"worker {worker_id}: agent blocks do not match store")
        self.local = {"policy": flatten_blocks(self.agent.policy.params, "policy")}
        if self.agent.collision is not None:
            self.local["collision"] = flatten_blocks(self.agent.collision_params, "collision")
        self.rng = {k: rng_stream(seed, k, worker_id) for k in STREAMS if k != "init"}

    def _observe(self, env: _Env):
        return gw.observe(env.scene, env.pose, env.last_action, env.goal,
                          self.rng["noise"], self.cfg.obs_noise)

    def _forward(self, obs, state, stage: int, record: bool):
        return agent_step(self.agent, obs, state, self.cfg.spec.feed_p[stage - 1], advance=record)

    def run(self) -> None:
        while True:
            E = self.store.claim_episode()
            if E is None:
                return
            self._maybe_snapshot(E)
            self.run_episode(E)

    def _maybe_snapshot(self, E: int) -> None:
        cfg = self.cfg
        if self.store.freeze_at is not None and E == self.store.freeze_at:
            self.store.frozen_bytes = self.store.block_bytes(self.store.frozen_prefix)
            if self.snapshot_dir is not None:
                self.store.save(self.snapshot_dir / f"freeze_E{E}.cfw")
        if self.snapshot_dir is None:
            return
        if cfg.snapshot_interval > 0 and E > 0 and E % cfg.snapshot_interval == 0:
            self.store.save(self.snapshot_dir / f"ep_{E:07d}.cfw")

    def run_episode(self, E: int) -> dict:
        cfg, spec = self.cfg, self.cfg.spec
        stage = stage_of(E, cfg)
        scene = self.pool[int(self.rng["scene"].integers(len(self.pool)))]
        goal = int(self.rng["goal"].integers(scene.n_classes))
        pose = sample_start(scene, goal, self.rng["start"], cfg.exclude_visible_starts)
        env = _Env(scene, goal, pose)
        state = self.agent.reset()
        dist = gw.distance_field(scene, goal) if spec.single_step else None
        ep_return = 0.0
        cp_losses = []
        success = False
        ended = False
        obs = self._observe(env)
        debug = cfg.debug_steps
        while not ended:
            self.store.sync_into(self.local)
            seg = Segment(stage)
            step_rows = []
            while True:
                logits, value, p_hat, p_in, pcache, ccache = self._forward(obs, state, stage, True)
                a = sample_action(logits, self.rng["policy"])
                out = gw.step(scene, env.pose, a)
                success_done = a is Action.DONE and gw.is_visible(scene, env.pose, goal)
                failed_done = a is Action.DONE and not success_done
                d_prev = d_cur = None
                if dist is not None:
                    d_prev = float(dist[env.pose.y, env.pose.x])
                    d_cur = float(dist[out.new_pose.y, out.new_pose.x])
                event = StepEvent(out.collided, success_done, failed_done, d_prev, d_cur)
                r = reward(event, stage, cfg)
                seg.policy_caches.append(pcache)
                seg.collision_caches.append(ccache)
                seg.actions.append(int(a))
                seg.rewards.append(r)
                seg.values.append(value)
                seg.logits.append(logits)
                seg.collided.append(out.collided)
                seg.p_hat.append(p_hat)
                if debug:
                    step_rows.append({
                        "type": "step", "episode": E, "t": env.t, "stage": stage, "action": int(a),
                        "pose": list(env.pose.as_tuple()), "collided": out.collided,
                        "action_failed": out.action_failed, "success_done": success_done,
                        "failed_done": failed_done, "d_prev": d_prev, "d_cur": d_cur,
                        "p_hat": p_hat, "p_in": p_in, "reward": r,
                    })
                env.pose = out.new_pose
                env.last_action = a
                env.t += 1
                env.collisions += int(out.collided)
                ep_return += r
                if a is Action.DONE:
                    success = success_done
                    ended = True
                elif env.t >= cfg.max_episode_steps:
                    ended = True
                if ended or len(seg) >= cfg.t_max:
                    break
                obs = self._observe(env)
            if not ended:
                obs = self._observe(env)
                _, seg.bootstrap, _, _, _, _ = self._forward(obs, state, stage, False)
            try:
                stats = accumulate_gradients(seg, self.agent, cfg, per_step_phi=debug)
            except NonFiniteError as exc:
                self._dump_segment(E, seg)
                raise WorkerError(f"worker {self.id}: episode {E}: {exc}") from exc
            for flat in self.local.values():
                clip_grad_norm([flat], cfg.max_grad_norm)
            if stats.cp_loss is not None:
                cp_losses.append(stats.cp_loss / max(stats.cp_terms, 1))
            if debug:
                for row, norm in zip(step_rows, stats.per_step_phi_norm):
                    row["phi_grad_norm"] = norm
                    self.writer(row)
                self.writer({"type": "segment", "episode": E, "stage": stage, "steps": len(seg),
                             "cp_terms": stats.cp_terms, "phi_grad_norm": stats.phi_grad_norm})
            self.store.apply(self.local, cfg.lr)
        rec = {
            "type": "episode", "episode": E, "worker": self.id, "stage": stage,
            "scene": scene.id, "goal": goal, "start": list(pose.as_tuple()), "steps": env.t,
            "collisions": env.collisions, "success": success,
            "timeout": not success and env.last_action is not Action.DONE,
            "return": round(ep_return, 6),
        }
        if cp_losses:
            rec["cp_loss"] = round(float(np.mean(cp_losses)), 6)
        self.writer(rec)
        return rec

    def _dump_segment(self, E: int, seg: Segment) -> None:
        base = self.snapshot_dir if self.snapshot_dir is not None else Path.cwd()
        path = base / f"diagnostics_w{self.id}_E{E}.json"
        try:
            path.write_text(json.dumps({
                "episode": E, "worker": self.id, "stage": seg.stage, "actions": seg.actions,
                "rewards": seg.rewards, "values": [float(v) for v in seg.values],
                "logits": [np.asarray(l, dtype=float).tolist() for l in seg.logits],
                "p_hat": seg.p_hat, "collided": seg.collided,
            }, indent=1))
        except OSError:
            log.exception("could not write diagnostics to %s", path)


def run_worker(worker_id: int, store: SharedStore, cfg: TrainConfig, scene_pool: list[GridScene],
               seed: int, writer, snapshot_dir: Path | None = None) -> None:
    try:
        Worker(worker_id, store, cfg, scene_pool, seed, writer, snapshot_dir).run()
    except WorkerError:
        raise
    except Exception as exc:
        raise WorkerError(f"worker {worker_id}: {type(exc).__name__}: {exc}") from exc


# --------------------------------------------------------------------------
# driver

@dataclass
class TrainResult:
    weights_path: Path | None
    log_path: Path | None
    blocks: list[ParamBlock]
    records: list[dict]
    freeze_bytes: bytes | None = None


class _LogWriter:
    def __init__(self, path: Path | None, keep: bool):
        self.fh = open(path, "a") if path is not None else None
        self.keep = keep
        self.records: list[dict] = []

    def __call__(self, rec: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        if self.keep:
            self.records.append(rec)

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _header(cfg: TrainConfig, seed: int, pool: list[GridScene]) -> dict:
    return {"format": TRAINLOG_FORMAT, "seed": seed, "config": cfg.to_dict(),
            "scenes": [s.id for s in pool]}


def _child_main(worker_id, store, cfg, pool, seed, part_path, snapshot_dir, err_q):
    writer = _LogWriter(part_path, keep=False)
    try:
        run_worker(worker_id, store, cfg, pool, seed, writer, snapshot_dir)
    except BaseException as exc:  # reported to the parent and re-raised there
        err_q.put(f"{exc}\n{traceback.format_exc()}")
        writer.close()
        os._exit(3)
    writer.close()
    os._exit(0)


def train(cfg: TrainConfig, scene_pool: list[GridScene], out_dir=None, seed: int | None = None,
          keep_records: bool = True, init_blocks: list[ParamBlock] | None = None) -> TrainResult:
    """Run E1 + E2 episodes across ``cfg.workers`` workers sharing one store.

    Writes ``weights.cfw`` and ``train_log.jsonl`` into ``out_dir`` when
    given.  Single-worker runs are bit-deterministic for a fixed seed.
    """
    if not scene_pool:
        raise ValueError("scene pool is empty")
    if len({s.target_classes for s in scene_pool}) != 1:
        raise ValueError("all scenes in a pool must share one target vocabulary")
    seed = cfg.seeds[0] if seed is None else int(seed)
    out = Path(out_dir) if out_dir is not None else None
    snap_dir = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
    agent = build_agent(cfg, scene_pool[0].n_classes, rng=rng_stream(seed, "init"))
    blocks = agent.params
    if init_blocks is not None:
        assign_weights(blocks, init_blocks)
    freeze_at = cfg.E1 if cfg.method is MethodVariant.TWO_STAGE_CP else None
    shared = cfg.workers > 1
    store = SharedStore(blocks, cfg.total_episodes, freeze_at=freeze_at, shared=shared)
    log_path = out / "train_log.jsonl" if out is not None else None
    if log_path is not None:
        log_path.write_text(json.dumps(_header(cfg, seed, scene_pool)) + "\n")
    records: list[dict] = []
    if not shared:
        writer = _LogWriter(log_path, keep_records)
        try:
            run_worker(0, store, cfg, scene_pool, seed, writer, snap_dir)
        except WorkerError:
            writer.close()
            if out is not None:
                store.save(out / "partial_weights.cfw")
            raise
        writer.close()
        records = writer.records
    else:
        records = _train_parallel(cfg, store, scene_pool, seed, out, snap_dir, log_path, keep_records)
    freeze_bytes = store.frozen_bytes
    freeze_file = snap_dir / f"freeze_E{freeze_at}.cfw" if snap_dir is not None else None
    if freeze_bytes is None and freeze_file is not None and freeze_file.exists():
        frozen = [b for b in load_weights(freeze_file) if b.name.startswith(store.frozen_prefix)]
        freeze_bytes = weights_to_bytes(frozen)
    final = store.blocks()
    weights_path = None
    if out is not None:
        weights_path = out / "weights.cfw"
        save_weights(final, weights_path)
    return TrainResult(weights_path, log_path, final, records, freeze_bytes)


def _train_parallel(cfg, store, pool, seed, out, snap_dir, log_path, keep_records):
    import tempfile

    ctx = mp.get_context("fork")
    tmp = None
    part_dir = out
    if part_dir is None:
        tmp = tempfile.TemporaryDirectory()
        part_dir = Path(tmp.name)
    err_q = ctx.Queue()
    parts = [part_dir / f"train_log.w{w}.part" for w in range(cfg.workers)]
    for p in parts:
        p.write_text("")
    procs = [ctx.Process(target=_child_main,
                         args=(w, store, cfg, pool, seed, parts[w], snap_dir, err_q), daemon=True)
             for w in range(cfg.workers)]
    for p in procs:
        p.start()
    failed = None
    try:
        for p in procs:
            p.join()
            if p.exitcode != 0 and failed is None:
                failed = p
                for q in procs:
                    if q.is_alive():
                        q.terminate()
    except BaseException:
        for q in procs:
            if q.is_alive():
                q.terminate()
        raise
    if failed is not None:
        msg = err_q.get(timeout=5) if not err_q.empty() else f"exit code {failed.exitcode}"
        if out is not None:
            store.save(out / "partial_weights.cfw")
        raise WorkerError(msg)
    records = []
    for p in parts:
        with open(p) as fh:
            records.extend(json.loads(line) for line in fh if line.strip())
        p.unlink()
    records.sort(key=lambda r: r["episode"])
    if log_path is not None:
        with open(log_path, "a") as fh:
            for r in records:
                fh.write(json.dumps(r, separators=(",", ":")) + "\n")
    if tmp is not None:
        tmp.cleanup()
    return records if keep_records else []


def read_train_log(path) -> tuple[dict, list[dict]]:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise ValueError(f"{path}:1: not a training log") from None
        if header.get("format") != TRAINLOG_FORMAT:
            raise ValueError(f"{path}:1: expected format '{TRAINLOG_FORMAT}'")
        recs = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                recs.append(json.loads(line))
            except json.JSONDecodeError:
                raise ValueError(f"{path}:{lineno}: malformed record") from None
    return header, recs


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
