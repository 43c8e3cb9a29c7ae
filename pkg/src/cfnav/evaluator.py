"""Greedy evaluation episodes, trajectory records and navigation metrics.

SR counts Done issued while the goal is visible; SPL weights each success
by optimal over actual path length.  The collision-free variants (CF-SR,
CF-SPL) additionally require that no MoveAhead collided.
"""
from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gridworld as gw
from .gridworld import Action, AgentPose, GridScene
from .navmodel import NavAgent, agent_step, greedy_action, sample_action
from .neuralnet import assign_weights, load_weights
from .trainer import STREAMS, MethodVariant, TrainConfig, build_agent, method_spec, sample_start

EPISODES_FORMAT = "cfnav-episodes v1"
METRICS_FORMAT = "cfnav-metrics v1"
METRICS_CSV_FORMAT = "# cfnav-metrics-csv v1"
CURVES_FORMAT = "# cfnav-curves v1"
METRIC_NAMES = ("SR", "SPL", "CF_SR", "CF_SPL")
CURVE_WINDOW = 200
_EVAL_TAG = 7  # keeps evaluation streams apart from training streams


class ReplayError(AssertionError):
    pass


# --------------------------------------------------------------------------
# records

@dataclass(frozen=True)
class StepRecord:
    pose: tuple[int, int, int, int]  # before the action
    action: int
    collided: bool
    action_failed: bool
    p_in: float


@dataclass
class EpisodeRecord:
    scene_id: str
    goal: int
    start: tuple[int, int, int, int]
    steps: list[StepRecord] = field(default_factory=list)
    done_success: bool = False
    optimal_length: float = 0.0
    path_length: float = 0.0
    seed: int | None = None

    @property
    def step_count(self) -> int:
        return len(self.steps)

    @property
    def any_collision(self) -> bool:
        return any(s.collided for s in self.steps)

    @property
    def collisions(self) -> int:
        return sum(s.collided for s in self.steps)

    def check(self) -> None:
        """Raise ValueError on internally inconsistent records."""
        if self.done_success and (not self.steps or self.steps[-1].action != int(Action.DONE)):
            raise ValueError("done_success requires a final Done action")
        if self.path_length < 0 or self.optimal_length < 0:
            raise ValueError("path lengths must be non-negative")

    def to_dict(self) -> dict:
        return {
            "scene": self.scene_id, "goal": self.goal, "start": list(self.start), "seed": self.seed,
            "done_success": self.done_success, "any_collision": self.any_collision,
            "path_length": self.path_length, "optimal_length": self.optimal_length,
            "step_count": self.step_count,
            "steps": [[*s.pose, s.action, int(s.collided), int(s.action_failed), s.p_in]
                      for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        steps = [StepRecord(tuple(int(v) for v in row[:4]), int(row[4]), bool(row[5]),
                            bool(row[6]), float(row[7])) for row in d["steps"]]
        return cls(d["scene"], int(d["goal"]), tuple(int(v) for v in d["start"]), steps,
                   bool(d["done_success"]), float(d["optimal_length"]), float(d["path_length"]),
                   d.get("seed"))


# --------------------------------------------------------------------------
# episodes

def run_episode(agent: NavAgent, scene: GridScene, start: AgentPose, goal: int,
                max_steps: int = 200, feed_p: bool = False,
                noise_rng: np.random.Generator | None = None, noise_sigma: float = 0.0,
                policy_rng: np.random.Generator | None = None) -> EpisodeRecord:
    """Roll one episode; greedy unless ``policy_rng`` is given."""
    if not scene.is_free(start.x, start.y):
        raise ValueError(f"start ({start.x}, {start.y}) is not a free cell")
    opt = gw.shortest_path_length(scene, start, goal)
    rec = EpisodeRecord(scene.id, goal, start.as_tuple(), optimal_length=opt)
    state = agent.reset()
    pose, last = start, Action.DONE
    for _ in range(max_steps):
        obs = gw.observe(scene, pose, last, goal, noise_rng, noise_sigma)
        logits, _, _, p_in, _, _ = agent_step(agent, obs, state, feed_p)
        a = greedy_action(logits) if policy_rng is None else sample_action(logits, policy_rng)
        out = gw.step(scene, pose, a)
        rec.steps.append(StepRecord(pose.as_tuple(), int(a), out.collided, out.action_failed,
                                    float(p_in)))
        if a is Action.MOVE_AHEAD and not out.collided:
            rec.path_length += scene.move_length(pose.heading)
        if a is Action.DONE:
            rec.done_success = gw.is_visible(scene, pose, goal)
            break
        pose, last = out.new_pose, a
    return rec


def replay(record: EpisodeRecord, scene: GridScene) -> None:
    """Re-simulate ``record`` and raise ReplayError on the first divergence."""
    if scene.id != record.scene_id:
        raise ReplayError(f"record is for scene {record.scene_id}, got {scene.id}")
    pose = AgentPose(*record.start)
    length = 0.0
    for t, s in enumerate(record.steps):
        if s.pose != pose.as_tuple():
            raise ReplayError(f"step {t}: pose {s.pose} != simulated {pose.as_tuple()}")
        out = gw.step(scene, pose, Action(s.action))
        if out.collided != s.collided or out.action_failed != s.action_failed:
            raise ReplayError(f"step {t}: collision flags differ from simulation")
        if s.action == Action.MOVE_AHEAD and not out.collided:
            length += scene.move_length(pose.heading)
        if s.action == Action.DONE:
            if t != len(record.steps) - 1:
                raise ReplayError(f"step {t}: Done before the last step")
            if gw.is_visible(scene, pose, record.goal) != record.done_success:
                raise ReplayError("done_success disagrees with visibility at Done")
        pose = out.new_pose
    if record.done_success and (not record.steps or record.steps[-1].action != Action.DONE):
        raise ReplayError("done_success without a final Done")
    if not math.isclose(length, record.path_length, rel_tol=0, abs_tol=1e-9):
        raise ReplayError(f"path length {record.path_length} != replayed {length}")


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Metrics:
    n: int
    sr: float
    spl: float
    cf_sr: float
    cf_spl: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.sr, self.spl, self.cf_sr, self.cf_spl


@dataclass
class MetricsReport:
    """Per-trial metrics with mean and population std across trials."""

    trials: list[Metrics]
    seeds: list[int | None] = field(default_factory=list)

    @property
    def n(self) -> int:
        return sum(t.n for t in self.trials)

    def values(self, name: str) -> np.ndarray:
        i = METRIC_NAMES.index(name)
        return np.array([t.as_tuple()[i] for t in self.trials])

    def mean(self, name: str) -> float:
        return float(self.values(name).mean())

    def std(self, name: str) -> float:
        return float(self.values(name).std())

    sr = property(lambda self: self.mean("SR"))
    spl = property(lambda self: self.mean("SPL"))
    cf_sr = property(lambda self: self.mean("CF_SR"))
    cf_spl = property(lambda self: self.mean("CF_SPL"))


def spl_ratio(optimal: float, actual: float, zero_floor: float | None = 0.25) -> float:
    """d* / max(d*, d), with d* floored at ``zero_floor`` when it is 0 and d > 0.

    ``zero_floor=None`` keeps the bare formula (ratio 0 whenever d* = 0 < d).
    """
    if optimal == 0.0:
        if actual == 0.0:
            return 1.0
        if zero_floor is None:
            return 0.0
        optimal = zero_floor
    return optimal / max(optimal, actual)


def compute_metrics(records: list[EpisodeRecord], zero_floor: float | None = 0.25) -> MetricsReport:
    if not records:
        raise ValueError("cannot compute metrics of an empty record list")
    n = len(records)
    s = np.array([r.done_success for r in records], dtype=bool)
    cf = s & ~np.array([r.any_collision for r in records], dtype=bool)
    ratio = np.array([spl_ratio(r.optimal_length, r.path_length, zero_floor) for r in records])
    m = Metrics(n, float(s.mean()), float((s * ratio).sum() / n),
                float(cf.mean()), float((cf * ratio).sum() / n))
    seed = records[0].seed if len({r.seed for r in records}) == 1 else None
    return MetricsReport([m], [seed])


def merge_reports(reports: list[MetricsReport]) -> MetricsReport:
    return MetricsReport([t for r in reports for t in r.trials], [s for r in reports for s in r.seeds])


# --------------------------------------------------------------------------
# evaluation protocol

@dataclass
class EvalConfig:
    episodes_per_scene: int = 20
    seeds: tuple[int, ...] = (0,)
    max_steps: int = 200
    obs_noise: float = gw.DEFAULT_NOISE_SIGMA
    exclude_visible_starts: bool = True
    spl_zero_floor: float | None = 0.25
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.episodes_per_scene < 1:
            raise ValueError("episodes_per_scene must be >= 1")
        if not self.seeds:
            raise ValueError("at least one evaluation seed is required")
        if self.max_steps < 1 or self.workers < 1:
            raise ValueError("max_steps and workers must be >= 1")


def episode_rng(seed: int, name: str, scene_index: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed), STREAMS[name], _EVAL_TAG, scene_index, k]))


def agent_from_weights(path, method, n_classes: int) -> NavAgent:
    """Build the method's agent with sizes read from the weight file."""
    blocks = {b.name: b for b in load_weights(path)}
    for key in ("policy.actor.W", "policy.enc.W"):
        if key not in blocks:
            raise ValueError(f"{path}: weight block {key} missing")
    spec = method_spec(method)
    if spec.has_cp_module and "collision.head.W" not in blocks:
        raise ValueError(f"{path}: method {MethodVariant.parse(method).value} needs collision blocks")
    cfg = TrainConfig(method=method, policy_hidden=blocks["policy.actor.W"].value.shape[1],
                      collision_hidden=(blocks["collision.head.W"].value.shape[1]
                                        if "collision.head.W" in blocks else 32))
    agent = build_agent(cfg, n_classes)
    if agent.policy.encoder_size != blocks["policy.enc.W"].value.shape[0]:
        raise ValueError(f"{path}: encoder size does not match policy hidden size")
    assign_weights(agent.params, blocks.values())
    return agent


def load_scenes(paths) -> list[GridScene]:
    return [gw.load_scene(p) for p in paths]


def _episode_job(agent, scenes, cfg: EvalConfig, feed_p: bool, job) -> EpisodeRecord:
    seed, si, k = job
    scene = scenes[si]
    goal = int(episode_rng(seed, "goal", si, k).integers(scene.n_classes))
    start = sample_start(scene, goal, episode_rng(seed, "start", si, k), cfg.exclude_visible_starts)
    rec = run_episode(agent, scene, start, goal, cfg.max_steps, feed_p,
                      episode_rng(seed, "noise", si, k), cfg.obs_noise)
    rec.seed = seed
    return rec


_POOL_ARGS = None


def _pool_job(job):
    return _episode_job(*_POOL_ARGS, job)


def run_evaluation(agent: NavAgent, method, scenes: list[GridScene],
                   cfg: EvalConfig = EvalConfig()) -> list[EpisodeRecord]:
    """All (seed, scene, episode) jobs in a fixed order; parallel runs match serial ones."""
    if not scenes:
        raise ValueError("scene set is empty")
    feed_p = method_spec(method).feed_p[1]
    jobs = [(seed, si, k) for seed in cfg.seeds for si in range(len(scenes))
            for k in range(cfg.episodes_per_scene)]
    if cfg.workers == 1:
        return [_episode_job(agent, scenes, cfg, feed_p, j) for j in jobs]
    global _POOL_ARGS
    _POOL_ARGS = (agent, scenes, cfg, feed_p)
    try:
        with mp.get_context("fork").Pool(cfg.workers) as pool:
            return pool.map(_pool_job, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers)))
    finally:
        _POOL_ARGS = None


def evaluate(weights, method, scenes, cfg: EvalConfig = EvalConfig()
             ) -> tuple[MetricsReport, list[EpisodeRecord]]:
    """Evaluate a weight file (or agent) on scenes (or scene file paths)."""
    scenes = [s if isinstance(s, GridScene) else gw.load_scene(s) for s in scenes]
    if not scenes:
        raise ValueError("scene set is empty")
    agent = weights if isinstance(weights, NavAgent) else agent_from_weights(
        weights, method, scenes[0].n_classes)
    records = run_evaluation(agent, method, scenes, cfg)
    by_seed = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append(r)
    reports = [compute_metrics(by_seed[s], cfg.spl_zero_floor) for s in cfg.seeds]
    return merge_reports(reports), records


# --------------------------------------------------------------------------
# collision predictor quality

@dataclass(frozen=True)
class PredictorScore:
    n: int
    positives: int
    tpr: float
    tnr: float

    @property
    def balanced_accuracy(self) -> float:
        return 0.5 * (self.tpr + self.tnr)


def collision_predictor_score(agent: NavAgent, scenes: list[GridScene], episodes_per_scene: int,
                              seed: int, max_steps: int = 200,
                              obs_noise: float = gw.DEFAULT_NOISE_SIGMA,
                              threshold: float = 0.5) -> PredictorScore:
    """Compare p_hat > threshold with the ahead-cell lookup along sampled rollouts.

    The policy samples its actions with p_in = 0 (the Stage-1 gating).  Every
    visited pose is scored.
    """
    if agent.collision is None:
        raise ValueError("agent has no collision module")
    tp = fn = tn = fp = 0
    for si, scene in enumerate(scenes):
        for k in range(episodes_per_scene):
            goal = int(episode_rng(seed, "goal", si, k).integers(scene.n_classes))
            pose = sample_start(scene, goal, episode_rng(seed, "start", si, k))
            noise = episode_rng(seed, "noise", si, k)
            prng = episode_rng(seed, "policy", si, k)
            state = agent.reset()
            last = Action.DONE
            for _ in range(max_steps):
                obs = gw.observe(scene, pose, last, goal, noise, obs_noise)
                logits, _, p_hat, _, _, _ = agent_step(agent, obs, state, feed_p=False)
                blocked = gw.ahead_blocked(scene, pose)
                pred = p_hat > threshold
                tp += blocked and pred
                fn += blocked and not pred
                tn += (not blocked) and (not pred)
                fp += (not blocked) and pred
                a = sample_action(logits, prng)
                if a is Action.DONE:
                    break
                pose, last = gw.step(scene, pose, a).new_pose, a
    pos, neg = tp + fn, tn + fp
    return PredictorScore(pos + neg, pos, tp / pos if pos else 0.0, tn / neg if neg else 0.0)


# --------------------------------------------------------------------------
# files

def write_episode_log(records: list[EpisodeRecord], path, meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": EPISODES_FORMAT, **(meta or {})}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


def read_episode_log(path, scenes: dict[str, GridScene] | None = None
                     ) -> tuple[dict, list[EpisodeRecord]]:
    """Parse an episode log.  With ``scenes`` the optimal lengths are recomputed."""
    path = Path(path)
    recs = []
    with open(path) as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError:
            raise ValueError(f"{path}:1: not an episode log") from None
        if header.get("format") != EPISODES_FORMAT:
            raise ValueError(f"{path}:1: expected format '{EPISODES_FORMAT}'")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = EpisodeRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed episode record ({exc})") from None
            if scenes is not None:
                if rec.scene_id not in scenes:
                    raise ValueError(f"{path}:{lineno}: unknown scene {rec.scene_id!r}")
                rec.optimal_length = gw.shortest_path_length(
                    scenes[rec.scene_id], AgentPose(*rec.start), rec.goal)
            recs.append(rec)
    return header, recs


def format_report(report: MetricsReport, label: str = "") -> str:
    lines = [METRICS_FORMAT]
    if label:
        lines.append(f"label: {label}")
    lines.append(f"trials: {len(report.trials)}")
    lines.append(f"episodes: {report.n}")
    for name in METRIC_NAMES:
        lines.append(f"{name}: {report.mean(name):.4f} +- {report.std(name):.4f}")
    return "\n".join(lines) + "\n"


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    buf.write(METRICS_CSV_FORMAT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "seed", "N", *METRIC_NAMES])
    for i, (t, seed) in enumerate(zip(report.trials, report.seeds)):
        w.writerow([i, "" if seed is None else seed, t.n, *(f"{v:.6f}" for v in t.as_tuple())])
    return buf.getvalue()


# --------------------------------------------------------------------------
# learning curves

CURVE_COLUMNS = ("episode", "stage", "window_CF_SR", "window_SR", "window_collision_rate")


def learning_curve(records: list[dict], window: int = CURVE_WINDOW) -> list[tuple]:
    """Trailing-window rates over training episode records, ordered by episode.

    The collision rate is the mean number of collisions per episode.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    eps = sorted((r for r in records if r.get("type", "episode") == "episode"),
                 key=lambda r: r["episode"])
    if not eps:
        return []
    succ = np.array([bool(r["success"]) for r in eps], dtype=float)
    coll = np.array([r["collisions"] for r in eps], dtype=float)
    cf = succ * (coll == 0)
    rows = []
    cs = [np.concatenate(([0.0], np.cumsum(v))) for v in (cf, succ, coll)]
    for i, r in enumerate(eps):
        lo = max(0, i + 1 - window)
        n = i + 1 - lo
        rows.append((r["episode"], r["stage"], *((c[i + 1] - c[lo]) / n for c in cs)))
    return rows


def curves_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    buf.write(CURVES_FORMAT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for ep, stage, cfsr, sr, cr in rows:
        w.writerow([ep, stage, f"{cfsr:.6f}", f"{sr:.6f}", f"{cr:.6f}"])
    return buf.getvalue()
