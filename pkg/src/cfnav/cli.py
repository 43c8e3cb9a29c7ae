"""Command-line entry point: scene generation, training, evaluation, replay and curves.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import evaluator as ev
from . import gridworld as gw
from .trainer import TRAIN_FIELDS, MethodVariant, TrainConfig, WorkerError, read_train_log, train

CONFIG_HEADER = "# cfnav-config v1"
BENCH_HEADER = "# cfnav-bench v1"
BENCH_METHODS = ("TwoStageCP", "RewardOnly", "StageOnly", "Baseline")
MANIFEST_HEADER = "# cfnav-manifest v1"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
BENCHMARK_DIR = Path(__file__).with_name("benchmark")

log = logging.getLogger("cfnav")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """TrainConfig fields plus scene pool, evaluation and output settings."""

    train: TrainConfig
    scenes: str = "benchmark"  # benchmark | generate | files
    train_count: int = 15
    test_count: int = 5
    scene_seed: int = 0
    width: int = 12
    height: int = 12
    density: float = 0.2
    n_classes: int = 3
    targets_per_class: int = 2
    cell_size: float = 0.25
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    eval_episodes_per_scene: int = 20
    eval_seeds: tuple[int, ...] = (0,)
    eval_workers: int = 1
    spl_zero_floor: float | None = 0.25
    curve_window: int = ev.CURVE_WINDOW
    out_dir: str = "runs/default"
    base_dir: Path = Path(".")

    def scene_params(self) -> gw.SceneGenParams:
        return gw.SceneGenParams(width=self.width, height=self.height, density=self.density,
                                 n_classes=self.n_classes, targets_per_class=self.targets_per_class,
                                 cell_size=self.cell_size)

    def eval_config(self) -> ev.EvalConfig:
        return ev.EvalConfig(self.eval_episodes_per_scene, self.eval_seeds,
                             self.train.max_episode_steps, self.train.obs_noise,
                             self.train.exclude_visible_starts, self.spl_zero_floor,
                             self.eval_workers)

    def scene_split(self) -> tuple[list[gw.GridScene], list[gw.GridScene]]:
        if self.scenes == "benchmark":
            tr, te = load_benchmark()
        elif self.scenes == "generate":
            params = self.scene_params()
            seeds = scene_seeds(self.scene_seed, self.train_count + self.test_count)
            made = [gw.generate_scene(int(s), params, scene_id=f"scene_{i:03d}")
                    for i, s in enumerate(seeds)]
            tr, te = made[: self.train_count], made[self.train_count:]
        else:
            tr = [gw.load_scene(self.base_dir / f) for f in self.train_files]
            te = [gw.load_scene(self.base_dir / f) for f in self.test_files]
            if not tr or not te:
                raise ConfigError("scenes=files needs train_files and test_files")
        overlap = {s.rows for s in tr} & {s.rows for s in te}
        if overlap or {s.id for s in tr} & {s.id for s in te}:
            raise ConfigError("train and test scene sets overlap")
        return tr, te


_EXP_FIELDS = {f.name: f for f in fields(ExperimentConfig) if f.name not in ("train", "base_dir")}


def scene_seeds(root: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(root)).generate_state(count)]


def load_benchmark() -> tuple[list[gw.GridScene], list[gw.GridScene]]:
    tr = sorted((BENCHMARK_DIR / "train").glob("*.cfs"))
    te = sorted((BENCHMARK_DIR / "test").glob("*.cfs"))
    if not tr or not te:
        raise FileNotFoundError(f"benchmark scenes missing under {BENCHMARK_DIR}")
    return [gw.load_scene(p) for p in tr], [gw.load_scene(p) for p in te]


# --------------------------------------------------------------------------
# config parsing

def _convert(raw: str, tp, name: str):
    """Convert a config value to the annotated type of field ``name``."""
    if isinstance(tp, str):
        tp = eval(tp, {"MethodVariant": MethodVariant, "Path": Path, "tuple": tuple})  # noqa: S307
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() == "none":
            return None
        return _convert(raw, args[0], name)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_convert(s, inner, name) for s in items)
    if tp is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected true/false, got {raw!r}")
    if tp is MethodVariant:
        return MethodVariant.parse(raw)
    if tp in (int, float, str):
        return tp(raw)
    raise ValueError(f"{name}: unsupported field type {tp}")


def parse_config(text: str, source: str = "<string>", base_dir: Path = Path(".")) -> ExperimentConfig:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_HEADER:
        raise ConfigError(f"{source}:1: first line must be '{CONFIG_HEADER}'")
    train_kw, exp_kw = {}, {}
    for lineno, line in enumerate(lines[1:], start=2):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key in train_kw or key in exp_kw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if key in TRAIN_FIELDS:
            target, tp = train_kw, TRAIN_FIELDS[key].type
        elif key in _EXP_FIELDS:
            target, tp = exp_kw, _EXP_FIELDS[key].type
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            target[key] = _convert(raw, tp, key)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    try:
        cfg = ExperimentConfig(TrainConfig(**train_kw), base_dir=base_dir, **exp_kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cfg.scenes not in ("benchmark", "generate", "files"):
        raise ConfigError(f"{source}: scenes must be benchmark, generate or files")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path), path.parent)


def format_config(cfg: ExperimentConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, MethodVariant):
            return v.value
        if isinstance(v, bool):
            return "true" if v else "false"
        return "none" if v is None else str(v)

    lines = [CONFIG_HEADER]
    lines += [f"{f} = {fmt(getattr(cfg.train, f))}" for f in TRAIN_FIELDS]
    lines += [f"{f} = {fmt(getattr(cfg, f))}" for f in _EXP_FIELDS]
    return "\n".join(lines) + "\n"


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(TrainConfig())
    t = cfg.train
    over = {}
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    if args.workers is not None:
        over["workers"] = args.workers
    if args.method is not None:
        over["method"] = MethodVariant.parse(args.method)
        if over["method"] is not MethodVariant.SINGLE_STEP:
            over["lam"] = None
    if args.deterministic:
        over["workers"] = 1
    try:
        cfg.train = replace(t, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


# --------------------------------------------------------------------------
# commands

def cmd_gen_scenes(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig(TrainConfig())
    count = args.count if args.count is not None else cfg.train_count + cfg.test_count
    over = {k: getattr(args, k) for k in ("width", "height", "density", "targets_per_class")
            if getattr(args, k) is not None}
    params = replace(cfg.scene_params(), **over)
    root = args.seed if args.seed is not None else cfg.scene_seed
    out = Path(args.out or "scenes")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(scene_seeds(root, count)):
        sid = f"scene_{i:03d}"
        gw.save_scene(gw.generate_scene(s, params, scene_id=sid), out / f"{sid}.cfs")
        entries.append(f"{sid}.cfs\t{s}")
    p = params
    (out / "manifest.txt").write_text("\n".join([
        MANIFEST_HEADER, f"root_seed\t{root}",
        f"params\twidth={p.width} height={p.height} density={p.density} n_classes={p.n_classes} "
        f"targets_per_class={p.targets_per_class} cell_size={p.cell_size}",
        *entries]) + "\n")
    print(f"wrote {count} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    tr, _ = cfg.scene_split()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    log.info("training %s for %d episodes on %d scenes", cfg.train.method.value,
             cfg.train.total_episodes, len(tr))
    res = train(cfg.train, tr, out_dir=out, keep_records=False)
    print(f"weights: {res.weights_path}\nlog: {res.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    if args.seed is not None:
        cfg.eval_seeds = (args.seed,)
    weights = Path(args.weights)
    if not weights.exists():
        raise FileNotFoundError(f"weight file not found: {weights}")
    _, te = cfg.scene_split()
    report, records = ev.evaluate(weights, cfg.train.method, te, cfg.eval_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(ev.format_report(report, cfg.train.method.value))
    (out / "metrics.csv").write_text(ev.report_csv(report))
    ev.write_episode_log(records, out / "episodes.jsonl",
                         {"method": cfg.train.method.value, "weights": str(weights)})
    sys.stdout.write(ev.format_report(report, cfg.train.method.value))
    return EXIT_OK


def render_replay(record: ev.EpisodeRecord, scene: gw.GridScene) -> str:
    """One ASCII frame per step; a collided MoveAhead marks the blocked cell with '*'.

    Collisions with the outer boundary have no cell to mark.
    """
    frames = [f"episode scene={record.scene_id} goal={scene.target_classes[record.goal]} "
              f"steps={record.step_count} success={record.done_success} "
              f"collisions={record.collisions}"]
    for t, s in enumerate(record.steps):
        pose = gw.AgentPose(*s.pose)
        marks = {}
        if s.collided:
            dx, dy = gw.HEADING_VECTORS[pose.heading]
            if scene.in_bounds(pose.x + dx, pose.y + dy):
                marks[(pose.x + dx, pose.y + dy)] = "*"
        frames.append(f"t={t} action={gw.ACTION_NAMES[s.action]} heading={pose.heading} "
                      f"pitch={pose.pitch}" + (" collision" if s.collided else ""))
        frames.append(gw.render_ascii(scene, pose, marks))
    return "\n".join(frames) + "\n"


def cmd_replay(args) -> int:
    scene_dir = Path(args.scenes)
    scenes = {p.stem: gw.load_scene(p) for p in sorted(scene_dir.glob("*.cfs"))}
    if not scenes:
        raise FileNotFoundError(f"no scene files in {scene_dir}")
    _, records = ev.read_episode_log(args.log, scenes)
    picks = records if args.episode is None else [records[args.episode]]
    for rec in picks:
        ev.replay(rec, scenes[rec.scene_id])
        sys.stdout.write(render_replay(rec, scenes[rec.scene_id]))
    return EXIT_OK


def cmd_curves(args) -> int:
    _, recs = read_train_log(args.log)
    text = ev.curves_csv(ev.learning_curve(recs, args.window))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


@dataclass
class BenchRun:
    method: str
    trial: int
    seed: int
    report: ev.MetricsReport
    train_seconds: float
    run_dir: Path


def run_benchmark(cfg: ExperimentConfig, methods=BENCH_METHODS, trials: int = 5,
                  out_dir=None) -> list[BenchRun]:
    """Train and evaluate every method once per trial seed.

    Trial ``i`` trains with seed ``seeds[0] + i`` and evaluates the test split
    with the same seed, so methods within a trial share scenes, starts and goals.
    """
    tr_scenes, te_scenes = cfg.scene_split()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    base = cfg.train.seeds[0]
    runs = []
    for i in range(trials):
        seed = base + i
        for m in methods:
            method = MethodVariant.parse(m)
            tcfg = replace(cfg.train, method=method, seeds=(seed,),
                           lam=cfg.train.lam if method is MethodVariant.SINGLE_STEP else None)
            run_dir = out / method.value / f"trial{i}"
            t0 = time.perf_counter()
            res = train(tcfg, tr_scenes, out_dir=run_dir, keep_records=False)
            secs = time.perf_counter() - t0
            ecfg = replace(cfg.eval_config(), seeds=(seed,))
            report, records = ev.evaluate(res.weights_path, method, te_scenes, ecfg)
            ev.write_episode_log(records, run_dir / "episodes.jsonl", {"method": method.value})
            log.info("%s trial %d: CF-SR %.3f SR %.3f (%.0f s)", method.value, i,
                     report.cf_sr, report.sr, secs)
            runs.append(BenchRun(method.value, i, seed, report, secs, run_dir))
    return runs


def bench_tables(runs: list[BenchRun]) -> tuple[str, str]:
    """Per-run CSV and a mean +- std summary per method."""
    rows = [BENCH_HEADER, "method,trial,seed,N,SR,SPL,CF_SR,CF_SPL,train_seconds"]
    for r in runs:
        m = r.report.trials[0]
        rows.append(f"{r.method},{r.trial},{r.seed},{m.n},{m.sr:.6f},{m.spl:.6f},"
                    f"{m.cf_sr:.6f},{m.cf_spl:.6f},{r.train_seconds:.1f}")
    summary = [ev.METRICS_FORMAT]
    for method in dict.fromkeys(r.method for r in runs):
        rep = ev.merge_reports([r.report for r in runs if r.method == method])
        summary.append(f"{method}: " + "  ".join(
            f"{n} {rep.mean(n):.4f} +- {rep.std(n):.4f}" for n in ev.METRIC_NAMES))
    return "\n".join(rows) + "\n", "\n".join(summary) + "\n"


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    methods = tuple(args.methods.split(",")) if args.methods else BENCH_METHODS
    runs = run_benchmark(cfg, methods, args.trials)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, summary = bench_tables(runs)
    (out / "bench.csv").write_text(table)
    (out / "bench.txt").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfnav", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--method", help="method variant, e.g. TwoStageCP")
        p.add_argument("--out", help="output directory")
        p.add_argument("--deterministic", action="store_true", help="force a single worker")

    p = sub.add_parser("gen-scenes", help="generate scene files and a manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--targets-per-class", dest="targets_per_class", type=int)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a weight file on the test scenes")
    common(p)
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="train and evaluate several methods over repeated trials")
    common(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--methods", help="comma-separated method variants")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="render an episode log as ASCII frames")
    p.add_argument("log")
    p.add_argument("--scenes", required=True, help="directory of scene files")
    p.add_argument("--episode", type=int, help="index of one record to render")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("curves", help="sliding-window learning curves from a training log")
    p.add_argument("log")
    p.add_argument("--out")
    p.add_argument("--window", type=int, default=ev.CURVE_WINDOW)
    p.set_defaults(func=cmd_curves)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("CFNAV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, gw.SceneGenError, gw.SceneFormatError) as exc:
        print(f"cfnav: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WorkerError, FileNotFoundError, gw.UnreachableTargetError, ValueError, KeyError,
            OSError, ev.ReplayError) as exc:
        print(f"cfnav: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
