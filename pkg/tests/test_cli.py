import json

import pytest

from cfnav import cli
from cfnav import evaluator as ev
from cfnav import gridworld as gw
from cfnav.evaluator import EpisodeRecord, StepRecord
from cfnav.gridworld import Action, AgentPose

SMALL = """# cfnav-config v1
E1 = 30
E2 = 30
workers = 1
max_episode_steps = 40
eval_episodes_per_scene = 2
"""


def _write_cfg(tmp_path, text=SMALL, name="c.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


# gen-scenes ----------------------------------------------------------------

def test_gen_scenes_count_and_manifest(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["gen-scenes", "--seed", "5", "--count", "15", "--out", str(out)]) == 0
    files = sorted(out.glob("*.cfs"))
    assert len(files) == 15
    manifest = (out / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "# cfnav-manifest v1"
    entries = [l for l in manifest if l.endswith(tuple("0123456789")) and l.startswith("scene_")]
    assert len(entries) == 15
    for f in files:
        assert f.read_text().startswith("cfnav-scene v1 ")
        gw.load_scene(f)
    again = tmp_path / "s2"
    cli.main(["gen-scenes", "--seed", "5", "--count", "15", "--out", str(again)])
    for f in files:
        assert f.read_bytes() == (again / f.name).read_bytes()


def test_gen_scenes_unsatisfiable(tmp_path, capsys):
    code = cli.main(["gen-scenes", "--count", "1", "--width", "8", "--height", "8",
                     "--density", "0.9", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "error" in capsys.readouterr().err


# config ----------------------------------------------------------------------

def test_config_roundtrip():
    cfg = cli.parse_config(SMALL)
    assert cfg.train.E1 == 30 and cfg.eval_episodes_per_scene == 2
    back = cli.parse_config(cli.format_config(cfg))
    assert back.train == cfg.train and cli.format_config(back) == cli.format_config(cfg)


@pytest.mark.parametrize("text,msg", [
    ("# cfnav-config v1\nE1 = 3\nfoo = 1\n", "c.txt:3: unknown key 'foo'"),
    ("# cfnav-config v1\nE1 = 3\nE1 = 4\n", "c.txt:3: duplicate key"),
    ("# cfnav-config v1\nE1 = abc\n", "c.txt:2:"),
    ("# cfnav-config v1\nE1 3\n", "c.txt:2: expected key = value"),
    ("E1 = 3\n", "c.txt:1: first line"),
    ("# cfnav-config v1\nexclude_visible_starts = maybe\n", "c.txt:2:"),
])
def test_config_errors_name_line(tmp_path, text, msg):
    with pytest.raises(cli.ConfigError, match=msg):
        cli.load_config(_write_cfg(tmp_path, text))


def test_config_error_exit_code(tmp_path, capsys):
    p = _write_cfg(tmp_path, "# cfnav-config v1\nfoo = 1\n")
    assert cli.main(["train", "--config", str(p)]) == 2
    assert "c.txt:2: unknown key 'foo'" in capsys.readouterr().err


def test_train_test_overlap_rejected(tmp_path):
    s = gw.generate_scene(1, gw.SceneGenParams(), scene_id="a")
    gw.save_scene(s, tmp_path / "a.cfs")
    gw.save_scene(gw.generate_scene(2, gw.SceneGenParams(), scene_id="b"), tmp_path / "b.cfs")
    cfg = cli.load_config(_write_cfg(tmp_path, SMALL + "scenes = files\ntrain_files = a.cfs,b.cfs\n"
                                     "test_files = a.cfs\n"))
    with pytest.raises(cli.ConfigError, match="overlap"):
        cfg.scene_split()


def test_benchmark_split_is_disjoint():
    tr, te = cli.ExperimentConfig(cli.TrainConfig()).scene_split()
    assert len(tr) == 15 and len(te) == 5


# train / eval / curves / replay ---------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write_cfg(root)
    out = root / "train"
    assert cli.main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    return root, cfg, out


def test_train_outputs_headers(trained):
    _, _, out = trained
    assert (out / "config.txt").read_text().splitlines()[0] == "# cfnav-config v1"
    assert (out / "weights.cfw").read_bytes().startswith(b"cfnav-weights v1\n")
    head = json.loads((out / "train_log.jsonl").read_text().splitlines()[0])
    assert head["format"] == "cfnav-trainlog v1"
    # the written config reproduces the run
    again = out.parent / "again"
    cli.main(["train", "--config", str(out / "config.txt"), "--out", str(again)])
    assert (again / "weights.cfw").read_bytes() == (out / "weights.cfw").read_bytes()


def test_deterministic_flag_matches_single_worker(trained):
    root, cfg, out = trained
    d = root / "det"
    cli.main(["train", "--config", str(cfg), "--seed", "3", "--workers", "4", "--deterministic",
              "--out", str(d)])
    assert (d / "weights.cfw").read_bytes() == (out / "weights.cfw").read_bytes()


def test_eval_twice_byte_identical(trained):
    root, cfg, out = trained
    outs = []
    for k in range(2):
        d = root / f"eval{k}"
        assert cli.main(["eval", "--config", str(cfg), "--weights", str(out / "weights.cfw"),
                         "--out", str(d)]) == 0
        outs.append(d)
    for name in ("metrics.csv", "metrics.txt", "episodes.jsonl"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "metrics.txt").read_text().startswith("cfnav-metrics v1\n")
    assert (outs[0] / "metrics.csv").read_text().startswith("# cfnav-metrics-csv v1\n")
    first = json.loads((outs[0] / "episodes.jsonl").read_text().splitlines()[0])
    assert first["format"] == "cfnav-episodes v1"
    # 5 test scenes x 2 episodes x 1 seed
    assert len((outs[0] / "episodes.jsonl").read_text().splitlines()) == 11


def test_eval_missing_weights(trained, capsys):
    root, cfg, _ = trained
    code = cli.main(["eval", "--config", str(cfg), "--weights", str(root / "none.cfw"),
                     "--out", str(root / "e")])
    assert code != 0 and "none.cfw" in capsys.readouterr().err


def test_curves_cover_all_episodes(trained, tmp_path):
    _, _, out = trained
    dst = tmp_path / "curves.csv"
    assert cli.main(["curves", str(out / "train_log.jsonl"), "--out", str(dst), "--window", "10"]) == 0
    lines = dst.read_text().splitlines()
    assert lines[0] == "# cfnav-curves v1"
    rows = [l.split(",") for l in lines[2:]]
    assert [int(r[0]) for r in rows] == list(range(60))
    assert {int(r[1]) for r in rows[:30]} == {1} and {int(r[1]) for r in rows[30:]} == {2}


def _collision_log(tmp_path):
    tr, te = cli.load_benchmark()
    scene = te[0]
    pose = next(AgentPose(x, y, h) for x, y in scene.free_cells() for h in gw.HEADINGS
                if gw.ahead_blocked(scene, AgentPose(x, y, h)))
    steps = [StepRecord(pose.as_tuple(), int(Action.MOVE_AHEAD), True, False, 0.0)] * 2
    steps.append(StepRecord(pose.as_tuple(), int(Action.DONE), False, False, 0.0))
    rec = EpisodeRecord(scene.id, 0, pose.as_tuple(), steps, gw.is_visible(scene, pose, 0))
    sdir = tmp_path / "scenes"
    sdir.mkdir()
    gw.save_scene(scene, sdir / f"{scene.id}.cfs")
    log = tmp_path / "ep.jsonl"
    ev.write_episode_log([rec], log)
    return log, sdir


def test_replay_marks_each_collision(tmp_path, capsys):
    log, sdir = _collision_log(tmp_path)
    assert cli.main(["replay", str(log), "--scenes", str(sdir), "--episode", "0"]) == 0
    text = capsys.readouterr().out
    assert text.count("*") == 2 and text.count("@") == 3
    assert "collisions=2" in text


def test_replay_rejects_inconsistent_log(tmp_path, capsys):
    log, sdir = _collision_log(tmp_path)
    lines = log.read_text().splitlines()
    d = json.loads(lines[1])
    d["steps"][0][5] = 0  # claim the first MoveAhead did not collide
    log.write_text(lines[0] + "\n" + json.dumps(d) + "\n")
    assert cli.main(["replay", str(log), "--scenes", str(sdir)]) == 3
    assert "step 0" in capsys.readouterr().err


def test_replay_from_eval_log(trained, capsys):
    root, _, _ = trained
    sdir = root / "bench_scenes"
    sdir.mkdir(exist_ok=True)
    for s in cli.load_benchmark()[1]:
        gw.save_scene(s, sdir / f"{s.id}.cfs")
    assert cli.main(["replay", str(root / "eval0" / "episodes.jsonl"), "--scenes", str(sdir),
                     "--episode", "1"]) == 0
    assert capsys.readouterr().out.startswith("episode scene=")


def test_bench_tables(tmp_path):
    cfg = cli.parse_config(SMALL)
    runs = cli.run_benchmark(cfg, methods=("TwoStageCP", "Baseline"), trials=2, out_dir=tmp_path)
    assert [(r.method, r.trial) for r in runs] == [("TwoStageCP", 0), ("Baseline", 0),
                                                   ("TwoStageCP", 1), ("Baseline", 1)]
    table, summary = cli.bench_tables(runs)
    assert table.startswith("# cfnav-bench v1\nmethod,trial,seed,")
    assert len(table.splitlines()) == 6
    assert summary.startswith("cfnav-metrics v1\nTwoStageCP: SR")
