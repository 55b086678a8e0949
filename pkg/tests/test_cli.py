import collections
import csv

import numpy as np
import pytest

from disqhnet import cli, config, evalkit, phantom, shapley
from disqhnet.net import ModelConfig


def read_tsv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader((l for l in fh if not l.startswith("#")), delimiter="\t"))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = config.RunConfig(
        model=ModelConfig.toy(ru_K=16, c_K=16, max_locations=128),
        train=config.TrainConfig(epochs=4, warmup_epochs=1, lr_max=3e-3, lr_min=3e-4, accumulation=2,
                                 subjects_per_epoch=4, checkpoint_every=2, kmeans_iters=3, reservoir_size=256),
        data=config.DataConfig(n_subjects=6, shape=(8, 8, 8), w_syn=1.0),
        eval=config.EvalConfig(ssim_window=3))
    (root / "c.ini").write_text(config.to_ini(cfg))
    run = lambda *a: cli.main([str(x) for x in a])
    assert run("gen", "--config", root / "c.ini", "--out", root / "data") == 0
    assert run("train", "--config", root / "c.ini", "--manifest", root / "data/manifest.tsv",
               "--out", root / "run") == 0
    ck = root / "run/checkpoint_last.dqck"
    man = root / "data/manifest.tsv"
    assert run("synthesize", "--checkpoint", ck, "--manifest", man, "--out", root / "pred") == 0
    assert run("evaluate", "--pred", root / "pred", "--manifest", man, "--config", root / "c.ini",
               "--out", root / "rep") == 0
    assert run("attribute", "--checkpoint", ck, "--manifest", man, "--out", root / "attr") == 0
    return root, run


def test_gen_writes_manifest_and_stages(workspace):
    root, _ = workspace
    rows = read_tsv(root / "data/manifest.tsv")
    assert len(rows) == 6
    assert collections.Counter(r["stage"] for r in rows) == {"CN": 2, "I/II": 2, "III/IV": 1, "V/VI": 1}
    assert config.load(root / "data/config.ini").data.n_subjects == 6


def test_gen_seed_override(workspace, tmp_path):
    root, run = workspace
    assert run("gen", "--config", root / "c.ini", "--seed", 9, "--out", tmp_path) == 0
    a = phantom.read_volume(tmp_path / "sub-000_x1.dvol")
    b = phantom.read_volume(root / "data/sub-000_x1.dvol")
    assert not np.array_equal(a, b)


def test_train_log_and_checkpoints(workspace):
    root, _ = workspace
    lines = (root / "run/train_log.tsv").read_text().splitlines()
    assert lines[0].startswith("# started")
    rows = read_tsv(root / "run/train_log.tsv")
    assert list(rows[0]) == list(cli.training.LOG_COLUMNS)
    assert [r["epoch"] for r in rows] == ["1", "2", "3", "4"]
    assert (root / "run/checkpoint_best.dqck").exists()


def test_resume_matches_uninterrupted_run(workspace, tmp_path):
    root, run = workspace
    args = ("--config", root / "c.ini", "--manifest", root / "data/manifest.tsv", "--out", tmp_path)
    assert run("train", *args, "--epochs", 2) == 0
    assert run("train", *args, "--resume", tmp_path / "checkpoint_last.dqck") == 0
    assert (tmp_path / "checkpoint_last.dqck").read_bytes() == (root / "run/checkpoint_last.dqck").read_bytes()
    rows = read_tsv(tmp_path / "train_log.tsv")
    ref = read_tsv(root / "run/train_log.tsv")
    drop = lambda r: {k: v for k, v in r.items() if k != "elapsed_s"}
    assert [drop(r) for r in rows] == [drop(r) for r in ref]
    assert (tmp_path / "train_log.tsv").read_text().count("# started") == 2


@pytest.mark.parametrize("cmd,outputs", [
    ("synthesize", ("predictions.tsv", "sub-000_pred.dvol")),
    ("evaluate", ("subjects.tsv", "bland_altman.tsv", "summary.tsv")),
    ("attribute", ("shapley.tsv", "coalitions.tsv", "violin.tsv", "coalition_table.tsv")),
])
def test_reruns_are_byte_identical(workspace, tmp_path, cmd, outputs):
    root, run = workspace
    ck, man = root / "run/checkpoint_last.dqck", root / "data/manifest.tsv"
    args = {"synthesize": ("--checkpoint", ck, "--manifest", man),
            "evaluate": ("--pred", root / "pred", "--manifest", man, "--config", root / "c.ini"),
            "attribute": ("--checkpoint", ck, "--manifest", man)}[cmd]
    first = {"synthesize": "pred", "evaluate": "rep", "attribute": "attr"}[cmd]
    assert run(cmd, *args, "--out", tmp_path) == 0
    for name in outputs:
        assert (tmp_path / name).read_bytes() == (root / first / name).read_bytes(), name


def test_evaluate_tables(workspace):
    root, _ = workspace
    assert len(read_tsv(root / "rep/subjects.tsv")) == 6
    ba = read_tsv(root / "rep/bland_altman.tsv")
    assert len(ba) == 6 * len(evalkit.BRAAK_ROIS)
    assert "staging_accuracy" in (root / "rep/summary.tsv").read_text()


def test_perfect_predictions_give_perfect_report(workspace, tmp_path):
    root, run = workspace
    pred = tmp_path / "pred"
    pred.mkdir()
    rows = read_tsv(root / "data/manifest.tsv")
    for r in rows:
        (pred / r["y"]).write_bytes((root / "data" / r["y"]).read_bytes())
    with open(pred / "predictions.tsv", "w") as fh:
        fh.write("subject_id\tpred\n" + "".join(f"{r['subject_id']}\t{r['y']}\n" for r in rows))
    assert run("evaluate", "--pred", pred, "--manifest", root / "data/manifest.tsv", "--config",
               root / "c.ini", "--out", tmp_path / "rep") == 0
    for r in read_tsv(tmp_path / "rep/subjects.tsv"):
        assert float(r["mae"]) == 0.0 and float(r["ssim"]) == pytest.approx(1.0)
        assert r["stage_pred"] == r["stage_true"]


def test_full_coalition_matches_evaluate(workspace):
    root, _ = workspace
    ev = {r["subject_id"]: r for r in read_tsv(root / "rep/subjects.tsv")}
    full = shapley.coalition_name(frozenset(shapley.PLAYER_NAMES))
    rows = [r for r in read_tsv(root / "attr/coalitions.tsv") if r["coalition"] == full]
    assert len(rows) == 6
    for r in rows:
        # predictions pass through float32 volume files before evaluate sees them
        for k in ("mae", "ssim"):
            assert float(r[k]) == pytest.approx(float(ev[r["subject_id"]][k]), rel=1e-4, abs=1e-6)


def test_attribution_tables_are_efficient(workspace):
    root, _ = workspace
    coal = read_tsv(root / "attr/coalitions.tsv")
    assert len(coal) == 6 * 16
    value = {(r["subject_id"], r["coalition"]): r for r in coal}
    full = shapley.coalition_name(frozenset(shapley.PLAYER_NAMES))
    sums = collections.defaultdict(float)
    for r in read_tsv(root / "attr/shapley.tsv"):
        sums[r["subject_id"], r["metric"]] += float(r["shapley"])
    assert len(sums) == 6 * len(shapley.METRICS)
    for (sid, m), s in sums.items():
        gap = float(value[sid, full][m]) - float(value[sid, "Structure"][m])
        assert s == pytest.approx(gap, abs=1e-9)


def test_invalid_config_exits_2(workspace, tmp_path, capsys):
    _, run = workspace
    (tmp_path / "bad.ini").write_text("[train]\nepochs = zero\n")
    assert run("gen", "--config", tmp_path / "bad.ini", "--out", tmp_path / "o") == 2
    assert "error:" in capsys.readouterr().err


def test_missing_inputs_exit_2(workspace, tmp_path, capsys):
    root, run = workspace
    assert run("synthesize", "--checkpoint", tmp_path / "none.dqck", "--manifest",
               root / "data/manifest.tsv", "--out", tmp_path / "o") == 2
    assert run("train", "--config", root / "c.ini", "--manifest", tmp_path / "none.tsv", "--out", tmp_path) == 2
    assert run("evaluate", "--pred", tmp_path, "--manifest", root / "data/manifest.tsv", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "Traceback" not in err and err.count("error:") == 3


def test_corrupt_checkpoint_exits_2(workspace, tmp_path):
    root, run = workspace
    (tmp_path / "bad.dqck").write_bytes(b"garbage")
    assert run("attribute", "--checkpoint", tmp_path / "bad.dqck", "--manifest", root / "data/manifest.tsv",
               "--out", tmp_path) == 2


def test_unnormalisable_prediction_exits_3(workspace, tmp_path):
    root, run = workspace
    rows = read_tsv(root / "data/manifest.tsv")
    for r in rows:
        v = phantom.read_volume(root / "data" / r["y"])
        phantom.write_volume(-np.abs(v) - 1.0, tmp_path / r["y"])
    with open(tmp_path / "predictions.tsv", "w") as fh:
        fh.write("subject_id\tpred\n" + "".join(f"{r['subject_id']}\t{r['y']}\n" for r in rows))
    assert run("evaluate", "--pred", tmp_path, "--manifest", root / "data/manifest.tsv", "--out",
               tmp_path / "rep") == 3


def test_console_script_help():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
