import csv
import json

import numpy as np
import pytest
from PIL import Image

from t3po import datakit, nnet, runner
from t3po.runner import ExperimentConfig, main


def tiny_config(tmp_path, **over):
    cfg = {
        "profile": "desk",
        "dataset_root": "data",
        "split_config": "splits/synthetic.json",
        "output_dir": "runs",
        "synthetic": {"n_per_class": 20, "tile_side": 16, "seed": 0},
        "geometry": 16,
        "train": {"epochs": 1, "batch_size": 32},
        "seeds": [0],
        "mc_passes": 2,
    }
    cfg.update(over)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One seed trained and scored with every scorer."""
    tmp = tmp_path_factory.mktemp("exp")
    path = tiny_config(tmp)
    assert main(["make-splits", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path), "--seed", "0"]) == 0
    for s in ("t3po", "msp", "maxlogit", "mcdropout"):
        assert main(["score", "--config", str(path), "--seed", "0", "--scorer", s]) == 0
    return path, ExperimentConfig.load(path)


def test_pipeline_layout(trained):
    _, cfg = trained
    seed_dir = cfg.seed_dir(0)
    assert cfg.manifest_path.exists()
    assert (cfg.experiment_dir / "config.json").exists()
    for s in ("t3po", "msp", "maxlogit", "mcdropout"):
        rows = list(csv.DictReader(open(seed_dir / f"scores_{s}.csv")))
        assert {r["scorer_id"] for r in rows} == {s}
        assert sum(r["true_class"] == "OPEN" for r in rows) == 20
    # one epoch -> one log row
    assert len(nnet.read_training_log(seed_dir / "training_log.csv")) == 1


def test_checkpoint_is_self_describing(trained):
    _, cfg = trained
    model, meta = nnet.load_checkpoint(cfg.seed_dir(0) / "checkpoint.pt")
    assert meta["arch"] == "small_cnn" and meta["n_classes"] == 3
    assert meta["config_hash"] == cfg.config_hash
    assert meta["epoch"] == 1
    # the stored val accuracy re-evaluates exactly
    asg = datakit.read_manifest(cfg.manifest_path)
    assert nnet.evaluate_accuracy(model, datakit.eval_iterator(asg, "val", 64)) == meta["val_acc"]


def test_overwrite_guard(trained, capsys):
    path, cfg = trained
    before = (cfg.seed_dir(0) / "checkpoint.pt").stat().st_mtime_ns
    assert main(["train", "--config", str(path), "--seed", "0"]) == runner.EXIT_DATA
    assert "--overwrite" in capsys.readouterr().err
    assert (cfg.seed_dir(0) / "checkpoint.pt").stat().st_mtime_ns == before


def test_unsupported_scorer(trained, capsys):
    path, _ = trained
    assert main(["score", "--config", str(path), "--seed", "0", "--scorer", "arpl"]) == runner.EXIT_UNSUPPORTED
    assert "arpl" in capsys.readouterr().err


def test_consistency_error(trained, tmp_path):
    path, cfg = trained
    asg = datakit.read_manifest(cfg.manifest_path)
    swapped = datakit.SplitAssignment(("x", "y", "z"), asg.train, asg.val, asg.test_closed, asg.test_open)
    other = tmp_path / "manifest.csv"
    datakit.write_manifest(swapped, other)
    code = main(["score", "--config", str(path), "--seed", "0", "--scorer", "msp", "--manifest", str(other)])
    assert code == runner.EXIT_CONSISTENCY


def test_missing_data_and_config(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.json"), "--seed", "0"]) == runner.EXIT_DATA
    path = tiny_config(tmp_path, synthetic=None, dataset_root="nowhere")
    assert main(["make-splits", "--config", str(path)]) == runner.EXIT_DATA
    # no manifest yet
    assert main(["train", "--config", str(path), "--seed", "0"]) == runner.EXIT_DATA


def test_unknown_config_key(tmp_path):
    path = tiny_config(tmp_path, learning_rate=3)
    assert main(["make-splits", "--config", str(path)]) == runner.EXIT_DATA


def test_training_error_exit_code(trained, monkeypatch):
    path, _ = trained

    def boom(*a, **k):
        raise nnet.TrainingError("non-finite loss at epoch 1, batch 0")

    monkeypatch.setattr(nnet, "fit", boom)
    assert main(["train", "--config", str(path), "--seed", "1"]) == runner.EXIT_TRAIN


def test_report_single_seed(trained):
    path, cfg = trained
    assert main(["report", "--config", str(path)]) == 0
    out = cfg.experiment_dir.parent
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert {r["scorer_id"] for r in rows} == {"t3po", "msp", "maxlogit", "mcdropout"}
    for r in rows:
        assert r["n_runs"] == "1"
        assert float(r["ci95_acc"]) == 0.0 and float(r["ci95_auc"]) == 0.0
    md = (out / "report.md").read_text()
    assert "synthetic S1" in md and "sha256" in md
    sources = json.loads((out / "report_sources.json").read_text())
    assert len(sources) == 4


def test_run_result_matches_metrics(trained):
    _, cfg = trained
    r = runner.run_result_from_scores(cfg.seed_dir(0) / "scores_t3po.csv", "S")
    rows = list(csv.DictReader(open(cfg.seed_dir(0) / "scores_t3po.csv")))
    closed = [float(x["osr_score"]) for x in rows if x["true_class"] != "OPEN"]
    opened = [float(x["osr_score"]) for x in rows if x["true_class"] == "OPEN"]
    wins = sum((c > o) + 0.5 * (c == o) for c in closed for o in opened)
    assert r.closed_open_auc == pytest.approx(wins / (len(closed) * len(opened)))
    assert (r.n_closed_test, r.n_open_test) == (len(closed), len(opened))


def test_markdown_marks_best_and_ties():
    from t3po.metrics import AggregateResult

    aggs = [AggregateResult("S1", "a", 3, 0.9, 0.90, 0.0, 0.05), AggregateResult("S1", "b", 3, 0.8, 0.87, 0.0, 0.01)]
    md = runner.markdown_table(aggs)
    assert "<u>**90.00 ± 0.00**</u>" in md  # best accuracy
    assert "**87.00 ± 1.00**" in md  # within a's AUC interval
    assert "80.00 ± 0.00 |" in md and "**80.00" not in md


def test_config_hash(tmp_path):
    base = ExperimentConfig.load(tiny_config(tmp_path))
    same = ExperimentConfig.load(tiny_config(tmp_path, seeds=[4, 5], output_dir="elsewhere", scorers=["msp"]))
    assert base.config_hash == same.config_hash
    for change in ({"train": {"epochs": 2}}, {"dropout": 0.3}, {"split_config": "splits/kather5k_s2.json"}):
        other = ExperimentConfig.load(tiny_config(tmp_path, **change))
        assert other.config_hash != base.config_hash, change


def test_profiles(tmp_path):
    desk = ExperimentConfig.load(tiny_config(tmp_path))
    assert desk.backbone == "small_cnn" and not desk.pretrained
    paper = ExperimentConfig.load(tiny_config(tmp_path), profile="paper")
    assert paper.backbone == "mobilenet_v2" and paper.pretrained
    assert paper.train.batch_size == 32  # explicit config keys beat the profile
    assert paper.train.base_lr == 0.01


def test_dataset_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(runner.ROOT_ENV, str(tmp_path / "mounted"))
    assert ExperimentConfig.load(tiny_config(tmp_path)).root_path == tmp_path / "mounted"


def test_bundled_configs_parse():
    for name in ("desk", "kather5k_s1", "kather5k_s2", "kather5k_s3", "kather100k_s1", "kather100k_s2", "kather100k_s3"):
        cfg = ExperimentConfig.load(f"experiments/{name}.json")
        split = cfg.split()
        assert len(split.closed_classes) >= 2
    assert ExperimentConfig.load("experiments/desk.json").seeds == (0, 1, 2)


@pytest.mark.parametrize(
    "name,closed,open_",
    [
        ("kather5k_s1", 5, 3),
        ("kather5k_s2", 3, 5),
        ("kather5k_s3", 4, 4),
        ("kather100k_s1", 5, 4),
        ("kather100k_s2", 2, 7),
        ("kather100k_s3", 3, 6),
    ],
)
def test_bundled_split_sizes(name, closed, open_):
    split = datakit.SplitConfig.load(runner.bundled_config(f"splits/{name}.json"))
    assert (len(split.closed_classes), len(split.open_classes)) == (closed, open_)


def test_kather_s1_manifest(tmp_path):
    root = tmp_path / "kather5k"
    names = ["01_TUMOR", "02_STROMA", "03_COMPLEX", "04_LYMPHO", "05_DEBRIS", "06_MUCOSA", "07_ADIPOSE", "08_EMPTY"]
    for n in names:
        (root / n).mkdir(parents=True)
        for i in range(20):
            Image.fromarray(np.full((8, 8, 3), i, np.uint8)).save(root / n / f"{i}.tif")
    out = tmp_path / "m.csv"
    code = main(["make-splits", "--dataset-root", str(root), "--split-config", "splits/kather5k_s1.json", "--out", str(out)])
    assert code == 0
    asg = datakit.read_manifest(out)
    assert asg.closed_classes == ("01_TUMOR", "02_STROMA", "03_COMPLEX", "04_LYMPHO", "06_MUCOSA")
    assert {n for _, n in asg.test_open} == {"05_DEBRIS", "07_ADIPOSE", "08_EMPTY"}


def test_reference_rows():
    from t3po.metrics import AggregateResult

    ref = runner.load_reference()
    assert ref["kather5k"]["S1"]["t3po"] == [92.54, 93.55]
    meta = {"kather5k S1 (Split 0)": {"dataset": "kather5k", "name": "S1"}, "synthetic S1": {"dataset": "synthetic", "name": "S1"}}
    aggs = [
        AggregateResult("kather5k S1 (Split 0)", "t3po", 10, 0.93, 0.91, 0.01, 0.01),
        AggregateResult("kather5k S1 (Split 0)", "maxlogit", 10, 0.90, 0.91, 0.01, 0.01),
        AggregateResult("kather5k S1 (Split 0)", "msp", 10, 0.93, 0.91, 0.01, 0.01),
        AggregateResult("synthetic S1", "t3po", 3, 1.0, 0.5, 0.0, 0.0),
    ]
    rows = runner.reference_rows(aggs, meta)
    assert [(r["scorer_id"], r["within_tolerance"]) for r in rows] == [("t3po", True), ("maxlogit", False)]
