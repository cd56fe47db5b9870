import csv
import json

import numpy as np
import pytest

from fedgraph.cli import main
from fedgraph.graphs import read_gds

SMALL = [
    "synthetic.n_epochs=60",
    "synthetic.samples_per_epoch=128",
    "synthetic.base_bin=4",
    "synthetic.bin_step=10",
    "model.hidden_dim=8",
    "federation.epochs=2",
]


def run(out, *argv, seed=1, extra=()):
    sets = []
    for item in (f"paths.output_dir={json.dumps(str(out))}", *SMALL, *extra):
        sets += ["--set", item]
    return main([*argv, "--seed", str(seed), *sets])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-synthetic", "extract", "build-graphs"):
        assert run(out, cmd) == 0
    return out


def test_every_command_succeeds(pipeline, capsys):
    assert run(pipeline, "train", "--mode", "federated") == 0
    assert run(pipeline, "train", "--mode", "centralized") == 0
    for mode in ("federated", "centralized"):
        for name in ("metrics.json", "losses.csv", "model.mwt", "config.json"):
            assert (pipeline / mode / name).is_file()
    capsys.readouterr()
    assert run(pipeline, "evaluate", "--mode", "federated") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_samples"] == 15 and 0.0 <= doc["macro_f1"] <= 1.0
    for name in ("recording.sts", "features.npy", "graphs.gds", "federated/model.mwt"):
        assert main(["inspect", str(pipeline / name)]) == 0


def test_inspect_reports_types(pipeline, capsys):
    capsys.readouterr()
    main(["inspect", str(pipeline / "graphs.gds")])
    doc = json.loads(capsys.readouterr().out)
    assert doc["type"] == "graphs" and doc["n_samples"] == 60
    assert doc["class_counts"] == [12] * 5


def test_missing_labels_file(tmp_path, capsys):
    assert run(tmp_path, "gen-synthetic") == 0
    (tmp_path / "labels.csv").unlink()
    code = run(tmp_path, "extract")
    assert code != 0
    assert str(tmp_path / "labels.csv") in capsys.readouterr().err
    assert not (tmp_path / "features.npy").exists()


def test_features_do_not_depend_on_seed(pipeline, tmp_path):
    for name in ("recording.sts", "labels.csv"):
        (tmp_path / name).write_bytes((pipeline / name).read_bytes())
    assert run(tmp_path, "extract", seed=99) == 0
    assert (tmp_path / "features.npy").read_bytes() == (pipeline / "features.npy").read_bytes()


def test_db_without_positions_is_config_error(pipeline, tmp_path):
    for name in ("features.npy", "labels.csv"):
        (tmp_path / name).write_bytes((pipeline / name).read_bytes())
    assert run(tmp_path, "build-graphs", extra=["corr.kind=\"DB\""]) == 2
    assert not (tmp_path / "graphs.gds").exists()


def test_db_with_positions(pipeline, tmp_path):
    for name in ("features.npy", "labels.csv", "positions.csv", "recording.sts"):
        (tmp_path / name).write_bytes((pipeline / name).read_bytes())
    assert run(tmp_path, "build-graphs", extra=["corr.kind=\"DB\""]) == 0
    samples, meta = read_gds(tmp_path / "graphs.gds")
    assert meta["corr_kind"] == "DB"
    assert all(np.array_equal(s.a, samples[0].a) for s in samples)


def test_gds_round_trip(pipeline):
    samples, meta = read_gds(pipeline / "graphs.gds")
    feats = np.load(pipeline / "features.npy")
    assert len(samples) == feats.shape[0]
    for t in (0, 17, 59):
        assert samples[t].x.tobytes() == feats[t].tobytes()


@pytest.mark.parametrize("mode", ["federated", "centralized"])
def test_artifacts_independent_of_workers(pipeline, tmp_path, mode):
    for name in ("graphs.gds",):
        (tmp_path / name).write_bytes((pipeline / name).read_bytes())
    blobs = []
    for workers in ("1", "4", "1"):
        assert main(["train", "--mode", mode, "--workers", workers, "--seed", "1", "--set",
                     f"paths.output_dir={json.dumps(str(tmp_path))}", *sum((["--set", s] for s in SMALL), [])]) == 0
        blobs.append(tuple((tmp_path / mode / n).read_bytes() for n in ("metrics.json", "losses.csv", "model.mwt")))
    assert blobs[0] == blobs[1] == blobs[2]


def test_centralized_trains_on_one_client_share(pipeline):
    run(pipeline, "train", "--mode", "centralized")
    doc = json.loads((pipeline / "centralized" / "metrics.json").read_text())
    assert doc["n_test_samples"] == 15
    assert doc["n_train_samples"] == [45 // 5]
    with open(pipeline / "centralized" / "losses.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["client"] for r in rows if r["split"] == "train"} == {"0"}


def test_unknown_config_key(tmp_path, capsys):
    assert run(tmp_path, "gen-synthetic", extra=["model.depth=3"]) == 2
    assert "depth" in capsys.readouterr().err


def test_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 4, "paths": {"output_dir": str(tmp_path / "o")}, "synthetic": {"n_epochs": 20}}))
    assert main(["gen-synthetic", "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "recording.sts").is_file()
    cfg.write_text("{not json")
    assert main(["gen-synthetic", "--config", str(cfg)]) == 2


def test_corrupt_recording_is_data_error(tmp_path):
    assert run(tmp_path, "gen-synthetic") == 0
    rec = tmp_path / "recording.sts"
    rec.write_bytes(rec.read_bytes()[:-7])
    assert run(tmp_path, "extract") == 3
    assert not (tmp_path / "features.npy").exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".")] == []
