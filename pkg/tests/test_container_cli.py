import csv
import json

import numpy as np
import pytest

from nodeonet import cli
from nodeonet.config import parse_config
from nodeonet.container import from_bytes, read_container, to_bytes, write_container
from nodeonet.dataset import load_dataset
from nodeonet.errors import ConfigError, ContainerFormatError
from nodeonet.training import load_checkpoint


# -- container ----------------------------------------------------------------------


def test_container_round_trip_bytes(tmp_path):
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([1.5]), "empty": np.zeros((0, 3))}
    meta = {"kind": "demo", "nested": {"x": [1, 2]}}
    write_container(tmp_path / "one", arrays, meta)
    got, got_meta = read_container(tmp_path / "one")
    assert got_meta == meta
    assert all(np.array_equal(got[k], arrays[k]) and got[k].shape == arrays[k].shape for k in arrays)
    write_container(tmp_path / "two", got, got_meta)
    assert (tmp_path / "one").read_bytes() == (tmp_path / "two").read_bytes()


def test_container_payload_alignment():
    buf = to_bytes({"x": np.ones(3), "y": np.ones((2, 2))}, {"k": "a"})
    header_len = int.from_bytes(buf[12:16], "little")
    assert (16 + header_len) % 8 == 0
    header = json.loads(buf[16:16 + header_len])
    assert all(e["byte_offset"] % 8 == 0 for e in header["arrays"])


def test_container_rejects_corruption():
    buf = to_bytes({"x": np.ones(4)})
    for bad in (b"XXXXXXXX" + buf[8:], buf[:-8], buf[:20]):
        with pytest.raises(ContainerFormatError):
            from_bytes(bad)
    with pytest.raises(ContainerFormatError):
        to_bytes({"s": np.array(["a"])})


def test_container_integers_stored_exactly():
    got, _ = from_bytes(to_bytes({"i": np.array([1, 2, 2**52])}))
    assert np.array_equal(got["i"], [1.0, 2.0, 2.0**52])


# -- config -------------------------------------------------------------------------


BASE = {
    "problem": "dr-source",
    "grids": {"N_x": 10, "N_t": 5, "d_V": 20, "d_U": 10},
    "node": {"P": 10},
    "decoder": {"kind": "learned", "hidden": [10]},
    "train": {"epochs": 0},
}


def test_config_accepts_base():
    cfg = parse_config(BASE)
    assert cfg.variant().kind == "source" and cfg.variant().d_V == 20


def test_config_rejects_unknown_keys_and_bad_variant():
    with pytest.raises(ConfigError):
        parse_config({**BASE, "optimizer": "sgd"})
    with pytest.raises(ConfigError):
        parse_config({**BASE, "node": {"P": 10, "variant": "ns"}})
    with pytest.raises(ConfigError):
        parse_config({**BASE, "train": {"epochs": -1}})


# -- CLI ----------------------------------------------------------------------------


def run(*args) -> int:
    return cli.main([str(a) for a in args])


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(BASE))
    for section, values in overrides.items():
        if isinstance(values, dict):
            cfg[section].update(values)
        else:
            cfg[section] = values
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds.bin"
    assert run("gen-data", "--problem", "dr-source", "--n-train", 3, "--n-test", 2, "--nx", 10, "--nt", 5,
               "--nx-test", 10, "--nt-test", 5, "--seed", 1, "--out", out) == 0
    return out


def test_gen_data_metadata(data, capsys):
    ds = load_dataset(data)
    assert ds.settings.nx == 10 and ds.settings.nt == 5
    assert ds.train.labels.shape == (3, 5, 10)


def test_gen_data_edge_cases(tmp_path, capsys):
    assert run("gen-data", "--problem", "dr-source", "--n-train", 0, "--n-test", 1, "--nx", 10, "--nt", 5,
               "--nx-test", 10, "--nt-test", 5, "--out", tmp_path / "t.bin") == 0
    assert json.loads(capsys.readouterr().out)["n_train"] == 0
    with pytest.raises(SystemExit) as info:
        run("gen-data", "--problem", "heat", "--n-train", 1, "--out", tmp_path / "x.bin")
    assert info.value.code == 2


def test_train_zero_epochs_is_initialization(data, tmp_path, capsys):
    from nodeonet.training import build_model

    cfg = write_config(tmp_path / "c.json")
    assert run("train", "--data", data, "--config", cfg, "--out", tmp_path / "m.ckpt") == 0
    model, _, _ = load_checkpoint(tmp_path / "m.ckpt")
    c = parse_config(BASE)
    ref = build_model(c.variant(), c.decoder_obj(), c.encoder(), 1.0, 5, 0)
    assert all(np.array_equal(model.params[k], ref.params[k]) for k in ref.params)
    rows = list(csv.reader(open(f"{tmp_path / 'm.ckpt'}.history.csv")))
    assert rows[0] == ["epoch", "data_term", "reg_term", "total"]


def test_train_resume_and_eval(data, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"epochs": 40, "learning_rate": 1e-2})
    assert run("train", "--data", data, "--config", cfg, "--out", tmp_path / "full.ckpt") == 0
    final = json.loads(capsys.readouterr().out)
    assert final["epoch"] == 40
    assert run("train", "--data", data, "--config", cfg, "--out", tmp_path / "half.ckpt", "--stop-at", 15) == 0
    assert run("train", "--data", data, "--config", cfg, "--out", tmp_path / "resumed.ckpt",
               "--resume", tmp_path / "half.ckpt") == 0
    a, _, _ = load_checkpoint(tmp_path / "full.ckpt")
    b, _, _ = load_checkpoint(tmp_path / "resumed.ckpt")
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    other = write_config(tmp_path / "o.json", node={"P": 7})
    assert run("train", "--data", data, "--config", other, "--out", tmp_path / "x.ckpt",
               "--resume", tmp_path / "half.ckpt") == 2

    capsys.readouterr()
    assert run("eval", "--checkpoint", tmp_path / "full.ckpt", "--data", data, "--split", "train",
               "--report", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    # the training data term is the squared RMS error on the training split
    assert report["absolute_error"] ** 2 == pytest.approx(final["data_term"], rel=0.1)

    assert run("export-plot", "--report", tmp_path / "r.json", "--out", tmp_path / "e.csv") == 0
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["t", "absolute_error", "relative_error", "training_horizon"]
    assert len(rows) == 1 + 5 and all(r[3] == "1" for r in rows[1:])
    assert run("export-plot", "--report", tmp_path / "r.json", "--kind", "field", "--out", tmp_path / "f.csv") == 0
    assert len(list(csv.reader(open(tmp_path / "f.csv")))) == 1 + 10
    assert run("export-plot", "--report", tmp_path / "r.json", "--format", "png") == 2


def test_train_rejects_mismatched_config(data, tmp_path):
    cfg = write_config(tmp_path / "c.json", grids={"N_x": 12})
    assert run("train", "--data", data, "--config", cfg, "--out", tmp_path / "m.ckpt") == 2


def test_toy_training_through_cli(data, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"epochs": 300, "learning_rate": 1e-2})
    assert run("train", "--data", data, "--config", cfg, "--out", tmp_path / "m.ckpt") == 0
    out = json.loads(capsys.readouterr().out)
    model, _, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert out["total"] == meta["final_loss"]["total"]
    first = float(list(csv.reader(open(f"{tmp_path / 'm.ckpt'}.history.csv")))[1][3])
    assert out["total"] < first


def test_export_empty_report(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"per_time": [], "field_slices": []}))
    assert run("export-plot", "--report", tmp_path / "r.json", "--out", tmp_path / "e.csv") == 0
    assert (tmp_path / "e.csv").read_text().strip() == "t,absolute_error,relative_error,training_horizon"


def test_consistency_and_gradcheck(tmp_path, capsys):
    assert run("consistency", "--class", "holder", "--alpha", 0.5, "--levels", 6, "--report", tmp_path / "c.json") == 0
    order = json.loads(capsys.readouterr().out)["order_d1"]
    assert abs(order - 0.5) <= 0.15
    assert run("gradcheck", "--seed", 7) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True


def test_missing_files_exit_2(tmp_path, capsys):
    assert run("eval", "--checkpoint", tmp_path / "none.ckpt", "--data", tmp_path / "none.bin",
               "--report", tmp_path / "r.json") == 2
    (tmp_path / "junk").write_bytes(b"not a container")
    assert run("eval", "--checkpoint", tmp_path / "junk", "--data", tmp_path / "junk", "--report", tmp_path / "r.json") == 2
    assert "error" in capsys.readouterr().err


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("NODEONET_THREADS", "3")
    args = cli.build_parser().parse_args(["gen-data", "--problem", "dr-source", "--n-train", "1", "--out", "x"])
    assert cli._threads(args) == 3
    args.threads = 2
    assert cli._threads(args) == 2
