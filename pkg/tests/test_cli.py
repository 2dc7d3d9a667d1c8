import json

import numpy as np
import pytest

from retagnn.checkpoint import read_checkpoint
from retagnn.cli import main
from retagnn.ssa import read_matrix

SMALL = ["--d", "4", "--t", "4", "--g", "1", "--tau", "2", "--h", "1", "--l-lo", "1",
         "--l-sh", "2", "--stride", "4", "--seed", "1"]


def planted(tmp_path, name="bundle", users=30, items=40, attrs=4, seed=1):
    out = tmp_path / name
    code = main(["ingest", "--dataset", "planted", "--out", str(out), "--seed", str(seed),
                 "--planted-users", str(users), "--planted-items", str(items),
                 "--planted-attrs", str(attrs)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    bundle = planted(tmp)
    run = tmp / "run"
    code = main(["train", "--bundle", str(bundle), "--out", str(run), "--epochs", "2"] + SMALL)
    assert code == 0
    return tmp, bundle, run


def test_ingest_writes_stats_with_config(tmp_path, capsys):
    out = planted(tmp_path)
    printed = capsys.readouterr().out
    assert "seed=1" in printed
    files = {p.name for p in out.iterdir()}
    assert files
    text = "".join(p.read_text() for p in out.iterdir() if p.suffix == ".txt")
    assert "config.dataset=planted" in text


def test_train_writes_checkpoint_and_curve(trained):
    _, _, run = trained
    header, tensors = read_checkpoint(run / "model.ckpt")
    assert header["d"] == "4" and header["command"] == "train"
    assert all(np.all(np.isfinite(v)) for v in tensors.values())
    lines = (run / "loss_curve.txt").read_text().splitlines()
    assert "# d=4" in lines
    rows = [l.split() for l in lines if not l.startswith("#")]
    assert [r[0] for r in rows][:1] == ["1"] and all(float(r[1]) > 0 for r in rows)


def test_eval_report(trained):
    tmp, bundle, run = trained
    out = tmp / "eval"
    code = main(["eval", "--bundle", str(bundle), "--checkpoint", str(run / "model.ckpt"),
                 "--out", str(out)] + SMALL)
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["setting"] == "CSR" and 0 <= rep["ndcg"] <= 1
    assert rep["config"]["d"] == 4
    assert "config.seed=1" in (out / "report.txt").read_text()


def test_eval_isr(trained):
    tmp, bundle, run = trained
    out = tmp / "isr"
    code = main(["eval", "--bundle", str(bundle), "--checkpoint", str(run / "model.ckpt"),
                 "--protocol", "isr", "--out", str(out)] + SMALL)
    assert code == 0
    assert json.loads((out / "report.json").read_text())["setting"] == "ISR"


def test_transfer_to_other_catalog(trained):
    tmp, _, _ = trained
    src = planted(tmp, "src_b", users=25, items=35, attrs=4, seed=3)
    run = tmp / "src_run"
    assert main(["train", "--bundle", str(src), "--out", str(run), "--epochs", "1",
                 "--use-attributes", "false"] + SMALL) == 0
    target = planted(tmp, "tgt", users=22, items=50, attrs=6, seed=4)
    out = tmp / "tsr"
    code = main(["transfer", "--source", str(run / "model.ckpt"), "--target", str(target),
                 "--out", str(out)] + SMALL)
    assert code == 0
    assert json.loads((out / "report.json").read_text())["setting"] == "TSR"


def test_dump_subgraph(trained, capsys):
    tmp, bundle, _ = trained
    out = tmp / "dump"
    assert main(["dump-subgraph", "--bundle", str(bundle), "--out", str(out),
                 "--sample", "0", "--term", "1"] + SMALL) == 0
    text = (out / "subgraph_0_1.txt").read_text()
    assert "# command=dump-subgraph" in text and "hop=0 seed" in text
    assert main(["dump-subgraph", "--bundle", str(bundle), "--out", str(out),
                 "--term", "5"] + SMALL) == 2


def test_export_attention_both_splits(trained):
    tmp, bundle, run = trained
    out = tmp / "att"
    assert main(["export-attention", "--bundle", str(bundle), "--out", str(out),
                 "--checkpoint", str(run / "model.ckpt")] + SMALL) == 0
    for split in ("train", "validation"):
        m = read_matrix(out / f"attention_{split}_long.txt")
        assert m.shape == (4, 4)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(m[np.triu_indices(4, 1)] == 0)
        assert read_matrix(out / f"attention_{split}_short1.txt").shape == (2, 2)


def test_exit_codes(tmp_path, trained):
    _, bundle, _ = trained
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp_factor=9\n")
    assert main(["train", "--config", str(cfg), "--bundle", str(bundle),
                 "--out", str(tmp_path)]) == 2
    assert main(["train", "--bundle", str(bundle), "--d", "zero", "--out", str(tmp_path)]) == 2
    assert main(["train", "--bundle", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    # planted sequences are at most 30 long, so no t+g window fits
    assert main(["train", "--bundle", str(bundle), "--out", str(tmp_path), "--t", "40"]) == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"nope")
    assert main(["eval", "--bundle", str(bundle), "--checkpoint", str(junk),
                 "--out", str(tmp_path)] + SMALL) == 3
    # checkpoint trained at d=4 cannot be loaded into a d=8 model
    assert main(["eval", "--bundle", str(bundle), "--out", str(tmp_path), "--checkpoint",
                 str(trained[2] / "model.ckpt")] + SMALL + ["--d", "8"]) == 3


def test_unknown_flag_is_usage_error(trained):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-key", "1"])
    assert exc.value.code == 2


def test_config_echo(tmp_path, capsys, trained):
    _, bundle, _ = trained
    main(["dump-subgraph", "--bundle", str(bundle), "--out", str(tmp_path)] + SMALL)
    out = capsys.readouterr().out
    assert "rar_lambda=0.6" in out and "d=4" in out
