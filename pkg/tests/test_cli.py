import csv
import io
import json

import pytest

from tripletnids import harness
from tripletnids.cli import main
from tripletnids.data import make_blobs, save_csv


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def data_dir(tmp_path, capsys):
    code, _, _ = run(capsys, "split", "--synthetic", "blobs", "--classes", "3", "--dim", "5", "--sep", "6",
                     "--counts", "300,40,40", "--out", str(tmp_path / "data"))
    assert code == 0
    return tmp_path / "data"


@pytest.fixture
def config(tmp_path, data_dir):
    p = tmp_path / "exp.ini"
    p.write_text(
        "[experiment]\nname = demo\ntrain_csv = data/train.csv\ntest_csv = data/test.csv\n"
        "repetitions = 1\nn_benign = 60\nn_per_attack = 8\nfolds = 2\nbudget = 1\nepochs = 2\n"
        "[fixed]\nlr = 0.003\nbatch_size = 32\nneurons = 16\ndepth = 1\nf_out = 4\nk = 3\n")
    return p


def test_split_outputs_and_byte_identical(tmp_path, data_dir, capsys):
    assert len((data_dir / "train.csv").read_text().splitlines()) == 1 + 190
    assert json.loads((data_dir / "classes.json").read_text())["classes"] == ["benign", "attack1", "attack2"]
    run(capsys, "split", "--synthetic", "blobs", "--classes", "3", "--dim", "5", "--sep", "6",
        "--counts", "300,40,40", "--out", str(tmp_path / "again"))
    for name in ("train.csv", "test.csv", "classes.json"):
        assert (data_dir / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_split_csv_halves(tmp_path, capsys):
    save_csv(make_blobs([10, 6], 2, 3.0, 0), tmp_path / "in.csv", "Label")
    code, out, _ = run(capsys, "split", "--input", str(tmp_path / "in.csv"), "--label-col", "Label",
                       "--out", str(tmp_path / "o"))
    assert code == 0 and "train=8 test=8" in out


def test_missing_label_column_exit_2(tmp_path, capsys):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    code, _, err = run(capsys, "split", "--input", str(tmp_path / "x.csv"), "--label-col", "Label",
                       "--out", str(tmp_path / "o"))
    assert code == 2 and "Label" in err


def test_bad_config_exit_2(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[experiment]\nbudget = 0\n")
    assert run(capsys, "search", "--config", str(tmp_path / "bad.ini"))[0] == 2


def test_data_error_exit_3(tmp_path, capsys):
    (tmp_path / "x.csv").write_text("a,label\nfoo,benign\n")
    assert run(capsys, "split", "--input", str(tmp_path / "x.csv"), "--out", str(tmp_path / "o"))[0] == 3


def test_numeric_failure_exit_4(tmp_path, config, capsys):
    code, _, err = run(capsys, "search", "--config", str(config), "--override", "fixed.lr=1e300",
                       "--run-root", str(tmp_path / "runs"))
    assert code == 4 and "numeric" in err


def test_override_precedence(config):
    assert harness.load_config(config, ["n_per_attack=10"]).n_per_attack == (10,)
    assert harness.load_config(config).n_per_attack == (8,)


def test_train_then_eval_self_consistent(tmp_path, config, capsys):
    code, out, _ = run(capsys, "train", "--config", str(config), "--run-root", str(tmp_path / "runs"))
    assert code == 0
    bundle_path = out.strip()
    stored = json.loads(open(bundle_path).read())["train_score"]
    subset = bundle_path.replace("bundle.json", "train_subset.csv")
    code, out, _ = run(capsys, "eval", "--bundle", bundle_path, "--input", subset)
    assert code == 0
    assert abs(json.loads(out)["macro_f1"] - stored["macro_f1"]) < 1e-9


def test_search_idempotent(tmp_path, config, capsys):
    root = str(tmp_path / "runs")
    _, out1, _ = run(capsys, "search", "--config", str(config), "--run-root", root)
    first = open(out1.strip(), "rb").read()
    _, out2, _ = run(capsys, "search", "--config", str(config), "--run-root", root)
    assert out1 == out2 and open(out2.strip(), "rb").read() == first


def test_ablate_mining_writes_three_reports(tmp_path, config, capsys):
    code, out, _ = run(capsys, "ablate", "--config", str(config), "--axis", "mining",
                       "--run-root", str(tmp_path / "runs"))
    paths = out.split()
    assert code == 0 and len(paths) == 3
    assert {json.load(open(p))["value"] for p in paths} == {"batch_all", "batch_hard", "batch_semi_hard"}


def _fake_report(label, n_m, f1):
    stats = {k: {"mean": f1, "std": 0.0} for k in harness.SUMMARY_KEYS}
    return {"label": label, "config": {}, "results": [{"n_per_attack": n_m, "subsets": [], "summary": stats}]}


def test_report_formats(tmp_path, capsys):
    for i, (label, n_m, f1) in enumerate([("zeta", 10, 0.1), ("alpha", 160, 0.2), ("beta", 10, 0.3)]):
        (tmp_path / f"r{i}.json").write_text(harness.dump_report(_fake_report(label, n_m, f1)))
    code, out, _ = run(capsys, "report", "--run", str(tmp_path))
    body = out.splitlines()[2:]
    assert code == 0 and [line.split()[0] for line in body] == ["beta", "zeta", "alpha"]
    _, out, _ = run(capsys, "report", "--run", str(tmp_path), "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    _, js, _ = run(capsys, "report", "--run", str(tmp_path), "--format", "json")
    for r, j in zip(rows, json.loads(js)):
        assert float(r["macro_f1_mean"]) == j["macro_f1_mean"]


def test_report_single_row_std_zero(tmp_path, config, capsys):
    root = tmp_path / "runs"
    _, out, _ = run(capsys, "search", "--config", str(config), "--run-root", str(root))
    run_path = out.strip().rsplit("/", 1)[0]
    code, out, _ = run(capsys, "report", "--run", run_path)
    lines = out.splitlines()
    assert code == 0 and len(lines) == 3 and "± 0.0000" in lines[2]


def test_report_missing_dir_exit_3(tmp_path, capsys):
    assert run(capsys, "report", "--run", str(tmp_path / "none"))[0] == 3
