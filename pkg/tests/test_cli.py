import json
import subprocess
import sys

import numpy as np
import pytest

from lowrank_mtl import checkpoint, cli, numkern
from lowrank_mtl.experiment import numerical_rank, sparsity_fraction


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture
def dataset_file(tmp_path, capsys):
    path = tmp_path / "data.jsonl"
    code, _ = run(capsys, "generate", "--n", 40, "--seed", 7, "--out", path)
    assert code == 0
    return path


def _train(capsys, tmp_path, data, tag, *extra):
    ck, mt = tmp_path / f"{tag}.json", tmp_path / f"{tag}.csv"
    code, out = run(capsys, "train", "--data", data, "--checkpoint", ck, "--metrics", mt, *extra)
    return code, out, ck, mt


def test_generate_writes_header_plus_records(tmp_path, capsys, dataset_file):
    lines = dataset_file.read_text().splitlines()
    assert len(lines) == 41
    assert json.loads(lines[0]) == {"m": 8, "input_shape": [1, 64]}
    again = tmp_path / "again.jsonl"
    run(capsys, "generate", "--n", 40, "--seed", 7, "--out", again)
    assert again.read_bytes() == dataset_file.read_bytes()


def test_generate_bad_rank_is_usage_error(tmp_path, capsys):
    code, out = run(capsys, "generate", "--rank", 9, "--out", tmp_path / "x.jsonl")
    assert code == 2
    assert "rank=9, m=8" in out.err


def test_train_one_iteration(tmp_path, capsys, dataset_file):
    code, out, ck, mt = _train(capsys, tmp_path, dataset_file, "a", "--max-iters", 1)
    assert code == 0
    summary = json.loads(out.out)
    assert summary["iter"] == 1
    lines = mt.read_text().splitlines()
    assert lines[0].startswith("# config: ")
    assert lines[1] == ",".join(checkpoint.METRICS_COLUMNS)
    assert len(lines) == 4
    rows = checkpoint.read_metrics(mt)
    assert [r["iter"] for r in rows] == [0, 1]
    state = checkpoint.load_checkpoint(ck)
    assert rows[-1]["total"] == state.history[-1].total


def test_metrics_golden_header():
    assert ",".join(checkpoint.METRICS_COLUMNS) == (
        "iter,total,complexity,error,nuclear,sparsity,consistency,train_accuracy,test_accuracy"
    )


def test_non_finite_training_exits_3(tmp_path, capsys):
    path = tmp_path / "huge.jsonl"
    rows = [json.dumps({"m": 2, "input_shape": [1, 64]})]
    for i in range(6):
        rows.append(json.dumps({"input": [[1e200 * (-1) ** (i + j) for j in range(64)]], "labels": [1, -1]}))
    path.write_text("\n".join(rows) + "\n")
    with np.errstate(all="ignore"):
        code, out, _, _ = _train(capsys, tmp_path, path, "a", "--max-iters", 1)
    assert code == 3
    assert "non-finite objective" in out.err


def test_train_is_byte_deterministic(tmp_path, capsys, dataset_file):
    _, _, ck, mt = _train(capsys, tmp_path, dataset_file, "a", "--max-iters", 3)
    first = ck.read_bytes(), mt.read_bytes()
    _train(capsys, tmp_path, dataset_file, "a", "--max-iters", 3)
    assert (ck.read_bytes(), mt.read_bytes()) == first


def test_resume_matches_straight_run(tmp_path, capsys, dataset_file):
    _, _, ck_full, _ = _train(capsys, tmp_path, dataset_file, "full", "--max-iters", 4)
    _, _, ck_half, _ = _train(capsys, tmp_path, dataset_file, "half", "--max-iters", 2)
    code, _, ck_res, mt_res = _train(
        capsys, tmp_path, dataset_file, "res", "--max-iters", 4, "--resume", ck_half)
    assert code == 0
    assert ck_res.read_bytes() == ck_full.read_bytes()
    assert [r["iter"] for r in checkpoint.read_metrics(mt_res)] == [3, 4]


def test_eval_report(tmp_path, capsys, dataset_file):
    _, _, ck, _ = _train(capsys, tmp_path, dataset_file, "a", "--max-iters", 2)
    code, out = run(capsys, "eval", "--checkpoint", ck, "--data", dataset_file)
    assert code == 0
    rep = json.loads(out.out)
    assert len(rep["per_task_accuracy"]) == 8 and rep["n"] == 40
    assert rep["average_accuracy"] == pytest.approx(np.mean(rep["per_task_accuracy"]), abs=1e-15)
    params = checkpoint.load_checkpoint(ck).params
    assert rep["numerical_rank_w1"] == numerical_rank(params.heads.w1)
    s = np.linalg.svd(params.heads.w1, compute_uv=False)
    assert rep["numerical_rank_w1"] == int(np.sum(s > 1e-3 * s[0]))
    assert rep["sparsity_w2"] == float(np.mean(np.abs(params.heads.w2) < 1e-4))
    code, out = run(capsys, "eval", "--checkpoint", ck, "--data", dataset_file, "--subset", "test")
    assert json.loads(out.out)["n"] == 20


def test_eval_mismatched_tasks(tmp_path, capsys, dataset_file):
    _, _, ck, _ = _train(capsys, tmp_path, dataset_file, "a", "--max-iters", 1)
    other = tmp_path / "m3.jsonl"
    run(capsys, "generate", "--n", 10, "--m", 3, "--out", other)
    code, out = run(capsys, "eval", "--checkpoint", ck, "--data", other)
    assert code == 2 and "m=3" in out.err


def test_missing_and_malformed_inputs(tmp_path, capsys, dataset_file):
    code, out = run(capsys, "train", "--data", dataset_file, "--metrics", tmp_path / "m.csv")
    assert code == 2 and "--checkpoint" in out.err
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"m": 2, "input_shape": [1, 4]}\n{oops\n')
    code, out = _train(capsys, tmp_path, bad, "x")[:2]
    assert code == 2 and "line 2" in out.err
    code, out = _train(capsys, tmp_path, tmp_path / "absent.jsonl", "x")[:2]
    assert code == 2


def test_gradcheck_exit_codes(capsys):
    code, out = run(capsys, "gradcheck")
    assert code == 0 and "gradcheck passed" in out.out
    code, out = run(capsys, "gradcheck", "--epsilon", 0.1)
    assert code == 1 and "worst block" in out.out
    code, _ = run(capsys, "gradcheck", "--epsilon", 0.1, "--tolerance", 10)
    assert code == 0


def test_config_file_precedence(tmp_path, capsys, dataset_file):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"hyper": {"c2": 5.0, "c3": 3.0}, "stop": {"max_outer_iters": 1}}))
    code, _, ck, mt = _train(capsys, tmp_path, dataset_file, "a", "--config", cfg, "--c2", 7)
    assert code == 0
    state = checkpoint.load_checkpoint(ck)
    assert (state.hyper.c2, state.hyper.c3, state.iter) == (7.0, 3.0, 1)
    comment = json.loads(mt.read_text().splitlines()[0][len("# config: "):])
    assert comment["hyper"]["c2"] == 7.0


def test_bad_config_keys(tmp_path, capsys, dataset_file):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"hyper": {"c9": 1.0}}))
    code, out, _, _ = _train(capsys, tmp_path, dataset_file, "a", "--config", cfg)
    assert code == 2 and "c9" in out.err


def test_network_that_does_not_fit(tmp_path, capsys, dataset_file):
    code, out, _, _ = _train(capsys, tmp_path, dataset_file, "a", "--kernels", "40,3,3,3")
    assert code == 2 and "exceeds" in out.err


def test_sweep(tmp_path, capsys, dataset_file):
    out_dir = tmp_path / "sweep"
    code, out = run(capsys, "sweep", "--data", dataset_file, "--param", "c3", "--values", "0.01,100",
                    "--max-iters", 2, "--out-dir", out_dir)
    assert code == 0
    assert len(out.out.strip().splitlines()) == 2
    table = (out_dir / "sweep_c3.csv").read_text().splitlines()
    assert table[0].startswith("value,final_total")
    assert len(table) == 3
    for tag in ("c3_0.01", "c3_100"):
        assert (out_dir / f"{tag}.checkpoint.json").exists()
        st = checkpoint.load_checkpoint(out_dir / f"{tag}.checkpoint.json")
        assert st.hyper.c3 == float(tag.split("_")[1])
        assert sparsity_fraction(st.params.heads.w2) >= 0.0
    assert numkern.svd(st.params.heads.w1).sigma.size == 8


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "lowrank_mtl.cli", "generate", "--n", "3", "--out", str(tmp_path / "d.jsonl")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["n"] == 3
