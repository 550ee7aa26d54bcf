"""End-to-end tests for the picknet command line."""

import json

import numpy as np
import pytest

from conftest import synthetic_speech
from picknet.audio_io import read_wav, write_wav
from picknet.checkpoint import load_checkpoint
from picknet.dsp import AudioClip
from picknet.error_handler import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE
from picknet.main import main

TRAIN_SET = ["--set", "train.max_frames_per_sample=16", "--set", "train.batch_frames=8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for i in range(3):
        clip = AudioClip(4.0 * synthetic_speech(1.5, seed=20 + i).samples)
        write_wav(str(root / "clean" / f"utt{i}.wav"), clip)
    code = main(["simulate", "--clean-dir", str(root / "clean"), "--out-dir", str(root / "data"),
                 "--n-samples", "3", "--seed", "4", "--set", "simulation.inject_transient=false"])
    assert code == EXIT_OK
    code = main(["train", "--manifest", str(root / "data" / "manifest.jsonl"), "--out", str(root / "model.pknt"),
                 *TRAIN_SET])
    assert code == EXIT_OK
    return root


def _noisy(root, sample="000000"):
    return [str(root / "data" / "samples" / sample / f"noisy_{m}.wav") for m in range(2)]


# ---------------------------------------------------------------------------
# simulate / train
# ---------------------------------------------------------------------------


class TestSimulate:
    def test_manifest(self, workspace):
        lines = (workspace / "data" / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
        assert [json.loads(line)["id"] for line in lines] == ["000000", "000001", "000002"]

    def test_same_seed_same_output(self, workspace, tmp_path):
        args = ["simulate", "--clean-dir", str(workspace / "clean"), "--n-samples", "3", "--seed", "4",
                "--set", "simulation.inject_transient=false"]
        assert main(args + ["--out-dir", str(tmp_path / "again")]) == EXIT_OK
        assert ((tmp_path / "again" / "manifest.jsonl").read_bytes()
                == (workspace / "data" / "manifest.jsonl").read_bytes())
        for name in _noisy(workspace):
            rel = name.split("data/", 1)[1]
            assert (tmp_path / "again" / rel).read_bytes() == open(name, "rb").read()

    def test_missing_clean_dir(self, tmp_path):
        code = main(["simulate", "--clean-dir", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "out")])
        assert code == EXIT_USAGE
        assert not (tmp_path / "out").exists()


class TestTrain:
    def test_one_log_line_per_step(self, workspace):
        log = (workspace / "model.pknt.train.jsonl").read_text(encoding="utf-8").splitlines()
        # 3 サンプル x 16 フレーム / バッチ 8
        assert len(log) == 6
        assert [json.loads(line)["step"] for line in log] == list(range(1, 7))
        ck = load_checkpoint(str(workspace / "model.pknt"))
        assert ck.metadata["train_state"] == {"epoch": 1, "step": 6}
        assert (workspace / "model.pknt.config.json").exists()

    def test_resume(self, workspace, tmp_path):
        out = tmp_path / "resumed.pknt"
        code = main(["train", "--manifest", str(workspace / "data" / "manifest.jsonl"), "--out", str(out),
                     "--resume", str(workspace / "model.pknt"), "--set", "train.epochs=2", *TRAIN_SET])
        assert code == EXIT_OK
        assert load_checkpoint(str(out)).metadata["train_state"] == {"epoch": 2, "step": 12}

    def test_missing_manifest(self, tmp_path):
        code = main(["train", "--manifest", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "m.pknt")])
        assert code == EXIT_USAGE

    def test_bad_override(self, workspace, tmp_path):
        code = main(["train", "--manifest", str(workspace / "data" / "manifest.jsonl"),
                     "--out", str(tmp_path / "m.pknt"), "--set", "train.lerning_rate=1"])
        assert code == EXIT_USAGE
        assert not (tmp_path / "m.pknt").exists()


# ---------------------------------------------------------------------------
# enhance
# ---------------------------------------------------------------------------


class TestEnhance:
    def test_writes_outputs(self, workspace, tmp_path):
        prefix = tmp_path / "out" / "meeting"
        code = main(["enhance", *_noisy(workspace), "--checkpoint", str(workspace / "model.pknt"),
                     "--out-prefix", str(prefix), "--timeline", str(tmp_path / "tl.jsonl"),
                     "--rttm", str(tmp_path / "dev.rttm")])
        assert code == EXIT_OK
        enhanced = read_wav(f"{prefix}.wav")
        T = len((tmp_path / "tl.jsonl").read_text(encoding="utf-8").splitlines())
        assert len(enhanced) == (T - 1) * 256 + 512
        rttm = (tmp_path / "dev.rttm").read_text(encoding="utf-8").splitlines()
        assert rttm and all(line.startswith("SPEAKER meeting 1 ") for line in rttm)
        assert (tmp_path / "out" / "meeting.config.json").exists()

    def test_missing_checkpoint(self, workspace, tmp_path):
        prefix = tmp_path / "out" / "meeting"
        code = main(["enhance", *_noisy(workspace), "--checkpoint", str(tmp_path / "absent.pknt"),
                     "--out-prefix", str(prefix), "--timeline", str(tmp_path / "tl.jsonl")])
        assert code == EXIT_USAGE
        assert list(tmp_path.iterdir()) == []

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        bad = tmp_path / "bad.pknt"
        bad.write_bytes((workspace / "model.pknt").read_bytes()[:200])
        code = main(["enhance", *_noisy(workspace), "--checkpoint", str(bad), "--out-prefix", str(tmp_path / "o")])
        assert code == EXIT_RUNTIME
        assert not (tmp_path / "o.wav").exists()

    def test_single_input_is_identity(self, workspace, tmp_path):
        source = _noisy(workspace)[0]
        prefix = tmp_path / "single"
        code = main(["enhance", source, "--checkpoint", str(workspace / "model.pknt"), "--out-prefix", str(prefix),
                     "--set", "stream.synchronize=false"])
        assert code == EXIT_OK
        x = read_wav(source).samples
        y = read_wav(f"{prefix}.wav").samples
        s = slice(512, len(y) - 512)
        err = x[s] - y[s]
        assert 10 * np.log10(np.sum(x[s] ** 2) / np.sum(err ** 2)) > 60.0

    def test_max_energy_needs_no_checkpoint(self, workspace, tmp_path):
        code = main(["enhance", *_noisy(workspace), "--out-prefix", str(tmp_path / "me"),
                     "--set", "stream.selector=\"max_energy\""])
        assert code == EXIT_OK

    def test_subsample_flag(self, workspace, tmp_path):
        code = main(["enhance", *_noisy(workspace), "--checkpoint", str(workspace / "model.pknt"),
                     "--out-prefix", str(tmp_path / "n1"), "--subsample-n", "1", "--timeline", str(tmp_path / "tl.jsonl")])
        assert code == EXIT_OK
        rows = [json.loads(line) for line in (tmp_path / "tl.jsonl").read_text(encoding="utf-8").splitlines()]
        assert all(row["evaluated"] for row in rows)


# ---------------------------------------------------------------------------
# eval / bench / parser
# ---------------------------------------------------------------------------


def test_eval_report(workspace, tmp_path):
    out = tmp_path / "report.json"
    code = main(["eval", "--manifest", str(workspace / "data" / "manifest.jsonl"),
                 "--checkpoint", str(workspace / "model.pknt"), "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["n_records"] == 3
    assert 0.0 <= report["accuracy"] <= 1.0
    assert 0.0 <= report["max_energy_accuracy"] <= 1.0


def test_bench_table(workspace, tmp_path, capsys):
    out = tmp_path / "bench.json"
    code = main(["bench", "--checkpoint", str(workspace / "model.pknt"), "--m-list", "1", "2", "4",
                 "--n-frames", "6", "--out", str(out)])
    assert code == EXIT_OK
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert [row["evaluations_subsampled"] for row in payload["rows"]] == [2, 2, 2]
    assert payload["mac_fit"]["residual"] == 0.0
    assert "MAC(M) =" in capsys.readouterr().out


def test_json_log(workspace, tmp_path):
    log = tmp_path / "run.jsonl"
    code = main(["bench", "--checkpoint", str(workspace / "model.pknt"), "--m-list", "2", "--n-frames", "3",
                 "--log", str(log)])
    assert code == EXIT_OK
    rows = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
    assert rows[0]["message"] == "Running bench"
    assert rows[0]["event"]["effective_config"]["bench"]["m_list"] == [2, 4, 8]


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["bench", "--n-frames", "many"]])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE
