from __future__ import annotations

import json
import subprocess
import sys

import pytest

from convforge.cli import main

FAST = ["--epochs", "2", "--batch-size", "8"]


def _write(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_stats_single_conversation(tmp_path, capsys):
    data = _write(tmp_path / "d.jsonl", [
        {"id": "a", "summary": "s", "turns": [{"speaker": "A", "text": "a b c d e"}] * 4},
    ])
    assert main(["stats", "--input", str(data)]) == 0
    out = capsys.readouterr().out
    assert "avg_turns 4.00 +- 0.00" in out
    assert "avg_tokens_per_turn 5.00 +- 0.00" in out
    assert main(["stats", "--input", str(data), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["avg_turns"] == 4.0


def test_bad_input_exits_2(tmp_path, capsys):
    data = _write(tmp_path / "d.jsonl", [{"id": "a", "turns": [{"speaker": "A", "text": "x"}]}])
    assert main(["stats", "--input", str(data)]) == 2
    assert "missing field: summary at line 1" in capsys.readouterr().err
    assert main(["stats", "--input", str(tmp_path / "nope.jsonl")]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["stats", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_evaluate_summaries_id_mismatch(tmp_path, capsys):
    ref = _write(tmp_path / "ref.jsonl", [
        {"id": "a", "summary": "x y", "turns": [{"speaker": "A", "text": "x"}]},
        {"id": "b", "summary": "z w", "turns": [{"speaker": "A", "text": "z"}]},
    ])
    gen = _write(tmp_path / "gen.jsonl", [{"id": "a", "summary": "x y"}, {"id": "q", "summary": "z"}])
    assert main(["evaluate", "summaries", "--generated", str(gen), "--reference", str(ref)]) == 2
    err = capsys.readouterr().err
    assert "'b'" in err and "'q'" in err
    good = _write(tmp_path / "good.jsonl", [{"id": "a", "summary": "x y"}, {"id": "b", "summary": "z w"}])
    out_json = tmp_path / "m.json"
    assert main(["evaluate", "summaries", "--generated", str(good), "--reference", str(ref), "--output", str(out_json)]) == 0
    assert json.loads(out_json.read_text())["rouge2_f1"] == 1.0


def test_preprocess_anonymizes(tmp_path):
    raw = _write(tmp_path / "raw.jsonl", [
        {"id": "a", "summary": "John will be late", "dialogue": "John: late\nAmanda: ok"},
    ])
    out = tmp_path / "clean.jsonl"
    assert main(["preprocess", "--input", str(raw), "--output", str(out)]) == 0
    row = json.loads(out.read_text())
    assert row["summary"] == "person_0 will be late"


def test_pipeline_train_generate_evaluate(tmp_path, capsys):
    train, test = tmp_path / "train.jsonl", tmp_path / "test.jsonl"
    assert main(["synth", "--n", "40", "--output", str(train)]) == 0
    assert main(["synth", "--n", "5", "--split", "test", "--seed", "9", "--output", str(test)]) == 0
    assert main(["train-sl", "--train", str(train), "--output", str(tmp_path / "sl"), *FAST]) == 0
    assert main(["train-cn", "--train", str(train), "--output", str(tmp_path / "cn"), *FAST]) == 0
    assert main(["train-summarizer", "--train", str(train), "--output", str(tmp_path / "sum"), *FAST]) == 0
    gen = tmp_path / "gen.jsonl"
    assert main(["generate", "--model", str(tmp_path / "cn"), "--input", str(test), "--output", str(gen), "--mode", "cn"]) == 0
    rows = [json.loads(l) for l in gen.read_text().splitlines()]
    assert len(rows) == 5 and all(r["controls"] for r in rows)
    assert main(["evaluate", "conversations", "--generated", str(gen), "--reference", str(test)]) == 0
    assert main(["evaluate", "summaries", "--summarizer", str(tmp_path / "sum"), "--reference", str(test)]) == 0
    assert "ROUGE" in capsys.readouterr().out
    assert main(["train-rl", "--policy", str(tmp_path / "sl"), "--summarizer", str(tmp_path / "sum"),
                 "--train", str(train), "--output", str(tmp_path / "rl"), "--steps", "2"]) == 0
    assert (tmp_path / "rl" / "trace.csv").exists()
    # a summarizer is not a generator
    assert main(["generate", "--model", str(tmp_path / "sum"), "--input", str(test), "--output", str(gen)]) == 2


def test_console_script_help():
    result = subprocess.run([sys.executable, "-m", "convforge.cli", "--help"], capture_output=True, text=True)
    assert result.returncode == 0
    assert "augment" in result.stdout
