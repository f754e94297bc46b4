import json

import pytest

from llmr.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, build_parser, main

from conftest import write_fast_config


@pytest.fixture(scope="module")
def run_setup(suite_config_path, tmp_path_factory):
    """Fast config plus a completed out_dir for read-only commands."""
    root = tmp_path_factory.mktemp("cli")
    config = write_fast_config(suite_config_path, root / "out", root / "cfg.llmr")
    code = main(["run", "--config", str(config), "--no-shot-scaling"])
    assert code == EXIT_OK
    return str(config), str(root / "out")


def test_parser_rejects_unknown_command(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["polish"])
    assert "invalid choice" in capsys.readouterr().err


def test_run_prints_summary_then_table(run_setup, capsys):
    config, _ = run_setup
    code = main(["run", "--config", config, "--no-shot-scaling"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    # artifacts were valid from the fixture run, so nothing re-executes
    assert "executed iterations: none (all artifacts valid)" in out
    assert "strategy\tk_shots" in out
    assert "dense_iter1" in out


def test_suite_command(tmp_path, capsys):
    code = main(["suite", "--out", str(tmp_path), "--seed", "3"])
    assert code == EXIT_OK
    body = json.loads(capsys.readouterr().out)
    assert len(body["pool_files"]) == 5


def test_suite_rejects_bad_sizes(tmp_path, capsys):
    code = main(["suite", "--out", str(tmp_path), "--train-size", "5"])
    assert code == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_report_without_target_is_usage_error(capsys):
    assert main(["report"]) == EXIT_CONFIG
    assert "--config or --out" in capsys.readouterr().err


def test_report_via_out_dir(run_setup, capsys):
    _, out_dir = run_setup
    code = main(["report", "--out", out_dir])
    printed = capsys.readouterr().out
    assert code == EXIT_OK
    assert printed.startswith("strategy")
    assert "bm25" in printed


def test_missing_config_exits_config(run_setup, tmp_path, capsys):
    code = main(["rank", "--config", str(tmp_path / "ghost.llmr")])
    assert code == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_stage_out_of_order_exits_stage(suite_config_path, tmp_path, capsys):
    config = write_fast_config(suite_config_path, tmp_path / "out", tmp_path / "cfg.llmr")
    code = main(["train-retriever", "--config", str(config)])
    assert code == EXIT_STAGE
    assert "ranked.jsonl" in capsys.readouterr().err


def test_search_outputs_ranked_hits(run_setup, capsys):
    config, _ = run_setup
    code = main(["search", "--config", config, "--query", "fetch record value", "--k", "4"])
    assert code == EXIT_OK
    body = json.loads(capsys.readouterr().out)
    assert body["retriever"] == "bm25"
    assert len(body["hits"]) == 4


def test_search_dense_uses_trained_index(run_setup, capsys):
    config, _ = run_setup
    code = main(["search", "--config", config, "--query", "fetch record value",
                 "--method", "dense"])
    assert code == EXIT_OK
    assert json.loads(capsys.readouterr().out)["retriever"].startswith("dense:")


def test_score_emits_entries(run_setup, capsys):
    config, _ = run_setup
    code = main([
        "score", "--config", config,
        "--input", "fetch one record two value", "--output", "three",
        "--task", "t2_lookup", "--candidates", "t2_lookup:1, t2_lookup:2",
    ])
    assert code == EXIT_OK
    body = json.loads(capsys.readouterr().out)
    assert {e["id"] for e in body["entries"]} == {"t2_lookup:1", "t2_lookup:2"}
    scores = [e["score"] for e in body["entries"]]
    assert scores == sorted(scores, reverse=True)


def test_rank_stage_via_cli(suite_config_path, tmp_path, capsys):
    config = write_fast_config(suite_config_path, tmp_path / "out", tmp_path / "cfg.llmr")
    code = main(["rank", "--config", str(config), "--iteration", "1"])
    assert code == EXIT_OK
    body = json.loads(capsys.readouterr().out)
    assert body["stage"] == "rank"
    assert body["stats"]["queries"] > 0
