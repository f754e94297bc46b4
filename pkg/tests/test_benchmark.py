import hashlib
import json

import pytest

from llmr.benchmark import (
    MIN_TEST,
    MIN_TRAIN,
    SuiteGenerationError,
    T3_TAGS,
    generate_suite,
    t3_output,
)
from llmr.corpus import load_task_specs

TASK_IDS = (
    "t1_sentiment",
    "t2_lookup",
    "t3_transform",
    "t4_paraphrase",
    "t5_sentiment_holdout",
)


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def test_t3_output_rules():
    assert t3_output("swap", "kibo", "muta") == "mutax kibox"
    assert t3_output("copy", "kibo", "muta") == "kibox mutax"
    assert t3_output("drop", "kibo", "muta") == "mutax"
    assert t3_output("keep", "kibo", "muta") == "kibox"
    with pytest.raises(KeyError):
        t3_output("mangle", "a", "b")


def test_rejects_undersized_suite(tmp_path):
    with pytest.raises(SuiteGenerationError):
        generate_suite(tmp_path, seed=1, train_size=MIN_TRAIN - 1, test_size=MIN_TEST)
    with pytest.raises(SuiteGenerationError):
        generate_suite(tmp_path, seed=1, train_size=MIN_TRAIN, test_size=MIN_TEST - 1)


def test_suite_layout_and_sizes(suite):
    paths, _ = suite
    assert [p.stem for p in paths.pool_files] == list(TASK_IDS)
    for pool_path, test_path in zip(paths.pool_files, paths.test_files):
        assert len(read_jsonl(pool_path)) == 200
        assert len(read_jsonl(test_path)) == 100


def test_pool_rows_are_well_formed(suite):
    paths, _ = suite
    for path, task_id in zip(paths.pool_files, TASK_IDS):
        for row in read_jsonl(path):
            assert row["task"] == task_id
            assert row["input"].strip()
            assert row["output"].strip()


def test_inputs_unique_within_task(suite):
    paths, _ = suite
    for path in (*paths.pool_files, *paths.test_files):
        inputs = [row["input"] for row in read_jsonl(path)]
        assert len(set(inputs)) == len(inputs), path.name


def test_task_specs_match_files(suite):
    paths, _ = suite
    specs = load_task_specs(paths.task_file)
    assert set(specs) == set(TASK_IDS)
    assert specs["t5_sentiment_holdout"].held_out
    assert sum(s.held_out for s in specs.values()) == 1
    assert specs["t1_sentiment"].task_type == "classification"
    assert specs["t2_lookup"].metric == "exact_match"
    assert specs["t3_transform"].metric == "rouge_l"


def test_manifest_hashes_verify(suite):
    paths, _ = suite
    manifest = json.loads(paths.manifest_file.read_text())
    assert manifest["train_size"] == 200 and manifest["test_size"] == 100
    for rel, recorded in manifest["files"].items():
        digest = hashlib.sha256((paths.out_dir / rel).read_bytes()).hexdigest()
        assert digest == recorded, rel


def test_every_test_rule_exists_in_pool(suite):
    paths, _ = suite
    rules = json.loads(paths.rules_file.read_text())
    pool_rules = set(rules["pool"].values())
    for key, rule in rules["test"].items():
        assert rule in pool_rules, key


def test_lookup_key_determines_answer(suite):
    # input shape: fetch <filler> record <key> value
    paths, _ = suite
    key_to_answer = {}
    for row in read_jsonl(paths.pool_files[1]):
        key = row["input"].split()[3]
        assert key_to_answer.setdefault(key, row["output"]) == row["output"]
    for row in read_jsonl(paths.test_files[1]):
        key = row["input"].split()[3]
        assert key_to_answer[key] == row["output"]


def test_transform_rows_obey_their_rule(suite):
    # input shape: apply <tag> <fillers...> on <a> <b> gives
    paths, _ = suite
    rules = json.loads(paths.rules_file.read_text())
    for split, path in (("pool", paths.pool_files[2]), ("test", paths.test_files[2])):
        for lineno, row in enumerate(read_jsonl(path), start=1):
            tag, a, b = rules[split][f"t3_transform:{lineno}"].split("|")
            assert tag in T3_TAGS
            tokens = row["input"].split()
            assert tokens[1] == tag
            assert (tokens[-3], tokens[-2]) == (a, b)
            assert row["output"] == t3_output(tag, a, b)


def test_generation_is_deterministic(tmp_path):
    a = generate_suite(tmp_path / "a", seed=5, train_size=200, test_size=100)
    b = generate_suite(tmp_path / "b", seed=5, train_size=200, test_size=100)
    for pa, pb in zip(
        (*a.pool_files, *a.test_files, a.task_file, a.rules_file),
        (*b.pool_files, *b.test_files, b.task_file, b.rules_file),
    ):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_different_seeds_differ(tmp_path):
    a = generate_suite(tmp_path / "a", seed=5, train_size=200, test_size=100)
    b = generate_suite(tmp_path / "b", seed=6, train_size=200, test_size=100)
    assert a.pool_files[0].read_bytes() != b.pool_files[0].read_bytes()
