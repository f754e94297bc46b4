import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmr.corpus import (
    Example,
    ExamplePool,
    OversizedQueryError,
    PoolFormatError,
    TaskSpec,
    load_examples,
    load_pool,
    load_saved_pool,
    load_task_specs,
    pool_content_hash,
    render_candidate,
    render_prompt,
    save_pool,
    save_task_specs,
    tokenize,
)

from conftest import make_pool


def ex(i, task="t", inp="in", out="out"):
    return Example(example_id=f"{task}:{i}", task_id=task, input_text=inp, output_text=out)


def test_tokenize_lowercases_and_splits():
    assert tokenize("Sun  WARM\nbright") == ["sun", "warm", "bright"]
    assert tokenize("") == []


def test_render_candidate_joins_with_newline():
    assert render_candidate(ex(1, inp="a b", out="c")) == "a b\nc"


def test_render_prompt_joins_shots_with_blank_lines():
    shots = [ex(1, inp="q1", out="a1"), ex(2, inp="q2", out="a2")]
    assert render_prompt(shots, "test", 100) == "q1\na1\n\nq2\na2\n\ntest"


def test_render_prompt_left_truncates_whole_tokens():
    shots = [ex(1, inp="one two three", out="four")]
    prompt = render_prompt(shots, "five six", 3)
    assert prompt == "four\n\nfive six"


def test_render_prompt_rejects_oversized_test_input():
    with pytest.raises(OversizedQueryError):
        render_prompt([], "a b c d", 3)


@given(st.integers(min_value=1, max_value=30))
@settings(max_examples=20)
def test_render_prompt_respects_budget(max_len):
    shots = [ex(i, inp=f"w{i} x{i} y{i}", out=f"o{i}") for i in range(5)]
    test_input = "q"
    prompt = render_prompt(shots, test_input, max_len)
    assert len(prompt.split()) <= max_len
    assert prompt.endswith(test_input)


def test_pool_rejects_duplicate_ids():
    e = ex(1)
    with pytest.raises(PoolFormatError):
        ExamplePool(examples=[e, e], cap=10, seed=0)


def test_pool_restrict_keeps_order_and_tasks():
    pool = make_pool([("a", "1", "x"), ("b", "2", "y"), ("a", "3", "z")])
    sub = pool.restrict(["a"])
    assert [e.example_id for e in sub.examples] == ["a:1", "a:2"]
    assert sub.task_ids() == ["a"]


def test_load_examples_parses_and_validates(tmp_path):
    path = tmp_path / "pool.jsonl"
    path.write_text(
        '{"task": "t", "input": "i", "output": "o"}\n'
        "\n"
        '{"task": "t", "input": "j", "output": "p", "choices": ["p", "q"]}\n'
    )
    examples = load_examples(path)
    assert [e.example_id for e in examples] == ["t:1", "t:3"]
    assert examples[1].choices == ("p", "q")


@pytest.mark.parametrize(
    "line",
    [
        "not json",
        '["list"]',
        '{"task": "t", "input": "i"}',
        '{"task": "", "input": "i", "output": "o"}',
        '{"task": "t", "input": "i", "output": ""}',
        '{"task": "t", "input": "i", "output": "o", "choices": "bad"}',
        '{"task": "t", "input": "i", "output": "o", "choices": ["p"]}',
    ],
)
def test_load_examples_rejects_malformed_lines(tmp_path, line):
    path = tmp_path / "pool.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(PoolFormatError):
        load_examples(path)


def test_load_pool_caps_per_task_deterministically(tmp_path):
    path = tmp_path / "pool.jsonl"
    rows = [json.dumps({"task": "t", "input": f"i{n}", "output": "o"}) for n in range(10)]
    path.write_text("\n".join(rows) + "\n")
    a = load_pool([path], cap=4, seed=7)
    b = load_pool([path], cap=4, seed=7)
    assert len(a) == 4
    assert [e.example_id for e in a.examples] == [e.example_id for e in b.examples]
    c = load_pool([path], cap=4, seed=8)
    assert len(c) == 4  # different seed may pick a different subset, same size


def test_save_and_load_pool_roundtrip(tmp_path, two_task_pool):
    manifest = save_pool(two_task_pool, tmp_path)
    loaded = load_saved_pool(tmp_path)
    assert pool_content_hash(loaded) == manifest["content_hash"]
    assert [e.example_id for e in loaded.examples] == [
        e.example_id for e in two_task_pool.examples
    ]


def test_load_saved_pool_detects_tamper(tmp_path, two_task_pool):
    save_pool(two_task_pool, tmp_path)
    records = tmp_path / "records.jsonl"
    records.write_text(records.read_text().replace("day", "yad"))
    with pytest.raises(PoolFormatError):
        load_saved_pool(tmp_path)


def test_pool_content_hash_tracks_content(two_task_pool):
    h1 = pool_content_hash(two_task_pool)
    other = make_pool([("alpha", "sun warm bright", "day")])
    assert h1 != pool_content_hash(other)
    assert h1 == pool_content_hash(two_task_pool)


def test_task_spec_validation():
    TaskSpec("t", "classification", "accuracy", ("a", "b")).validate()
    with pytest.raises(ValueError):
        TaskSpec("t", "classification", "accuracy", ("a",)).validate()
    with pytest.raises(ValueError):
        TaskSpec("t", "classification", "rouge_l", ("a", "b")).validate()
    with pytest.raises(ValueError):
        TaskSpec("t", "mystery", "accuracy").validate()


def test_task_specs_roundtrip(tmp_path):
    specs = [
        TaskSpec("t1", "classification", "accuracy", ("x", "y"), False, "cat"),
        TaskSpec("t2", "generation", "rouge_l", (), True, "gen"),
    ]
    path = tmp_path / "tasks.json"
    save_task_specs(specs, path)
    loaded = load_task_specs(path)
    assert loaded["t1"].verbalizers == ("x", "y")
    assert loaded["t2"].held_out is True
    assert loaded["t2"].category == "gen"
