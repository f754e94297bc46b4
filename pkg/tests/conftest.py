"""Shared fixtures: the generated suite is expensive enough to build once
per session; unit tests get small hand-built pools instead."""

import dataclasses

import pytest

from llmr.corpus import Example, ExamplePool
from llmr.pipeline import bootstrap_suite, load_config

# plumbing tests only exercise wiring, not model quality
FAST_OVERRIDES = {
    "max_train_queries_per_task": 25,
    "steps_reward": 10,
    "steps_retriever": 10,
    "depth": 30,
    "iterations": 1,
}


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    """Default benchmark suite plus its config file, generated once."""
    root = tmp_path_factory.mktemp("suite")
    paths, config_path = bootstrap_suite(root, seed=17)
    return paths, config_path


@pytest.fixture(scope="session")
def suite_config_path(suite):
    return suite[1]


def fast_config(config_path, out_dir, **extra):
    overrides = {**FAST_OVERRIDES, "out_dir": str(out_dir), **extra}
    return load_config(config_path, overrides)


def write_fast_config(config_path, out_dir, dest, **extra):
    """Materialize a plumbing-speed config file for CLI runs."""
    from llmr.pipeline import write_config

    cfg = fast_config(config_path, out_dir, **extra)
    write_config(cfg, dest)
    return dest


def make_pool(rows, cap: int = 10_000, seed: int = 0) -> ExamplePool:
    """rows: (task, input, output) triples; ids count per task like the loader."""
    counts: dict[str, int] = {}
    examples = []
    for task, inp, out in rows:
        counts[task] = counts.get(task, 0) + 1
        examples.append(
            Example(
                example_id=f"{task}:{counts[task]}",
                task_id=task,
                input_text=inp,
                output_text=out,
            )
        )
    return ExamplePool(examples=examples, cap=cap, seed=seed)


@pytest.fixture
def two_task_pool():
    return make_pool(
        [
            ("alpha", "sun warm bright", "day"),
            ("alpha", "moon cold dim", "night"),
            ("alpha", "sun cold bright", "day"),
            ("alpha", "moon warm dim", "night"),
            ("beta", "one plus one", "two"),
            ("beta", "two plus one", "three"),
            ("beta", "one plus two", "three"),
            ("beta", "two plus two", "four"),
        ]
    )


def replace_cfg(cfg, **kw):
    return dataclasses.replace(cfg, **kw)
