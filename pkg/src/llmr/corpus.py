"""Example pool, task registry, and prompt rendering.

The pool is the unified set of candidate demonstrations across tasks.
Rendering conventions are fixed: newline between input and output of one
example, blank line between examples, test input last.
"""

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

IO_SEPARATOR = "\n"
SHOT_SEPARATOR = "\n\n"

TASK_TYPES = ("classification", "multiple_choice", "generation")

# metric families compatible with each task type
VALID_METRICS = {
    "classification": ("accuracy",),
    "multiple_choice": ("accuracy",),
    "generation": ("exact_match", "token_f1", "rouge_l"),
}

_TOKEN_RE = re.compile(r"\S+")


class PoolFormatError(ValueError):
    """A pool file line could not be parsed or failed validation."""


class OversizedQueryError(ValueError):
    """The test input alone exceeds the prompt length budget."""


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokens.

    This is the one tokenizer shared by indexing, scoring, and prompt
    length accounting.
    """
    return text.lower().split()


@dataclass(frozen=True, slots=True)
class Example:
    example_id: str
    task_id: str
    input_text: str
    output_text: str
    choices: tuple[str, ...] | None = None


@dataclass(frozen=True, slots=True)
class TaskSpec:
    task_id: str
    task_type: str
    metric: str
    verbalizers: tuple[str, ...] = ()
    held_out: bool = False
    category: str = ""

    def validate(self) -> None:
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"unknown task_type {self.task_type!r} for {self.task_id}")
        if self.metric not in VALID_METRICS[self.task_type]:
            raise ValueError(
                f"metric {self.metric!r} invalid for {self.task_type} task {self.task_id}"
            )
        if self.task_type == "classification":
            if len(self.verbalizers) < 2 or len(set(self.verbalizers)) != len(self.verbalizers):
                raise ValueError(f"classification task {self.task_id} needs >=2 distinct verbalizers")


def render_candidate(example: Example) -> str:
    """One demonstration: input, newline, output."""
    return example.input_text + IO_SEPARATOR + example.output_text


def render_prompt(shots: list[Example], test_input: str, max_len: int) -> str:
    """Join shots with blank lines, test input last, left-truncated to max_len tokens.

    Truncation removes whole whitespace tokens from the left while keeping
    the remaining separators intact, so the earliest shot may be partially
    removed. The test input itself is never truncated; if it alone exceeds
    max_len the query is rejected.
    """
    parts = [render_candidate(s) for s in shots]
    parts.append(test_input)
    prompt = SHOT_SEPARATOR.join(parts)
    tokens = _TOKEN_RE.findall(prompt)
    if len(tokens) <= max_len:
        return prompt
    if len(test_input.split()) > max_len:
        raise OversizedQueryError(
            f"test input has {len(test_input.split())} tokens, budget is {max_len}"
        )
    matches = list(_TOKEN_RE.finditer(prompt))
    start = matches[len(matches) - max_len].start()
    return prompt[start:]


@dataclass
class ExamplePool:
    """Unified candidate pool with deterministic ordering."""

    examples: list[Example]
    cap: int
    seed: int
    by_id: dict[str, Example] = field(init=False, repr=False)
    by_task: dict[str, list[Example]] = field(init=False, repr=False)

    def __post_init__(self):
        self.by_id = {}
        self.by_task = {}
        for ex in self.examples:
            if ex.example_id in self.by_id:
                raise PoolFormatError(f"duplicate example_id {ex.example_id}")
            self.by_id[ex.example_id] = ex
            self.by_task.setdefault(ex.task_id, []).append(ex)

    def __len__(self) -> int:
        return len(self.examples)

    def get(self, example_id: str) -> Example:
        return self.by_id[example_id]

    def task_ids(self) -> list[str]:
        return list(self.by_task)

    def task_examples(self, task_id: str) -> list[Example]:
        return self.by_task.get(task_id, [])

    def restrict(self, task_ids) -> "ExamplePool":
        """Sub-pool containing only the given tasks, order preserved."""
        keep = set(task_ids)
        return ExamplePool(
            examples=[e for e in self.examples if e.task_id in keep],
            cap=self.cap,
            seed=self.seed,
        )


def _parse_record(raw: dict, path: str, lineno: int, task_counts: dict) -> Example:
    for key in ("task", "input", "output"):
        if key not in raw:
            raise PoolFormatError(f"{path}:{lineno}: missing field {key!r}")
    task = raw["task"]
    if not isinstance(task, str) or not task:
        raise PoolFormatError(f"{path}:{lineno}: bad task id {task!r}")
    output = raw["output"]
    if not isinstance(output, str) or not output:
        raise PoolFormatError(f"{path}:{lineno}: empty or non-string output")
    choices = raw.get("choices")
    if choices is not None:
        if not isinstance(choices, list) or not all(isinstance(c, str) for c in choices):
            raise PoolFormatError(f"{path}:{lineno}: choices must be a list of strings")
        if output not in choices:
            raise PoolFormatError(f"{path}:{lineno}: output not among choices")
        choices = tuple(choices)
    task_counts[task] = task_counts.get(task, 0) + 1
    return Example(
        example_id=f"{task}:{lineno}",
        task_id=task,
        input_text=raw["input"],
        output_text=output,
        choices=choices,
    )


def load_examples(path: str | Path) -> list[Example]:
    """Parse one line-delimited UTF-8 pool file, ids are <task>:<line>."""
    examples = []
    counts: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PoolFormatError(f"{path}:{lineno}: invalid json ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise PoolFormatError(f"{path}:{lineno}: record is not an object")
            examples.append(_parse_record(raw, str(path), lineno, counts))
    return examples


def load_pool(paths, cap: int, seed: int) -> ExamplePool:
    """Load pool files and apply the per-task cap.

    Over-cap tasks are downsampled by a seeded shuffle and prefix take;
    retained examples keep their original file order.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    all_examples: list[Example] = []
    for path in paths:
        all_examples.extend(load_examples(path))
    by_task: dict[str, list[Example]] = {}
    for ex in all_examples:
        by_task.setdefault(ex.task_id, []).append(ex)
    keep_ids = set()
    for task_id, members in by_task.items():
        if len(members) <= cap:
            keep_ids.update(e.example_id for e in members)
            continue
        order = list(range(len(members)))
        random.Random(f"{seed}:{task_id}").shuffle(order)
        keep_ids.update(members[i].example_id for i in sorted(order[:cap]))
    kept = [e for e in all_examples if e.example_id in keep_ids]
    return ExamplePool(examples=kept, cap=cap, seed=seed)


def pool_content_hash(pool: ExamplePool) -> str:
    h = hashlib.sha256()
    for ex in pool.examples:
        rec = {
            "example_id": ex.example_id,
            "task": ex.task_id,
            "input": ex.input_text,
            "output": ex.output_text,
        }
        if ex.choices is not None:
            rec["choices"] = list(ex.choices)
        h.update(json.dumps(rec, sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def save_pool(pool: ExamplePool, out_dir: str | Path) -> dict:
    """Serialize the pool as records plus a manifest with a content hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = out / "records.jsonl"
    with open(records, "w", encoding="utf-8") as fh:
        for ex in pool.examples:
            rec = {
                "example_id": ex.example_id,
                "task": ex.task_id,
                "input": ex.input_text,
                "output": ex.output_text,
            }
            if ex.choices is not None:
                rec["choices"] = list(ex.choices)
            fh.write(json.dumps(rec) + "\n")
    manifest = {
        "kind": "example_pool",
        "tasks": [{"task_id": t, "count": len(pool.task_examples(t))} for t in pool.task_ids()],
        "cap": pool.cap,
        "seed": pool.seed,
        "content_hash": pool_content_hash(pool),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def load_saved_pool(out_dir: str | Path) -> ExamplePool:
    out = Path(out_dir)
    with open(out / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    examples = []
    with open(out / "records.jsonl", encoding="utf-8") as fh:
        for line in fh:
            raw = json.loads(line)
            choices = raw.get("choices")
            examples.append(
                Example(
                    example_id=raw["example_id"],
                    task_id=raw["task"],
                    input_text=raw["input"],
                    output_text=raw["output"],
                    choices=tuple(choices) if choices is not None else None,
                )
            )
    pool = ExamplePool(examples=examples, cap=manifest["cap"], seed=manifest["seed"])
    if pool_content_hash(pool) != manifest["content_hash"]:
        raise PoolFormatError(f"pool content hash mismatch under {out}")
    return pool


def load_task_specs(path: str | Path) -> dict[str, TaskSpec]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    specs = {}
    for item in raw:
        spec = TaskSpec(
            task_id=item["task_id"],
            task_type=item["task_type"],
            metric=item["metric"],
            verbalizers=tuple(item.get("verbalizers", ())),
            held_out=bool(item.get("held_out", False)),
            category=item.get("category", "") or item["task_type"],
        )
        spec.validate()
        if spec.task_id in specs:
            raise ValueError(f"duplicate task spec {spec.task_id}")
        specs[spec.task_id] = spec
    return specs


def save_task_specs(specs, path: str | Path) -> None:
    rows = []
    for spec in specs:
        rows.append(
            {
                "task_id": spec.task_id,
                "task_type": spec.task_type,
                "metric": spec.metric,
                "verbalizers": list(spec.verbalizers),
                "held_out": spec.held_out,
                "category": spec.category,
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")
