"""Deterministic synthetic benchmark suite.

Five tasks over a generated word supply: lexicon sentiment (t1), key-value
lookup (t2), ordered word transforms (t3), lexicon pair matching (t4), and a
held-out sentiment variant (t5) that reuses t1's lexicons under a different
frame. Inputs place a fixed per-task trigger token right before the answer
span so demonstrations carry copyable evidence.

A shared filler vocabulary supplies rare but uninformative tokens. Transform
test inputs borrow one filler from every pool copy of the sibling rule (same
word pair, other tag), so term-frequency retrieval fills its shot budget with
the wrong rows while rule-aware retrieval is unaffected.

Every test input is guaranteed a pool example with the same latent rule, and
no test input string occurs in the pool. rules.json records the latent rule
of every pool and test line for oracle probes.
"""

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path

from .corpus import TaskSpec, save_task_specs

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"

T3_TAGS = ("swap", "copy", "drop", "keep")
T3_COPIES = 5

MIN_TRAIN = 200
MIN_TEST = 100


class SuiteGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SuitePaths:
    out_dir: Path
    pool_files: tuple[Path, ...]
    test_files: tuple[Path, ...]
    task_file: Path
    rules_file: Path
    manifest_file: Path


def _word_supply(seed: int) -> list[str]:
    words = [
        c1 + v1 + c2 + v2
        for c1 in CONSONANTS
        for v1 in VOWELS
        for c2 in CONSONANTS
        for v2 in VOWELS
    ]
    random.Random(f"{seed}:supply").shuffle(words)
    return words


def _take(supply: list[str], count: int) -> list[str]:
    if count > len(supply):
        raise SuiteGenerationError("vocabulary too small for requested sizes")
    out = supply[:count]
    del supply[:count]
    return out


def _unique_input(used: set[str], make, attempts: int = 1000) -> str:
    for _ in range(attempts):
        text = make()
        if text not in used:
            used.add(text)
            return text
    raise SuiteGenerationError("vocabulary too small for requested sizes")


def _out_form(word: str) -> str:
    return word + "x"


def t3_output(tag: str, a: str, b: str) -> str:
    ax, bx = _out_form(a), _out_form(b)
    return {
        "swap": f"{bx} {ax}",
        "copy": f"{ax} {bx}",
        "drop": bx,
        "keep": ax,
    }[tag]


def _emit_sentiment(
    task_id, rng, fillers, lex_a, lex_b, labels, head, trigger, n_words, train_size, test_size
):
    """Label is decided by which lexicon the content words come from."""
    used: set[str] = set()
    lexicons = (lex_a, lex_b)

    def make(label_idx):
        words = rng.sample(lexicons[label_idx], n_words)
        filler = rng.choice(fillers)
        return f"{head} {' '.join(words)} {filler} {trigger}"

    pool, pool_rules, tests, test_rules = [], [], [], []
    for i in range(train_size):
        label = i % 2
        text = _unique_input(used, lambda: make(label))
        pool.append({"task": task_id, "input": text, "output": labels[label]})
        pool_rules.append(labels[label])
    for i in range(test_size):
        label = i % 2
        text = _unique_input(used, lambda: make(label))
        tests.append({"task": task_id, "input": text, "output": labels[label]})
        test_rules.append(labels[label])
    return pool, pool_rules, tests, test_rules


def _emit_lookup(task_id, rng, fillers, keys, answers, train_size, test_size):
    """Key determines the answer; one filler slot keeps inputs unique."""
    n_families = len(answers)
    families = [tuple(keys[3 * i : 3 * i + 3]) for i in range(n_families)]
    used: set[str] = set()

    def make(key, filler):
        return f"fetch {filler} record {key} value"

    pool, pool_rules, tests, test_rules = [], [], [], []
    for i in range(train_size):
        fam = i % n_families
        key = families[fam][(i // n_families) % 3]
        text = _unique_input(used, lambda: make(key, rng.choice(fillers)))
        pool.append({"task": task_id, "input": text, "output": answers[fam]})
        pool_rules.append(f"fam{fam}")
    for i in range(test_size):
        fam = i % n_families
        key = families[fam][rng.randrange(3) if train_size // n_families >= 3 else 0]
        text = _unique_input(used, lambda: make(key, rng.choice(fillers)))
        tests.append({"task": task_id, "input": text, "output": answers[fam]})
        test_rules.append(f"fam{fam}")
    return pool, pool_rules, tests, test_rules


def _emit_transform(task_id, rng, fillers, words, train_size, test_size):
    """Rules come in sibling pairs: two tags over the same word pair. Each
    rule has several pool copies; test rows borrow one filler from every
    sibling copy, so term overlap favors the sibling while the tag token
    names the right rule."""
    n_pairs = train_size // (2 * T3_COPIES)
    if n_pairs < 2 or 2 * n_pairs > len(words):
        raise SuiteGenerationError("vocabulary too small for requested sizes")
    remainder = train_size - n_pairs * 2 * T3_COPIES
    used: set[str] = set()

    def make(tag, row_fillers, a, b):
        return f"apply {tag} {' '.join(row_fillers)} on {a} {b} gives"

    pool, pool_rules, tests, test_rules = [], [], [], []
    rules = []
    for p in range(n_pairs):
        a, b = words[2 * p], words[2 * p + 1]
        tag_a, tag_b = rng.sample(T3_TAGS, 2)
        copies_a = T3_COPIES + (1 if p < remainder else 0)
        rule_fillers: dict[str, list[list[str]]] = {tag_a: [], tag_b: []}
        for tag, n_copies in ((tag_a, copies_a), (tag_b, T3_COPIES)):
            for _ in range(n_copies):
                drawn = []

                def draw_row():
                    drawn[:] = rng.sample(fillers, T3_COPIES)
                    return make(tag, drawn, a, b)

                text = _unique_input(used, draw_row)
                pool.append({"task": task_id, "input": text, "output": t3_output(tag, a, b)})
                pool_rules.append(f"{tag}|{a}|{b}")
                rule_fillers[tag].append(list(drawn))
        rules.append((a, b, tag_a, tag_b, rule_fillers))
    for i in range(test_size):
        a, b, tag_a, tag_b, rule_fillers = rules[i % n_pairs]
        tag, sibling = (tag_a, tag_b) if (i // n_pairs) % 2 == 0 else (tag_b, tag_a)
        sibling_rows = rule_fillers[sibling][:T3_COPIES]

        def draw_test():
            return make(tag, [rng.choice(row) for row in sibling_rows], a, b)

        text = _unique_input(used, draw_test)
        tests.append({"task": task_id, "input": text, "output": t3_output(tag, a, b)})
        test_rules.append(f"{tag}|{a}|{b}")
    return pool, pool_rules, tests, test_rules


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_suite(out_dir: str | Path, seed: int, train_size: int = 200, test_size: int = 100) -> SuitePaths:
    """Write the five-task suite under out_dir; byte-identical for one seed."""
    if train_size < MIN_TRAIN or test_size < MIN_TEST:
        raise SuiteGenerationError(
            f"need train_size >= {MIN_TRAIN} and test_size >= {MIN_TEST}"
        )
    out = Path(out_dir)
    supply = _word_supply(seed)
    fillers = _take(supply, max(240, train_size))
    t1_neg, t1_pos = _take(supply, 24), _take(supply, 24)
    n_families = max(24, train_size // 8)
    t2_keys = _take(supply, 3 * n_families)
    t2_answers = _take(supply, n_families)
    t3_words = _take(supply, max(40, train_size // 5))
    t4_no, t4_yes = _take(supply, 24), _take(supply, 24)

    tasks = [
        (
            "t1_sentiment",
            lambda rng: _emit_sentiment(
                "t1_sentiment", rng, fillers, t1_neg, t1_pos,
                ("negative", "positive"), "review", "sentiment", 4, train_size, test_size
            ),
            TaskSpec("t1_sentiment", "classification", "accuracy", ("negative", "positive"), False, "sentiment"),
        ),
        (
            "t2_lookup",
            lambda rng: _emit_lookup("t2_lookup", rng, fillers, t2_keys, t2_answers, train_size, test_size),
            TaskSpec("t2_lookup", "generation", "exact_match", (), False, "lookup"),
        ),
        (
            "t3_transform",
            lambda rng: _emit_transform("t3_transform", rng, fillers, t3_words, train_size, test_size),
            TaskSpec("t3_transform", "generation", "rouge_l", (), False, "transform"),
        ),
        (
            "t4_paraphrase",
            lambda rng: _emit_sentiment(
                "t4_paraphrase", rng, fillers, t4_no, t4_yes,
                ("no", "yes"), "cmp", "alike", 4, train_size, test_size
            ),
            TaskSpec("t4_paraphrase", "classification", "accuracy", ("no", "yes"), False, "paraphrase"),
        ),
        (
            # reuses t1's lexicons and trigger under a new frame: held-out
            # evaluation exercises transfer through shared label language
            "t5_sentiment_holdout",
            lambda rng: _emit_sentiment(
                "t5_sentiment_holdout", rng, fillers, t1_neg, t1_pos,
                ("negative", "positive"), "grade", "sentiment", 5, train_size, test_size
            ),
            TaskSpec("t5_sentiment_holdout", "classification", "accuracy", ("negative", "positive"), True, "sentiment"),
        ),
    ]

    pool_files, test_files, specs = [], [], []
    rules = {"pool": {}, "test": {}}
    for task_id, emit, spec in tasks:
        rng = random.Random(f"{seed}:{task_id}")
        pool, pool_rules, tests, test_rules = emit(rng)
        pool_path = out / "pool" / f"{task_id}.jsonl"
        test_path = out / "tests" / f"{task_id}.jsonl"
        _write_jsonl(pool_path, pool)
        _write_jsonl(test_path, tests)
        for lineno, rule in enumerate(pool_rules, start=1):
            rules["pool"][f"{task_id}:{lineno}"] = rule
        for lineno, rule in enumerate(test_rules, start=1):
            rules["test"][f"{task_id}:{lineno}"] = rule
        pool_files.append(pool_path)
        test_files.append(test_path)
        specs.append(spec)
        pool_rule_set = {rules["pool"][f"{task_id}:{i + 1}"] for i in range(len(pool))}
        for rule in test_rules:
            if rule not in pool_rule_set:
                raise SuiteGenerationError(f"{task_id}: test rule {rule!r} missing from pool")

    task_file = out / "task_specs.json"
    save_task_specs(specs, task_file)
    rules_file = out / "rules.json"
    with open(rules_file, "w", encoding="utf-8") as fh:
        json.dump(rules, fh, indent=1, sort_keys=True)
        fh.write("\n")
    listed = [*pool_files, *test_files, task_file, rules_file]
    manifest = {
        "seed": seed,
        "train_size": train_size,
        "test_size": test_size,
        "files": {str(p.relative_to(out)): _file_hash(p) for p in listed},
    }
    manifest_file = out / "manifest.json"
    with open(manifest_file, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return SuitePaths(
        out_dir=out,
        pool_files=tuple(pool_files),
        test_files=tuple(test_files),
        task_file=task_file,
        rules_file=rules_file,
        manifest_file=manifest_file,
    )
