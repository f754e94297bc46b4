"""Task-typed evaluation: prediction routing, metrics, and reports.

Classification scores verbalizers by mean token log-likelihood, multiple
choice scores the given options the same way, generation decodes greedily.
Shots arrive ranked best-first from the retrieval strategy; by default the
prompt reverses them so the best shot sits next to the test input.
"""

import json
import logging
import re
import string
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bm25 import InvertedIndex, bm25_retrieve
from .corpus import Example, ExamplePool, TaskSpec, load_examples, render_prompt, tokenize
from .reward import derive_rng
from .retriever import BiEncoderModel, DenseIndex, knn_search

log = logging.getLogger(__name__)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def accuracy(prediction: str, references) -> float:
    return float(any(prediction == ref for ref in references))


def exact_match(prediction: str, references) -> float:
    pred = normalize_answer(prediction)
    return float(any(pred == normalize_answer(ref) for ref in references))


def _f1(pred_tokens: list[str], ref_tokens: list[str]) -> float:
    if not pred_tokens and not ref_tokens:
        return 1.0
    if not pred_tokens or not ref_tokens:
        return 0.0
    counts = {}
    for t in ref_tokens:
        counts[t] = counts.get(t, 0) + 1
    common = 0
    for t in pred_tokens:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(ref_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, references) -> float:
    pred_tokens = normalize_answer(prediction).split()
    return max(_f1(pred_tokens, normalize_answer(ref).split()) for ref in references)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, references) -> float:
    """LCS F-measure with beta = 1 over normalized tokens."""
    pred_tokens = normalize_answer(prediction).split()
    best = 0.0
    for ref in references:
        ref_tokens = normalize_answer(ref).split()
        lcs = _lcs_length(pred_tokens, ref_tokens)
        if lcs == 0:
            continue
        precision = lcs / len(pred_tokens)
        recall = lcs / len(ref_tokens)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


_METRIC_FNS = {
    "accuracy": accuracy,
    "exact_match": exact_match,
    "token_f1": token_f1,
    "rouge_l": rouge_l,
}


def compute_metric(metric: str, prediction: str, references) -> float:
    refs = list(references)
    if not refs:
        raise ValueError("references must be non-empty")
    return _METRIC_FNS[metric](prediction, refs)


@dataclass(frozen=True, slots=True)
class Prediction:
    text: str
    scores: dict = field(default_factory=dict)


def predict(
    lm,
    task: TaskSpec,
    shots: list[Example],
    test_input: str,
    choices=None,
    max_prompt_tokens: int = 256,
    max_decode_tokens: int = 64,
    shots_best_last: bool = True,
) -> Prediction:
    """Route by task type; shots come in ranked best-first."""
    ordered = list(reversed(shots)) if shots_best_last else list(shots)
    prompt = render_prompt(ordered, test_input, max_prompt_tokens)
    if task.task_type in ("classification", "multiple_choice"):
        options = task.verbalizers if task.task_type == "classification" else tuple(choices or ())
        if not options:
            raise ValueError(f"no options to score for task {task.task_id}")
        scores = {}
        for option in options:
            n_tokens = max(1, len(tokenize(option)))
            scores[option] = lm.cond_log_prob(prompt, option) / n_tokens
        best = max(options, key=lambda o: scores[o])  # ties: first option wins
        return Prediction(text=best, scores=scores)
    decoded = lm.greedy_decode(prompt, max_tokens=max_decode_tokens)
    return Prediction(text=decoded)


class RetrievalStrategy:
    """Maps a test example to ranked shots, best first."""

    name = "base"

    def shots(self, test: Example, k: int) -> list[Example]:
        raise NotImplementedError


class ZeroShotStrategy(RetrievalStrategy):
    name = "zero_shot"

    def shots(self, test: Example, k: int) -> list[Example]:
        return []


class RandomStrategy(RetrievalStrategy):
    """Seeded per-query sample from the same task's pool."""

    name = "random"

    def __init__(self, pool: ExamplePool, seed: int):
        self.pool = pool
        self.seed = seed

    def shots(self, test: Example, k: int) -> list[Example]:
        members = self.pool.task_examples(test.task_id)
        rng = derive_rng(self.seed, f"random-shots:{test.example_id}")
        if k >= len(members):
            return list(members)
        return [members[i] for i in rng.sample(range(len(members)), k)]


class Bm25Strategy(RetrievalStrategy):
    name = "bm25"

    def __init__(self, index: InvertedIndex, pool: ExamplePool):
        self.index = index
        self.pool = pool

    def shots(self, test: Example, k: int) -> list[Example]:
        hits = bm25_retrieve(self.index, test.input_text, k)
        return [self.pool.get(doc_id) for doc_id, _ in hits]


class DenseStrategy(RetrievalStrategy):
    def __init__(self, index: DenseIndex, model: BiEncoderModel, pool: ExamplePool, name: str = "dense"):
        self.index = index
        self.model = model
        self.pool = pool
        self.name = name

    def shots(self, test: Example, k: int) -> list[Example]:
        hits = knn_search(self.index, self.model, test.input_text, k)
        return [self.pool.get(doc_id) for doc_id, _ in hits]


@dataclass
class EvalReport:
    strategy: str
    k_shots: int
    per_task: dict
    per_category: dict
    task_mean: float
    category_mean: float
    held_in_task_mean: float

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "k_shots": self.k_shots,
            "per_task": self.per_task,
            "per_category": self.per_category,
            "task_mean": self.task_mean,
            "category_mean": self.category_mean,
            "held_in_task_mean": self.held_in_task_mean,
        }


def load_test_examples(path: str | Path) -> list[Example]:
    """Test files share the pool format; ids get a test: prefix."""
    return [replace(ex, example_id=f"test:{ex.example_id}") for ex in load_examples(path)]


def evaluate_suite(
    strategy: RetrievalStrategy,
    lm,
    tests: dict[str, list[Example]],
    task_specs: dict[str, TaskSpec],
    k_shots: int,
    max_prompt_tokens: int = 256,
    max_decode_tokens: int = 64,
    shots_best_last: bool = True,
    per_query_sink=None,
) -> EvalReport:
    """Mean metric per task plus category and overall aggregates.

    per_query_sink, when given, receives one record per query.
    """
    per_task = {}
    for task_id in sorted(tests):
        spec = task_specs[task_id]
        examples = tests[task_id]
        if not examples:
            log.warning("task %s has no test examples; skipped", task_id)
            continue
        total = 0.0
        for test in examples:
            shots = strategy.shots(test, k_shots) if k_shots > 0 else []
            pred = predict(
                lm,
                spec,
                shots,
                test.input_text,
                choices=test.choices,
                max_prompt_tokens=max_prompt_tokens,
                max_decode_tokens=max_decode_tokens,
                shots_best_last=shots_best_last,
            )
            value = compute_metric(spec.metric, pred.text, [test.output_text])
            total += value
            if per_query_sink is not None:
                per_query_sink(
                    {
                        "query_id": test.example_id,
                        "task": task_id,
                        "strategy": strategy.name,
                        "shots": [s.example_id for s in shots],
                        "prediction": pred.text,
                        "reference": test.output_text,
                        "metric": spec.metric,
                        "value": value,
                    }
                )
        per_task[task_id] = {
            "metric": spec.metric,
            "value": total / len(examples),
            "count": len(examples),
            "category": spec.category,
            "held_out": spec.held_out,
        }
    if not per_task:
        raise ValueError("no tasks evaluated")
    categories: dict[str, list[float]] = {}
    for row in per_task.values():
        categories.setdefault(row["category"], []).append(row["value"])
    per_category = {cat: sum(vals) / len(vals) for cat, vals in sorted(categories.items())}
    task_values = [row["value"] for row in per_task.values()]
    held_in = [row["value"] for row in per_task.values() if not row["held_out"]]
    return EvalReport(
        strategy=strategy.name,
        k_shots=k_shots,
        per_task=per_task,
        per_category=per_category,
        task_mean=sum(task_values) / len(task_values),
        category_mean=sum(per_category.values()) / len(per_category),
        held_in_task_mean=sum(held_in) / len(held_in) if held_in else 0.0,
    )


def report_rows(reports: list[EvalReport]) -> list[list[str]]:
    """TSV-ready comparison table, one row per strategy."""
    task_ids = sorted({tid for rep in reports for tid in rep.per_task})
    header = ["strategy", "k_shots", *task_ids, "task_mean", "category_mean", "held_in_task_mean"]
    rows = [header]
    for rep in reports:
        row = [rep.strategy, str(rep.k_shots)]
        for tid in task_ids:
            cell = rep.per_task.get(tid)
            row.append(f"{cell['value']:.4f}" if cell else "-")
        row.extend(
            [f"{rep.task_mean:.4f}", f"{rep.category_mean:.4f}", f"{rep.held_in_task_mean:.4f}"]
        )
        rows.append(row)
    return rows


def write_tsv(rows: list[list[str]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")


def write_report(report: EvalReport, json_path: str | Path) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(json_path: str | Path) -> EvalReport:
    with open(json_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return EvalReport(
        strategy=raw["strategy"],
        k_shots=raw["k_shots"],
        per_task=raw["per_task"],
        per_category=raw["per_category"],
        task_mean=raw["task_mean"],
        category_mean=raw["category_mean"],
        held_in_task_mean=raw["held_in_task_mean"],
    )
