"""Stage orchestration: retrieval, LM ranking, reward and retriever training,
dense indexing, evaluation, and reporting.

Every stage writes files and every iteration writes a manifest naming the
content hashes of its artifacts and of its upstream inputs, so a run can be
resumed and a broken chain is detected. Nothing here depends on wall-clock
time; identical configs produce byte-identical artifacts.
"""

import dataclasses
import hashlib
import json
import logging
import random
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import bm25 as bm25_mod
from .benchmark import generate_suite
from .corpus import (
    ExamplePool,
    load_pool,
    load_task_specs,
    pool_content_hash,
    render_candidate,
    save_pool,
    tokenize,
)
from .evaluation import (
    Bm25Strategy,
    DenseStrategy,
    EvalReport,
    RandomStrategy,
    ZeroShotStrategy,
    evaluate_suite,
    load_report,
    load_test_examples,
    report_rows,
    write_report,
    write_tsv,
)
from .neural import load_checkpoint, save_checkpoint
from .retriever import (
    VARIANTS,
    BiEncoderModel,
    build_dense_index,
    init_bi_encoder,
    knn_search,
    load_dense_index,
    save_dense_index,
    train_retriever,
)
from .reward import (
    CrossEncoderModel,
    TrainingInstance,
    build_training_instance,
    init_cross_encoder,
    preference_rate,
    train_reward,
)
from .scorer import CacheBigramLM, RankedCandidates, rank_candidates

log = logging.getLogger(__name__)

_PATH_FIELDS = ("pool_files", "test_files", "task_file", "out_dir")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    pool_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    task_file: str = ""
    out_dir: str = ""
    iterations: int = 2
    depth: int = 100
    top_k: int = 3
    bottom_k: int = 16
    n_neg_reward: int = 7
    n_neg_retriever: int = 3
    tau: float = 0.01
    alpha: float = 0.2
    distill_include_positive: bool = True
    k_shots: int = 8
    shots_best_last: bool = True
    seed: int = 17
    variant: str = "full"
    pool_cap: int = 30000
    d_emb: int = 64
    d_out: int = 64
    lr_reward: float = 1e-3
    lr_retriever: float = 3e-3
    steps_reward: int = 300
    steps_retriever: int = 500
    batch_reward: int = 8
    batch_retriever: int = 8
    retriever_warm_start: bool = True
    lambda_cache: float = 0.5
    lambda_global: float = 0.4
    lambda_uniform: float = 0.1
    bigram_smoothing: float = 0.1
    max_prompt_tokens: int = 256
    max_decode_tokens: int = 64
    reward_holdout_frac: float = 0.1
    max_train_queries_per_task: int = 0

    def validate(self) -> None:
        if not self.pool_files or not self.test_files or not self.task_file or not self.out_dir:
            raise ConfigError("pool_files, test_files, task_file and out_dir are required")
        if self.top_k + self.bottom_k > self.depth:
            raise ConfigError("top_k + bottom_k must not exceed depth")
        if self.n_neg_reward > self.bottom_k or self.n_neg_retriever > self.bottom_k:
            raise ConfigError("negative counts cannot exceed bottom_k")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.k_shots < 0:
            raise ConfigError("k_shots must be >= 0")
        lam = (self.lambda_cache, self.lambda_global, self.lambda_uniform)
        if any(l < 0 for l in lam) or abs(sum(lam) - 1.0) > 1e-9:
            raise ConfigError("interpolation weights must be non-negative and sum to 1")
        if not 0.0 <= self.reward_holdout_frac <= 0.5:
            raise ConfigError("reward_holdout_frac must lie in [0, 0.5]")
        for name in ("depth", "top_k", "bottom_k", "n_neg_reward", "n_neg_retriever",
                     "d_emb", "d_out", "steps_reward", "steps_retriever",
                     "batch_reward", "batch_retriever", "pool_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def stage_echo(self) -> dict:
        """Config echo embedded in manifests: path fields and the iteration
        count stay out so resumes and relocated runs compare equal."""
        echo = self.to_dict()
        for name in (*_PATH_FIELDS, "iterations"):
            echo.pop(name)
        return echo


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config(text: str, base_dir: Path | None = None) -> PipelineConfig:
    """Flat key = value lines; # starts a comment; paths resolve against base_dir."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    field_types = typing.get_type_hints(PipelineConfig)
    kwargs = {}
    for key, value in values.items():
        if key not in field_types:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = field_types[key]
        try:
            if typing.get_origin(ftype) is tuple:
                parts = tuple(p.strip() for p in value.split(",") if p.strip())
                if base_dir is not None:
                    parts = tuple(str((base_dir / p).resolve()) if not Path(p).is_absolute() else p for p in parts)
                kwargs[key] = parts
            elif ftype is bool:
                kwargs[key] = _BOOL_VALUES[value.lower()]
            elif ftype is int:
                kwargs[key] = int(value)
            elif ftype is float:
                kwargs[key] = float(value)
            else:
                if key in ("task_file", "out_dir") and base_dir is not None and value and not Path(value).is_absolute():
                    value = str((base_dir / value).resolve())
                kwargs[key] = value
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    cfg = PipelineConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, base_dir=path.parent.resolve())
    if overrides:
        clean = {k: v for k, v in overrides.items() if v is not None}
        if clean:
            cfg = dataclasses.replace(cfg, **clean)
            cfg.validate()
    return cfg


def write_config(cfg: PipelineConfig, path: str | Path) -> None:
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ", ".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- shared plumbing -----------------------------------------------------


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_jsonl(path: str | Path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def encoder_vocab(pool: ExamplePool) -> tuple[str, ...]:
    vocab = {"\x1f"}
    for ex in pool.examples:
        vocab.update(tokenize(render_candidate(ex)))
    return tuple(sorted(vocab))


def derive_int(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def holdout_fraction(seed: int, query_id: str) -> float:
    digest = hashlib.sha256(f"{seed}:holdout:{query_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


@dataclass
class PipelineContext:
    """Everything loaded from disk that stages share."""

    cfg: PipelineConfig
    pool: ExamplePool
    train_pool: ExamplePool
    lm: CacheBigramLM
    task_specs: dict
    out_dir: Path

    @classmethod
    def build(cls, cfg: PipelineConfig) -> "PipelineContext":
        cfg.validate()
        try:
            pool = load_pool(cfg.pool_files, cap=cfg.pool_cap, seed=cfg.seed)
            task_specs = load_task_specs(cfg.task_file)
        except OSError as exc:
            raise ConfigError(f"cannot load inputs: {exc}") from exc
        for task_id in pool.task_ids():
            if task_id not in task_specs:
                raise ConfigError(f"pool task {task_id!r} missing from task registry")
        held_in = [t for t in pool.task_ids() if not task_specs[t].held_out]
        lm = CacheBigramLM.from_pool(
            pool,
            lambda_cache=cfg.lambda_cache,
            lambda_global=cfg.lambda_global,
            lambda_uniform=cfg.lambda_uniform,
            smoothing=cfg.bigram_smoothing,
        )
        return cls(
            cfg=cfg,
            pool=pool,
            train_pool=pool.restrict(held_in),
            lm=lm,
            task_specs=task_specs,
            out_dir=Path(cfg.out_dir),
        )

    def iter_dir(self, iteration: int) -> Path:
        return self.out_dir / f"iter{iteration}"

    def ensure_pool_artifact(self) -> str:
        pool_dir = self.out_dir / "pool"
        digest = pool_content_hash(self.pool)
        manifest = pool_dir / "manifest.json"
        if manifest.exists():
            try:
                existing = json.loads(manifest.read_text())
                if existing.get("content_hash") == digest:
                    return digest
            except (OSError, json.JSONDecodeError):
                pass
        save_pool(self.pool, pool_dir)
        return digest

    def training_queries(self) -> list:
        queries = []
        for task_id in sorted(self.train_pool.task_ids()):
            members = self.train_pool.task_examples(task_id)
            cap = self.cfg.max_train_queries_per_task
            if cap and len(members) > cap:
                rng = random.Random(derive_int(self.cfg.seed, f"queries:{task_id}"))
                members = [members[i] for i in sorted(rng.sample(range(len(members)), cap))]
            queries.extend(members)
        return queries


def _load_rankings(path: Path) -> list[RankedCandidates]:
    rankings = []
    for rec in read_jsonl(path):
        rankings.append(
            RankedCandidates(
                query_id=rec["query_id"],
                entries=tuple(zip(rec["candidates"], rec["scores"])),
                ranking_depth=rec["ranking_depth"],
            )
        )
    return rankings


def _load_instances(path: Path) -> list[TrainingInstance]:
    return [
        TrainingInstance(
            query_id=rec["query_id"],
            positive_id=rec["positive_id"],
            negative_ids=tuple(rec["negative_ids"]),
            llm_scores=tuple(rec["llm_scores"]),
        )
        for rec in read_jsonl(path)
    ]


def load_retriever_model(ctx_or_cfg, iter_dir: Path) -> BiEncoderModel:
    cfg = ctx_or_cfg.cfg if isinstance(ctx_or_cfg, PipelineContext) else ctx_or_cfg
    arrays, manifest = load_checkpoint(iter_dir / "retriever")
    encoder = init_bi_encoder(tuple(manifest["vocab"]), cfg.d_emb, cfg.d_out, cfg.tau, manifest["seed"]).encoder
    encoder.embeddings[:] = arrays["embeddings"]
    encoder.proj[:] = arrays["proj"]
    encoder.bias[:] = arrays["bias"]
    return BiEncoderModel(encoder=encoder, tau=cfg.tau)


def load_reward_model(cfg: PipelineConfig, iter_dir: Path) -> CrossEncoderModel:
    arrays, manifest = load_checkpoint(iter_dir / "reward")
    model = init_cross_encoder(tuple(manifest["vocab"]), cfg.d_emb, cfg.d_out, manifest["seed"])
    model.encoder.embeddings[:] = arrays["embeddings"]
    model.encoder.proj[:] = arrays["proj"]
    model.encoder.bias[:] = arrays["bias"]
    model.score_vec[:] = arrays["score_vec"]
    return model


# -- stages ---------------------------------------------------------------


def stage_rank(ctx: PipelineContext, iteration: int) -> dict:
    """Retrieve depth candidates per training query, then rank them with the
    frozen LM. Writes candidates.jsonl and ranked.jsonl."""
    cfg = ctx.cfg
    if iteration < 1:
        raise StageError("rank", "iteration must be >= 1")
    iter_dir = ctx.iter_dir(iteration)
    iter_dir.mkdir(parents=True, exist_ok=True)
    queries = ctx.training_queries()
    if not queries:
        raise StageError("rank", "no training queries (are all tasks held out?)")
    if iteration == 1:
        index = bm25_mod.build_bm25_index(ctx.train_pool)
        retriever_tag = "bm25"

        def retrieve(query):
            return bm25_mod.bm25_retrieve(index, query.input_text, cfg.depth, exclude_id=query.example_id)

    else:
        prev_dir = ctx.iter_dir(iteration - 1)
        if not (prev_dir / "retriever.json").exists():
            raise StageError("rank", f"missing previous artifacts under {prev_dir}")
        model = load_retriever_model(ctx, prev_dir)
        train_index = build_dense_index(ctx.train_pool, model)
        retriever_tag = f"dense:{train_index.model_hash}"

        def retrieve(query):
            return knn_search(train_index, model, query.input_text, cfg.depth, exclude_id=query.example_id)

    cand_rows = []
    ranked_rows = []
    for query in queries:
        hits = retrieve(query)
        cand_rows.append(
            {
                "query_id": query.example_id,
                "candidates": [cid for cid, _ in hits],
                "scores": [score for _, score in hits],
                "retriever": retriever_tag,
            }
        )
        ranking = rank_candidates(
            ctx.lm,
            query,
            [ctx.pool.get(cid) for cid, _ in hits],
            depth=cfg.depth,
            max_prompt_tokens=cfg.max_prompt_tokens,
        )
        ranked_rows.append(
            {
                "query_id": ranking.query_id,
                "candidates": [cid for cid, _ in ranking.entries],
                "scores": [score for _, score in ranking.entries],
                "ranking_depth": ranking.ranking_depth,
            }
        )
    write_jsonl(iter_dir / "candidates.jsonl", cand_rows)
    write_jsonl(iter_dir / "ranked.jsonl", ranked_rows)
    return {"queries": len(queries), "retriever": retriever_tag}


def _split_rankings(cfg: PipelineConfig, rankings):
    train, holdout = [], []
    for ranking in rankings:
        if holdout_fraction(cfg.seed, ranking.query_id) < cfg.reward_holdout_frac:
            holdout.append(ranking)
        else:
            train.append(ranking)
    return train, holdout


def _build_instances(cfg, pool, rankings, n_neg):
    instances, skipped = [], 0
    for ranking in rankings:
        task = pool.get(ranking.query_id).task_id
        instance = build_training_instance(
            ranking, pool, task, n_neg, top_k=cfg.top_k, bottom_k=cfg.bottom_k, seed=cfg.seed
        )
        if instance is None:
            skipped += 1
        else:
            instances.append(instance)
    return instances, skipped


def _instance_rows(instances):
    return [
        {
            "query_id": inst.query_id,
            "positive_id": inst.positive_id,
            "negative_ids": list(inst.negative_ids),
            "llm_scores": list(inst.llm_scores),
        }
        for inst in instances
    ]


def stage_train_reward(ctx: PipelineContext, iteration: int) -> dict:
    cfg = ctx.cfg
    iter_dir = ctx.iter_dir(iteration)
    ranked_path = iter_dir / "ranked.jsonl"
    if not ranked_path.exists():
        raise StageError("train-reward", f"missing {ranked_path}")
    rankings = _load_rankings(ranked_path)
    train, holdout = _split_rankings(cfg, rankings)
    instances, skipped = _build_instances(cfg, ctx.pool, train, cfg.n_neg_reward)
    if not instances:
        raise StageError("train-reward", "no usable training instances")
    write_jsonl(iter_dir / "reward_instances.jsonl", _instance_rows(instances))
    vocab = encoder_vocab(ctx.pool)
    model = init_cross_encoder(vocab, cfg.d_emb, cfg.d_out, derive_int(cfg.seed, f"reward:{iteration}") % 2**31)
    try:
        curve = train_reward(
            instances,
            ctx.pool,
            model,
            lr=cfg.lr_reward,
            steps=cfg.steps_reward,
            batch_size=cfg.batch_reward,
            seed=cfg.seed,
        )
    except Exception as exc:
        raise StageError("train-reward", str(exc)) from exc
    save_checkpoint(
        iter_dir / "reward",
        model.arrays(),
        {"seed": model.encoder.seed, "step": len(curve), "vocab": list(vocab), "model": "reward"},
    )
    pref = preference_rate(model, holdout, ctx.pool) if holdout else float("nan")
    return {
        "instances": len(instances),
        "skipped": skipped,
        "holdout_queries": [r.query_id for r in holdout],
        "loss_first": curve[0],
        "loss_last": curve[-1],
        "holdout_preference": pref,
    }


def stage_train_retriever(ctx: PipelineContext, iteration: int, variant: str | None = None) -> dict:
    cfg = ctx.cfg
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise StageError("train-retriever", f"unknown variant {variant!r}")
    iter_dir = ctx.iter_dir(iteration)
    ranked_path = iter_dir / "ranked.jsonl"
    if not ranked_path.exists():
        raise StageError("train-retriever", f"missing {ranked_path}")
    rankings = _load_rankings(ranked_path)
    train, _ = _split_rankings(cfg, rankings)
    instances, skipped = _build_instances(cfg, ctx.pool, train, cfg.n_neg_retriever)
    if not instances:
        raise StageError("train-retriever", "no usable training instances")
    write_jsonl(iter_dir / "retriever_instances.jsonl", _instance_rows(instances))
    reward_model = None
    if variant == "full":
        if not (iter_dir / "reward.json").exists():
            raise StageError("train-retriever", "full variant needs the reward checkpoint")
        reward_model = load_reward_model(cfg, iter_dir)
    vocab = encoder_vocab(ctx.pool)
    prev_dir = ctx.iter_dir(iteration - 1)
    if iteration > 1 and cfg.retriever_warm_start and (prev_dir / "retriever.json").exists():
        # continue from the previous round instead of re-fitting from noise;
        # the refreshed candidates still reshape the loss surface
        model = load_retriever_model(cfg, prev_dir)
    else:
        model = init_bi_encoder(
            vocab, cfg.d_emb, cfg.d_out, cfg.tau, derive_int(cfg.seed, f"retriever:{iteration}") % 2**31
        )
    try:
        curve = train_retriever(
            instances,
            ctx.pool,
            model,
            reward_model,
            alpha=cfg.alpha,
            lr=cfg.lr_retriever,
            steps=cfg.steps_retriever,
            batch_size=cfg.batch_retriever,
            seed=cfg.seed,
            variant=variant,
            include_positive=cfg.distill_include_positive,
        )
    except Exception as exc:
        raise StageError("train-retriever", str(exc)) from exc
    save_checkpoint(
        iter_dir / "retriever",
        model.arrays(),
        {
            "seed": model.encoder.seed,
            "step": len(curve),
            "vocab": list(vocab),
            "model": "retriever",
            "tau": cfg.tau,
            "variant": variant,
        },
    )
    index = build_dense_index(ctx.pool, model)
    save_dense_index(index, iter_dir / "index")
    return {
        "instances": len(instances),
        "skipped": skipped,
        "variant": variant,
        "loss_first": curve[0][0],
        "loss_last": curve[-1][0],
    }


_ITER_FILES = (
    "candidates.jsonl",
    "ranked.jsonl",
    "reward_instances.jsonl",
    "retriever_instances.jsonl",
    "reward.json",
    "reward.bin",
    "retriever.json",
    "retriever.bin",
    "index.json",
    "index.bin",
    "metrics.json",
)


def write_iteration_manifest(ctx: PipelineContext, iteration: int, variant: str, counters: dict) -> dict:
    iter_dir = ctx.iter_dir(iteration)
    metrics_path = iter_dir / "metrics.json"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(counters, fh, indent=1, sort_keys=True)
        fh.write("\n")
    files = {name: sha256_file(iter_dir / name) for name in _ITER_FILES}
    upstream = {"pool": pool_content_hash(ctx.pool)}
    if iteration > 1:
        prev_manifest = ctx.iter_dir(iteration - 1) / "manifest.json"
        upstream["previous_iteration"] = sha256_file(prev_manifest)
        upstream["previous_retriever"] = json.loads(
            (ctx.iter_dir(iteration - 1) / "retriever.json").read_text()
        )["content_hash"]
    manifest = {
        "kind": "iteration",
        "iteration": iteration,
        "variant": variant,
        "stage_config": ctx.cfg.stage_echo(),
        "files": files,
        "upstream": upstream,
    }
    with open(iter_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def iteration_valid(ctx: PipelineContext, iteration: int) -> bool:
    """True when the manifest exists and every hash in the chain matches."""
    iter_dir = ctx.iter_dir(iteration)
    manifest_path = iter_dir / "manifest.json"
    if not manifest_path.exists():
        return False
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    if manifest.get("stage_config") != ctx.cfg.stage_echo():
        return False
    if manifest.get("variant") != ctx.cfg.variant:
        return False
    for name, digest in manifest.get("files", {}).items():
        path = iter_dir / name
        if not path.exists() or sha256_file(path) != digest:
            return False
    upstream = manifest.get("upstream", {})
    if upstream.get("pool") != pool_content_hash(ctx.pool):
        return False
    if iteration > 1:
        prev_manifest = ctx.iter_dir(iteration - 1) / "manifest.json"
        if not prev_manifest.exists():
            return False
        if upstream.get("previous_iteration") != sha256_file(prev_manifest):
            return False
    return True


def run_iteration(ctx: PipelineContext, iteration: int, variant: str | None = None) -> dict:
    variant = variant or ctx.cfg.variant
    rank_stats = stage_rank(ctx, iteration)
    reward_stats = stage_train_reward(ctx, iteration)
    retr_stats = stage_train_retriever(ctx, iteration, variant)
    counters = {"rank": rank_stats, "reward": reward_stats, "retriever": retr_stats}
    return write_iteration_manifest(ctx, iteration, variant, counters)


@dataclass
class PipelineResult:
    executed: list[int]
    reports: dict[str, EvalReport]
    out_dir: Path
    shot_scaling: list[list[str]] = field(default_factory=list)


def _eval_strategies(ctx: PipelineContext):
    strategies = [ZeroShotStrategy(), RandomStrategy(ctx.pool, ctx.cfg.seed)]
    strategies.append(Bm25Strategy(bm25_mod.build_bm25_index(ctx.pool), ctx.pool))
    for i in range(1, ctx.cfg.iterations + 1):
        iter_dir = ctx.iter_dir(i)
        if (iter_dir / "index.json").exists():
            model = load_retriever_model(ctx, iter_dir)
            index = load_dense_index(iter_dir / "index")
            strategies.append(DenseStrategy(index, model, ctx.pool, name=f"dense_iter{i}"))
    return strategies


def load_tests(cfg: PipelineConfig) -> dict:
    tests = {}
    for path in cfg.test_files:
        for ex in load_test_examples(path):
            tests.setdefault(ex.task_id, []).append(ex)
    return tests


def stage_eval(ctx: PipelineContext) -> dict[str, EvalReport]:
    cfg = ctx.cfg
    tests = load_tests(cfg)
    for task_id in tests:
        if task_id not in ctx.task_specs:
            raise StageError("eval", f"test task {task_id!r} missing from task registry")
    eval_dir = ctx.out_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    for strategy in _eval_strategies(ctx):
        records = []
        report = evaluate_suite(
            strategy,
            ctx.lm,
            tests,
            ctx.task_specs,
            k_shots=cfg.k_shots,
            max_prompt_tokens=cfg.max_prompt_tokens,
            max_decode_tokens=cfg.max_decode_tokens,
            shots_best_last=cfg.shots_best_last,
            per_query_sink=records.append,
        )
        reports[strategy.name] = report
        write_report(report, eval_dir / f"report_{strategy.name}.json")
        write_jsonl(eval_dir / f"perquery_{strategy.name}.jsonl", records)
    write_tsv(report_rows(list(reports.values())), ctx.out_dir / "report.tsv")
    return reports


def shot_scaling_table(ctx: PipelineContext, ks=(0, 1, 2, 4, 8)) -> list[list[str]]:
    """Held-in task mean for the last iteration's retriever across shot counts."""
    cfg = ctx.cfg
    tests = load_tests(cfg)
    strategies = _eval_strategies(ctx)
    dense = [s for s in strategies if s.name.startswith("dense_iter")]
    if not dense:
        raise StageError("eval", "no trained retriever for shot scaling")
    strategy = dense[-1]
    rows = [["k_shots", "task_mean", "held_in_task_mean"]]
    for k in ks:
        report = evaluate_suite(
            strategy,
            ctx.lm,
            tests,
            ctx.task_specs,
            k_shots=k,
            max_prompt_tokens=cfg.max_prompt_tokens,
            max_decode_tokens=cfg.max_decode_tokens,
            shots_best_last=cfg.shots_best_last,
        )
        rows.append([str(k), f"{report.task_mean:.4f}", f"{report.held_in_task_mean:.4f}"])
    write_tsv(rows, ctx.out_dir / "shot_scaling.tsv")
    return rows


def run_pipeline(cfg: PipelineConfig, with_shot_scaling: bool = True) -> PipelineResult:
    ctx = PipelineContext.build(cfg)
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    ctx.ensure_pool_artifact()
    executed = []
    for iteration in range(1, cfg.iterations + 1):
        if iteration_valid(ctx, iteration):
            log.info("iteration %d artifacts valid; skipping", iteration)
            continue
        run_iteration(ctx, iteration)
        executed.append(iteration)
    reports = stage_eval(ctx)
    scaling = shot_scaling_table(ctx) if with_shot_scaling and cfg.iterations >= 1 else []
    return PipelineResult(executed=executed, reports=reports, out_dir=ctx.out_dir, shot_scaling=scaling)


def comparison_report(out_dir: str | Path) -> dict:
    """Collect written eval reports plus the scaling table for display."""
    out = Path(out_dir)
    eval_dir = out / "eval"
    reports = {}
    if eval_dir.exists():
        for path in sorted(eval_dir.glob("report_*.json")):
            rep = load_report(path)
            reports[rep.strategy] = rep
    result = {"reports": {name: rep.to_dict() for name, rep in reports.items()}}
    table = out / "report.tsv"
    if table.exists():
        result["table"] = table.read_text(encoding="utf-8")
    scaling = out / "shot_scaling.tsv"
    if scaling.exists():
        result["shot_scaling"] = scaling.read_text(encoding="utf-8")
    return result


def bootstrap_suite(out_dir: str | Path, seed: int, train_size: int = 200, test_size: int = 100):
    """Generate the benchmark plus a ready-to-run config next to it.

    Config paths are written relative to the config's own directory, so the
    generated tree works from any cwd and can be moved as a unit.
    """
    out = Path(out_dir)
    paths = generate_suite(out / "suite", seed, train_size=train_size, test_size=test_size)
    cfg = PipelineConfig(
        pool_files=tuple(str(p.relative_to(out)) for p in paths.pool_files),
        test_files=tuple(str(p.relative_to(out)) for p in paths.test_files),
        task_file=str(paths.task_file.relative_to(out)),
        out_dir="run",
        seed=seed,
    )
    config_path = out / "config.llmr"
    write_config(cfg, config_path)
    return paths, config_path
