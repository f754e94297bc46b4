"""HTTP front end. Every handler is a thin wrapper over the pipeline stage
functions; configuration always arrives as a path to a saved config file so
that runs stay reproducible from artifacts alone.
"""

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import bm25 as bm25_mod
from ..corpus import Example
from ..pipeline import (
    ConfigError,
    PipelineContext,
    StageError,
    bootstrap_suite,
    comparison_report,
    load_config,
    load_retriever_model,
    run_iteration,
    run_pipeline,
    shot_scaling_table,
    stage_eval,
    stage_rank,
    stage_train_retriever,
    stage_train_reward,
)
from ..retriever import knn_search, load_dense_index
from ..scorer import rank_candidates
from . import schemas


def _context(req: schemas.ConfigRequest) -> PipelineContext:
    cfg = load_config(req.config, overrides=req.overrides())
    return PipelineContext.build(cfg)


def create_app() -> FastAPI:
    app = FastAPI(title="llmr", version=__version__)

    @app.exception_handler(ConfigError)
    def _config_error(_: Request, exc: ConfigError):
        body = schemas.ErrorBody(kind="config", message=str(exc))
        return JSONResponse(status_code=400, content=body.model_dump())

    @app.exception_handler(StageError)
    def _stage_error(_: Request, exc: StageError):
        body = schemas.ErrorBody(kind="stage", message=str(exc), stage=exc.stage)
        return JSONResponse(status_code=500, content=body.model_dump())

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/suite", response_model=schemas.SuiteResponse)
    def suite(req: schemas.SuiteRequest):
        try:
            paths, config_path = bootstrap_suite(
                req.out_dir, req.seed, train_size=req.train_size, test_size=req.test_size
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return schemas.SuiteResponse(
            suite_dir=str(paths.out_dir),
            config_path=str(config_path),
            pool_files=[str(p) for p in paths.pool_files],
            test_files=[str(p) for p in paths.test_files],
            task_file=str(paths.task_file),
        )

    @app.post("/rank", response_model=schemas.StageResponse)
    def rank(req: schemas.IterationRequest):
        ctx = _context(req)
        stats = stage_rank(ctx, req.iteration)
        return schemas.StageResponse(stage="rank", iteration=req.iteration, stats=stats)

    @app.post("/train-reward", response_model=schemas.StageResponse)
    def train_reward_ep(req: schemas.IterationRequest):
        ctx = _context(req)
        stats = stage_train_reward(ctx, req.iteration)
        return schemas.StageResponse(stage="train-reward", iteration=req.iteration, stats=stats)

    @app.post("/train-retriever", response_model=schemas.StageResponse)
    def train_retriever_ep(req: schemas.IterationRequest):
        ctx = _context(req)
        stats = stage_train_retriever(ctx, req.iteration)
        return schemas.StageResponse(stage="train-retriever", iteration=req.iteration, stats=stats)

    @app.post("/iterate", response_model=schemas.IterateResponse)
    def iterate(req: schemas.IterationRequest):
        ctx = _context(req)
        manifest = run_iteration(ctx, req.iteration)
        return schemas.IterateResponse(iteration=req.iteration, manifest=manifest)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_ep(req: schemas.ConfigRequest):
        ctx = _context(req)
        reports = stage_eval(ctx)
        return schemas.EvalResponse(reports={k: v.to_dict() for k, v in reports.items()})

    @app.post("/run", response_model=schemas.RunResponse)
    def run(req: schemas.RunRequest):
        cfg = load_config(req.config, overrides=req.overrides())
        result = run_pipeline(cfg, with_shot_scaling=req.shot_scaling)
        return schemas.RunResponse(
            executed=result.executed,
            reports={k: v.to_dict() for k, v in result.reports.items()},
            shot_scaling=result.shot_scaling,
            out_dir=str(result.out_dir),
        )

    @app.post("/report", response_model=schemas.CompareResponse)
    def report(req: schemas.ReportRequest):
        if req.out_dir:
            out_dir = req.out_dir
        elif req.config:
            out_dir = load_config(req.config).out_dir
        else:
            raise ConfigError("report needs config or out_dir")
        if not Path(out_dir).exists():
            raise ConfigError(f"no run directory at {out_dir}")
        return schemas.CompareResponse(**comparison_report(out_dir))

    @app.post("/search", response_model=schemas.SearchResponse)
    def search(req: schemas.SearchRequest):
        ctx = _context(req)
        if req.method == "bm25":
            index = bm25_mod.build_bm25_index(ctx.pool)
            hits = bm25_mod.bm25_retrieve(index, req.query, req.k)
            tag = "bm25"
        else:
            iteration = req.iteration
            if iteration is None:
                trained = [
                    i for i in range(1, ctx.cfg.iterations + 1)
                    if (ctx.iter_dir(i) / "index.json").exists()
                ]
                if not trained:
                    raise ConfigError("no trained retriever found; run the pipeline first")
                iteration = trained[-1]
            iter_dir = ctx.iter_dir(iteration)
            if not (iter_dir / "index.json").exists():
                raise ConfigError(f"no dense index under {iter_dir}")
            model = load_retriever_model(ctx, iter_dir)
            index = load_dense_index(iter_dir / "index")
            hits = knn_search(index, model, req.query, req.k)
            tag = f"dense:{index.model_hash}"
        return schemas.SearchResponse(
            hits=[schemas.Hit(id=cid, score=score) for cid, score in hits], retriever=tag
        )

    @app.post("/score", response_model=schemas.ScoreResponse)
    def score(req: schemas.ScoreRequest):
        ctx = _context(req)
        try:
            candidates = [ctx.pool.get(cid) for cid in req.candidate_ids]
        except KeyError as exc:
            raise ConfigError(f"unknown candidate id {exc.args[0]!r}") from exc
        query = Example(
            example_id="adhoc:query",
            task_id=req.task_id,
            input_text=req.input_text,
            output_text=req.output_text,
        )
        ranking = rank_candidates(
            ctx.lm,
            query,
            candidates,
            depth=max(len(candidates), 1),
            max_prompt_tokens=ctx.cfg.max_prompt_tokens,
        )
        return schemas.ScoreResponse(
            entries=[schemas.Hit(id=cid, score=s) for cid, s in ranking.entries],
            ranking_depth=ranking.ranking_depth,
        )

    return app


app = create_app()
