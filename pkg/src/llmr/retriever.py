"""Bi-encoder retriever distilled from the reward model.

One shared encoder embeds queries (input only) and candidates (rendered
input + output). The match score is temperature-scaled cosine; encodings
are already unit length so it is a scaled dot product.

Total loss per Eq.-style combination: alpha * contrastive + distillation,
where distillation is KL(p_reward || p_retriever) over each query's own
candidate set and the contrastive term uses in-batch negatives.
"""

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ExamplePool, render_candidate
from .neural import (
    AdamState,
    EncoderParams,
    NonFiniteGradientError,
    adam_step,
    encode_backward,
    encode_ids,
    params_hash,
    zero_grads,
)
from .reward import TrainingAborted, derive_rng, reward_score

VARIANTS = ("full", "no_reward", "llm_score_as_reward")


@dataclass
class BiEncoderModel:
    encoder: EncoderParams
    tau: float

    def arrays(self) -> dict[str, np.ndarray]:
        return self.encoder.arrays()

    def model_hash(self) -> str:
        return params_hash(self.arrays())


def init_bi_encoder(vocab, d_emb: int, d_out: int, tau: float, seed: int) -> BiEncoderModel:
    from .neural import init_encoder

    if tau <= 0:
        raise ValueError("tau must be positive")
    return BiEncoderModel(encoder=init_encoder(vocab, d_emb, d_out, seed), tau=tau)


def embed_query(model: BiEncoderModel, text: str) -> np.ndarray:
    return encode_ids(model.encoder, model.encoder.ids(text))[0]


def embed_candidate(model: BiEncoderModel, example) -> np.ndarray:
    return encode_ids(model.encoder, model.encoder.ids(render_candidate(example)))[0]


def match_score(model: BiEncoderModel, query_text: str, example) -> float:
    return float(embed_query(model, query_text) @ embed_candidate(model, example)) / model.tau


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def distill_loss(reward_scores, retriever_scores) -> float:
    """KL(softmax(reward) || softmax(retriever)) over one candidate set."""
    r = np.asarray(reward_scores, dtype=float)
    s = np.asarray(retriever_scores, dtype=float)
    if r.shape != s.shape or r.ndim != 1 or r.size == 0:
        raise ValueError("score lists must be equal-length non-empty vectors")
    p = softmax(r)
    log_p = np.log(p)
    log_q = s - s.max()
    log_q = log_q - math.log(np.exp(log_q).sum())
    return float((p * (log_p - log_q)).sum())


@dataclass(frozen=True, slots=True)
class ContrastiveItem:
    """One query with candidate embeddings and their target scores."""

    query_vec: np.ndarray
    cand_vecs: np.ndarray
    target_scores: np.ndarray


def contrastive_loss(items, tau: float) -> float:
    """InfoNCE with in-batch negatives.

    Per query the softmax runs over every candidate in the batch; the
    positive is the query's own candidate with the highest target score
    (ties to the lowest index).
    """
    if not items:
        raise ValueError("empty batch")
    all_cands = np.vstack([item.cand_vecs for item in items])
    offsets = np.cumsum([0] + [item.cand_vecs.shape[0] for item in items])
    total = 0.0
    for i, item in enumerate(items):
        logits = all_cands @ item.query_vec / tau
        pos = offsets[i] + int(np.argmax(item.target_scores))
        shifted = logits - logits.max()
        total += math.log(np.exp(shifted).sum()) - shifted[pos]
    return total / len(items)


def retriever_loss(l_contrastive: float, l_distill: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return alpha * l_contrastive + l_distill


def _resolve_targets(reward_model, instance, pool, variant: str):
    """Target scores for one instance's candidate set, per variant."""
    if variant == "llm_score_as_reward":
        return np.array(instance.llm_scores, dtype=float)
    if variant == "no_reward":
        targets = np.zeros(len(instance.candidate_ids()))
        targets[0] = 1.0
        return targets
    query = pool.get(instance.query_id)
    scores = []
    for cid in instance.candidate_ids():
        cand = pool.get(cid)
        scores.append(
            reward_score(reward_model, query.input_text, query.output_text, cand.input_text, cand.output_text)
        )
    return np.array(scores, dtype=float)


def retriever_batch_loss(
    model: BiEncoderModel,
    instances,
    pool: ExamplePool,
    targets: list[np.ndarray],
    alpha: float,
    variant: str = "full",
    include_positive: bool = True,
    grads: dict | None = None,
):
    """alpha * contrastive + distillation over one batch, with gradients.

    targets[i] aligns with instances[i].candidate_ids(). For no_reward the
    distillation term is dropped and the loss is the plain contrastive term.
    Returns (total, contrastive, distill).
    """
    enc = model.encoder
    tau = model.tau
    q_states = []
    c_states = []
    for instance in instances:
        query = pool.get(instance.query_id)
        q_states.append(encode_ids(enc, enc.ids(query.input_text)))
        c_states.append(
            [encode_ids(enc, enc.ids(render_candidate(pool.get(cid)))) for cid in instance.candidate_ids()]
        )
    all_vecs = np.vstack([vec for states in c_states for vec, _ in states])
    counts = [len(states) for states in c_states]
    offsets = np.cumsum([0] + counts)
    n = len(instances)
    scale = 1.0 / n
    grad_q = [np.zeros(enc.d_out) for _ in range(n)]
    grad_c = np.zeros_like(all_vecs)

    l_cont = 0.0
    for i, instance in enumerate(instances):
        q_vec = q_states[i][0]
        logits = all_vecs @ q_vec / tau
        pos = offsets[i] + int(np.argmax(targets[i]))
        shifted = logits - logits.max()
        log_z = math.log(np.exp(shifted).sum())
        l_cont += log_z - shifted[pos]
        if grads is not None:
            p = np.exp(shifted - log_z)
            dlogits = p
            dlogits[pos] -= 1.0
            weight = alpha if variant != "no_reward" else 1.0
            dlogits *= scale * weight / tau
            grad_c += np.outer(dlogits, q_vec)
            grad_q[i] += all_vecs.T @ dlogits
    l_cont *= scale

    l_dist = 0.0
    if variant != "no_reward":
        for i, instance in enumerate(instances):
            q_vec = q_states[i][0]
            own = all_vecs[offsets[i] : offsets[i + 1]]
            target = targets[i]
            if include_positive:
                sel = np.arange(len(target))
            else:
                sel = np.arange(1, len(target))
            p = softmax(target[sel])
            logits = own[sel] @ q_vec / tau
            shifted = logits - logits.max()
            log_z = math.log(np.exp(shifted).sum())
            log_q = shifted - log_z
            l_dist += float((p * (np.log(p) - log_q)).sum())
            if grads is not None:
                dlogits = (np.exp(log_q) - p) * scale / tau
                grad_c[offsets[i] + sel] += np.outer(dlogits, q_vec)
                grad_q[i] += own[sel].T @ dlogits
        l_dist *= scale

    if grads is not None:
        for i in range(n):
            encode_backward(enc, q_states[i][1], grad_q[i], grads)
            for j, (_, ctx) in enumerate(c_states[i]):
                encode_backward(enc, ctx, grad_c[offsets[i] + j], grads)

    if variant == "no_reward":
        total = l_cont
    else:
        total = retriever_loss(l_cont, l_dist, alpha)
    return total, l_cont, l_dist


def train_retriever(
    instances,
    pool: ExamplePool,
    model: BiEncoderModel,
    reward_model,
    alpha: float,
    lr: float,
    steps: int,
    batch_size: int,
    seed: int,
    variant: str = "full",
    include_positive: bool = True,
) -> list[tuple[float, float, float]]:
    """Adam training; returns (total, contrastive, distill) per step."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "full" and reward_model is None:
        raise ValueError("full variant needs a reward model")
    if not instances:
        raise ValueError("no training instances")
    state = AdamState(lr=lr)
    rng = derive_rng(seed, "retriever-batches")
    params = model.arrays()
    target_cache = {
        inst.query_id: _resolve_targets(reward_model, inst, pool, variant)
        for inst in instances
    }
    curve = []
    for step in range(steps):
        if batch_size >= len(instances):
            batch = list(instances)
        else:
            batch = [instances[i] for i in sorted(rng.sample(range(len(instances)), batch_size))]
        targets = [target_cache[inst.query_id] for inst in batch]
        grads = zero_grads(params)
        total, l_cont, l_dist = retriever_batch_loss(
            model, batch, pool, targets, alpha, variant, include_positive, grads
        )
        if not math.isfinite(total):
            raise TrainingAborted(f"non-finite retriever loss at step {step}")
        try:
            adam_step(params, grads, state)
        except NonFiniteGradientError as exc:
            raise TrainingAborted(f"step {step}: {exc}") from exc
        curve.append((total, l_cont, l_dist))
    return curve


@dataclass
class DenseIndex:
    """Exact-search matrix of L2-normalized candidate encodings."""

    ids: tuple[str, ...]
    matrix: np.ndarray
    model_hash: str


def build_dense_index(pool: ExamplePool, model: BiEncoderModel) -> DenseIndex:
    rows = [embed_candidate(model, ex) for ex in pool.examples]
    matrix = np.vstack(rows) if rows else np.zeros((0, model.encoder.d_out))
    return DenseIndex(
        ids=tuple(ex.example_id for ex in pool.examples),
        matrix=matrix,
        model_hash=model.model_hash(),
    )


def knn_search(
    index: DenseIndex,
    model: BiEncoderModel,
    query_text: str,
    k: int,
    exclude_id: str | None = None,
) -> list[tuple[str, float]]:
    """Exact top-k by match score; refuses a model that built another index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if model.model_hash() != index.model_hash:
        raise ValueError("model hash does not match index")
    scores = index.matrix @ embed_query(model, query_text) / model.tau
    ranked = [
        (doc_id, float(score))
        for doc_id, score in zip(index.ids, scores)
        if doc_id != exclude_id
    ]
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked[:k]


def save_dense_index(index: DenseIndex, prefix: str | Path) -> str:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(index.matrix, dtype="<f8").tobytes()
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        fh.write(payload)
    digest = hashlib.sha256(payload).hexdigest()
    manifest = {
        "kind": "dense_index",
        "ids": list(index.ids),
        "dim": int(index.matrix.shape[1]) if index.matrix.size else 0,
        "count": len(index.ids),
        "model_hash": index.model_hash,
        "content_hash": digest,
    }
    with open(prefix.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return digest


def load_dense_index(prefix: str | Path) -> DenseIndex:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(prefix.with_suffix(".bin"), "rb") as fh:
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != manifest["content_hash"]:
        raise ValueError(f"dense index {prefix} content hash mismatch")
    count = manifest["count"]
    dim = manifest["dim"]
    matrix = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    matrix = matrix.reshape((count, dim)) if count else np.zeros((0, dim))
    return DenseIndex(ids=tuple(manifest["ids"]), matrix=matrix, model_hash=manifest["model_hash"])
