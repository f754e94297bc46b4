"""Cross-encoder reward model over LM-ranked candidates.

Scoring uses an elementwise interaction between the encoded query pair and
the encoded candidate pair: score = v . (enc(x+"\n"+y) * enc(xi+"\n"+yi)).
With the bag encoder, a head over the flat concatenation would be additive
in candidate tokens and could only learn a query-independent candidate
prior; the interaction head is what makes pairwise preference learnable.

Training minimizes cross-entropy of the positive against its sampled hard
negatives (one softmax per training instance).
"""

import hashlib
import math
import random
from dataclasses import dataclass

import numpy as np

from .corpus import ExamplePool, render_candidate
from .neural import (
    AdamState,
    EncoderParams,
    NonFiniteGradientError,
    adam_step,
    encode_backward,
    encode_ids,
    zero_grads,
)
from .scorer import RankedCandidates


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class TrainingInstance:
    """One query with its sampled positive and hard negatives.

    llm_scores holds the ranking scores aligned as [positive] + negatives.
    """

    query_id: str
    positive_id: str
    negative_ids: tuple[str, ...]
    llm_scores: tuple[float, ...]

    def candidate_ids(self) -> list[str]:
        return [self.positive_id, *self.negative_ids]


@dataclass
class CrossEncoderModel:
    encoder: EncoderParams
    score_vec: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.encoder.arrays()
        out["score_vec"] = self.score_vec
        return out


def init_cross_encoder(vocab, d_emb: int, d_out: int, seed: int) -> CrossEncoderModel:
    from .neural import init_encoder

    encoder = init_encoder(vocab, d_emb, d_out, seed)
    rng = np.random.default_rng(seed + 1)
    return CrossEncoderModel(encoder=encoder, score_vec=rng.uniform(-0.05, 0.05, size=d_out))


def reward_score(model: CrossEncoderModel, x: str, y: str, cand_x: str, cand_y: str) -> float:
    q, _ = encode_ids(model.encoder, model.encoder.ids(x + "\n" + y))
    c, _ = encode_ids(model.encoder, model.encoder.ids(cand_x + "\n" + cand_y))
    return float(model.score_vec @ (q * c))


def reward_loss(pos_score: float, neg_scores) -> float:
    """Cross-entropy of the positive within [positive] + negatives."""
    scores = np.array([pos_score, *neg_scores], dtype=float)
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[0])


def derive_rng(seed: int, label: str) -> random.Random:
    """Stable per-label RNG, independent of processing order."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def build_training_instance(
    ranking: RankedCandidates,
    pool: ExamplePool,
    query_task: str,
    n_neg: int,
    top_k: int = 3,
    bottom_k: int = 16,
    seed: int = 0,
) -> TrainingInstance | None:
    """Positive uniform from the top window, negatives sampled without
    replacement from the bottom window, cross-task entries dropped first.

    Returns None when fewer than top_k + bottom_k same-task entries remain.
    """
    if n_neg > bottom_k:
        raise ValueError("n_neg cannot exceed bottom_k")
    same_task = [
        (cid, score)
        for cid, score in ranking.entries
        if pool.get(cid).task_id == query_task
    ]
    if len(same_task) < top_k + bottom_k:
        return None
    rng = derive_rng(seed, f"instance:{ranking.query_id}")
    pos_id, pos_score = same_task[rng.randrange(top_k)]
    bottom = same_task[-bottom_k:]
    negatives = rng.sample(bottom, n_neg)
    return TrainingInstance(
        query_id=ranking.query_id,
        positive_id=pos_id,
        negative_ids=tuple(cid for cid, _ in negatives),
        llm_scores=(pos_score, *(score for _, score in negatives)),
    )


def _instance_id_lists(model: CrossEncoderModel, instance: TrainingInstance, pool: ExamplePool):
    query = pool.get(instance.query_id)
    enc = model.encoder
    q_ids = enc.ids(query.input_text + "\n" + query.output_text)
    cand_ids = [enc.ids(render_candidate(pool.get(cid))) for cid in instance.candidate_ids()]
    return q_ids, cand_ids


def reward_batch_loss(
    model: CrossEncoderModel,
    instances,
    pool: ExamplePool,
    grads: dict | None = None,
) -> float:
    """Mean instance loss; accumulates analytic gradients when grads given."""
    v = model.score_vec
    total = 0.0
    scale = 1.0 / len(instances)
    for instance in instances:
        q_ids, cand_ids = _instance_id_lists(model, instance, pool)
        q_vec, q_ctx = encode_ids(model.encoder, q_ids)
        cand = [encode_ids(model.encoder, ids) for ids in cand_ids]
        scores = np.array([float(v @ (q_vec * c_vec)) for c_vec, _ in cand])
        shifted = scores - scores.max()
        log_z = math.log(np.exp(shifted).sum())
        total += log_z - shifted[0]
        if grads is None:
            continue
        probs = np.exp(shifted - log_z)
        dscores = probs.copy()
        dscores[0] -= 1.0
        dscores *= scale
        gq = np.zeros_like(q_vec)
        for ds, (c_vec, c_ctx) in zip(dscores, cand):
            grads["score_vec"] += ds * (q_vec * c_vec)
            encode_backward(model.encoder, c_ctx, ds * (v * q_vec), grads)
            gq += ds * (v * c_vec)
        encode_backward(model.encoder, q_ctx, gq, grads)
    return total * scale


def train_reward(
    instances,
    pool: ExamplePool,
    model: CrossEncoderModel,
    lr: float,
    steps: int,
    batch_size: int,
    seed: int,
) -> list[float]:
    """Adam training over seeded batches; returns the loss curve."""
    if not instances:
        raise ValueError("no training instances")
    state = AdamState(lr=lr)
    rng = derive_rng(seed, "reward-batches")
    params = model.arrays()
    curve = []
    for step in range(steps):
        if batch_size >= len(instances):
            batch = list(instances)
        else:
            batch = [instances[i] for i in sorted(rng.sample(range(len(instances)), batch_size))]
        grads = zero_grads(params)
        loss = reward_batch_loss(model, batch, pool, grads)
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite reward loss at step {step}")
        try:
            adam_step(params, grads, state)
        except NonFiniteGradientError as exc:
            raise TrainingAborted(f"step {step}: {exc}") from exc
        curve.append(loss)
    return curve


def preference_rate(model: CrossEncoderModel, rankings, pool: ExamplePool) -> float:
    """Fraction of rankings whose LM-top candidate outscores the LM-bottom one."""
    wins = 0
    total = 0
    for ranking in rankings:
        query = pool.get(ranking.query_id)
        same_task = [
            cid for cid, _ in ranking.entries if pool.get(cid).task_id == query.task_id
        ]
        if len(same_task) < 2:
            continue
        top = pool.get(same_task[0])
        bottom = pool.get(same_task[-1])
        s_top = reward_score(model, query.input_text, query.output_text, top.input_text, top.output_text)
        s_bottom = reward_score(
            model, query.input_text, query.output_text, bottom.input_text, bottom.output_text
        )
        wins += int(s_top > s_bottom)
        total += 1
    if total == 0:
        raise ValueError("no usable rankings for preference measurement")
    return wins / total
