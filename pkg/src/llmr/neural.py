"""Shared numeric core: bag-of-embeddings encoder, Adam, gradient checking,
and content-hashed checkpoints.

All parameters live in name-keyed float64 arrays so the optimizer, the
finite-difference checker, and the checkpoint writer share one layout.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import tokenize

# small enough that tokens never seen by the optimizer contribute little to
# the pooled encoding; Adam grows trained rows to whatever scale the loss needs
INIT_SCALE = 0.01
NORM_FLOOR = 1e-12


class NonFiniteGradientError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class EncoderParams:
    """Token table + affine projection; encodings are L2-normalized."""

    vocab: tuple[str, ...]
    embeddings: np.ndarray
    proj: np.ndarray
    bias: np.ndarray
    seed: int
    token_ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_ids = {t: i for i, t in enumerate(self.vocab)}

    @property
    def d_emb(self) -> int:
        return self.embeddings.shape[1]

    @property
    def d_out(self) -> int:
        return self.proj.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embeddings": self.embeddings, "proj": self.proj, "bias": self.bias}

    def ids(self, text: str) -> list[int]:
        unk = self.token_ids["\x1f"]
        return [self.token_ids.get(t, unk) for t in tokenize(text)]


def init_encoder(vocab, d_emb: int, d_out: int, seed: int) -> EncoderParams:
    """Uniform(-INIT_SCALE, INIT_SCALE) embeddings and projection, zero bias.

    The unk slot is appended if absent so out-of-vocabulary tokens always
    map somewhere.
    """
    vocab = tuple(vocab)
    if "\x1f" not in vocab:
        vocab = vocab + ("\x1f",)
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(len(vocab), d_emb))
    proj = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(d_emb, d_out))
    bias = np.zeros(d_out)
    return EncoderParams(vocab=vocab, embeddings=emb, proj=proj, bias=bias, seed=seed)


def encode_ids(params: EncoderParams, ids: list[int]):
    """Forward pass returning the encoding and the backward context."""
    if not ids:
        return np.zeros(params.d_out), None
    mean = params.embeddings[ids].mean(axis=0)
    z = mean @ params.proj + params.bias
    norm = float(np.linalg.norm(z))
    safe = max(norm, NORM_FLOOR)
    out = z / safe
    return out, (ids, mean, out, safe)


def encode_text(params: EncoderParams, text: str) -> np.ndarray:
    """Mean token embedding, affine projection, L2 norm; empty text -> zeros."""
    return encode_ids(params, params.ids(text))[0]


def encode_backward(params: EncoderParams, ctx, grad_out: np.ndarray, grads: dict) -> None:
    """Accumulate d loss/d params given d loss/d encoding."""
    if ctx is None:
        return
    ids, mean, out, safe = ctx
    gz = (grad_out - out * float(out @ grad_out)) / safe
    grads["proj"] += np.outer(mean, gz)
    grads["bias"] += gz
    gmean = params.proj @ gz
    contrib = gmean / len(ids)
    for i in ids:
        grads["embeddings"][i] += contrib


def zero_grads(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in arrays.items()}


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update in place; non-finite gradients are fatal."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        m_hat = state.m[name] / (1 - state.beta1**t)
        v_hat = state.v[name] / (1 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def grad_check(
    loss_fn,
    params: dict[str, np.ndarray],
    n_coords: int = 100,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled across all arrays. Near-zero pairs (both under
    1e-8 in magnitude) are compared by absolute difference instead, so flat
    directions do not produce spurious blowups.
    """
    base_loss, grads = loss_fn(params)
    coords = []
    for name in sorted(params):
        coords.extend((name, i) for i in range(params[name].size))
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        picked = [coords[i] for i in rng.choice(len(coords), size=n_coords, replace=False)]
    else:
        picked = coords
    worst = 0.0
    for name, flat in picked:
        bumped = {k: v.copy() for k, v in params.items()}
        bumped[name].flat[flat] += h
        up, _ = loss_fn(bumped)
        bumped[name].flat[flat] -= 2 * h
        down, _ = loss_fn(bumped)
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].flat[flat])
        scale = max(abs(numeric), abs(analytic))
        if scale < 1e-8:
            err = abs(numeric - analytic)
        else:
            err = abs(numeric - analytic) / scale
        worst = max(worst, err)
    return worst


def params_hash(arrays: dict[str, np.ndarray]) -> str:
    """sha256 over name-sorted little-endian float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(prefix: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> str:
    """Write <prefix>.bin (flat little-endian float64) and <prefix>.json.

    Returns the content hash of the binary payload.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    order = sorted(arrays)
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in order)
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        fh.write(payload)
    digest = hashlib.sha256(payload).hexdigest()
    manifest = {
        "kind": "checkpoint",
        "order": order,
        "shapes": {n: list(arrays[n].shape) for n in order},
        "dtype": "<f8",
        "content_hash": digest,
    }
    manifest.update(meta)
    with open(prefix.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return digest


def load_checkpoint(prefix: str | Path):
    """Read arrays + manifest, refusing when the payload hash mismatches."""
    prefix = Path(prefix)
    with open(prefix.with_suffix(".json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(prefix.with_suffix(".bin"), "rb") as fh:
        payload = fh.read()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["content_hash"]:
        raise CheckpointError(f"checkpoint {prefix} content hash mismatch")
    arrays = {}
    offset = 0
    for name in manifest["order"]:
        shape = tuple(manifest["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        chunk = payload[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"checkpoint {prefix} truncated at {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError(f"checkpoint {prefix} has trailing bytes")
    return arrays, manifest
