"""Image-referenced reward head scoring background appropriateness.

The head receives token embeddings for an original product photo and one
generated variant. In attention mode the generated tokens attend over the
original tokens (single-head cross-attention), both paths are mean-pooled
and concatenated to a 2d vector, and a one-hidden-layer MLP maps that to a
scalar score. Training minimizes a pairwise ranking loss plus a per-score
classification loss, with hand-derived gradients and an Adam loop that is
bit-deterministic for a fixed seed.

Embeddings are (T, d) float arrays with T >= 1 tokens. All math runs in
float64; the on-disk bundle stores float32 tensors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .rng import Pcg32
from .tensor_io import load_tensor, save_tensor

FUSION_MODES = ("attention", "concat")
LOSS_MODES = ("full", "rank_only")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAMS_MANIFEST = "params.json"


class TrainingDivergedError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


class RewardScores(NamedTuple):
    r_good: float
    r_bad: float


@dataclass
class RewardHeadConfig:
    d: int
    hidden: int = 32
    fusion: str = "attention"
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    pass_threshold: float = 0.5
    loss_mode: str = "full"

    def validate(self) -> None:
        if self.d < 1 or self.hidden < 1:
            raise ValueError(f"d and hidden must be >= 1, got d={self.d} hidden={self.hidden}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if not 0.0 < self.pass_threshold < 1.0:
            raise ValueError(f"pass_threshold must be in (0, 1), got {self.pass_threshold}")


@dataclass
class RewardHeadParams:
    """All trainable weights; gradients reuse this same shape."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray  # shape (1,)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "wq", self.wq
        yield "wk", self.wk
        yield "wv", self.wv
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2

    def copy(self) -> "RewardHeadParams":
        return RewardHeadParams(**{name: arr.copy() for name, arr in self.items()})

    @property
    def d(self) -> int:
        return self.wq.shape[0]


def zeros_like_params(params: RewardHeadParams) -> RewardHeadParams:
    return RewardHeadParams(**{name: np.zeros_like(arr) for name, arr in params.items()})


@dataclass
class TrainingPair:
    """Embeddings for one (original, human-passed, human-failed) triple."""

    original: np.ndarray
    good: np.ndarray
    bad: np.ndarray

    def __post_init__(self) -> None:
        widths = {seq.shape[1] for seq in (self.original, self.good, self.bad)}
        if len(widths) != 1:
            raise ValueError(f"pair members disagree on embedding width: {sorted(widths)}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None


def init_params(config: RewardHeadConfig) -> RewardHeadParams:
    """Xavier-uniform weights, zero biases, drawn from PCG32(config.seed).

    Matrices are filled row-major in the fixed order wq, wk, wv, w1, w2 so
    the layout is part of the determinism contract.
    """
    config.validate()
    rng = Pcg32(config.seed)
    d, h = config.d, config.hidden

    def xavier(rows: int, cols: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (rows + cols))
        return np.array(
            [[(2.0 * rng.random() - 1.0) * bound for _ in range(cols)] for _ in range(rows)],
            dtype=np.float64,
        )

    return RewardHeadParams(
        wq=xavier(d, d),
        wk=xavier(d, d),
        wv=xavier(d, d),
        w1=xavier(h, 2 * d),
        b1=np.zeros(h, dtype=np.float64),
        w2=xavier(1, h),
        b2=np.zeros(1, dtype=np.float64),
    )


# ------------------------------------------------------------- forward


def _as_sequence(x: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{what} must be a (T, d) matrix with T >= 1, got shape {arr.shape}")
    return arr


def _check_width(params: RewardHeadParams, *seqs: np.ndarray) -> None:
    for seq in seqs:
        if seq.shape[1] != params.d:
            raise ValueError(f"embedding width {seq.shape[1]} does not match params d={params.d}")


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    # log(1 + exp(x)) without overflow for large |x|.
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def attention_fuse(
    params: RewardHeadParams,
    ori: np.ndarray,
    gen: np.ndarray,
    fusion: str = "attention",
) -> tuple[np.ndarray, np.ndarray]:
    """Fuse original and generated token sequences into a 2d vector.

    Attention mode: generated tokens are queries over the original tokens;
    returns (concat(meanpool(gen), meanpool(context)), attention matrix).
    Concat mode: (concat(meanpool(gen), meanpool(ori)), empty matrix).
    """
    fused, attn, _ = _fuse_cached(params, ori, gen, fusion)
    return fused, attn


def _fuse_cached(params, ori, gen, fusion):
    if fusion not in FUSION_MODES:
        raise ValueError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
    ori = _as_sequence(ori, "original embedding")
    gen = _as_sequence(gen, "generated embedding")
    _check_width(params, ori, gen)
    if fusion == "concat":
        fused = np.concatenate([gen.mean(axis=0), ori.mean(axis=0)])
        return fused, np.zeros((0, 0)), {"fusion": "concat"}
    d = params.d
    q = gen @ params.wq.T
    k = ori @ params.wk.T
    v = ori @ params.wv.T
    attn = _softmax_rows((q @ k.T) / math.sqrt(d))
    ctx = attn @ v
    fused = np.concatenate([gen.mean(axis=0), ctx.mean(axis=0)])
    cache = {"fusion": "attention", "ori": ori, "gen": gen, "q": q, "k": k, "v": v, "attn": attn}
    return fused, attn, cache


def _forward_cached(params, ori, gen, fusion):
    fused, _, cache = _fuse_cached(params, ori, gen, fusion)
    pre = params.w1 @ fused + params.b1
    hid = np.maximum(pre, 0.0)
    r = float(params.w2[0] @ hid + params.b2[0])
    cache.update(fused=fused, pre=pre, hid=hid)
    return r, cache


def forward_score(
    params: RewardHeadParams, ori: np.ndarray, gen: np.ndarray, fusion: str = "attention"
) -> float:
    """Raw (pre-sigmoid) score of a generated image against its original."""
    r, _ = _forward_cached(params, ori, gen, fusion)
    return r


def score_pair(
    params: RewardHeadParams, ori: np.ndarray, gen: np.ndarray, fusion: str = "attention"
) -> float:
    """Sigmoid-squashed score in (0, 1)."""
    return _sigmoid(forward_score(params, ori, gen, fusion))


def predict_pass(
    params: RewardHeadParams,
    ori: np.ndarray,
    gen: np.ndarray,
    fusion: str = "attention",
    threshold: float = 0.5,
) -> bool:
    """True when score_pair >= threshold (the boundary counts as pass)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return score_pair(params, ori, gen, fusion) >= threshold


# -------------------------------------------------------------- losses


def rank_loss(scores: RewardScores) -> float:
    """Cross-entropy of softmax([r_good, r_bad]) against target (1, 0).

    Equals log(1 + exp(r_bad - r_good)), evaluated in stable form.
    """
    return _softplus(scores.r_bad - scores.r_good)


def class_loss(scores: RewardScores) -> float:
    """BCE(sigmoid(r_good), 1) + BCE(sigmoid(r_bad), 0), stable form."""
    return _softplus(-scores.r_good) + _softplus(scores.r_bad)


def pair_scores(
    params: RewardHeadParams, pair: TrainingPair, fusion: str = "attention"
) -> RewardScores:
    return RewardScores(
        r_good=forward_score(params, pair.original, pair.good, fusion),
        r_bad=forward_score(params, pair.original, pair.bad, fusion),
    )


def total_loss(
    batch: Sequence[TrainingPair],
    params: RewardHeadParams,
    fusion: str = "attention",
    loss_mode: str = "full",
) -> float:
    """Mean per-pair loss, accumulated in ascending batch order."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {loss_mode!r}")
    acc = 0.0
    for pair in batch:
        s = pair_scores(params, pair, fusion)
        acc += rank_loss(s) + (class_loss(s) if loss_mode == "full" else 0.0)
    return acc / len(batch)


# ------------------------------------------------------------- backward


def _backprop_single(params, cache, dr, grads) -> None:
    fused, pre, hid = cache["fused"], cache["pre"], cache["hid"]
    grads.w2 += dr * hid[None, :]
    grads.b2 += dr
    dpre = (dr * params.w2[0]) * (pre > 0)
    grads.w1 += np.outer(dpre, fused)
    grads.b1 += dpre
    dfused = params.w1.T @ dpre
    if cache["fusion"] == "concat":
        return
    d = params.d
    gen, ori = cache["gen"], cache["ori"]
    q, k, v, attn = cache["q"], cache["k"], cache["v"], cache["attn"]
    dctx = np.broadcast_to(dfused[d:] / gen.shape[0], (gen.shape[0], d))
    dattn = dctx @ v.T
    dv = attn.T @ dctx
    dscores = attn * (dattn - np.sum(dattn * attn, axis=1, keepdims=True))
    inv_sqrt_d = 1.0 / math.sqrt(d)
    dq = (dscores @ k) * inv_sqrt_d
    dk = (dscores.T @ q) * inv_sqrt_d
    grads.wq += dq.T @ gen
    grads.wk += dk.T @ ori
    grads.wv += dv.T @ ori


def backward(
    batch: Sequence[TrainingPair],
    params: RewardHeadParams,
    fusion: str = "attention",
    loss_mode: str = "full",
) -> RewardHeadParams:
    """Analytic gradient of total_loss with respect to every parameter."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {loss_mode!r}")
    grads = zeros_like_params(params)
    scale = 1.0 / len(batch)
    for pair in batch:
        r_good, cache_good = _forward_cached(params, pair.original, pair.good, fusion)
        r_bad, cache_bad = _forward_cached(params, pair.original, pair.bad, fusion)
        s = _sigmoid(r_bad - r_good)
        d_good = -s
        d_bad = s
        if loss_mode == "full":
            d_good += _sigmoid(r_good) - 1.0
            d_bad += _sigmoid(r_bad)
        _backprop_single(params, cache_good, d_good * scale, grads)
        _backprop_single(params, cache_bad, d_bad * scale, grads)
    return grads


# ------------------------------------------------------------- training


def train(
    pairs: Sequence[TrainingPair],
    val_pairs: Sequence[TrainingPair] | None,
    config: RewardHeadConfig,
) -> tuple[RewardHeadParams, list[EpochStats]]:
    """Adam-optimized training, bit-deterministic for a fixed seed.

    Shuffling uses PCG32(seed, stream 1) so it is independent of the
    init draws. Raises TrainingDivergedError on non-finite loss/gradients.
    """
    config.validate()
    if len(pairs) == 0:
        raise ValueError("empty training set")
    for pair in list(pairs) + list(val_pairs or []):
        if pair.original.shape[1] != config.d:
            raise ValueError(
                f"pair width {pair.original.shape[1]} does not match config d={config.d}"
            )

    params = init_params(config)
    m = zeros_like_params(params)
    v = zeros_like_params(params)
    step = 0
    shuffle_rng = Pcg32(config.seed, stream=1)
    order = list(range(len(pairs)))
    history: list[EpochStats] = []

    for epoch in range(config.epochs):
        shuffle_rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            grads = backward(batch, params, config.fusion, config.loss_mode)
            step += 1
            bias1 = 1.0 - ADAM_BETA1**step
            bias2 = 1.0 - ADAM_BETA2**step
            for (_, p_arr), (_, g_arr), (_, m_arr), (_, v_arr) in zip(
                params.items(), grads.items(), m.items(), v.items()
            ):
                if not np.all(np.isfinite(g_arr)):
                    raise TrainingDivergedError(
                        f"non-finite gradient at epoch {epoch}, step {step}"
                    )
                m_arr *= ADAM_BETA1
                m_arr += (1.0 - ADAM_BETA1) * g_arr
                v_arr *= ADAM_BETA2
                v_arr += (1.0 - ADAM_BETA2) * g_arr * g_arr
                p_arr -= config.learning_rate * (m_arr / bias1) / (
                    np.sqrt(v_arr / bias2) + ADAM_EPS
                )
        train_l = total_loss(pairs, params, config.fusion, config.loss_mode)
        val_l = (
            total_loss(val_pairs, params, config.fusion, config.loss_mode)
            if val_pairs
            else None
        )
        if not math.isfinite(train_l) or (val_l is not None and not math.isfinite(val_l)):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        history.append(EpochStats(epoch=epoch, train_loss=train_l, val_loss=val_l))
    return params, history


# -------------------------------------------------------- serialization


def save_params(bundle_dir: str | Path, params: RewardHeadParams, config: RewardHeadConfig) -> Path:
    """Write the params bundle: a JSON manifest plus one HFT1 file per tensor."""
    bundle = Path(bundle_dir)
    bundle.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in params.items():
        filename = f"{name}.hft1"
        save_tensor(bundle / filename, arr.astype(np.float32))
        tensors[name] = filename
    manifest = {"format": "hft1-bundle", "tensors": tensors, "config": asdict(config)}
    path = bundle / PARAMS_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_params(bundle_dir: str | Path) -> tuple[RewardHeadParams, RewardHeadConfig]:
    """Read a params bundle written by :func:`save_params`."""
    bundle = Path(bundle_dir)
    manifest_path = bundle / PARAMS_MANIFEST if bundle.is_dir() else bundle
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    config = RewardHeadConfig(**manifest["config"])
    config.validate()
    arrays = {}
    for name in ("wq", "wk", "wv", "w1", "b1", "w2", "b2"):
        filename = manifest["tensors"].get(name)
        if filename is None:
            raise ValueError(f"params bundle is missing tensor {name!r}")
        arrays[name] = load_tensor(manifest_path.parent / filename).astype(np.float64)
    params = RewardHeadParams(**arrays)
    expected = {
        "wq": (config.d, config.d),
        "wk": (config.d, config.d),
        "wv": (config.d, config.d),
        "w1": (config.hidden, 2 * config.d),
        "b1": (config.hidden,),
        "w2": (1, config.hidden),
        "b2": (1,),
    }
    for name, arr in params.items():
        if arr.shape != expected[name]:
            raise ValueError(
                f"tensor {name!r} has shape {arr.shape}, expected {expected[name]}"
            )
    return params, config
