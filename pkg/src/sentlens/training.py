"""Lens training on relatedness lists.

Two training modules share a siamese encoding of sentence pairs: a
classifier (two-layer softmax head over concatenated pair features) and a
ranker (bidirectional max-of-hinges over in-batch cosine scores, summed
over the batch). Base embeddings stay frozen; only lens (and head)
parameters receive Adam updates under an inverse-square-root warmup
schedule whose peak is set by the output dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as tl
from .corpus import EmbeddingCorpus, RelatednessList, index_corpora
from .encoders import (
    LensParameters,
    MeanPoolLens,
    batch_encode,
    encode,
    init_gatedconv_lens,
    init_simple_lens,
)
from .retrieval import cosine_matrix, match_error
from .tensor import ConfigError, DimensionError, NonFiniteError, Tape, Tensor, backward

__all__ = [
    "SEARCH_SPACE",
    "TrainConfig",
    "ClassifierHead",
    "OptimizerState",
    "init_classifier_head",
    "classifier_features",
    "classifier_logits",
    "classifier_loss",
    "ranker_loss",
    "lr_schedule",
    "adam_step",
    "train",
    "evaluate",
    "random_search",
]

# hyperparameter grid sampled by random_search
SEARCH_SPACE = {
    "batch_size": (128, 256, 512),
    "warmup_steps": (1000, 2000, 4000, 8000, 16000),
    "embed_dropout": (0.0, 0.1, 0.2),
    "gate_channels": (128, 256, 512),
    "hidden_size": (256, 512, 1024),
    "margin": (0.1, 0.2, 0.3),
}


@dataclass
class TrainConfig:
    module: str = "ranker"  # "ranker" | "classifier"
    encoder: str = "simple"  # "meanpool" | "simple" | "gatedconv"
    output_dim: int = 128
    batch_size: int = 128
    warmup_steps: int = 1000
    embed_dropout: float = 0.0
    gate_channels: int = 128
    hidden_size: int = 256
    margin: float = 0.2
    conv_depth: int = 2
    conv_width: int = 3
    max_steps: int = 2000
    eval_every: int = 500
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.module not in ("ranker", "classifier"):
            raise ConfigError(f"unknown training module {self.module!r}")
        if self.encoder not in ("meanpool", "simple", "gatedconv"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if not 0.0 <= self.embed_dropout < 1.0:
            raise ConfigError("embed_dropout must lie in [0, 1)")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")


@dataclass
class ClassifierHead:
    """Two-layer relu network with softmax output over pair features."""

    w1: Tensor  # (hidden, 4 * D)
    b1: Tensor
    w2: Tensor  # (C, hidden)
    b2: Tensor

    def __post_init__(self):
        if self.w1.data.shape[1] % 4 != 0:
            raise DimensionError("classifier head input width must be exactly 4 * D")

    @property
    def num_classes(self) -> int:
        return self.w2.data.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_classifier_head(rng: np.random.Generator, lens_dim: int, hidden: int,
                         num_classes: int, dtype=np.float32) -> ClassifierHead:
    w1 = Tensor(np.sqrt(2.0 / (4 * lens_dim))
                * rng.standard_normal((hidden, 4 * lens_dim)), dtype=dtype)
    b1 = Tensor(np.zeros(hidden), dtype=dtype)
    w2 = Tensor(np.sqrt(2.0 / hidden)
                * rng.standard_normal((num_classes, hidden)), dtype=dtype)
    b2 = Tensor(np.zeros(num_classes), dtype=dtype)
    return ClassifierHead(w1, b1, w2, b2)


def classifier_features(u: Tensor, v: Tensor, tape: Tape | None = None) -> Tensor:
    """Pair features: concat(u, v, u * v, |u - v|), in that order."""
    if u.data.shape != v.data.shape or u.data.ndim != 1:
        raise DimensionError(
            f"pair features need equal 1-D vectors, got {u.data.shape} / {v.data.shape}")
    return tl.concat_vec(
        [u, v, tl.elementwise("mul", u, v, tape),
         tl.absolute(tl.subtract(u, v, tape), tape)], tape)


def classifier_logits(u: Tensor, v: Tensor, head: ClassifierHead,
                      tape: Tape | None = None) -> Tensor:
    feats = classifier_features(u, v, tape)
    hidden = tl.activation("relu", tl.linear(head.w1, head.b1, feats, tape), tape)
    return tl.linear(head.w2, head.b2, hidden, tape)


def classifier_loss(batch: Sequence[tuple], lens: LensParameters, head: ClassifierHead,
                    tape: Tape | None = None) -> Tensor:
    """Mean softmax cross-entropy over (E_a, E_b, label) items.

    Both sides go through the same lens (shared weights).
    """
    logits, labels = [], []
    for e_a, e_b, label in batch:
        u = encode(e_a, lens, tape)
        v = encode(e_b, lens, tape)
        logits.append(classifier_logits(u, v, head, tape))
        labels.append(label)
    return tl.softmax_cross_entropy(tl.stack_rows(logits, tape), labels, tape)


def ranker_loss(scores, alpha: float, tape: Tape | None = None):
    """Bidirectional max-of-hinges over a square score matrix, summed.

    Accepts a plain array (returns a float) or a taped Tensor.
    """
    if isinstance(scores, Tensor):
        return tl.max_hinge_bidirectional(scores, alpha, tape)
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError("score matrix must be square")
    if arr.shape[0] < 2:
        raise DimensionError("need at least 2 pairs for in-batch negatives")
    return float(tl._max_hinge_fwd(arr, alpha)[0])


def lr_schedule(step: int, warmup: int, dim: int) -> float:
    """Inverse-square-root schedule with linear warmup, peaked at ``warmup``.

    lr = dim^-0.5 * min(step^-0.5, step * warmup^-1.5); the output dimension
    sets the scale.
    """
    if warmup < 1:
        raise ConfigError("warmup must be >= 1")
    if step < 1:
        raise ConfigError("step starts at 1")
    return dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: dict, state: OptimizerState,
              lr: float) -> None:
    """One bias-corrected Adam update; parameters without gradients keep."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient for parameter {i} with shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _make_lens(cfg: TrainConfig, input_dim: int, rng: np.random.Generator) -> LensParameters:
    if cfg.encoder == "meanpool":
        return MeanPoolLens(input_dim)
    if cfg.encoder == "simple":
        return init_simple_lens(rng, cfg.output_dim, input_dim)
    return init_gatedconv_lens(rng, cfg.output_dim, input_dim,
                               channels=cfg.gate_channels, depth=cfg.conv_depth,
                               width=cfg.conv_width)


def _dropout(matrix: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        return matrix
    keep = (rng.random(matrix.shape) >= rate).astype(matrix.dtype)
    return matrix * keep / (1.0 - rate)


def evaluate(lens: LensParameters, pairs: RelatednessList, index: dict,
             head: ClassifierHead | None = None) -> float:
    """Validation metric: ranker -> mean bidirectional match error (lower is
    better); classifier -> accuracy (higher is better)."""
    if pairs.mode == "rank":
        A = np.stack([encode(index[a].matrix, lens).data for a, _, _ in pairs.entries])
        B = np.stack([encode(index[b].matrix, lens).data for _, b, _ in pairs.entries])
        gold = np.arange(len(pairs.entries))
        forward = match_error(cosine_matrix(A, B), gold)
        backward_err = match_error(cosine_matrix(B, A), gold)
        return (forward + backward_err) / 2.0
    if head is None:
        raise ConfigError("classifier evaluation needs the trained head")
    correct = 0
    for a, b, label in pairs.entries:
        u = encode(index[a].matrix, lens)
        v = encode(index[b].matrix, lens)
        pred = int(np.argmax(classifier_logits(u, v, head).data))
        correct += pred == label
    return correct / len(pairs.entries)


def _metric_key(metric: float, module: str) -> float:
    # normalize to "lower is better" for checkpoint selection
    return metric if module == "ranker" else -metric


def train(corpora, pairs: RelatednessList, cfg: TrainConfig,
          validation: RelatednessList):
    """Learn lens parameters; returns (lens, history).

    The base embedding corpora are never modified. The returned lens holds
    the parameters of the best validation checkpoint (never simply the
    last). History rows carry step, lr, mean loss since the previous row
    and the validation metric. Deterministic given cfg.seed.
    """
    corpora = list(corpora.values()) if isinstance(corpora, dict) else list(corpora)
    index = index_corpora(corpora)
    pairs.check_bound(index)
    validation.check_bound(index)
    expected_mode = "rank" if cfg.module == "ranker" else "classify"
    if pairs.mode != expected_mode or validation.mode != expected_mode:
        raise ConfigError(
            f"{cfg.module} training needs {expected_mode!r} lists, got "
            f"{pairs.mode!r}/{validation.mode!r}")
    if pairs.referenced_ids() & validation.referenced_ids():
        raise ConfigError("validation ids overlap training ids")
    if not pairs.entries:
        raise ConfigError("empty training list")
    dims = {c.dim for c in corpora}
    if len(dims) != 1:
        raise DimensionError(f"corpora disagree on K: {sorted(dims)}")
    input_dim = dims.pop()

    rng = np.random.default_rng(cfg.seed)
    lens = _make_lens(cfg, input_dim, rng)
    head = None
    if cfg.module == "classifier":
        head = init_classifier_head(rng, lens.output_dim, cfg.hidden_size,
                                    pairs.num_classes)

    if cfg.encoder == "meanpool":
        metric = evaluate(lens, validation, index, head)
        return lens, [{"step": 0, "lr": 0.0, "loss": math.nan, "val_metric": metric}]

    params = lens.parameters() + (head.parameters() if head else [])
    state = OptimizerState.for_params(params)
    history: list[dict] = []

    best_key = math.inf
    best_snapshot = [p.data.copy() for p in lens.parameters()]
    best_metric = math.nan
    evals_since_best = 0
    loss_acc: list[float] = []

    def run_eval(step: int, lr: float) -> bool:
        nonlocal best_key, best_snapshot, best_metric, evals_since_best
        metric = evaluate(lens, validation, index, head)
        mean_loss = float(np.mean(loss_acc)) if loss_acc else math.nan
        loss_acc.clear()
        history.append({"step": step, "lr": lr, "loss": mean_loss, "val_metric": metric})
        key = _metric_key(metric, cfg.module)
        if key < best_key:
            best_key = key
            best_metric = metric
            best_snapshot = [p.data.copy() for p in lens.parameters()]
            evals_since_best = 0
        else:
            evals_since_best += 1
        return evals_since_best >= cfg.patience

    order = np.arange(len(pairs.entries))
    step = 0
    lr = 0.0
    stop = False
    while not stop and step < cfg.max_steps:
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            if cfg.module == "ranker" and len(chunk) < 2:
                continue  # a single leftover pair has no in-batch negative
            step += 1
            lr = lr_schedule(step, cfg.warmup_steps, lens.output_dim)
            tape = Tape()

            if cfg.module == "ranker":
                us, vs = [], []
                for idx in chunk:
                    a, b, _ = pairs.entries[idx]
                    e_a = _dropout(index[a].matrix, cfg.embed_dropout, rng)
                    e_b = _dropout(index[b].matrix, cfg.embed_dropout, rng)
                    us.append(encode(e_a, lens, tape))
                    vs.append(encode(e_b, lens, tape))
                scores = tl.matmul_nt(tl.rownorm(tl.stack_rows(us, tape), tape),
                                      tl.rownorm(tl.stack_rows(vs, tape), tape), tape)
                loss = ranker_loss(scores, cfg.margin, tape)
            else:
                batch = []
                for idx in chunk:
                    a, b, label = pairs.entries[idx]
                    batch.append((_dropout(index[a].matrix, cfg.embed_dropout, rng),
                                  _dropout(index[b].matrix, cfg.embed_dropout, rng),
                                  label))
                loss = classifier_loss(batch, lens, head, tape)

            loss_acc.append(float(loss.data))
            grads = backward(tape, np.asarray(1.0, dtype=loss.dtype))
            adam_step(params, grads, state, lr)

            if step % cfg.eval_every == 0:
                stop = run_eval(step, lr)
            if stop or step >= cfg.max_steps:
                break

    if not history or history[-1]["step"] != step:
        run_eval(step, lr)

    for p, data in zip(lens.parameters(), best_snapshot):
        p.data = data
    history.append({"step": step, "lr": lr, "loss": math.nan, "val_metric": best_metric})
    return lens, history


def random_search(corpora, pairs: RelatednessList, base_cfg: TrainConfig,
                  validation: RelatednessList, trials: int = 8,
                  space: dict | None = None, budget: int | None = None,
                  seed: int = 0):
    """Uniform random search over the hyperparameter grid.

    Each trial trains with a config drawn from ``space`` (default
    SEARCH_SPACE) on top of ``base_cfg``; ``budget`` optionally caps
    max_steps per trial. Returns (best_cfg, leaderboard) where leaderboard
    rows are (config, validation metric) ranked best first. Deterministic
    given ``seed``.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    space = dict(SEARCH_SPACE) if space is None else space
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(trials):
        draws = {name: values[rng.integers(len(values))]
                 for name, values in space.items()}
        cfg = replace(base_cfg, seed=base_cfg.seed + trial, **draws)
        if budget is not None:
            cfg = replace(cfg, max_steps=budget)
        _, history = train(corpora, pairs, cfg, validation)
        results.append((cfg, history[-1]["val_metric"]))
    results.sort(key=lambda item: _metric_key(item[1], base_cfg.module))
    return results[0][0], results
