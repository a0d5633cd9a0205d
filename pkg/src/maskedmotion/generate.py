"""Confidence-based parallel iterative decoding.

Generation starts from an all-MASK canvas. Each iteration the model
predicts every still-open position; sampled tokens are ranked by their
(renormalized) probability, the schedule says how many must stay masked
for the next round, and the lowest-confidence ones are remasked. Kept
tokens are permanent. The per-sample iteration budget scales with the
requested length: T_dyn = max(1, round(T * L / M)), so short sequences
(transitions especially) decode in very few passes, often one.

The decode loop deliberately reuses the model's resident weights and
per-request buffers; nothing model-sized is allocated per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .motiondata import MotionSequence
from .numerics import Rng, Tensor, no_grad
from .transformer import MaskedTransformer, TextEmbedding, TokenSequence


class GenerateError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    kind: str = "cosine"        # cosine | linear | square_root
    T: int = 10                  # base iteration count at full length
    M: int = 49                  # max token count

    def validate(self):
        if self.kind not in ("cosine", "linear", "square_root"):
            raise GenerateError(f"unknown schedule kind {self.kind!r}")
        if self.T < 1 or self.M < 1:
            raise GenerateError("need T >= 1 and M >= 1")


@dataclass
class SamplingStrategy:
    kind: str = "temperature"   # temperature | top_k | top_p
    beta: float = 1.0           # softmax temperature (all kinds)
    k_frac: float = 1.0         # top_k: fraction of the codebook kept
    p: float = 1.0              # top_p: nucleus mass threshold
    confidence_noise: float = 0.0  # optional Gumbel jitter on rankings

    def validate(self):
        if self.kind not in ("temperature", "top_k", "top_p"):
            raise GenerateError(f"unknown sampling kind {self.kind!r}")
        if self.beta <= 0:
            raise GenerateError("temperature beta must be > 0")
        if not (0.0 < self.k_frac <= 1.0):
            raise GenerateError("k_frac must be in (0, 1]")
        if not (0.0 < self.p <= 1.0):
            raise GenerateError("p must be in (0, 1]")


@dataclass
class DecodeState:
    tokens: np.ndarray
    fixed: np.ndarray
    confidences: np.ndarray
    t: int


def dynamic_iterations(T: int, L: int, M: int) -> int:
    if L > M:
        raise GenerateError(f"requested length {L} exceeds max tokens {M}")
    return max(1, round(T * L / M))


def n_masks(t: int, L: int, cfg: ScheduleConfig) -> int:
    """Tokens that must remain masked entering iteration t.

    ceil(gamma(t / T_dyn) * L) clamped to [0, L]. linear and
    square_root are evaluated in exact integer arithmetic; cosine is
    evaluated in floats with results snapped to an integer when within
    1e-9 (cos hits exact values like 1/2 at rational fractions of pi,
    and a one-ulp overshoot must not leak through the ceiling).
    """
    cfg.validate()
    if L < 1:
        raise GenerateError(f"L must be >= 1, got {L}")
    t_dyn = dynamic_iterations(cfg.T, L, cfg.M)
    if not (0 <= t <= t_dyn):
        raise GenerateError(f"iteration {t} outside [0, {t_dyn}]")
    if cfg.kind == "linear":
        n = -((-L * (t_dyn - t)) // t_dyn)
    elif cfg.kind == "square_root":
        n = -((-L * (t_dyn * t_dyn - t * t)) // (t_dyn * t_dyn))
    else:
        y = L * math.cos(0.5 * math.pi * t / t_dyn)
        nearest = round(y)
        n = nearest if abs(y - nearest) < 1e-9 else math.ceil(y)
    return max(0, min(L, n))


def renormalized_distribution(logits_row: np.ndarray, strategy: SamplingStrategy) -> np.ndarray:
    """Candidate-restricted, renormalized sampling distribution.

    All three kinds share one code path (temperature keeps every
    candidate), so top_k with k_frac=1.0 is bit-identical to
    temperature sampling at the same beta.
    """
    strategy.validate()
    row = np.asarray(logits_row, dtype=np.float64)
    if row.ndim != 1:
        raise GenerateError(f"logits row must be 1-d, got shape {row.shape}")
    finite = np.isfinite(row)
    if not finite.any():
        raise GenerateError("sampling row is entirely -inf")
    m = row[finite].max()
    probs = np.exp((row - m) / strategy.beta, where=finite, out=np.zeros_like(row))
    probs /= probs.sum()

    if strategy.kind == "top_k":
        k = math.ceil(strategy.k_frac * len(row))
        order = np.argsort(-probs, kind="stable")
        keep = order[:k]
    elif strategy.kind == "top_p":
        order = np.argsort(-probs, kind="stable")
        csum = np.cumsum(probs[order])
        cut = int(np.searchsorted(csum, strategy.p, side="right")) + 1
        keep = order[:min(cut, len(row))]
    else:
        keep = np.arange(len(row))

    mask = np.zeros(len(row), dtype=bool)
    mask[keep] = True
    out = np.where(mask, probs, 0.0)
    return out / out[mask].sum()


def sample_token(logits_row: np.ndarray, strategy: SamplingStrategy, rng: Rng):
    """Draw one token; confidence is its renormalized probability."""
    dist = renormalized_distribution(logits_row, strategy)
    u = rng.random()
    csum = np.cumsum(dist)
    token = int(np.searchsorted(csum, u * csum[-1], side="right"))
    token = min(token, len(dist) - 1)
    if dist[token] == 0.0:  # float edge: u landed on a zero-mass tail
        token = int(np.flatnonzero(dist > 0)[-1])
    return token, float(dist[token])


def parallel_decode(logits_fn, L: int, schedule: ScheduleConfig,
                    strategy: SamplingStrategy, rng: Rng,
                    layout: np.ndarray | None = None, mask_id: int | None = None,
                    vocab_limit: int | None = None, trace: list | None = None) -> np.ndarray:
    """Fill an L-token canvas; returns token ids with zero MASKs left.

    ``layout``: optional int array of length L; entries >= 0 are
    pre-fixed condition tokens (never resampled, never remasked),
    -1 marks positions to generate. The schedule runs over the free
    positions only. ``logits_fn`` maps a canvas id array (L,) to a
    (L, vocab) score matrix; ``vocab_limit`` restricts sampling to the
    motion-code prefix of the vocabulary.
    """
    schedule.validate()
    strategy.validate()
    if mask_id is None:
        raise GenerateError("mask_id is required")
    if layout is not None:
        layout = np.asarray(layout, dtype=np.int64)
        if len(layout) > L:
            raise GenerateError(f"layout of {len(layout)} entries exceeds L={L}")
        if len(layout) < L:
            padded = np.full(L, -1, dtype=np.int64)
            padded[: len(layout)] = layout
            layout = padded
    else:
        layout = np.full(L, -1, dtype=np.int64)

    fixed = layout >= 0
    tokens = np.where(fixed, layout, mask_id).astype(np.int64)
    free = np.flatnonzero(~fixed)
    l_free = len(free)
    if l_free == 0:
        return tokens
    t_dyn = dynamic_iterations(schedule.T, l_free, schedule.M)
    confidences = np.zeros(L, dtype=np.float64)
    confidences[fixed] = np.inf

    for t in range(t_dyn):
        open_pos = np.flatnonzero(tokens == mask_id)
        scores = logits_fn(tokens)
        proposals = np.empty(len(open_pos), dtype=np.int64)
        confs = np.empty(len(open_pos), dtype=np.float64)
        for j, pos in enumerate(open_pos):
            row = scores[pos] if vocab_limit is None else scores[pos, :vocab_limit]
            proposals[j], confs[j] = sample_token(row, strategy, rng)
        if strategy.confidence_noise > 0:
            gumbel = -np.log(-np.log(np.maximum(
                np.asarray([rng.random() for _ in range(len(open_pos))]), 1e-12)))
            rank_key = np.log(np.maximum(confs, 1e-300)) + strategy.confidence_noise * gumbel
        else:
            rank_key = confs
        n_next = n_masks(t + 1, l_free, schedule)
        # lowest-confidence proposals go back to MASK; ties resolve to
        # the earliest positions for determinism
        order = np.lexsort((open_pos, rank_key))
        remask = set(open_pos[order[:n_next]].tolist())
        for j, pos in enumerate(open_pos):
            if pos in remask:
                tokens[pos] = mask_id
            else:
                tokens[pos] = proposals[j]
                fixed[pos] = True
                confidences[pos] = confs[j]
        if trace is not None:
            trace.append(DecodeState(tokens.copy(), fixed.copy(),
                                     confidences.copy(), t))
    if (tokens == mask_id).any():
        raise GenerateError("decode finished with MASK tokens left")
    return tokens


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class GenerationPipeline:
    tokenizer: object
    transformer: MaskedTransformer
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    strategy: SamplingStrategy = field(default_factory=SamplingStrategy)

    def canvas_logits_fn(self, text: TextEmbedding):
        """Closure mapping a motion-token canvas to per-position logits.

        The full input sequence is [sentence] + canvas + END; logits are
        returned for the canvas slots only.
        """
        model = self.transformer
        sent = Tensor(text.sentence[None])
        words = Tensor(text.words[None])
        wmask = np.ones((1, text.n_words), dtype=bool)

        def logits_fn(canvas: np.ndarray) -> np.ndarray:
            ids = np.concatenate([canvas, [model.end_id]])[None]
            with no_grad():
                out = model.forward_tokens(ids, sent, words, wmask)
            return out.data[0, : len(canvas)]

        return logits_fn

    def decode_tokens(self, text: TextEmbedding, L: int, rng: Rng,
                      layout: np.ndarray | None = None, trace: list | None = None) -> np.ndarray:
        model = self.transformer
        if L < 1 or L > model.cfg.max_tokens:
            raise GenerateError(
                f"token length {L} outside [1, {model.cfg.max_tokens}]"
            )
        return parallel_decode(
            self.canvas_logits_fn(text), L, self.schedule, self.strategy, rng,
            layout=layout, mask_id=model.mask_id, vocab_limit=model.K, trace=trace,
        )

    def text_to_motion(self, prompt: str, seed: int, L: int | None = None) -> MotionSequence:
        """prompt -> embed -> (predict length) -> decode -> detokenize."""
        text = self.transformer.embed_text(prompt)
        if L is None:
            L = self.transformer.predict_length(text)
        tokens = self.decode_tokens(text, L, Rng(seed))
        return self.tokenizer.detokenize(tokens)


def load_pipeline(vq_path, tf_path, schedule: ScheduleConfig | None = None,
                  strategy: SamplingStrategy | None = None) -> GenerationPipeline:
    from .tokenizer import MotionTokenizer
    tok = MotionTokenizer.load(vq_path)
    model = MaskedTransformer.load(tf_path)
    return GenerationPipeline(tok, model,
                              schedule or ScheduleConfig(M=model.cfg.max_tokens),
                              strategy or SamplingStrategy())
