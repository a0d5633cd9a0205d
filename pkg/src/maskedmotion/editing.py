"""Token-level motion editing.

Everything here is mask placement over a trained pipeline: temporal
editing conditions on the tokens outside the edit ranges, long-sequence
stitching decodes short transitions between independently generated
segments (short enough that the dynamic iteration budget is one pass),
and upper-body editing regenerates the upper token stream against
(partially masked) lower-body condition tokens. Condition tokens are
never resampled; they appear verbatim in every output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .motiondata import (
    DataConfig,
    MotionSequence,
    body_join,
    body_part_dims,
    body_split,
    Dataset,
)
from .numerics import Adam, Rng, Tensor, backward, cross_entropy, embedding, no_grad, reshape
from .generate import (
    GenerateError,
    GenerationPipeline,
    ScheduleConfig,
    SamplingStrategy,
    parallel_decode,
)
from .tokenizer import MotionTokenizer, TokenizerConfig, TokenizerTrainConfig, train_tokenizer
from .transformer import (
    MaskedTransformer,
    TextEmbedding,
    TransformerConfig,
    TransformerTrainConfig,
    TrainingDiverged,
    pretokenize,
)

UPPER_CHECKPOINT_MAGIC = "MMMUP1"


class EditingError(ValueError):
    pass


@dataclass
class MaskLayout:
    """length positions; conditions maps position -> fixed token id."""

    length: int
    conditions: dict[int, int] = field(default_factory=dict)

    def validate(self, K: int):
        if self.length < 1:
            raise EditingError("layout needs length >= 1")
        for pos, token in self.conditions.items():
            if not (0 <= pos < self.length):
                raise EditingError(f"condition position {pos} outside layout")
            if not (0 <= token < K):
                raise EditingError(f"condition token {token} outside codebook")
        if len(self.conditions) >= self.length:
            raise EditingError("layout has no GENERATE positions")

    def as_array(self) -> np.ndarray:
        arr = np.full(self.length, -1, dtype=np.int64)
        for pos, token in self.conditions.items():
            arr[pos] = token
        return arr

    def to_json(self) -> str:
        return json.dumps(
            {"length": self.length,
             "conditions": [{"pos": int(p), "token": int(t)}
                            for p, t in sorted(self.conditions.items())]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "MaskLayout":
        doc = json.loads(text)
        return cls(doc["length"],
                   {int(c["pos"]): int(c["token"]) for c in doc["conditions"]})


@dataclass
class BodyEditConfig:
    lower_keep_fraction: float = 1.0

    def validate(self):
        if not (0.0 <= self.lower_keep_fraction <= 1.0):
            raise EditingError("lower_keep_fraction must be in [0, 1]")


# ---------------------------------------------------------------------------
# temporal editing (in-betweening, outpainting, completion)


@dataclass
class TemporalEditResult:
    motion: MotionSequence
    tokens: np.ndarray
    input_tokens: np.ndarray
    condition_mask: np.ndarray  # True where the token was a condition
    iterations: int


def snap_ranges_to_tokens(ranges, frames: int, f: int):
    """Frame ranges [start, end) -> token spans, snapped outward."""
    n_tokens = math.ceil(frames / f)
    spans = []
    for start, end in ranges:
        if not (0 <= start < end <= frames):
            raise EditingError(f"frame range [{start}, {end}) outside motion of {frames}")
        spans.append((start // f, min(n_tokens, math.ceil(end / f))))
    return spans


def edit_temporal(motion: MotionSequence, ranges, pipeline: GenerationPipeline,
                  seed: int, prompt: str | None = None) -> TemporalEditResult:
    """Regenerate the given frame ranges, conditioned on the tokens
    outside them (and optionally on text). With no ranges this is the
    tokenize-detokenize identity."""
    tok = pipeline.tokenizer
    model = pipeline.transformer
    f = tok.cfg.downsample
    input_tokens = tok.tokenize(motion)
    L = len(input_tokens)
    if L > model.cfg.max_tokens:
        raise EditingError(
            f"motion tokenizes to {L} tokens, exceeding the model max "
            f"{model.cfg.max_tokens}"
        )
    spans = snap_ranges_to_tokens(ranges, motion.frames, f)
    generate = np.zeros(L, dtype=bool)
    for a, b in spans:
        generate[a:b] = True
    if not generate.any():
        return TemporalEditResult(
            tok.detokenize(input_tokens, motion.frames), input_tokens.copy(),
            input_tokens, ~generate, 0,
        )
    if generate.all() and prompt is None:
        raise EditingError(
            "edit covers every token and no prompt was given: nothing to condition on"
        )
    layout = np.where(generate, -1, input_tokens)
    text = model.embed_text(prompt) if prompt else model.null_text_embedding()
    trace: list = []
    tokens = pipeline.decode_tokens(text, L, Rng(seed), layout=layout, trace=trace)
    return TemporalEditResult(
        tok.detokenize(tokens, motion.frames), tokens, input_tokens,
        ~generate, len(trace),
    )


# ---------------------------------------------------------------------------
# long-sequence generation via transitions


@dataclass
class LongSequenceResult:
    motion: MotionSequence
    tokens: np.ndarray
    segment_spans: list          # (start, end) token spans per prompt
    transition_spans: list
    transition_iterations: list


def long_sequence(prompts, transition_tokens: int, pipeline: GenerationPipeline,
                  seed: int, context: int = 6, lengths=None) -> LongSequenceResult:
    """Chain prompt segments with generated transitions.

    Each transition canvas is [tail of prev | MASK x n | head of next],
    decoded with the null text embedding; its iteration budget comes
    from the transition length alone, so short transitions finish in a
    single pass."""
    if not prompts:
        raise EditingError("prompt list is empty")
    if len(prompts) < 2:
        raise EditingError("long_sequence needs at least two prompts")
    if transition_tokens < 1:
        raise EditingError("transition_tokens must be >= 1")
    model = pipeline.transformer
    rng = Rng(seed)
    segments = []
    for i, prompt in enumerate(prompts):
        text = model.embed_text(prompt)
        L = lengths[i] if lengths else model.predict_length(text)
        segments.append(pipeline.decode_tokens(text, L, rng.child(i)))

    null_text = model.null_text_embedding()
    transitions = []
    iter_counts = []
    for i in range(len(segments) - 1):
        tail = segments[i][-min(context, len(segments[i])):]
        head = segments[i + 1][: min(context, len(segments[i + 1]))]
        canvas_len = len(tail) + transition_tokens + len(head)
        if canvas_len > model.cfg.max_tokens:
            raise EditingError(
                f"transition canvas of {canvas_len} tokens exceeds model max; "
                "reduce context or transition_tokens"
            )
        layout = np.concatenate(
            [tail, np.full(transition_tokens, -1, dtype=np.int64), head])
        trace: list = []
        decoded = pipeline.decode_tokens(
            null_text, canvas_len, rng.child(1000 + i), layout=layout, trace=trace)
        new = decoded[len(tail): len(tail) + transition_tokens]
        if not np.array_equal(decoded[: len(tail)], tail) or not np.array_equal(
                decoded[len(tail) + transition_tokens:], head):
            raise EditingError("transition decode modified its condition tokens")
        transitions.append(new)
        iter_counts.append(len(trace))

    pieces = []
    segment_spans = []
    transition_spans = []
    cursor = 0
    for i, seg in enumerate(segments):
        pieces.append(seg)
        segment_spans.append((cursor, cursor + len(seg)))
        cursor += len(seg)
        if i < len(transitions):
            pieces.append(transitions[i])
            transition_spans.append((cursor, cursor + len(transitions[i])))
            cursor += len(transitions[i])
    tokens = np.concatenate(pieces)
    motion = pipeline.tokenizer.detokenize(tokens)
    return LongSequenceResult(motion, tokens, segment_spans, transition_spans,
                              iter_counts)


# ---------------------------------------------------------------------------
# upper-body editing


class UpperBodyTransformer(MaskedTransformer):
    """Masked transformer over the upper-body token stream, conditioned
    per position on the (possibly masked) lower-body token at the same
    slot: embeddings are the concatenation of two half-width tables.
    Only the upper head is trained; the lower head exists but receives
    no loss."""

    def __init__(self, cfg: TransformerConfig, K_up: int, K_low: int, rng: Rng,
                 vocab_words=None):
        if cfg.d_model % 2:
            raise EditingError("upper-body editing needs an even d_model")
        super().__init__(cfg, K_up, rng, vocab_words)
        self.K_low = K_low
        self.low_mask_id = K_low
        self.low_pad_id = K_low + 1
        self.low_end_id = K_low + 2
        d = cfg.d_model
        half = d // 2
        del self.params["tok.table"]
        self._p("up.table", rng.normal((K_up + 3, half), std=0.02))
        self._p("low.table", rng.normal((K_low + 3, half), std=0.02))
        self._p("low_head.w", rng.normal((d, K_low + 3), std=0.02))
        self._p("low_head.b", np.zeros(K_low + 3, dtype=np.float32))

    def _embed_tokens(self, ids: np.ndarray):
        if ids.ndim != 3 or ids.shape[2] != 2:
            raise EditingError(
                f"dual-stream ids must be (B, S, 2), got {ids.shape}"
            )
        up, low = ids[:, :, 0], ids[:, :, 1]
        from .numerics import concat
        emb = concat([embedding(self.params["up.table"], up),
                      embedding(self.params["low.table"], low)], axis=2)
        return emb, up == self.pad_id

    def forward_dual(self, ids: np.ndarray, sentence, words, word_mask=None,
                     train_rng=None):
        """(B, S, 2) ids -> (upper logits, lower logits)."""
        from .numerics import add as t_add, matmul as t_matmul
        x = self._trunk(ids, sentence, words, word_mask, train_rng)
        up = t_add(t_matmul(x, self.params["head.w"]), self.params["head.b"])
        low = t_add(t_matmul(x, self.params["low_head.w"]), self.params["low_head.b"])
        return up, low

    def save(self, path):
        config = {"cfg": asdict(self.cfg), "K": self.K, "K_low": self.K_low,
                  "words": self.words}
        ckpt.save_checkpoint(path, UPPER_CHECKPOINT_MAGIC, config,
                             {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "UpperBodyTransformer":
        config, arrays = ckpt.load_checkpoint(path, UPPER_CHECKPOINT_MAGIC)
        model = cls(TransformerConfig(**config["cfg"]), config["K"],
                    config["K_low"], Rng(0), vocab_words=config["words"])
        for name, t in model.params.items():
            t.data = arrays[name].astype(np.float32)
        return model


@dataclass
class UpperBodyBundle:
    tokenizer_up: MotionTokenizer
    tokenizer_low: MotionTokenizer
    model: UpperBodyTransformer
    upper_idx: np.ndarray
    lower_idx: np.ndarray

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.tokenizer_up.save(out / "upper-vq.bin")
        self.tokenizer_low.save(out / "lower-vq.bin")
        self.model.save(out / "upper-tf.bin")
        (out / "body.json").write_text(json.dumps(
            {"upper_idx": self.upper_idx.tolist(),
             "lower_idx": self.lower_idx.tolist()}))

    @classmethod
    def load(cls, in_dir) -> "UpperBodyBundle":
        root = Path(in_dir)
        if not (root / "upper-tf.bin").exists():
            raise EditingError(f"no upper-body checkpoint bundle in {in_dir}")
        body = json.loads((root / "body.json").read_text())
        return cls(
            MotionTokenizer.load(root / "upper-vq.bin"),
            MotionTokenizer.load(root / "lower-vq.bin"),
            UpperBodyTransformer.load(root / "upper-tf.bin"),
            np.asarray(body["upper_idx"]),
            np.asarray(body["lower_idx"]),
        )


def split_dataset(dataset: Dataset):
    """Project a corpus onto its upper/lower body-part dim sets."""
    upper_idx, lower_idx = body_part_dims(dataset.cfg)

    def project(idx):
        items = [
            (MotionSequence(m.frames, len(idx), m.fps, m.values[:, idx]), p)
            for m, p in dataset.items
        ]
        return Dataset(items, dataset.mean[idx], dataset.std[idx],
                       dataset.split_indices, dataset.cfg, dataset.seed)

    return project(upper_idx), project(lower_idx), upper_idx, lower_idx


@dataclass
class UpperTrainConfig:
    rho: float = 0.1  # light corruption rate for lower condition tokens
    vq_train: TokenizerTrainConfig = field(default_factory=TokenizerTrainConfig)
    tf_train: TransformerTrainConfig = field(default_factory=TransformerTrainConfig)


def train_upper(dataset: Dataset, vq_cfg: TokenizerConfig,
                tf_cfg: TransformerConfig, seed: int,
                train_cfg: UpperTrainConfig | None = None,
                progress=None) -> tuple[UpperBodyBundle, list]:
    """Pretrain half-width upper/lower tokenizers, then the upper-edit
    transformer: upper tokens masked with r ~ U(alpha, 1), lower tokens
    independently masked with probability rho, loss on upper targets
    only."""
    tc = train_cfg or UpperTrainConfig()
    ds_up, ds_low, upper_idx, lower_idx = split_dataset(dataset)
    tok_up, _ = train_tokenizer(ds_up, vq_cfg, seed, tc.vq_train)
    tok_low, _ = train_tokenizer(ds_low, vq_cfg, seed + 1, tc.vq_train)

    rng = Rng(seed + 2)
    model = UpperBodyTransformer(tf_cfg, vq_cfg.K, vq_cfg.K, rng)
    up_entries = pretokenize(ds_up, tok_up, ds_up.subset("train"))
    low_entries = pretokenize(ds_low, tok_low, ds_low.subset("train"))
    for e_up, e_low in zip(up_entries, low_entries):
        e_up["wids"] = model.word_ids(e_up["text"])
        e_up["low_tokens"] = e_low["tokens"]
    opt = Adam(model.params, lr=tc.tf_train.lr)
    metrics = []

    for step in range(1, tc.tf_train.steps + 1):
        picks = [up_entries[rng.integers(0, len(up_entries))]
                 for _ in range(tc.tf_train.batch_size)]
        ids, wids, wmask, n_words, sel, targets = _assemble_dual_batch(
            model, picks, rng, tf_cfg.alpha, tc.rho)
        sent, words = model._encode_words(wids, n_words)
        up_logits, _ = model.forward_dual(ids, sent, words, wmask)
        flat = reshape(up_logits, (-1, model.vocab_size))
        loss = cross_entropy(embedding(flat, sel), targets)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite upper-edit loss at step {step}")
        opt.zero_grad()
        backward(loss)
        opt.step()
        if step % tc.tf_train.eval_every == 0 or step == tc.tf_train.steps:
            acc = _dual_masked_accuracy(model, up_entries, Rng(seed + 7919),
                                        tc.rho, tc.tf_train.eval_sequences)
            metrics.append({"step": step, "loss": float(loss.data),
                            "upper_masked_acc": acc})
            if progress:
                progress(metrics[-1])
    bundle = UpperBodyBundle(tok_up, tok_low, model, upper_idx, lower_idx)
    return bundle, metrics


def _assemble_dual_batch(model: UpperBodyTransformer, entries, rng: Rng,
                         alpha: float, rho: float):
    B = len(entries)
    max_words = max(len(e["wids"]) for e in entries)
    S = max(len(e["tokens"]) for e in entries) + 1
    ids = np.empty((B, S, 2), dtype=np.int64)
    ids[:, :, 0] = model.pad_id
    ids[:, :, 1] = model.low_pad_id
    wids = np.zeros((B, max_words), dtype=np.int64)
    wmask = np.zeros((B, max_words), dtype=bool)
    n_words = np.zeros(B, dtype=np.int64)
    rows, cols, targets = [], [], []
    for b, e in enumerate(entries):
        up, low = e["tokens"], e["low_tokens"]
        L = len(up)
        r = alpha + (1.0 - alpha) * rng.random()
        n = math.ceil(r * L)
        positions = np.sort(rng.choice(L, n, replace=False)) if n else \
            np.empty(0, dtype=np.int64)
        up_ids = np.concatenate([up, [model.end_id]])
        up_ids[positions] = model.mask_id
        low_ids = np.concatenate([low, [model.low_end_id]])
        if rho > 0:
            drop = rng.uniform(0.0, 1.0, L) < rho
            low_ids[:L][drop] = model.low_mask_id
        ids[b, : L + 1, 0] = up_ids
        ids[b, : L + 1, 1] = low_ids
        rows.extend([b] * (len(positions) + 1))
        cols.extend(positions.tolist() + [L])
        targets.extend(up[positions].tolist() + [model.end_id])
        wids[b, : len(e["wids"])] = e["wids"]
        wmask[b, : len(e["wids"])] = True
        n_words[b] = len(e["wids"])
    sel = np.asarray(rows) * S + np.asarray(cols)
    return ids, wids, wmask, n_words, sel, np.asarray(targets, dtype=np.int64)


def _dual_masked_accuracy(model, entries, rng, rho, max_sequences=64,
                          batch_size=32) -> float:
    subset = entries[:max_sequences]
    hits = total = 0
    for lo in range(0, len(subset), batch_size):
        chunk = subset[lo: lo + batch_size]
        ids, wids, wmask, n_words, sel, targets = _assemble_dual_batch(
            model, chunk, rng, model.cfg.alpha, rho)
        with no_grad():
            sent, words = model._encode_words(wids, n_words)
            up_logits, _ = model.forward_dual(ids, sent, words, wmask)
        pred = up_logits.data.reshape(-1, model.vocab_size)[sel].argmax(axis=1)
        code_rows = targets < model.K
        hits += int((pred[code_rows] == targets[code_rows]).sum())
        total += int(code_rows.sum())
    return hits / max(1, total)


@dataclass
class UpperEditResult:
    motion: MotionSequence
    upper_tokens: np.ndarray
    lower_tokens: np.ndarray      # lower canvas used for decoding
    kept_lower: np.ndarray        # bool: which lower conditions were kept


def upper_body_edit(motion: MotionSequence, prompt: str, cfg: BodyEditConfig,
                    bundle: UpperBodyBundle, seed: int,
                    schedule: ScheduleConfig | None = None,
                    strategy: SamplingStrategy | None = None) -> UpperEditResult:
    """Regenerate the upper-body token stream for ``prompt`` while
    conditioning on a controllable fraction of the motion's lower-body
    tokens. Dropped lower tokens stay MASK for every iteration."""
    cfg.validate()
    model = bundle.model
    schedule = schedule or ScheduleConfig(M=model.cfg.max_tokens)
    strategy = strategy or SamplingStrategy()
    up_m, low_m = body_split(motion, bundle.upper_idx, bundle.lower_idx)
    low_tokens = bundle.tokenizer_low.tokenize(low_m)
    L = len(low_tokens)
    if L > model.cfg.max_tokens:
        raise EditingError(f"motion tokenizes to {L} tokens, over the model max")
    rng = Rng(seed)
    kept = rng.uniform(0.0, 1.0, L) < cfg.lower_keep_fraction
    low_canvas = np.where(kept, low_tokens, model.low_mask_id).astype(np.int64)

    text = model.embed_text(prompt)
    sent = Tensor(text.sentence[None])
    words = Tensor(text.words[None])
    wmask = np.ones((1, text.n_words), dtype=bool)
    low_row = np.concatenate([low_canvas, [model.low_end_id]])

    def logits_fn(up_canvas: np.ndarray) -> np.ndarray:
        ids = np.stack(
            [np.concatenate([up_canvas, [model.end_id]]), low_row], axis=1)[None]
        with no_grad():
            up_logits, _ = model.forward_dual(ids, sent, words, wmask)
        return up_logits.data[0, :L]

    upper_tokens = parallel_decode(
        logits_fn, L, schedule, strategy, rng,
        mask_id=model.mask_id, vocab_limit=model.K,
    )
    # decode: kept lower tokens verbatim; dropped slots borrow the
    # nearest kept token so the output never leaks the input there
    decode_low = low_canvas.copy()
    if kept.any():
        kept_pos = np.flatnonzero(kept)
        for pos in np.flatnonzero(~kept):
            decode_low[pos] = low_tokens[kept_pos[np.argmin(np.abs(kept_pos - pos))]]
    else:
        decode_low[:] = 0
    up_out = bundle.tokenizer_up.detokenize(upper_tokens, motion.frames)
    low_out = bundle.tokenizer_low.detokenize(decode_low, motion.frames)
    joined = body_join(up_out, low_out, bundle.upper_idx, bundle.lower_idx)
    return UpperEditResult(joined, upper_tokens, decode_low, kept)
