"""Stage-2 text-conditioned masked transformer.

Token sequences use the vocabulary {K motion codes} + {MASK, PAD, END}.
A sentence embedding is prepended to the token stream; the first
``n_cross_attn`` layers cross-attend motion queries to word vectors
(which carry learned positions, so word order matters), the remaining
layers self-attend with PAD keys masked out. Training corrupts a
uniform-random fraction r ~ U(alpha, 1) of motion tokens with MASK and
minimizes cross-entropy at the corrupted positions (plus the END slot).

The text side is a deliberately small stand-in for a pretrained
language encoder: a learned word table over the corpus grammar with an
OOV bucket, mean-pooled through a linear layer for the sentence vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import checkpoint as ckpt
from .motiondata import grammar_vocabulary
from .numerics import (
    Adam,
    Rng,
    Tensor,
    add,
    attention,
    backward,
    concat,
    cross_entropy,
    dropout,
    embedding,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    stop_gradient,
    sub,
    tmean,
    tsum,
    transpose,
)

CHECKPOINT_MAGIC = "MMMTF1"


class TransformerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TransformerConfig:
    layers: int = 6            # paper-scale runs use 18
    n_cross_attn: int = 1
    heads: int = 4
    d_model: int = 128
    alpha: float = 0.5         # lower bound of the U(alpha, 1) mask ratio
    dropout: float = 0.0
    max_tokens: int = 49       # M: most motion tokens a canvas may hold
    ffn_mult: int = 4
    max_words: int = 24

    def validate(self):
        if not (0 <= self.n_cross_attn <= self.layers):
            raise TransformerError("need 0 <= n_cross_attn <= layers")
        if not (0.0 <= self.alpha < 1.0):
            raise TransformerError("need 0 <= alpha < 1")
        if self.d_model % self.heads:
            raise TransformerError("d_model must divide evenly into heads")


@dataclass
class TokenSequence:
    """ids over [0, K+3): 0..K-1 codes, K=MASK, K+1=PAD, K+2=END.
    true_len counts motion-code positions (non-PAD, non-END)."""

    ids: np.ndarray
    true_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)


@dataclass
class TextEmbedding:
    sentence: np.ndarray   # (d_model,)
    words: np.ndarray      # (n_words, d_model)
    n_words: int


def corrupt(tokens: TokenSequence, r: float, rng: Rng):
    """Mask exactly ceil(r * true_len) motion positions, uniformly
    without replacement. PAD/END are never touched. The MASK id is
    K-dependent, so it is read off the max id space lazily by callers;
    here the caller supplies it via the module-level helper."""
    raise NotImplementedError("use MaskedTransformer.corrupt")


class MaskedTransformer:
    def __init__(self, cfg: TransformerConfig, K: int, rng: Rng,
                 vocab_words: list[str] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.K = K
        self.mask_id = K
        self.pad_id = K + 1
        self.end_id = K + 2
        self.vocab_size = K + 3
        self.words = vocab_words if vocab_words is not None else grammar_vocabulary()
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.oov_id = len(self.words)
        self.params: dict[str, Tensor] = {}
        d = cfg.d_model
        std = 0.02
        self._p("tok.table", rng.normal((self.vocab_size, d), std=std))
        self._p("tok.pos", rng.normal((cfg.max_tokens + 1, d), std=std))
        self._p("sent.pos", rng.normal((d,), std=std))
        self._p("text.table", rng.normal((len(self.words) + 1, d), std=std))
        self._p("text.pos", rng.normal((cfg.max_words, d), std=std))
        self._p("text.sent.w", rng.normal((d, d), std=std))
        self._p("text.sent.b", np.zeros(d, dtype=np.float32))
        self._p("text.null", rng.normal((d,), std=std))
        for i in range(cfg.layers):
            for name in ("q", "k", "v", "o"):
                self._p(f"l{i}.attn.{name}.w", rng.normal((d, d), std=std))
                self._p(f"l{i}.attn.{name}.b", np.zeros(d, dtype=np.float32))
            self._p(f"l{i}.ln1.g", np.ones(d, dtype=np.float32))
            self._p(f"l{i}.ln1.b", np.zeros(d, dtype=np.float32))
            self._p(f"l{i}.ffn.w1", rng.normal((d, cfg.ffn_mult * d), std=std))
            self._p(f"l{i}.ffn.b1", np.zeros(cfg.ffn_mult * d, dtype=np.float32))
            self._p(f"l{i}.ffn.w2", rng.normal((cfg.ffn_mult * d, d), std=std))
            self._p(f"l{i}.ffn.b2", np.zeros(d, dtype=np.float32))
            self._p(f"l{i}.ln2.g", np.ones(d, dtype=np.float32))
            self._p(f"l{i}.ln2.b", np.zeros(d, dtype=np.float32))
        self._p("final.ln.g", np.ones(d, dtype=np.float32))
        self._p("final.ln.b", np.zeros(d, dtype=np.float32))
        self._p("head.w", rng.normal((d, self.vocab_size), std=std))
        self._p("head.b", np.zeros(self.vocab_size, dtype=np.float32))
        self._p("len.w1", rng.normal((d, 32), std=std))
        self._p("len.b1", np.zeros(32, dtype=np.float32))
        self._p("len.w2", rng.normal((32, 1), std=std))
        self._p("len.b2", np.zeros(1, dtype=np.float32))

    def _p(self, name, arr) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    # ------------------------------------------------------------------
    # text encoding

    def word_ids(self, prompt: str) -> np.ndarray:
        toks = prompt.lower().split()
        ids = [self.word_index.get(w, self.oov_id) for w in toks]
        return np.asarray(ids[: self.cfg.max_words], dtype=np.int64)

    def _encode_words(self, wid_batch: np.ndarray, n_words: np.ndarray):
        """(B, NW) padded word ids -> (sentence (B,d), words (B,NW,d))."""
        B, NW = wid_batch.shape
        vecs = embedding(self.params["text.table"], wid_batch)
        pos = embedding(self.params["text.pos"], np.arange(NW))
        words = add(vecs, reshape(pos, (1, NW, self.cfg.d_model)))
        mask = np.zeros((B, NW, 1), dtype=np.float32)
        for b in range(B):
            mask[b, : n_words[b]] = 1.0
        pooled = tsum(mul(words, Tensor(mask)), axis=1)
        pooled = mul(pooled, Tensor((1.0 / n_words).astype(np.float32)[:, None]))
        sentence = add(matmul(pooled, self.params["text.sent.w"]),
                       self.params["text.sent.b"])
        return sentence, words

    def embed_text(self, prompt: str) -> TextEmbedding:
        """Deterministic prompt embedding under the current weights."""
        if not prompt or not prompt.strip():
            raise TransformerError("prompt must be non-empty; use null_text_embedding")
        wids = self.word_ids(prompt)
        with no_grad():
            sent, words = self._encode_words(wids[None], np.array([len(wids)]))
        return TextEmbedding(sent.data[0].copy(), words.data[0].copy(), len(wids))

    def null_text_embedding(self) -> TextEmbedding:
        """Learned unconditional embedding for prompt-free editing."""
        v = self.params["text.null"].data.copy()
        return TextEmbedding(v, v[None].copy(), 1)

    # ------------------------------------------------------------------
    # corruption

    def corrupt(self, tokens: TokenSequence, r: float, rng: Rng):
        """Replace ceil(r * true_len) motion positions with MASK."""
        if not (0.0 <= r <= 1.0):
            raise TransformerError(f"mask ratio r={r} outside [0, 1]")
        n = math.ceil(r * tokens.true_len)
        positions = np.sort(rng.choice(tokens.true_len, n, replace=False)) if n else \
            np.empty(0, dtype=np.int64)
        out = tokens.ids.copy()
        out[positions] = self.mask_id
        return TokenSequence(out, tokens.true_len), positions.astype(np.int64)

    # ------------------------------------------------------------------
    # forward

    def _split_heads(self, x: Tensor, B: int, S: int) -> Tensor:
        H = self.cfg.heads
        dh = self.cfg.d_model // H
        return transpose(reshape(x, (B, S, H, dh)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor, B: int, S: int) -> Tensor:
        return reshape(transpose(x, (0, 2, 1, 3)), (B, S, self.cfg.d_model))

    def _ln(self, x: Tensor, g: str, b: str) -> Tensor:
        from .numerics import layer_norm
        return add(mul(layer_norm(x), self.params[g]), self.params[b])

    def _proj(self, x, name):
        return add(matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _embed_tokens(self, ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """(B, S) ids -> ((B, S, d) embeddings, (B, S) PAD bool mask)."""
        return embedding(self.params["tok.table"], ids), ids == self.pad_id

    def forward_tokens(self, ids: np.ndarray, sentence: Tensor, words: Tensor,
                       word_mask: np.ndarray | None = None,
                       train_rng: Rng | None = None) -> Tensor:
        """(B, S) canvas ids + text -> (B, S, vocab) logits at token slots."""
        x = self._trunk(ids, sentence, words, word_mask, train_rng)
        return add(matmul(x, self.params["head.w"]), self.params["head.b"])

    def _trunk(self, ids: np.ndarray, sentence: Tensor, words: Tensor,
               word_mask: np.ndarray | None = None,
               train_rng: Rng | None = None) -> Tensor:
        """Shared transformer body -> (B, S, d) features at token slots."""
        cfg = self.cfg
        B, S = ids.shape if ids.ndim == 2 else ids.shape[:2]
        if S > cfg.max_tokens + 1:
            raise TransformerError(
                f"sequence of {S} token slots exceeds max {cfg.max_tokens + 1}"
            )
        d = cfg.d_model
        tok_emb, pad_positions = self._embed_tokens(ids)
        tok = add(tok_emb,
                  reshape(embedding(self.params["tok.pos"], np.arange(S)), (1, S, d)))
        sent = add(reshape(sentence, (B, 1, d)),
                   reshape(self.params["sent.pos"], (1, 1, d)))
        x = concat([sent, tok], axis=1)

        # PAD columns contribute nothing to attention anywhere
        key_mask = np.zeros((B, 1, 1, S + 1), dtype=np.float32)
        key_mask[:, 0, 0, 1:][pad_positions] = -np.inf
        wmask = None
        if word_mask is not None:
            wmask = np.where(word_mask, 0.0, -np.inf).astype(np.float32)[:, None, None, :]

        NW = words.data.shape[1]
        for i in range(cfg.layers):
            h = self._ln(x, f"l{i}.ln1.g", f"l{i}.ln1.b")
            q = self._split_heads(self._proj(h, f"l{i}.attn.q"), B, S + 1)
            if i < cfg.n_cross_attn:
                k = self._split_heads(self._proj(words, f"l{i}.attn.k"), B, NW)
                v = self._split_heads(self._proj(words, f"l{i}.attn.v"), B, NW)
                att = attention(q, k, v, wmask)
            else:
                k = self._split_heads(self._proj(h, f"l{i}.attn.k"), B, S + 1)
                v = self._split_heads(self._proj(h, f"l{i}.attn.v"), B, S + 1)
                att = attention(q, k, v, key_mask)
            att = self._proj(self._merge_heads(att, B, S + 1), f"l{i}.attn.o")
            if train_rng is not None and cfg.dropout > 0:
                att = dropout(att, cfg.dropout, train_rng)
            x = add(x, att)
            h = self._ln(x, f"l{i}.ln2.g", f"l{i}.ln2.b")
            h = matmul(relu(add(matmul(h, self.params[f"l{i}.ffn.w1"]),
                                self.params[f"l{i}.ffn.b1"])),
                       self.params[f"l{i}.ffn.w2"])
            h = add(h, self.params[f"l{i}.ffn.b2"])
            if train_rng is not None and cfg.dropout > 0:
                h = dropout(h, cfg.dropout, train_rng)
            x = add(x, h)
        x = self._ln(x, "final.ln.g", "final.ln.b")
        return narrow_tokens(x)


    def forward(self, seq: TokenSequence, text: TextEmbedding) -> np.ndarray:
        """Single-sequence logits at positions 0..true_len (motion slots
        plus the END slot), shape (true_len + 1, K + 3)."""
        with no_grad():
            logits = self.forward_tokens(
                seq.ids[None],
                Tensor(text.sentence[None]),
                Tensor(text.words[None]),
                np.ones((1, text.n_words), dtype=bool),
            )
        return logits.data[0, : seq.true_len + 1].copy()

    # ------------------------------------------------------------------
    # length prediction

    def _length_norm(self, sentence: Tensor) -> Tensor:
        h = relu(add(matmul(stop_gradient(sentence), self.params["len.w1"]),
                     self.params["len.b1"]))
        return add(matmul(h, self.params["len.w2"]), self.params["len.b2"])

    def predict_length(self, text: TextEmbedding) -> int:
        with no_grad():
            out = self._length_norm(Tensor(text.sentence[None]))
        L = int(round(float(out.data[0, 0]) * self.cfg.max_tokens))
        return max(1, min(self.cfg.max_tokens, L))

    # ------------------------------------------------------------------
    # persistence

    def save(self, path):
        config = {"cfg": asdict(self.cfg), "K": self.K, "words": self.words}
        ckpt.save_checkpoint(path, CHECKPOINT_MAGIC, config,
                             {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "MaskedTransformer":
        config, arrays = ckpt.load_checkpoint(path, CHECKPOINT_MAGIC)
        model = cls(TransformerConfig(**config["cfg"]), config["K"], Rng(0),
                    vocab_words=config["words"])
        for name, t in model.params.items():
            t.data = arrays[name].astype(np.float32)
        return model


def narrow_tokens(x: Tensor) -> Tensor:
    """Drop the sentence slot from a (B, S+1, ...) sequence tensor."""
    from .numerics import narrow
    return narrow(x, 1, 1, x.data.shape[1] - 1)


# ---------------------------------------------------------------------------
# training


@dataclass
class TransformerTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    length_weight: float = 0.1
    loss_all_positions: bool = False   # Eq-2 read literally (sum over all i)
    eval_every: int = 500
    eval_sequences: int = 128
    stop_when_acc: float | None = None  # early exit once val accuracy hits this
    warmup_steps: int = 100
    lr_min_frac: float = 0.1            # cosine-decay floor as a fraction of lr


def pretokenize(dataset, tokenizer, items=None):
    """(token ids, word ids, prompt) triples for a corpus subset."""
    out = []
    for m, p in (items if items is not None else dataset.items):
        out.append({"tokens": tokenizer.tokenize(m), "text": p.text,
                    "frames": m.frames})
    return out


def _assemble_batch(model: MaskedTransformer, entries, rng: Rng,
                    alpha: float, loss_all: bool):
    B = len(entries)
    max_words = max(len(e["wids"]) for e in entries)
    S = max(len(e["tokens"]) for e in entries) + 1  # room for END
    ids = np.full((B, S), model.pad_id, dtype=np.int64)
    wids = np.zeros((B, max_words), dtype=np.int64)
    wmask = np.zeros((B, max_words), dtype=bool)
    n_words = np.zeros(B, dtype=np.int64)
    rows, cols, targets = [], [], []
    for b, e in enumerate(entries):
        toks = e["tokens"]
        L = len(toks)
        seq = TokenSequence(np.concatenate([toks, [model.end_id]]), L)
        r = alpha + (1.0 - alpha) * rng.random()
        masked, positions = model.corrupt(seq, r, rng)
        ids[b, : L + 1] = masked.ids
        if loss_all:
            positions = np.arange(L)
        rows.extend([b] * (len(positions) + 1))
        cols.extend(positions.tolist() + [L])
        targets.extend(toks[positions].tolist() + [model.end_id])
        wids[b, : len(e["wids"])] = e["wids"]
        wmask[b, : len(e["wids"])] = True
        n_words[b] = len(e["wids"])
    sel = np.asarray(rows) * S + np.asarray(cols)
    return ids, wids, wmask, n_words, sel, np.asarray(targets, dtype=np.int64)


def train_masked(dataset, tokenizer, cfg: TransformerConfig, seed: int,
                 train_cfg: TransformerTrainConfig | None = None,
                 progress=None, train_items=None, val_items=None):
    """Train the masked transformer (and its length head) on the
    pre-tokenized train split; reports masked top-1 accuracy on val.

    ``train_items``/``val_items`` override the corpus subsets (used for
    overfitting probes)."""
    tc = train_cfg or TransformerTrainConfig()
    rng = Rng(seed)
    model = MaskedTransformer(cfg, tokenizer.cfg.K, rng)
    train_entries = pretokenize(
        dataset, tokenizer,
        train_items if train_items is not None else dataset.subset("train"))
    val_entries = pretokenize(
        dataset, tokenizer,
        val_items if val_items is not None else dataset.subset("val"))
    for e in train_entries + val_entries:
        e["wids"] = model.word_ids(e["text"])
    opt = Adam(model.params, lr=tc.lr)
    metrics = []
    M = float(cfg.max_tokens)

    for step in range(1, tc.steps + 1):
        opt.lr = _lr_at(step, tc)
        picks = [train_entries[rng.integers(0, len(train_entries))]
                 for _ in range(tc.batch_size)]
        ids, wids, wmask, n_words, sel, targets = _assemble_batch(
            model, picks, rng, cfg.alpha, tc.loss_all_positions)
        sent, words = model._encode_words(wids, n_words)
        logits = model.forward_tokens(ids, sent, words, wmask,
                                      train_rng=rng if cfg.dropout > 0 else None)
        flat = reshape(logits, (-1, model.vocab_size))
        picked = embedding(flat, sel)
        loss_mask = cross_entropy(picked, targets)
        len_true = np.asarray([len(p["tokens"]) / M for p in picks],
                              dtype=np.float32)[:, None]
        len_pred = model._length_norm(sent)
        loss_len = tmean(mul(d := sub(len_pred, Tensor(len_true)), d))
        loss = add(loss_mask, mul(loss_len, Tensor(tc.length_weight)))
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        backward(loss)
        opt.step()

        if step % tc.eval_every == 0 or step == tc.steps or step == 1:
            acc = masked_accuracy(model, val_entries or train_entries,
                                  Rng(seed + 7919), tc.eval_sequences)
            metrics.append({"step": step, "loss": float(loss_mask.data),
                            "length_loss": float(loss_len.data),
                            "val_masked_acc": acc})
            if progress:
                progress(metrics[-1])
            if tc.stop_when_acc is not None and acc >= tc.stop_when_acc:
                break
    return model, metrics


def _lr_at(step: int, tc: TransformerTrainConfig) -> float:
    """Linear warmup then cosine decay to lr * lr_min_frac."""
    if step <= tc.warmup_steps:
        return tc.lr * step / max(1, tc.warmup_steps)
    span = max(1, tc.steps - tc.warmup_steps)
    progress = (step - tc.warmup_steps) / span
    floor = tc.lr * tc.lr_min_frac
    return floor + (tc.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def masked_accuracy(model: MaskedTransformer, entries, rng: Rng,
                    max_sequences: int = 128, batch_size: int = 32) -> float:
    """Teacher-forced top-1 accuracy at masked positions, r ~ U(alpha, 1)."""
    subset = entries[:max_sequences]
    hits = total = 0
    for lo in range(0, len(subset), batch_size):
        chunk = subset[lo : lo + batch_size]
        ids, wids, wmask, n_words, sel, targets = _assemble_batch(
            model, chunk, rng, model.cfg.alpha, False)
        with no_grad():
            sent, words = model._encode_words(wids, n_words)
            logits = model.forward_tokens(ids, sent, words, wmask)
        flat = logits.data.reshape(-1, model.vocab_size)
        pred = flat[sel].argmax(axis=1)
        # END slots are trivially supervised; score only the masked codes
        code_rows = targets < model.K
        hits += int((pred[code_rows] == targets[code_rows]).sum())
        total += int(code_rows.sum())
    return hits / max(1, total)
