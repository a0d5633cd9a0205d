"""Stage-1 motion tokenizer: temporal convolutional encoder/decoder
around a factorized vector quantizer with EMA codebook updates and
dead-code reset.

Code lookup happens in a low-dimensional space (``d_lookup``); the
matched code is projected back to model width by ``out_proj``, which is
what lets a large codebook stay trainable. The codebook itself is
maintained by exponential moving averages of assigned encoder outputs,
not by the optimizer; codes that go unused for a whole reset window are
re-seeded from the current batch, which is the collapse-mitigation knob
exercised by the paired-run tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import checkpoint as ckpt
from .motiondata import MotionSequence
from .numerics import (
    Adam,
    Rng,
    ShapeError,
    Tensor,
    add,
    backward,
    conv1d,
    conv1d_transpose,
    embedding,
    matmul,
    mul,
    narrow,
    no_grad,
    relu,
    reshape,
    stop_gradient,
    sub,
    tmean,
    transpose,
    tsum,
)

CHECKPOINT_MAGIC = "MMMVQ1"


class TokenizerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TokenizerConfig:
    K: int = 8192
    d_lookup: int = 32
    d_model: int = 128
    downsample: int = 4
    beta_commit: float = 0.25
    ema_decay: float = 0.99
    reset_every: int = 20       # 0 disables dead-code reset
    reset_threshold: int = 1
    ema_eps: float = 1e-5
    l2_normalize_lookup: bool = False

    def validate(self):
        if self.K < 2:
            raise TokenizerError("codebook needs K >= 2")
        stages = int(round(math.log2(self.downsample)))
        if 2 ** stages != self.downsample or stages < 1:
            raise TokenizerError(
                f"downsample {self.downsample} must be a power of two >= 2 "
                "(one stride-2 stage per factor of 2)"
            )
        if not (0.0 <= self.ema_decay < 1.0):
            raise TokenizerError("ema_decay must be in [0, 1)")
        if self.reset_every < 0:
            raise TokenizerError("reset_every must be >= 0")
        return stages


class MotionTokenizer:
    def __init__(self, cfg: TokenizerConfig, dims: int, rng: Rng, fps: float = 20.0):
        self.cfg = cfg
        self.dims = dims
        self.fps = fps
        self.stages = cfg.validate()
        self.params: dict[str, Tensor] = {}
        self.norm_mean = np.zeros(dims, dtype=np.float32)
        self.norm_std = np.ones(dims, dtype=np.float32)
        w = cfg.d_model
        self._conv("enc.stem", dims, w, 3, rng)
        for s in range(self.stages):
            self._conv(f"enc.s{s}.down", w, w, 4, rng)
            self._res(f"enc.s{s}.r0", w, rng)
            self._res(f"enc.s{s}.r1", w, rng)
        self._conv("enc.head", w, cfg.d_lookup, 3, rng)
        self._p("out_proj.w", rng.normal((cfg.d_lookup, w), std=1.0 / math.sqrt(cfg.d_lookup)))
        self._p("out_proj.b", np.zeros(w, dtype=np.float32))
        self._conv("dec.stem", w, w, 3, rng)
        for s in range(self.stages):
            self._res(f"dec.s{s}.r0", w, rng)
            self._res(f"dec.s{s}.r1", w, rng)
            self._p(f"dec.s{s}.up.w", rng.normal((w, w, 4), std=math.sqrt(2.0 / (w * 4))))
            self._p(f"dec.s{s}.up.b", np.zeros(w, dtype=np.float32))
        self._conv("dec.head", w, dims, 3, rng)

        # codebook state; entries carry gradients for the quantization
        # loss but are updated by EMA, never by the optimizer
        self.entries = Tensor(
            rng.uniform(-1.0 / cfg.K, 1.0 / cfg.K, (cfg.K, cfg.d_lookup)),
            requires_grad=True,
        )
        self.ema_count = np.ones(cfg.K, dtype=np.float32)
        self.ema_sum = self.entries.data.copy()
        self.uses_since_reset = np.zeros(cfg.K, dtype=np.int64)
        self.codebook_initialized = False

    def _p(self, name, arr) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    def _conv(self, name, cin, cout, k, rng):
        self._p(f"{name}.w", rng.normal((cout, cin, k), std=math.sqrt(2.0 / (cin * k))))
        self._p(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def _res(self, name, w, rng):
        self._conv(f"{name}.c0", w, w, 3, rng)
        # zero-init the projection so every residual block starts as the
        # identity; otherwise activation variance compounds per block
        self._p(f"{name}.c1.w", np.zeros((w, w, 1), dtype=np.float32))
        self._p(f"{name}.c1.b", np.zeros(w, dtype=np.float32))

    def _apply_conv(self, name, x, stride=1, pad=0):
        return conv1d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, pad)

    def _apply_res(self, name, x):
        h = relu(self._apply_conv(f"{name}.c0", x, 1, 1))
        return add(x, self._apply_conv(f"{name}.c1", h, 1, 0))

    # ------------------------------------------------------------------
    # encode / quantize / decode

    def encode_batch(self, x: Tensor) -> Tensor:
        """(B, dims, T) normalized motion -> (B, d_lookup, T/f) latents."""
        if x.data.shape[2] % self.cfg.downsample != 0:
            raise TokenizerError(
                f"frame count {x.data.shape[2]} not divisible by "
                f"downsample {self.cfg.downsample}; pad or crop first"
            )
        h = relu(self._apply_conv("enc.stem", x, 1, 1))
        for s in range(self.stages):
            h = relu(self._apply_conv(f"enc.s{s}.down", h, 2, 1))
            h = self._apply_res(f"enc.s{s}.r0", h)
            h = self._apply_res(f"enc.s{s}.r1", h)
        return self._apply_conv("enc.head", h, 1, 1)

    def encode(self, m: MotionSequence) -> Tensor:
        """Normalized motion -> (frames/f, d_lookup) latents."""
        x = Tensor(m.values.T[None])
        z = self.encode_batch(x)
        return transpose(reshape(z, z.data.shape[1:]), (1, 0))

    def lookup(self, z: np.ndarray) -> np.ndarray:
        """Nearest-code indices; distances in float64, ties -> lowest index."""
        zd = z.astype(np.float64)
        ed = self.entries.data.astype(np.float64)
        if self.cfg.l2_normalize_lookup:
            zd = zd / np.maximum(np.linalg.norm(zd, axis=1, keepdims=True), 1e-12)
            ed = ed / np.maximum(np.linalg.norm(ed, axis=1, keepdims=True), 1e-12)
        d2 = (
            (zd * zd).sum(axis=1, keepdims=True)
            - 2.0 * zd @ ed.T
            + (ed * ed).sum(axis=1)[None, :]
        )
        return np.argmin(d2, axis=1)

    def quantize(self, z: Tensor):
        """(n, d_lookup) latents -> (indices, codes, vq loss, perplexity).

        Loss per Eq-1 semantics: ||sg(z) - e||^2 + beta ||z - sg(e)||^2,
        squared distances summed over the lookup dim, averaged over
        positions. Straight-through decode embeddings are built by the
        caller as z + sg(e - z).
        """
        if z.data.ndim != 2 or z.data.shape[0] == 0:
            raise TokenizerError(f"quantize expects non-empty (n, d) latents, got {z.data.shape}")
        if not np.isfinite(z.data).all():
            raise TokenizerError("quantize got non-finite latents")
        idx = self.lookup(z.data)
        e = embedding(self.entries, idx)
        term1 = tmean(tsum(mul(d1 := sub(stop_gradient(z), e), d1), axis=1))
        term2 = tmean(tsum(mul(d2 := sub(z, stop_gradient(e)), d2), axis=1))
        loss = add(term1, mul(term2, Tensor(self.cfg.beta_commit)))
        hist = np.bincount(idx, minlength=self.cfg.K).astype(np.float64)
        p = hist / hist.sum()
        nz = p[p > 0]
        perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
        return idx, e, loss, perplexity

    def codes_to_model(self, e: Tensor) -> Tensor:
        """Factorized code embedding: lookup-space codes -> model width."""
        return add(matmul(e, self.params["out_proj.w"]), self.params["out_proj.b"])

    def decode_latents(self, h: Tensor) -> Tensor:
        """(B, d_model, T') -> (B, dims, T'*f) normalized motion."""
        h = relu(self._apply_conv("dec.stem", h, 1, 1))
        for s in range(self.stages):
            h = self._apply_res(f"dec.s{s}.r0", h)
            h = self._apply_res(f"dec.s{s}.r1", h)
            h = relu(
                conv1d_transpose(
                    h, self.params[f"dec.s{s}.up.w"], self.params[f"dec.s{s}.up.b"], 2, 1
                )
            )
        return self._apply_conv("dec.head", h, 1, 1)

    def decode(self, indices) -> MotionSequence:
        """Token ids -> motion in normalized space (len(ids) * f frames)."""
        indices = np.asarray(indices)
        if indices.ndim != 1 or indices.size == 0:
            raise TokenizerError(f"decode expects a non-empty 1-d index array, got {indices.shape}")
        if indices.min() < 0 or indices.max() >= self.cfg.K:
            raise TokenizerError(
                f"token id out of range [0, {self.cfg.K}): "
                f"min={indices.min()} max={indices.max()}"
            )
        with no_grad():
            e = embedding(self.entries, indices)
            h = self.codes_to_model(e)
            h = transpose(reshape(h, (1,) + h.data.shape), (0, 2, 1))
            x = self.decode_latents(h)
        vals = x.data[0].T
        return MotionSequence(vals.shape[0], self.dims, self.fps, vals)

    def reconstruct(self, x: Tensor):
        """Differentiable round trip for training. x: (B, dims, T)."""
        B, _, T = x.data.shape
        tprime = T // self.cfg.downsample
        z = self.encode_batch(x)
        zf = reshape(transpose(z, (0, 2, 1)), (B * tprime, self.cfg.d_lookup))
        idx, e, vq_loss, perplexity = self.quantize(zf)
        st = add(zf, stop_gradient(sub(e, zf)))
        h = self.codes_to_model(st)
        h = transpose(reshape(h, (B, tprime, self.cfg.d_model)), (0, 2, 1))
        x_hat = self.decode_latents(h)
        return x_hat, idx, zf, vq_loss, perplexity

    # ------------------------------------------------------------------
    # codebook maintenance

    def init_codebook(self, z_batch: np.ndarray, rng: Rng):
        """Seed the codebook from real encoder outputs (tiled with small
        jitter when the batch is smaller than K). A near-origin random
        init collapses immediately: every latent maps to the same few
        codes, the commitment term then drags the encoder down with it."""
        z = z_batch
        if len(z) < self.cfg.K:
            reps = -(-self.cfg.K // len(z))
            z = np.tile(z, (reps, 1))
            z = z + rng.normal(z.shape, std=0.01 / math.sqrt(self.cfg.d_lookup))
        self.entries.data = z[: self.cfg.K].astype(np.float32).copy()
        self.ema_sum = self.entries.data.copy()
        self.ema_count = np.ones(self.cfg.K, dtype=np.float32)
        self.uses_since_reset[:] = 0
        self.codebook_initialized = True

    def maintain_codebook(self, assignments: np.ndarray, z_batch: np.ndarray,
                          iteration: int, rng: Rng):
        """EMA update, then (every ``reset_every`` steps) re-seed codes
        that went unused for the whole window from the current batch."""
        cfg = self.cfg
        lam = np.float32(cfg.ema_decay)
        n_j = np.bincount(assignments, minlength=cfg.K).astype(np.float32)
        sum_j = np.zeros((cfg.K, cfg.d_lookup), dtype=np.float32)
        np.add.at(sum_j, assignments, z_batch)
        self.ema_count = lam * self.ema_count + (1.0 - lam) * n_j
        self.ema_sum = lam * self.ema_sum + (1.0 - lam) * sum_j
        self.entries.data = self.ema_sum / np.maximum(self.ema_count, cfg.ema_eps)[:, None]
        self.uses_since_reset += n_j.astype(np.int64)
        if cfg.reset_every and iteration % cfg.reset_every == 0:
            dead = self.uses_since_reset < cfg.reset_threshold
            n_dead = int(dead.sum())
            if n_dead:
                picks = np.asarray(rng.integers(0, len(z_batch), n_dead))
                seeds = z_batch[picks]
                self.entries.data[dead] = seeds
                self.ema_sum[dead] = seeds
                self.ema_count[dead] = 1.0
            self.uses_since_reset[:] = 0

    # ------------------------------------------------------------------
    # raw-motion helpers

    def normalize_values(self, values: np.ndarray) -> np.ndarray:
        return (values - self.norm_mean) / np.maximum(self.norm_std, 1e-8)

    def denormalize_values(self, values: np.ndarray) -> np.ndarray:
        return values * np.maximum(self.norm_std, 1e-8) + self.norm_mean

    def tokenize(self, m: MotionSequence) -> np.ndarray:
        """Raw motion -> token ids; right-pads by repeating the final
        frame up to a multiple of the downsample factor."""
        f = self.cfg.downsample
        vals = self.normalize_values(m.values)
        pad = (-m.frames) % f
        if pad:
            vals = np.concatenate([vals, np.repeat(vals[-1:], pad, axis=0)])
        with no_grad():
            z = self.encode_batch(Tensor(vals.T[None]))
        zf = z.data[0].T
        return self.lookup(zf)

    def detokenize(self, indices, frames: int | None = None) -> MotionSequence:
        """Token ids -> raw-space motion, cropped to ``frames`` if given."""
        m = self.decode(indices)
        vals = self.denormalize_values(m.values)
        if frames is not None:
            vals = vals[:frames]
        return MotionSequence(len(vals), self.dims, self.fps, vals)

    # ------------------------------------------------------------------
    # persistence

    def save(self, path):
        cfg = asdict(self.cfg)
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["codebook.entries"] = self.entries.data
        arrays["codebook.ema_count"] = self.ema_count
        arrays["codebook.ema_sum"] = self.ema_sum
        arrays["codebook.uses_since_reset"] = self.uses_since_reset
        arrays["codebook.initialized"] = np.asarray(
            [int(self.codebook_initialized)], dtype=np.int64)
        arrays["norm.mean"] = self.norm_mean
        arrays["norm.std"] = self.norm_std
        ckpt.save_checkpoint(
            path, CHECKPOINT_MAGIC,
            {"cfg": cfg, "dims": self.dims, "fps": self.fps}, arrays,
        )

    @classmethod
    def load(cls, path) -> "MotionTokenizer":
        config, arrays = ckpt.load_checkpoint(path, CHECKPOINT_MAGIC)
        cfg = TokenizerConfig(**config["cfg"])
        tok = cls(cfg, config["dims"], Rng(0), fps=config["fps"])
        for name, t in tok.params.items():
            t.data = arrays[name].astype(np.float32)
        tok.entries.data = arrays["codebook.entries"].astype(np.float32)
        tok.ema_count = arrays["codebook.ema_count"].astype(np.float32)
        tok.ema_sum = arrays["codebook.ema_sum"].astype(np.float32)
        tok.uses_since_reset = arrays["codebook.uses_since_reset"].astype(np.int64)
        tok.codebook_initialized = bool(arrays["codebook.initialized"][0])
        tok.norm_mean = arrays["norm.mean"].astype(np.float32)
        tok.norm_std = arrays["norm.std"].astype(np.float32)
        return tok


# ---------------------------------------------------------------------------
# training


@dataclass
class TokenizerTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    window: int = 40          # crop length, multiple of downsample
    lr: float = 2e-3
    diff_weight: float = 1.0  # weight of the first-difference MSE term
    log_every: int = 200


def train_tokenizer(dataset, cfg: TokenizerConfig, seed: int,
                    train_cfg: TokenizerTrainConfig | None = None,
                    items=None, progress=None):
    """Train on random fixed-length crops of the (train-split) corpus.

    Returns (tokenizer, metrics); metrics is a list of dicts sampled at
    ``log_every`` with recon MSE, vq loss, perplexity and utilization
    (fraction of codes used since the previous log point).
    """
    tc = train_cfg or TokenizerTrainConfig()
    if tc.window % cfg.downsample != 0:
        raise TokenizerError(
            f"window {tc.window} must be a multiple of downsample {cfg.downsample}"
        )
    rng = Rng(seed)
    source = items if items is not None else dataset.subset("train")
    mean, std = dataset.mean, dataset.std
    dims = source[0][0].dims
    normalized = [
        ((m.values - mean) / np.maximum(std, 1e-8)).astype(np.float32).T
        for m, _ in source
        if m.frames >= tc.window
    ]
    if not normalized:
        raise TokenizerError(f"no training items with >= {tc.window} frames")

    tok = MotionTokenizer(cfg, dims, rng, fps=source[0][0].fps)
    tok.norm_mean = mean.astype(np.float32)
    tok.norm_std = std.astype(np.float32)
    opt = Adam(tok.params, lr=tc.lr)
    metrics = []
    used = np.zeros(cfg.K, dtype=bool)
    window_sums = {"recon": 0.0, "vq": 0.0, "perp": 0.0, "n": 0}

    for step in range(1, tc.steps + 1):
        batch = np.empty((tc.batch_size, dims, tc.window), dtype=np.float32)
        for b in range(tc.batch_size):
            item = normalized[rng.integers(0, len(normalized))]
            start = rng.integers(0, item.shape[1] - tc.window + 1)
            batch[b] = item[:, start : start + tc.window]
        x = Tensor(batch)
        if not tok.codebook_initialized:
            with no_grad():
                z0 = tok.encode_batch(x)
            tok.init_codebook(
                z0.data.transpose(0, 2, 1).reshape(-1, cfg.d_lookup), rng)
        x_hat, idx, zf, vq_loss, perplexity = tok.reconstruct(x)

        diff_pred = sub(narrow(x_hat, 2, 1, tc.window - 1), narrow(x_hat, 2, 0, tc.window - 1))
        diff_true = batch[:, :, 1:] - batch[:, :, :-1]
        recon = tmean(mul(d := sub(x_hat, x), d))
        smooth = tmean(mul(d2 := sub(diff_pred, Tensor(diff_true)), d2))
        loss = add(add(recon, mul(smooth, Tensor(tc.diff_weight))), vq_loss)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: recon={float(recon.data)} "
                f"vq={float(vq_loss.data)}"
            )
        opt.zero_grad()
        tok.entries.grad = None
        backward(loss)
        opt.step()
        tok.maintain_codebook(idx, zf.data, step, rng)

        used[np.unique(idx)] = True
        window_sums["recon"] += float(recon.data)
        window_sums["vq"] += float(vq_loss.data)
        window_sums["perp"] += perplexity
        window_sums["n"] += 1
        if step % tc.log_every == 0 or step == tc.steps:
            n = window_sums["n"]
            metrics.append(
                {"step": step, "recon_mse": window_sums["recon"] / n,
                 "vq_loss": window_sums["vq"] / n,
                 "perplexity": window_sums["perp"] / n,
                 "utilization": float(used.mean())}
            )
            if progress:
                progress(metrics[-1])
            used[:] = False
            window_sums = {"recon": 0.0, "vq": 0.0, "perp": 0.0, "n": 0}
    return tok, metrics
