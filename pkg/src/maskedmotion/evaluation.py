"""Metric suite: Fréchet feature distance, Diversity, MModality,
semantic alignment, and decode-time benchmarking.

Real evaluation stacks score motion through a large pretrained
contrastive encoder; at desk scale we train a small causal
next-frame-prediction encoder once on the synthetic corpus, freeze it,
and hash its weights into every report so numbers are only ever
compared under the same extractor. Absolute values are therefore not
comparable to any published table; relative comparisons under one
extractor are the point.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import checkpoint as ckpt
from .motiondata import MotionSequence, VerbClassifier, normalize
from .numerics import Adam, Rng, Tensor, backward, conv1d, matmul, mul, no_grad, relu, sub, tmean, add
from .numerics import transpose as t_transpose, reshape as t_reshape

FEATURE_CHECKPOINT_MAGIC = "MMMFE1"


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature extractor


@dataclass
class FeatureExtractorConfig:
    hidden: int = 48
    feature_dim: int = 32
    kernel: int = 5


class FeatureExtractor:
    """Two causal temporal conv layers + mean pool -> fixed-dim feature.

    Trained with next-frame prediction (the head predicts frame t+1
    from the feature at t; causal padding keeps the target out of the
    receptive field), then frozen for metric use.
    """

    def __init__(self, cfg: FeatureExtractorConfig, dims: int, rng: Rng):
        self.cfg = cfg
        self.dims = dims
        self.norm_mean = np.zeros(dims, dtype=np.float32)
        self.norm_std = np.ones(dims, dtype=np.float32)
        k = cfg.kernel
        self.params = {
            "c1.w": Tensor(rng.normal((cfg.hidden, dims, k), std=(2.0 / (dims * k)) ** 0.5), requires_grad=True),
            "c1.b": Tensor(np.zeros(cfg.hidden, dtype=np.float32), requires_grad=True),
            "c2.w": Tensor(rng.normal((cfg.feature_dim, cfg.hidden, k), std=(2.0 / (cfg.hidden * k)) ** 0.5), requires_grad=True),
            "c2.b": Tensor(np.zeros(cfg.feature_dim, dtype=np.float32), requires_grad=True),
            "head.w": Tensor(rng.normal((cfg.feature_dim, dims), std=0.05), requires_grad=True),
            "head.b": Tensor(np.zeros(dims, dtype=np.float32), requires_grad=True),
        }

    def _features_seq(self, x: Tensor) -> Tensor:
        """(B, dims, T) -> (B, feature_dim, T), causal."""
        k = self.cfg.kernel
        pad = np.zeros((x.data.shape[0], x.data.shape[1], k - 1), dtype=np.float32)
        from .numerics import concat
        h = conv1d(concat([Tensor(pad), x], axis=2), self.params["c1.w"], self.params["c1.b"])
        h = relu(h)
        pad2 = np.zeros((h.data.shape[0], h.data.shape[1], k - 1), dtype=np.float32)
        h = conv1d(concat([Tensor(pad2), h], axis=2), self.params["c2.w"], self.params["c2.b"])
        return relu(h)

    def features(self, m: MotionSequence) -> np.ndarray:
        """Frozen path: raw motion -> (feature_dim,) vector."""
        vals = (m.values - self.norm_mean) / np.maximum(self.norm_std, 1e-8)
        with no_grad():
            f = self._features_seq(Tensor(vals.T[None]))
        return f.data[0].mean(axis=1)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()[:16]

    def save(self, path):
        arrays = {k: v.data for k, v in self.params.items()}
        arrays["norm.mean"] = self.norm_mean
        arrays["norm.std"] = self.norm_std
        ckpt.save_checkpoint(path, FEATURE_CHECKPOINT_MAGIC,
                             {"cfg": asdict(self.cfg), "dims": self.dims}, arrays)

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        config, arrays = ckpt.load_checkpoint(path, FEATURE_CHECKPOINT_MAGIC)
        fx = cls(FeatureExtractorConfig(**config["cfg"]), config["dims"], Rng(0))
        for name, t in fx.params.items():
            t.data = arrays[name].astype(np.float32)
        fx.norm_mean = arrays["norm.mean"].astype(np.float32)
        fx.norm_std = arrays["norm.std"].astype(np.float32)
        return fx


def train_feature_extractor(dataset, seed: int,
                            cfg: FeatureExtractorConfig | None = None,
                            steps: int = 400, batch_size: int = 16,
                            window: int = 48, lr: float = 1e-3) -> FeatureExtractor:
    cfg = cfg or FeatureExtractorConfig()
    rng = Rng(seed)
    dims = dataset.items[0][0].dims
    fx = FeatureExtractor(cfg, dims, rng)
    fx.norm_mean = dataset.mean.astype(np.float32)
    fx.norm_std = dataset.std.astype(np.float32)
    pool = [
        normalize(m, dataset.mean, dataset.std).values.T
        for m, _ in dataset.subset("train")
        if m.frames >= window
    ]
    if not pool:
        raise EvalError(f"no training motions with >= {window} frames")
    opt = Adam(fx.params, lr=lr)
    for _ in range(steps):
        batch = np.empty((batch_size, dims, window), dtype=np.float32)
        for b in range(batch_size):
            item = pool[rng.integers(0, len(pool))]
            start = rng.integers(0, item.shape[1] - window + 1)
            batch[b] = item[:, start : start + window]
        x = Tensor(batch)
        feats = fx._features_seq(x)  # (B, F, T)
        pred_in = t_transpose(feats, (0, 2, 1))
        pred = add(matmul(pred_in, fx.params["head.w"]), fx.params["head.b"])
        from .numerics import narrow
        pred = narrow(pred, 1, 0, window - 1)            # prediction from t
        target = Tensor(batch.transpose(0, 2, 1)[:, 1:])  # frame t+1
        loss = tmean(mul(d := sub(pred, target), d))
        opt.zero_grad()
        backward(loss)
        opt.step()
    return fx


# ---------------------------------------------------------------------------
# Fréchet distance


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(mat)
    if evals.min() < -1e-6:
        raise EvalError(f"matrix square root of non-PSD input (min eig {evals.min():.3g})")
    return (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray,
                     eps: float = 1e-6) -> float:
    """Wasserstein-2 distance between the Gaussian fits of two feature
    sets: ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The cross term is computed by eigendecomposition of the symmetrized
    product sqrt(S1) S2 sqrt(S1); eigenvalues below -1e-6 are an error,
    small negatives are clamped to zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise EvalError(f"feature sets must be (n, d) with equal d: {a.shape}, {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise EvalError("need at least 2 samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False) + eps * np.eye(d)
    cov_b = np.cov(b, rowvar=False) + eps * np.eye(d)
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2.0
    evals = np.linalg.eigvalsh(inner)
    if evals.min() < -1e-6:
        raise EvalError(f"negative eigenvalue {evals.min():.3g} in covariance product")
    tr_cross = 2.0 * np.sqrt(np.clip(evals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - tr_cross)


# ---------------------------------------------------------------------------
# diversity / multimodality


def diversity(feats: np.ndarray, n_pairs: int = 300, rng: Rng | None = None,
              return_detail: bool = False):
    """Mean Euclidean distance over n_pairs disjoint random pairs.

    If the set is too small for disjoint pairs, pairs are drawn with
    replacement and the detail flag says so.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if len(feats) < 2:
        raise EvalError("diversity needs at least 2 feature vectors")
    rng = rng or Rng(0)
    n = len(feats)
    with_replacement = n_pairs > n // 2
    if with_replacement:
        first = np.asarray(rng.integers(0, n, n_pairs))
        shift = np.asarray(rng.integers(1, n, n_pairs))
        second = (first + shift) % n
    else:
        perm = rng.permutation(n)
        first, second = perm[:n_pairs], perm[n_pairs : 2 * n_pairs]
    value = float(np.linalg.norm(feats[first] - feats[second], axis=1).mean())
    return (value, with_replacement) if return_detail else value


def mmodality(generate_features, prompts, pairs_per_prompt: int = 10,
              rng: Rng | None = None) -> float:
    """Average per-prompt variation: ``generate_features(prompt, seed)``
    is called with 2 * pairs_per_prompt distinct seeds per prompt and
    paired distances are averaged."""
    rng = rng or Rng(0)
    if not prompts:
        return 0.0
    per_prompt = []
    for prompt in prompts:
        seeds = [int(rng.integers(0, 2**31)) for _ in range(2 * pairs_per_prompt)]
        feats = np.asarray([generate_features(prompt, s) for s in seeds])
        dists = np.linalg.norm(feats[0::2] - feats[1::2], axis=1)
        per_prompt.append(dists.mean())
    return float(np.mean(per_prompt))


# ---------------------------------------------------------------------------
# timing


def aits_bench(decode_fn, lengths, repeats: int = 3):
    """Wall-clock decode seconds per requested token length; the first
    (warm-up) run per length is excluded, as is any model loading the
    caller did beforehand."""
    rows = []
    for L in lengths:
        decode_fn(L)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            decode_fn(L)
            times.append(time.perf_counter() - t0)
        rows.append((int(L), float(np.mean(times))))
    return rows


# ---------------------------------------------------------------------------
# alignment


def alignment_accuracy(items, classifier: VerbClassifier) -> float:
    """Fraction of (motion, verb_ids) pairs whose classified verb
    multiset matches the prompt labels."""
    hits = 0
    for motion, verb_ids in items:
        pred = classifier.classify(motion.values, len(verb_ids))
        hits += sorted(pred) == sorted(verb_ids)
    return hits / max(1, len(items))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    fid: float
    diversity: float
    mmodality: float
    alignment_acc: float
    aits: float | None
    n_generated: int
    config_hash: str
    weights_hash: str
    seed: int
    notes: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def evaluate(pipeline, dataset, extractor: FeatureExtractor, seed: int,
             max_items: int = 64, mmodality_prompts: int = 4,
             mmodality_pairs: int = 4, include_aits: bool = False,
             config_hash: str = "") -> EvalReport:
    """Generate against the test split and score the batch."""
    test = dataset.subset("test")[:max_items]
    if len(test) < 2:
        raise EvalError("need at least 2 test items to evaluate")
    notes = []
    real_feats = np.asarray([extractor.features(m) for m, _ in test])
    gen = []
    for i, (_, prompt) in enumerate(test):
        gen.append(pipeline.text_to_motion(prompt.text, seed=seed + i))
    gen_feats = np.asarray([extractor.features(m) for m in gen])

    fid = frechet_distance(gen_feats, real_feats)
    div, replaced = diversity(gen_feats, n_pairs=300, rng=Rng(seed + 1),
                              return_detail=True)
    if replaced:
        notes.append("diversity pairs drawn with replacement (small sample)")

    def gen_feature(prompt_text, s):
        return extractor.features(pipeline.text_to_motion(prompt_text, seed=s))

    mmod = mmodality(gen_feature, [p.text for _, p in test[:mmodality_prompts]],
                     pairs_per_prompt=mmodality_pairs, rng=Rng(seed + 2))

    classifier = VerbClassifier(dataset.cfg).fit(dataset)
    align = alignment_accuracy(
        [(m, p.verb_ids) for m, (_, p) in zip(gen, test)], classifier)

    aits = None
    if include_aits:
        rows = aits_bench(
            lambda L: pipeline.text_to_motion(test[0][1].text, seed=seed, L=L),
            [8, 24, 40], repeats=2)
        aits = float(np.mean([sec for _, sec in rows]))

    return EvalReport(fid, div, mmod, align, aits, len(gen), config_hash,
                      extractor.weights_hash(), seed, notes)
