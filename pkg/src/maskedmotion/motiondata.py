"""Synthetic text-labeled motion corpus, file I/O, and body-part tools.

A motion is a frames x dims float32 array over a J-joint stick figure:
dims = 4 + 3J, laid out as

    0: root velocity x      1: root velocity z
    2: root angular velocity
    3: root height
    4 + 3j .. 6 + 3j: offset of joint j (first half of joints = upper body)

Each corpus item composes 1-3 motion primitives over equal spans; the
prompt is the fixed-grammar rendering of the primitive sequence, e.g.
"a figure walks forward then waves to the left". Primitives have
well-separated signatures in (mean root speed, mean angular speed,
upper-joint variance), so verb labels are recoverable by the
nearest-centroid classifier below -- that property is what certifies
the corpus carries learnable text-motion signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

VERBS = ["walk", "run", "turn", "spin", "wave", "sit"]
DIRECTIONS = ["forward", "backward", "left", "right"]

WALK, RUN, TURN, SPIN, WAVE, SIT = range(6)

_VERB_PHRASE = {
    WALK: "walks", RUN: "runs", TURN: "turns",
    SPIN: "spins", WAVE: "waves", SIT: "sits down",
}
_DIR_PHRASE = {0: "forward", 1: "backward", 2: "to the left", 3: "to the right"}


class MotionDataError(ValueError):
    pass


class MotionIOError(MotionDataError):
    pass


@dataclass
class MotionSequence:
    frames: int
    dims: int
    fps: float
    values: np.ndarray  # (frames, dims) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.frames, self.dims):
            raise MotionDataError(
                f"values shape {self.values.shape} does not match "
                f"frames={self.frames}, dims={self.dims}"
            )
        if self.frames < 1:
            raise MotionDataError("motion needs at least one frame")
        if not np.isfinite(self.values).all():
            raise MotionDataError("motion contains non-finite values")

    def copy(self) -> "MotionSequence":
        return MotionSequence(self.frames, self.dims, self.fps, self.values.copy())


@dataclass
class PromptSpec:
    text: str
    verb_ids: list[int]
    target_frames: int
    direction_ids: list[int] = field(default_factory=list)


@dataclass
class DataConfig:
    n_joints: int = 4
    fps: float = 20.0
    min_len: int = 40
    max_len: int = 196
    downsample: int = 4
    max_verbs: int = 3
    noise: float = 0.02
    split: tuple = (0.8, 0.05, 0.15)

    @property
    def dims(self) -> int:
        return 4 + 3 * self.n_joints

    def validate(self):
        if self.max_len % self.downsample != 0:
            raise MotionDataError(
                f"max_len {self.max_len} must be a multiple of downsample "
                f"{self.downsample}"
            )
        if self.min_len < 1 or self.min_len > self.max_len:
            raise MotionDataError("need 1 <= min_len <= max_len")


def body_part_dims(cfg: DataConfig):
    """(upper, lower) dim index arrays. Root channels go to the lower
    half: trajectory is pelvis-driven."""
    j_up = cfg.n_joints // 2
    upper = np.arange(4, 4 + 3 * j_up)
    lower = np.concatenate([np.arange(4), np.arange(4 + 3 * j_up, cfg.dims)])
    return upper, lower


# ---------------------------------------------------------------------------
# grammar


def render_prompt(verb_ids, direction_ids) -> str:
    parts = [
        f"{_VERB_PHRASE[v]} {_DIR_PHRASE[d]}"
        for v, d in zip(verb_ids, direction_ids)
    ]
    return "a figure " + " then ".join(parts)


def parse_prompt(text: str):
    """Inverse of render_prompt; returns (verb_ids, direction_ids) or
    raises if the text is not in the grammar."""
    prefix = "a figure "
    if not text.startswith(prefix):
        raise MotionDataError(f"prompt not in grammar: {text!r}")
    verb_ids, direction_ids = [], []
    for chunk in text[len(prefix):].split(" then "):
        matched = False
        for v, vp in _VERB_PHRASE.items():
            for d, dp in _DIR_PHRASE.items():
                if chunk == f"{vp} {dp}":
                    verb_ids.append(v)
                    direction_ids.append(d)
                    matched = True
        if not matched:
            raise MotionDataError(f"prompt chunk not in grammar: {chunk!r}")
    return verb_ids, direction_ids


def grammar_vocabulary() -> list[str]:
    words = set()
    for v in _VERB_PHRASE.values():
        words.update(v.split())
    for d in _DIR_PHRASE.values():
        words.update(d.split())
    words.update(["a", "figure", "then"])
    return sorted(words)


# ---------------------------------------------------------------------------
# primitive synthesis

# (root speed, angular speed, leg amplitude, leg freq Hz, arm amplitude, arm freq Hz)
_PRIM = {
    WALK: (0.5, 0.0, 0.30, 1.5, 0.0, 0.0),
    RUN:  (2.0, 0.0, 0.45, 2.5, 0.0, 0.0),
    TURN: (0.0, 0.8, 0.10, 1.0, 0.0, 0.0),
    SPIN: (0.0, 3.0, 0.10, 1.0, 0.0, 0.0),
    WAVE: (0.0, 0.0, 0.00, 0.0, 0.90, 2.0),
    SIT:  (0.0, 0.0, 0.00, 0.0, 0.0, 0.0),
}

# typical frames per primitive; item length is their sum plus jitter, so
# prompt text carries real length signal for the length-prediction head
_PRIM_FRAMES = {WALK: 64, RUN: 88, TURN: 44, SPIN: 56, WAVE: 48, SIT: 72}
_PRIM_FRAMES_JITTER = 8

_STAND_HEIGHT = 1.0
_SIT_HEIGHT = 0.45
_BLEND_FRAMES = 6


def _direction_vector(d: int):
    return {0: (0.0, 1.0), 1: (0.0, -1.0), 2: (-1.0, 0.0), 3: (1.0, 0.0)}[d]


def _angular_sign(d: int) -> float:
    return 1.0 if d in (0, 2) else -1.0


def synth_motion(verb_ids, direction_ids, frames: int, cfg: DataConfig,
                 rng: Rng) -> MotionSequence:
    """One motion composed of equal spans per verb (np.array_split)."""
    cfg.validate()
    dims = cfg.dims
    vals = np.zeros((frames, dims), dtype=np.float32)
    spans = np.array_split(np.arange(frames), len(verb_ids))
    j_up = cfg.n_joints // 2

    # rest pose: distinct constant offsets per joint so channels differ
    rest = np.zeros((cfg.n_joints, 3), dtype=np.float32)
    for j in range(cfg.n_joints):
        rest[j] = (0.15 * (j + 1), 0.6 - 0.2 * j, -0.1 * (j + 1))

    leg_phase = rng.random() * 2 * np.pi
    arm_phase = rng.random() * 2 * np.pi
    height = _STAND_HEIGHT
    dt = 1.0 / cfg.fps

    for (v, d), span in zip(zip(verb_ids, direction_ids), spans):
        speed, ang, leg_a, leg_f, arm_a, arm_f = _PRIM[v]
        n = len(span)
        ramp = np.minimum(np.arange(n) / max(1, _BLEND_FRAMES), 1.0)
        dvx, dvz = _direction_vector(d)
        vals[span, 0] = speed * dvx * ramp
        vals[span, 1] = speed * dvz * ramp
        vals[span, 2] = ang * _angular_sign(d) * ramp
        if v == SIT:
            # monotone, noiseless descent; stays down for the span
            drop = min(n, 16)
            h = np.full(n, _SIT_HEIGHT, dtype=np.float32)
            h[:drop] = np.linspace(height, _SIT_HEIGHT, drop)
            vals[span, 3] = h
            height = _SIT_HEIGHT
        else:
            rise = min(n, 8)
            h = np.full(n, _STAND_HEIGHT, dtype=np.float32)
            h[:rise] = np.linspace(height, _STAND_HEIGHT, rise)
            vals[span, 3] = h
            height = _STAND_HEIGHT
        # joints: accumulated phase keeps oscillations continuous across spans
        leg_inc = 2 * np.pi * leg_f * dt
        arm_inc = 2 * np.pi * arm_f * dt
        lp = leg_phase + leg_inc * np.arange(n)
        ap = arm_phase + arm_inc * np.arange(n)
        leg_phase = lp[-1] + leg_inc if n else leg_phase
        arm_phase = ap[-1] + arm_inc if n else arm_phase
        wave_joint = 0 if d in (0, 2) else min(1, j_up - 1)
        for j in range(cfg.n_joints):
            base = 4 + 3 * j
            vals[span, base:base + 3] += rest[j]
            if j >= j_up:  # legs
                sign = 1.0 if (j - j_up) % 2 == 0 else -1.0
                vals[span, base] += sign * leg_a * ramp * np.sin(lp)
                vals[span, base + 2] += sign * 0.5 * leg_a * ramp * np.cos(lp)
            elif j == wave_joint:  # waving arm
                vals[span, base + 1] += arm_a * ramp * np.sin(ap)
                vals[span, base] += 0.5 * arm_a * ramp * np.cos(ap)

    if cfg.noise > 0:
        noise = rng.normal((frames, dims), std=cfg.noise)
        noise[:, 3] = 0.0  # keep the height channel clean (sit monotonicity)
        vals += noise
    return MotionSequence(frames, dims, cfg.fps, vals)


@dataclass
class Dataset:
    items: list  # (MotionSequence, PromptSpec)
    mean: np.ndarray
    std: np.ndarray
    split_indices: dict
    cfg: DataConfig
    seed: int

    def indices(self, split: str):
        return self.split_indices[split]

    def subset(self, split: str):
        return [self.items[i] for i in self.split_indices[split]]


def synth_dataset(n_items: int, seed: int, cfg: DataConfig | None = None) -> Dataset:
    """Deterministic corpus: item i draws from rng.child(i), so content
    is independent of generation order."""
    cfg = cfg or DataConfig()
    cfg.validate()
    if n_items < 1:
        raise MotionDataError("n_items must be >= 1")
    master = Rng(seed)
    items = []
    for i in range(n_items):
        r = master.child(i)
        n_verbs = r.integers(1, cfg.max_verbs + 1)
        verbs = [int(r.integers(0, len(VERBS))) for _ in range(n_verbs)]
        dirs = [int(r.integers(0, len(DIRECTIONS))) for _ in range(n_verbs)]
        frames = sum(
            _PRIM_FRAMES[v]
            + int(r.integers(-_PRIM_FRAMES_JITTER, _PRIM_FRAMES_JITTER + 1))
            for v in verbs
        )
        frames = max(cfg.min_len, min(cfg.max_len, frames))
        motion = synth_motion(verbs, dirs, frames, cfg, r)
        prompt = PromptSpec(render_prompt(verbs, dirs), verbs, frames, dirs)
        items.append((motion, prompt))

    n_train = int(round(cfg.split[0] * n_items))
    n_val = int(round(cfg.split[1] * n_items))
    split_indices = {
        "train": list(range(n_train)),
        "val": list(range(n_train, min(n_items, n_train + n_val))),
        "test": list(range(min(n_items, n_train + n_val), n_items)),
    }
    train_vals = (
        np.concatenate([items[i][0].values for i in split_indices["train"]])
        if split_indices["train"]
        else np.concatenate([m.values for m, _ in items])
    )
    mean = train_vals.mean(axis=0)
    std = train_vals.std(axis=0)
    return Dataset(items, mean, std, split_indices, cfg, seed)


# ---------------------------------------------------------------------------
# normalization


def normalize(m: MotionSequence, mean: np.ndarray, std: np.ndarray) -> MotionSequence:
    if mean.shape != (m.dims,) or std.shape != (m.dims,):
        raise MotionDataError(
            f"stats dims {mean.shape}/{std.shape} do not match motion dims {m.dims}"
        )
    s = np.maximum(std, 1e-8).astype(np.float32)
    return MotionSequence(m.frames, m.dims, m.fps, (m.values - mean) / s)


def denormalize(m: MotionSequence, mean: np.ndarray, std: np.ndarray) -> MotionSequence:
    if mean.shape != (m.dims,) or std.shape != (m.dims,):
        raise MotionDataError(
            f"stats dims {mean.shape}/{std.shape} do not match motion dims {m.dims}"
        )
    s = np.maximum(std, 1e-8).astype(np.float32)
    return MotionSequence(m.frames, m.dims, m.fps, m.values * s + mean)


# ---------------------------------------------------------------------------
# body-part split / join


def body_split(m: MotionSequence, upper_idx: np.ndarray, lower_idx: np.ndarray):
    _check_partition(m.dims, upper_idx, lower_idx)
    up = MotionSequence(m.frames, len(upper_idx), m.fps, m.values[:, upper_idx])
    lo = MotionSequence(m.frames, len(lower_idx), m.fps, m.values[:, lower_idx])
    return up, lo


def body_join(upper: MotionSequence, lower: MotionSequence,
              upper_idx: np.ndarray, lower_idx: np.ndarray) -> MotionSequence:
    dims = len(upper_idx) + len(lower_idx)
    _check_partition(dims, upper_idx, lower_idx)
    if upper.frames != lower.frames:
        raise MotionDataError(
            f"frame counts differ: upper {upper.frames} vs lower {lower.frames}"
        )
    vals = np.empty((upper.frames, dims), dtype=np.float32)
    vals[:, upper_idx] = upper.values
    vals[:, lower_idx] = lower.values
    return MotionSequence(upper.frames, dims, upper.fps, vals)


def _check_partition(dims: int, upper_idx, lower_idx):
    combined = np.concatenate([upper_idx, lower_idx])
    if len(np.unique(combined)) != len(combined):
        raise MotionDataError("upper/lower dim sets overlap")
    if sorted(combined.tolist()) != list(range(dims)):
        raise MotionDataError(
            f"upper/lower dim sets do not cover all {dims} dims"
        )


# ---------------------------------------------------------------------------
# .mmot file format


def _fmt(v: np.float32) -> str:
    return np.format_float_positional(np.float32(v), unique=True)


def save_motion(m: MotionSequence, path, comment: str | None = None):
    if not np.isfinite(m.values).all():
        raise MotionIOError("refusing to save non-finite motion values")
    lines = [f"mmot 1 frames={m.frames} dims={m.dims} fps={_fmt(np.float32(m.fps))}"]
    if comment:
        lines.append(f"# {comment}")
    for row in m.values:
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_motion(path) -> MotionSequence:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MotionIOError(f"empty motion file: {path}")
    header = lines[0].split()
    if len(header) != 5 or header[0] != "mmot" or header[1] != "1":
        raise MotionIOError(f"malformed header: {lines[0]!r}")
    try:
        fields = dict(part.split("=", 1) for part in header[2:])
        frames = int(fields["frames"])
        dims = int(fields["dims"])
        fps = float(np.float32(fields["fps"]))
    except (ValueError, KeyError) as exc:
        raise MotionIOError(f"malformed header: {lines[0]!r}") from exc
    rows = [ln for ln in lines[1:] if not ln.startswith("#")]
    if len(rows) != frames:
        raise MotionIOError(
            f"header says {frames} frames but file has {len(rows)} data rows"
        )
    vals = np.empty((frames, dims), dtype=np.float32)
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != dims:
            raise MotionIOError(f"row {i} has {len(parts)} values, expected {dims}")
        try:
            vals[i] = [np.float32(p) for p in parts]
        except ValueError as exc:
            raise MotionIOError(f"row {i} has a non-numeric value") from exc
    if not np.isfinite(vals).all():
        raise MotionIOError("motion file contains non-finite values")
    return MotionSequence(frames, dims, fps, vals)


# ---------------------------------------------------------------------------
# dataset directory I/O


def save_dataset(ds: Dataset, out_dir, config_hash: str = "", comment: str = ""):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {}
    for name, idxs in ds.split_indices.items():
        for i in idxs:
            split_of[i] = name
    items = []
    for i, (m, p) in enumerate(ds.items):
        fname = f"m{i:05d}.mmot"
        save_motion(m, out / fname, comment=comment or None)
        items.append(
            {"file": fname, "text": p.text, "verb_ids": p.verb_ids,
             "direction_ids": p.direction_ids, "frames": m.frames,
             "split": split_of[i]}
        )
    manifest = {
        "format": "mmm-dataset-1",
        "seed": ds.seed,
        "config_hash": config_hash,
        "config": {
            "n_joints": ds.cfg.n_joints, "fps": ds.cfg.fps,
            "min_len": ds.cfg.min_len, "max_len": ds.cfg.max_len,
            "downsample": ds.cfg.downsample, "max_verbs": ds.cfg.max_verbs,
            "noise": ds.cfg.noise, "split": list(ds.cfg.split),
        },
        "stats": {"mean": ds.mean.tolist(), "std": ds.std.tolist()},
        "items": items,
    }
    (out / "dataset.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
    if manifest.get("format") != "mmm-dataset-1":
        raise MotionDataError(f"unrecognized dataset manifest in {in_dir}")
    c = manifest["config"]
    cfg = DataConfig(
        n_joints=c["n_joints"], fps=c["fps"], min_len=c["min_len"],
        max_len=c["max_len"], downsample=c["downsample"],
        max_verbs=c["max_verbs"], noise=c["noise"], split=tuple(c["split"]),
    )
    items = []
    split_indices = {"train": [], "val": [], "test": []}
    for i, entry in enumerate(manifest["items"]):
        m = load_motion(root / entry["file"])
        p = PromptSpec(entry["text"], entry["verb_ids"], entry["frames"],
                       entry["direction_ids"])
        items.append((m, p))
        split_indices[entry["split"]].append(i)
    mean = np.asarray(manifest["stats"]["mean"], dtype=np.float32)
    std = np.asarray(manifest["stats"]["std"], dtype=np.float32)
    return Dataset(items, mean, std, split_indices, cfg, manifest["seed"])


# ---------------------------------------------------------------------------
# nearest-centroid verb classifier


def _segment_features(values: np.ndarray, upper_idx: np.ndarray) -> np.ndarray:
    speed = np.sqrt(values[:, 0] ** 2 + values[:, 1] ** 2).mean()
    ang = np.abs(values[:, 2]).mean()
    upper_var = values[:, upper_idx].var(axis=0).mean()
    return np.array([speed, ang, upper_var], dtype=np.float64)


class VerbClassifier:
    """Nearest-centroid over hand-crafted per-segment features:
    (mean root speed, mean angular speed, upper-dim variance)."""

    def __init__(self, cfg: DataConfig):
        self.cfg = cfg
        self.upper_idx, _ = body_part_dims(cfg)
        self.centroids = None  # (n_verbs, 3)
        self.scale = None

    def fit(self, dataset: Dataset, split: str = "train"):
        feats: dict[int, list] = {v: [] for v in range(len(VERBS))}
        for m, p in dataset.subset(split):
            spans = np.array_split(np.arange(m.frames), len(p.verb_ids))
            for v, span in zip(p.verb_ids, spans):
                feats[v].append(_segment_features(m.values[span], self.upper_idx))
        all_feats = np.concatenate([np.asarray(fs) for fs in feats.values() if fs])
        self.scale = np.maximum(all_feats.std(axis=0), 1e-8)
        self.centroids = np.zeros((len(VERBS), 3))
        for v, fs in feats.items():
            if fs:
                self.centroids[v] = np.mean(fs, axis=0)
        return self

    def classify(self, values: np.ndarray, n_segments: int) -> list[int]:
        if self.centroids is None:
            raise MotionDataError("classifier not fitted")
        out = []
        for span in np.array_split(np.arange(len(values)), n_segments):
            f = _segment_features(values[span], self.upper_idx) / self.scale
            d = ((self.centroids / self.scale - f) ** 2).sum(axis=1)
            out.append(int(np.argmin(d)))
        return out

    def accuracy(self, items) -> float:
        """Fraction of items whose classified verb multiset matches the
        labels (segment count taken from the label list)."""
        hits = 0
        for m, p in items:
            pred = self.classify(m.values, len(p.verb_ids))
            hits += sorted(pred) == sorted(p.verb_ids)
        return hits / max(1, len(items))
