"""Command-line operator surface.

Subcommands: gen-data, train-vq, train-mmm, train-upper, generate,
edit, longgen, eval, bench, render. All randomness flows from --seed
(env MMM_SEED as fallback); every artifact embeds the resolved config
hash and seed, so reruns are byte-identical.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .editing import (
    BodyEditConfig,
    MaskLayout,
    UpperBodyBundle,
    UpperTrainConfig,
    edit_temporal,
    long_sequence,
    train_upper,
    upper_body_edit,
)
from .evaluation import FeatureExtractor, aits_bench, evaluate, train_feature_extractor
from .generate import GenerationPipeline, SamplingStrategy, ScheduleConfig
from .motiondata import (
    MotionSequence,
    load_dataset,
    load_motion,
    save_dataset,
    save_motion,
    synth_dataset,
)
from .numerics import Rng
from .tokenizer import MotionTokenizer, train_tokenizer
from .transformer import MaskedTransformer, train_masked


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MMM_SEED")
    return int(env) if env else 0


def _load_config(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key] = value
    return cfgmod.resolve(args.config, overrides)


def _stamp(cfg: dict, seed: int) -> str:
    return f"config={cfgmod.config_hash(cfg)} seed={seed}"


def _pipeline(args, cfg) -> GenerationPipeline:
    return GenerationPipeline(
        MotionTokenizer.load(args.ckpt_vq),
        MaskedTransformer.load(args.ckpt_tf),
        cfgmod.schedule_config(cfg),
        cfgmod.sampling_strategy(cfg),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    n = args.n_items if args.n_items is not None else cfg["data"]["n_items"]
    ds = synth_dataset(n, seed, cfgmod.data_config(cfg))
    save_dataset(ds, args.out, config_hash=cfgmod.config_hash(cfg),
                 comment=_stamp(cfg, seed))
    print(f"wrote {n} items to {args.out}")
    return 0


def cmd_train_vq(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    ds = load_dataset(args.data)
    tok, metrics = train_tokenizer(
        ds, cfgmod.tokenizer_config(cfg), seed, cfgmod.tokenizer_train_config(cfg),
        progress=lambda m: print(
            f"step {m['step']}: recon={m['recon_mse']:.5f} vq={m['vq_loss']:.5f} "
            f"perplexity={m['perplexity']:.1f} utilization={m['utilization']:.3f}"),
    )
    tok.save(args.out)
    if args.metrics:
        _write_metrics_csv(args.metrics, metrics, _stamp(cfg, seed))
    print(f"wrote tokenizer checkpoint to {args.out}")
    return 0


def cmd_train_mmm(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    ds = load_dataset(args.data)
    tok = MotionTokenizer.load(args.ckpt_vq)
    model, metrics = train_masked(
        ds, tok, cfgmod.transformer_config(cfg), seed,
        cfgmod.transformer_train_config(cfg),
        progress=lambda m: print(
            f"step {m['step']}: loss={m['loss']:.4f} "
            f"val_masked_acc={m['val_masked_acc']:.4f}"),
    )
    model.save(args.out)
    if args.metrics:
        _write_metrics_csv(args.metrics, metrics, _stamp(cfg, seed))
    print(f"wrote transformer checkpoint to {args.out}")
    return 0


def cmd_train_upper(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    ds = load_dataset(args.data)
    vq_cfg = cfgmod.tokenizer_config(cfg)
    vq_cfg.d_lookup = max(1, vq_cfg.d_lookup // 2)  # halves use half-width codes
    train_cfg = UpperTrainConfig(
        rho=cfg["editing"]["rho"],
        vq_train=cfgmod.tokenizer_train_config(cfg),
        tf_train=cfgmod.transformer_train_config(cfg),
    )
    bundle, metrics = train_upper(
        ds, vq_cfg, cfgmod.transformer_config(cfg), seed, train_cfg,
        progress=lambda m: print(
            f"step {m['step']}: loss={m['loss']:.4f} "
            f"upper_masked_acc={m['upper_masked_acc']:.4f}"),
    )
    bundle.save(args.out)
    print(f"wrote upper-body bundle to {args.out}")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    pipe = _pipeline(args, cfg)
    motion = pipe.text_to_motion(args.prompt, seed=seed, L=args.length)
    save_motion(motion, args.out, comment=_stamp(cfg, seed))
    print(f"wrote {motion.frames} frames to {args.out}")
    return 0


def cmd_edit(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    if args.upper_bundle:
        if not args.input:
            raise ValueError("upper-body editing needs --input")
        bundle = UpperBodyBundle.load(args.upper_bundle)
        motion = load_motion(args.input)
        result = upper_body_edit(
            motion, args.prompt or "", BodyEditConfig(args.lower_keep),
            bundle, seed, cfgmod.schedule_config(cfg), cfgmod.sampling_strategy(cfg))
        save_motion(result.motion, args.out, comment=_stamp(cfg, seed))
    elif args.layout:
        pipe = _pipeline(args, cfg)
        layout = MaskLayout.from_json(Path(args.layout).read_text(encoding="utf-8"))
        layout.validate(pipe.tokenizer.cfg.K)
        if not layout.conditions and not args.prompt:
            raise ValueError("layout has no conditions and no prompt was given")
        model = pipe.transformer
        text = model.embed_text(args.prompt) if args.prompt else model.null_text_embedding()
        tokens = pipe.decode_tokens(text, layout.length, Rng(seed),
                                    layout=layout.as_array())
        save_motion(pipe.tokenizer.detokenize(tokens), args.out,
                    comment=_stamp(cfg, seed))
    else:
        if not args.input or not args.range:
            raise ValueError("edit needs --layout, or --input with --range")
        pipe = _pipeline(args, cfg)
        motion = load_motion(args.input)
        ranges = []
        for spec in args.range:
            a, b = spec.split(":")
            ranges.append((int(a), int(b)))
        result = edit_temporal(motion, ranges, pipe, seed, prompt=args.prompt)
        save_motion(result.motion, args.out, comment=_stamp(cfg, seed))
    print(f"wrote edited motion to {args.out}")
    return 0


def cmd_longgen(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    pipe = _pipeline(args, cfg)
    if args.prompts_file:
        prompts = [ln.strip() for ln in Path(args.prompts_file).read_text(
            encoding="utf-8").splitlines() if ln.strip()]
    else:
        prompts = [p.strip() for p in (args.prompts or "").split(";") if p.strip()]
    result = long_sequence(
        prompts, args.transition_tokens or cfg["editing"]["transition_tokens"],
        pipe, seed, context=cfg["editing"]["transition_context"],
        lengths=[args.length] * len(prompts) if args.length else None)
    save_motion(result.motion, args.out, comment=_stamp(cfg, seed))
    print(f"wrote {result.motion.frames} frames ({len(prompts)} prompts) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    ds = load_dataset(args.data)
    pipe = _pipeline(args, cfg)
    if args.ckpt_fx:
        fx = FeatureExtractor.load(args.ckpt_fx)
    else:
        fx = train_feature_extractor(ds, seed=seed + 77,
                                     cfg=cfgmod.feature_extractor_config(cfg),
                                     steps=cfg["eval"]["feature_steps"])
    report = evaluate(pipe, ds, fx, seed,
                      max_items=cfg["eval"]["max_items"],
                      mmodality_prompts=cfg["eval"]["mmodality_prompts"],
                      mmodality_pairs=cfg["eval"]["mmodality_pairs"],
                      include_aits=args.aits,
                      config_hash=cfgmod.config_hash(cfg))
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"fid={report.fid:.4f} diversity={report.diversity:.4f} "
          f"mmodality={report.mmodality:.4f} alignment={report.alignment_acc:.3f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    pipe = _pipeline(args, cfg)
    lengths = [int(x) for x in args.lengths.split(",")]
    prompt = args.prompt or "a figure walks forward"
    rows = aits_bench(lambda L: pipe.text_to_motion(prompt, seed=seed, L=L),
                      lengths, repeats=args.repeats)
    lines = [f"# {_stamp(cfg, seed)}", "L,seconds"]
    lines += [f"{L},{sec:.6f}" for L, sec in rows]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for L, sec in rows:
        print(f"L={L}: {sec*1000:.1f} ms")
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args)
    motion = load_motion(args.input)
    base = Path(args.out)
    svg_path = base.with_suffix(".svg")
    csv_path = base.with_suffix(".csv")
    render_trajectory_svg(motion, svg_path, _stamp(cfg, seed))
    render_csv(motion, csv_path, _stamp(cfg, seed))
    print(f"wrote {svg_path} and {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# rendering


def root_trajectory(motion: MotionSequence) -> np.ndarray:
    """Integrate root velocities through the heading given by the
    angular-velocity channel; (frames, 2) planar positions."""
    dt = 1.0 / motion.fps
    theta = np.cumsum(motion.values[:, 2]) * dt
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    vx, vz = motion.values[:, 0], motion.values[:, 1]
    dx = (cos_t * vx + sin_t * vz) * dt
    dz = (-sin_t * vx + cos_t * vz) * dt
    return np.stack([np.cumsum(dx), np.cumsum(dz)], axis=1)


def _lerp_color(t: float) -> str:
    r = int(round(255 * t))
    b = int(round(255 * (1 - t)))
    return f"#{r:02x}00{b:02x}"


def render_trajectory_svg(motion: MotionSequence, path, stamp: str,
                          size: int = 480):
    """Root trajectory as a time-colored polyline, blue start, red end."""
    pts = root_trajectory(motion)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = float(max((hi - lo).max(), 1e-6))
    margin = 20
    scale = (size - 2 * margin) / span
    xy = (pts - lo) * scale + margin

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(size), height=str(size),
                     viewBox=f"0 0 {size} {size}")
    svg.append(ET.Comment(f" {stamp} "))
    ET.SubElement(svg, "rect", x="0", y="0", width=str(size), height=str(size),
                  fill="white")
    if len(xy) < 2 or span <= 1e-5:
        ET.SubElement(svg, "circle", cx=f"{xy[0, 0]:.2f}", cy=f"{xy[0, 1]:.2f}",
                      r="4", fill=_lerp_color(0.0))
    else:
        denom = max(1, len(xy) - 2)
        for i in range(len(xy) - 1):
            ET.SubElement(
                svg, "line",
                x1=f"{xy[i, 0]:.2f}", y1=f"{xy[i, 1]:.2f}",
                x2=f"{xy[i + 1, 0]:.2f}", y2=f"{xy[i + 1, 1]:.2f}",
                stroke=_lerp_color(i / denom), attrib={"stroke-width": "2"},
            )
    ET.ElementTree(svg).write(path, xml_declaration=True, encoding="unicode")


def render_csv(motion: MotionSequence, path, stamp: str):
    lines = [f"# {stamp}",
             "frame," + ",".join(f"d{i}" for i in range(motion.dims))]
    for i, row in enumerate(motion.values):
        lines.append(f"{i}," + ",".join(
            np.format_float_positional(v, unique=True) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_metrics_csv(path, metrics: list[dict], stamp: str):
    if not metrics:
        return
    keys = list(metrics[0].keys())
    lines = [f"# {stamp}", ",".join(keys)]
    lines += [",".join(str(m[k]) for k in keys) for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _common(sub):
    sub.add_argument("--seed", type=int, default=None,
                     help="random seed (falls back to env MMM_SEED, then 0)")
    sub.add_argument("--config", default=None, help="JSON run-config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config value by dotted path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskedmotion",
                     description="generative masked motion modeling toolkit")
    subs = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = subs.add_parser("gen-data", help="synthesize a labeled motion corpus",
                        formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-items", type=int, default=None,
                   help="item count (default from config data.n_items)")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train-vq", help="train the stage-1 motion tokenizer",
                        formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="optional metrics CSV path")
    _common(p)
    p.set_defaults(func=cmd_train_vq)

    p = subs.add_parser("train-mmm", help="train the masked motion transformer",
                        formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt-vq", required=True, help="tokenizer checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="optional metrics CSV path")
    _common(p)
    p.set_defaults(func=cmd_train_mmm)

    p = subs.add_parser("train-upper",
                        help="train split-body tokenizers and the upper-edit model",
                        formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output bundle directory")
    _common(p)
    p.set_defaults(func=cmd_train_upper)

    p = subs.add_parser("generate", help="text to motion", formatter_class=fmt)
    p.add_argument("--prompt", required=True)
    p.add_argument("--ckpt-vq", required=True)
    p.add_argument("--ckpt-tf", required=True)
    p.add_argument("--length", type=int, default=None,
                   help="token count (default: predicted from the prompt)")
    p.add_argument("-o", "--out", required=True, help="output .mmot path")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("edit", help="token-level motion editing",
                        formatter_class=fmt)
    p.add_argument("--ckpt-vq", default=None)
    p.add_argument("--ckpt-tf", default=None)
    p.add_argument("--layout", default=None, help="mask-layout JSON file")
    p.add_argument("--input", default=None, help="input .mmot motion")
    p.add_argument("--range", action="append", metavar="START:END",
                   help="frame range to regenerate (repeatable)")
    p.add_argument("--prompt", default=None)
    p.add_argument("--upper-bundle", default=None,
                   help="upper-body bundle directory (upper-body editing)")
    p.add_argument("--lower-keep", type=float, default=1.0,
                   help="fraction of lower-body tokens kept as conditions")
    p.add_argument("-o", "--out", required=True, help="output .mmot path")
    _common(p)
    p.set_defaults(func=cmd_edit)

    p = subs.add_parser("longgen", help="long sequence from chained prompts",
                        formatter_class=fmt)
    p.add_argument("--prompts", default=None, help="prompts separated by ';'")
    p.add_argument("--prompts-file", default=None, help="one prompt per line")
    p.add_argument("--transition-tokens", type=int, default=None)
    p.add_argument("--length", type=int, default=None,
                   help="fixed token count per prompt (default: predicted)")
    p.add_argument("--ckpt-vq", required=True)
    p.add_argument("--ckpt-tf", required=True)
    p.add_argument("-o", "--out", required=True, help="output .mmot path")
    _common(p)
    p.set_defaults(func=cmd_longgen)

    p = subs.add_parser("eval", help="metric suite against the test split",
                        formatter_class=fmt)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-vq", required=True)
    p.add_argument("--ckpt-tf", required=True)
    p.add_argument("--ckpt-fx", default=None,
                   help="feature-extractor checkpoint (default: train one)")
    p.add_argument("--aits", action="store_true",
                   help="include wall-clock AITS timing in the report")
    p.add_argument("--out", required=True, help="eval_report.json path")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("bench", help="decode-time vs token length",
                        formatter_class=fmt)
    p.add_argument("--lengths", default="8,16,24,32,40,48",
                   help="comma-separated token lengths")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--prompt", default=None)
    p.add_argument("--ckpt-vq", required=True)
    p.add_argument("--ckpt-tf", required=True)
    p.add_argument("-o", "--out", required=True, help="output CSV path")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("render", help="motion file to SVG trajectory + CSV",
                        formatter_class=fmt)
    p.add_argument("--input", required=True, help="input .mmot motion")
    p.add_argument("-o", "--out", required=True,
                   help="output base path (writes .svg and .csv)")
    _common(p)
    p.set_defaults(func=cmd_render)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and argparse-internal exits
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args) or 0
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
