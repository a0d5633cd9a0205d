import numpy as np
import pytest

from maskedmotion.editing import (
    BodyEditConfig,
    EditingError,
    MaskLayout,
    UpperBodyBundle,
    UpperTrainConfig,
    edit_temporal,
    long_sequence,
    snap_ranges_to_tokens,
    split_dataset,
    train_upper,
    upper_body_edit,
)
from maskedmotion.generate import dynamic_iterations
from maskedmotion.motiondata import MotionSequence, body_split
from maskedmotion.numerics import Rng, backward
from maskedmotion.tokenizer import TokenizerConfig, TokenizerTrainConfig
from maskedmotion.transformer import TransformerConfig, TransformerTrainConfig


# ---------------------------------------------------------------------------
# layouts


def test_layout_json_roundtrip():
    layout = MaskLayout(10, {0: 3, 9: 7})
    back = MaskLayout.from_json(layout.to_json())
    assert back.length == 10 and back.conditions == {0: 3, 9: 7}
    arr = back.as_array()
    assert arr[0] == 3 and arr[9] == 7 and (arr[1:9] == -1).all()


def test_layout_validation():
    with pytest.raises(EditingError):
        MaskLayout(4, {5: 0}).validate(K=8)
    with pytest.raises(EditingError):
        MaskLayout(4, {0: 99}).validate(K=8)
    with pytest.raises(EditingError):
        MaskLayout(2, {0: 1, 1: 2}).validate(K=8)  # no GENERATE slots


def test_snap_ranges_outward():
    spans = snap_ranges_to_tokens([(5, 9)], frames=40, f=4)
    assert spans == [(1, 3)]  # frames 5..8 touch tokens 1 and 2
    spans = snap_ranges_to_tokens([(0, 40)], frames=40, f=4)
    assert spans == [(0, 10)]
    with pytest.raises(EditingError):
        snap_ranges_to_tokens([(10, 50)], frames=40, f=4)


# ---------------------------------------------------------------------------
# temporal editing


def test_zero_range_edit_is_roundtrip_identity(tiny_pipeline, tiny_dataset):
    m = tiny_dataset.items[0][0]
    res = edit_temporal(m, [], tiny_pipeline, seed=1)
    roundtrip = tiny_pipeline.tokenizer.detokenize(
        tiny_pipeline.tokenizer.tokenize(m), m.frames)
    assert np.array_equal(res.motion.values, roundtrip.values)
    assert res.iterations == 0


def test_inbetweening_conditions_immutable(tiny_pipeline, tiny_dataset):
    for idx in range(6):
        m, p = tiny_dataset.items[idx]
        q = m.frames // 4
        res = edit_temporal(m, [(q, m.frames - q)], tiny_pipeline,
                            seed=idx, prompt=p.text)
        assert np.array_equal(res.tokens[res.condition_mask],
                              res.input_tokens[res.condition_mask])
        assert res.motion.frames == m.frames


def test_edit_without_prompt_uses_null_embedding(tiny_pipeline, tiny_dataset):
    m = tiny_dataset.items[2][0]
    q = m.frames // 4
    res = edit_temporal(m, [(q, 2 * q)], tiny_pipeline, seed=3, prompt=None)
    assert np.array_equal(res.tokens[res.condition_mask],
                          res.input_tokens[res.condition_mask])


def test_edit_all_tokens_without_prompt_rejected(tiny_pipeline, tiny_dataset):
    m = tiny_dataset.items[0][0]
    with pytest.raises(EditingError):
        edit_temporal(m, [(0, m.frames)], tiny_pipeline, seed=0, prompt=None)


# ---------------------------------------------------------------------------
# long sequences


def test_long_sequence_token_arithmetic(tiny_pipeline):
    prompts = ["a figure walks forward", "a figure sits down forward",
               "a figure waves to the left"]
    res = long_sequence(prompts, transition_tokens=3, pipeline=tiny_pipeline,
                        seed=2, context=4, lengths=[8, 8, 8])
    assert len(res.tokens) == 3 * 8 + 2 * 3
    assert len(res.segment_spans) == 3 and len(res.transition_spans) == 2
    assert res.motion.frames == len(res.tokens) * tiny_pipeline.tokenizer.cfg.downsample


def test_long_sequence_single_iteration_transitions(tiny_pipeline):
    # T_dyn for a 3-token transition: max(1, round(10*3/24)) = 1
    res = long_sequence(["a figure walks forward", "a figure runs backward"],
                        transition_tokens=3, pipeline=tiny_pipeline, seed=5,
                        context=4, lengths=[8, 8])
    expect = dynamic_iterations(tiny_pipeline.schedule.T, 3,
                                tiny_pipeline.schedule.M)
    assert res.transition_iterations == [expect] == [1]


def test_long_sequence_preserves_segments(tiny_pipeline):
    prompts = ["a figure walks forward", "a figure spins to the right"]
    rng_segments = []
    model = tiny_pipeline.transformer
    rng = Rng(7)
    for i, p in enumerate(prompts):
        text = model.embed_text(p)
        rng_segments.append(tiny_pipeline.decode_tokens(text, 8, rng.child(i)))
    res = long_sequence(prompts, transition_tokens=3, pipeline=tiny_pipeline,
                        seed=7, context=4, lengths=[8, 8])
    for (a, b), seg in zip(res.segment_spans, rng_segments):
        assert np.array_equal(res.tokens[a:b], seg)


def test_long_sequence_input_validation(tiny_pipeline):
    with pytest.raises(EditingError):
        long_sequence([], 4, tiny_pipeline, seed=0)
    with pytest.raises(EditingError):
        long_sequence(["a figure walks forward"], 4, tiny_pipeline, seed=0)
    with pytest.raises(EditingError):
        long_sequence(["a", "b"], 0, tiny_pipeline, seed=0)


# ---------------------------------------------------------------------------
# upper-body editing


def test_split_dataset_shapes(tiny_dataset):
    ds_up, ds_low, up_idx, lo_idx = split_dataset(tiny_dataset)
    assert ds_up.items[0][0].dims == len(up_idx)
    assert ds_low.items[0][0].dims == len(lo_idx)
    assert len(up_idx) + len(lo_idx) == tiny_dataset.cfg.dims


def test_upper_training_ignores_lower_head(tiny_dataset):
    vq_cfg = TokenizerConfig(K=16, d_lookup=4, d_model=32)
    tf_cfg = TransformerConfig(layers=1, heads=2, d_model=32, max_tokens=24)
    train_cfg = UpperTrainConfig(
        vq_train=TokenizerTrainConfig(steps=30, batch_size=8, log_every=30),
        tf_train=TransformerTrainConfig(steps=10, batch_size=8, eval_every=10,
                                        eval_sequences=4),
    )
    bundle, metrics = train_upper(tiny_dataset, vq_cfg, tf_cfg, seed=3,
                                  train_cfg=train_cfg)
    assert bundle.model.params["low_head.w"].grad is None
    init = np.zeros_like(bundle.model.params["low_head.b"].data)
    assert np.array_equal(bundle.model.params["low_head.b"].data, init)
    assert metrics and "upper_masked_acc" in metrics[-1]


def test_upper_keep_one_roundtrips_lower(tiny_bundle, tiny_dataset):
    m = tiny_dataset.items[1][0]
    res = upper_body_edit(m, "a figure waves to the left", BodyEditConfig(1.0),
                          tiny_bundle, seed=11)
    _, low = body_split(m, tiny_bundle.upper_idx, tiny_bundle.lower_idx)
    roundtrip = tiny_bundle.tokenizer_low.tokenize(low)
    assert np.array_equal(res.lower_tokens, roundtrip)
    assert res.kept_lower.all()
    # lower half of the output equals the lower tokenize-detokenize
    lo_vals = res.motion.values[:, tiny_bundle.lower_idx]
    lo_expect = tiny_bundle.tokenizer_low.detokenize(roundtrip, m.frames).values
    assert np.array_equal(lo_vals, lo_expect)


def test_upper_keep_zero_invariant_to_lower(tiny_bundle, tiny_dataset):
    m1 = tiny_dataset.items[1][0]
    other = tiny_dataset.items[4][0]
    reps = -(-m1.frames // other.frames)
    vals2 = np.tile(other.values, (reps, 1))[: m1.frames]
    m2 = MotionSequence(m1.frames, m1.dims, m1.fps, vals2)
    r1 = upper_body_edit(m1, "a figure waves to the left", BodyEditConfig(0.0),
                         tiny_bundle, seed=13)
    r2 = upper_body_edit(m2, "a figure waves to the left", BodyEditConfig(0.0),
                         tiny_bundle, seed=13)
    assert not res_equal_inputs(m1, m2)
    assert np.array_equal(r1.motion.values, r2.motion.values)
    assert not r1.kept_lower.any()


def res_equal_inputs(a, b):
    return np.array_equal(a.values, b.values)


def test_upper_intermediate_fraction_differs(tiny_bundle, tiny_dataset):
    m = tiny_dataset.items[1][0]
    out = {}
    for frac in (0.0, 0.5, 1.0):
        out[frac] = upper_body_edit(m, "a figure waves to the left",
                                    BodyEditConfig(frac), tiny_bundle, seed=17)
    assert not np.array_equal(out[0.5].motion.values, out[0.0].motion.values)
    assert not np.array_equal(out[0.5].motion.values, out[1.0].motion.values)
    assert 0 < out[0.5].kept_lower.sum() < len(out[0.5].kept_lower)


def test_body_edit_config_validation():
    with pytest.raises(EditingError):
        BodyEditConfig(1.5).validate()


def test_bundle_save_load(tmp_path, tiny_bundle, tiny_dataset):
    tiny_bundle.save(tmp_path / "bundle")
    loaded = UpperBodyBundle.load(tmp_path / "bundle")
    m = tiny_dataset.items[2][0]
    a = upper_body_edit(m, "a figure runs forward", BodyEditConfig(0.8),
                        tiny_bundle, seed=23)
    b = upper_body_edit(m, "a figure runs forward", BodyEditConfig(0.8),
                        loaded, seed=23)
    assert np.array_equal(a.motion.values, b.motion.values)
    with pytest.raises(EditingError):
        UpperBodyBundle.load(tmp_path / "nothing")
