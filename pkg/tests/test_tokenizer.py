import numpy as np
import pytest

from maskedmotion.motiondata import MotionSequence, normalize, synth_dataset, DataConfig
from maskedmotion.numerics import Rng, Tensor, backward, grad_check, tsum, mul, sub
from maskedmotion.tokenizer import (
    MotionTokenizer,
    TokenizerConfig,
    TokenizerError,
    TokenizerTrainConfig,
    train_tokenizer,
)


def _fresh(K=8, d_lookup=2, dims=16, seed=0, **kw):
    return MotionTokenizer(TokenizerConfig(K=K, d_lookup=d_lookup, d_model=32, **kw),
                           dims, Rng(seed))


def _set_codebook(tok, entries):
    tok.entries.data = np.asarray(entries, dtype=np.float32)
    tok.ema_sum = tok.entries.data.copy()
    tok.ema_count = np.ones(len(entries), dtype=np.float32)


# ---------------------------------------------------------------------------
# encode lengths


@pytest.mark.parametrize("frames,expected", [(196, 49), (8, 2), (4, 1)])
def test_encode_token_counts(frames, expected):
    tok = _fresh()
    m = MotionSequence(frames, 16, 20.0, np.zeros((frames, 16), dtype=np.float32))
    z = tok.encode(m)
    assert z.data.shape == (expected, tok.cfg.d_lookup)


def test_encode_rejects_indivisible_frames():
    tok = _fresh()
    m = MotionSequence(7, 16, 20.0, np.zeros((7, 16), dtype=np.float32))
    with pytest.raises(TokenizerError):
        tok.encode(m)
    # the padded entry point handles it: ceil(7/4) = 2 tokens
    assert len(tok.tokenize(m)) == 2


# ---------------------------------------------------------------------------
# quantize


def test_quantize_exact_match_zero_loss():
    tok = _fresh(K=3)
    _set_codebook(tok, [[0, 0], [3, 4], [10, 0]])
    idx, e, loss, _ = tok.quantize(Tensor(np.array([[3.0, 4.0]])))
    assert idx.tolist() == [1]
    assert float(loss.data) == 0.0


def test_quantize_tie_breaks_to_lowest_index():
    tok = _fresh(K=2, d_lookup=1)
    _set_codebook(tok, [[0.0], [2.0]])
    idx, *_ = tok.quantize(Tensor(np.array([[1.0]])))
    assert idx.tolist() == [0]


def test_quantize_hand_loss_value():
    # z=(1,1), nearest code (0,0), beta=0.25: 2 + 0.25*2 = 2.5
    tok = _fresh(K=3)
    _set_codebook(tok, [[0, 0], [3, 4], [10, 0]])
    idx, e, loss, _ = tok.quantize(Tensor(np.array([[1.0, 1.0]])))
    assert idx.tolist() == [0]
    assert abs(float(loss.data) - 2.5) < 1e-6


def test_quantize_rejects_empty_and_nonfinite():
    tok = _fresh()
    with pytest.raises(TokenizerError):
        tok.quantize(Tensor(np.zeros((0, 2))))
    with pytest.raises(TokenizerError):
        tok.quantize(Tensor(np.array([[np.nan, 0.0]])))


def test_argmin_matches_brute_force_oracle():
    rng = Rng(17)
    for trial in range(200):
        K = int(rng.integers(2, 65))
        d = int(rng.integers(1, 9))
        tok = _fresh(K=K, d_lookup=d)
        entries = rng.normal((K, d), std=1.0)
        _set_codebook(tok, entries)
        z = rng.normal((12, d), std=1.0)
        got = tok.lookup(z)
        # independent O(K*d) scan in float64
        want = np.array([
            int(np.argmin(((zi.astype(np.float64) - entries.astype(np.float64)) ** 2).sum(axis=1)))
            for zi in z
        ])
        assert np.array_equal(got, want)


def test_vq_loss_zero_iff_exact():
    tok = _fresh(K=4)
    _set_codebook(tok, [[0, 0], [1, 0], [0, 1], [1, 1]])
    exact = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    _, _, loss, _ = tok.quantize(exact)
    assert float(loss.data) == 0.0
    off = Tensor(np.array([[1.0, 0.01]]))
    _, _, loss2, _ = tok.quantize(off)
    assert float(loss2.data) > 0.0


def test_vq_gradient_split_between_terms():
    # dL/dz comes only from the commitment term, dL/dentries only from
    # the codebook term; the sg-aware finite-difference oracle agrees
    tok = _fresh(K=3)
    _set_codebook(tok, [[0, 0], [3, 4], [10, 0]])
    z0 = np.array([[1.0, 1.0], [2.8, 4.1]], dtype=np.float32)

    def loss_of_z(z):
        _, _, loss, _ = tok.quantize(z)
        return loss

    z = Tensor(z0.copy(), requires_grad=True)
    assert grad_check(loss_of_z, z, eps=1e-4) < 1e-3
    z = Tensor(z0.copy(), requires_grad=True)
    tok.entries.zero_grad()
    loss = loss_of_z(z)
    backward(loss)
    # commitment: 2*beta*(z - e)/n
    e = tok.entries.data[tok.lookup(z0)]
    expect_z = 2 * 0.25 * (z0 - e) / len(z0)
    assert np.abs(z.grad - expect_z).max() < 1e-5
    # codebook: 2*(e - z)/n scattered onto assigned rows
    expect_e = np.zeros_like(tok.entries.data)
    for zi, ei in zip(z0, tok.lookup(z0)):
        expect_e[ei] += 2 * (tok.entries.data[ei] - zi) / len(z0)
    assert np.abs(tok.entries.grad - expect_e).max() < 1e-5


def test_perplexity_range_and_uniform_extreme():
    tok = _fresh(K=4)
    _set_codebook(tok, [[0, 0], [10, 0], [0, 10], [10, 10]])
    z = Tensor(np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]]))
    _, _, _, perp = tok.quantize(z)
    assert abs(perp - 4.0) < 1e-6  # uniform histogram -> K
    z_all_same = Tensor(np.zeros((5, 2), dtype=np.float32))
    _, _, _, perp1 = tok.quantize(z_all_same)
    assert abs(perp1 - 1.0) < 1e-6


# ---------------------------------------------------------------------------
# decode


def test_decode_lengths_and_range_check():
    tok = _fresh(K=8)
    out = tok.decode(np.zeros(49, dtype=np.int64))
    assert out.frames == 196
    assert tok.decode(np.array([3])).frames == 4
    with pytest.raises(TokenizerError):
        tok.decode(np.array([8]))
    with pytest.raises(TokenizerError):
        tok.decode(np.array([], dtype=np.int64))


def test_tokenize_detokenize_crop():
    tok = _fresh()
    m = MotionSequence(10, 16, 20.0, Rng(1).normal((10, 16)))
    ids = tok.tokenize(m)
    assert len(ids) == 3  # ceil(10/4)
    out = tok.detokenize(ids, m.frames)
    assert out.frames == 10


# ---------------------------------------------------------------------------
# EMA + reset


def test_ema_degenerate_lambda_zero():
    tok = _fresh(K=4, ema_decay=0.0)
    tok.codebook_initialized = True
    v = np.array([[2.5, -1.0]], dtype=np.float32)
    tok.maintain_codebook(np.array([2]), v, iteration=1, rng=Rng(0))
    assert np.allclose(tok.entries.data[2], v[0])


def test_ema_invariant_entries_equal_sum_over_count():
    tok = _fresh(K=4)
    rng = Rng(5)
    for it in range(1, 8):
        z = rng.normal((10, 2))
        assign = np.asarray(rng.integers(0, 4, 10))
        tok.maintain_codebook(assign, z, iteration=it, rng=rng)
        expect = tok.ema_sum / np.maximum(tok.ema_count, tok.cfg.ema_eps)[:, None]
        assert np.allclose(tok.entries.data, expect)


def test_dead_code_reset_reseeds_from_batch():
    tok = _fresh(K=4, reset_every=3)
    z = np.array([[5.0, 5.0], [5.1, 5.1]], dtype=np.float32)
    assign = np.array([0, 0])  # codes 1..3 never used
    for it in range(1, 4):
        tok.maintain_codebook(assign, z, iteration=it, rng=Rng(7))
    for dead in (1, 2, 3):
        row = tok.entries.data[dead]
        assert any(np.allclose(row, zi) for zi in z)
        assert tok.ema_count[dead] == 1.0
    assert (tok.uses_since_reset == 0).all()


def test_reset_disabled_keeps_dead_codes():
    tok = _fresh(K=4, reset_every=0)
    start = tok.entries.data.copy()
    z = np.array([[5.0, 5.0]], dtype=np.float32)
    for it in range(1, 50):
        tok.maintain_codebook(np.array([0]), z, iteration=it, rng=Rng(0))
    # untouched codes decay in count but never jump to the data
    assert np.allclose(tok.entries.data[1], start[1], atol=1e-5)


# ---------------------------------------------------------------------------
# training + checkpoints


def test_training_metrics_and_determinism(tiny_dataset):
    cfg = TokenizerConfig(K=32, d_lookup=4, d_model=32)
    tc = TokenizerTrainConfig(steps=40, batch_size=8, window=40, log_every=20)
    tok1, m1 = train_tokenizer(tiny_dataset, cfg, seed=3, train_cfg=tc)
    tok2, m2 = train_tokenizer(tiny_dataset, cfg, seed=3, train_cfg=tc)
    assert m1 == m2
    for k in tok1.params:
        assert np.array_equal(tok1.params[k].data, tok2.params[k].data)
    assert {"step", "recon_mse", "vq_loss", "perplexity", "utilization"} <= set(m1[0])


def test_checkpoint_roundtrip_identical_outputs(tmp_path, tiny_tokenizer, tiny_dataset):
    path = tmp_path / "vq.bin"
    tiny_tokenizer.save(path)
    loaded = MotionTokenizer.load(path)
    m = tiny_dataset.items[0][0]
    ids = tiny_tokenizer.tokenize(m)
    assert np.array_equal(ids, loaded.tokenize(m))
    a = tiny_tokenizer.detokenize(ids, m.frames)
    b = loaded.detokenize(ids, m.frames)
    assert np.array_equal(a.values, b.values)
    # second save is byte-identical
    path2 = tmp_path / "vq2.bin"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_config_validation():
    with pytest.raises(TokenizerError):
        TokenizerConfig(K=1).validate()
    with pytest.raises(TokenizerError):
        TokenizerConfig(downsample=3).validate()
    with pytest.raises(TokenizerError):
        train_tokenizer(None, TokenizerConfig(K=8), 0,
                        TokenizerTrainConfig(window=41))
