import numpy as np
import pytest

from ptat import autodiff as ad
from ptat.autodiff import ARRAY_OPS, GRAPH_OPS, ShapeError, ZeroNormError
from ptat.encoders import (
    EncoderConfig,
    audio_config,
    encode_audio,
    encode_audio_batch,
    encode_text,
    encode_text_batch,
    extract_patches,
    init_audio_encoder,
    init_text_encoder,
    stack_audio_patches,
    stack_token_onehots,
    text_config,
)

TINY_AUDIO = audio_config(embed_dim=8, num_layers=2, num_heads=2, mlp_hidden=16,
                          max_seq_len=32, shared_dim=8, spec_rows=16, spec_cols=8,
                          patch_rows=4, patch_cols=4)
TINY_TEXT = text_config(embed_dim=8, num_layers=2, num_heads=2, mlp_hidden=16,
                        max_seq_len=32, shared_dim=8, vocab_size=16)


def tiny_states(seed=0):
    return init_audio_encoder(TINY_AUDIO, seed), init_text_encoder(TINY_TEXT, seed + 1)


def spectrogram(seed, cfg=TINY_AUDIO):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((cfg.spec_rows, cfg.spec_cols))


def tokens(seed, n=4, cfg=TINY_TEXT):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, size=n).tolist()


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def test_desk_config_patch_geometry():
    cfg = audio_config()
    assert (cfg.spec_rows, cfg.spec_cols) == (32, 16)
    assert cfg.patch_count + 12 <= cfg.max_seq_len


def test_fine_patch_geometry_shape_arithmetic():
    # a 32x16 spectrogram under 4x4 patches yields 32 rows; with 12
    # prompts, 44 rows enter the injection layer
    cfg = audio_config(patch_rows=4, patch_cols=4)
    assert cfg.patch_count == 32
    assert cfg.patch_count + 12 == 44 <= cfg.max_seq_len


def test_extract_patches_layout():
    cfg = TINY_AUDIO
    spec = np.arange(cfg.spec_rows * cfg.spec_cols, dtype=float).reshape(
        cfg.spec_rows, cfg.spec_cols)
    patches = extract_patches(spec, cfg)
    assert patches.shape == (cfg.patch_count, cfg.patch_size)
    assert np.array_equal(patches[0], spec[:4, :4].reshape(-1))


def test_extract_patches_rejects_wrong_shape():
    with pytest.raises(ShapeError, match="spectrogram"):
        extract_patches(np.zeros((10, 8)), TINY_AUDIO)


def test_text_sequence_assembly_length():
    # 10 tokens + 12 prefix + 12 postfix = 34 assembled rows
    cfg = text_config()
    assert 12 + 10 + 12 == 34 <= cfg.max_seq_len


def test_token_onehots_validate_range():
    with pytest.raises(ValueError, match="token ids"):
        stack_token_onehots([[0, 99]], TINY_TEXT)
    with pytest.raises(ShapeError, match="share a length"):
        stack_token_onehots([[0, 1], [0, 1, 2]], TINY_TEXT)


# ---------------------------------------------------------------------------
# Forward behaviour
# ---------------------------------------------------------------------------

def test_embeddings_are_unit_norm():
    audio, text = tiny_states()
    for seed in range(5):
        ea = encode_audio(spectrogram(seed), audio)
        et = encode_text(tokens(seed), text)
        assert abs(np.linalg.norm(ea) - 1.0) <= 1e-9
        assert abs(np.linalg.norm(et) - 1.0) <= 1e-9
        assert ea.shape == (1, TINY_AUDIO.shared_dim)


def test_zero_projection_head_is_a_norm_error():
    audio, _ = tiny_states()
    audio.frozen["head_w"] = False
    audio.set_param("head_w", np.zeros_like(audio.params["head_w"]))
    with pytest.raises(ZeroNormError):
        encode_audio(spectrogram(0), audio)


def test_prompts_change_audio_embedding():
    audio, _ = tiny_states()
    rng = np.random.default_rng(3)
    prompts = rng.normal(0.0, 0.5, (3, TINY_AUDIO.embed_dim))
    plain = encode_audio(spectrogram(1), audio)
    prompted = encode_audio(spectrogram(1), audio, prompts=prompts)
    assert not np.allclose(plain, prompted, atol=1e-9)


def test_injection_layer_changes_result():
    audio, _ = tiny_states()
    rng = np.random.default_rng(4)
    prompts = rng.normal(0.0, 0.5, (3, TINY_AUDIO.embed_dim))
    at1 = encode_audio(spectrogram(2), audio, prompts=prompts, inject_layer=1)
    at2 = encode_audio(spectrogram(2), audio, prompts=prompts, inject_layer=2)
    assert not np.allclose(at1, at2, atol=1e-9)
    with pytest.raises(ValueError, match="inject_layer"):
        encode_audio(spectrogram(2), audio, prompts=prompts, inject_layer=3)


def test_text_prompts_prefix_and_postfix():
    _, text = tiny_states()
    rng = np.random.default_rng(5)
    t_pre = rng.normal(0.0, 0.5, (3, TINY_TEXT.embed_dim))
    t_post = rng.normal(0.0, 0.5, (3, TINY_TEXT.embed_dim))
    plain = encode_text(tokens(7), text)
    assert np.array_equal(plain, encode_text(tokens(7), text))  # no prompts = plain
    full = encode_text(tokens(7), text, t_pre=t_pre, t_post=t_post)
    assert not np.allclose(plain, full, atol=1e-9)


def test_permuting_prefix_rows_changes_text_embedding():
    _, text = tiny_states()
    rng = np.random.default_rng(6)
    t_pre = rng.normal(0.0, 0.5, (4, TINY_TEXT.embed_dim))
    base = encode_text(tokens(8), text, t_pre=t_pre)
    permuted = encode_text(tokens(8), text, t_pre=t_pre[::-1].copy())
    assert not np.allclose(base, permuted, atol=1e-9)


def test_encoders_are_pure():
    audio, text = tiny_states()
    rng = np.random.default_rng(9)
    prompts = rng.normal(0.0, 0.5, (2, TINY_AUDIO.embed_dim))
    a1 = encode_audio(spectrogram(3), audio, prompts=prompts)
    a2 = encode_audio(spectrogram(3), audio, prompts=prompts)
    assert np.array_equal(a1, a2)
    t1 = encode_text(tokens(9), text)
    t2 = encode_text(tokens(9), text)
    assert np.array_equal(t1, t2)


def test_sequence_overflow_rejected():
    audio, text = tiny_states()
    rng = np.random.default_rng(10)
    too_many = rng.normal(0.0, 0.5, (TINY_AUDIO.max_seq_len, TINY_AUDIO.embed_dim))
    with pytest.raises(ShapeError, match="max_seq_len"):
        encode_audio(spectrogram(4), audio, prompts=too_many)
    long_prompts = rng.normal(0.0, 0.5, (15, TINY_TEXT.embed_dim))
    with pytest.raises(ShapeError, match="max_seq_len"):
        encode_text(tokens(10), text, t_pre=long_prompts, t_post=long_prompts)


def test_prompt_width_mismatch_rejected():
    audio, _ = tiny_states()
    with pytest.raises(ShapeError, match="embed_dim"):
        encode_audio(spectrogram(5), audio, prompts=np.zeros((2, 5)))


def test_embed_dim_must_divide_heads():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(embed_dim=9, num_heads=2, vocab_size=8)


# ---------------------------------------------------------------------------
# Batched stack vs singles, graph vs array parity
# ---------------------------------------------------------------------------

def test_batched_audio_matches_single_encodes():
    audio, _ = tiny_states()
    specs = [spectrogram(20 + i) for i in range(4)]
    rng = np.random.default_rng(11)
    prompts = rng.normal(0.0, 0.5, (3, TINY_AUDIO.embed_dim))
    stacked = stack_audio_patches(specs, TINY_AUDIO)
    batch_out = encode_audio_batch(ARRAY_OPS, audio.params, stacked, TINY_AUDIO,
                                   batch=4, prompts=prompts)
    for i, spec in enumerate(specs):
        single = encode_audio(spec, audio, prompts=prompts)
        assert np.allclose(batch_out[i], single[0], atol=1e-12)


def test_batched_text_matches_single_encodes():
    _, text = tiny_states()
    rows = [tokens(30 + i) for i in range(3)]
    rng = np.random.default_rng(12)
    t_pre = rng.normal(0.0, 0.5, (2, TINY_TEXT.embed_dim))
    t_post = rng.normal(0.0, 0.5, (2, TINY_TEXT.embed_dim))
    onehots = stack_token_onehots(rows, TINY_TEXT)
    batch_out = encode_text_batch(ARRAY_OPS, text.params, onehots, TINY_TEXT,
                                  batch=3, t_pre=t_pre, t_post=t_post)
    for i, row in enumerate(rows):
        single = encode_text(row, text, t_pre=t_pre, t_post=t_post)
        assert np.allclose(batch_out[i], single[0], atol=1e-12)


def test_graph_and_array_paths_are_bit_identical():
    audio, text = tiny_states()
    specs = [spectrogram(40 + i) for i in range(3)]
    stacked = stack_audio_patches(specs, TINY_AUDIO)
    rng = np.random.default_rng(13)
    prompts = rng.normal(0.0, 0.5, (2, TINY_AUDIO.embed_dim))

    array_out = encode_audio_batch(ARRAY_OPS, audio.params, stacked, TINY_AUDIO,
                                   batch=3, prompts=prompts)
    node_params = {k: ad.constant(v) for k, v in audio.params.items()}
    graph_out = encode_audio_batch(GRAPH_OPS, node_params, ad.constant(stacked),
                                   TINY_AUDIO, batch=3,
                                   prompts=ad.constant(prompts))
    assert np.array_equal(array_out, graph_out.value)

    rows = [tokens(50 + i) for i in range(3)]
    onehots = stack_token_onehots(rows, TINY_TEXT)
    array_t = encode_text_batch(ARRAY_OPS, text.params, onehots, TINY_TEXT, batch=3)
    node_t_params = {k: ad.constant(v) for k, v in text.params.items()}
    graph_t = encode_text_batch(GRAPH_OPS, node_t_params, ad.constant(onehots),
                                TINY_TEXT, batch=3)
    assert np.array_equal(array_t, graph_t.value)


def test_gradient_flows_to_prompts_through_audio_encoder():
    audio, _ = tiny_states()
    specs = [spectrogram(60 + i) for i in range(2)]
    stacked = ad.constant(stack_audio_patches(specs, TINY_AUDIO))
    node_params = {k: ad.constant(v) for k, v in audio.params.items()}
    rng = np.random.default_rng(14)
    prompts = ad.parameter(rng.normal(0.0, 0.5, (3, TINY_AUDIO.embed_dim)))
    out = encode_audio_batch(GRAPH_OPS, node_params, stacked, TINY_AUDIO,
                             batch=2, prompts=prompts)
    loss = ad.mean_all(ad.elementwise_mul(out, out))
    grads = ad.backward(loss)
    assert prompts.id in grads
    assert np.abs(grads[prompts.id]).max() > 0.0


def test_deep_prompts_replace_rows_each_layer():
    audio, _ = tiny_states()
    rng = np.random.default_rng(15)
    deep = [rng.normal(0.0, 0.5, (3, TINY_AUDIO.embed_dim)) for _ in range(2)]
    spec = spectrogram(70)
    stacked = stack_audio_patches([spec], TINY_AUDIO)
    out = encode_audio_batch(ARRAY_OPS, audio.params, stacked, TINY_AUDIO,
                             batch=1, deep_prompts=deep)
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-9
    # identical per-layer prompts reduce to the shallow case only at layer 1
    shallow = encode_audio(spec, audio, prompts=deep[0])
    assert not np.allclose(out, shallow, atol=1e-9)
    with pytest.raises(ValueError, match="exclusive"):
        encode_audio_batch(ARRAY_OPS, audio.params, stacked, TINY_AUDIO,
                           batch=1, prompts=deep[0], deep_prompts=deep)
