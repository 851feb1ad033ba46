import numpy as np
import pytest

from ptat import autodiff as ad
from ptat.autodiff import ARRAY_OPS, GRAPH_OPS, ShapeError
from ptat.prompts import (
    LayerStack,
    PromptSet,
    TrainablePartition,
    count_trainable,
    generate_text_prompts,
    init_prompt_set,
    inject_audio_prompts,
    prompt_partition_entries,
)


def make_set(n=4, d=6, seed=0):
    return init_prompt_set(n, d, seed)


# ---------------------------------------------------------------------------
# generate_text_prompts
# ---------------------------------------------------------------------------

def test_identity_maps_copy_audio_prompts():
    ps = make_set()
    t_pre, t_post = ps.derive_text_prompts()
    assert np.array_equal(t_pre, ps.audio)
    assert np.array_equal(t_post, ps.audio)


def test_zero_weights_with_bias_give_constant_rows():
    ps = make_set()
    bias = np.arange(ps.dim, dtype=float).reshape(1, -1)
    t_pre, t_post = generate_text_prompts(
        ARRAY_OPS, ps.audio, np.zeros((ps.dim, ps.dim)), np.zeros((1, ps.dim)),
        np.zeros((ps.dim, ps.dim)), bias)
    assert np.array_equal(t_pre, np.zeros_like(ps.audio))
    for row in t_post:
        assert np.array_equal(row, bias[0])


def test_linearity_with_zero_biases():
    rng = np.random.default_rng(1)
    d = 5
    w_pre, w_post = rng.standard_normal((d, d)), rng.standard_normal((d, d))
    zeros = np.zeros((1, d))
    a1, a2 = rng.standard_normal((3, d)), rng.standard_normal((3, d))
    alpha, beta = 0.7, -1.3

    def gen(a):
        return generate_text_prompts(ARRAY_OPS, a, w_pre, zeros, w_post, zeros)

    combined = gen(alpha * a1 + beta * a2)
    separate_pre = alpha * gen(a1)[0] + beta * gen(a2)[0]
    separate_post = alpha * gen(a1)[1] + beta * gen(a2)[1]
    assert np.allclose(combined[0], separate_pre, atol=1e-12)
    assert np.allclose(combined[1], separate_post, atol=1e-12)


def test_row_wise_derivation_and_coupling():
    rng = np.random.default_rng(2)
    d = 6
    w_pre, w_post = rng.standard_normal((d, d)), rng.standard_normal((d, d))
    b_pre, b_post = rng.standard_normal((1, d)), rng.standard_normal((1, d))
    a = rng.standard_normal((4, d))
    t_pre, t_post = generate_text_prompts(ARRAY_OPS, a, w_pre, b_pre, w_post, b_post)
    # row i of the derived prompts depends only on prompt row i
    bumped = a.copy()
    bumped[2, 3] += 0.5
    p2, q2 = generate_text_prompts(ARRAY_OPS, bumped, w_pre, b_pre, w_post, b_post)
    assert np.array_equal(t_pre[:2], p2[:2]) and np.array_equal(t_pre[3:], p2[3:])
    assert not np.allclose(t_pre[2], p2[2], atol=1e-12)
    assert not np.allclose(t_post[2], q2[2], atol=1e-12)


def test_dimension_mismatch_rejected():
    ps = make_set(d=6)
    with pytest.raises(ShapeError):
        generate_text_prompts(ARRAY_OPS, ps.audio, np.eye(4), np.zeros((1, 4)),
                              np.eye(4), np.zeros((1, 4)))


def test_text_side_loss_reaches_audio_prompts():
    # coupling path: a loss that reads only the derived text prompts must
    # still produce gradient on the audio prompt rows
    ps = make_set(n=3, d=5, seed=3)
    a = ad.parameter(ps.audio)
    t_pre, t_post = generate_text_prompts(
        GRAPH_OPS, a,
        ad.constant(ps.s_pre_w), ad.constant(ps.s_pre_b),
        ad.constant(ps.s_post_w), ad.constant(ps.s_post_b))
    loss = ad.mean_all(ad.elementwise_mul(t_pre, t_pre))
    loss = ad.add(loss, ad.mean_all(ad.elementwise_mul(t_post, t_post)))
    grads = ad.backward(loss)
    assert np.abs(grads[a.id]).max() > 0.0

    err = ad.finite_difference_check(
        lambda p: ad.mean_all(ad.elementwise_mul(
            generate_text_prompts(
                GRAPH_OPS, p["a"], ad.constant(ps.s_pre_w), ad.constant(ps.s_pre_b),
                ad.constant(ps.s_post_w), ad.constant(ps.s_post_b))[0],
            ad.constant(np.ones((3, 5))))),
        {"a": np.asarray(ps.audio)})
    assert err < 1e-6


# ---------------------------------------------------------------------------
# inject_audio_prompts
# ---------------------------------------------------------------------------

def test_injection_at_layer_one():
    rng = np.random.default_rng(4)
    stack = LayerStack([rng.standard_normal((10, 6)) for _ in range(3)])
    prompts = rng.standard_normal((4, 6))
    out = inject_audio_prompts(stack, prompts, 1)
    assert out.injected_at == 1
    assert out.inputs[0].shape == (14, 6)
    assert np.array_equal(out.inputs[0][:4], prompts)
    assert np.array_equal(out.inputs[1], stack.inputs[1])
    assert np.array_equal(out.inputs[2], stack.inputs[2])


def test_empty_prompt_set_changes_nothing():
    rng = np.random.default_rng(5)
    stack = LayerStack([rng.standard_normal((10, 6)) for _ in range(2)])
    out = inject_audio_prompts(stack, np.zeros((0, 6)), 1)
    for before, after in zip(stack.inputs, out.inputs):
        assert np.array_equal(before, after)


def test_injection_length_arithmetic():
    rng = np.random.default_rng(6)
    stack = LayerStack([rng.standard_normal((10, 6)) for _ in range(2)])
    out = inject_audio_prompts(stack, rng.standard_normal((5, 6)), 2)
    assert out.inputs[1].shape[0] == 10 + 5


def test_repeated_injection_rejected():
    rng = np.random.default_rng(7)
    stack = LayerStack([rng.standard_normal((10, 6)) for _ in range(2)])
    once = inject_audio_prompts(stack, rng.standard_normal((2, 6)), 1)
    with pytest.raises(ValueError, match="already injected"):
        inject_audio_prompts(once, rng.standard_normal((2, 6)), 2)


# ---------------------------------------------------------------------------
# PromptSet state and partitions
# ---------------------------------------------------------------------------

def test_prompt_set_init_matches_declared_scheme():
    ps = init_prompt_set(12, 32, seed=0)
    assert ps.audio.shape == (12, 32)
    assert np.array_equal(ps.s_pre_w, np.eye(32))
    assert np.array_equal(ps.s_pre_b, np.zeros((1, 32)))
    assert ps.audio.std() < 0.05  # small-noise init


def test_prompt_set_updates_are_shape_checked():
    ps = make_set()
    with pytest.raises(ShapeError):
        ps.set_param("audio", np.zeros((1, 1)))


def test_derived_prompts_track_live_audio_rows():
    ps = make_set(seed=8)
    before = ps.derive_text_prompts()[0]
    ps.set_param("audio", np.asarray(ps.audio) + 1.0)
    after = ps.derive_text_prompts()[0]
    assert not np.allclose(before, after)


def test_count_trainable_formula():
    # 12x32 prompts + two (32x32 + bias) maps + two (32x32 + bias) heads
    part = TrainablePartition()
    ps = init_prompt_set(12, 32, seed=0)
    for name, shape in prompt_partition_entries(ps).items():
        part.add(name, shape)
    part.add("audio.head_w", (32, 32))
    part.add("audio.head_b", (1, 32))
    part.add("text.head_w", (32, 32))
    part.add("text.head_b", (1, 32))
    expected = 12 * 32 + 2 * (32 * 32 + 32) + 2 * (32 * 32 + 32)
    assert count_trainable(part) == expected == 4608


def test_partition_rejects_duplicates():
    part = TrainablePartition()
    part.add("x", (1, 1))
    with pytest.raises(ValueError, match="duplicate"):
        part.add("x", (1, 1))
