import numpy as np
import pytest

from ptat import autodiff as ad
from ptat.autodiff import ARRAY_OPS, GRAPH_OPS, NonFiniteError
from ptat.losses import (
    BatchEmbeddings,
    LossWeights,
    SimilarityPair,
    TeacherOutputs,
    contrastive_loss,
    feature_distillation_loss,
    kl_alignment_loss,
    similarity_distillation_loss,
    similarity_matrices,
    total_loss,
)


# ---------------------------------------------------------------------------
# Reference implementations, independent of the ops-backend code paths.
# ---------------------------------------------------------------------------

def ref_softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ref_kl_rows(p_logits, q_logits):
    p = ref_softmax(p_logits)
    q = ref_softmax(q_logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1).mean()


def ref_contrastive(a2t):
    n = a2t.shape[0]
    t2a = a2t.T
    out = 0.0
    for c in (t2a, a2t):
        logp = np.log(ref_softmax(c))
        out += -np.mean([logp[i, i] for i in range(n)])
    return out


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def graph_pair(e_a, e_t, tau):
    return similarity_matrices(GRAPH_OPS, ad.constant(e_a), ad.constant(e_t), tau)


# ---------------------------------------------------------------------------
# similarity_matrices
# ---------------------------------------------------------------------------

def test_orthonormal_rows_give_identity():
    eye = np.eye(3)
    pair = similarity_matrices(ARRAY_OPS, eye, eye, 1.0)
    assert np.allclose(pair.a2t, np.eye(3), atol=1e-15)
    assert np.array_equal(pair.t2a, pair.a2t.T)


def test_tau_scales_similarities():
    rng = np.random.default_rng(0)
    e_a, e_t = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
    base = similarity_matrices(ARRAY_OPS, e_a, e_t, 1.0)
    scaled = similarity_matrices(ARRAY_OPS, e_a, e_t, 0.07)
    assert np.allclose(scaled.a2t, base.a2t / 0.07, atol=1e-12)


def test_similarity_matches_brute_force_dots():
    rng = np.random.default_rng(1)
    e_a, e_t = unit_rows(rng, 3, 5), unit_rows(rng, 3, 5)
    pair = similarity_matrices(ARRAY_OPS, e_a, e_t, 0.25)
    expected = np.array([[e_a[i] @ e_t[j] / 0.25 for j in range(3)]
                         for i in range(3)])
    assert np.allclose(pair.a2t, expected, atol=1e-12)
    assert np.allclose(pair.t2a, expected.T, atol=1e-12)


def test_tau_must_be_positive():
    with pytest.raises(ValueError, match="tau"):
        similarity_matrices(ARRAY_OPS, np.eye(2), np.eye(2), 0.0)


def test_transpose_consistency_is_exact():
    rng = np.random.default_rng(2)
    e_a, e_t = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    pair = similarity_matrices(ARRAY_OPS, e_a, e_t, 0.07)
    assert np.array_equal(pair.t2a, pair.a2t.T)
    # entries bounded by 1/tau for unit-norm rows
    assert np.all(np.abs(pair.a2t) <= 1.0 / 0.07 + 1e-9)


# ---------------------------------------------------------------------------
# contrastive_loss
# ---------------------------------------------------------------------------

def test_saturated_positives_near_zero_loss():
    c = np.full((4, 4), -30.0)
    np.fill_diagonal(c, 30.0)
    pair = SimilarityPair(a2t=c, t2a=c.T, tau=1.0)
    assert contrastive_loss(ARRAY_OPS, pair)[0, 0] < 1e-3


def test_uniform_similarities_give_two_log_n():
    c = np.zeros((4, 4))
    pair = SimilarityPair(a2t=c, t2a=c.T, tau=1.0)
    val = contrastive_loss(ARRAY_OPS, pair)[0, 0]
    assert abs(val - 2.0 * np.log(4.0)) < 1e-12


def test_contrastive_matches_brute_force():
    rng = np.random.default_rng(3)
    c = rng.standard_normal((3, 3)) * 3.0
    pair = SimilarityPair(a2t=c, t2a=c.T, tau=1.0)
    val = contrastive_loss(ARRAY_OPS, pair)[0, 0]
    assert abs(val - ref_contrastive(c)) < 1e-9


def test_contrastive_requires_square():
    pair = SimilarityPair(a2t=np.zeros((2, 3)), t2a=np.zeros((3, 2)), tau=1.0)
    with pytest.raises(ValueError, match="square"):
        contrastive_loss(ARRAY_OPS, pair)


def test_contrastive_shift_invariance():
    rng = np.random.default_rng(4)
    c = rng.standard_normal((5, 5))
    base = contrastive_loss(
        ARRAY_OPS, SimilarityPair(a2t=c, t2a=c.T, tau=1.0))[0, 0]
    shifted = contrastive_loss(
        ARRAY_OPS, SimilarityPair(a2t=c + 11.5, t2a=(c + 11.5).T, tau=1.0))[0, 0]
    assert abs(base - shifted) < 1e-9


def test_swapping_modalities_preserves_contrastive():
    rng = np.random.default_rng(5)
    e_a, e_t = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8)
    forward = similarity_matrices(ARRAY_OPS, e_a, e_t, 0.07)
    swapped = similarity_matrices(ARRAY_OPS, e_t, e_a, 0.07)
    la = contrastive_loss(ARRAY_OPS, forward)[0, 0]
    lb = contrastive_loss(ARRAY_OPS, swapped)[0, 0]
    assert abs(la - lb) < 1e-9


# ---------------------------------------------------------------------------
# kl_alignment_loss
# ---------------------------------------------------------------------------

def test_kl_alignment_zero_for_identical_embeddings():
    rng = np.random.default_rng(6)
    e = unit_rows(rng, 4, 8)
    val = kl_alignment_loss(ARRAY_OPS, BatchEmbeddings(audio=e, text=e.copy()))
    assert val[0, 0] == 0.0


def test_kl_alignment_half_half_vs_quarter_three_quarter():
    # softmax([0,0]) = [.5,.5]; softmax([0, log 3]) = [.25,.75]
    e_a = np.array([[0.0, 0.0]])
    e_t = np.array([[0.0, np.log(3.0)]])
    val = kl_alignment_loss(ARRAY_OPS, BatchEmbeddings(audio=e_a, text=e_t))[0, 0]
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    expected = (p * np.log(p / q)).sum() + (q * np.log(q / p)).sum()
    assert abs(expected - 0.2747) < 5e-5  # sanity on the hand value
    assert abs(val - expected) < 1e-12


def test_kl_alignment_nonnegative_over_random_batches():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        batch = BatchEmbeddings(audio=unit_rows(rng, 3, 6) * 4,
                                text=unit_rows(rng, 3, 6) * 4)
        assert kl_alignment_loss(ARRAY_OPS, batch)[0, 0] >= 0.0


def test_kl_alignment_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shapes differ"):
        kl_alignment_loss(ARRAY_OPS, BatchEmbeddings(
            audio=np.zeros((2, 3)), text=np.zeros((2, 4))))


# ---------------------------------------------------------------------------
# feature_distillation_loss
# ---------------------------------------------------------------------------

def test_feature_distillation_zero_when_student_equals_teacher():
    rng = np.random.default_rng(7)
    e_a, e_t = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8)
    student = BatchEmbeddings(audio=ad.constant(e_a), text=ad.constant(e_t))
    teacher = BatchEmbeddings(audio=e_a, text=e_t)
    val = feature_distillation_loss(GRAPH_OPS, student, teacher)
    assert abs(val.value[0, 0]) <= 1e-12


def test_feature_distillation_zero_without_teacher():
    rng = np.random.default_rng(8)
    student = BatchEmbeddings(audio=ad.constant(unit_rows(rng, 3, 4)),
                              text=ad.constant(unit_rows(rng, 3, 4)))
    assert feature_distillation_loss(GRAPH_OPS, student, None).value[0, 0] == 0.0


def test_feature_distillation_matches_direct_kl():
    rng = np.random.default_rng(9)
    s_a, s_t = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    t_a, t_t = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    val = feature_distillation_loss(
        ARRAY_OPS, BatchEmbeddings(audio=s_a, text=s_t),
        BatchEmbeddings(audio=t_a, text=t_t))[0, 0]
    expected = ref_kl_rows(s_a, t_a) + ref_kl_rows(s_t, t_t)
    assert abs(val - expected) < 1e-9


# ---------------------------------------------------------------------------
# similarity_distillation_loss
# ---------------------------------------------------------------------------

def test_similarity_distillation_zero_for_identical_pairs():
    rng = np.random.default_rng(10)
    c = rng.standard_normal((4, 4))
    student = SimilarityPair(a2t=ad.constant(c), t2a=ad.constant(c.T), tau=0.07)
    teacher = SimilarityPair(a2t=c, t2a=c.T, tau=0.07)
    assert abs(similarity_distillation_loss(
        GRAPH_OPS, student, teacher).value[0, 0]) <= 1e-12


def test_similarity_distillation_uniform_teacher_onehot_student():
    n = 4
    hot = np.full((n, n), -2000.0)
    np.fill_diagonal(hot, 0.0)  # row softmax is an exact one-hot
    student = SimilarityPair(a2t=hot, t2a=hot.T, tau=1.0)
    teacher = SimilarityPair(a2t=np.zeros((n, n)), t2a=np.zeros((n, n)), tau=1.0)
    val = similarity_distillation_loss(ARRAY_OPS, student, teacher)[0, 0]
    assert abs(val - 2.0 * np.log(n)) < 1e-12


def test_similarity_distillation_matches_brute_force():
    rng = np.random.default_rng(11)
    s = rng.standard_normal((4, 4))
    t = rng.standard_normal((4, 4))
    student = SimilarityPair(a2t=s, t2a=s.T, tau=1.0)
    teacher = SimilarityPair(a2t=t, t2a=t.T, tau=1.0)
    val = similarity_distillation_loss(ARRAY_OPS, student, teacher)[0, 0]
    expected = ref_kl_rows(s.T, t.T) + ref_kl_rows(s, t)
    assert abs(val - expected) < 1e-9


def test_similarity_distillation_zero_without_teacher():
    student = SimilarityPair(a2t=ad.constant(np.ones((2, 2))),
                             t2a=ad.constant(np.ones((2, 2))), tau=1.0)
    assert similarity_distillation_loss(GRAPH_OPS, student, None).value[0, 0] == 0.0


# ---------------------------------------------------------------------------
# total_loss
# ---------------------------------------------------------------------------

def _random_inputs(seed, n=4, d=8):
    rng = np.random.default_rng(seed)
    e_a, e_t = unit_rows(rng, n, d), unit_rows(rng, n, d)
    batch = BatchEmbeddings(audio=e_a, text=e_t)
    pair = similarity_matrices(ARRAY_OPS, e_a, e_t, 0.07)
    return batch, pair


def test_total_loss_first_step_has_no_distillation():
    batch, pair = _random_inputs(12)
    weights = LossWeights(lam=0.5, alpha=0.1, tau=0.07)
    total, parts = total_loss(ARRAY_OPS, batch, pair, None, weights)
    expected = (kl_alignment_loss(ARRAY_OPS, batch)[0, 0]
                + 0.5 * contrastive_loss(ARRAY_OPS, pair)[0, 0])
    assert abs(total[0, 0] - expected) < 1e-12
    assert parts["feature_distillation"][0, 0] == 0.0
    assert parts["similarity_distillation"][0, 0] == 0.0


def test_total_loss_reduces_to_kl_when_other_terms_vanish():
    batch, pair = _random_inputs(13)
    teacher = TeacherOutputs(
        embeddings=BatchEmbeddings(audio=np.asarray(batch.audio),
                                   text=np.asarray(batch.text)),
        similarity=SimilarityPair(a2t=np.asarray(pair.a2t),
                                  t2a=np.asarray(pair.t2a), tau=0.07))
    weights = LossWeights(lam=0.0, alpha=0.0, tau=0.07)
    total, _ = total_loss(ARRAY_OPS, batch, pair, teacher, weights)
    assert abs(total[0, 0] - kl_alignment_loss(ARRAY_OPS, batch)[0, 0]) < 1e-12


def test_total_loss_is_sum_of_components_at_step_two():
    batch, pair = _random_inputs(14)
    t_batch, t_pair = _random_inputs(15)
    teacher = TeacherOutputs(embeddings=t_batch, similarity=t_pair)
    weights = LossWeights(lam=0.5, alpha=0.1, tau=0.07)
    total, parts = total_loss(ARRAY_OPS, batch, pair, teacher, weights)
    expected = (parts["kl_alignment"][0, 0]
                + 0.5 * parts["contrastive"][0, 0]
                + parts["feature_distillation"][0, 0]
                + 0.1 * parts["similarity_distillation"][0, 0])
    assert abs(total[0, 0] - expected) < 1e-12
    assert parts["feature_distillation"][0, 0] > 0.0


def test_total_loss_names_non_finite_component():
    batch, pair = _random_inputs(16)
    bad = np.array(batch.audio).copy()
    bad[0, 0] = np.inf
    broken = BatchEmbeddings(audio=bad, text=np.asarray(batch.text))
    with pytest.raises(NonFiniteError, match="kl_alignment"):
        total_loss(ARRAY_OPS, broken, pair, None, LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lam=0.5, alpha=0.1, tau=-1.0)


# ---------------------------------------------------------------------------
# Gradient checks through the losses
# ---------------------------------------------------------------------------

def test_total_loss_gradients_match_fd_on_four_pair_batch():
    rng = np.random.default_rng(17)
    n, d = 4, 6
    teacher = TeacherOutputs(
        embeddings=BatchEmbeddings(audio=unit_rows(rng, n, d),
                                   text=unit_rows(rng, n, d)),
        similarity=SimilarityPair(
            a2t=rng.standard_normal((n, n)),
            t2a=None, tau=0.07))
    teacher.similarity.t2a = teacher.similarity.a2t.T
    weights = LossWeights(lam=0.5, alpha=0.1, tau=0.07)

    def build(params):
        e_a = ad.l2_normalize_rows(params["raw_a"])
        e_t = ad.l2_normalize_rows(params["raw_t"])
        batch = BatchEmbeddings(audio=e_a, text=e_t)
        pair = similarity_matrices(GRAPH_OPS, e_a, e_t, 0.07)
        loss, _ = total_loss(GRAPH_OPS, batch, pair, teacher, weights)
        return loss

    params = {"raw_a": rng.standard_normal((n, d)),
              "raw_t": rng.standard_normal((n, d))}
    err = ad.finite_difference_check(build, params, epsilon=1e-6)
    assert err < 1e-6


def test_teacher_values_receive_no_gradient():
    rng = np.random.default_rng(18)
    e = unit_rows(rng, 3, 5)
    student = BatchEmbeddings(audio=ad.parameter(e), text=ad.parameter(e))
    teacher_audio = ad.constant(unit_rows(rng, 3, 5))
    teacher_text = ad.constant(unit_rows(rng, 3, 5))
    teacher = BatchEmbeddings(audio=teacher_audio, text=teacher_text)
    loss = feature_distillation_loss(GRAPH_OPS, student, teacher)
    grads = ad.backward(loss)
    assert student.audio.id in grads and student.text.id in grads
    assert teacher_audio.id not in grads
    assert teacher_text.id not in grads
