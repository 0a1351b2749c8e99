import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from caamargin.errors import (
    DataError,
    EmptyPairSetError,
    LabelRangeError,
    UnknownSpeakerError,
    ZeroNormError,
)
from caamargin.gradcheck import numeric_gradient, relative_error
from caamargin.losses import (
    ClassifierWeights,
    ClassVectorTable,
    EmbeddingBatch,
    MarginConfig,
    aam_softmax_loss,
    caa_contrastive_loss,
    caa_margin_con_loss,
    caa_scores,
    clamp_cos,
    cos_plus_margin,
    cosine_similarity,
    sup_margin_con_loss,
    supcon_loss,
)
from oracles import random_batch, unit_rows


def angles_batch(degrees, labels):
    """Originals are the first half of ``degrees``, views the second half."""
    rad = np.radians(degrees)
    z = np.stack([np.cos(rad), np.sin(rad)], axis=1)
    n = len(degrees) // 2
    return EmbeddingBatch.from_views(z[:n], z[n:], labels)


# --- cosine and margin ------------------------------------------------------


def test_cosine_identical_vectors(rng):
    v = rng.normal(size=5)
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)


def test_cosine_orthogonal():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0


def test_cosine_hand_value():
    assert cosine_similarity([0.6, 0.8], [1, 0]) == pytest.approx(0.6, abs=1e-15)


def test_cosine_zero_vector_names_row():
    with pytest.raises(ZeroNormError) as err:
        cosine_similarity([1, 2], [0, 0])
    assert err.value.row == 1


def test_clamp_keeps_interior_values():
    c, inside = clamp_cos([1.0, -1.0, 0.3])
    assert c[0] == 1 - 1e-7 and c[1] == -1 + 1e-7 and c[2] == 0.3
    assert inside.tolist() == [False, False, True]


def test_cos_plus_margin_examples():
    assert cos_plus_margin(1.0, 0.2) == pytest.approx(math.cos(0.2), abs=1e-12)
    assert cos_plus_margin(0.0, 0.2) == pytest.approx(-math.sin(0.2), abs=1e-15)
    for c in (-0.9, -0.1, 0.4, 0.99):
        assert cos_plus_margin(c, 0.0) == c


def test_cos_plus_margin_fallback_region():
    m = 0.3
    c = math.cos(math.pi - 0.1)  # theta + m > pi
    assert cos_plus_margin(c, m) == pytest.approx(c - m * math.sin(m), abs=1e-15)
    c_inside = math.cos(math.pi - 0.5)
    assert cos_plus_margin(c_inside, m) == pytest.approx(math.cos(math.pi - 0.5 + m), abs=1e-12)


@given(st.floats(-0.999, 0.999), st.floats(0.0, 1.5))
def test_cos_plus_margin_matches_angle_addition(c, m):
    assert cos_plus_margin(c, m) == pytest.approx(oracles.shifted(c, m), abs=1e-9)


def test_margin_config_validation():
    with pytest.raises(DataError):
        MarginConfig(m=math.pi / 2)
    with pytest.raises(DataError):
        MarginConfig(tau=0.0)
    with pytest.raises(DataError):
        MarginConfig(s=-1.0)
    assert MarginConfig() == MarginConfig(0.2, 0.07, 30.0)


# --- batch validation -------------------------------------------------------


def test_batch_rejects_unnormalized_rows():
    with pytest.raises(DataError, match="norm"):
        EmbeddingBatch.from_views([[1, 0], [0, 2]], [[1, 0], [0, 1]], [0, 1])


def test_batch_rejects_single_speaker():
    z = unit_rows(np.ones((2, 3)))
    with pytest.raises(DataError, match="2 distinct speakers"):
        EmbeddingBatch.from_views(z, z, [4, 4])


def test_batch_rejects_mismatched_views():
    z = unit_rows(np.eye(3))
    with pytest.raises(DataError, match="paired"):
        EmbeddingBatch(np.vstack([z[:2], z[:2]]), [0, 1, 1, 0], [0, 0, 1, 1])


# --- supervised contrastive -------------------------------------------------


def test_supcon_matches_direct_summation_on_angles():
    batch = angles_batch([0, 90, 10, 100], [0, 1])
    expected = oracles.contrastive(batch.data, batch.labels, 0.07)
    assert supcon_loss(batch, 0.07).value == pytest.approx(expected, abs=1e-10)


def test_supcon_saturated_closed_form():
    # speaker 0 at +x, speaker 1 at -x: positives cos=1, negatives cos=-1 (after clamping)
    batch = EmbeddingBatch.from_views([[1, 0], [-1, 0]], [[1, 0], [-1, 0]], [0, 1])
    tau = 0.07
    hi, lo = 1 - 1e-7, -1 + 1e-7
    n_neg = 2
    # one positive per anchor; canonical denominator holds it plus the negatives
    with_pos = 4 * -math.log(math.exp(hi / tau) / (math.exp(hi / tau) + n_neg * math.exp(lo / tau)))
    assert supcon_loss(batch, tau, "all_others").value == pytest.approx(with_pos, abs=1e-10)
    neg_only = 4 * -math.log(math.exp(hi / tau) / (n_neg * math.exp(lo / tau)))
    assert supcon_loss(batch, tau).value == pytest.approx(neg_only, abs=1e-10)


@pytest.mark.parametrize("denominator", ["negatives_only", "all_others"])
def test_supcon_random_batches_match_oracle(rng, denominator):
    for _ in range(5):
        batch = random_batch(rng, n=6, d=5)
        expected = oracles.contrastive(batch.data, batch.labels, 0.1, denominator=denominator)
        got = supcon_loss(batch, 0.1, denominator).value
        assert got == pytest.approx(expected, abs=1e-9)


def test_sup_margin_matches_oracle(rng):
    cfg = MarginConfig(m=0.3, tau=0.2)
    for _ in range(5):
        batch = random_batch(rng, n=6, d=4)
        expected = oracles.contrastive(batch.data, batch.labels, cfg.tau, m=cfg.m)
        assert sup_margin_con_loss(batch, cfg).value == pytest.approx(expected, abs=1e-9)


def test_sup_margin_zero_margin_is_supcon(rng):
    batch = random_batch(rng, n=8, d=16)
    a = sup_margin_con_loss(batch, MarginConfig(m=0.0, tau=0.07))
    b = supcon_loss(batch, 0.07)
    assert abs(a.value - b.value) <= 1e-12
    assert np.max(np.abs(a.grad_embeddings - b.grad_embeddings)) <= 1e-12


def test_margin_monotone_on_angles_batch():
    batch = angles_batch([0, 90, 10, 100], [0, 1])
    values = [sup_margin_con_loss(batch, MarginConfig(m=m)).value for m in (0, 0.1, 0.2, 0.3)]
    assert values == sorted(values)


def test_empty_positive_set_is_reported():
    # build without validation: a speaker with a single row has no positives
    z = unit_rows(np.eye(3))
    batch = EmbeddingBatch(z, [0, 1, 1], [0, 0, 1], check=False)
    with pytest.raises(EmptyPairSetError) as err:
        supcon_loss(batch)
    assert err.value.speaker == 0 and err.value.kind == "positive"


def test_gradients_are_tangent(rng):
    batch = random_batch(rng, n=4, d=6)
    g = sup_margin_con_loss(batch).grad_embeddings
    np.testing.assert_allclose(np.sum(g * batch.data, axis=1), 0.0, atol=1e-12)


def _fd_embeddings(loss_fn, batch):
    n = batch.size // 2

    def f(u):
        z = unit_rows(u)
        return loss_fn(EmbeddingBatch.from_views(z[:n], z[n:], batch.labels[:n])).value

    return numeric_gradient(f, batch.data)


@pytest.mark.parametrize("loss_fn", [
    lambda b: supcon_loss(b, 0.07),
    lambda b: sup_margin_con_loss(b, MarginConfig()),
    lambda b: sup_margin_con_loss(b, MarginConfig(), "all_others"),
])
def test_contrastive_gradients_finite_difference(rng, loss_fn):
    for _ in range(3):
        batch = random_batch(rng, n=4, d=8)
        err = relative_error(loss_fn(batch).grad_embeddings, _fd_embeddings(loss_fn, batch))
        assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, n=5, d=4)
    n = 5
    perm = rng.permutation(n)
    rows = np.concatenate([perm, perm + n])
    permuted = EmbeddingBatch(batch.data[rows], batch.labels[rows], batch.view[rows])
    a = sup_margin_con_loss(batch)
    b = sup_margin_con_loss(permuted)
    assert b.value == pytest.approx(a.value, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(b.grad_embeddings, a.grad_embeddings[rows], atol=1e-10)


# --- class-aware attention --------------------------------------------------


def test_caa_uniform_when_class_vectors_equal(rng):
    batch = random_batch(rng, n=6, d=4, n_speakers=3)
    table = ClassVectorTable(np.tile(rng.normal(size=4), (5, 1)), range(5))
    alpha = caa_scores(batch, table)
    c = np.unique(batch.labels).size
    np.testing.assert_allclose(alpha, 1.0 / c, atol=1e-15)


def test_caa_two_class_value():
    batch = EmbeddingBatch.from_views([[1, 0], [0, 1]], [[1, 0], [0, 1]], [0, 1])
    table = ClassVectorTable([[1, 0], [-1, 0]], [0, 1])
    alpha = caa_scores(batch, table)
    # row 0: z.c_0 = 1, z.c_1 = -1
    assert alpha[0, 0] == pytest.approx(math.e / (math.e + 1 / math.e), abs=1e-12)
    assert alpha[0, 0] == pytest.approx(0.880797, abs=1e-6)


def test_caa_matches_loop_oracle(rng):
    batch = random_batch(rng, n=6, d=5, n_speakers=3)
    ids = [7, 0, 1, 2, 9]
    table = ClassVectorTable(rng.normal(size=(5, 5)), ids)
    labels = batch.labels
    expected = oracles.caa_alpha(batch.data, labels, table.vectors, ids)
    np.testing.assert_allclose(caa_scores(batch, table), expected, atol=1e-13)


def test_caa_missing_speaker():
    batch = EmbeddingBatch.from_views([[1, 0], [0, 1]], [[1, 0], [0, 1]], [0, 3])
    with pytest.raises(UnknownSpeakerError) as err:
        caa_scores(batch, ClassVectorTable(np.zeros((2, 2)), [0, 1]))
    assert err.value.speaker == 3


def test_caa_ignores_rows_outside_batch(rng):
    batch = random_batch(rng, n=4, d=3, n_speakers=2)
    vectors = rng.normal(size=(4, 3))
    a = caa_scores(batch, ClassVectorTable(vectors, range(4)))
    vectors[2:] += 100.0
    b = caa_scores(batch, ClassVectorTable(vectors, range(4)))
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_caa_softmax_properties(seed, shift):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, n=6, d=4, n_speakers=4)
    table = ClassVectorTable(rng.normal(size=(4, 4)), range(4))
    alpha = caa_scores(batch, table)
    _, first = np.unique(batch.labels, return_index=True)
    np.testing.assert_allclose(alpha[:, first].sum(axis=1), 1.0, atol=1e-9)
    # shifting every logit z_i . c_k by the same amount: add shift * z_i to every c_k
    # only works row-wise, so test with a single anchor direction
    z0 = batch.data[0]
    shifted = ClassVectorTable(table.vectors + shift * z0, range(4))
    np.testing.assert_allclose(caa_scores(batch, shifted)[0], alpha[0], atol=1e-9)


# --- AAM softmax ------------------------------------------------------------


def test_aam_matches_oracle(rng):
    batch = random_batch(rng, n=5, d=6, n_speakers=3)
    w = unit_rows(rng.normal(size=(4, 6)))
    cfg = MarginConfig()
    expected = oracles.aam_softmax(batch.data, batch.labels, w, cfg.m, cfg.s)
    got = aam_softmax_loss(batch, ClassifierWeights(w), cfg).value
    assert got == pytest.approx(expected, abs=1e-9)


def test_aam_reduces_to_cosine_cross_entropy(rng):
    batch = random_batch(rng, n=6, d=8, n_speakers=3)
    w = unit_rows(rng.normal(size=(3, 8)))
    logits = batch.data @ w.T
    rows = np.arange(batch.size)
    ce = np.mean(np.log(np.exp(logits).sum(axis=1)) - logits[rows, batch.labels])
    got = aam_softmax_loss(batch, ClassifierWeights(w), MarginConfig(m=0.0, s=1.0)).value
    assert abs(got - ce) <= 1e-12


def test_aam_single_class_is_zero():
    z = unit_rows([[1.0, 0.2], [0.3, 1.0]])
    batch = EmbeddingBatch(np.vstack([z, z]), [0, 0, 0, 0], [0, 0, 1, 1], check=False)
    rep = aam_softmax_loss(batch, ClassifierWeights([[1.0, 0.0]]))
    assert rep.value == 0.0


def test_aam_label_out_of_range(rng):
    z = unit_rows(rng.normal(size=(6, 3)))
    batch = EmbeddingBatch.from_views(z[:3], z[3:], [0, 1, 2])
    with pytest.raises(LabelRangeError):
        aam_softmax_loss(batch, ClassifierWeights(unit_rows(rng.normal(size=(2, 3)))))


@pytest.mark.parametrize("margin_type", ["angular", "cosine"])
def test_aam_gradients_finite_difference(rng, margin_type):
    batch = random_batch(rng, n=4, d=6, n_speakers=3)
    w = unit_rows(rng.normal(size=(4, 6)))
    cfg = MarginConfig()
    rep = aam_softmax_loss(batch, ClassifierWeights(w), cfg, margin_type)
    num_z = _fd_embeddings(lambda b: aam_softmax_loss(b, ClassifierWeights(w), cfg, margin_type), batch)
    num_w = numeric_gradient(
        lambda u: aam_softmax_loss(batch, ClassifierWeights(unit_rows(u)), cfg, margin_type).value, w)
    assert relative_error(rep.grad_embeddings, num_z) < 1e-4
    assert relative_error(rep.grad_classifier_weights, num_w) < 1e-4


# --- combined loss ----------------------------------------------------------


def _parts(rng, n=6, d=8, n_speakers=3, n_classes=4):
    batch = random_batch(rng, n=n, d=d, n_speakers=n_speakers)
    w = ClassifierWeights(unit_rows(rng.normal(size=(n_classes, d))))
    table = ClassVectorTable(rng.normal(size=(n_classes, d)), range(n_classes))
    return batch, w, table


def test_caa_margin_con_without_contrastive_term(rng):
    batch, w, table = _parts(rng)
    combined = caa_margin_con_loss(batch, w, table, lambdas=(0.7, 0.0))
    assert abs(combined.value - 0.7 * aam_softmax_loss(batch, w).value) <= 1e-12


def test_caa_margin_con_uniform_attention_substitution(rng):
    batch, w, _ = _parts(rng)
    table = ClassVectorTable(np.tile(rng.normal(size=8), (4, 1)), range(4))
    c = np.unique(batch.labels).size
    cfg = MarginConfig()
    got = caa_margin_con_loss(batch, w, table, cfg, lambdas=(0.0, 1.0)).value
    alpha = [[1.0 / c] * batch.size for _ in range(batch.size)]
    oracle = oracles.contrastive(batch.data, batch.labels, cfg.tau, m=cfg.m, alpha=alpha)
    assert got == pytest.approx(oracle, abs=1e-10)
    rescaled = sup_margin_con_loss(batch, MarginConfig(m=cfg.m, tau=cfg.tau * c)).value
    assert abs(got - rescaled) <= 1e-12


def test_caa_margin_con_matches_oracle(rng):
    batch, w, table = _parts(rng, n=5, d=4)
    cfg = MarginConfig()
    alpha = oracles.caa_alpha(batch.data, batch.labels, table.vectors, table.speaker_ids)
    expected = (0.4 * oracles.aam_softmax(batch.data, batch.labels, w.weights, cfg.m, cfg.s)
                + 0.6 * oracles.contrastive(batch.data, batch.labels, cfg.tau, m=cfg.m, alpha=alpha))
    got = caa_margin_con_loss(batch, w, table, cfg, lambdas=(0.4, 0.6))
    assert got.value == pytest.approx(expected, abs=1e-9)
    assert set(got.parts) == {"classification", "contrastive"}


def test_ablation_wiring(rng):
    batch, w, table = _parts(rng)
    cfg = MarginConfig()
    no_caa = caa_margin_con_loss(batch, w, table, cfg, (0.5, 0.5), attention=False)
    assert no_caa.parts["contrastive"] == sup_margin_con_loss(batch, cfg).value
    assert not np.any(no_caa.grad_class_vectors)
    no_margin = caa_margin_con_loss(batch, w, table, cfg, (0.5, 0.5), contrastive_margin=0.0)
    # classification keeps its margin
    assert no_margin.parts["classification"] == aam_softmax_loss(batch, w, cfg).value
    alpha = oracles.caa_alpha(batch.data, batch.labels, table.vectors, table.speaker_ids)
    expected = oracles.contrastive(batch.data, batch.labels, cfg.tau, m=0.0, alpha=alpha)
    assert no_margin.parts["contrastive"] == pytest.approx(expected, abs=1e-9)
    neither = caa_margin_con_loss(batch, w, table, cfg, (0.5, 0.5), attention=False,
                                  contrastive_margin=0.0)
    assert neither.value == 0.5 * aam_softmax_loss(batch, w, cfg).value + 0.5 * supcon_loss(batch, cfg.tau).value


def test_caa_margin_con_gradients_finite_difference(rng):
    batch, w, table = _parts(rng, n=4, d=6)
    cfg = MarginConfig()
    lam = (0.3, 0.9)
    rep = caa_margin_con_loss(batch, w, table, cfg, lam)

    def run(b=batch, ww=w, tt=table):
        return caa_margin_con_loss(b, ww, tt, cfg, lam)

    num_z = _fd_embeddings(lambda b: run(b=b), batch)
    num_w = numeric_gradient(lambda u: run(ww=ClassifierWeights(unit_rows(u))).value, w.weights)
    num_c = numeric_gradient(lambda u: run(tt=ClassVectorTable(u, range(4))).value, table.vectors)
    assert relative_error(rep.grad_embeddings, num_z) < 1e-4
    assert relative_error(rep.grad_classifier_weights, num_w) < 1e-4
    assert relative_error(rep.grad_class_vectors, num_c) < 1e-4


def test_negative_lambdas_rejected(rng):
    batch, w, table = _parts(rng)
    with pytest.raises(DataError):
        caa_margin_con_loss(batch, w, table, lambdas=(-1.0, 1.0))


def test_contrastive_term_alone_matches_combined(rng):
    batch, w, table = _parts(rng)
    alone = caa_contrastive_loss(batch, table)
    combined = caa_margin_con_loss(batch, w, table, lambdas=(0.0, 1.0))
    assert alone.value == combined.value
    np.testing.assert_array_equal(alone.grad_class_vectors, combined.grad_class_vectors)
