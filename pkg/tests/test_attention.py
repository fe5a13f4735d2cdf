"""Attention tests: hand-evaluated scalar oracles for both views, simplex
and symmetry properties, and the column-scaling guidance step."""

import math

import numpy as np
import pytest

import mvqa.autodiff as ad
from mvqa.autodiff import ShapeError, Tensor
from mvqa.attention import (
    AttentionWeights,
    ImageQuestionProjection,
    WordTextWeights,
    apply_visual_guidance,
    image_to_question_attention,
    word_to_text_attention,
)
from mvqa.rng import Rng


def t64(data):
    return Tensor(np.asarray(data, dtype=np.float64))


def softmax_oracle(scores):
    exps = [math.exp(s - max(scores)) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def text_weights(embed_dim=1, state_dim=1, dtype=np.float64):
    return WordTextWeights(Rng(0), embed_dim, state_dim, dtype=dtype)


def visual_projection(image_dim=2, state_dim=2, hidden_dim=1, dtype=np.float64):
    return ImageQuestionProjection(Rng(0), image_dim, state_dim,
                                   hidden_dim=hidden_dim, dtype=dtype)


class TestWordTextAttention:
    def test_zero_weights_give_uniform(self):
        w = text_weights(embed_dim=3, state_dim=4)
        for p in w.parameters().values():
            p.data[...] = 0.0
        d = t64(np.random.default_rng(0).standard_normal((3, 6)))
        q = t64(np.random.default_rng(1).standard_normal((4, 6)))
        a = word_to_text_attention(d, q, w)
        np.testing.assert_allclose(a.values, np.full(6, 1 / 6), atol=1e-12)

    def test_single_word_is_certain(self):
        w = text_weights(embed_dim=2, state_dim=3)
        a = word_to_text_attention(t64(np.ones((2, 1))), t64(np.ones((3, 1))), w)
        np.testing.assert_allclose(a.values, [1.0], atol=1e-12)

    def test_hand_scalar_oracle(self):
        """Two words at unit widths, every weight set by hand."""
        w = text_weights()
        w.gate_tanh.data[...] = np.array([[0.2, -0.5]])
        w.gate_sigmoid.data[...] = np.array([[0.7, 0.3]])
        w.squeeze.data[...] = np.array([[1.4]])
        d_row = [0.3, -0.6]
        q_row = [0.4, 0.1]

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        scores = []
        for dv, qv in zip(d_row, q_row):
            gated = math.tanh(0.2 * dv - 0.5 * qv) * sig(0.7 * dv + 0.3 * qv)
            scores.append(1.4 * gated)
        want = softmax_oracle(scores)

        a = word_to_text_attention(t64([d_row]), t64([q_row]), w)
        np.testing.assert_allclose(a.values, want, atol=1e-6)
        assert a.view == "W2T"

    def test_column_count_mismatch(self):
        w = text_weights(embed_dim=2, state_dim=2)
        with pytest.raises(ShapeError):
            word_to_text_attention(t64(np.zeros((2, 3))), t64(np.zeros((2, 4))), w)

    def test_masked_positions_get_zero_weight(self):
        w = text_weights(embed_dim=2, state_dim=2)
        d = t64(np.random.default_rng(2).standard_normal((2, 5)))
        q = t64(np.random.default_rng(3).standard_normal((2, 5)))
        a = word_to_text_attention(d, q, w, true_length=3)
        np.testing.assert_array_equal(a.values[3:], [0.0, 0.0])
        assert abs(a.values.sum() - 1.0) < 1e-6

    def test_mask_needs_a_live_token(self):
        w = text_weights(embed_dim=2, state_dim=2)
        with pytest.raises(ShapeError):
            word_to_text_attention(t64(np.zeros((2, 4))), t64(np.zeros((2, 4))), w,
                                   true_length=0)


class TestImageQuestionAttention:
    def test_zero_projection_gives_uniform(self):
        proj = visual_projection(image_dim=3, state_dim=4)
        for p in proj.parameters().values():
            p.data[...] = 0.0
        q = t64(np.random.default_rng(4).standard_normal((4, 7)))
        a = image_to_question_attention(q, t64(np.ones(3)), proj)
        np.testing.assert_allclose(a.values, np.full(7, 1 / 7), atol=1e-12)

    def test_identical_columns_give_uniform(self):
        proj = visual_projection(image_dim=2, state_dim=3)
        col = np.random.default_rng(5).standard_normal((3, 1))
        q = t64(np.repeat(col, 5, axis=1))
        a = image_to_question_attention(q, t64([0.3, -0.8]), proj)
        np.testing.assert_allclose(a.values, np.full(5, 0.2), atol=1e-9)

    def test_hand_oracle(self):
        """Unit-width hidden layer so the perceptron is scalar arithmetic."""
        proj = visual_projection()
        proj.hidden_w.data[...] = np.array([[0.5, 0.25]])
        proj.hidden_b.data[...] = np.array([[0.05]])
        proj.out_w.data[...] = np.array([[1.0], [-2.0]])
        proj.out_b.data[...] = np.array([[0.1], [0.2]])
        v = [2.0, -1.0]

        hidden = max(0.0, 0.5 * v[0] + 0.25 * v[1] + 0.05)
        aligned = [1.0 * hidden + 0.1, -2.0 * hidden + 0.2]
        # states are the standard basis, so scores are just `aligned`
        want = softmax_oracle(aligned)

        a = image_to_question_attention(t64(np.eye(2)), t64(v), proj)
        np.testing.assert_allclose(a.values, want, atol=1e-6)
        assert a.view == "I2Q"

    def test_permutation_equivariance(self):
        proj = visual_projection(image_dim=3, state_dim=4)
        rng = np.random.default_rng(6)
        q = rng.standard_normal((4, 6))
        v = t64(rng.standard_normal(3))
        perm = rng.permutation(6)
        a = image_to_question_attention(t64(q), v, proj).values
        a_perm = image_to_question_attention(t64(q[:, perm]), v, proj).values
        np.testing.assert_allclose(a_perm, a[perm], rtol=1e-10)

    def test_score_shift_invariance(self):
        """Adding a constant to every word's score leaves the weights alone."""
        proj = visual_projection(image_dim=2, state_dim=3)
        rng = np.random.default_rng(7)
        q = rng.standard_normal((3, 5))
        v = t64(rng.standard_normal(2))
        aligned = proj.project(t64(v.data)).data[:, 0]
        base = ad.softmax(t64(q.T @ aligned), axis=0).data
        shifted = ad.softmax(t64(q.T @ aligned + 9.0), axis=0).data
        attn = image_to_question_attention(t64(q), v, proj).values
        np.testing.assert_allclose(attn, base, atol=1e-12)
        np.testing.assert_allclose(shifted, base, atol=1e-6)

    def test_masking(self):
        proj = visual_projection(image_dim=2, state_dim=3)
        q = t64(np.random.default_rng(8).standard_normal((3, 6)))
        a = image_to_question_attention(q, t64([1.0, 2.0]), proj, true_length=2)
        np.testing.assert_array_equal(a.values[2:], np.zeros(4))
        assert abs(a.values.sum() - 1.0) < 1e-6

    def test_dimension_errors(self):
        proj = visual_projection(image_dim=2, state_dim=3)
        with pytest.raises(ShapeError):
            image_to_question_attention(t64(np.zeros((4, 5))), t64([1.0, 2.0]), proj)
        with pytest.raises(ShapeError):
            image_to_question_attention(t64(np.zeros((3, 5))), t64([1.0, 2.0, 3.0]), proj)


class TestSimplexProperty:
    def test_both_views_stay_on_simplex(self):
        rng = np.random.default_rng(9)
        for case in range(200):
            n = int(rng.integers(1, 16))
            d_h = int(rng.integers(1, 6))
            d_s = int(rng.integers(1, 6))
            d_k = int(rng.integers(1, 6))
            seed = int(rng.integers(0, 2**31))
            w = WordTextWeights(Rng(seed), d_h, d_s, dtype=np.float32)
            proj = ImageQuestionProjection(Rng(seed), d_k, d_s, dtype=np.float32)
            d = Tensor(rng.uniform(-20, 20, (d_h, n)).astype(np.float32))
            q = Tensor(rng.uniform(-20, 20, (d_s, n)).astype(np.float32))
            v = Tensor(rng.uniform(-20, 20, d_k).astype(np.float32))
            for a in (word_to_text_attention(d, q, w),
                      image_to_question_attention(q, v, proj)):
                a.validate(tolerance=1e-6)

    def test_validate_rejects_bad_weights(self):
        a = AttentionWeights(t64([0.5, 0.4]), "W2T")
        with pytest.raises(ValueError):
            a.validate()


class TestVisualGuidance:
    def test_uniform_halves_two_columns(self):
        q = t64([[2.0, 4.0], [6.0, 8.0]])
        out = apply_visual_guidance(q, t64([0.5, 0.5]))
        np.testing.assert_array_equal(out.data, q.data / 2)

    def test_definition_case(self):
        q = t64([[1.0, 2.0], [3.0, 4.0]])
        a = AttentionWeights(t64([0.25, 0.75]), "I2Q")
        out = apply_visual_guidance(q, a)
        np.testing.assert_array_equal(out.data, [[0.25, 1.5], [0.75, 3.0]])

    def test_matches_per_column_loop_bit_exactly(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            d = int(rng.integers(1, 8))
            n = int(rng.integers(1, 8))
            q = rng.standard_normal((d, n)).astype(np.float32)
            a = rng.uniform(0, 1, n).astype(np.float32)
            want = np.empty_like(q)
            for j in range(n):
                want[:, j] = q[:, j] * a[j]
            got = apply_visual_guidance(Tensor(q), Tensor(a)).data
            np.testing.assert_array_equal(got, want)

    def test_linear_in_states(self):
        rng = np.random.default_rng(11)
        q1 = rng.standard_normal((3, 4))
        q2 = rng.standard_normal((3, 4))
        a = t64(rng.uniform(0, 1, 4))
        lhs = apply_visual_guidance(t64(q1 + 2 * q2), a).data
        rhs = apply_visual_guidance(t64(q1), a).data + 2 * apply_visual_guidance(t64(q2), a).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    def test_column_norm_scaling(self):
        rng = np.random.default_rng(12)
        q = rng.standard_normal((5, 6))
        a = rng.uniform(0, 1, 6)
        out = apply_visual_guidance(t64(q), t64(a)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=0),
                                   a * np.linalg.norm(q, axis=0), rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            apply_visual_guidance(t64(np.zeros((2, 3))), t64(np.zeros(4)))


class TestAttentionWeightsType:
    def test_view_tag_required(self):
        with pytest.raises(ValueError):
            AttentionWeights(t64([1.0]), "sideways")

    def test_vector_required(self):
        with pytest.raises(ShapeError):
            AttentionWeights(t64(np.zeros((2, 2))), "W2T")
