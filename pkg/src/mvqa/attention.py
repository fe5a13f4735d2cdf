"""Word-level attention computed from two views of the question.

The text view scores each word from its own embedding and recurrent state
(a gated projection squeezed to one score per word).  The visual view scores
each word by the dot product of its recurrent state with a projected image
vector.  Both views end in a softmax over words, so each yields a
distribution on the question's token positions.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import xavier_uniform

TEXT_VIEW = "W2T"
VISUAL_VIEW = "I2Q"
_VIEWS = (TEXT_VIEW, VISUAL_VIEW)


class AttentionWeights:
    """A distribution over token positions, tagged with the view that made it.

    Wraps the graph tensor so downstream losses can differentiate through
    the weights; ``values`` exposes the plain numpy vector.
    """

    __slots__ = ("tensor", "view")

    def __init__(self, tensor, view):
        if view not in _VIEWS:
            raise ValueError(f"view must be one of {_VIEWS}, got {view!r}")
        if tensor.data.ndim != 1:
            raise ShapeError(f"attention weights must be a vector, got shape {tuple(tensor.shape)}")
        self.tensor = tensor
        self.view = view

    @property
    def values(self):
        return self.tensor.data

    def __len__(self):
        return self.tensor.shape[0]

    def validate(self, tolerance=1e-6):
        """Check the simplex invariant: nonnegative entries summing to one."""
        v = self.values
        if np.any(v < 0) or abs(float(v.sum()) - 1.0) > tolerance:
            raise ValueError(f"{self.view} weights leave the simplex: sum={float(v.sum())!r}")
        return self

    def __repr__(self):
        return f"AttentionWeights(view={self.view!r}, n={len(self)})"


def _masked_softmax(scores, true_length):
    """Softmax over the first ``true_length`` entries, zeros elsewhere."""
    n = scores.shape[0]
    if true_length is None or true_length >= n:
        return ad.softmax(scores, axis=0)
    if true_length < 1:
        raise ShapeError(f"cannot mask all {n} positions; need at least one live token")
    live = ad.softmax(ad.narrow(scores, 0, 0, true_length), axis=0)
    zeros = Tensor(np.zeros(n - true_length, dtype=scores.dtype.type))
    return ad.concat(live, zeros, axis=0)


class WordTextWeights:
    """Parameters of the text-view scorer: two gate projections and a squeeze."""

    def __init__(self, rng, embed_dim, state_dim, dtype=np.float32):
        self.embed_dim = int(embed_dim)
        self.state_dim = int(state_dim)
        self.dtype = np.dtype(dtype)
        wrng = rng.derive("attention.text")
        joint = self.embed_dim + self.state_dim
        self.gate_tanh = Tensor(xavier_uniform(wrng, self.state_dim, joint, dtype=self.dtype),
                                requires_grad=True, name="attention.text.gate_tanh.weight")
        self.gate_sigmoid = Tensor(xavier_uniform(wrng, self.state_dim, joint, dtype=self.dtype),
                                   requires_grad=True, name="attention.text.gate_sigmoid.weight")
        self.squeeze = Tensor(xavier_uniform(wrng, 1, self.state_dim, dtype=self.dtype),
                              requires_grad=True, name="attention.text.squeeze.weight")

    def parameters(self):
        return {t.name: t for t in (self.gate_tanh, self.gate_sigmoid, self.squeeze)}


class ImageQuestionProjection:
    """Small perceptron aligning the image vector with the state dimension."""

    def __init__(self, rng, image_dim, state_dim, hidden_dim=None, dtype=np.float32):
        self.image_dim = int(image_dim)
        self.state_dim = int(state_dim)
        self.hidden_dim = int(hidden_dim) if hidden_dim is not None else self.state_dim
        self.dtype = np.dtype(dtype)
        prng = rng.derive("attention.visual")
        self.hidden_w = Tensor(xavier_uniform(prng, self.hidden_dim, self.image_dim, dtype=self.dtype),
                               requires_grad=True, name="attention.visual.hidden.weight")
        self.hidden_b = Tensor(np.zeros((self.hidden_dim, 1), dtype=self.dtype),
                               requires_grad=True, name="attention.visual.hidden.bias")
        self.out_w = Tensor(xavier_uniform(prng, self.state_dim, self.hidden_dim, dtype=self.dtype),
                            requires_grad=True, name="attention.visual.out.weight")
        self.out_b = Tensor(np.zeros((self.state_dim, 1), dtype=self.dtype),
                            requires_grad=True, name="attention.visual.out.bias")

    def parameters(self):
        return {t.name: t
                for t in (self.hidden_w, self.hidden_b, self.out_w, self.out_b)}

    def project(self, image_vector):
        if image_vector.data.ndim != 1 or image_vector.shape[0] != self.image_dim:
            raise ShapeError(
                f"expected an image vector of {self.image_dim} entries, got {tuple(image_vector.shape)}")
        col = ad.reshape(image_vector, (self.image_dim, 1))
        hidden = ad.relu(ad.matmul(self.hidden_w, col) + self.hidden_b)
        return ad.matmul(self.out_w, hidden) + self.out_b


def word_to_text_attention(word_features, states, weights, true_length=None):
    """Score words from their joint embedding/state columns.

    The two feature matrices are stacked per word, pushed through a
    tanh-times-sigmoid gate, squeezed to one score per word, and normalized.
    """
    if word_features.shape[1] != states.shape[1]:
        raise ShapeError(
            f"word features have {word_features.shape[1]} columns, states {states.shape[1]}")
    joint = ad.concat(word_features, states, axis=0)
    gated = ad.hadamard(ad.tanh(ad.matmul(weights.gate_tanh, joint)),
                        ad.sigmoid(ad.matmul(weights.gate_sigmoid, joint)))
    scores = ad.reshape(ad.matmul(weights.squeeze, gated), (states.shape[1],))
    return AttentionWeights(_masked_softmax(scores, true_length), TEXT_VIEW)


def image_to_question_attention(states, image_vector, projection, true_length=None):
    """Score words by agreement of their state with the projected image."""
    if states.shape[0] != projection.state_dim:
        raise ShapeError(
            f"states have {states.shape[0]} rows, projection expects {projection.state_dim}")
    aligned = projection.project(image_vector)
    scores = ad.reshape(ad.matmul(ad.transpose(states), aligned), (states.shape[1],))
    return AttentionWeights(_masked_softmax(scores, true_length), VISUAL_VIEW)


def apply_visual_guidance(states, attention):
    """Scale each state column by its attention weight."""
    weights = attention.tensor if isinstance(attention, AttentionWeights) else attention
    if states.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"states have {states.shape[1]} columns but {weights.shape[0]} weights were given")
    return ad.scale_columns(states, weights)
