"""Multimodal fusion, answer heads, and the training losses.

Fusion is low-rank bilinear attention: each glimpse scores the guided state
columns against the image vector, pools them into one question summary, and
combines the two modalities through rank-limited projections.  Answer heads
are per-type two-layer perceptrons over the fused vector, scored with
per-answer sigmoids.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ConfigError
from .rng import xavier_uniform

PROB_FLOOR = 1e-7  # probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR]


class BilinearFusion:
    """Rank-``r`` bilinear attention between an image vector and state columns.

    Per glimpse: project both modalities to rank space, score every state
    column against the image, softmax the scores into column weights, pool
    the columns, and emit ``out @ (image_proj * pooled_proj)``.  Glimpse
    outputs are summed.
    """

    def __init__(self, rng, image_dim, state_dim, fused_dim, rank, glimpses,
                 dtype=np.float32, tag="fusion"):
        if glimpses < 1 or rank < 1:
            raise ConfigError(f"need at least one glimpse and rank 1, got g={glimpses}, r={rank}")
        self.image_dim = int(image_dim)
        self.state_dim = int(state_dim)
        self.fused_dim = int(fused_dim)
        self.rank = int(rank)
        self.glimpses = int(glimpses)
        self.dtype = np.dtype(dtype)
        self.tag = tag
        frng = rng.derive(tag)

        def mat(name, rows, cols):
            return Tensor(xavier_uniform(frng, rows, cols, dtype=self.dtype),
                          requires_grad=True, name=f"{tag}.{name}")

        self._glimpse_params = []
        for k in range(self.glimpses):
            self._glimpse_params.append({
                "att_image": mat(f"glimpse{k}.att_image", self.rank, self.image_dim),
                "att_state": mat(f"glimpse{k}.att_state", self.rank, self.state_dim),
                "att_probe": mat(f"glimpse{k}.att_probe", self.rank, 1),
                "pool_image": mat(f"glimpse{k}.pool_image", self.rank, self.image_dim),
                "pool_state": mat(f"glimpse{k}.pool_state", self.rank, self.state_dim),
                "out": mat(f"glimpse{k}.out", self.fused_dim, self.rank),
            })

    def parameters(self):
        params = {}
        for group in self._glimpse_params:
            for t in group.values():
                params[t.name] = t
        return params

    def fuse(self, image_vector, guided_states):
        """Combine a ``image_dim`` vector with ``state_dim x n`` columns."""
        if image_vector.data.ndim != 1 or image_vector.shape[0] != self.image_dim:
            raise ShapeError(
                f"image vector must have {self.image_dim} entries, got {tuple(image_vector.shape)}")
        if guided_states.data.ndim != 2 or guided_states.shape[0] != self.state_dim:
            raise ShapeError(
                f"guided states must have {self.state_dim} rows, got {tuple(guided_states.shape)}")
        n = guided_states.shape[1]
        image_col = ad.reshape(image_vector, (self.image_dim, 1))
        fused = None
        for group in self._glimpse_params:
            probe = ad.hadamard(ad.matmul(group["att_image"], image_col), group["att_probe"])
            scores = ad.matmul(ad.transpose(probe), ad.matmul(group["att_state"], guided_states))
            weights = ad.softmax(ad.reshape(scores, (n,)), axis=0)
            pooled = ad.matmul(guided_states, ad.reshape(weights, (n, 1)))
            joint = ad.hadamard(ad.matmul(group["pool_image"], image_col),
                                ad.matmul(group["pool_state"], pooled))
            glimpse_out = ad.matmul(group["out"], joint)
            fused = glimpse_out if fused is None else fused + glimpse_out
        return ad.reshape(fused, (self.fused_dim,))


class ClassifierHead:
    """Two-layer perceptron from the fused vector to per-answer scores."""

    def __init__(self, rng, in_dim, hidden_dim, n_answers, dtype=np.float32, tag="head"):
        if n_answers < 1:
            raise ConfigError(f"{tag}: need at least one candidate answer")
        self.in_dim = int(in_dim)
        self.hidden_dim = int(hidden_dim)
        self.n_answers = int(n_answers)
        self.dtype = np.dtype(dtype)
        self.tag = tag
        hrng = rng.derive(tag)
        self.hidden_w = Tensor(xavier_uniform(hrng, self.hidden_dim, self.in_dim, dtype=self.dtype),
                               requires_grad=True, name=f"{tag}.hidden.weight")
        self.hidden_b = Tensor(np.zeros((self.hidden_dim, 1), dtype=self.dtype),
                               requires_grad=True, name=f"{tag}.hidden.bias")
        self.out_w = Tensor(xavier_uniform(hrng, self.n_answers, self.hidden_dim, dtype=self.dtype),
                            requires_grad=True, name=f"{tag}.out.weight")
        self.out_b = Tensor(np.zeros((self.n_answers, 1), dtype=self.dtype),
                            requires_grad=True, name=f"{tag}.out.bias")

    def parameters(self):
        return {t.name: t
                for t in (self.hidden_w, self.hidden_b, self.out_w, self.out_b)}

    def logits(self, fused):
        if fused.data.ndim != 1 or fused.shape[0] != self.in_dim:
            raise ShapeError(
                f"{self.tag}: expected a fused vector of {self.in_dim} entries, "
                f"got {tuple(fused.shape)}")
        col = ad.reshape(fused, (self.in_dim, 1))
        hidden = ad.relu(ad.matmul(self.hidden_w, col) + self.hidden_b)
        return ad.reshape(ad.matmul(self.out_w, hidden) + self.out_b, (self.n_answers,))


class AnswerDistribution:
    """Per-answer sigmoid probabilities plus the argmax index."""

    __slots__ = ("tensor", "predicted")

    def __init__(self, tensor):
        if tensor.data.ndim != 1:
            raise ShapeError(f"probabilities must be a vector, got shape {tuple(tensor.shape)}")
        self.tensor = tensor
        # np.argmax returns the first maximum, which is the lowest index
        self.predicted = int(np.argmax(tensor.data))

    @property
    def probabilities(self):
        return self.tensor.data

    def __len__(self):
        return self.tensor.shape[0]

    def __repr__(self):
        return f"AnswerDistribution(n={len(self)}, predicted={self.predicted})"


def classify(fused, head):
    return AnswerDistribution(ad.sigmoid(head.logits(fused)))


def binary_cross_entropy(probabilities, targets):
    """Summed per-slot cross entropy of sigmoid scores against 0/1 targets.

    Probabilities are clamped away from {0, 1} before the logs.
    """
    targets = np.asarray(targets, dtype=probabilities.dtype.type)
    if targets.shape != tuple(probabilities.shape):
        raise ShapeError(
            f"targets shaped {targets.shape} against predictions {tuple(probabilities.shape)}")
    if targets.size and (targets.min() < 0 or targets.max() > 1):
        raise ValueError("targets must lie in [0, 1]")
    p = ad.clip(probabilities, PROB_FLOOR, 1.0 - PROB_FLOOR)
    positive = ad.hadamard(Tensor(targets), ad.log(p))
    negative = ad.hadamard(Tensor(1.0 - targets), ad.log(ad.sadd(ad.neg(p), 1.0)))
    return ad.neg(ad.sum_all(positive + negative))


def _mean_bce(predictions, targets, label):
    if len(predictions) != len(targets):
        raise ShapeError(
            f"{label}: {len(predictions)} predictions against {len(targets)} targets")
    if not predictions:
        return None
    total = None
    for dist, target in zip(predictions, targets):
        tensor = dist.tensor if isinstance(dist, AnswerDistribution) else dist
        term = binary_cross_entropy(tensor, target)
        total = term if total is None else total + term
    return ad.smul(total, 1.0 / len(predictions))


def classification_loss(closed_preds, closed_targets, open_preds, open_targets):
    """Per-type cross entropy, averaged over samples, summed across types.

    A batch with only one answer type gets exactly zero from the absent head.
    """
    closed = _mean_bce(closed_preds, closed_targets, "closed")
    opened = _mean_bce(open_preds, open_targets, "open")
    if closed is None and opened is None:
        return Tensor(np.zeros(()))
    if closed is None:
        return opened
    if opened is None:
        return closed
    return closed + opened


def iqc_loss(visual_attention, text_attention, detach=""):
    """Squared distance between the two attention views over the same words.

    This is the image-question complementary term: it pulls the visual view
    and the text view of word importance toward each other.  ``detach``
    optionally stops gradient into one branch ("visual" or "text").
    """
    a_m = getattr(visual_attention, "tensor", visual_attention)
    a_q = getattr(text_attention, "tensor", text_attention)
    if a_m.shape != a_q.shape:
        raise ShapeError(
            f"attention lengths disagree: {tuple(a_m.shape)} vs {tuple(a_q.shape)}")
    if detach == "visual":
        a_m = ad.detach(a_m)
    elif detach == "text":
        a_q = ad.detach(a_q)
    elif detach:
        raise ConfigError(f"detach must be '', 'visual', or 'text', got {detach!r}")
    diff = a_m - a_q
    return ad.sum_all(ad.hadamard(diff, diff))


class LossBreakdown:
    """Float view of one loss evaluation; total recomputed as l_c + gamma*l_mq."""

    __slots__ = ("l_c", "l_mq", "gamma", "total")

    def __init__(self, l_c, l_mq, gamma):
        self.l_c = float(l_c)
        self.l_mq = float(l_mq)
        self.gamma = float(gamma)
        self.total = self.l_c + self.gamma * self.l_mq

    def to_dict(self):
        return {"l_c": self.l_c, "l_mq": self.l_mq, "gamma": self.gamma, "total": self.total}

    def __repr__(self):
        return (f"LossBreakdown(l_c={self.l_c:.6f}, l_mq={self.l_mq:.6f}, "
                f"gamma={self.gamma}, total={self.total:.6f})")


def composite_loss(l_c, l_mq, gamma):
    """Weighted sum of the two loss terms.

    Returns the graph tensor to backpropagate plus a float breakdown.  At
    ``gamma == 0`` the returned tensor IS ``l_c``, so gradients are
    bit-identical to classification-only training.
    """
    if gamma < 0:
        raise ConfigError(f"gamma must be nonnegative, got {gamma}")
    if gamma == 0:
        total = l_c
    else:
        total = l_c + ad.smul(l_mq, float(gamma))
    return total, LossBreakdown(l_c.item(), l_mq.item(), gamma)
