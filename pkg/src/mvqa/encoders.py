"""Question and image feature extraction.

The question side turns raw text into two aligned feature matrices: a
word-embedding matrix (one column per token) and a recurrent-state matrix
(the hidden state after each token).  The image side runs two small
convolutional branches over the same image and concatenates their
projections into a single feature vector.
"""

import string

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import xavier_uniform

PAD_ID = 0
UNK_ID = 1

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def tokenize(text):
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class VocabularyError(Exception):
    pass


class Vocabulary:
    """Token-to-id map with reserved padding and unknown-word ids."""

    PAD = "<pad>"
    UNK = "<unk>"

    def __init__(self, tokens=()):
        self._tokens = [self.PAD, self.UNK]
        self._ids = {self.PAD: PAD_ID, self.UNK: UNK_ID}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def from_texts(cls, texts):
        vocab = cls()
        for text in texts:
            for tok in tokenize(text):
                vocab.add(tok)
        return vocab

    def add(self, token):
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def id_of(self, token):
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx):
        if not 0 <= idx < len(self._tokens):
            raise VocabularyError(f"id {idx} outside vocabulary of {len(self._tokens)} tokens")
        return self._tokens[idx]

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def tokens(self):
        return list(self._tokens)

    def to_list(self):
        return list(self._tokens)

    @classmethod
    def from_list(cls, tokens):
        if tokens[:2] != [cls.PAD, cls.UNK]:
            raise VocabularyError("serialized vocabulary must start with the pad and unknown tokens")
        return cls(tokens[2:])


class TokenSequence:
    """Fixed-length id sequence plus the count of real (pre-padding) tokens."""

    __slots__ = ("ids", "true_length")

    def __init__(self, ids, true_length):
        self.ids = tuple(int(i) for i in ids)
        self.true_length = int(true_length)
        if self.true_length > len(self.ids):
            raise VocabularyError(
                f"true_length {self.true_length} exceeds sequence length {len(self.ids)}")

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        return (isinstance(other, TokenSequence)
                and self.ids == other.ids and self.true_length == other.true_length)

    def __repr__(self):
        return f"TokenSequence(ids={self.ids}, true_length={self.true_length})"


def tokenize_and_pad(text, vocab, n):
    """Encode ``text`` as exactly ``n`` ids: truncate beyond n, pad below."""
    if n < 1:
        raise VocabularyError(f"sequence length must be at least 1, got {n}")
    words = tokenize(text)[:n]
    ids = [vocab.id_of(w) for w in words]
    true_length = len(ids)
    ids.extend([PAD_ID] * (n - true_length))
    return TokenSequence(ids, true_length)


def load_embedding_vectors(path):
    """Read a text file of ``token x1 x2 ... xd`` lines into a dict.

    All lines must carry the same number of floats; the dimension is taken
    from the first line.
    """
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise VocabularyError(f"{path}:{lineno}: no floats after token {token!r}")
            elif len(values) != dim:
                raise VocabularyError(
                    f"{path}:{lineno}: expected {dim} floats, found {len(values)}")
            vectors[token] = np.array([float(v) for v in values], dtype=np.float64)
    if dim is None:
        raise VocabularyError(f"{path}: empty embedding file")
    return vectors


class QuestionEncoder:
    """Embedding table plus a gated recurrent encoder.

    Produces, per question, a ``embed_dim x n`` matrix of word vectors and a
    ``state_dim x n`` matrix whose column t is the recurrent state after
    consuming word t (zero initial state).  The padding row of the embedding
    table is pinned to zero; ``apply_constraints`` re-zeroes it after
    optimizer updates.
    """

    def __init__(self, vocab, embed_dim, state_dim, n_tokens, rng,
                 dtype=np.float32, pretrained=None, stop_at_length=False):
        self.vocab = vocab
        self.embed_dim = int(embed_dim)
        self.state_dim = int(state_dim)
        self.n_tokens = int(n_tokens)
        self.dtype = np.dtype(dtype)
        self.stop_at_length = bool(stop_at_length)

        init_rng = rng.derive("question.embedding")
        bound = float(np.sqrt(3.0 / self.embed_dim))
        table = init_rng.uniform(-bound, bound, (len(vocab), self.embed_dim), dtype=self.dtype)
        if pretrained:
            for idx, token in enumerate(vocab.tokens()):
                vec = pretrained.get(token)
                if vec is None:
                    continue
                if vec.shape != (self.embed_dim,):
                    raise VocabularyError(
                        f"embedding for {token!r} has {vec.shape[0]} entries, need {self.embed_dim}")
                table[idx] = vec.astype(self.dtype)
        table[PAD_ID] = 0.0
        self.embedding = Tensor(table, requires_grad=True, name="question.embedding.table")

        gru_rng = rng.derive("question.gru")
        d_h, d_s = self.embed_dim, self.state_dim

        def gate(tag):
            w = Tensor(xavier_uniform(gru_rng, d_s, d_h, dtype=self.dtype),
                       requires_grad=True, name=f"question.gru.{tag}.input_weight")
            u = Tensor(xavier_uniform(gru_rng, d_s, d_s, dtype=self.dtype),
                       requires_grad=True, name=f"question.gru.{tag}.state_weight")
            b = Tensor(np.zeros((d_s, 1), dtype=self.dtype),
                       requires_grad=True, name=f"question.gru.{tag}.bias")
            return w, u, b

        self.update_w, self.update_u, self.update_b = gate("update")
        self.reset_w, self.reset_u, self.reset_b = gate("reset")
        self.cand_w, self.cand_u, self.cand_b = gate("candidate")

    def parameters(self):
        params = {self.embedding.name: self.embedding}
        for t in (self.update_w, self.update_u, self.update_b,
                  self.reset_w, self.reset_u, self.reset_b,
                  self.cand_w, self.cand_u, self.cand_b):
            params[t.name] = t
        return params

    def apply_constraints(self):
        self.embedding.data[PAD_ID] = 0.0

    def embed(self, tokens):
        """Word-vector matrix: column i is the row for ``tokens.ids[i]``."""
        if len(tokens) != self.n_tokens:
            raise ShapeError(f"expected {self.n_tokens} ids, got {len(tokens)}")
        bad = [i for i in tokens.ids if not 0 <= i < len(self.vocab)]
        if bad:
            raise VocabularyError(f"token id {bad[0]} outside vocabulary of {len(self.vocab)}")
        return ad.embedding_lookup(self.embedding, np.array(tokens.ids, dtype=np.int64))

    def _gru_step(self, x, h):
        update = ad.sigmoid(ad.matmul(self.update_w, x) + ad.matmul(self.update_u, h) + self.update_b)
        reset = ad.sigmoid(ad.matmul(self.reset_w, x) + ad.matmul(self.reset_u, h) + self.reset_b)
        candidate = ad.tanh(ad.matmul(self.cand_w, x)
                            + ad.matmul(self.cand_u, ad.hadamard(reset, h))
                            + self.cand_b)
        return h + ad.hadamard(update, candidate - h)

    def gru_encode(self, word_features, true_length=None):
        """Run the recurrence over columns; column t of the result is state t."""
        d, n = word_features.shape[0], word_features.shape[1]
        if d != self.embed_dim:
            raise ShapeError(f"expected {self.embed_dim} feature rows, got {d}")
        limit = n if (true_length is None or not self.stop_at_length) else int(true_length)
        h = Tensor(np.zeros((self.state_dim, 1), dtype=self.dtype))
        states = None
        for t in range(n):
            if t < limit:
                x = ad.narrow(word_features, 1, t, t + 1)
                h = self._gru_step(x, h)
            states = h if states is None else ad.concat(states, h, axis=1)
        return states

    def encode(self, tokens):
        word_features = self.embed(tokens)
        states = self.gru_encode(word_features, true_length=tokens.true_length)
        return word_features, states


def _min_extent(layers):
    # Smallest input extent that survives `layers` valid 3x3 stride-2 convs.
    extent = 3
    for _ in range(layers - 1):
        extent = 2 * extent + 1
    return extent


def resize_nearest(image, height, width):
    """Nearest-neighbor resample of a ``c x h x w`` array."""
    c, h, w = image.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return image[:, rows[:, None], cols[None, :]]


class ImageEncoder:
    """Two convolutional branches concatenated into one feature vector.

    The gradient-based branch stacks stride-2 convolutions and mean-pools to
    a channel vector, so it accepts any input at or above its minimum
    extent.  The reconstruction-style branch runs conv + max-pool stages over
    a fixed input size (images are resampled to it first) and flattens.
    Each branch projects to half of ``feature_dim``.
    """

    def __init__(self, rng, feature_dim=128, in_channels=1,
                 maml_layers=4, maml_channels=64,
                 cdae_layers=2, cdae_channels=32, cdae_size=(128, 128),
                 dtype=np.float32):
        if feature_dim % 2:
            raise ShapeError(f"feature_dim must be even to split across branches, got {feature_dim}")
        self.feature_dim = int(feature_dim)
        self.in_channels = int(in_channels)
        self.maml_layers = int(maml_layers)
        self.cdae_size = (int(cdae_size[0]), int(cdae_size[1]))
        self.dtype = np.dtype(dtype)
        half = self.feature_dim // 2

        mrng = rng.derive("image.maml")
        self._maml_convs = []
        channels = self.in_channels
        for i in range(self.maml_layers):
            fan_in = channels * 9
            kern = Tensor(xavier_uniform(mrng, maml_channels, fan_in,
                                         shape=(maml_channels, channels, 3, 3), dtype=self.dtype),
                          requires_grad=True, name=f"image.maml.conv{i}.kernels")
            bias = Tensor(np.zeros(maml_channels, dtype=self.dtype),
                          requires_grad=True, name=f"image.maml.conv{i}.bias")
            self._maml_convs.append((kern, bias))
            channels = maml_channels
        self.maml_proj_w = Tensor(xavier_uniform(mrng, half, channels, dtype=self.dtype),
                                  requires_grad=True, name="image.maml.proj.weight")
        self.maml_proj_b = Tensor(np.zeros((half, 1), dtype=self.dtype),
                                  requires_grad=True, name="image.maml.proj.bias")

        crng = rng.derive("image.cdae")
        self._cdae_convs = []
        channels = self.in_channels
        extent_h, extent_w = self.cdae_size
        for i in range(cdae_layers):
            fan_in = channels * 9
            kern = Tensor(xavier_uniform(crng, cdae_channels, fan_in,
                                         shape=(cdae_channels, channels, 3, 3), dtype=self.dtype),
                          requires_grad=True, name=f"image.cdae.conv{i}.kernels")
            bias = Tensor(np.zeros(cdae_channels, dtype=self.dtype),
                          requires_grad=True, name=f"image.cdae.conv{i}.bias")
            self._cdae_convs.append((kern, bias))
            channels = cdae_channels
            extent_h = (extent_h - 3 + 1) // 2  # conv (stride 1, valid) then 2x2 max-pool
            extent_w = (extent_w - 3 + 1) // 2
            if extent_h < 1 or extent_w < 1:
                raise ShapeError(
                    f"cdae input {self.cdae_size} too small for {cdae_layers} conv/pool stages")
        flat = channels * extent_h * extent_w
        self._cdae_flat = flat
        self.cdae_proj_w = Tensor(xavier_uniform(crng, half, flat, dtype=self.dtype),
                                  requires_grad=True, name="image.cdae.proj.weight")
        self.cdae_proj_b = Tensor(np.zeros((half, 1), dtype=self.dtype),
                                  requires_grad=True, name="image.cdae.proj.bias")

    def parameters(self):
        params = {}
        for kern, bias in self._maml_convs + self._cdae_convs:
            params[kern.name] = kern
            params[bias.name] = bias
        for t in (self.maml_proj_w, self.maml_proj_b, self.cdae_proj_w, self.cdae_proj_b):
            params[t.name] = t
        return params

    def _check_image(self, image):
        arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=self.dtype)
        if arr.ndim != 3 or arr.shape[0] != self.in_channels:
            raise ShapeError(
                f"expected a {self.in_channels} x h x w image, got shape {tuple(arr.shape)}")
        minimum = _min_extent(self.maml_layers)
        if arr.shape[1] < minimum or arr.shape[2] < minimum:
            raise ShapeError(
                f"image {arr.shape[1]}x{arr.shape[2]} below the {minimum}x{minimum} minimum "
                f"for {self.maml_layers} stride-2 layers")
        return arr

    def _maml_branch(self, arr):
        x = Tensor(arr)
        for kern, bias in self._maml_convs:
            x = ad.relu(ad.conv2d(x, kern, bias, stride=2))
        pooled = ad.reshape(ad.meanpool(x), (x.shape[0], 1))
        return ad.matmul(self.maml_proj_w, pooled) + self.maml_proj_b

    def _cdae_branch(self, arr):
        resized = resize_nearest(arr, *self.cdae_size)
        x = Tensor(np.ascontiguousarray(resized))
        for kern, bias in self._cdae_convs:
            x = ad.maxpool2d(ad.relu(ad.conv2d(x, kern, bias, stride=1)), 2)
        flat = ad.reshape(x, (self._cdae_flat, 1))
        return ad.matmul(self.cdae_proj_w, flat) + self.cdae_proj_b

    def encode(self, image):
        """Map one image to a ``feature_dim``-long vector."""
        arr = self._check_image(image)
        half = self.feature_dim // 2
        maml = ad.reshape(self._maml_branch(arr), (half,))
        cdae = ad.reshape(self._cdae_branch(arr), (half,))
        return ad.concat(maml, cdae, axis=0)
