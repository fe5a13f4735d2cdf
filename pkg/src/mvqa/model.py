"""The assembled network.

One forward pass takes a token sequence, an image array, and the sample's
answer type.  The question encoder yields word features and recurrent
states; both attention views score the words; the guided states and the
image vector are fused; and the answer head for that type scores every
candidate answer.  Closed-ended and open-ended samples run through separate
fusion and head parameters (type-conditioned routing), sharing the encoders
and attention weights.
"""

from collections import OrderedDict

import numpy as np

from .attention import (
    ImageQuestionProjection,
    WordTextWeights,
    apply_visual_guidance,
    image_to_question_attention,
    word_to_text_attention,
)
from .config import ConfigError, TrainConfig
from .data import ANSWER_TYPES, CLOSED, OPEN
from .encoders import ImageEncoder, QuestionEncoder
from .fusion import BilinearFusion, ClassifierHead, classify
from .rng import Rng


class ForwardResult:
    """Everything one forward pass produces that callers may need."""

    __slots__ = ("distribution", "text_attention", "visual_attention", "image_vector")

    def __init__(self, distribution, text_attention, visual_attention, image_vector):
        self.distribution = distribution
        self.text_attention = text_attention
        self.visual_attention = visual_attention
        self.image_vector = image_vector


class VqaModel:
    def __init__(self, config, question_vocab, answer_vocab, dtype=np.float32,
                 pretrained_embeddings=None):
        config.validate()
        if answer_vocab.size(CLOSED) < 1 or answer_vocab.size(OPEN) < 1:
            raise ConfigError("both answer vocabularies must be nonempty")
        self.config = config
        self.question_vocab = question_vocab
        self.answer_vocab = answer_vocab
        self.dtype = np.dtype(dtype)
        rng = Rng(config.seed).derive("model")

        self.question_encoder = QuestionEncoder(
            question_vocab, config.embed_dim, config.state_dim, config.n_tokens,
            rng, dtype=dtype, pretrained=pretrained_embeddings,
            stop_at_length=config.gru_stop_at_length)
        self.image_encoder = ImageEncoder(
            rng, feature_dim=config.image_dim, in_channels=config.image_channels,
            maml_layers=config.maml_layers, maml_channels=config.maml_channels,
            cdae_layers=config.cdae_layers, cdae_channels=config.cdae_channels,
            cdae_size=(config.cdae_height, config.cdae_width), dtype=dtype)
        self.text_attention = WordTextWeights(
            rng, config.embed_dim, config.state_dim, dtype=dtype)
        self.visual_projection = ImageQuestionProjection(
            rng, config.image_dim, config.state_dim,
            hidden_dim=config.i2q_hidden_dim, dtype=dtype)
        self.fusion = {
            kind: BilinearFusion(rng, config.image_dim, config.state_dim,
                                 config.fused_dim, config.fusion_rank,
                                 config.fusion_glimpses, dtype=dtype,
                                 tag=f"fusion.{kind}")
            for kind in ANSWER_TYPES
        }
        self.heads = {
            kind: ClassifierHead(rng, config.fused_dim, config.classifier_hidden,
                                 answer_vocab.size(kind), dtype=dtype,
                                 tag=f"head.{kind}")
            for kind in ANSWER_TYPES
        }

    def parameters(self):
        """All trainable tensors, in a stable name order."""
        params = OrderedDict()
        for group in (self.question_encoder.parameters(),
                      self.image_encoder.parameters(),
                      self.text_attention.parameters(),
                      self.visual_projection.parameters(),
                      self.fusion[CLOSED].parameters(),
                      self.fusion[OPEN].parameters(),
                      self.heads[CLOSED].parameters(),
                      self.heads[OPEN].parameters()):
            for name, tensor in group.items():
                if name in params:
                    raise ConfigError(f"duplicate parameter name {name}")
                params[name] = tensor
        return params

    def zero_grads(self):
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def apply_constraints(self):
        """Re-pin constrained values (the padding embedding row) after updates."""
        self.question_encoder.apply_constraints()

    def forward(self, sequence, image, answer_type):
        if answer_type not in ANSWER_TYPES:
            raise ConfigError(f"answer_type must be one of {ANSWER_TYPES}, got {answer_type!r}")
        word_features, states = self.question_encoder.encode(sequence)
        limit = sequence.true_length if self.config.mask_padding else None
        text_attn = word_to_text_attention(word_features, states, self.text_attention,
                                           true_length=limit)
        image_vector = self.image_encoder.encode(image)
        visual_attn = image_to_question_attention(states, image_vector,
                                                  self.visual_projection,
                                                  true_length=limit)
        guide = visual_attn if self.config.use_i2q_attention else text_attn
        guided = apply_visual_guidance(states, guide)
        fused = self.fusion[answer_type].fuse(image_vector, guided)
        distribution = classify(fused, self.heads[answer_type])
        return ForwardResult(distribution, text_attn, visual_attn, image_vector)

    def predict(self, sequence, image, answer_type):
        """The predicted answer string for one sample."""
        result = self.forward(sequence, image, answer_type)
        return self.answer_vocab.answer_at(answer_type, result.distribution.predicted)
