"""Two views of word importance, and how the visual one steers the model.

The text view (W2T) scores each word from the question alone: a gated
tanh*sigmoid feature of the word and its recurrent state, squeezed to a
scalar and softmaxed over positions.  The visual view (I2Q) scores each
word by how well its state column aligns with a projection of the image
vector.  Both are probability vectors over the same token positions, so
they can disagree -- and that disagreement is exactly what the agreement
loss term penalizes during training.
"""

import numpy as np

from mvqa.attention import (
    ImageQuestionProjection,
    WordTextWeights,
    apply_visual_guidance,
    image_to_question_attention,
    word_to_text_attention,
)
from mvqa.autodiff import Tensor
from mvqa.encoders import QuestionEncoder, Vocabulary, tokenize_and_pad
from mvqa.fusion import iqc_loss
from mvqa.rng import Rng


def section(title):
    print(f"\n=== {title} ===")


def show(label, words, values):
    cells = "  ".join(f"{w}:{v:.3f}" for w, v in zip(words, values))
    print(f"{label:<12} {cells}")


def main():
    question = "is there fluid in the right lung"
    vocab = Vocabulary.from_texts([question])
    n_tokens = 8
    seq = tokenize_and_pad(question, vocab, n_tokens)
    words = [vocab.token_of(i) for i in seq.ids]

    rng = Rng(11)
    encoder = QuestionEncoder(vocab, embed_dim=8, state_dim=6, n_tokens=n_tokens,
                              rng=rng.derive("enc"), dtype=np.float64)
    word_features, states = encoder.encode(seq)
    image_vector = rng.derive("img").normal(0.0, 1.0, (5,), dtype=np.float64)

    section("text view: question-only importance")
    text_weights = WordTextWeights(rng.derive("w2t"), 8, 6, dtype=np.float64)
    text_view = word_to_text_attention(word_features, states, text_weights)
    show("text", words, text_view.values)
    print(f"nonnegative, sums to {text_view.values.sum():.9f}")

    section("visual view: image-conditioned importance")
    projection = ImageQuestionProjection(rng.derive("i2q"), 5, 6, dtype=np.float64)
    visual_view = image_to_question_attention(
        states, Tensor(image_vector), projection)
    show("visual", words, visual_view.values)
    print(f"nonnegative, sums to {visual_view.values.sum():.9f}")

    section("masking confines weight to the live prefix")
    masked = word_to_text_attention(word_features, states, text_weights,
                                    true_length=seq.true_length)
    show("masked", words, masked.values)
    print(f"everything after token {seq.true_length} is exactly 0")

    section("how far apart are the two views?")
    gap = float(iqc_loss(visual_view, text_view).data)
    print(f"squared distance between the views: {gap:.6f}")
    print("training with the agreement term pulls this toward zero")

    section("visual guidance scales each state column")
    guided = apply_visual_guidance(states, visual_view)
    ratio = guided.data[0] / states.data[0]
    show("scale", words, ratio)
    print("each column was multiplied by its visual weight before fusion")


if __name__ == "__main__":
    main()
