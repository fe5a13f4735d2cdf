"""From question text to recurrent state columns.

Questions enter the model as fixed-width token id sequences: lowercase
tokens, a closed vocabulary with reserved PAD/UNK slots, right padding up
to the configured width.  An embedding table turns ids into columns, a
gated recurrent unit walks the columns left to right, and the resulting
state matrix is what both attention views score.
"""

import numpy as np

from mvqa.encoders import (
    PAD_ID,
    QuestionEncoder,
    Vocabulary,
    tokenize,
    tokenize_and_pad,
)
from mvqa.rng import Rng


def section(title):
    print(f"\n=== {title} ===")


def main():
    corpus = [
        "Is the heart enlarged?",
        "What abnormality is seen in the lung?",
        "Where is the lesion located?",
    ]

    section("vocabulary")
    vocab = Vocabulary.from_texts(corpus)
    print(f"{len(vocab)} entries; first five: {vocab.tokens()[:5]}")
    print(f"reserved: {vocab.PAD!r} -> {vocab.id_of(vocab.PAD)}, "
          f"{vocab.UNK!r} -> {vocab.id_of(vocab.UNK)}")
    print(f"tokenize drops punctuation and case: {tokenize('Is the HEART enlarged?')}")

    section("fixed-width id sequences")
    seq = tokenize_and_pad("is the heart enlarged", vocab, 8)
    print(f"ids         : {list(seq.ids)}")
    print(f"true_length : {seq.true_length} (the rest is PAD id {PAD_ID})")
    unknown = tokenize_and_pad("is the spleen enlarged", vocab, 8)
    print(f"unseen word : {list(unknown.ids)}  ('spleen' maps to {vocab.UNK!r})")

    section("embedding and recurrence")
    encoder = QuestionEncoder(vocab, embed_dim=6, state_dim=4, n_tokens=8,
                              rng=Rng(0), dtype=np.float64)
    words, states = encoder.encode(seq)
    print(f"word features: {words.shape} (embed_dim x n_tokens)")
    print(f"state columns: {states.shape} (state_dim x n_tokens)")

    section("the PAD row of the embedding stays zero")
    pad_column = words.data[:, seq.true_length:]
    print(f"every padded column is exactly zero: {bool((pad_column == 0.0).all())}")

    section("recurrence is causal")
    longer = tokenize_and_pad("is the heart enlarged today", vocab, 8)
    _, states_longer = encoder.encode(longer)
    shared = seq.true_length  # the first four tokens agree
    same = np.array_equal(states.data[:, :shared], states_longer.data[:, :shared])
    print(f"states over the shared prefix are identical: {same}")
    print("(a word appended at position 5 cannot reach states 1..4)")


if __name__ == "__main__":
    main()
