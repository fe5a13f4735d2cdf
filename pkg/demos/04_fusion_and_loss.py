"""Low-rank bilinear fusion, answer heads, and the two-term loss.

A full bilinear form between an image vector and every recurrent state
would need image_dim x state_dim x fused_dim weights; the fusion block
factors it through a small rank so a desk-scale model stays tiny.  Closed
("yes/no") and open ("what/where") questions get separate fusion blocks
and answer heads, and the training loss adds a weighted agreement term
that pulls the two attention views together.
"""

import numpy as np

from mvqa.autodiff import Tensor
from mvqa.fusion import (
    ClassifierHead,
    BilinearFusion,
    classification_loss,
    classify,
    composite_loss,
    iqc_loss,
)
from mvqa.rng import Rng


def section(title):
    print(f"\n=== {title} ===")


def main():
    rng = Rng(3)
    image_dim, state_dim, fused_dim, n = 5, 6, 10, 8
    image_vector = Tensor(rng.derive("v").normal(0.0, 1.0, (image_dim,), dtype=np.float64))
    states = Tensor(rng.derive("q").normal(0.0, 1.0, (state_dim, n), dtype=np.float64))

    section("rank buys capacity, not size")
    for rank in (1, 4):
        fusion = BilinearFusion(rng.derive(f"f{rank}"), image_dim=image_dim,
                                state_dim=state_dim, fused_dim=fused_dim,
                                rank=rank, glimpses=2, dtype=np.float64)
        n_weights = sum(p.size for p in fusion.parameters().values())
        fused = fusion.fuse(image_vector, states)
        print(f"rank {rank}: {n_weights:4d} weights -> fused vector {fused.shape}"
              f" (full bilinear form would need "
              f"{image_dim * state_dim * fused_dim} per glimpse)")

    section("separate heads per answer type")
    fusion = BilinearFusion(rng.derive("f"), image_dim=image_dim, state_dim=state_dim,
                            fused_dim=fused_dim, rank=3, glimpses=1, dtype=np.float64)
    fused = fusion.fuse(image_vector, states)
    closed_head = ClassifierHead(rng.derive("hc"), fused_dim, hidden_dim=12,
                             n_answers=2, dtype=np.float64)
    open_head = ClassifierHead(rng.derive("ho"), fused_dim, hidden_dim=12,
                           n_answers=5, dtype=np.float64)
    closed = classify(fused, closed_head)
    opened = classify(fused, open_head)
    print(f"closed head: {len(closed.probabilities)} sigmoid scores, "
          f"argmax {closed.predicted}")
    print(f"open head  : {len(opened.probabilities)} sigmoid scores, "
          f"argmax {opened.predicted}")

    section("classification loss: per-type cross entropy")
    closed_target = np.array([1.0, 0.0])
    open_target = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    l_c = classification_loss([closed], [closed_target], [opened], [open_target])
    print(f"l_c = {l_c.item():.6f}")

    section("the agreement term and its weight")
    raw = rng.derive("views").uniform(0.0, 1.0, (2, n), dtype=np.float64) + 1e-9
    visual = Tensor(raw[0] / raw[0].sum())
    text = Tensor(raw[1] / raw[1].sum())
    l_mq = iqc_loss(visual, text)
    print(f"l_mq = {l_mq.item():.6f}")
    for gamma in (0.0, 0.8, 1.6):
        total, breakdown = composite_loss(l_c, l_mq, gamma)
        print(f"gamma {gamma:>3}: total = {total.item():.6f}  "
              f"(l_c {breakdown.l_c:.6f} + {gamma} * l_mq {breakdown.l_mq:.6f})")

    section("gamma of zero is the classification loss, bit for bit")
    total, _ = composite_loss(l_c, l_mq, 0.0)
    print(f"composite_loss(l_c, l_mq, 0.0) returns l_c itself: {total is l_c}")
    print("so switching the term off and weighting it by zero train identically")


if __name__ == "__main__":
    main()
