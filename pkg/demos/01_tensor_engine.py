"""The reverse-mode tensor engine: tapes, backward passes, and audits.

Every model in this package is built from the small op set in
``mvqa.autodiff``.  This walk-through records a tiny expression on a tape,
pulls gradients back through it, and then audits those gradients against
central finite differences -- the same audit the `mvqa grad-check` command
runs over the full model.
"""

import numpy as np

import mvqa.autodiff as ad
from mvqa.autodiff import Tape, Tensor, backward, grad_check


def section(title):
    print(f"\n=== {title} ===")


def main():
    section("tensors and the tape")
    w = Tensor(np.array([[0.5, -0.2], [0.1, 0.3]]), requires_grad=True, name="w")
    x = Tensor(np.array([[1.0], [2.0]]), name="x")
    print(f"w requires_grad={w.requires_grad}, x requires_grad={x.requires_grad}")

    # Ops only build a graph while a Tape is active; outside one they are
    # plain numpy arithmetic.
    with Tape() as tape:
        hidden = ad.relu(ad.matmul(w, x))
        loss = ad.sum_all(ad.hadamard(hidden, hidden))
    print(f"loss = sum(relu(w @ x)^2) = {loss.item():.6f}")
    print(f"ops recorded on the tape: {len(tape.nodes)}")

    section("backward fills .grad on every reachable parameter")
    backward(tape, loss)
    print(f"dloss/dw =\n{w.grad}")

    section("the same gradients, audited by finite differences")

    def loss_fn():
        return ad.sum_all(ad.hadamard(ad.relu(ad.matmul(w, x)),
                                      ad.relu(ad.matmul(w, x))))

    worst = grad_check(loss_fn, [w], epsilon=1e-5)
    print(f"max relative error over every coordinate of w: {worst:.3e}")
    assert worst < 1e-6

    section("broadcasting is deliberately restricted")
    try:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    except ad.ShapeError as exc:
        print(f"shape mismatch is an error, not a silent broadcast: {exc}")

    section("higher-level ops share the same machinery")
    image = Tensor(np.arange(16.0).reshape(1, 4, 4), requires_grad=True, name="img")
    kernel = Tensor(np.ones((1, 1, 3, 3)) / 9.0, requires_grad=True, name="k")
    with Tape() as tape:
        conv = ad.conv2d(image, kernel, stride=1)
        pooled = ad.maxpool2d(conv, 2)
        total = ad.sum_all(pooled)
    backward(tape, total)
    print(f"conv output shape {conv.shape}, pooled shape {pooled.shape}")
    print(f"gradient reaches the kernel: dtotal/dk sums to {kernel.grad.sum():.3f}")


if __name__ == "__main__":
    main()
