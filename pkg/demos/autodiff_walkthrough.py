"""Tape-based gradients: a conv, a BN-ReLU and a loss, checked by finite differences."""

import numpy as np

from drunet.autodiff import Tape, Tensor, backward, float64_mode
from drunet.ops import BatchNormParams, ConvParams, batch_norm, conv2d, relu
from drunet.training import sparse_ce_loss

rng = np.random.default_rng(0)

# 64-bit mode so the finite differences are meaningful
with float64_mode():
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), name="x")
    conv = ConvParams(Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, name="w"), Tensor(np.zeros(4), name="b"))
    bn = BatchNormParams.create(4, "bn")
    labels = rng.integers(0, 4, (2, 6, 6))

    def loss_of(tape=None):
        h = relu(batch_norm(conv2d(x, conv, tape), bn, "train", tape), tape)
        return sparse_ce_loss(h, labels, tape)

    tape = Tape()
    loss = loss_of(tape)
    print("loss:", loss.item())
    print("ops recorded on the tape:", [node.op for node in tape.nodes])

    grads = backward(tape, loss)
    g = grads[conv.weight]

    # nudge one weight and compare
    eps = 1e-6
    idx = (1, 2, 0, 1)
    orig = conv.weight.data[idx]
    conv.weight.data[idx] = orig + eps
    up = loss_of().item()
    conv.weight.data[idx] = orig - eps
    down = loss_of().item()
    conv.weight.data[idx] = orig
    print(f"dL/dw{idx}: backward {g[idx]:.10f}  finite difference {(up - down) / (2 * eps):.10f}")
