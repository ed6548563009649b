"""Build the full network, print its layer ledger and trace a 240x240 slice through it."""

import time

import numpy as np

from drunet.autodiff import Tensor
from drunet.model import build_drunet104, conv_ledger, count_conv_layers, parameter_count

t0 = time.perf_counter()
model = build_drunet104()
print(f"built in {time.perf_counter() - t0:.3f}s (weights are drawn on first use)")

print("counted convolutions:", count_conv_layers(model))
print("ledger by role:", conv_ledger(model))
print("trainable parameters:", f"{parameter_count(model):,}")
print("encoder blocks per level:", [len(level) for level in model.encoder], "+ bridge", len(model.bridge))
print("dropout after:", ", ".join(model.dropout_sites))

trace = []
t0 = time.perf_counter()
logits = model.forward(Tensor(np.random.default_rng(0).random((1, 4, 240, 240))), "infer", trace=trace)
print(f"forward took {time.perf_counter() - t0:.1f}s")
for stage, shape in trace:
    print(f"  {stage:>7s}  {shape}")
print("logits:", logits.shape)

# the reduced-width clone used for quick experiments keeps the topology
small = build_drunet104(width_divisor=4)
print("width/4 clone:", count_conv_layers(small), "convs,", f"{parameter_count(small):,}", "params")
