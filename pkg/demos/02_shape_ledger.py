"""
Full-size shapes without training
=================================

Walk a 256x256 image through both networks and print every stage.
Runs under no_grad; needs roughly 2.5 GB of memory and a minute of CPU.
"""

import numpy as np

from fundusgan import Discriminator, GeneratorVit, Tensor, no_grad
from fundusgan.layers import initialize

def count(m):
    return sum(p.data.size for _, p in m.named_parameters())


x = Tensor(np.zeros((3, 256, 256), np.float32))

d = Discriminator(64)
initialize(d, 0)
trace = []
with no_grad():
    d(x, trace=trace)
print("discriminator:", count(d), "parameters")
for name, shape in trace:
    print(f"  {name:8s} {'x'.join(map(str, shape))}")

# 1024-dim tokens over a 32x32 grid of 8x8 patches, seven blocks
g = GeneratorVit(256, 1024, 7, 8)
initialize(g, 0)
trace = []
with no_grad():
    g(x, trace=trace)
print("generator:", count(g), "parameters")
for name, shape in trace:
    print(f"  {name:8s} {'x'.join(map(str, shape))}")
