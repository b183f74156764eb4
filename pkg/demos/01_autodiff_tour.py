"""
A tour of the autodiff core
===========================

Build a tiny graph, run backward, and compare against finite differences.
"""

import numpy as np

from fundusgan import autodiff as ad
from fundusgan.autodiff import Tensor

# leaves with requires_grad collect gradients on backward()
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)

# broadcasting follows numpy; the bias grad is summed back to shape (4,)
y = ad.gelu(x @ w + b).mean()
y.backward()
print("loss", y.item())
print("dL/db", b.grad)

# central differences on the same function, in float64
def f(bv):
    with ad.no_grad():
        return ad.gelu(x @ w + Tensor(bv)).mean().item()

eps = 1e-6
fd = np.array([(f(b.data + eps * e) - f(b.data - eps * e)) / (2 * eps) for e in np.eye(4)])
print("finite diff", fd)
print("max abs diff", np.abs(fd - b.grad).max())

# a 2d convolution and its transpose share one im2col layout
img = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
k = Tensor(rng.normal(size=(5, 3, 3, 3)), requires_grad=True)
out = ad.conv2d(img, k, stride=2, padding=1)
print("conv output", out.shape)
out.sum().backward()
print("kernel grad norm", np.linalg.norm(k.grad))
