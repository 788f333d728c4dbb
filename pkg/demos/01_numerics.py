"""
Hand-written backprop and Adam
==============================

Every layer in the package is a forward/backward pair over float64 arrays.
This script checks one small MLP against central differences, then fits it
to a toy regression-as-classification problem with the Adam optimizer.
"""
import numpy as np

from cdanet import numerics as nx
from cdanet.model import MLP

rng = np.random.default_rng(0)

# a 3 -> 6 -> 1 MLP whose last layer emits a raw logit
store = nx.ParamStore()
net = MLP(store, "net", [3, 6, 1], rng, last_activate=False)
for p in store:                      # nudge zero biases off the ReLU kink
    if p.name.endswith(".b"):
        p.value += rng.uniform(-0.1, 0.1, p.value.shape)

x = rng.standard_normal((16, 3))
y = (x[:, :1] - 0.5 * x[:, 1:2] > 0).astype(float)


def loss():
    logit, _ = net.forward(x)
    return nx.bce_with_logits(logit, y)[0]


# analytic gradient: forward, dL/dlogit, backward
logit, caches = net.forward(x)
_, dlogit = nx.bce_with_logits(logit, y)
store.zero_grad()
net.backward(dlogit, caches)

worst = 0.0
for p in store:
    for idx in np.ndindex(p.value.shape):
        old = p.value[idx]
        p.value[idx] = old + 1e-5; up = loss()
        p.value[idx] = old - 1e-5; down = loss()
        p.value[idx] = old
        num = (up - down) / 2e-5
        worst = max(worst, abs(num - p.grad[idx]) / max(abs(num), abs(p.grad[idx]), 1e-6))
print(f"max relative gradient error: {worst:.2e}")

# fit with Adam (step() also zeroes the grads)
opt = nx.Adam(lr=0.05)
for it in range(201):
    logit, caches = net.forward(x)
    value, dlogit = nx.bce_with_logits(logit, y)
    net.backward(dlogit, caches)
    opt.step(store)
    if it % 50 == 0:
        print(f"step {it:3d}  bce {value:.4f}")
