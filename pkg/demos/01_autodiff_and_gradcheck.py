"""A tour of the tape-based autodiff core.

Build a tiny computation, read gradients off the reverse sweep, and watch the
finite-difference checker flag a corrupted backward rule.
"""

import numpy as np

from epica.graph import Graph, grad_check

rng = np.random.default_rng(0)

# --- forward + backward on a small expression --------------------------------

g = Graph()
x = g.leaf(rng.normal(size=(3, 4)), name="x", trainable=True)
w = g.leaf(rng.normal(size=(4, 2)), name="w", trainable=True)
hidden = g.tanh(g.matmul(x, w))
probs = g.softmax(hidden, scale=9.0)
loss = g.reduce_sum(g.mul(probs, probs))

print(f"tape length: {len(g.nodes)} nodes")
print(f"loss = {float(loss.value):.6f}")

grads = g.leaf_gradients(loss, {"x": x, "w": w})
print(f"dL/dx norm = {np.linalg.norm(grads['x']):.6f}")
print(f"dL/dw norm = {np.linalg.norm(grads['w']):.6f}")

# --- the checker agrees with central differences ------------------------------


def f(params):
    g = Graph()
    x = g.leaf(params["x"], trainable=True)
    w = g.leaf(params["w"], trainable=True)
    loss = g.reduce_sum(g.mul(g.softmax(g.tanh(g.matmul(x, w)), 9.0), g.constant(weights)))
    return float(loss.value), g.leaf_gradients(loss, {"x": x, "w": w})


weights = rng.normal(size=(3, 2))
params = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2))}
report = grad_check(f, params, h=1e-5, tol=1e-4)
print("\nhonest gradients:")
print(report)

# --- and catches a wrong rule --------------------------------------------------


def broken(params):
    value, grads = f(params)
    grads["w"] = 1.1 * grads["w"]  # simulate a buggy backward rule
    return value, grads


report = grad_check(broken, params, h=1e-5, tol=1e-4)
print("\nwith a corrupted rule for w:")
print(report)
assert not report.passed
