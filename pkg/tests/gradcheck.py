"""Central finite-difference gradient oracle shared by the test modules."""

import numpy as np

from prunelab.autograd import Graph


def fd_grad(fn, arrays, index, h=1e-5):
    """Numerical d fn / d arrays[index] by central differences.

    fn takes the list of arrays and returns a float; arrays are mutated in
    place around each probe point and restored.
    """
    a = arrays[index]
    g = np.zeros_like(a)
    flat = a.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(arrays)
        flat[i] = orig - h
        fm = fn(arrays)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def autodiff_grads(build, tensors):
    """Backward pass gradients for a scalar built from the given leaves."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        root = build(tensors)
        g.backward(root)
    grads = [None if t.grad is None else t.grad.copy() for t in tensors]
    for t in tensors:
        t.requires_grad = False
        t.grad = None
    return float(root.data), grads


def rel_err(a, b, floor=1e-3):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
