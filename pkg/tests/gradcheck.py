"""Central finite-difference oracle for blocks and losses (float64)."""

import numpy as np

EPS = 1e-3
# Gradients that vanish identically (a conv bias feeding batch-norm) leave only
# finite-difference round-off (~1e-12 here); compare those against this floor.
ABS_FLOOR = 1e-6


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), ABS_FLOOR)


def _pattern(block, cache):
    return [np.asarray(s).copy() for s in block.discrete_state(cache)]


def _same(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def check_block(block, x, n_probes, rng, seed=7):
    """Return the list of relative errors over ``n_probes`` valid probes.

    Probes whose +/-eps evaluations switch a piecewise branch (ReLU mask, pool
    argmax) are redrawn, since the function is not differentiable there.
    """
    block = block.astype(np.float64)
    x = x.astype(np.float64)
    y0, cache = block.forward(x, train=True, rng=np.random.default_rng(seed))
    weights = rng.normal(size=y0.shape)
    base = _pattern(block, cache)
    block.zero_grad()
    gx = block.backward(cache, weights)
    grads = {k: v.copy() for k, v in block.grads.items()}

    def value(xx):
        y, c = block.forward(xx, train=True, rng=np.random.default_rng(seed))
        return float((y * weights).sum()), _pattern(block, c)

    targets = [("input", None)] + [("param", k) for k in block.params]
    errors = []
    attempts = 0
    while len(errors) < n_probes:
        attempts += 1
        assert attempts < 50 * n_probes, "too many probes hit non-differentiable points"
        kind, name = targets[rng.integers(len(targets))]
        arr = x if kind == "input" else block.params[name]
        analytic = gx if kind == "input" else grads[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + EPS
        fp, pp = value(x)
        arr[idx] = orig - EPS
        fm, pm = value(x)
        arr[idx] = orig
        if not (_same(pp, base) and _same(pm, base)):
            continue
        errors.append(rel_err(float(analytic[idx]), (fp - fm) / (2 * EPS)))
    return errors


def check_function(fn, inputs, n_probes, rng):
    """``fn(*inputs) -> (value, grads_tuple)``; probes random input entries."""
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    _, grads = fn(*inputs)
    errors = []
    for _ in range(n_probes):
        k = int(rng.integers(len(inputs)))
        arr = inputs[k]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + EPS
        fp, _ = fn(*inputs)
        arr[idx] = orig - EPS
        fm, _ = fn(*inputs)
        arr[idx] = orig
        errors.append(rel_err(float(grads[k][idx]), (fp - fm) / (2 * EPS)))
    return errors
