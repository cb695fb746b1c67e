"""Finite-difference gradient oracle shared by the numerics and acceptance tests."""
import numpy as np

H = 1e-5


def numeric_grad(f, arr, h=H):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_param_grads(loss_fn, params, h=H):
    """Worst relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: float(loss_fn().data), p.data, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def synthetic_fusion(rng, n_adapters, d, b, n_layers=1, rows=None):
    """Random adapter sets with Gram records built from explicit activations.

    Returns ``(records, adapter_sets, inputs)`` where ``inputs[k][layer][sub]``
    is the activation matrix that produced record ``k``.
    """
    from eul.fusion import GramRecord
    from eul.model import UnlearningLayer
    records, sets, inputs = [], [], []
    for k in range(n_adapters):
        n = rows or int(rng.integers(d + 2, 3 * d + 3))
        aset, layers, acts = [], {}, {}
        for i in range(n_layers):
            a = UnlearningLayer(rng.normal(size=(d, b)), rng.normal(size=b),
                                rng.normal(size=(b, d)), rng.normal(size=d))
            x, z = rng.normal(size=(n, d)), rng.normal(size=(n, b)) + 0.1
            layers[i] = {"down": (x.T @ x, x.T @ x @ a.w_down.data),
                         "up": (z.T @ z, z.T @ z @ a.w_up.data)}
            acts[i] = {"down": x, "up": z}
            aset.append(a)
        records.append(GramRecord(f"req{k}", n, layers))
        sets.append(aset)
        inputs.append(acts)
    return records, sets, inputs


def stacked_lstsq(inputs, sets, layer, sub):
    """Brute-force minimizer of sum_k ||X_k W - X_k W_k||^2 via a stacked least-squares solve."""
    xs = [acts[layer][sub] for acts in inputs]
    ws = [(s[layer].w_down if sub == "down" else s[layer].w_up).data for s in sets]
    X = np.vstack(xs)
    Y = np.vstack([x @ w for x, w in zip(xs, ws)])
    return np.linalg.lstsq(X, Y, rcond=None)[0]
