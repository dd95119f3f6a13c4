"""Independent reference computations used by the tests."""

import numpy as np

from vidalign.tensor import Tape, Tensor


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (f(*plus) - f(*minus)) / (2 * h)
        grads.append(g)
    return grads


def autodiff_grad(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) via the tape."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
    tape.backward(out)
    return [leaf.grad for leaf in leaves]


def scalar_fn(build):
    def f(*arrays):
        return build(*[Tensor(a) for a in arrays]).item()
    return f


def rel_error(a, n):
    """Max abs deviation scaled by the largest reference magnitude."""
    a, n = np.asarray(a), np.asarray(n)
    return float(np.abs(a - n).max() / max(np.abs(n).max(), 1e-8))


def gradcheck(build, arrays, h=1e-5):
    ad = autodiff_grad(build, arrays)
    nd = numeric_grad(scalar_fn(build), arrays, h)
    return max(rel_error(a, n) for a, n in zip(ad, nd))


def naive_dft2(x):
    """Direct double-sum 2-D DFT (no shift)."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            s = 0j
            for i in range(h):
                for j in range(w):
                    s += x[i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w))
            out[u, v] = s
    return out


def naive_dft2_fast(x):
    """Same sum via explicit DFT matrices (used for larger sweeps)."""
    h, w = x.shape
    wh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    ww = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return wh @ x @ ww.T


def shift_center(s):
    h, w = s.shape[-2:]
    return np.roll(s, (h // 2, w // 2), axis=(-2, -1))


def two_loop_kl_is(p):
    n, c = p.shape
    marg = [sum(p[i][j] for i in range(n)) / n for j in range(c)]
    total = 0.0
    for i in range(n):
        kl = 0.0
        for j in range(c):
            if p[i][j] > 0:
                kl += p[i][j] * np.log(p[i][j] / marg[j])
        total += kl
    return float(np.exp(total / n))


def diagonal_frechet(mu_a, var_a, mu_b, var_b):
    return float(sum((ma - mb) ** 2 + va + vb - 2 * np.sqrt(va * vb)
                     for ma, va, mb, vb in zip(mu_a, var_a, mu_b, var_b)))


def blobs(centers, sigma, per_blob, seed):
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    return np.concatenate([c + sigma * rng.standard_normal((per_blob, centers.shape[1])) for c in centers])
