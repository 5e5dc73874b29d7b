"""Finite-difference cases covering every differentiable operation.

Each case is (name, fn, arrays) where ``fn`` maps one Tensor per array to
a scalar Tensor. Shared between the unit tests and the acceptance suite,
which sweeps many seeds.
"""

import numpy as np

from crossview.engine import (
    avg_pool2d,
    bilinear_sample2d,
    concat,
    conv2d,
    conv3d,
    matmul,
    silu,
    sigmoid,
    softmax,
    trilinear_sample3d,
    upsample_nearest2d,
)


def _rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 77])))


def build_cases(seed):
    g = _rng(seed)
    cases = []

    a = g.normal(size=(3, 4))
    b = g.normal(size=(4,))
    w = g.normal(size=(3, 4))
    cases.append(("add_broadcast", lambda x, y: ((x + y) * w).sum(), [a, b]))
    cases.append(("sub_broadcast", lambda x, y: ((x - y) * w).sum(), [a, b]))
    cases.append(("mul_broadcast", lambda x, y: ((x * y) * w).sum(), [a, b]))
    d = g.uniform(0.5, 1.5, size=(4,)) * g.choice([-1.0, 1.0], size=(4,))
    cases.append(("div_broadcast", lambda x, y: ((x / y) * w).sum(), [a, d]))
    cases.append(("neg", lambda x: ((-x) * w).sum(), [a]))
    cases.append(("pow_const", lambda x: ((x**3) * w).sum(), [g.uniform(0.5, 1.5, (3, 4))]))
    cases.append(("exp", lambda x: (x.exp() * w).sum(), [g.uniform(-2, 2, (3, 4))]))
    cases.append(("sigmoid", lambda x: (sigmoid(x) * w).sum(), [g.uniform(-4, 4, (3, 4))]))
    cases.append(("silu", lambda x: (silu(x) * w).sum(), [g.uniform(-4, 4, (3, 4))]))
    cases.append(
        ("softmax", lambda x: (softmax(x, axis=-1) * w).sum(), [g.normal(size=(3, 4))])
    )
    cases.append(("mean", lambda x: x.mean(), [g.normal(size=(2, 3, 4))]))
    cases.append(
        ("reshape_transpose", lambda x: ((x.reshape((4, 3)).transpose((1, 0))) * w).sum(), [a])
    )
    wc = g.normal(size=(3, 7))
    cases.append(
        ("concat", lambda x, y: ((concat([x, y], axis=1)) * wc).sum(), [a, g.normal(size=(3, 3))])
    )
    wg = g.normal(size=(2, 2))
    cases.append(("getitem", lambda x: ((x[1:, ::2]) * wg).sum(), [a]))

    m1 = g.normal(size=(3, 4))
    m2 = g.normal(size=(4, 5))
    wm = g.normal(size=(3, 5))
    cases.append(("matmul", lambda x, y: ((matmul(x, y)) * wm).sum(), [m1, m2]))
    b1 = g.normal(size=(2, 3, 4))
    wb = g.normal(size=(2, 3, 5))
    cases.append(("matmul_batched", lambda x, y: ((matmul(x, y)) * wb).sum(), [b1, m2]))

    xc = g.normal(size=(2, 3, 5, 5))
    kc = g.normal(size=(2, 3, 3, 3)) * 0.5
    bc = g.normal(size=(2,))
    w2 = g.normal(size=(2, 2, 5, 5))
    cases.append(
        ("conv2d", lambda x, k, bb: ((conv2d(x, k, bb)) * w2).sum(), [xc, kc, bc])
    )
    xv = g.normal(size=(1, 2, 4, 4, 4))
    kv = g.normal(size=(2, 2, 3, 3, 3)) * 0.3
    w3 = g.normal(size=(1, 2, 4, 4, 4))
    cases.append(("conv3d", lambda x, k: ((conv3d(x, k)) * w3).sum(), [xv, kv]))

    xp = g.normal(size=(2, 3, 4, 4))
    wp = g.normal(size=(2, 3, 2, 2))
    cases.append(("avg_pool2d", lambda x: ((avg_pool2d(x, 2)) * wp).sum(), [xp]))
    wu = g.normal(size=(2, 3, 8, 8))
    cases.append(("upsample_nearest2d", lambda x: ((upsample_nearest2d(x, 2)) * wu).sum(), [xp]))

    fmap = g.normal(size=(3, 5, 6))
    coords = np.concatenate(
        [
            g.uniform(0.1, 3.9, size=(6, 2)) * np.array([1.0, 1.2]),
            np.array([[-3.0, 2.0], [10.0, 1.0]]),  # out of bounds rows stay zero
        ]
    )
    wbil = g.normal(size=(8, 3))

    def f_bil(m):
        out, _ = bilinear_sample2d(m, coords)
        return (out * wbil).sum()

    cases.append(("bilinear_sample2d", f_bil, [fmap]))

    vol = g.normal(size=(2, 4, 4, 4))
    coords3 = np.concatenate(
        [g.uniform(0.1, 2.9, size=(6, 3)), np.array([[-2.0, 1.0, 1.0], [1.0, 9.0, 1.0]])]
    )
    wtri = g.normal(size=(8, 2))

    def f_tri(v):
        out, _ = trilinear_sample3d(v, coords3)
        return (out * wtri).sum()

    cases.append(("trilinear_sample3d", f_tri, [vol]))
    return cases
