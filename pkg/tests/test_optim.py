import numpy as np

from crossview.engine import Tensor, backward
from crossview.optim import AdamW
from conftest import rng


def test_single_step_hand_oracle():
    # f(w) = w^2 at w=1: grad 2, m_hat 2, v_hat 4, step lr*2/(2+eps).
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([w], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    backward((w * w).sum())
    opt.step()
    expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
    np.testing.assert_allclose(w.data, [expected], rtol=0, atol=0)
    assert abs(w.data[0] - 0.9000000005) < 1e-10


def test_zero_grad_zero_decay_is_identity():
    w = Tensor(np.array([1.5, -2.5]), requires_grad=True)
    opt = AdamW([w], lr=0.1)
    opt.step()
    np.testing.assert_array_equal(w.data, [1.5, -2.5])


def test_decay_only_shrinks_parameters():
    w = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([w], lr=0.1, weight_decay=0.5)
    opt.step()
    np.testing.assert_allclose(w.data, [2.0 - 0.1 * 0.5 * 2.0], rtol=0, atol=0)


def test_multiple_steps_match_reference_loop():
    g = rng(4)
    w0 = g.normal(size=(3,))
    grads = [g.normal(size=(3,)) for _ in range(5)]

    w = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW([w], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    for gr in grads:
        w.grad = gr.copy()
        opt.step()

    ref = w0.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for k, gr in enumerate(grads, start=1):
        ref = ref - 0.01 * 0.1 * ref
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        mh = m / (1 - 0.9**k)
        vh = v / (1 - 0.999**k)
        ref = ref - 0.01 * mh / (np.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=0, atol=1e-15)


def test_frozen_parameters_skipped():
    w = Tensor(np.array([1.0]), requires_grad=False)
    opt = AdamW([w], lr=0.1, weight_decay=0.5)
    w.grad = np.array([5.0])
    opt.step()
    np.testing.assert_array_equal(w.data, [1.0])
