import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uapsga import tensor as T
from uapsga.errors import ConfigError, UsageError
from uapsga.losses import LossSpec, batch_loss, clean_labels, loss_and_grad
from uapsga.models import Network, build
from uapsga.tensor import Tape, Tensor, backward

from oracles import central_difference, gradient_mismatch


def _two_logit_net(w2, b2=(0.0, 0.0)):
    """Identity hidden layer on a (1, 1, 2) input, then a chosen output layer."""
    return Network("mlp-2", (1, 1, 2), 2, (2,),
                   [Tensor(np.eye(2)), Tensor(np.zeros(2)), Tensor(w2), Tensor(b2)])


def _plain_ce(net, x, y, delta):
    tape = Tape()
    d = tape.watch(Tensor(delta))
    loss = T.tensor_mean(T.softmax_cross_entropy(net.forward(T.add_broadcast(Tensor(x), d)), y))
    return float(loss.data), backward(tape, Tensor(np.float32(1)))[d.id].data


def test_saturated_sample_contributes_beta_and_no_gradient():
    net = _two_logit_net([[12.0, 0.0], [0.0, 0.0]])
    x = np.array([[[[1.0, 0.0]]]], dtype=np.float32)
    ce, _ = _plain_ce(net, x, [1], np.zeros((1, 1, 2)))
    assert ce == pytest.approx(12.0, abs=1e-4)
    loss, grad = loss_and_grad(LossSpec(net, beta=9.0), x, np.array([1]), np.zeros((1, 1, 2), np.float32))
    assert loss == 9.0
    assert np.all(grad == 0)


def test_infinite_beta_reduces_to_plain_cross_entropy(trained_cnn, blobs):
    x, y = blobs.images[:12], clean_labels(LossSpec(trained_cnn), blobs.images[:12])[0]
    delta = np.random.default_rng(0).uniform(-0.1, 0.1, size=(1, 8, 8)).astype(np.float32)
    loss, grad = loss_and_grad(LossSpec(trained_cnn, beta=float("inf")), x, y, delta)
    ref_loss, ref_grad = _plain_ce(trained_cnn, x, y, delta)
    assert loss == pytest.approx(ref_loss, abs=1e-6)
    np.testing.assert_allclose(grad, ref_grad, atol=1e-6)


def test_ensemble_is_mean_of_members(trained_cnn, trained_mlp, blobs):
    x = blobs.images[:16]
    delta = np.full((1, 8, 8), 0.03, np.float32)
    ens = LossSpec((trained_cnn, trained_mlp))
    labels = clean_labels(ens, x)
    loss, grad = loss_and_grad(ens, x, labels, delta)
    l1, g1 = loss_and_grad(LossSpec(trained_cnn), x, labels[0], delta)
    l2, g2 = loss_and_grad(LossSpec(trained_mlp), x, labels[1], delta)
    assert loss == pytest.approx((l1 + l2) / 2, abs=1e-6)
    np.testing.assert_allclose(grad, (g1 + g2) / 2, atol=1e-6)


def test_ensemble_of_one_is_bit_identical_to_direct_computation(trained_cnn, blobs):
    x = blobs.images[:10]
    y = clean_labels(LossSpec(trained_cnn), x)[0]
    delta = np.full((1, 8, 8), -0.02, np.float32)
    loss, grad = loss_and_grad(LossSpec((trained_cnn,), beta=float("inf")), x, [y], delta)
    ref_loss, ref_grad = _plain_ce(trained_cnn, x, y, delta)
    assert loss == ref_loss
    assert grad.tobytes() == ref_grad.tobytes()


def test_logit_loss_at_zero_is_negated_clean_logit(trained_mlp, blobs):
    x = blobs.images[:5]
    y = clean_labels(LossSpec(trained_mlp), x)[0]
    z = trained_mlp.logits(x)
    loss, _ = loss_and_grad(LossSpec(trained_mlp, kind="logit"), x, y, np.zeros((1, 8, 8), np.float32))
    assert loss == pytest.approx(-float(np.mean(z[np.arange(5), y])), abs=1e-5)
    single, _ = loss_and_grad(LossSpec(trained_mlp, kind="logit"), x[:1], y[:1], np.zeros((1, 8, 8), np.float32))
    assert single == pytest.approx(-float(z[0, y[0]]), abs=1e-5)


def test_logit_shift_moves_logit_loss_but_not_ce_gradient(trained_mlp, blobs):
    c = 2.5
    shifted = trained_mlp.copy()
    shifted.weights[3] = Tensor(trained_mlp.weights[3].data + np.float32(c))
    x = blobs.images[:8]
    y = clean_labels(LossSpec(trained_mlp), x)[0]
    delta = np.full((1, 8, 8), 0.05, np.float32)
    _, g_ce = loss_and_grad(LossSpec(trained_mlp), x, y, delta)
    _, g_ce_shift = loss_and_grad(LossSpec(shifted), x, y, delta)
    np.testing.assert_allclose(g_ce, g_ce_shift, atol=1e-6)
    l_logit, _ = loss_and_grad(LossSpec(trained_mlp, kind="logit"), x, y, delta)
    l_logit_shift, _ = loss_and_grad(LossSpec(shifted, kind="logit"), x, y, delta)
    assert l_logit_shift == pytest.approx(l_logit - c, abs=1e-5)


def test_logit_loss_gradient_matches_finite_differences(rng):
    net = build("cnn-small", (1, 8, 8), 3, seed=4, widths=(3, 4))
    x = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
    y = np.array([0, 1, 2, 1])
    delta = rng.uniform(-0.05, 0.05, size=(1, 8, 8)).astype(np.float32)
    _, grad = loss_and_grad(LossSpec(net, kind="logit"), x, y, delta)
    w64 = [Tensor(w.data, np.float64) for w in net.weights]

    def f(d):
        z = net.forward(Tensor(x.astype(np.float64) + d, np.float64), w64).data
        return -float(np.mean(z[np.arange(4), y]))

    numeric = central_difference(f, delta.astype(np.float64), 1e-3)
    assert gradient_mismatch(grad, numeric).size == 0


@settings(max_examples=25, deadline=None)
@given(beta=st.floats(0.05, 5.0), scale=st.floats(0.0, 0.5), seed=st.integers(0, 1000))
def test_clipped_loss_never_exceeds_beta(trained_cnn, blobs, beta, scale, seed):
    delta = np.random.default_rng(seed).uniform(-scale, scale, size=(1, 8, 8)).astype(np.float32)
    x = blobs.images[:6]
    for i in range(6):
        loss, _ = loss_and_grad(LossSpec(trained_cnn, beta=beta), x[i:i + 1],
                                clean_labels(LossSpec(trained_cnn), x[i:i + 1])[0], delta)
        assert loss <= np.float32(beta)


def test_loss_and_gradient_ignore_batch_order(trained_cnn, blobs):
    x = blobs.images[:20]
    y = clean_labels(LossSpec(trained_cnn), x)[0]
    perm = np.random.default_rng(2).permutation(20)
    delta = np.full((1, 8, 8), 0.1, np.float32)
    l1, g1 = loss_and_grad(LossSpec(trained_cnn), x, y, delta)
    l2, g2 = loss_and_grad(LossSpec(trained_cnn), x[perm], y[perm], delta)
    assert l1 == pytest.approx(l2, abs=1e-6)
    np.testing.assert_allclose(g1, g2, atol=1e-6)


def test_batch_loss_agrees_with_loss_and_grad(trained_cnn, blobs):
    x = blobs.images[:9]
    y = clean_labels(LossSpec(trained_cnn), x)[0]
    d = np.full((1, 8, 8), 0.02, np.float32)
    assert batch_loss(LossSpec(trained_cnn), x, y, d) == loss_and_grad(LossSpec(trained_cnn), x, y, d)[0]


def test_empty_batch_is_a_usage_error(trained_cnn):
    with pytest.raises(UsageError):
        loss_and_grad(LossSpec(trained_cnn), np.zeros((0, 1, 8, 8)), np.zeros(0, int), np.zeros((1, 8, 8)))


@pytest.mark.parametrize("kwargs", [dict(kind="hinge"), dict(beta=0.0), dict(beta=-1.0)])
def test_invalid_loss_specs(trained_cnn, kwargs):
    with pytest.raises(ConfigError):
        LossSpec(trained_cnn, **kwargs)


def test_empty_ensemble_rejected():
    with pytest.raises(ConfigError):
        LossSpec(())
