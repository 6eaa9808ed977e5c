import math

import numpy as np
import pytest

from dpnkit import dirichlet
from dpnkit.autodiff import GraphError
from dpnkit.priornet import (
    LOGIT_CLAMP,
    LossWeights,
    TargetConcentration,
    flat_alpha,
    forward_alpha,
    logits,
    loss_forward_kl,
    loss_joint,
    loss_nll,
    loss_reverse_kl,
    mlp,
    mlp_from_params,
    predict,
    target_alpha,
)


def bias_model(bias, in_dim=1):
    """A model whose logits are ``bias`` regardless of the input."""
    bias = np.asarray(bias, dtype=np.float64)
    return mlp_from_params({"W0": np.zeros((in_dim, bias.size)), "b0": bias})


# -- read-outs -----------------------------------------------------------


def test_zero_logits_give_flat_dirichlet():
    np.testing.assert_array_equal(forward_alpha(bias_model(np.zeros(5)), [0.3]), np.ones(5))


def test_exact_exponentiation():
    alpha = forward_alpha(bias_model([math.log(100)] + [0.0] * 9), [0.0])
    np.testing.assert_allclose(alpha, [100.0] + [1.0] * 9, rtol=1e-14)


def test_huge_logit_is_clamped():
    alpha = forward_alpha(bias_model([1e6, 0.0, -1e6]), [0.0])
    assert alpha[0] == math.exp(LOGIT_CLAMP)
    assert alpha[2] == math.exp(-LOGIT_CLAMP)
    assert np.all(np.isfinite(alpha))


def test_batch_and_single_inputs_agree():
    model = mlp(3, 4, hidden=(6,), seed=2)
    x = np.random.default_rng(0).normal(size=(5, 3))
    batch = forward_alpha(model, x)
    assert batch.shape == (5, 4)
    np.testing.assert_allclose(forward_alpha(model, x[2]), batch[2], rtol=1e-13)
    np.testing.assert_array_equal(predict(model, x), np.argmax(logits(model, x), axis=1))


def test_mlp_from_params_validates():
    with pytest.raises(GraphError):
        mlp_from_params({"W0": np.ones((2, 2))})
    with pytest.raises(ValueError):
        mlp_from_params({"W0": np.ones((2, 2)), "b0": np.zeros(2)}, activation="tanh")


def test_model_metadata():
    model = mlp(7, 3, hidden=(5, 4), seed=0, dropout_keep=0.5)
    assert model.meta["in_dim"] == 7
    assert model.meta["num_classes"] == 3
    assert model.meta["dropout_keep"] == 0.5
    assert sorted(model.params) == ["W0", "W1", "W2", "b0", "b1", "b2"]


# -- targets --------------------------------------------------------------------


def test_target_examples():
    tc = TargetConcentration(beta_in=100.0, beta_ood=1.0, num_classes=10)
    np.testing.assert_array_equal(target_alpha(0, tc), [101.0] + [1.0] * 9)
    wide = target_alpha(2, TargetConcentration(100.0, 1.0, 4), "ood")
    np.testing.assert_array_equal(wide, [1.0, 1.0, 2.0, 1.0])
    assert np.argmax(wide) == 2
    assert dirichlet.predictive_entropy(wide) > 0.9 * math.log(4)


def test_target_small_beta_tends_to_flat():
    tc = TargetConcentration(1e-12, 1e-12, 3)
    np.testing.assert_allclose(target_alpha(1, tc), flat_alpha(3), atol=1e-11)


def test_target_array_labels_and_errors():
    tc = TargetConcentration(5.0, 1.0, 3)
    out = target_alpha(np.array([0, 2]), tc)
    np.testing.assert_array_equal(out, [[6, 1, 1], [1, 1, 6]])
    for bad in (3, -1):
        with pytest.raises(IndexError):
            target_alpha(bad, tc)
    with pytest.raises(ValueError):
        target_alpha(0, tc, domain="adv")
    with pytest.raises(ValueError):
        TargetConcentration(0.0, 1.0, 3)
    with pytest.raises(ValueError):
        LossWeights(-1.0)


# -- losses ----------------------------------------------------------------------


@pytest.mark.parametrize("loss", [loss_forward_kl, loss_reverse_kl])
def test_divergence_zero_at_target(loss):
    target = np.array([5.0, 2.0, 0.5])
    model = bias_model(np.log(target))
    bound = loss(model, np.zeros((2, 1)), target)
    value, grads = bound.value_and_grad()
    assert abs(value) < 1e-12
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-10)


def test_divergence_values_match_closed_form():
    model = mlp(2, 3, hidden=(4,), seed=5)
    x = np.random.default_rng(1).normal(size=(6, 2))
    target = target_alpha(np.array([0, 1, 2, 0, 1, 2]), TargetConcentration(10.0, 1.0, 3))
    alpha = forward_alpha(model, x)
    fwd = loss_forward_kl(model, x, target)
    rev = loss_reverse_kl(model, x, target)
    np.testing.assert_allclose(fwd.rows(), dirichlet.dirichlet_kl(target, alpha), rtol=1e-10)
    np.testing.assert_allclose(rev.rows(), dirichlet.dirichlet_kl(alpha, target), rtol=1e-10)
    assert fwd.value() == pytest.approx(np.mean(dirichlet.dirichlet_kl(target, alpha)), rel=1e-12)


def test_nll_examples():
    assert loss_nll(bias_model(np.zeros(10)), [0.0], [3]).value() == pytest.approx(math.log(10), abs=1e-14)
    values = [loss_nll(bias_model([m, 0.0, 0.0]), [0.0], [0]).value() for m in (0.0, 2.0, 8.0, 20.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-8


def test_nll_rejects_bad_labels():
    model = bias_model(np.zeros(3))
    with pytest.raises(IndexError):
        loss_nll(model, [0.0], [3])
    with pytest.raises(ValueError):
        loss_nll(model, np.zeros((2, 1)), [0])


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        loss_reverse_kl(bias_model(np.zeros(3)), np.zeros((2, 1)), np.ones(4))


def _joint_setup():
    model = mlp(2, 3, hidden=(5,), seed=9)
    rng = np.random.default_rng(4)
    x_in, y_in = rng.normal(size=(4, 2)), np.array([0, 1, 2, 1])
    x_ood = rng.normal(size=(3, 2))
    tc = TargetConcentration(100.0, 1.0, 3)
    return model, (x_in, y_in), x_ood, tc


def test_joint_with_zero_gamma_is_in_domain_loss():
    model, (x_in, y_in), x_ood, tc = _joint_setup()
    alone = loss_reverse_kl(model, x_in, target_alpha(y_in, tc))
    for ood in (None, (x_ood, None)):
        joint = loss_joint(model, (x_in, y_in), ood, tc, LossWeights(0.0))
        assert joint.value() == alone.value()


@pytest.mark.parametrize("divergence", ["forward", "reverse"])
def test_joint_combines_blocks(divergence):
    model, (x_in, y_in), x_ood, tc = _joint_setup()
    single = loss_forward_kl if divergence == "forward" else loss_reverse_kl
    a = single(model, x_in, target_alpha(y_in, tc)).value()
    b = single(model, x_ood, flat_alpha(3, 3)).value()
    joint = loss_joint(model, (x_in, y_in), (x_ood, None), tc, LossWeights(10.0), divergence)
    assert joint.value() == pytest.approx(a + 10.0 * b, rel=1e-12)


def test_joint_labelled_ood_uses_beta_ood():
    model, (x_in, y_in), x_ood, tc = _joint_setup()
    y_ood = np.array([2, 0, 1])
    b = loss_reverse_kl(model, x_ood, target_alpha(y_ood, tc, "ood")).value()
    a = loss_reverse_kl(model, x_in, target_alpha(y_in, tc)).value()
    joint = loss_joint(model, (x_in, y_in), (x_ood, y_ood), tc, LossWeights(30.0))
    assert joint.value() == pytest.approx(a + 30.0 * b, rel=1e-12)


def test_joint_errors():
    model, (x_in, y_in), x_ood, tc = _joint_setup()
    with pytest.raises(ValueError):
        loss_joint(model, (np.zeros((0, 2)), np.zeros(0, dtype=int)), None, tc, LossWeights(0.0))
    with pytest.raises(ValueError):
        loss_joint(model, (x_in, y_in), None, tc, LossWeights(1.0))


def test_loss_heads_do_not_grow_the_graph():
    model, (x_in, y_in), x_ood, tc = _joint_setup()
    n = len(model.nodes)
    for _ in range(3):
        loss_joint(model, (x_in, y_in), (x_ood, None), tc, LossWeights(1.0)).value()
        loss_nll(model, x_in, y_in).value()
    assert len(model.nodes) == n
