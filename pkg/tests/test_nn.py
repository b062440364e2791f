import numpy as np
import pytest

from flow3d.core import EmptyGroup, ShapeMismatch, rng_from
from flow3d.nn import (BatchNormParams, LinearParams, MlpParams, MlpSpec,
                       huber, init_mlp_params, mlp_backward, mlp_forward,
                       residual_loss, set_pool, set_pool_backward)

from conftest import check_grad_entries, fd_close


def _identity_params(width):
    return MlpParams([LinearParams(np.eye(width), np.zeros(width))], [None])


def test_mlp_identity_linear():
    spec = MlpSpec((3,), use_batchnorm=False, final_activation="none")
    out, _ = mlp_forward(spec, _identity_params(3), np.array([[1.0, 2, 3]]))
    assert np.array_equal(out, [[1, 2, 3]])


def test_mlp_relu():
    spec = MlpSpec((3,), use_batchnorm=False, final_activation="relu")
    out, _ = mlp_forward(spec, _identity_params(3), np.array([[-1.0, 0, 2]]))
    assert np.array_equal(out, [[0, 0, 2]])


def test_mlp_shape_mismatch():
    spec = MlpSpec((3,), use_batchnorm=False)
    with pytest.raises(ShapeMismatch):
        mlp_forward(spec, _identity_params(3), np.zeros((2, 4)))


def test_mlp_matches_straight_line_reference(rng):
    spec = MlpSpec((5, 4), use_batchnorm=False, final_activation="relu")
    params = init_mlp_params(spec, 6, 0)
    x = rng.normal(size=(7, 6))
    out, _ = mlp_forward(spec, params, x)
    h = np.maximum(x @ params.linears[0].weight.T + params.linears[0].bias, 0)
    ref = np.maximum(h @ params.linears[1].weight.T + params.linears[1].bias, 0)
    assert np.allclose(out, ref, atol=1e-14)


def test_mlp_linear_backward_closed_form(rng):
    spec = MlpSpec((4,), use_batchnorm=False, final_activation="none")
    params = init_mlp_params(spec, 3, 1)
    x = rng.normal(size=(5, 3))
    _, tape = mlp_forward(spec, params, x)
    g = rng.normal(size=(5, 4))
    gin, gp = mlp_backward(tape, g)
    assert np.allclose(gin, g @ params.linears[0].weight, atol=1e-14)
    assert np.allclose(gp.linears[0].weight, g.T @ x, atol=1e-14)
    assert np.allclose(gp.linears[0].bias, g.sum(axis=0), atol=1e-14)


@pytest.mark.parametrize("use_bn,mode", [(False, "train"), (True, "train"),
                                         (True, "infer")])
def test_mlp_finite_differences(rng, use_bn, mode):
    spec = MlpSpec((6, 4), use_batchnorm=use_bn, final_activation="relu")
    for trial in range(7):
        params = init_mlp_params(spec, 5, trial)
        for lin in params.linears:
            # zero biases put dead-row pre-activations exactly on the ReLU
            # kink, where finite differences are systematically wrong
            lin.bias[:] = rng.normal(scale=0.05, size=lin.bias.shape)
        if use_bn:
            for bn in params.batchnorms:
                bn.running_mean[:] = rng.normal(size=bn.running_mean.shape)
                bn.running_var[:] = rng.uniform(0.5, 2.0, size=bn.running_var.shape)
        x = rng.normal(size=(6, 5))
        w = rng.normal(size=(6, 4))

        def value():
            out, _ = mlp_forward(spec, params.copy(), x, mode)
            return float((out * w).sum())

        out, tape = mlp_forward(spec, params.copy(), x, mode)
        gin, gp = mlp_backward(tape, w)
        check_grad_entries(x, gin, value, 6, rng)
        for k in range(2):
            check_grad_entries(params.linears[k].weight, gp.linears[k].weight,
                               value, 4, rng)
            check_grad_entries(params.linears[k].bias, gp.linears[k].bias,
                               value, 2, rng)
            if use_bn:
                check_grad_entries(params.batchnorms[k].scale,
                                   gp.batchnorms[k].scale, value, 2, rng)
                check_grad_entries(params.batchnorms[k].shift,
                                   gp.batchnorms[k].shift, value, 2, rng)


def test_batchnorm_infer_is_per_row_affine(rng):
    spec = MlpSpec((4,), use_batchnorm=True, final_activation="none")
    params = init_mlp_params(spec, 3, 2)
    params.batchnorms[0].running_mean[:] = rng.normal(size=4)
    params.batchnorms[0].running_var[:] = rng.uniform(0.5, 2, size=4)
    row = rng.normal(size=3)
    batch_a = np.vstack([row, rng.normal(size=(4, 3))])
    batch_b = np.vstack([row, rng.normal(size=(2, 3))])
    out_a, _ = mlp_forward(spec, params, batch_a, "infer")
    out_b, _ = mlp_forward(spec, params, batch_b, "infer")
    assert np.array_equal(out_a[0], out_b[0])


def test_batchnorm_train_updates_running_stats(rng):
    spec = MlpSpec((4,), use_batchnorm=True, final_activation="none")
    params = init_mlp_params(spec, 3, 0)
    x = rng.normal(size=(8, 3))
    z = x @ params.linears[0].weight.T + params.linears[0].bias
    mlp_forward(spec, params, x, "train")
    bn = params.batchnorms[0]
    assert np.allclose(bn.running_mean, 0.1 * z.mean(axis=0), atol=1e-12)
    assert np.allclose(bn.running_var, 0.9 + 0.1 * z.var(axis=0), atol=1e-12)


def test_set_pool_max_example():
    rows = np.array([[1.0, 5.0], [3.0, 2.0]])
    out, _ = set_pool(rows, np.array([0, 2]), "max")
    assert np.array_equal(out, [[3, 5]])


def test_set_pool_singleton_both_modes():
    rows = np.array([[1.0, -2.0, 3.0]])
    for mode in ("max", "avg"):
        out, _ = set_pool(rows, np.array([0, 1]), mode)
        assert np.array_equal(out, rows)


def test_set_pool_empty_group_raises():
    with pytest.raises(EmptyGroup):
        set_pool(np.zeros((2, 3)), np.array([0, 2, 2]), "max")


def test_set_pool_permutation_invariance(rng):
    rows = rng.normal(size=(10, 4))
    out, _ = set_pool(rows, np.array([0, 6, 10]), "max")
    perm = np.concatenate([rng.permutation(6), 6 + rng.permutation(4)])
    out2, _ = set_pool(rows[perm], np.array([0, 6, 10]), "max")
    assert np.array_equal(out, out2)


def test_set_pool_max_tie_goes_to_first_member():
    rows = np.array([[2.0], [2.0], [1.0]])
    out, tape = set_pool(rows, np.array([0, 3]), "max")
    assert tape.argmax[0, 0] == 0
    g = set_pool_backward(tape, np.array([[1.0]]))
    assert np.array_equal(g, [[1.0], [0.0], [0.0]])


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_set_pool_finite_differences(rng, mode):
    for trial in range(22):
        counts = rng.integers(1, 5, size=3)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        rows = rng.normal(size=(int(offsets[-1]), 3))
        w = rng.normal(size=(3, 3))

        def value():
            out, _ = set_pool(rows, offsets, mode)
            return float((out * w).sum())

        _, tape = set_pool(rows, offsets, mode)
        g = set_pool_backward(tape, w)
        check_grad_entries(rows, g, value, 5, rng)


def test_huber_closed_forms():
    loss, grad = huber(np.zeros(3), 1.0)
    assert loss == 0.0 and np.array_equal(grad, np.zeros(3))
    loss, grad = huber(np.array([0.6, 0, 0]), 1.0)
    assert abs(loss - 0.18) < 1e-15
    assert np.allclose(grad, [0.6, 0, 0])
    loss, grad = huber(np.array([3.0, 4.0, 0]), 1.0)
    assert abs(loss - 4.5) < 1e-15
    assert np.allclose(grad, [0.6, 0.8, 0])


def test_huber_continuity_at_delta():
    delta = 1.0
    for eps in (1e-9, -1e-9):
        rho = delta + eps
        lo, gl = huber(np.array([rho, 0, 0]), delta)
        hi, gh = huber(np.array([delta, 0, 0]), delta)
        assert abs(lo - hi) < 1e-8
        assert np.linalg.norm(gl - gh) < 1e-8


def test_huber_gradient_finite_differences(rng):
    for trial in range(20):
        r = rng.normal(size=3) * (2.0 if trial % 2 else 0.3)

        def value():
            return huber(r, 1.0)[0]

        _, grad = huber(r, 1.0)
        check_grad_entries(r, grad, value, 3, rng)


@pytest.mark.parametrize("variant", ["huber_norm", "l2_norm",
                                     "per_coord_smooth_l1"])
def test_residual_loss_matches_scalar_huber(rng, variant):
    r = rng.normal(size=(20, 3))
    loss, grad = residual_loss(r, variant, 1.0)
    assert loss.shape == (20,) and grad.shape == (20, 3)
    if variant == "huber_norm":
        for i in range(20):
            l, g = huber(r[i], 1.0)
            assert fd_close(loss[i], l)
            assert np.allclose(grad[i], g, atol=1e-12)


@pytest.mark.parametrize("variant", ["huber_norm", "l2_norm",
                                     "per_coord_smooth_l1"])
def test_residual_loss_finite_differences(rng, variant):
    r = rng.normal(size=(8, 3))

    def value():
        return float(residual_loss(r, variant, 1.0)[0].sum())

    _, grad = residual_loss(r, variant, 1.0)
    check_grad_entries(r, grad, value, 10, rng)
