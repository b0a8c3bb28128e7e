import math

import numpy as np
import pytest

from vtn import autodiff as ad
from vtn import losses
from vtn.autodiff import Tensor
from vtn.errors import ShapeError
from vtn.losses import (LossWeights, dal, default_feature_weights,
                        guided_weight_matrix, main_loss, total_loss)
from vtn.model import VtnConfig, VtnModel


def scalar_main_loss(y, x_tgt, gamma, r):
    """Independent scalar-loop recomputation of the weighted L1 loss."""
    d, n1 = x_tgt.shape
    n = n1 - 1
    total = 0.0
    for col in range(n):
        for j in range(r):
            for i in range(len(gamma)):
                diff = y[j * len(gamma) + i, col] - x_tgt[j * len(gamma) + i, col + 1]
                total += gamma[i] / r * abs(diff)
    return total / n


def scalar_dal(attn, nu):
    n_src, n_tgt = attn[0][0].shape
    total = 0.0
    for layer in attn:
        for a in layer:
            for n in range(1, n_src + 1):
                for m in range(1, n_tgt + 1):
                    w = 1.0 - math.exp(-((n / n_src - m / n_tgt) ** 2) / (2 * nu * nu))
                    total += w * abs(a[n - 1, m - 1])
    return total / (n_src * n_tgt * len(attn) * len(attn[0]))


def test_default_weights():
    g = default_feature_weights(28)
    assert len(g) == 31
    assert np.allclose(g[:28], 1.0 / 28)
    assert g[28] == 0.1
    assert g[29] == g[30] == 1.0 / 50


def test_main_loss_exact_fit_is_zero():
    rng = np.random.default_rng(0)
    x = np.concatenate([np.zeros((4, 1)), rng.normal(size=(4, 5))], axis=1)
    # output column n predicts target column n+1
    y = np.concatenate([x[:, 1:], np.zeros((4, 1))], axis=1)
    loss = main_loss(Tensor(y), x, np.full(4, 0.25), r=1)
    assert loss.item() == 0.0


def test_main_loss_single_feature_arithmetic():
    # one feature, gamma=1, one step, |y - x| = 2 -> loss 2
    x = np.array([[0.0, 3.0]])
    y = np.array([[1.0, 9.9]])
    loss = main_loss(Tensor(y), x, np.ones(1), r=1)
    assert loss.item() == 2.0


def test_main_loss_scalar_oracle():
    rng = np.random.default_rng(1)
    gamma = default_feature_weights(2)  # 5 raw features
    for _ in range(20):
        r = int(rng.integers(1, 4))
        n = int(rng.integers(1, 9))
        d = 5 * r
        x = np.concatenate([np.zeros((d, 1)), rng.normal(size=(d, n))], axis=1)
        y = rng.normal(size=(d, n + 1))
        got = main_loss(Tensor(y), x, gamma, r).item()
        want = scalar_main_loss(y, x, gamma, r)
        assert abs(got - want) < 1e-12


def test_main_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        main_loss(Tensor(np.zeros((4, 3))), np.zeros((4, 4)), np.ones(4), 1)


def test_guided_matrix_diagonal_zero():
    g = guided_weight_matrix(6, 6, 0.3)
    assert np.array_equal(np.diag(g), np.zeros(6))
    g2 = guided_weight_matrix(4, 8, 0.3)
    for n in range(1, 5):
        assert g2[n - 1, 2 * n - 1] == 0.0  # n/4 == 2n/8


def test_guided_matrix_cell_value():
    g = guided_weight_matrix(4, 4, 0.3)
    assert abs(g[3, 0] - (1.0 - math.exp(-(0.75 ** 2) / 0.18))) < 1e-15


def test_guided_matrix_range_and_symmetry():
    g = guided_weight_matrix(5, 9, 0.3)
    assert (g >= 0.0).all() and (g < 1.0).all()
    assert np.array_equal(g.T, guided_weight_matrix(9, 5, 0.3))


def test_guided_matrix_corner_limit():
    g = guided_weight_matrix(50, 5000, 0.3)
    assert abs(g[49, 0] - (1.0 - math.exp(-1.0 / 0.18))) < 1e-3


def test_dal_uniform_attention():
    n_src, n_tgt = 6, 4
    a = [[Tensor(np.full((n_src, n_tgt), 1.0 / n_src)) for _ in range(2)]]
    g = guided_weight_matrix(n_src, n_tgt, 0.3)
    got = dal(a, 0.3).item()
    assert abs(got - g.mean() / n_src) < 1e-15


def test_dal_large_nu_vanishes():
    rng = np.random.default_rng(2)
    a = rng.random((5, 7))
    a /= a.sum(axis=0)
    assert dal([[Tensor(a)]], 1e6).item() < 1e-10


def test_dal_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n_src = int(rng.integers(1, 8))
        n_tgt = int(rng.integers(1, 8))
        n_l = int(rng.integers(1, 3))
        n_h = int(rng.integers(1, 3))
        attn = [[rng.random((n_src, n_tgt)) for _ in range(n_h)] for _ in range(n_l)]
        got = dal([[Tensor(a) for a in layer] for layer in attn], 0.3).item()
        want = scalar_dal(attn, 0.3)
        assert abs(got - want) < 1e-12


def test_loss_gradchecks():
    rng = np.random.default_rng(4)
    gamma = np.full(3, 1.0 / 3)
    x = np.concatenate([np.zeros((3, 1)), rng.normal(size=(3, 4))], axis=1)
    y = Tensor(rng.normal(size=(3, 5)))
    err = ad.grad_check(lambda t: main_loss(t, x, gamma, 1), y)
    assert err < 1e-4
    logits = Tensor(rng.normal(size=(4, 5)))
    err = ad.grad_check(
        lambda t: dal([[ad.masked_softmax_columns(t, np.zeros((4, 5)))]], 0.3), logits)
    assert err < 1e-4


def _tiny_model():
    cfg = VtnConfig(L=1, H=2, d=8, d_ffn=16, n_mcc=1, r=1, e=4,
                    n_speakers=2, dropout_rate=0.0)
    return VtnModel.init(cfg, seed=5, speakers=["a", "b"])


def _item(rng, model, k, kp, n_src=5, n_tgt=4):
    d = model.config.D
    src = rng.normal(size=(d, n_src))
    tgt0 = np.concatenate([np.zeros((d, 1)), rng.normal(size=(d, n_tgt))], axis=1)
    return (k, kp, src, tgt0)


def test_total_loss_cross_only_no_weights():
    model = _tiny_model()
    rng = np.random.default_rng(6)
    weights = LossWeights(lambda_dal=0.0, lambda_iml=0.0,
                          gamma=default_feature_weights(1))
    batch = [_item(rng, model, 0, 1), _item(rng, model, 1, 0)]
    total, bd = total_loss(model, batch, weights)
    mains = []
    for k, kp, src, tgt0 in batch:
        y, _ = model.forward(src, tgt0, k=k, kp=kp)
        mains.append(main_loss(y, tgt0, weights.gamma, 1).item())
    assert abs(total.item() - np.mean(mains)) < 1e-12
    assert abs(bd["main"] - np.mean(mains)) < 1e-12


def test_total_loss_identity_only():
    model = _tiny_model()
    rng = np.random.default_rng(7)
    weights = LossWeights(lambda_dal=2000.0, lambda_iml=1.0,
                          gamma=default_feature_weights(1))
    item = _item(rng, model, 0, 0)
    total, bd = total_loss(model, [item], weights)
    k, kp, src, tgt0 = item
    y, attn = model.forward(src, tgt0, k=k, kp=kp)
    comp = (main_loss(y, tgt0, weights.gamma, 1).item()
            + 2000.0 * dal(attn, weights.nu).item())
    assert abs(total.item() - comp) < 1e-12
    assert bd["iml"] == pytest.approx(comp, abs=1e-12)


def test_total_loss_recomposition_oracle():
    model = _tiny_model()
    rng = np.random.default_rng(8)
    weights = LossWeights(lambda_dal=11.0, lambda_iml=0.7,
                          gamma=default_feature_weights(1))
    cross = [_item(rng, model, 0, 1), _item(rng, model, 1, 0)]
    ident = [_item(rng, model, 0, 0), _item(rng, model, 1, 1)]
    total, bd = total_loss(model, cross + ident, weights)

    def composite(items):
        vals = []
        for k, kp, src, tgt0 in items:
            y, attn = model.forward(src, tgt0, k=k, kp=kp)
            vals.append(main_loss(y, tgt0, weights.gamma, 1).item()
                        + 11.0 * dal(attn, weights.nu).item())
        return np.mean(vals)

    want = composite(cross) + 0.7 * composite(ident)
    assert abs(total.item() - want) < 1e-12


def test_total_loss_empty_batch():
    with pytest.raises(ShapeError):
        total_loss(_tiny_model(), [], LossWeights(gamma=default_feature_weights(1)))
