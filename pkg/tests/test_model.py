import math

import numpy as np
import pytest

from fedutr import numeric as nx
from fedutr.model import (MODES, BatchFusion, CifmParams, ClientModel, SarParams, batch_loss_and_grads,
                          batch_scores, cifm_forward, cifm_size, count_parameters, lam_param_count,
                          load_checkpoint, loss_and_grads, loss_value, parameter_count, predict, sar_forward,
                          save_checkpoint)

import helpers
from helpers import NEGATIVES, POSITIVES, gradient_errors, random_model


def _straight_line_cifm(cifm, e, eps=nx.LN_EPS):
    # recomputation without the package's kernels
    z = np.maximum(cifm.W @ e + cifm.b, 0) + e
    mu = z.mean()
    var = ((z - mu) ** 2).mean()
    return cifm.gamma * (z - mu) / math.sqrt(var + eps) + cifm.beta


def test_zero_mlp_is_layer_norm_of_input():
    d = 5
    e = nx.make_rng(0).normal(size=d)
    cifm = CifmParams(np.zeros((d, d)), np.zeros(d), np.ones(d), np.zeros(d))
    # relu(0) + e = e
    np.testing.assert_allclose(cifm_forward(cifm, e), nx.layer_norm(e, np.ones(d), np.zeros(d)))


def test_zero_gain_returns_beta():
    cifm = CifmParams.init(4, nx.make_rng(1))
    cifm.gamma[:] = 0
    cifm.beta[:] = [1, 2, 3, 4]
    np.testing.assert_array_equal(cifm_forward(cifm, nx.make_rng(2).normal(size=4)), [1, 2, 3, 4])


@pytest.mark.parametrize("seed", range(5))
def test_cifm_matches_recomputation(seed):
    model = random_model("fedutr", seed)
    e = model.items[3]
    np.testing.assert_allclose(cifm_forward(model.cifm, e), _straight_line_cifm(model.cifm, e), atol=1e-12)


def test_sar_gate_examples():
    model = random_model("fedutr", 0)
    e = model.items[0]
    G = np.maximum(model.cifm.W @ e + model.cifm.b, 0)
    half = nx.layer_norm(0.5 * G + 0.5 * e, model.cifm.gamma, model.cifm.beta)
    np.testing.assert_allclose(sar_forward(model.cifm, SarParams(0, 0), e, 9), half, atol=1e-12)
    assert SarParams(50.0, -0.3).gate(0) == pytest.approx(float(nx.sigmoid(np.array(-0.3))))
    universal = nx.layer_norm(e, model.cifm.gamma, model.cifm.beta)
    np.testing.assert_allclose(sar_forward(model.cifm, SarParams(0, -20), e, 9), universal, atol=1e-6)
    with pytest.raises(ValueError):
        SarParams().gate(-1)


def test_sar_weight_grows_with_history():
    sar = SarParams(0.7, -1.0)
    alphas = [sar.gate(n) for n in range(0, 200, 7)]
    assert all(a < b for a, b in zip(alphas, alphas[1:]))


def test_predict_closed_forms():
    d = 2
    items = np.array([[1.0, 0.0], [math.log(3), 0.0]])
    model = ClientModel(np.array([0.0, 1.0]), items, mode="fcf_baseline")
    assert predict(model, 0) == 0.5
    model.user_vec = np.array([1.0, 0.0])
    assert predict(model, 1) == pytest.approx(0.75)
    assert model.scores(np.array([0, 1])).tolist() == [1.0, math.log(3)]
    with pytest.raises(IndexError):
        model.scores(np.array([d]))


def test_rec_loss_at_one_half():
    model = ClientModel(np.zeros(3), np.ones((2, 3)), mode="fcf_baseline")
    loss, _ = loss_and_grads(model, [0], [1])
    assert loss.rec_loss == pytest.approx(2 * math.log(2))


def test_l1_penalty_counts_every_fusion_parameter():
    d = 2
    cifm = CifmParams.from_flat(np.full(cifm_size(d), 0.1), d)
    model = ClientModel(np.ones(d), np.ones((3, d)), cifm, mode="fedutr")
    loss, _ = loss_and_grads(model, [0], [1], lam=1.0)
    assert loss.l1_penalty == pytest.approx(1.0)
    assert loss.total == pytest.approx(loss.rec_loss + 1.0)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(mode, seed):
    errors = gradient_errors(mode, seed)
    assert max(errors.values()) <= 1e-4, errors


@pytest.mark.parametrize("mode", MODES)
def test_reference_loss_agrees_with_the_package(mode):
    model = random_model(mode, 1)
    ref = helpers.reference_loss(helpers.reference_params(model), mode, model.n_interactions)
    assert float(ref) == pytest.approx(loss_value(model, POSITIVES, NEGATIVES), rel=1e-13)


def test_oracle_flags_a_slightly_wrong_gradient():
    model = random_model("fedutr", 0)
    _, g = loss_and_grads(model, POSITIVES, NEGATIVES)
    p = helpers.reference_params(model)
    assert helpers.max_rel_error(p, "gamma", g.cifm.gamma, "fedutr", 7) < 1e-5
    assert helpers.max_rel_error(p, "gamma", g.cifm.gamma * 1.001, "fedutr", 7) > 1e-4


def test_repeated_items_accumulate():
    model = random_model("fedutr", 4)
    _, g = loss_and_grads(model, [0, 0], [1])
    _, one = loss_and_grads(model, [0], [1])
    _, extra = loss_and_grads(model, [0], [])
    assert g.item_ids.tolist() == [0, 1]
    # the duplicated positive contributes two copies of its row gradient
    np.testing.assert_allclose(g.items[0], one.items[0] + extra.items[0], atol=1e-12)


def test_loss_needs_a_positive():
    with pytest.raises(ValueError):
        loss_and_grads(random_model("fcf_baseline", 0), [], [1])


def test_parameter_budget():
    assert parameter_count(ClientModel(np.zeros(32), np.zeros((5370, 32)), mode="fcf_baseline")) == 687_488
    # user vector + item table + fusion layer + element-wise gate
    assert count_parameters("fedutr", 100, 8) == 100 * 8 + 8 + cifm_size(8) + lam_param_count(8)
    assert count_parameters("fedutr", 100, 8, with_lam=False) == 100 * 8 + 8 + cifm_size(8)
    assert count_parameters("fedutr_sar", 100, 8) == count_parameters("fedutr", 100, 8) + 2
    assert count_parameters("no_cifm", 100, 8, include_user=False) == 800


def test_mode_validation():
    with pytest.raises(ValueError):
        ClientModel(np.zeros(2), np.zeros((3, 2)), mode="bert")
    with pytest.raises(ValueError):
        ClientModel(np.zeros(2), np.zeros((3, 2)), mode="fedutr")
    with pytest.raises(nx.ShapeError):
        ClientModel(np.zeros(2), np.zeros((3, 4)), mode="fcf_baseline")


@pytest.mark.parametrize("mode", MODES)
def test_checkpoint_round_trip(tmp_path, mode):
    model = random_model(mode, 2)
    save_checkpoint(tmp_path / mode, model, seed=5, round_=3)
    again, manifest = load_checkpoint(tmp_path / mode)
    assert manifest["seed"] == 5 and manifest["round"] == 3 and manifest["mode"] == mode
    ids = np.arange(model.m)
    assert np.array_equal(again.scores(ids), model.scores(ids))


def _stack_models(mode, seeds, d=6):
    models = [random_model(mode, s, d=d) for s in seeds]
    fusion = alpha = None
    if models[0].cifm is not None:
        fusion = BatchFusion.from_flat(np.stack([m.cifm.flat() for m in models]), d)
        alpha = np.array([m.sar.gate(m.n_interactions) if m.sar else 1.0 for m in models])
    return models, fusion, alpha


@pytest.mark.parametrize("mode", MODES)
def test_batch_kernel_matches_single_client_path(mode):
    models, fusion, alpha = _stack_models(mode, range(4))
    # client j uses j+1 negatives, the rest of its row is padding
    K = POSITIVES.size + NEGATIVES.size
    ids = np.zeros((4, K), dtype=np.int64)
    is_pos = np.zeros((4, K), dtype=bool)
    mask = np.zeros((4, K), dtype=bool)
    for j in range(4):
        row = np.concatenate([POSITIVES, NEGATIVES[:j + 1]])
        ids[j, :row.size] = row
        is_pos[j, :POSITIVES.size] = True
        mask[j, :row.size] = True
    users = np.stack([m.user_vec for m in models])
    e = np.stack([m.items[ids[j]] for j, m in enumerate(models)])
    rec, g_user, g_rows, g_theta, g_pre = batch_loss_and_grads(mode, users, e, fusion, alpha, is_pos, mask)
    for j, m in enumerate(models):
        loss, g = loss_and_grads(m, POSITIVES, NEGATIVES[:j + 1])
        assert rec[j] == pytest.approx(loss.rec_loss, rel=1e-13)
        np.testing.assert_allclose(g_user[j], g.user, atol=1e-13)
        dense = np.zeros_like(m.items)
        np.add.at(dense, ids[j][mask[j]], g_rows[j][mask[j]])
        np.testing.assert_allclose(dense[g.item_ids], g.items, atol=1e-13)
        assert not g_rows[j][~mask[j]].any()
        if g.cifm is not None:
            np.testing.assert_allclose(g_theta[j], g.cifm.flat(), atol=1e-12)
        if g.sar is not None:
            log_n = math.log1p(m.n_interactions)
            assert g_pre[j] * log_n == pytest.approx(g.sar.w_s, abs=1e-12)
            assert g_pre[j] == pytest.approx(g.sar.b_s, abs=1e-12)
    s = batch_scores(mode, users, e, fusion, alpha)
    for j, m in enumerate(models):
        np.testing.assert_allclose(s[j], m.scores(ids[j]), atol=1e-13)
