import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dico import losses as L
from dico import tensor as T
from dico.config import Config, LossConfig
from dico.gradcheck import small_config
from dico.model import DiCoModel
from dico.nn import Linear
from dico.synthdata import build_splits

F64 = np.float64


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def t(x):
    return T.tensor(np.asarray(x, dtype=F64))


def log_softmax(x):
    x = np.asarray(x, dtype=F64)
    return x - x.max() - np.log(np.exp(x - x.max()).sum())


# ---------------------------------------------------------------- global

def test_global_single_pair_is_zero(rng):
    z = unit(rng.normal(size=(1, 4)))
    assert float(L.loss_global(t(z), t(z), 0.07).data) == 0.0


def test_global_equal_similarities():
    z = np.tile(unit(np.ones((1, 3))), (2, 1))
    np.testing.assert_allclose(float(L.loss_global(t(z), t(z), 0.5).data), 2 * np.log(2), atol=1e-12)
    assert abs(2 * np.log(2) - 1.38629) < 1e-5


def test_global_identity_gram():
    val = float(L.loss_global(t(np.eye(2)), t(np.eye(2)), 1.0).data)
    np.testing.assert_allclose(val, 2 * np.log(1 + np.exp(-1)), atol=1e-12)
    assert abs(val - 0.62652) < 1e-5


@given(st.integers(1, 12), st.floats(0.01, 10.0))
def test_global_identical_rows_give_2_ln_b(B, tau):
    z = np.tile(unit(np.arange(1.0, 5.0))[None], (B, 1))
    assert abs(float(L.loss_global(t(z), t(z), tau).data) - 2 * np.log(B)) <= 1e-9


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_infonce_terms_nonnegative(seed, B):
    rng = np.random.default_rng(seed)
    zv, zt = unit(rng.normal(size=(B, 2, 3, 4))), unit(rng.normal(size=(B, 2, 3, 4)))
    assert float(L.loss_global(t(zv[:, 0, 0]), t(zt[:, 0, 0]), 0.1).data) >= 0
    assert float(L.loss_slot(t(zv[:, :, 0]), t(zt[:, :, 0]), 0.1).data) >= 0
    assert float(L.loss_block(t(zv), t(zt), 0.1, bidirectional=True).data) >= 0


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_global_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    zv, zt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    a = float(L.loss_global(t(zv), t(zt), 0.3).data)
    b = float(L.loss_global(t(c * zv), t(zt), 0.3 * c).data)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


# ---------------------------------------------------------------- slot / block

def slot_oracle(zv, zt, tau, bidirectional=False):
    B, K = zv.shape[:2]
    total = 0.0
    for i in range(B):
        for k in range(K):
            row = [zv[i, k] @ zt[j, k] / tau for j in range(B)]
            total -= log_softmax(row)[i]
            if bidirectional:
                col = [zt[i, k] @ zv[j, k] / tau for j in range(B)]
                total -= log_softmax(col)[i]
    return total / B


def test_slot_single_pair_zero(rng):
    z = unit(rng.normal(size=(1, 3, 4)))
    assert float(L.loss_slot(t(z), t(unit(rng.normal(size=(1, 3, 4)))), 0.07).data) == 0.0
    zb = unit(rng.normal(size=(1, 3, 2, 4)))
    assert float(L.loss_block(t(zb), t(zb), 0.07).data) == 0.0


def test_slot_single_slot_is_image_half_of_global(rng):
    zv, zt = unit(rng.normal(size=(5, 4))), unit(rng.normal(size=(5, 4)))
    tau = 0.2
    G = zv @ zt.T / tau
    half = -sum(log_softmax(G[i])[i] for i in range(5)) / 5
    np.testing.assert_allclose(float(L.loss_slot(t(zv[:, None]), t(zt[:, None]), tau).data), half, atol=1e-12)


def test_slot_loop_oracle(rng):
    zv, zt = unit(rng.normal(size=(2, 2, 4))), unit(rng.normal(size=(2, 2, 4)))
    for bi in (False, True):
        np.testing.assert_allclose(float(L.loss_slot(t(zv), t(zt), 0.3, bi).data),
                                   slot_oracle(zv, zt, 0.3, bi), atol=1e-10)


def test_block_single_block_equals_slot(rng):
    zv, zt = unit(rng.normal(size=(3, 2, 1, 4))), unit(rng.normal(size=(3, 2, 1, 4)))
    a = float(L.loss_block(t(zv), t(zt), 0.4).data)
    b = float(L.loss_slot(t(zv[:, :, 0]), t(zt[:, :, 0]), 0.4).data)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_block_loop_oracle(rng):
    zv, zt = unit(rng.normal(size=(2, 2, 2, 4))), unit(rng.normal(size=(2, 2, 2, 4)))
    ref = slot_oracle(zv.reshape(2, 4, 4), zt.reshape(2, 4, 4), 0.3)
    np.testing.assert_allclose(float(L.loss_block(t(zv), t(zt), 0.3).data), ref, atol=1e-10)


def test_shape_mismatch_raises(rng):
    with pytest.raises(T.DimensionError):
        L.loss_slot(t(np.ones((2, 2, 3))), t(np.ones((2, 3, 3))), 0.1)


# ---------------------------------------------------------------- identity

def _classifier(W, b):
    lin = Linear(W.shape[0], W.shape[1], np.random.default_rng(0), F64)
    lin.W.data[:] = W
    lin.b.data[:] = b
    return lin


def test_id_uniform_logits():
    assert abs(float(L.cross_entropy_sum(t([[0.0, 0.0]]), [1]).data) - np.log(2)) < 1e-15
    cls = _classifier(np.zeros((3, 2)), np.zeros(2))
    val = float(L.loss_id(t(np.ones((1, 3))), t(np.ones((1, 3))), [0], cls).data)
    np.testing.assert_allclose(val, 2 * np.log(2), atol=1e-15)


def test_id_saturated_logits():
    assert float(L.cross_entropy_sum(t([[50.0, -50.0]]), [0]).data) < 1e-40


def test_id_loop_oracle(rng):
    cls = _classifier(rng.normal(size=(4, 5)), rng.normal(size=5))
    zv, zt = unit(rng.normal(size=(3, 2, 4))), unit(rng.normal(size=(3, 2, 4)))
    labels = np.array([4, 0, 2])
    ref = 0.0
    for z in (zv, zt):
        for i in range(3):
            for k in range(2):
                logits = z[i, k] @ cls.W.data + cls.b.data
                ref -= log_softmax(logits)[labels[i]]
    np.testing.assert_allclose(float(L.loss_id(t(zv), t(zt), labels, cls).data), ref / 3, atol=1e-10)


def test_id_label_range_checked(rng):
    cls = _classifier(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        L.loss_id(t(np.ones((1, 3))), t(np.ones((1, 3))), [2], cls)


# ---------------------------------------------------------------- reconstruction

class _Rec:
    def __init__(self, A):
        self.assignment = t(A)


class _State:
    def __init__(self, s, iteration=1):
        self.s = t(s)
        self.iteration = iteration

    def flat(self):
        return self.s


def _dec(W, b):
    return _classifier(np.asarray(W, F64), np.asarray(b, F64))


def test_rec_perfect_reconstruction_is_zero(rng):
    A = np.array([[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]])
    s = rng.normal(size=(1, 2, 3))
    dec = _dec(rng.normal(size=(3, 2)), rng.normal(size=2))
    X = L.reconstruct(t(A), t(s), dec).data
    val = L.loss_rec(t(X), t(X), [_Rec(A)], [_Rec(A)], _State(s), _State(s), dec, dec)
    assert float(val.data) == 0.0


def test_rec_norm_definition():
    dec = _dec(np.zeros((3, 2)), np.zeros(2))
    A = np.ones((2, 1, 1))
    Xv = np.zeros((2, 1, 2))
    Xv[0, 0] = [2.0, 0.0]
    s = np.zeros((2, 1, 3))
    val = L.loss_rec(t(Xv), t(np.zeros((2, 1, 2))), [_Rec(A)], [_Rec(A)], _State(s), _State(s), dec, dec)
    assert float(val.data) == 4.0 / 2


def test_rec_loop_oracle(rng):
    B, n, K, D, d = 2, 4, 3, 5, 2
    Av, At = rng.dirichlet(np.ones(K), size=(B, n)), rng.dirichlet(np.ones(K), size=(B, n + 1))
    sv, st_ = rng.normal(size=(B, K, D)), rng.normal(size=(B, K, D))
    Xv, Xt = rng.normal(size=(B, n, d)), rng.normal(size=(B, n + 1, d))
    dv = _dec(rng.normal(size=(D, d)), rng.normal(size=d))
    dt = _dec(rng.normal(size=(D, d)), rng.normal(size=d))
    ref = 0.0
    for A, s, X, dec in ((Av, sv, Xv, dv), (At, st_, Xt, dt)):
        for b in range(B):
            for i in range(X.shape[1]):
                xh = sum(A[b, i, k] * (s[b, k] @ dec.W.data + dec.b.data) for k in range(K))
                ref += float(((xh - X[b, i]) ** 2).sum())
    val = L.loss_rec(t(Xv), t(Xt), [_Rec(Av)], [_Rec(At)], _State(sv), _State(st_), dv, dt)
    np.testing.assert_allclose(float(val.data), ref / B, atol=1e-10)


def test_rec_record_count_must_match_iterations(rng):
    A = np.ones((1, 1, 1))
    with pytest.raises(ValueError):
        L.loss_rec(t(np.zeros((1, 1, 2))), t(np.zeros((1, 1, 2))), [_Rec(A)], [_Rec(A)],
                   _State(np.zeros((1, 1, 3)), 2), _State(np.zeros((1, 1, 3)), 2),
                   _dec(np.zeros((3, 2)), np.zeros(2)), _dec(np.zeros((3, 2)), np.zeros(2)))


# ---------------------------------------------------------------- total

def test_default_weights():
    lc = LossConfig()
    assert (lc.lambda_s, lc.lambda_b, lc.lambda_r) == (0.5, 0.5, 0.01)
    assert (lc.tau_init, lc.tau_s_init, lc.tau_b_init) == (0.07, 0.07, 0.07)


def test_total_zero_weights_keep_global_and_id():
    lc = LossConfig(lambda_s=0.0, lambda_b=0.0, lambda_r=0.0)
    assert L.total_loss((1.0, 2.0, 3.0, 4.0, 5.0, 6.0), lc) == 1.0 + 4.0 + 5.0


def test_total_arithmetic():
    parts = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    # 1 + 0.5*2 + 0.5*3 + 4 + 5 + 0.1*6
    assert L.total_loss(parts, LossConfig(0.5, 0.5, 0.1)) == pytest.approx(13.1, abs=1e-12)
    # 1 + 0.5*2 + 0.1*3 + 4 + 5 + 0.1*6
    assert L.total_loss(parts, LossConfig(0.5, 0.1, 0.1)) == pytest.approx(11.9, abs=1e-12)


def test_total_accepts_mapping_and_rejects_negative():
    parts = dict(zip(L.PART_NAMES, (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)))
    assert L.total_loss(parts, LossConfig(1.0, 1.0, 1.0)) == 21.0
    with pytest.raises(ValueError):
        L.total_loss(parts, LossConfig(-0.1, 0.5, 0.1))


def test_slot_id_switch():
    parts = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    assert L.total_loss(parts, LossConfig(0.0, 0.0, 0.0, slot_id=False)) == 5.0


def test_temperatures_positive():
    temps = L.Temperatures(LossConfig())
    temps.log_tau.data[...] = -40.0
    assert float(temps.tau.data) > 0
    np.testing.assert_allclose(float(L.Temperatures(LossConfig()).tau_s.data), 0.07, rtol=1e-6)


# ---------------------------------------------------------------- per-term gradients

@pytest.fixture(scope="module")
def tiny_model():
    cfg = small_config()
    sp = build_splits(cfg.data, cfg.model.d_raw, 0)
    batch = sp.train.subset(np.arange(3))
    model = DiCoModel(cfg, n_classes=3, seed=0, text_len=batch.text.shape[1])
    return model, batch.image.astype(F64), batch.text.astype(F64)


@pytest.mark.parametrize("term", L.PART_NAMES)
def test_each_term_gradient_matches_finite_differences(term, tiny_model):
    model, image, text = tiny_model
    labels = np.arange(3)

    def f():
        return model.loss(image, text, labels)[1][term]
    params = [p for _, p in model.named_parameters()]
    assert T.finite_difference_check(f, params) <= 1e-6


def test_loss_log_has_six_parts_and_total():
    assert L.LOG_COLUMNS == ("global", "slot", "block", "id_global", "id_slot", "rec", "total")
    assert Config().loss.bidirectional_local is False
