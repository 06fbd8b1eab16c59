import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osparse import dml
from osparse.errors import ContractError, EmptyMask, StateError
from osparse.tensor import Tensor, backward, cosine_map, cross_entropy, grad_check

unit = st.floats(-1, 1, allow_nan=False, width=64)


def oracle_cos(h, p):
    out = np.zeros(h.shape[:2])
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            n = np.linalg.norm(h[i, j])
            out[i, j] = 0.0 if n == 0 else h[i, j] @ p / (n * np.linalg.norm(p))
    return out


def oracle_agm(h, ms, phi_w, phi_b, om_w, om_b):
    """Per-pixel direct formula: residual attention, shared 1x1 scorers, joint softmax."""
    H, W, _ = h.shape
    k = len(ms)
    out = np.zeros((H, W, k + 1))
    for i in range(H):
        for j in range(W):
            logits, bg = [], 0.0
            for m in ms:
                r = m[i, j] * h[i, j] + h[i, j]
                logits.append(r @ phi_w + phi_b)
                bg += r @ om_w + om_b
            logits.append(bg / k)
            z = np.exp(np.array(logits) - max(logits))
            out[i, j] = z / z.sum()
    return out


def oracle_ncm(ms):
    H, W = ms[0].shape
    k = len(ms)
    out = np.zeros((H, W, k + 1))
    for i in range(H):
        for j in range(W):
            logits = [m[i, j] for m in ms] + [sum(1 - m[i, j] for m in ms) / k]
            z = np.exp(np.array(logits))
            out[i, j] = z / z.sum()
    return out


def head(rng, K):
    return dml.HeadParams(
        Tensor(rng.normal(size=(1, 1, K, 1)), True),
        Tensor(rng.normal(size=1), True),
        Tensor(rng.normal(size=(1, 1, K, 1)), True),
        Tensor(rng.normal(size=1), True),
    )


# prototypes -------------------------------------------------------------------


def test_prototype_examples():
    f = np.zeros((1, 3, 2))
    f[0, 0] = [1, 0]
    f[0, 1] = [0, 1]
    f[0, 2] = [7, 7]
    p = dml.compute_prototype(Tensor(f), np.array([[1, 1, 0]]))
    np.testing.assert_allclose(p.data, [0.5, 0.5], atol=1e-15)
    v = np.array([0.3, -2.0, 1.5])
    const = np.broadcast_to(v, (4, 4, 3)).copy()
    np.testing.assert_allclose(dml.compute_prototype(Tensor(const), np.eye(4)).data, v, atol=1e-15)
    with pytest.raises(EmptyMask):
        dml.compute_prototype(Tensor(f), np.zeros((1, 3)))


def test_prototype_ignores_pixel_order():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 5, 4))
    m = rng.random((5, 5)) > 0.4
    perm = rng.permutation(25)
    fp = f.reshape(25, 4)[perm].reshape(5, 5, 4)
    mp = m.reshape(25)[perm].reshape(5, 5)
    np.testing.assert_allclose(dml.compute_prototype(Tensor(f), m).data, dml.compute_prototype(Tensor(fp), mp).data, atol=1e-14)


def test_update_dynamic_examples():
    bank = dml.PrototypeBank(0.001, frozenset({1}))
    dml.update_dynamic(bank, 1, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(bank.get(1), [1.0, 0.0])
    dml.update_dynamic(bank, 1, np.array([0.0, 1.0]))
    np.testing.assert_allclose(bank.get(1), [0.001, 0.999], atol=1e-15)
    for alpha, want in ((1.0, [1.0, 0.0]), (0.0, [0.0, 1.0])):
        b = dml.PrototypeBank(alpha, frozenset({1}), {1: np.array([1.0, 0.0])})
        np.testing.assert_array_equal(dml.update_dynamic(b, 1, np.array([0.0, 1.0])).get(1), want)


def test_update_dynamic_guards():
    bank = dml.PrototypeBank(0.5, frozenset({1, 2}))
    for bad in (0, 9):
        with pytest.raises(ContractError):
            dml.update_dynamic(bank, bad, np.ones(2))
    with pytest.raises(ContractError):
        dml.update_dynamic(bank, 1, np.array([np.nan, 0.0]))
    with pytest.raises(StateError):
        bank.get(2)
    assert bank.mode(2) == "static" and 0 not in bank


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.99), arrays(np.float64, 3, elements=unit), arrays(np.float64, 3, elements=unit))
def test_ema_converges_geometrically(alpha, start, target):
    bank = dml.PrototypeBank(alpha, frozenset({1}), {1: start.copy()})
    gap = np.linalg.norm(start - target)
    for _ in range(5):
        dml.update_dynamic(bank, 1, target)
        new_gap = np.linalg.norm(bank.get(1) - target)
        assert new_gap == pytest.approx(alpha * gap, abs=1e-12)
        gap = new_gap


def test_effective_prototypes_per_phase():
    rng = np.random.default_rng(1)
    f = Tensor(rng.normal(size=(4, 4, 3)))
    regions = {1: np.eye(4, dtype=bool), 9: ~np.eye(4, dtype=bool)}
    static = {c: dml.compute_prototype(f, m).data for c, m in regions.items()}
    bank = dml.PrototypeBank(0.25, frozenset({1}))

    early = dml.effective_prototypes(bank, f, regions, "train-early", {1})
    for c in regions:
        np.testing.assert_array_equal(early[c].data, static[c])
    assert 1 not in bank

    with pytest.raises(StateError):
        dml.effective_prototypes(bank, f, regions, "test", {1})
    fallback = dml.effective_prototypes(bank, f, regions, "test", {1}, missing="static")
    np.testing.assert_array_equal(fallback[1].data, static[1])
    assert 1 not in bank

    dml.effective_prototypes(bank, f, regions, "train-late", {1})
    bank.protos[1] = np.array([1.0, 2.0, 3.0])
    late = dml.effective_prototypes(bank, f, regions, "train-late", {1})
    np.testing.assert_allclose(late[1].data, bank.get(1), atol=1e-15)
    np.testing.assert_array_equal(late[9].data, static[9])

    frozen = bank.get(1).copy()
    test = dml.effective_prototypes(bank, f, regions, "test", {1})
    np.testing.assert_array_equal(test[1].data, frozen)
    np.testing.assert_array_equal(bank.get(1), frozen)
    np.testing.assert_array_equal(test[9].data, static[9])
    recomputed = dml.effective_prototypes(bank, f, regions, "test", {1}, bank_at_test=False)
    np.testing.assert_array_equal(recomputed[1].data, static[1])
    assert set(bank.protos) == {1}


def test_late_prototype_stays_differentiable():
    rng = np.random.default_rng(2)
    f = Tensor(rng.normal(size=(3, 3, 2)), requires_grad=True)
    bank = dml.PrototypeBank(0.5, frozenset({1}), {1: np.array([1.0, 1.0])})
    p = dml.effective_prototypes(bank, f, {1: np.ones((3, 3), bool)}, "train-late", {1})[1]
    backward(p.sum())
    np.testing.assert_allclose(f.grad, 0.5 / 9)


def test_support_regions_drop_vanished_classes():
    lab = np.array([[0, 1], [1, 3]], dtype=np.uint8)
    regions = dml.support_regions(lab, [0, 1, 2, 3])
    assert set(regions) == {1, 3}
    assert regions[1].sum() == 2


# heads ------------------------------------------------------------------------


def test_agm_matches_direct_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        h = rng.normal(size=(4, 4, 3))
        ms = [np.tanh(rng.normal(size=(4, 4))) for _ in range(2)]
        hp = head(rng, 3)
        got = dml.agm_forward(Tensor(h), [Tensor(m) for m in ms], hp).data
        want = oracle_agm(h, ms, hp.phi_w.data[0, 0, :, 0], hp.phi_b.data[0], hp.omega_w.data[0, 0, :, 0], hp.omega_b.data[0])
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_agm_zero_attention_is_residual_identity():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(3, 3, 2))
    hp = head(rng, 2)
    zero = dml.agm_forward(Tensor(h), [Tensor(np.zeros((3, 3)))], hp).data
    plain = oracle_agm(h, [np.zeros((3, 3))], hp.phi_w.data[0, 0, :, 0], hp.phi_b.data[0], hp.omega_w.data[0, 0, :, 0], hp.omega_b.data[0])
    np.testing.assert_allclose(zero, plain, atol=1e-12)


def test_agm_zero_weights_is_uniform():
    z = lambda *s: Tensor(np.zeros(s), True)  # noqa: E731
    hp = dml.HeadParams(z(1, 1, 3, 1), z(1), z(1, 1, 3, 1), z(1))
    out = dml.agm_forward(Tensor(np.ones((2, 2, 3))), [Tensor(np.full((2, 2), 0.3))], hp).data
    np.testing.assert_allclose(out, 0.5, atol=1e-15)
    with pytest.raises(ContractError):
        dml.agm_forward(Tensor(np.ones((2, 2, 3))), [], hp)


def test_agm_gradients():
    rng = np.random.default_rng(5)
    h0 = rng.normal(size=(3, 3, 2))
    p = [Tensor(rng.normal(size=2)) for _ in range(2)]
    hp = head(rng, 2)
    t = rng.integers(0, 3, size=(3, 3))
    def through_features(h):
        return cross_entropy(dml.agm_forward(h, [cosine_map(h, q) for q in p], hp), t)

    assert grad_check(through_features, h0) < 1e-3
    maps = [cosine_map(Tensor(h0), q) for q in p]
    for name in ("phi_w", "phi_b", "omega_w", "omega_b"):
        def through_param(w, name=name):
            params = dml.HeadParams(**{**hp.named(), name: w})
            return cross_entropy(dml.agm_forward(Tensor(h0), maps, params), t)

        assert grad_check(through_param, getattr(hp, name).data) < 1e-3, name


def test_ncm_examples():
    one = dml.ncm_forward([Tensor(np.ones((2, 2)))]).data
    np.testing.assert_allclose(one[..., 0], np.e / (np.e + 1), atol=1e-15)
    np.testing.assert_allclose(one[0, 0, 0], 0.7311, atol=1e-4)
    two = dml.ncm_forward([Tensor(np.full((2, 2), 0.5))] * 2).data
    np.testing.assert_allclose(two, 1 / 3, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.data())
def test_ncm_matches_oracle_and_is_distribution(k, data):
    ms = [data.draw(arrays(np.float64, (3, 2), elements=unit)) for _ in range(k)]
    out = dml.ncm_forward([Tensor(m) for m in ms]).data
    np.testing.assert_allclose(out, oracle_ncm(ms), atol=1e-10)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
    assert ((out >= 0) & (out <= 1)).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.data())
def test_ncm_permutation_equivariant(k, data):
    ms = [data.draw(arrays(np.float64, (2, 3), elements=unit)) for _ in range(k)]
    perm = data.draw(st.permutations(range(k)))
    out = dml.ncm_forward([Tensor(m) for m in ms]).data
    outp = dml.ncm_forward([Tensor(ms[i]) for i in perm]).data
    np.testing.assert_allclose(outp[..., :k], out[..., list(perm)], atol=1e-14)
    np.testing.assert_allclose(outp[..., k], out[..., k], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.floats(0.05, 1.0), st.data())
def test_ncm_argmax_survives_common_scaling(k, s, data):
    ms = [data.draw(arrays(np.float64, (3, 3), elements=unit)) for _ in range(k)]
    stacked = np.stack(ms, -1)
    top2 = np.sort(stacked, -1)[..., -2:] if k > 1 else None
    unique = np.ones((3, 3), bool) if k == 1 else (top2[..., 1] - top2[..., 0] > 1e-9)
    a = dml.ncm_forward([Tensor(m) for m in ms]).data[..., :k].argmax(-1)
    b = dml.ncm_forward([Tensor(s * m) for m in ms]).data[..., :k].argmax(-1)
    np.testing.assert_array_equal(a[unique], b[unique])


def test_ncm_has_no_parameters():
    rng = np.random.default_rng(6)
    ms = [Tensor(np.tanh(rng.normal(size=(4, 4)))) for _ in range(3)]
    first = dml.ncm_forward(ms).data.tobytes()
    head(np.random.default_rng(99), 3)
    assert dml.ncm_forward(ms).data.tobytes() == first


def test_heads_are_distributions():
    rng = np.random.default_rng(7)
    h = Tensor(rng.normal(size=(5, 5, 4)) * 10)
    ms = [Tensor(np.tanh(rng.normal(size=(5, 5)))) for _ in range(3)]
    for out in (dml.agm_forward(h, ms, head(rng, 4)).data, dml.ncm_forward(ms).data):
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
        assert ((out >= 0) & (out <= 1)).all()


# schedule and loss ------------------------------------------------------------


def test_beta_schedule():
    assert dml.beta(0, 10) == 1.0
    assert dml.beta(10, 10) == 0.0
    assert dml.beta(15, 30) == 0.5
    for bad in ((-1, 10), (11, 10), (0, 0)):
        with pytest.raises(ContractError):
            dml.beta(*bad)


def test_dml_loss_cases():
    rng = np.random.default_rng(8)
    gt = np.array([[0, 3], [5, 5]], dtype=np.uint8)
    order = (3, 5)
    a = Tensor(rng.dirichlet(np.ones(3), size=(2, 2)))
    n = Tensor(rng.dirichlet(np.ones(3), size=(2, 2)))
    t = dml.to_channels(gt, order)
    np.testing.assert_array_equal(t, [[2, 0], [1, 1]])
    ce = lambda p: -np.mean(np.log(np.take_along_axis(p.data, t[..., None], -1)))  # noqa: E731
    assert dml.dml_loss(a, n, gt, order, 1.0).item() == pytest.approx(ce(a), abs=1e-12)
    assert dml.dml_loss(a, n, gt, order, 0.0).item() == pytest.approx(ce(n), abs=1e-12)
    assert dml.dml_loss(a, n, gt, order, 0.3).item() == pytest.approx(0.3 * ce(a) + 0.7 * ce(n), abs=1e-12)
    perfect = Tensor(np.eye(3)[t])
    assert dml.dml_loss(perfect, perfect, gt, order, 0.5, eps=0.0).item() <= 1e-6
    with pytest.raises(ContractError):
        dml.dml_loss(a, n, np.array([[0, 4], [5, 5]], np.uint8), order, 0.5)
    with pytest.raises(ContractError):
        dml.dml_loss(a, n, gt, order, 1.5)
    # a zero-weight branch is never touched
    assert dml.dml_loss(a, None, gt, order, 1.0).item() == pytest.approx(ce(a), abs=1e-12)
