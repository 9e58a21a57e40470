import dataclasses

import numpy as np
import pytest
from helpers import logits_from, random_logits
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srem import losses as L
from srem.diffkernel import ShapeError, Tape, sigmoid_array
from srem.losses import Components, PairPartition, SremHyper

logit_mats = st.integers(2, 6).flatmap(
    lambda B: arrays(np.float64, (B, B), elements=st.floats(-10, 10)))


def part(clean, noisy, B, direction="i2t"):
    return PairPartition(np.array(clean, dtype=np.intp), np.array(noisy, dtype=np.intp), direction, B)


# -- energy and partition --------------------------------------------------------


def test_energy_examples():
    assert L.energy(np.array([[0.0]]), 0) == 0.0
    assert L.energy(np.full((4, 4), 2.5), 1) == pytest.approx(-(2.5 + np.log(4)), abs=1e-12)
    F = np.array([[1.0, 2.0, 3.0], [0, 0, 0], [0, 0, 0]])
    assert L.energy(F, 0) == pytest.approx(-3.40760596444438, abs=1e-12)
    assert L.energy(F.T, 0, "t2i") == pytest.approx(-3.40760596444438, abs=1e-12)


def test_partition_examples():
    F = np.full((4, 4), -5.0)
    np.fill_diagonal(F, 5.0)
    p = L.partition(F, 0.0)
    assert list(p.clean) == [0, 1, 2, 3] and len(p.noisy) == 0
    F[2, 0] = 9.0
    p = L.partition(F, 0.0)
    assert 2 in p.noisy and 2 not in p.clean
    assert len(L.partition(F, -np.inf).clean) == 0


def test_partition_tie_on_diagonal_counts_as_argmax():
    F = np.array([[3.0, 3.0], [0.0, 1.0]])
    assert 0 in L.partition(F, 10.0).clean


@settings(max_examples=60, deadline=None)
@given(F=logit_mats, tau=st.floats(-12, 2))
def test_partition_soundness(F, tau):
    for d in L.DIRECTIONS:
        p = L.partition(F, tau, d)
        f = F if d == "i2t" else F.T
        assert set(p.clean) | set(p.noisy) == set(range(len(F)))
        assert not set(p.clean) & set(p.noisy)
        for i in range(len(F)):
            ok = L.energy(F, i, d) < tau and f[i, i] >= f[i].max()
            assert ok == (i in p.clean)


@settings(max_examples=60, deadline=None)
@given(F=logit_mats, shift=st.floats(-20, 20))
def test_row_shift_moves_energy_not_argmax(F, shift):
    G = F.copy()
    G[0] += shift
    assert np.argmax(G[0]) == np.argmax(F[0])
    assert L.energy(G, 0) == pytest.approx(L.energy(F, 0) - shift, abs=1e-9)


def test_energy_bounded_loss_examples():
    c = lambda e: -e - np.log(2)  # constant-row logit giving energy ``e`` at B=2
    F = np.array([[c(-3), c(-3)], [c(-1), c(-1)]])
    loss = L.energy_bounded_loss(F, part([0], [1], 2), -4.0, 0.0)
    assert loss.item() == pytest.approx(2.0, abs=1e-12)
    single = np.array([[c(-2), c(-2)], [0, 0]])
    assert L.energy_bounded_loss(single, part([0], [], 2), -4.0, 0.0).item() == pytest.approx(4.0, abs=1e-12)
    ok = np.array([[c(-5), c(-5)], [c(1), c(1)]])
    assert L.energy_bounded_loss(ok, part([0], [1], 2), -4.0, 0.0).item() == 0.0


def test_energy_bounded_loss_gradient_flows_through_energies():
    rng = np.random.default_rng(0)
    F0 = random_logits(rng, 5)
    p = L.partition(F0, np.median(-np.log(np.exp(F0).sum(1))))
    e = -np.log(np.exp(F0).sum(1))
    logits = logits_from(F0)
    loss = L.energy_bounded_loss(logits.F, p, e.min() + 0.01, e.max() - 0.01)
    logits.F.tape.backward(loss)
    h = 1e-6
    for (i, j) in [(0, 0), (1, 3), (4, 2)]:
        up, dn = F0.copy(), F0.copy()
        up[i, j] += h
        dn[i, j] -= h
        num = (L.energy_bounded_loss(up, p, e.min() + 0.01, e.max() - 0.01).item()
               - L.energy_bounded_loss(dn, p, e.min() + 0.01, e.max() - 0.01).item()) / (2 * h)
        assert logits.F.grad[i, j] == pytest.approx(num, abs=1e-7)


# -- swapped gradient weighting ----------------------------------------------------


def test_normalized_entropy_examples():
    assert L.normalized_entropy(np.zeros((3, 3)), 0) == pytest.approx(1.0, abs=1e-12)
    assert L.normalized_entropy(np.array([[500.0, 0.0], [0, 0]]), 0) < 1e-9
    F = np.array([[0.0, 0.0, -1000.0, -1000.0]] + [[0.0] * 4] * 3)
    assert L.normalized_entropy(F, 0) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(L.DegenerateBatchError):
        L.normalized_entropy(np.zeros((1, 1)), 0)


def test_hard_negative_examples():
    assert L.hard_negative(np.array([[9.0, 1.0, 5.0], [0, 0, 0], [0, 0, 0]]), 0) == 2
    assert L.hard_negative(np.array([[0.0, 3.0, 3.0], [0, 0, 0], [0, 0, 0]]), 0) == 1
    F = np.array([[0.0, 3.0, 1.0], [4.0, 9.0, 2.0], [0, 0, 0]])
    assert L.hard_negative(F, 1) == 0
    assert L.hard_negative(F, 2, "t2i") == 1
    with pytest.raises(L.DegenerateBatchError):
        L.hard_negative(np.zeros((1, 1)), 0)


def test_sensitivity_weight_examples():
    F = np.array([[0.0, 0.0, -1000.0, -1000.0]] + [[0.0] * 4] * 3)
    S = sigmoid_array(F)
    assert L.sensitivity_weight(F, S, 0, 0.2) == pytest.approx(0.5, abs=1e-12)
    F2 = np.array([[8.0, -8.0], [-8.0, 8.0]])
    S2 = sigmoid_array(F2)
    assert L.sensitivity_weight(F2, S2, 0, 0.2) == 1.0
    hot = np.array([[0.0, 900.0], [0.0, 0.0]])
    assert L.sensitivity_weight(hot, np.full((2, 2), 0.5), 0, 0.2) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(F=logit_mats, alpha=st.floats(0.01, 0.99))
def test_weights_in_unit_interval_and_one_when_inactive(F, alpha):
    S = sigmoid_array(F)
    for d in L.DIRECTIONS:
        w = L.sensitivity_weights(F, S, alpha, d)
        assert np.all((w >= 0) & (w <= 1))
        s = S if d == "i2t" else S.T
        phi = L.hard_negatives(F, d)
        inactive = alpha - np.diag(s) + s[np.arange(len(F)), phi] <= 0
        assert np.all(w[inactive] == 1.0)


def test_sgw_ranking_loss_examples_and_gradient():
    F = np.array([[1.0, 0.5], [0.0, 1.0]])
    t = Tape()
    S = t.leaf([[0.8, 0.7], [0.2, 0.9]])
    loss = L.sgw_ranking_loss(F, S, part([0], [1], 2), [0.5, 1.0], 0.2)
    assert loss.item() == pytest.approx(0.5, abs=1e-12)
    t.backward(loss)
    assert np.array_equal(S.grad, [[-0.5, 1.0], [0.0, 0.0]])
    satisfied = L.sgw_ranking_loss(F, np.array([[0.9, 0.3], [0.3, 0.9]]), part([0, 1], [], 2), [1, 1], 0.2)
    assert satisfied.item() == 0.0
    assert L.sgw_ranking_loss(F, S.value, part([], [0, 1], 2), [1, 1], 0.2).item() == 0.0
    with pytest.raises(ShapeError):
        L.sgw_ranking_loss(F, S.value, part([0], [1], 2), [1.0, 1.0, 1.0], 0.2)


# -- complementary learning -------------------------------------------------------


def test_selection_examples():
    S = np.array([[0.6, 0.0], [0.0, 0.6]])
    sel = L.complementary_selection(S, None, 1.0, 0.0)
    assert sel.values[0, 1] == pytest.approx(0.5, abs=1e-15)
    assert sel.mask[0, 0] and sel.values[0, 0] == -np.inf
    eq = L.complementary_selection(np.full((4, 4), 0.3), None, 2.0, 0.5)
    off = eq.values[~eq.mask]
    assert np.allclose(off, off[0], rtol=0, atol=1e-15)
    clean = L.complementary_selection(S, part([0], [1], 2), 1.0, 0.0)
    assert clean.full_rows.tolist() == [True, False]


def test_selection_masks_hard_negative_of_clean_rows_only():
    S = np.array([[0.9, 0.2, 0.7], [0.1, 0.8, 0.3], [0.4, 0.5, 0.6]])
    sel = L.complementary_selection(S, part([0], [1, 2], 3), 2.0, 0.5)
    assert sel.mask.tolist() == [[True, False, True], [False, True, False], [False, False, True]]


def test_rectify_examples():
    S = np.array([[0.1, 0.2], [0.3, 0.4]])
    sel = L.complementary_selection(S, None, 2.0, 0.5)
    assert np.allclose(L.transition(sel), [[0, 1], [1, 0]], atol=0)
    assert np.allclose(L.rectify(S, sel).value, S[::-1], atol=1e-15)

    S3 = np.array([[0.1, 0.2, 0.05], [0.3, 0.1, 0.2], [0.25, 0.15, 0.4]])
    keep = np.array([1, 1, 0])  # single live column per row
    mask = np.ones((3, 3), dtype=bool)
    mask[np.arange(3), keep] = False
    sel3 = L.Selection(np.where(mask, -np.inf, 0.0), mask)
    out = L.rectify(S3, sel3).value
    assert np.allclose(out[1], S3[0] + S3[1], atol=1e-15)
    assert np.allclose(out[0], S3[2], atol=1e-15)
    assert np.allclose(out[2], L.RECT_EPS, atol=0)


def test_vacuous_rectification():
    S = np.array([[0.3, 0.6], [0.2, 0.7]])
    mask = np.ones((2, 2), dtype=bool)
    sel = L.Selection(np.full((2, 2), -np.inf), mask)
    rect = L.rectify(S, sel)
    assert np.all(rect.value == L.RECT_EPS)
    assert L.cmbcl_loss(rect).item() == pytest.approx(-np.log1p(-L.RECT_EPS), rel=1e-9)


def test_cmbcl_loss_examples():
    assert L.cmbcl_loss(np.full((3, 3), 0.5)).item() == pytest.approx(np.log(2), abs=1e-12)
    assert L.cmbcl_loss(np.full((3, 3), L.RECT_EPS)).item() == pytest.approx(1e-6, rel=1e-5)
    S = np.array([[0.9, 0.2], [0.4, 0.9]])
    assert L.cmbcl_loss(S).item() == pytest.approx(0.3669845875401002, abs=1e-12)


def test_weighted_loss_matches_uniform_loss_under_uniform_transition():
    rng = np.random.default_rng(1)
    P = rng.uniform(0.01, 0.9, size=(5, 5))
    a = L.weighted_complementary_loss(P, L.uniform_transition(5)).item()
    assert a == pytest.approx(L.cmbcl_loss(P).item(), abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(F=logit_mats, beta=st.floats(0.0, 5.0), seed=st.integers(0, 10))
def test_complementary_gradient_only_pushes_scores_down(F, beta, seed):
    B = len(F)
    S0 = sigmoid_array(np.clip(F, -5, 5))
    clean = np.random.default_rng(seed).permutation(B)[: B // 2]
    p = part(np.sort(clean), np.setdiff1d(np.arange(B), clean), B)
    sel = L.complementary_selection(S0, p, beta, 0.5)
    t = Tape()
    S = t.leaf(S0)
    t.backward(L.cmbcl_loss(L.rectify(S, sel)))
    assert np.all(S.grad >= 0)
    t = Tape()
    P = t.leaf(S0)
    t.backward(L.weighted_complementary_loss(P, L.transition(sel)))
    assert np.all(P.grad >= 0)


def test_beta_zero_gives_uniform_rows():
    rng = np.random.default_rng(2)
    S = rng.uniform(0, 1, (6, 6))
    Q = L.transition(L.complementary_selection(S, None, 0.0, 0.5))
    assert np.max(np.abs(Q - L.uniform_transition(6))) < 1e-9


def test_sum_reduction_scales_mean_by_candidates():
    rng = np.random.default_rng(3)
    logits = logits_from(random_logits(rng, 6, diag_boost=2.0))
    p = L.partition(logits.F.value, -8.0)
    mean = L.complementary_objective(logits, p, SremHyper(cmbcl_reduce="mean"), "i2t").item()
    total = L.complementary_objective(logits, p, SremHyper(cmbcl_reduce="sum"), "i2t").item()
    assert total == pytest.approx(5 * mean, rel=1e-12)


# -- combined objective -------------------------------------------------------------

HYPER = SremHyper(tau=-8.0, m_clean=-10.0, m_noisy=-7.0)


def _breakdown(F, hyper=HYPER, phase="train", components=Components()):
    return L.total_objective(logits_from(F), hyper, phase, components)


def test_total_is_the_weighted_sum():
    for seed in range(10):
        F = random_logits(np.random.default_rng(seed), 8, diag_boost=1.5)
        out = _breakdown(F)
        expected = (0.5 * (out.l_w_i2t + out.l_w_t2i) + HYPER.lambda1 * (out.l_u_I + out.l_u_T)
                    + HYPER.lambda2 * (out.l_c_i2t + out.l_c_t2i))
        assert abs(out.total - expected) < 1e-12
        assert min(out.scalars().values()) >= 0


def test_zero_lambdas_leave_the_ranking_loss():
    F = random_logits(np.random.default_rng(5), 8, diag_boost=1.5)
    out = _breakdown(F, dataclasses.replace(HYPER, lambda1=0.0, lambda2=0.0))
    assert out.total == pytest.approx(0.5 * (out.l_w_i2t + out.l_w_t2i), abs=1e-15)


def test_warmup_has_only_complementary_terms():
    F = random_logits(np.random.default_rng(6), 8, diag_boost=1.5)
    out = _breakdown(F, phase="warmup")
    assert out.l_w_i2t == out.l_w_t2i == out.l_u_I == out.l_u_T == 0.0
    assert out.l_c_i2t > 0 and out.total == out.l_c_i2t + out.l_c_t2i
    assert not out.active_i2t.any() and not out.active_t2i.any()


def test_warmup_without_cmbcl_falls_back_to_hinge():
    F = random_logits(np.random.default_rng(6), 8, diag_boost=1.5)
    no_c = Components(cmbcl=False, rectification=False)
    out = _breakdown(F, phase="warmup", components=no_c)
    assert out.l_c_i2t == out.l_c_t2i == 0.0 and out.l_w_i2t > 0
    vanilla = _breakdown(F, phase="train", components=Components.baseline())
    assert out.l_w_i2t == vanilla.l_w_i2t


def test_symmetric_logits_give_equal_directions():
    F = random_logits(np.random.default_rng(7), 7, diag_boost=1.5)
    F = 0.5 * (F + F.T)
    for phase in ("warmup", "train"):
        out = _breakdown(F, phase=phase)
        assert out.l_w_i2t == pytest.approx(out.l_w_t2i, abs=1e-13)
        assert out.l_u_I == pytest.approx(out.l_u_T, abs=1e-13)
        assert out.l_c_i2t == pytest.approx(out.l_c_t2i, abs=1e-13)


def test_invalid_phase_and_hyper():
    with pytest.raises(ValueError):
        _breakdown(np.zeros((2, 2)), phase="eval")
    with pytest.raises(ValueError, match="m_clean"):
        SremHyper(m_clean=0.0, m_noisy=-1.0)
    problems = SremHyper.check(alpha=2.0, lambda1=-1.0)
    assert len(problems) == 2


# switch -> fields allowed to change
ISOLATION = {
    "energy_bound": ({"energy_bound": False}, {"l_u_I", "l_u_T"}),
    "cmbcl": ({"cmbcl": False, "rectification": False}, {"l_c_i2t", "l_c_t2i"}),
    "rectification": ({"rectification": False}, {"l_c_i2t", "l_c_t2i"}),
    "uniform": ({"uniform_complementary": True}, {"l_c_i2t", "l_c_t2i"}),
    "sgw": ({"sgw": False}, {"l_w_i2t", "l_w_t2i"}),
    "ranking": ({"ranking": False}, {"l_w_i2t", "l_w_t2i"}),
}


@pytest.mark.parametrize("name", sorted(ISOLATION))
def test_ablation_switch_changes_only_its_terms(name):
    switches, targeted = ISOLATION[name]
    changed_any = False
    for seed in range(5):
        F = random_logits(np.random.default_rng(seed), 8, diag_boost=1.5)
        full = _breakdown(F).scalars()
        abl = _breakdown(F, components=Components(**switches)).scalars()
        for key in full:
            if key not in targeted and key != "total":
                assert full[key] == abl[key], key
        changed_any |= any(full[k] != abl[k] for k in targeted)
    assert changed_any
