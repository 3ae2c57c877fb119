"""Loss terms against hand-derived values and brute-force reimplementations."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artinerf.diffcore import ParamStore, const, gradient_check, no_grad
from artinerf.diffcore import tensor as T
from artinerf.diffcore.tensor import ContractError
from artinerf.losses import (TERM_NAMES, assemble_losses, bce_dice_loss,
                             cyclic_loss, make_perceptual, mse_loss,
                             perceptual_loss, tcl)


def store_of(**arrays):
    ps = ParamStore()
    for k, v in arrays.items():
        ps.add(k, np.asarray(v, np.float32))
    return ps


class TestMSE:
    def test_identical_inputs(self):
        a = const(np.random.rand(4, 4).astype(np.float32))
        with no_grad():
            assert mse_loss(a, a).item() == 0.0

    def test_constant_offset(self):
        a = const(np.zeros((3, 5), np.float32))
        b = const(np.full((3, 5), 0.3, np.float32))
        with no_grad():
            assert mse_loss(a, b).item() == pytest.approx(0.09, rel=1e-5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        ps = store_of(a=rng.standard_normal((3, 4)))
        b = const(rng.standard_normal((3, 4)).astype(np.float32))
        rep = gradient_check(lambda s: mse_loss(s.graph_tensor("a"), b), ps)
        assert rep.passed
        # analytic form 2(a-b)/N
        from artinerf.diffcore.params import forward_backward
        _, grads = forward_backward(lambda s: mse_loss(s.graph_tensor("a"), b), ps)
        np.testing.assert_allclose(grads["a"],
                                   2 * (ps["a"].value - b.data) / 12, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            mse_loss(const(np.zeros((2, 2), np.float32)),
                     const(np.zeros((3, 2), np.float32)))


class TestCyclic:
    def test_identical_points(self):
        x = const(np.random.rand(5, 3).astype(np.float32))
        with no_grad():
            assert cyclic_loss(x, x).item() == 0.0

    def test_uniform_offset_gives_squared_norm(self):
        x = const(np.zeros((7, 3), np.float32))
        d = np.array([0.1, -0.2, 0.2], np.float32)
        y = const(np.tile(d, (7, 1)))
        with no_grad():
            assert cyclic_loss(x, y).item() == pytest.approx(float(d @ d), rel=1e-5)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        ps = store_of(x=rng.standard_normal((6, 3)))
        y = const(rng.standard_normal((6, 3)).astype(np.float32))
        from artinerf.diffcore.params import forward_backward
        _, grads = forward_backward(lambda s: cyclic_loss(s.graph_tensor("x"), y),
                                    ps)
        np.testing.assert_allclose(grads["x"], 2 * (ps["x"].value - y.data) / 6,
                                   atol=1e-6)

    def test_count_mismatch(self):
        with pytest.raises(ContractError):
            cyclic_loss(const(np.zeros((2, 3), np.float32)),
                        const(np.zeros((3, 3), np.float32)))


class TestBCEDice:
    def test_perfect_prediction_is_zero(self):
        m = const(np.ones((6, 6), np.float32))
        with no_grad():
            assert bce_dice_loss(m, m).item() == pytest.approx(0.0, abs=1e-5)

    def test_half_prediction_hand_value(self):
        # BCE = ln 2; Dice = 2*(0.5N)/(1.5N) = 2/3; loss = ln 2 + 1/3
        m = const(np.ones((8, 8), np.float32))
        p = const(np.full((8, 8), 0.5, np.float32))
        with no_grad():
            got = bce_dice_loss(p, m).item()
        assert got == pytest.approx(np.log(2.0) + 1.0 / 3.0, abs=1e-4)

    def test_gradient_check(self):
        rng = np.random.default_rng(2)
        ps = store_of(p=rng.uniform(0.15, 0.85, (5, 5)))
        m = const((rng.uniform(size=(5, 5)) > 0.4).astype(np.float32))
        rep = gradient_check(lambda s: bce_dice_loss(s.graph_tensor("p"), m), ps)
        assert rep.passed, rep.per_param

    def test_nonbinary_target_rejected(self):
        with pytest.raises(ContractError):
            bce_dice_loss(const(np.full((2, 2), 0.5, np.float32)),
                          const(np.full((2, 2), 0.5, np.float32)))

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_self_loss_zero_for_any_nonempty_binary_mask(self, seed):
        m = (np.random.default_rng(seed).uniform(size=(6, 6)) > 0.5)
        if not m.any():
            m[0, 0] = True
        mc = const(m.astype(np.float32))
        with no_grad():
            assert bce_dice_loss(mc, mc).item() == pytest.approx(0.0, abs=1e-5)


class TestPerceptual:
    def test_unknown_plugin_rejected(self):
        with pytest.raises(ContractError, match="unknown perceptual plugin"):
            make_perceptual("vgg-lpips")

    def test_zero_for_identical_patches(self):
        plugin = make_perceptual("random-features", seed=0)
        a = const(np.random.rand(8, 8, 3).astype(np.float32))
        with no_grad():
            assert perceptual_loss(a, a, plugin).item() == 0.0

    def test_symmetry(self):
        plugin = make_perceptual("random-features", seed=0)
        rng = np.random.default_rng(3)
        a = const(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
        b = const(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
        with no_grad():
            assert perceptual_loss(a, b, plugin).item() == \
                pytest.approx(perceptual_loss(b, a, plugin).item(), rel=1e-6)

    def test_positive_and_increasing_in_noise(self):
        plugin = make_perceptual("random-features", seed=0)
        rng = np.random.default_rng(4)
        base = rng.uniform(0.3, 0.7, (8, 8, 3)).astype(np.float32)
        noise = rng.standard_normal((8, 8, 3)).astype(np.float32)
        vals = []
        for eps in (0.01, 0.1):
            with no_grad():
                vals.append(perceptual_loss(const(base + eps * noise), const(base),
                                            plugin).item())
        assert 0 < vals[0] < vals[1]

    def test_frozen_filters_are_constant(self):
        p1 = make_perceptual("random-features", seed=7)
        p2 = make_perceptual("random-features", seed=7)
        for f1, f2 in zip(p1.filters, p2.filters):
            assert f1.tobytes() == f2.tobytes()


def tcl_bruteforce(u, neighbors, query_coord, lam, eps_sigma):
    """Independent reimplementation: explicit loops, float64."""
    u = np.asarray(u, np.float64)
    d = np.array([((u - np.asarray(v, np.float64)) ** 2).sum() for v in neighbors])
    e = np.exp(-d - (-d).max())
    beta = e / e.sum()
    half = (len(neighbors) - 1) // 2
    coords = np.arange(len(neighbors)) - half
    mu = (coords * beta).sum()
    var = max((beta * (coords - mu) ** 2).sum(), eps_sigma)
    return (query_coord - mu) ** 2 / var + lam * np.log(np.sqrt(var))


class TestTCL:
    def test_symmetric_neighbors_center_the_mean(self):
        u = np.zeros(4, np.float32)
        d = np.array([1.0, 0, 0, 0], np.float32)
        items = [const(u + d), const(u), const(u + d)]
        rep = tcl(items[1], items, 0, lam=0.5)
        assert rep.mu == pytest.approx(0.0, abs=1e-7)
        assert rep.loss.item() == pytest.approx(0.5 * np.log(np.sqrt(rep.sigma_sq)),
                                                abs=1e-6)

    def test_exact_match_floors_the_variance(self):
        u = const(np.zeros(3, np.float32))
        far = const(np.full(3, 10 / np.sqrt(3), np.float32))
        rep = tcl(u, [far, u, far], 0, lam=0.5, eps_sigma=1e-6)
        assert rep.beta[1] == pytest.approx(1.0, abs=1e-6)
        assert rep.sigma_sq == pytest.approx(1e-6)
        assert rep.loss.item() == pytest.approx(0.5 * np.log(np.sqrt(1e-6)),
                                                abs=1e-4)

    def test_matches_bruteforce_on_random_windows(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            items = [rng.standard_normal(6).astype(np.float32) * 0.7
                     for _ in range(5)]
            q = int(rng.integers(0, 5)) - 2
            rep = tcl(const(items[q + 2]), [const(v) for v in items], q, lam=0.5)
            expected = tcl_bruteforce(items[q + 2], items, q, 0.5, 1e-6)
            assert rep.loss.item() == pytest.approx(expected, abs=1e-6)

    def test_beta_is_distribution_and_variance_floored(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            items = [rng.standard_normal(4).astype(np.float32) for _ in range(5)]
            rep = tcl(const(items[2]), [const(v) for v in items], 0, lam=0.5)
            assert rep.beta.sum() == pytest.approx(1.0, abs=1e-6)
            assert rep.beta.min() >= 0
            assert rep.sigma_sq >= 1e-6
            # analytic floor of the loss
            assert rep.loss.item() >= 0.5 * np.log(np.sqrt(1e-6)) - 1e-6

    def test_single_element_window_rejected(self):
        with pytest.raises(ContractError):
            tcl(const(np.zeros(3, np.float32)), [const(np.zeros(3, np.float32))],
                0, lam=0.5)

    def test_gradient_check(self):
        rng = np.random.default_rng(7)
        ps = store_of(**{f"v{i}": rng.standard_normal(5) * 0.5 for i in range(5)})

        def build(s):
            items = [s.graph_tensor(f"v{i}") for i in range(5)]
            return tcl(items[2], items, 0, lam=0.5).loss

        rep = gradient_check(build, ps)
        assert rep.passed, rep.per_param


class TestAssembly:
    def test_all_zero_terms(self):
        terms = {n: const(np.float32(0.0)) for n in TERM_NAMES}
        total, breakdown = assemble_losses(terms, {n: 1.0 for n in TERM_NAMES})
        assert total.item() == 0.0
        assert all(v == 0.0 for v in breakdown.values())

    def test_single_active_weight(self):
        terms = {n: const(np.float32(i + 1.0)) for i, n in enumerate(TERM_NAMES)}
        weights = {n: 0.0 for n in TERM_NAMES}
        weights["ccl"] = 1.0
        total, breakdown = assemble_losses(terms, weights)
        assert total.item() == pytest.approx(breakdown["ccl"])
        assert breakdown["mse"] == 0.0

    def test_breakdown_sums_to_total(self):
        rng = np.random.default_rng(8)
        terms = {n: const(np.float32(rng.uniform(0, 2))) for n in TERM_NAMES}
        weights = {n: float(rng.uniform(0, 2)) for n in TERM_NAMES}
        total, breakdown = assemble_losses(terms, weights)
        assert total.item() == pytest.approx(sum(breakdown.values()), abs=1e-5)

    def test_missing_required_term_names_it(self):
        terms = {n: const(np.float32(1.0)) for n in TERM_NAMES}
        terms["seg"] = None
        with pytest.raises(ContractError, match="seg"):
            assemble_losses(terms, {n: 1.0 for n in TERM_NAMES})
