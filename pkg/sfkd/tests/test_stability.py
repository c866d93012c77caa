import tempfile

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..koopman import OperatorGen
from ..networks import embed_env
from ..stability import (
    CertificateRefused, IssCertificate, TrackingBoundInputs, certify, compute_alpha, estimate_dbar,
    estimate_lipschitz, estimate_reconstruction_error, iss_trajectory_bound, one_step_residuals, read_certificate,
    realized_iss_bound, soundness_audit, tracking_bound, ultimate_bound, violation_rate, write_certificate,
)
from ..vehicle import env_grid
from .helpers import SMALL_MODEL, small_dataset, small_model


def make_cert(alpha=0.5, dbar=0.1, c1=1.0, c2=1.0):
    return IssCertificate(alpha, 0.1, np.eye(2), c1, c2, dbar, env_grid(3))


def constant_generator(m, scale, bound=None):
    """Global generator returning A = scale · I for every environment."""
    g = OperatorGen(m.latent_dim, m.config.embed_dim, bound or m.config.spectral_bound, mode=OperatorGen.MODE_GLOBAL)
    with torch.no_grad():
        g.gen_A.bias.copy_(scale * torch.eye(m.latent_dim, dtype=torch.float64).reshape(-1))
    return g


# ---------------------------------------------------------------------------
# Closed-form bounds
# ---------------------------------------------------------------------------

class BoundsTest(SimpleTestCase):
    def test_trajectory_bound(self):
        """c1 = c2 = 1, α = 0.5, d̄ = 0.1, ||e₀|| = 1, k = 3 → 0.325"""
        self.assertAlmostEqual(float(iss_trajectory_bound(make_cert(), 1.0, 3)), 0.325, places=12)

    def test_trajectory_bound_decays_to_ultimate(self):
        """Оценка траектории убывает к предельной"""
        bounds = iss_trajectory_bound(make_cert(), 1.0, np.arange(60))
        self.assertTrue(np.all(np.diff(bounds) <= 0))
        self.assertLess(bounds[1], bounds[0])
        self.assertAlmostEqual(float(bounds[-1]), ultimate_bound(make_cert()), places=12)

    def test_trajectory_bound_recursion(self):
        """bound(k+1) ≤ α·bound(k) + c2·d̄ для k = 0..100"""
        cert = make_cert(alpha=0.9, dbar=0.05, c2=2.0)
        bounds = iss_trajectory_bound(cert, 3.0, np.arange(102))
        for k in range(101):
            self.assertLessEqual(bounds[k + 1], cert.alpha * bounds[k] + cert.c2 * cert.dbar + 1e-12)

    def test_negative_step_rejected(self):
        """Отрицательный номер шага отклоняется"""
        with self.assertRaises(ValidationError):
            iss_trajectory_bound(make_cert(), 1.0, -1)

    def test_ultimate_bound(self):
        """c2 = 1, d̄ = 0.2, α = 0.8 → 1.0"""
        self.assertAlmostEqual(ultimate_bound(make_cert(alpha=0.8, dbar=0.2)), 1.0, places=12)

    def test_realized_bound_recursion(self):
        """b₀ = c1||e₀||, b_{k+1} = α b_k + c2||d_k||"""
        bounds = realized_iss_bound(make_cert(), 1.0, [0.1, 0.1])
        np.testing.assert_allclose(bounds, [1.0, 0.6, 0.4], atol=1e-15)

    def test_tracking_bound(self):
        """L_φ = 2, ε_MPPI = 0.1, предельная граница 0.3, ε_φ = 0.05 → 0.25"""
        cert = make_cert(alpha=0.5, dbar=0.15)
        inputs = TrackingBoundInputs(eps_mppi=0.1, L_phi=2.0, eps_phi=0.05)
        self.assertAlmostEqual(tracking_bound(cert, inputs), 0.25, places=12)

    def test_tracking_bound_needs_positive_lipschitz(self):
        """L_φ = 0 отклоняется"""
        with self.assertRaises(ValidationError):
            tracking_bound(make_cert(), TrackingBoundInputs(0.1, 0.0, 0.0))

    def test_tracking_bound_is_monotone(self):
        """Рост ε_MPPI, d̄ или ε_φ не уменьшает оценку слежения"""
        rng = np.random.default_rng(6)
        for _ in range(200):
            eps_mppi, dbar, eps_phi = rng.uniform(0.0, 1.0, size=3)
            L_phi = rng.uniform(0.1, 5.0)
            base = tracking_bound(make_cert(dbar=dbar), TrackingBoundInputs(eps_mppi, L_phi, eps_phi))
            bump = rng.uniform(0.0, 0.5)
            for cert, inputs in (
                (make_cert(dbar=dbar), TrackingBoundInputs(eps_mppi + bump, L_phi, eps_phi)),
                (make_cert(dbar=dbar + bump), TrackingBoundInputs(eps_mppi, L_phi, eps_phi)),
                (make_cert(dbar=dbar), TrackingBoundInputs(eps_mppi, L_phi, eps_phi + bump)),
            ):
                self.assertGreaterEqual(tracking_bound(cert, inputs), base)

    def test_negative_tracking_inputs_rejected(self):
        """Отрицательные параметры оценки слежения отклоняются"""
        with self.assertRaises(ValidationError):
            TrackingBoundInputs(-0.1, 1.0, 0.0)


class ViolationRateTest(SimpleTestCase):
    def test_counts_strict_exceedances(self):
        """Ряд [0.1, 0.3, 0.5] при δ_max = 0.2 → 2/3"""
        self.assertAlmostEqual(violation_rate([0.1, 0.3, 0.5], 0.2), 2 / 3)

    def test_value_at_threshold_is_not_violation(self):
        """Значение, равное порогу, нарушением не считается"""
        self.assertEqual(violation_rate([0.2, 0.2], 0.2), 0.0)

    def test_empty_series_rejected(self):
        """Пустой ряд отклоняется"""
        with self.assertRaises(ValidationError) as ctx:
            violation_rate([], 0.2)
        self.assertEqual(ctx.exception.code, 'empty')

    def test_non_positive_threshold_rejected(self):
        """Неположительный порог отклоняется"""
        with self.assertRaises(ValidationError):
            violation_rate([0.1], 0.0)

    def test_permutation_invariant(self):
        """Перестановка ряда не меняет долю нарушений"""
        rng = np.random.default_rng(2)
        series = rng.uniform(0.0, 1.0, size=101)
        rate = violation_rate(series, 0.4)
        for _ in range(10):
            self.assertEqual(violation_rate(rng.permutation(series), 0.4), rate)


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------

class CertifyTest(SimpleTestCase):
    def setUp(self):
        self.m = small_model()

    def test_alpha_is_norm_plus_beta(self):
        """A(e) = 0.5·I, β = 0.2 → α = 0.7"""
        g = constant_generator(self.m, 0.5)
        self.assertAlmostEqual(compute_alpha(g, self.m, beta=0.2), 0.7, places=10)

    def test_identity_witness(self):
        """При P = I константы c1 = c2 = 1 и запасы неотрицательны"""
        cert = certify(constant_generator(self.m, 0.5), self.m, beta=0.2, dbar=0.01)
        self.assertAlmostEqual(cert.c1, 1.0, places=12)
        self.assertAlmostEqual(cert.c2, 1.0, places=12)
        self.assertEqual(len(cert.grid_norms), 81)
        self.assertTrue(np.all(cert.grid_margins >= 0))
        self.assertEqual(cert.dbar, 0.01)

    def test_margins_agree_with_random_unit_vectors(self):
        """P = I + 0.1·diag(шум): проверка по собственным числам согласуется с 10⁴ случайными векторами"""
        rng = np.random.default_rng(4)
        r = SMALL_MODEL.latent_dim
        P = np.eye(r) + 0.1 * np.diag(rng.uniform(0.0, 1.0, size=r))
        g = constant_generator(self.m, 0.5)
        cert = certify(g, self.m, P=P, beta=0.2)
        with torch.no_grad():
            A, _ = g(embed_env(self.m, cert.env_grid))
        A = A.numpy()
        v = rng.standard_normal((10_000, r))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        for i in range(0, len(A), 10):
            M = P - A[i].T @ P @ A[i] - (1.0 - cert.alpha ** 2) * np.eye(r)
            forms = np.einsum('ni,ij,nj->n', v, M, v)
            self.assertGreaterEqual(forms.min(), cert.grid_margins[i] - 1e-12)
            self.assertGreaterEqual(forms.min(), 0.0)
            self.assertLessEqual(np.linalg.norm(v @ A[i].T, axis=1).max(), cert.grid_norms[i] + 1e-12)
        quadratic = np.einsum('ni,ij,nj->n', v, P, v)
        self.assertLessEqual(1.0 / np.sqrt(quadratic.min()), cert.c2 + 1e-12)

    def test_contractive_operator_refused(self):
        """||A|| = 0.99, β = 0.05 → α ≥ 1, сертификат не выдаётся"""
        g = constant_generator(self.m, 0.99, bound=1.0)
        with self.assertRaises(CertificateRefused) as ctx:
            certify(g, self.m, beta=0.05)
        self.assertEqual(ctx.exception.code, 'certificate_refused')
        self.assertGreaterEqual(ctx.exception.diagnostics['alpha'], 1.0)
        self.assertEqual(len(ctx.exception.diagnostics['env']), 2)

    def test_asymmetric_witness_rejected(self):
        """Несимметричная P отклоняется"""
        P = np.eye(SMALL_MODEL.latent_dim)
        P[0, 1] = 0.5
        with self.assertRaises(ValidationError) as ctx:
            certify(constant_generator(self.m, 0.5), self.m, P=P)
        self.assertEqual(ctx.exception.code, 'invalid_witness')

    def test_indefinite_witness_rejected(self):
        """Не положительно определённая P отклоняется"""
        P = np.eye(SMALL_MODEL.latent_dim)
        P[0, 0] = -1.0
        with self.assertRaises(ValidationError) as ctx:
            certify(constant_generator(self.m, 0.5), self.m, P=P)
        self.assertEqual(ctx.exception.code, 'invalid_witness')

    def test_scaled_witness_constants(self):
        """P = 4·I: c1 = 1, c2 = 1/2"""
        cert = certify(constant_generator(self.m, 0.5), self.m, P=4.0 * np.eye(SMALL_MODEL.latent_dim), beta=0.2)
        self.assertAlmostEqual(cert.c1, 1.0, places=12)
        self.assertAlmostEqual(cert.c2, 0.5, places=12)

    def test_larger_margin_gives_smaller_bound(self):
        """Бо́льший запас ε₀ при прочих равных уменьшает предельную границу"""
        bounds = []
        for eps0 in (0.02, 0.1):
            g = constant_generator(self.m, 1.0, bound=1.0 - self.m.beta - eps0)
            bounds.append(ultimate_bound(certify(g, self.m, dbar=0.01)))
        self.assertLess(bounds[1], bounds[0])

    def test_files_reparse(self):
        """certificate.txt и CSV читаются обратно без потерь"""
        cert = certify(constant_generator(self.m, 0.5), self.m, beta=0.2, dbar=0.0123)
        with tempfile.TemporaryDirectory() as tmp:
            write_certificate(cert, tmp, extra={'QUANTILE': 0.995})
            loaded = read_certificate(tmp)
        self.assertEqual(loaded.alpha, cert.alpha)
        self.assertEqual(loaded.dbar, cert.dbar)
        self.assertEqual(loaded.c2, cert.c2)
        np.testing.assert_array_equal(loaded.P, cert.P)
        np.testing.assert_array_equal(loaded.env_grid, cert.env_grid)
        np.testing.assert_array_equal(loaded.grid_margins, cert.grid_margins)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

class EstimateDbarTest(SimpleTestCase):
    def setUp(self):
        self.d = small_dataset()
        self.m = small_model(self.d)
        self.g = constant_generator(self.m, 0.5)

    def test_full_quantile_is_exact_maximum(self):
        """Квантиль 1.0 даёт точный максимум по набору"""
        estimate = estimate_dbar(self.m, self.g, self.d, quantile=1.0)
        _, _, d_norms = one_step_residuals(self.m, self.g, *self.d.tuples())
        self.assertEqual(estimate.dbar, float(d_norms.max()))
        self.assertEqual(estimate.tail_count, 0)
        self.assertEqual(estimate.sample_count, len(self.d.tuples()[0]))

    def test_linear_envelope_covers_every_sample(self):
        """||Δ|| ≤ ρ₀||z|| + η на всех выборках"""
        estimate = estimate_dbar(self.m, self.g, self.d)
        z_norms, delta_norms, _ = one_step_residuals(self.m, self.g, *self.d.tuples())
        self.assertGreaterEqual(estimate.rho0, 0.0)
        self.assertTrue(np.all(delta_norms <= estimate.rho0 * z_norms + estimate.eta_max + 1e-12))

    def test_quantile_out_of_range_rejected(self):
        """Квантиль вне (0.9, 1] отклоняется"""
        with self.assertRaises(ValidationError):
            estimate_dbar(self.m, self.g, self.d, quantile=0.5)

    def test_lipschitz_and_reconstruction_are_finite(self):
        """Оценки L_φ и ε_φ конечны и положительны"""
        x, _, e, _ = self.d.tuples()
        self.assertGreater(estimate_lipschitz(self.m, x, e, n_pairs=200), 0.0)
        self.assertTrue(np.isfinite(estimate_reconstruction_error(self.m, x, e)))


class PerfectModelDbarTest(SimpleTestCase):
    """Encoder z ≡ b, A = 0.5·I, B = 0 and a residual equal to 0.5·b reproduce the data exactly."""

    def setUp(self):
        self.d = small_dataset(segments=3, length=5)
        self.m = small_model(self.d)
        self.g = constant_generator(self.m, 0.5)
        b = torch.linspace(-1.0, 1.0, self.m.latent_dim, dtype=torch.float64)
        with torch.no_grad():
            for layer in list(self.m.encoder.layers) + list(self.m.residual.layers):
                layer.weight.zero_()
            self.m.encoder.layers[-1].bias.copy_(b)
            self.m.residual.layers[-1].bias.copy_(0.5 * b)

    def test_exact_model_gives_zero_dbar(self):
        """Точная модель: d̄ ≤ 1e-8"""
        self.assertLessEqual(estimate_dbar(self.m, self.g, self.d, quantile=1.0).dbar, 1e-8)

    def test_ablated_residual_not_better(self):
        """Без остаточной сети d̄ не меньше, чем с ней"""
        full = estimate_dbar(self.m, self.g, self.d, include_residual=True)
        ablated = estimate_dbar(self.m, self.g, self.d, include_residual=False)
        self.assertGreaterEqual(ablated.dbar, full.dbar)
        self.assertGreater(ablated.dbar, 0.0)


class SoundnessAuditTest(SimpleTestCase):
    def test_no_violations_under_certificate(self):
        """Траектории в пределах d̄ не нарушают оценку ISS"""
        m = small_model()
        g = constant_generator(m, 0.5)
        cert = certify(g, m, beta=0.2, dbar=1e3)
        report = soundness_audit(m, g, cert, rollouts=3, steps=10)
        self.assertTrue(report.passed)
        self.assertEqual(report.rollouts, 3)
        self.assertEqual(report.steps, 33)
        self.assertEqual(report.conforming_steps, 33)
        self.assertEqual(report.realized_violations, 0)
        self.assertEqual(len(report.traces), 1)

    def test_realized_bound_holds_for_any_dbar(self):
        """Оценка по реализованным возмущениям выполняется на каждом шаге"""
        m = small_model()
        g = constant_generator(m, 0.5)
        report = soundness_audit(m, g, certify(g, m, beta=0.2, dbar=0.0), rollouts=2, steps=10)
        self.assertEqual(report.realized_violations, 0)
        self.assertEqual(report.conforming_steps + report.excluded_steps, report.steps)
