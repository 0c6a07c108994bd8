"""
Tests para los certificados de estabilidad y las verificaciones
"""
import pytest
import numpy as np

from src.exceptions import DegenerateCertificateError
from src.models.trajectory import Trajectory
from src.services.certificates import (
    build_certificate,
    check_constraints_along,
    check_incremental_convergence,
    check_lp_bound,
    check_p_form,
    check_rpi_montecarlo,
    mu,
    parse_p,
    sequence_norm,
)
from src.services.imc_boost import simulate_closed_loop
from src.services.lmi_synthesis import BoostBox, SynthesisResult


def isotropic_result(alpha, beta, n=2, m=1):
    """P_s = I, Q̃_sx = α I, Q_sws = β I"""
    return SynthesisResult(
        K=np.zeros((m, n)), P_s=np.eye(n), Q_s=np.eye(n), Z=np.zeros((m, n)),
        gamma_s=1.0, H_s=np.ones(0), U_s=np.zeros((0, 0)),
        Qtilde_sx=alpha * np.eye(n), Q_sws=beta * np.eye(n + m), residuals={},
        boost_box=BoostBox(np.ones(m)), global_flag=True, vbar=np.ones(0),
    )


def constant_trajectory(x, u, y, T=5):
    return Trajectory(
        x=np.tile(x, (T, 1)), u=np.tile(u, (T, 1)), y=np.tile(y, (T, 1)),
        u_b=np.zeros((T, len(u))), u_tilde_b=np.zeros((T, len(u))), w=np.zeros((T, len(x))),
    )


class TestConstants:
    """Test suite para las constantes del certificado"""

    def test_isotropic_closed_form(self):
        """a = sqrt(1 - α), κ₀ = 1, κ₁ = sqrt(β)"""
        certificate = build_certificate(isotropic_result(0.36, 4.0))

        assert certificate.a == pytest.approx(0.8)
        assert certificate.kappa0 == pytest.approx(1.0)
        assert certificate.kappa1 == pytest.approx(2.0)
        assert certificate.gain_x_ub == pytest.approx(2.0 / 0.2)
        assert certificate.gain_u_ub == pytest.approx(1.0)

    def test_mu_values(self):
        """μ₂(0.5) = 2/√3 y μ_∞ = 1"""
        assert mu(0.5, 2) == pytest.approx(2.0 / np.sqrt(3.0))
        assert mu(0.5, "inf") == 1.0
        assert mu(0.0, 1) == pytest.approx(1.0)

    def test_degenerate(self):
        """Q̃_sx = 0 da ã = 1"""
        with pytest.raises(DegenerateCertificateError):
            build_certificate(isotropic_result(0.0, 1.0))

    def test_parse_p(self):
        """Índices admitidos"""
        assert parse_p("inf") == float('inf')
        assert parse_p(2) == 2.0
        with pytest.raises(ValueError):
            parse_p(0.5)

    def test_sequence_norm(self):
        """Norma ℓp de las normas euclídeas por muestra"""
        seq = np.array([[3.0, 4.0], [0.0, 0.0], [6.0, 8.0]])
        assert sequence_norm(seq, 1) == pytest.approx(15.0)
        assert sequence_norm(seq, "inf") == pytest.approx(10.0)
        assert sequence_norm(np.zeros((0, 2)), 2) == 0.0


class TestRpiMontecarlo:
    """Test suite para la falsificación de la invariancia"""

    def test_equilibrium_fixed_point(self, scalar_plant):
        """x = x̄, w = 0, u_b = 0 → sucesor x̄"""
        eq = scalar_plant.equilibrium
        successor = scalar_plant.model.step(eq.x_bar, eq.u_bar, np.zeros(1))
        np.testing.assert_allclose(successor, eq.x_bar)

    def test_synthesized_gain(self, scalar_plant):
        """10⁴ muestras sin violaciones"""
        report = check_rpi_montecarlo(scalar_plant.model, scalar_plant.result,
                                      scalar_plant.equilibrium, scalar_plant.constraints,
                                      samples=10_000, seed=0)
        assert report['pass']
        assert report['failures'] == 0
        assert report['samples'] == 10_000

    def test_corrupted_gain(self, scalar_plant):
        """Sin realimentación la planta inestable abandona el conjunto"""
        report = check_rpi_montecarlo(scalar_plant.model, scalar_plant.result,
                                      scalar_plant.equilibrium, scalar_plant.constraints,
                                      samples=2000, seed=1, K=np.zeros((1, 1)))
        assert not report['pass']
        assert report['failures'] > 0

    def test_reproducible(self, scalar_plant):
        """Misma semilla, mismo reporte"""
        args = (scalar_plant.model, scalar_plant.result, scalar_plant.equilibrium,
                scalar_plant.constraints)
        first = check_rpi_montecarlo(*args, samples=500, seed=3, K=np.zeros((1, 1)))
        second = check_rpi_montecarlo(*args, samples=500, seed=3, K=np.zeros((1, 1)))
        assert first == second

    def test_p_form(self, scalar_plant):
        """Forma en P de (6e)/(6f)"""
        report = check_p_form(scalar_plant.model, scalar_plant.result,
                              scalar_plant.equilibrium, scalar_plant.constraints)
        assert report['pass']
        assert report['samples'] == 4


class TestConstraintsAlong:
    """Test suite para la verificación de restricciones"""

    def test_constant_inside(self, scalar_plant):
        """Trayectoria constante en (ū, ȳ): residuos negativos"""
        report = check_constraints_along(
            constant_trajectory([0.0], [0.0], [0.0]), scalar_plant.constraints
        )
        assert report['pass']
        assert report['worst_violation'] < 0

    def test_touching_face(self, scalar_plant):
        """y sobre una cara: residuo 0 y aprobado"""
        report = check_constraints_along(
            constant_trajectory([0.0], [0.0], [5.0]), scalar_plant.constraints
        )
        assert report['pass']
        assert report['output_worst'] == pytest.approx(0.0)

    def test_outside(self, scalar_plant):
        """y fuera por 0.1: falla con residuo 0.1"""
        report = check_constraints_along(
            constant_trajectory([0.0], [0.0], [5.1]), scalar_plant.constraints
        )
        assert not report['pass']
        assert report['worst_violation'] == pytest.approx(0.1)
        assert report['first_violation'] == 0


class TestLpBound:
    """Test suite para las cotas ℓp"""

    def test_zero_trajectory(self, scalar_plant):
        """w = 0, u_b = 0, Δx(0) = 0: todas las normas nulas"""
        certificate = build_certificate(scalar_plant.result, 2)
        trajectory = simulate_closed_loop(
            scalar_plant.model, scalar_plant.equilibrium, scalar_plant.result,
            scalar_plant.equilibrium.x_bar, np.zeros((20, 1)),
        )
        report = check_lp_bound(trajectory, certificate, scalar_plant.equilibrium)

        assert report['pass']
        assert report['norm_dx'] == 0.0
        assert report['bound_x'] == 0.0

    @pytest.mark.parametrize("p", [1, 2, "inf"])
    def test_impulse(self, scalar_plant, p):
        """Impulso en w(0): la cota se cumple con holgura"""
        certificate = build_certificate(scalar_plant.result, p)
        w = np.zeros((60, 1))
        w[0] = 0.08
        trajectory = simulate_closed_loop(
            scalar_plant.model, scalar_plant.equilibrium, scalar_plant.result,
            scalar_plant.equilibrium.x_bar + 0.1, w,
        )
        report = check_lp_bound(trajectory, certificate, scalar_plant.equilibrium)

        assert report['pass']
        assert report['bound_x'] > report['norm_dx']
        assert report['bound_u'] > report['norm_du']

    def test_mismatched_p(self, scalar_plant):
        """El índice debe coincidir con el del certificado"""
        certificate = build_certificate(scalar_plant.result, 2)
        trajectory = constant_trajectory([0.0], [0.0], [0.0])
        with pytest.raises(ValueError):
            check_lp_bound(trajectory, certificate, scalar_plant.equilibrium, p="inf")


class TestIncrementalConvergence:
    """Test suite para la convergencia incremental"""

    def test_two_initial_states(self, scalar_plant):
        """Dos corridas con igual (w, u_b) convergen entre sí"""
        certificate = build_certificate(scalar_plant.result)
        rng = np.random.default_rng(0)
        T = 400
        w = rng.uniform(-0.1, 0.1, size=(T, 1))
        u_b = rng.uniform(-0.5, 0.5, size=(T, 1))

        report = check_incremental_convergence(
            scalar_plant.model, scalar_plant.result, scalar_plant.equilibrium, certificate,
            np.array([0.5]), np.array([-0.5]), w, u_b,
        )

        assert report['pass']
        assert report['converged_at'] <= 2 * report['predicted']
