"""
Tests para la síntesis LMI
"""
import pytest
import numpy as np

from src.exceptions import (
    BoxTooLargeError,
    InfeasibleEquilibriumError,
    LocalityViolationError,
    SynthesisFailedError,
)
from src.models.rnn_model import ConstraintSets, Equilibrium, RnnModel, find_equilibrium
from src.services.benchmark import BenchmarkSpec, generate_benchmark
from src.services.certificates import check_rpi_montecarlo
from src.services.lmi_synthesis import (
    AffineMatrix,
    BoostBox,
    ConicProblem,
    PsdConstraint,
    SynthesisOptions,
    SynthesisResult,
    VariableBlock,
    assemble_lmis,
    block_matrix,
    compute_vbar,
    init_boost_box,
    solve_feasibility,
    synthesize,
)

from .conftest import linear_scalar_model


def equilibrium_at(u_bar, n=1, n_y=1, v_bar=()):
    return Equilibrium(np.zeros(n), np.asarray(u_bar, dtype=float), np.zeros(n_y),
                       np.asarray(v_bar, dtype=float), 0.0)


def tanh_model(A_tilde, B_tilde):
    """Planta escalar con un canal tanh y preactivación configurable"""
    return RnnModel([[0.5]], [[1.0]], [[0.1]], [[A_tilde]], [[B_tilde]], [[1.0]], ["tanh"])


class TestBoostBox:
    """Test suite para la caja de refuerzo"""

    def test_init_symmetric(self):
        """U = [-1, 1], ū = 0 → t = 1, g_b = 1"""
        constraints = ConstraintSets.from_bounds([-1.0], [1.0], [-1.0], [1.0], 0.1, 1)
        box = init_boost_box(constraints, equilibrium_at([0.0]))
        np.testing.assert_allclose(box.g_b, [1.0], rtol=1e-9)

    def test_init_binding_row(self):
        """ū = 0.5 → b̄_u = (0.5, 1.5) → t = 0.5, g_b = 2"""
        constraints = ConstraintSets.from_bounds([-1.0], [1.0], [-1.0], [1.0], 0.1, 1)
        equilibrium = equilibrium_at([0.5])

        np.testing.assert_allclose(constraints.input_margin(equilibrium.u_bar), [0.5, 1.5])
        np.testing.assert_allclose(init_boost_box(constraints, equilibrium).g_b, [2.0], rtol=1e-9)

    def test_init_decoupled(self):
        """m = 2, G_u = [I; -I], b̄_u = 1 → g_b = (1, 1)"""
        constraints = ConstraintSets.from_bounds([-1.0, -1.0], [1.0, 1.0], [-1.0], [1.0], 0.1, 1)
        box = init_boost_box(constraints, equilibrium_at([0.0, 0.0]))
        np.testing.assert_allclose(box.g_b, [1.0, 1.0], rtol=1e-9)

    def test_init_equilibrium_on_boundary(self):
        """b̄_u con entrada no positiva"""
        constraints = ConstraintSets.from_bounds([-1.0], [1.0], [-1.0], [1.0], 0.1, 1)
        with pytest.raises(InfeasibleEquilibriumError):
            init_boost_box(constraints, equilibrium_at([1.0]))

    def test_geometry(self):
        """Vértices, máximo sobre la caja y pertenencia"""
        box = BoostBox.from_bound([0.5, 2.0], 2)

        np.testing.assert_allclose(box.g_b, [2.0, 0.5])
        assert box.vertices().shape == (4, 2)
        assert box.max_over_box(np.array([1.0, -1.0])) == pytest.approx(2.5)
        assert box.contains(np.array([0.5, -2.0]))
        assert not box.contains(np.array([0.6, 0.0]))

    def test_invalid_box(self):
        """g_b debe ser positivo"""
        with pytest.raises(ValueError):
            BoostBox(np.array([1.0, 0.0]))


class TestComputeVbar:
    """Test suite para v̄(h)"""

    def test_global_sector(self):
        """h = 1 → +∞"""
        assert compute_vbar("tanh", 1.0) == float('inf')

    @pytest.mark.parametrize("h,expected", [(4.0, 0.549306144334055), (2.0, 0.881373587019543)])
    def test_tanh_closed_form(self, h, expected):
        """tanh: v̄(h) = artanh(h^-1/2)"""
        assert compute_vbar("tanh", h) == pytest.approx(np.arctanh(h ** -0.5), abs=1e-9)
        assert compute_vbar("tanh", h) == pytest.approx(expected, abs=1e-6)

    def test_erf_closed_form(self):
        """erf: 1 - exp(-π v²/4) = 1/h"""
        h = 3.0
        expected = np.sqrt(-4.0 / np.pi * np.log(1.0 - 1.0 / h))
        assert compute_vbar("erf", h) == pytest.approx(expected, abs=1e-9)

    def test_domain(self):
        """h < 1 fuera del dominio"""
        with pytest.raises(ValueError):
            compute_vbar("tanh", 0.5)


class TestConicProblem:
    """Test suite para el problema cónico y su backend"""

    def test_block_matrix_symmetric(self):
        """Bloques del triángulo superior reflejados"""
        Q = VariableBlock("Q", (2, 2), symmetric=True)
        M = block_matrix((2, 1), {(0, 0): AffineMatrix.variable(Q), (0, 1): np.ones((2, 1))})
        value = M.evaluate({"Q": np.eye(2)})

        assert M.shape == (3, 3)
        np.testing.assert_allclose(value, value.T)
        np.testing.assert_allclose(value[2, :2], [1.0, 1.0])

    def test_block_matrix_zero_size(self):
        """Bloques de tamaño cero se omiten"""
        M = block_matrix((2, 0), {(0, 0): np.eye(2), (0, 1): np.zeros((2, 0))})
        np.testing.assert_allclose(M.evaluate({}), np.eye(2))

    def test_trivial_problem(self):
        """I ⪯ Q ⪯ 2I → residuos >= -1e-7"""
        block = VariableBlock("Q", (2, 2), symmetric=True)
        Q = AffineMatrix.variable(block)
        problem = ConicProblem(
            variables=(block,),
            psd=(PsdConstraint("lower", Q - np.eye(2)), PsdConstraint("upper", 2.0 * np.eye(2) - Q)),
        )

        report = solve_feasibility(problem)

        assert report.feasible
        assert min(report.residuals.values()) >= -1e-7
        eigenvalues = np.linalg.eigvalsh(report.assignment["Q"])
        assert eigenvalues.min() >= 1.0 - 1e-7
        assert eigenvalues.max() <= 2.0 + 1e-7

    def test_undeclared_variable(self):
        """Una restricción no puede usar variables no declaradas"""
        block = VariableBlock("Q", (1, 1), symmetric=True)
        with pytest.raises(ValueError):
            ConicProblem(variables=(), psd=(PsdConstraint("x", AffineMatrix.variable(block)),))


class TestAssembleLmis:
    """Test suite para el ensamblaje de las condiciones"""

    @pytest.fixture
    def constraints(self):
        return ConstraintSets.from_bounds([-2.0], [2.0], [-5.0], [5.0], 0.1, 1)

    def test_linear_counts(self, constraints):
        """ν = 0: sin bloques 6d, un 6e por fila de salida y un 6f por fila de entrada"""
        model = linear_scalar_model()
        equilibrium = find_equilibrium(model, np.zeros(1))
        problem = assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(0.5, 1),
                                np.ones(0), 1.0)

        assert problem.count("6a") == 1
        assert problem.count("6b") == 1
        assert problem.count("6c") == 1
        assert problem.count("6d") == 0
        assert problem.count("6e") == constraints.n_r
        assert problem.count("6f") == constraints.n_t
        assert problem.block("U_s").shape == (0, 0)

    def test_global_sector_no_locality_blocks(self, constraints):
        """H_s = I con umbral h > 1 → ningún bloque 6d"""
        model = tanh_model(1.0, 0.0)
        equilibrium = find_equilibrium(model, np.zeros(1))
        problem = assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(0.5, 1),
                                np.ones(1), 2.0)

        assert problem.count("6d") == 0
        assert problem.block("Q_sws").shape == (2, 2)

    def test_local_sector_blocks(self, constraints):
        """h > 1 emite un bloque 6d por canal regional"""
        model = tanh_model(1.0, 0.0)
        equilibrium = find_equilibrium(model, np.zeros(1))
        problem = assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(0.5, 1),
                                np.array([4.0]), 2.0)

        assert problem.count("6d") == 1
        assert problem.metadata['vbar'][0] == pytest.approx(np.arctanh(0.5), abs=1e-9)

    def test_locality_violation(self, constraints):
        """|v̄_eq| > v̄(h) se rechaza antes de resolver"""
        model = tanh_model(0.0, 1.0)
        equilibrium = find_equilibrium(model, np.array([1.5]))

        with pytest.raises(LocalityViolationError) as excinfo:
            assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(0.1, 1),
                          np.array([4.0]), 2.0)
        assert excinfo.value.margin < 0

    def test_box_too_large(self, constraints):
        """Una caja que llena U deja margen nulo en 6f"""
        model = linear_scalar_model()
        equilibrium = find_equilibrium(model, np.zeros(1))

        with pytest.raises(BoxTooLargeError):
            assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(2.0, 1),
                          np.ones(0), 2.0)

    @pytest.mark.filterwarnings("error::DeprecationWarning")
    def test_box_margin_off_center(self, constraints):
        """ū = 0.5: el margen de 6f es b_u - G_u ū - max sobre la caja"""
        model = linear_scalar_model(a=0.5)
        equilibrium = find_equilibrium(model, np.array([0.5]))

        problem = assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(1.0, 1),
                                np.ones(0), 2.0)
        assert problem.count("6f") == constraints.n_t

        with pytest.raises(BoxTooLargeError) as excinfo:
            assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(1.6, 1),
                          np.ones(0), 2.0)
        assert isinstance(excinfo.value.margin, float)
        assert excinfo.value.margin == pytest.approx(-0.1)

    def test_infeasible_toy(self):
        """x⁺ = 2x con B = 0 no admite ganancia estabilizante"""
        model = linear_scalar_model(a=2.0, b=0.0)
        equilibrium = find_equilibrium(model, np.zeros(1))
        constraints = ConstraintSets.from_bounds([-1.0], [1.0], [-1.0], [1.0], 0.1, 1)

        problem = assemble_lmis(model, equilibrium, constraints, BoostBox.from_bound(0.5, 1),
                                np.ones(0), 4.0)
        report = solve_feasibility(problem)

        assert report.status == "infeasible"
        assert not report.feasible


class TestSynthesize:
    """Test suite para el procedimiento completo"""

    def test_scalar_plant(self, scalar_plant):
        """x⁺ = 1.1x + u: la ganancia estabiliza y el certificado es global"""
        result = scalar_plant.result

        assert result.global_flag
        assert abs(1.1 + result.K[0, 0]) < 1.0
        assert result.gamma_s >= 1.0
        np.testing.assert_allclose(result.P_s @ result.Q_s, np.eye(1), atol=1e-9)
        assert all(value >= -1e-7 for value in result.residuals.values())
        assert set(result.residuals) >= {"6a", "6b", "6c", "6e", "6f", "6g"}

    def test_scalar_plant_rpi_inside_constraints(self, scalar_plant):
        """El conjunto RPI respeta |y| <= 5 y |u| <= 5"""
        rpi = scalar_plant.result.rpi_set()
        assert rpi.support(np.array([1.0])) <= 5.0
        assert abs(scalar_plant.result.K[0, 0]) * rpi.support(np.array([1.0])) + 0.5 <= 5.0 + 1e-9

    def test_box_restarts(self):
        """La caja del programa lineal llena U y el reinicio la reduce"""
        model = linear_scalar_model()
        equilibrium = find_equilibrium(model, np.zeros(1))
        constraints = ConstraintSets.from_bounds([-5.0], [5.0], [-5.0], [5.0], 0.1, 1)

        result = synthesize(model, equilibrium, constraints)

        assert result.restarts >= 1
        assert result.boost_box.max_over_box(np.ones(1)) < 5.0
        assert abs(1.1 + result.K[0, 0]) < 1.0

    def test_infeasible_equilibrium(self):
        """ū sobre la frontera de U"""
        model = linear_scalar_model(a=0.5)
        equilibrium = find_equilibrium(model, np.array([1.0]))
        constraints = ConstraintSets.from_bounds([-1.0], [1.0], [-5.0], [5.0], 0.1, 1)

        with pytest.raises(InfeasibleEquilibriumError):
            synthesize(model, equilibrium, constraints)

    def test_schedule_exhausted(self):
        """x⁺ = 2x con B = 0 agota el calendario y entrega el último reporte"""
        model = linear_scalar_model(a=2.0, b=0.0)
        equilibrium = find_equilibrium(model, np.zeros(1))
        constraints = ConstraintSets.from_bounds([-1.0], [1.0], [-1.0], [1.0], 0.1, 1)
        options = SynthesisOptions(boost_bound=[0.5], max_rounds=3, max_restarts=1)

        with pytest.raises(SynthesisFailedError) as excinfo:
            synthesize(model, equilibrium, constraints, options)
        assert excinfo.value.report is not None
        assert not excinfo.value.report.feasible

    def test_result_serialization(self, scalar_plant):
        """Los v̄ infinitos se codifican como null"""
        data = scalar_plant.result.to_dict()
        data['vbar'] = [None]
        data['H_s'] = [1.0]
        restored = SynthesisResult.from_dict(data)

        assert restored.vbar[0] == float('inf')
        np.testing.assert_allclose(restored.K, scalar_plant.result.K)
        assert restored.boost_box.g_b[0] == pytest.approx(2.0)


class TestSynthesizeBenchmarks:
    """Test suite de la síntesis sobre benchmarks aleatorios"""

    @pytest.fixture(scope="class")
    def regional(self):
        """Planta inestable en lazo abierto con tanh fuerte: exige sector regional"""
        spec = BenchmarkSpec(n=3, nu=2, nonlinearity_gain=2.0, spectral_radius=1.05, u_bar=[0.3])
        model, equilibrium, constraints = generate_benchmark(spec)
        return model, equilibrium, constraints, synthesize(model, equilibrium, constraints)

    def test_regional_sector(self, regional):
        """H_s ≠ I: bloques 6d emitidos, v̄ finito y localidad satisfecha"""
        model, equilibrium, constraints, result = regional

        assert not result.global_flag
        assert np.any(result.H_s > result.index_threshold)
        assert np.any(np.isfinite(result.vbar))
        assert "6d" in result.residuals
        assert result.residuals["6g"] >= 0.0
        assert all(value >= -1e-7 for value in result.residuals.values())

    def test_regional_rpi(self, regional):
        """El conjunto RPI regional resiste 10⁴ muestras"""
        model, equilibrium, constraints, result = regional
        report = check_rpi_montecarlo(model, result, equilibrium, constraints, samples=10_000, seed=3)

        assert report['pass']
        assert report['worst_violation'] <= 1e-9

    @pytest.mark.parametrize("seed,n", [(0, 2), (1, 3), (2, 4), (3, 2), (4, 3)])
    def test_random_benchmarks(self, seed, n):
        """Benchmarks aleatorios de 2 a 4 estados: residuos y RPI válidos"""
        model, equilibrium, constraints = generate_benchmark(BenchmarkSpec(seed=seed, n=n))

        result = synthesize(model, equilibrium, constraints)

        assert all(value >= -1e-7 for value in result.residuals.values())
        assert result.residuals["6g"] >= 0.0
        report = check_rpi_montecarlo(model, result, equilibrium, constraints, samples=10_000, seed=seed)
        assert report['pass']
