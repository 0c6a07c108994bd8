"""
Tests para el entrenamiento del operador de refuerzo
"""
import pytest
import numpy as np
import torch

from src.exceptions import RpiViolationError, TrainingDivergedError
from src.models.stable_operator import StableOperator
from src.services.certificates import build_certificate, check_constraints_along, check_lp_bound
from src.services.imc_boost import simulate_with_operator
from src.services.trainer import (
    LossSpec,
    OptimizerConfig,
    ScenarioBatch,
    acid_deviation,
    compare_losses,
    evaluate_batch,
    rollout_loss,
    sample_scenarios,
    train,
)


def small_operator(seed=0, output_scale=0.05):
    operator = StableOperator(1, 1, n_xi=3, seed=seed, output_scale=output_scale)
    params = operator.parameters_numpy()
    params['W'] = np.array([[1.0, 0.2, 0.0], [0.0, 0.5, 0.1], [0.0, 0.0, 0.25]])
    operator.load_numpy(params)
    return operator


def zero_batch(S=2, T=5):
    return ScenarioBatch(w=np.zeros((S, T, 1)), dx0=np.zeros((S, 1)))


def constant_batch(S, T, seed):
    """w(k) = c_s constante por escenario, |c_s| <= 0.1 y Δx(0) = 0"""
    c = np.random.default_rng(seed).uniform(-0.1, 0.1, size=(S, 1, 1))
    return ScenarioBatch(w=np.broadcast_to(c, (S, T, 1)).copy(), dx0=np.zeros((S, 1)))


class TestLossSpec:
    """Test suite para la especificación de la pérdida"""

    def test_ph_weights(self):
        """ω₁ = 1/10^-ȳ, ω₂ = 0.1, ω₃ = 0.05"""
        loss = LossSpec.ph([7.0])
        assert loss.omega1 == pytest.approx(1e7)
        assert loss.omega2 == 0.1
        assert loss.omega3 == 0.05

    def test_negative_weight(self):
        """Los pesos deben ser no negativos"""
        with pytest.raises(ValueError):
            LossSpec("quadratic", [0.0], omega2=-1.0)

    def test_custom_requires_hook(self):
        with pytest.raises(ValueError):
            LossSpec("custom", [0.0])

    def test_acid_deviation(self):
        """Solo cuentan las salidas más ácidas que ȳ"""
        deviation = acid_deviation(np.array([[7.0, 6.0, 8.0]]), 7.0)
        np.testing.assert_allclose(deviation, [1e-6 - 1e-7])


class TestSampleScenarios:
    """Test suite para el muestreo de escenarios"""

    def test_single_step(self, scalar_plant):
        """S = 1, T = 1"""
        batch = sample_scenarios(scalar_plant.constraints, scalar_plant.result, 1, 1, seed=0)
        assert batch.w.shape == (1, 1, 1)
        assert batch.dx0.shape == (1, 1)
        assert float(batch.w[0, 0, 0] ** 2 * 100.0) <= 1.0

    def test_membership(self, scalar_plant):
        """10⁴ muestras dentro de E(Q_w^0) y Δx(0) dentro del conjunto RPI"""
        batch = sample_scenarios(scalar_plant.constraints, scalar_plant.result, 100, 100, seed=1)
        levels = np.einsum('stn,nm,stm->st', batch.w, scalar_plant.constraints.Q_w0, batch.w)

        assert levels.max() <= 1.0 + 1e-12
        assert np.all(scalar_plant.result.rpi_set().contains(batch.dx0))

    def test_truncated_tail(self, scalar_plant):
        """t_cut = T/2 anula la cola"""
        batch = sample_scenarios(scalar_plant.constraints, scalar_plant.result, 4, 20, seed=2, t_cut=10)
        np.testing.assert_array_equal(batch.w[:, 10:], 0.0)
        assert np.any(batch.w[:, :10] != 0.0)

    def test_reproducible(self, scalar_plant):
        """Misma semilla, mismo lote"""
        first = sample_scenarios(scalar_plant.constraints, scalar_plant.result, 3, 7, seed=5)
        second = sample_scenarios(scalar_plant.constraints, scalar_plant.result, 3, 7, seed=5)
        np.testing.assert_array_equal(first.w, second.w)
        np.testing.assert_array_equal(first.dx0, second.dx0)


class TestRolloutLoss:
    """Test suite para la pérdida de lazo cerrado y sus gradientes"""

    def test_zero_rollout(self, scalar_plant):
        """Operador nulo, w = 0, Δx(0) = 0 → J = 0 con gradientes finitos"""
        loss = LossSpec.ph(scalar_plant.equilibrium.y_bar)
        value, grads = rollout_loss(scalar_plant.model, scalar_plant.equilibrium, scalar_plant.result,
                                    StableOperator(1, 1, n_xi=4), loss, zero_batch())

        assert value == 0.0
        for g in grads.values():
            assert np.all(np.isfinite(g))

    def test_gradients_vs_finite_differences(self, scalar_plant):
        """Error relativo <= 1e-5 en 3 escenarios de 10 pasos sin saturación"""
        plant = scalar_plant
        loss = LossSpec.quadratic(plant.equilibrium.y_bar, u_M=10.0)
        batch = sample_scenarios(plant.constraints, plant.result, 3, 10, seed=0)
        operator = small_operator()

        _, grads = rollout_loss(plant.model, plant.equilibrium, plant.result, operator, loss, batch)

        h = 1e-6
        params = operator.parameters_numpy()
        for name, value in params.items():
            fd = np.zeros_like(value)
            for idx in np.ndindex(*value.shape):
                for sign in (1.0, -1.0):
                    shifted = {k: v.copy() for k, v in params.items()}
                    shifted[name][idx] += sign * h
                    operator.load_numpy(shifted)
                    J, _ = rollout_loss(plant.model, plant.equilibrium, plant.result, operator, loss, batch)
                    fd[idx] += sign * J / (2 * h)
            operator.load_numpy(params)

            error = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
            assert error <= 1e-5, name

    def test_penalty_activates_on_saturation(self, scalar_plant):
        """El término ω₃ solo aparece cuando |ũ_b| > u_M"""
        plant = scalar_plant
        batch = sample_scenarios(plant.constraints, plant.result, 2, 10, seed=3)
        with_penalty = LossSpec.quadratic(plant.equilibrium.y_bar, u_M=0.0912, omega3=0.05)
        without_penalty = LossSpec.quadratic(plant.equilibrium.y_bar, u_M=0.0912, omega3=0.0)

        saturating = small_operator()
        params = saturating.parameters_numpy()
        params['D_m'] = np.array([[50.0]])
        saturating.load_numpy(params)

        def gap(operator):
            a = evaluate_batch(plant.model, plant.equilibrium, plant.result, operator, with_penalty, batch)
            b = evaluate_batch(plant.model, plant.equilibrium, plant.result, operator, without_penalty, batch)
            return a['loss'] - b['loss']

        assert gap(saturating) > 0.0
        assert gap(StableOperator(1, 1, n_xi=3)) == 0.0

    def test_initial_state_outside_rpi(self, scalar_plant):
        """Δx(0) fuera del conjunto RPI se rechaza"""
        batch = ScenarioBatch(w=np.zeros((1, 3, 1)), dx0=np.array([[100.0]]))
        with pytest.raises(RpiViolationError):
            rollout_loss(scalar_plant.model, scalar_plant.equilibrium, scalar_plant.result,
                         StableOperator(1, 1), LossSpec.ph([0.0]), batch)


class TestTrain:
    """Test suite para el lazo de optimización"""

    def test_noop_at_minimum(self, scalar_plant):
        """C_m = D_m = 0 con w ≡ 0: la pérdida ya es mínima"""
        operator = StableOperator(1, 1, n_xi=4, seed=0)
        before = operator.parameters_numpy()
        training = train(scalar_plant.model, scalar_plant.equilibrium, scalar_plant.result, operator,
                         LossSpec.quadratic([0.0]), zero_batch(), OptimizerConfig(epochs=3))

        assert training.loss_history == [0.0] * 4
        for name, value in operator.parameters_numpy().items():
            np.testing.assert_array_equal(value, before[name])

    def test_deterministic(self, scalar_plant):
        """Misma semilla y configuración → historial idéntico"""
        plant = scalar_plant
        batch = sample_scenarios(plant.constraints, plant.result, 3, 15, seed=7)
        config = OptimizerConfig(epochs=3, learning_rate=0.05)

        histories = []
        for _ in range(2):
            training = train(plant.model, plant.equilibrium, plant.result, small_operator(seed=4),
                             LossSpec.quadratic([0.0]), batch, config)
            histories.append(training.loss_history)

        assert histories[0] == histories[1]
        assert len(histories[0]) == 4

    def test_best_epoch_restored(self, scalar_plant):
        """La pérdida final no supera la inicial"""
        plant = scalar_plant
        batch = sample_scenarios(plant.constraints, plant.result, 3, 15, seed=8)
        operator = small_operator(seed=1, output_scale=0.3)
        training = train(plant.model, plant.equilibrium, plant.result, operator,
                         LossSpec.quadratic([0.0]), batch, OptimizerConfig(epochs=5, learning_rate=0.05))

        assert training.loss_history[training.best_epoch] <= training.loss_history[0]
        for name, value in operator.parameters_numpy().items():
            np.testing.assert_array_equal(value, training.snapshots[training.best_epoch][name])

    def test_divergence(self, scalar_plant):
        """NaN en la pérdida aborta indicando la época"""
        hook = lambda u, u_prev, y, u_tilde: torch.full((u.shape[0],), float('nan'), dtype=torch.float64)
        loss = LossSpec("custom", [0.0], stage_hook=hook)

        with pytest.raises(TrainingDivergedError) as excinfo:
            train(scalar_plant.model, scalar_plant.equilibrium, scalar_plant.result,
                  StableOperator(1, 1), loss, zero_batch(), OptimizerConfig(epochs=2))
        assert excinfo.value.epoch == 0

    def test_every_epoch_is_safe(self, scalar_plant):
        """Cada θ intermedio mantiene RPI, restricciones y cota ℓ₂"""
        plant = scalar_plant
        batch = sample_scenarios(plant.constraints, plant.result, 4, 20, seed=9)
        training = train(plant.model, plant.equilibrium, plant.result, small_operator(seed=2, output_scale=0.5),
                         LossSpec.ph(plant.equilibrium.y_bar), batch,
                         OptimizerConfig(epochs=5, learning_rate=0.5, restore_best=False))

        validation = sample_scenarios(plant.constraints, plant.result, 20, 40, seed=10)
        rpi = plant.result.rpi_set(plant.equilibrium)
        certificate = build_certificate(plant.result, 2)

        for epoch in range(len(training.loss_history)):
            operator = training.operator_at(epoch)
            for s in range(validation.size):
                trajectory = simulate_with_operator(
                    plant.model, plant.equilibrium, plant.result, operator,
                    plant.equilibrium.x_bar + validation.dx0[s], validation.w[s],
                )
                assert np.all(rpi.contains(trajectory.x, tol=1e-9))
                assert check_constraints_along(trajectory, plant.constraints)['pass']
                assert check_lp_bound(trajectory, certificate, plant.equilibrium)['pass']

    def test_held_out_improvement(self, scalar_plant):
        """Perturbaciones constantes: θ entrenado supera a u_b ≡ 0 fuera de la muestra"""
        plant = scalar_plant
        loss = LossSpec.quadratic([0.0], u_M=0.5, omega2=0.0)
        train_batch = constant_batch(8, 30, seed=21)
        test_batch = constant_batch(20, 30, seed=22)

        operator = StableOperator(1, 1, n_xi=4, seed=3)
        training = train(plant.model, plant.equilibrium, plant.result, operator, loss, train_batch,
                         OptimizerConfig(epochs=30, learning_rate=0.02))
        baseline = StableOperator(1, 1, n_xi=4, seed=3)

        trained_loss = evaluate_batch(plant.model, plant.equilibrium, plant.result, operator,
                                      loss, test_batch)['loss']
        baseline_loss = evaluate_batch(plant.model, plant.equilibrium, plant.result, baseline,
                                       loss, test_batch)['loss']

        assert training.best_epoch > 0
        assert trained_loss < baseline_loss

    def test_compare_losses(self, scalar_plant):
        """Métricas de la comparación de pérdidas"""
        plant = scalar_plant
        train_batch = sample_scenarios(plant.constraints, plant.result, 2, 10, seed=11)
        test_batch = sample_scenarios(plant.constraints, plant.result, 2, 10, seed=12)

        metrics = compare_losses(plant.model, plant.equilibrium, plant.result, train_batch, test_batch,
                                 OptimizerConfig(epochs=2), n_xi=4)

        for key in ("acid_deviation_ph", "acid_deviation_quadratic", "acid_deviation_baseline",
                    "ph_loss_baseline", "reduction_percent"):
            assert np.isfinite(metrics[key])
