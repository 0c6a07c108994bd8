"""
Tests para Ellipsoid
"""
import pytest
import numpy as np

from src.exceptions import DimensionError
from src.models.ellipsoid import Ellipsoid


class TestEllipsoid:
    """Test suite para elipsoides"""

    @pytest.fixture
    def ellipsoid(self):
        return Ellipsoid(np.diag([1.0, 4.0]), np.array([1.0, -1.0]))

    def test_level(self, ellipsoid):
        """Forma cuadrática en puntos sueltos y en lote"""
        assert ellipsoid.level(np.array([1.0, -1.0])) == pytest.approx(0.0)
        np.testing.assert_allclose(
            ellipsoid.level(np.array([[2.0, -1.0], [1.0, -0.5]])), [1.0, 1.0]
        )

    def test_contains(self, ellipsoid):
        """Pertenencia con frontera incluida"""
        assert ellipsoid.contains(np.array([2.0, -1.0]))
        assert not ellipsoid.contains(np.array([2.1, -1.0]))
        assert ellipsoid.violation(np.array([3.0, -1.0])) == pytest.approx(3.0)

    def test_support(self, ellipsoid):
        """max gᵀv = gᵀc + sqrt(gᵀ S⁻¹ g)"""
        assert ellipsoid.support(np.array([0.0, 1.0])) == pytest.approx(-0.5)
        assert ellipsoid.support(np.array([1.0, 0.0])) == pytest.approx(2.0)

    def test_sample_inside(self, ellipsoid):
        """Las muestras caen en el elipsoide y la fracción pedida en la frontera"""
        rng = np.random.default_rng(0)
        points = ellipsoid.sample(1000, rng, surface_fraction=0.2)
        levels = ellipsoid.level(points)

        assert points.shape == (1000, 2)
        assert np.all(levels <= 1.0 + 1e-12)
        np.testing.assert_allclose(levels[:200], 1.0, atol=1e-12)

    def test_scaled(self, ellipsoid):
        """E(S/γ) agranda los semiejes en sqrt(γ)"""
        bigger = ellipsoid.scaled(4.0, center=np.zeros(2))
        assert bigger.support(np.array([1.0, 0.0])) == pytest.approx(2.0)

    def test_invalid_shape(self):
        """Matrices no simétricas, indefinidas o con centro inconsistente"""
        with pytest.raises(ValueError):
            Ellipsoid.centered(np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            Ellipsoid.centered(np.diag([1.0, -1.0]))
        with pytest.raises(DimensionError):
            Ellipsoid(np.eye(2), np.zeros(3))
