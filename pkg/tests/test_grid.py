import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from replicator_mfg.grid import (DiscreteMeasure, GridError, GridSpec, ValueField, as_array,
                                 density, field_stats, make_uniform, mean_action, tv_row_norm)


def test_cell_centres():
    g = GridSpec(4, 2)
    np.testing.assert_allclose(g.x_hat, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(g.y_hat, [0.25, 0.75])
    assert g.dx == 0.25 and g.dy == 0.5 and g.shape == (4, 2)


@pytest.mark.parametrize("n_x,n_y", [(0, 1), (-3, 2), (2.5, 1), (True, 1), (3, 0)])
def test_grid_rejects_bad_sizes(n_x, n_y):
    with pytest.raises(GridError):
        GridSpec(n_x, n_y)


def test_centres_are_read_only():
    g = GridSpec(3)
    with pytest.raises(ValueError):
        g.x_hat[0] = 1.0


def test_uniform_measure():
    m = make_uniform(GridSpec(5, 3))
    np.testing.assert_allclose(m.values, 0.2)
    np.testing.assert_allclose(density(m, GridSpec(5, 3)).values, 1.0)


def test_measure_rejects_negative_mass_with_location():
    with pytest.raises(GridError, match=r"i=1, j=0"):
        DiscreteMeasure([[0.6], [-0.1], [0.5]])


def test_measure_rejects_bad_row_sum():
    with pytest.raises(GridError, match="j=1"):
        DiscreteMeasure([[0.5, 0.5], [0.5, 0.6]])


def test_measure_accepts_roundoff_but_not_more():
    DiscreteMeasure([[0.5 + 5e-13], [0.5]])
    with pytest.raises(GridError):
        DiscreteMeasure([[0.5 + 1e-11], [0.5]])


def test_measure_rejects_non_finite():
    with pytest.raises(GridError):
        DiscreteMeasure([[np.nan], [1.0]])
    with pytest.raises(GridError):
        ValueField([[np.inf]])


def test_measure_is_immutable_copy():
    raw = np.array([[0.25], [0.75]])
    m = DiscreteMeasure(raw)
    raw[0, 0] = 9.0
    assert m.values[0, 0] == 0.25
    with pytest.raises(ValueError):
        m.values[0, 0] = 0.5


def test_normalized_is_explicit_rescaling():
    m = DiscreteMeasure.normalized([[1.0, 2.0], [3.0, 2.0]])
    np.testing.assert_allclose(m.values, [[0.25, 0.5], [0.75, 0.5]])
    with pytest.raises(GridError):
        DiscreteMeasure.normalized([[0.0], [0.0]])


def test_point_mass_density():
    g = GridSpec(4)
    m = DiscreteMeasure([[0.0], [1.0], [0.0], [0.0]])
    assert density(m, g).values[1, 0] == 4.0


def test_tv_norm_is_max_over_types():
    a = np.array([[0.1, -0.3], [-0.2, 0.1]])
    assert tv_row_norm(a) == pytest.approx(0.4)


def test_mean_action_is_type_average():
    g = GridSpec(2, 2)
    m = DiscreteMeasure([[1.0, 0.0], [0.0, 1.0]])
    # type rows sit at 0.25 and 0.75
    assert mean_action(m, g) == pytest.approx(0.5)
    assert mean_action(make_uniform(GridSpec(10)), GridSpec(10)) == pytest.approx(0.5)


def test_field_stats():
    assert field_stats([[1.0, -3.0], [0.0, 2.0]]) == (3.0, 1.5)


def test_shape_mismatch():
    with pytest.raises(GridError, match="shape"):
        density(np.ones((3, 1)) / 3, GridSpec(4))


def test_as_array_promotes_vectors():
    assert as_array([0.5, 0.5]).shape == (2, 1)


@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_normalized_measures_are_valid(n_x, n_y, seed):
    w = np.random.default_rng(seed).random((n_x, n_y)) + 1e-3
    m = DiscreteMeasure.normalized(w)
    np.testing.assert_allclose(m.values.sum(axis=0), 1.0, atol=1e-12)
    assert 0.0 <= mean_action(m, GridSpec(n_x, n_y)) <= 1.0
    assert tv_row_norm(m.values) == pytest.approx(1.0)
