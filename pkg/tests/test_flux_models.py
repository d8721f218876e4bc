import math

import numpy as np
import pytest

from errors import ConfigurationError, InvalidArgumentError
from flux_models import (CheckerboardTable, FluxModel, FourierSeries, StructureConstants, TimeModulus,
                         check_structure, check_time_modulus, declared_constants, eval_flux,
                         structure_margins, time_gate)


def test_eval_flux_constant_coefficient_2d():
    model = FluxModel(family='p_laplacian', coefficients={'space': FourierSeries(mean=1.0, dim=2)},
                      constants=StructureConstants(p=2.0, alpha=1.0, c0=1.0, c1=1.05, c2=0.95))
    a = eval_flux(model, [0.3, 0.7], 0.2, [1.0, 0.0])
    np.testing.assert_allclose(a, [1.0, 0.0])


def test_eval_flux_harmonic_coefficient(harmonic):
    a = eval_flux(harmonic, 0.125, 0.0, 1.0)
    np.testing.assert_allclose(a, [2.0 + math.sqrt(2.0) / 2.0], atol=1e-12)


def test_eval_flux_rejects_non_finite(harmonic):
    with pytest.raises(InvalidArgumentError, match="non-finite"):
        eval_flux(harmonic, np.nan, 0.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        eval_flux(harmonic, 0.1, 0.0, np.inf)


def test_zero_gradient_gives_zero_flux(models):
    for model in models.values():
        y = np.random.default_rng(1).random((100, model.dim))
        a = model.eval(y, 0.3, np.zeros((100, model.dim)))
        assert np.all(a == 0.0)


def test_periodic_wrapping_is_exact(models):
    rng = np.random.default_rng(2)
    model = models['separable_oscillating_1d']
    y = rng.integers(0, 64, (50, 1)) / 64.0
    tau = rng.integers(0, 64, 50) / 64.0
    xi = rng.uniform(-2, 2, (50, 1))
    shifted = model.eval(y + rng.integers(-3, 4, (50, 1)), tau + rng.integers(-3, 4, 50), xi)
    np.testing.assert_array_equal(shifted, model.eval(y, tau, xi))


def test_builtin_models_pass_structure_check(models):
    for name, model in models.items():
        report = check_structure(model, 10000, seed=0)
        assert report.passed, f"{name}: {report.to_dict()}"
        assert report.zero_flux_margin == pytest.approx(model.constants.c0)


def test_overclaimed_monotonicity_constant_fails():
    model = FluxModel(family='p_laplacian', coefficients={'space': FourierSeries(mean=1.0)},
                      constants=StructureConstants(p=4.0, alpha=1.0, c0=1.0, c1=3.15, c2=10.0))
    report = check_structure(model, 10000, seed=0)
    assert not report.passed
    assert report.monotonicity_margin < 0
    assert report.continuity_margin >= 0


def test_check_structure_is_deterministic_given_seed(models):
    model = models['checkerboard_2d']
    first = check_structure(model, 500, seed=7).to_dict()
    second = check_structure(model, 500, seed=7).to_dict()
    assert first == second


def test_equal_pairs_have_zero_margins(models):
    model = models['p_laplacian_2d_p4']
    xi = np.array([[0.5, -1.5]])
    monotone, continuity = structure_margins(model, np.array([[0.2, 0.4]]), np.array([0.1]), xi, xi)
    assert monotone[0] == 0.0
    assert continuity[0] == 0.0


def test_structure_constants_validation():
    with pytest.raises(InvalidArgumentError, match="growth exponent"):
        StructureConstants(p=1.5, alpha=1.0, c0=1.0, c1=1.0, c2=1.0)
    with pytest.raises(InvalidArgumentError, match="Hoelder"):
        StructureConstants(p=2.0, alpha=0.0, c0=1.0, c1=1.0, c2=1.0)
    with pytest.raises(InvalidArgumentError, match="c2"):
        StructureConstants(p=2.0, alpha=1.0, c0=1.0, c1=1.0, c2=-1.0)
    assert StructureConstants(p=4.0, alpha=1.0, c0=1.0, c1=1.0, c2=1.0).gamma == pytest.approx(1.0 / 3.0)


def _time_lipschitz_model(constant):
    space = FourierSeries(mean=1.0)
    time = FourierSeries(mean=2.0, terms=(((1,), 1.0, 0.0),))
    return FluxModel(family='linear', coefficients={'space': space, 'time': time},
                     constants=declared_constants(space, time, 2.0),
                     time_modulus=TimeModulus(constant=constant))


def test_time_modulus_check():
    assert check_time_modulus(_time_lipschitz_model(2.0 * math.pi), 10000, seed=0).passed
    assert not check_time_modulus(_time_lipschitz_model(0.1), 10000, seed=0).passed


def test_time_gate(models, harmonic):
    time_gate(harmonic)
    time_gate(models['separable_oscillating_1d'])
    with pytest.raises(ConfigurationError, match="time_modulus"):
        time_gate(models['checkerboard_2d'])
    with pytest.raises(ConfigurationError, match="time modulus check failed"):
        time_gate(_time_lipschitz_model(0.1))


def test_checkerboard_faces_belong_to_upper_cell():
    values = np.array([[1.0, 1.0], [3.0, 3.0]])
    table = CheckerboardTable(k=2, values=values)
    c = table(np.array([[0.0], [0.49], [0.5], [0.99]]), np.zeros(4))
    np.testing.assert_array_equal(c, [1.0, 1.0, 3.0, 3.0])
    assert not table.time_dependent


def test_model_descriptor_round_trip(models):
    for model in models.values():
        again = FluxModel.from_dict(model.to_dict())
        assert again.fingerprint() == model.fingerprint()
        assert again.time_dependent == model.time_dependent


def test_model_descriptor_errors():
    base = {'family': 'linear', 'p': 2, 'alpha': 1, 'c0': 1, 'c1': 3, 'c2': 1,
            'coefficients': {'space': {'mean': 2.0}}}
    assert FluxModel.from_dict(base).dim == 1
    with pytest.raises(ConfigurationError, match="unknown keys"):
        FluxModel.from_dict({**base, 'colour': 'red'})
    with pytest.raises(ConfigurationError, match="missing keys"):
        FluxModel.from_dict({k: v for k, v in base.items() if k != 'c2'})
    with pytest.raises(ConfigurationError, match="requires p = 2"):
        FluxModel.from_dict({**base, 'p': 4})
    with pytest.raises(ConfigurationError, match="positive"):
        FluxModel.from_dict({**base, 'coefficients': {'space': {
            'mean': 0.5, 'terms': [{'freq': [1], 'sin': 1.0}]}}})
