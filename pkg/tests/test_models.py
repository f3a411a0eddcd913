import json

import numpy as np
import pytest

from qestlab import core, models
from qestlab.core import I2, SX, SY, SZ
from qestlab.errors import InvalidConfig, InvalidGrid, InvalidOperator, OutsideRegion, UnknownModel
from qestlab.io import matrix_literal


def test_qubit_z_states():
    qz = models.builtin_model("qubit-z")
    assert np.abs(qz.state(0) - I2 / 2).max() < 1e-15
    assert np.abs(qz.state(0.3) - np.diag([0.65, 0.35])).max() < 1e-15


def test_depolarizing_endpoint_is_fully_depolarizing():
    dep = models.builtin_model("depolarizing")
    rng = np.random.default_rng(0)
    for _ in range(5):
        rho = core.random_density(rng, 2)
        assert np.abs(dep.channel(1.0).apply(rho) - I2 / 2).max() < 1e-12


def test_unknown_model_and_bad_params():
    with pytest.raises(UnknownModel):
        models.builtin_model("nope")
    with pytest.raises(InvalidConfig):
        models.builtin_model("qubit-phase", {"r": 1.5})
    with pytest.raises(InvalidConfig):
        models.builtin_model("qubit-z", {"r": 1})


def test_derivative_examples():
    qz = models.builtin_model("qubit-z")
    for t in (-0.5, 0.0, 0.7):
        assert np.abs(qz.derivative(t, 0) - SZ / 2).max() < 1e-15
    be = models.builtin_model("bloch-equator")
    assert np.abs(be.derivative([0, 0], 1) - SY / 2).max() < 1e-15
    qp = models.builtin_model("qubit-phase", {"r": 1})
    assert np.abs(qp.derivative(0, 0) - SY / 2).max() < 1e-15


def test_derivative_outside_region():
    with pytest.raises(OutsideRegion):
        models.builtin_model("qubit-z").derivative(1.2, 0)
    with pytest.raises(OutsideRegion):
        models.builtin_model("bloch-equator").derivative([0.8, 0.8], 0)


@pytest.mark.parametrize("name,params", [
    ("qubit-z", {}), ("qubit-phase", {"r": 0.7}), ("bloch-equator", {}),
])
def test_analytic_matches_finite_difference(name, params):
    model = models.builtin_model(name, params)
    rng = np.random.default_rng(1)
    for _ in range(10):
        t = model.region.clip(rng.uniform(-0.6, 0.6, size=model.m))
        for i in range(model.m):
            d = model.derivative(t, i)
            assert np.abs(d - model.fd_derivative(t, i)).max() < 1e-8
            assert abs(np.trace(d)) < 1e-8


def test_product_model_derivative_matches_finite_difference():
    pm = models.product_model(models.builtin_model("qubit-z"), models.builtin_model("qubit-phase", {"r": 0.5}))
    d = pm.derivative(0.2, 0)
    assert np.abs(d - pm.fd_derivative([0.2], 0)).max() < 1e-8


def test_channel_choi_derivatives_match_finite_difference():
    for name, t in (("depolarizing", 0.4), ("phase-unitary", 0.7)):
        cm = models.builtin_model(name)
        fd = (cm.choi(t + 1e-5) - cm.choi(t - 1e-5)) / 2e-5
        assert np.abs(cm.choi_derivative(t, 0) - fd).max() < 1e-8


def test_region_clip():
    r = models.builtin_model("qubit-z").region
    assert r.clip([1.2])[0] == pytest.approx(0.999)
    be = models.builtin_model("bloch-equator").region
    assert np.linalg.norm(be.clip([0.9, 0.9])) == pytest.approx(0.999)


def test_regularize_examples():
    qp = models.builtin_model("qubit-phase", {"r": 1})
    reg = models.regularize_model(qp, 0.1, I2 / 2)
    w = np.sort(np.linalg.eigvalsh(reg.state(0)))
    assert np.abs(w - [0.05, 0.95]).max() < 1e-12
    tiny = models.regularize_model(qp, 1e-12, I2 / 2)
    for t in (-1, 0, 0.5):
        assert np.abs(tiny.state(t) - qp.state(t)).max() < 1e-11
    rz = models.regularize_model(models.builtin_model("qubit-z"), 0.1, I2 / 2)
    assert np.abs(rz.derivative(0.2, 0) - 0.45 * SZ).max() < 1e-15


def test_regularize_requires_positive_sigma():
    with pytest.raises(InvalidOperator):
        models.regularize_model(models.builtin_model("qubit-z"), 0.1, np.diag([1.0, 0.0]))
    with pytest.raises(InvalidConfig):
        models.regularize_model(models.builtin_model("qubit-z"), 0.0, I2 / 2)


def test_regularized_models_satisfy_m2():
    qp = models.builtin_model("qubit-phase", {"r": 1})
    reg = models.regularize_model(qp, 0.05, I2 / 2)
    for t in np.linspace(-3, 3, 13):
        assert all(models.check_m2(reg, t).m2_ok)


def test_check_m2_examples():
    assert models.check_m2(models.builtin_model("qubit-z"), 0.3).m2_ok == (True,)
    assert models.check_m2(models.builtin_model("qubit-phase", {"r": 1}), 0).m2_ok == (True,)
    assert models.check_m2(models.boundary_model(), 0).m2_ok == (False,)


def test_estimate_regularity_examples():
    qz = models.builtin_model("qubit-z")
    diag = models.estimate_regularity(qz, np.round(np.arange(-0.5, 0.51, 0.1), 10))
    assert diag.a1_estimate == pytest.approx(1.0, abs=1e-12)
    assert diag.m2_ok == (True,)
    dep = models.builtin_model("depolarizing")
    val = models.channel_regularity(dep, np.linspace(0.1, 0.9, 9))
    assert np.isfinite(val) and val > 0
    with pytest.raises(InvalidGrid):
        models.estimate_regularity(qz, [])


def test_grid_user_model(tmp_path):
    thetas = [-0.5, 0.0, 0.5]
    states = [matrix_literal(0.5 * (I2 + t * SZ)) for t in thetas]
    cfg = {"grid": {"thetas": thetas, "states": states}}
    model = models.model_from_config(json.loads(json.dumps(cfg)))
    assert np.abs(model.state(0.2) - 0.5 * (I2 + 0.2 * SZ)).max() < 1e-12
    assert np.abs(model.derivative(0.2, 0) - SZ / 2).max() < 1e-8
    with pytest.raises(InvalidGrid):
        models.model_from_config({"grid": {"thetas": [0.0], "states": states[:1]}})


def test_poly_user_model():
    cfg = {"poly": {"coeffs": [matrix_literal(I2 / 2), matrix_literal(SX / 2)]}}
    model = models.model_from_config(cfg)
    assert np.abs(model.state(0.4) - 0.5 * (I2 + 0.4 * SX)).max() < 1e-12
    assert np.abs(model.derivative(0.4, 0) - SX / 2).max() < 1e-8
