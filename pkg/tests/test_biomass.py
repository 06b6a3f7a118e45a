import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropmap import fieldsim as fs
from cropmap.biomass import (
    REFERENCE_LINEAR,
    REFERENCE_QUADRATIC,
    PolyModel,
    Sample,
    dumps_model,
    fit_poly,
    loads_model,
    predict,
    r_squared,
    scaled_to_raw,
)
from cropmap.errors import DomainError, SchemaError

# 95% bands of 20000 numpy.polyfit regenerations (scripts/biomass_oracle.py, seed 12345)
ORACLE_SLOPE_BAND = (6.794, 10.931)
ORACLE_INTERCEPT_BAND = (-13438.5, 6991.4)
SIGMA = fs.calibrate_biomass_noise(0.55)


def _samples(x, y):
    return [Sample(float(a), float(b), f"s{k}") for k, (a, b) in enumerate(zip(x, y))]


def _synthetic(rng, n=60):
    x = rng.uniform(3500.0, 6200.0, n)
    return _samples(x, fs.synthetic_biomass(x, rng, SIGMA))


def test_reference_predictions():
    assert predict(REFERENCE_LINEAR, 5000.0) == pytest.approx(41046.896722, rel=1e-9)
    assert predict(REFERENCE_QUADRATIC, 5000.0) == pytest.approx(41896.24, rel=1e-9)
    assert predict(REFERENCE_LINEAR, 0.0) == REFERENCE_LINEAR.coefficients[0]
    assert predict(REFERENCE_QUADRATIC, 0.0) == REFERENCE_QUADRATIC.coefficients[0]


def test_predict_vectorised_and_unclamped():
    out = predict(REFERENCE_LINEAR, np.array([0.0, 100.0, 5000.0]))
    assert out.shape == (3,) and out[0] < 0


def test_quadratic_increasing_on_window():
    x = np.linspace(3500, 6200, 2701)
    assert np.all(np.diff(predict(REFERENCE_QUADRATIC, x)) > 0)
    # vertex of the parabola
    assert -28.47 / (2 * -0.00203) == pytest.approx(7012.3, abs=0.05)


def test_model_validation():
    with pytest.raises(DomainError):
        PolyModel(3, (1, 2, 3, 4))
    with pytest.raises(DomainError):
        PolyModel(1, (1, 2, 3))
    with pytest.raises(DomainError):
        PolyModel(1, (1, math.inf))
    with pytest.raises(DomainError):
        Sample(-1.0, 5.0)
    with pytest.raises(DomainError):
        Sample(1.0, math.nan)


def test_exact_linear_fit():
    x = np.linspace(3000, 7000, 9)
    rep = fit_poly(_samples(x, 2 * x + 100), 1)
    c0, c1 = rep.model.coefficients
    assert c0 == pytest.approx(100.0, rel=1e-9) and c1 == pytest.approx(2.0, rel=1e-9)
    assert rep.r_squared == pytest.approx(1.0, abs=1e-12)


def test_exact_quadratic_fit():
    x = np.linspace(3500, 6200, 12)
    rep = fit_poly(_samples(x, predict(REFERENCE_QUADRATIC, x)), 2)
    np.testing.assert_allclose(rep.model.coefficients, REFERENCE_QUADRATIC.coefficients, rtol=1e-7)


def test_fit_errors():
    with pytest.raises(DomainError):
        fit_poly(_samples([5000.0] * 5, [1, 2, 3, 4, 5]), 1)
    with pytest.raises(DomainError):
        fit_poly(_samples([1.0, 2.0], [1, 2]), 2)
    with pytest.raises(DomainError):
        fit_poly(_samples([1.0, 2.0, 3.0], [1, 2, 4]), 3)
    with pytest.raises(DomainError):
        fit_poly(_samples([1.0, 1.0, 2.0], [1, 2, 4]), 2)


def test_r_squared_definitions():
    x = np.linspace(3500, 6200, 20)
    y = predict(REFERENCE_LINEAR, x)
    s = _samples(x, y)
    assert r_squared(REFERENCE_LINEAR, s) == pytest.approx(1.0)
    assert r_squared(PolyModel(1, (float(np.mean(y)), 0.0)), s) == pytest.approx(0.0, abs=1e-12)
    assert r_squared(PolyModel(1, (0.0, 0.0)), s) < 0
    with pytest.raises(DomainError):
        r_squared(REFERENCE_LINEAR, _samples(x, np.full(20, 5.0)))


def test_fixed_seed_recovery():
    # a single 60-sample draw lands within 15% of the slope only ~79% of the
    # time (oracle), so this example is pinned to one seed
    rep = fit_poly(_synthetic(np.random.default_rng(2024)), 1)
    c0, c1 = rep.model.coefficients
    assert abs(c1 / 8.850490 - 1) < 0.15
    assert ORACLE_INTERCEPT_BAND[0] <= c0 <= ORACLE_INTERCEPT_BAND[1]
    assert ORACLE_SLOPE_BAND[0] <= c1 <= ORACLE_SLOPE_BAND[1]


def test_recovery_matches_polyfit_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        s = _synthetic(rng)
        x = np.array([v.e_v for v in s])
        y = np.array([v.b for v in s])
        for order in (1, 2):
            ref = np.polyfit(x, y, order)[::-1]
            got = np.array(fit_poly(s, order).model.coefficients)
            pred_ref = np.polyval(ref[::-1], x)
            np.testing.assert_allclose(predict(PolyModel(order, tuple(got)), x), pred_ref, rtol=1e-9)


def test_monte_carlo_band_coverage():
    # the oracle's 95% band should hold the fitted slope in about 95% of runs
    rng = np.random.default_rng(99)
    slopes = np.array([fit_poly(_synthetic(rng), 1).model.coefficients[1] for _ in range(400)])
    inside = np.mean((slopes >= ORACLE_SLOPE_BAND[0]) & (slopes <= ORACLE_SLOPE_BAND[1]))
    assert 0.92 <= inside <= 0.98
    assert abs(slopes.mean() / 8.850490 - 1) < 0.03


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_fit_is_local_minimum(seed, order):
    rng = np.random.default_rng(seed)
    s = _synthetic(rng, 30)
    rep = fit_poly(s, order)
    x = np.array([v.e_v for v in s])
    y = np.array([v.b for v in s])
    u = (x - rep.center) / rep.scale
    a = np.vander(u, order + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    base = np.sum((y - a @ coef) ** 2)
    for j in range(order + 1):
        for sgn in (-1, 1):
            c = coef.copy()
            c[j] *= 1 + sgn * 1e-6
            assert np.sum((y - a @ c) ** 2) >= base * (1 - 1e-12)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_order_two_nests_order_one(seed):
    s = _synthetic(np.random.default_rng(seed))
    assert fit_poly(s, 2).ss_res <= fit_poly(s, 1).ss_res * (1 + 1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    s = _synthetic(rng, 25)
    t = [s[i] for i in rng.permutation(len(s))]
    x = np.linspace(3500, 6200, 11)
    for order in (1, 2):
        np.testing.assert_allclose(predict(fit_poly(s, order).model, x), predict(fit_poly(t, order).model, x),
                                   rtol=1e-9)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_raw_matches_scaled_predictions(seed):
    s = _synthetic(np.random.default_rng(seed), 40)
    rep = fit_poly(s, 2)
    xs = np.array([v.e_v for v in s])
    ys = np.array([v.b for v in s])
    coef, *_ = np.linalg.lstsq(np.vander((xs - rep.center) / rep.scale, 3, increasing=True), ys, rcond=None)
    x = np.linspace(3500, 6200, 50)
    scaled = np.vander((x - rep.center) / rep.scale, 3, increasing=True) @ coef
    np.testing.assert_allclose(predict(rep.model, x), scaled, rtol=1e-9)


def test_scaled_to_raw_identity():
    np.testing.assert_allclose(scaled_to_raw([1.0, 2.0, 3.0], 0.0, 1.0), [1.0, 2.0, 3.0])
    # 3 * ((x - 1) / 2)^2 = 0.75 x^2 - 1.5 x + 0.75
    np.testing.assert_allclose(scaled_to_raw([0.0, 0.0, 3.0], 1.0, 2.0), [0.75, -1.5, 0.75])


def test_low_biomass_diagnostic():
    x = np.linspace(3500, 6200, 10)
    y = np.r_[np.full(4, 20000.0), np.full(6, 45000.0)]
    assert fit_poly(_samples(x, y), 1).n_low_biomass == 4


def test_model_file_round_trip(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1495447200")
    text = dumps_model(REFERENCE_QUADRATIC, 0.574, 60)
    d = json.loads(text)
    assert d["created"] == "2017-05-22T10:00:00Z" and d["order"] == 2
    assert loads_model(text) == REFERENCE_QUADRATIC
    assert dumps_model(REFERENCE_QUADRATIC, 0.574, 60) == text


@pytest.mark.parametrize("text", ["not json", "[1, 2]", '{"order": 1}', '{"order": 1, "coefficients": [1]}',
                                  '{"order": "x", "coefficients": [1, 2]}'])
def test_model_file_errors(text):
    with pytest.raises((SchemaError, DomainError)):
        loads_model(text)
