import numpy as np
import pytest
import sympy as sp

import aslyap as al
from aslyap.model import ModelError

from conftest import MODELS, load


def _inline(dynamics, n=1, m=1, controls="hold = 0.0", candidate="", domain=None):
    lower, upper = domain or ("-1" + ", -1" * (n - 1), "1" + ", 1" * (n - 1))
    return al.parse_model(
        f"[dimensions]\nstate = {n}\nnoise = {m}\n"
        f"[controls]\n{controls}\n"
        f"[dynamics]\n{dynamics}\n"
        + (f"[candidate]\n{candidate}\n" if candidate else "")
        + f"[domain]\nlower = {lower}\nupper = {upper}\n"
    )


def test_parse_minimal_deterministic_model():
    pm = _inline("f1 = -x1")
    assert pm.model.drift([0.5], 0) == pytest.approx([-0.5])
    assert np.asarray(pm.model.sigma([0.5], 0)) == pytest.approx(np.zeros((1, 1)))


def test_parse_rotational_drift_by_hand(rotational):
    # f = -(c^2/2 + delta) x with c=1, delta=0.5 evaluated at (1, 0)
    assert rotational.model.drift([1.0, 0.0], 0) == pytest.approx([-1.0, 0.0])
    assert rotational.model.sigma([1.0, 0.0], 0)[:, 0] == pytest.approx([0.0, 1.0])


def test_trailing_operator_is_a_positioned_error():
    with pytest.raises(ModelError) as err:
        _inline("f1 = x1 +")
    assert "line" in str(err.value)


def test_dimension_mismatches():
    with pytest.raises(ModelError, match="drift rows missing"):
        _inline("f1 = -x1", n=2)
    with pytest.raises(ModelError, match="outside"):
        _inline("f1 = -x1\nf2 = -x2\ns3_1 = 1", n=2)
    with pytest.raises(ModelError, match="outside"):
        _inline("f1 = -x1\ns1_2 = 1", n=1, m=1)


def test_unknown_identifier_rejected():
    with pytest.raises(ModelError, match="x9"):
        _inline("f1 = -x9")


def test_eval_a_zero_diffusion():
    pm = _inline("f1 = -x1")
    assert np.allclose(al.eval_a(pm.model, [0.7], 0), 0.0)


def test_eval_a_rotational_sympy_oracle(rotational):
    # independent symbolic computation of sigma sigma^T / 2
    x1, x2 = sp.symbols("x1 x2")
    sigma = sp.Matrix([[-x2], [x1]])
    a_sym = sigma * sigma.T / 2
    pt = {"x1": 0.3, "x2": -0.8}
    expected = np.array(a_sym.subs(pt), dtype=float)
    got = al.eval_a(rotational.model, [0.3, -0.8], 0)
    assert got == pytest.approx(expected)
    assert np.trace(got) == pytest.approx((0.3**2 + 0.8**2) / 2)
    assert got == pytest.approx(got.T)


def test_eval_a_identity_diffusion():
    pm = _inline("f1 = -x1\nf2 = -x2\ns1_1 = 1\ns2_2 = 1", n=2, m=2)
    assert al.eval_a(pm.model, [0.1, 0.2], 0) == pytest.approx(np.eye(2) / 2)


def test_eval_a_is_psd_on_samples(rotational, circle_target):
    rng = np.random.Generator(np.random.Philox(key=3))
    for pm in (rotational, circle_target):
        xs = rng.uniform(-1, 1, size=(50, 2))
        xs = xs[np.linalg.norm(xs, axis=1) > 1e-3]
        a = al.eval_a(pm.model, xs, 0)
        eigs = np.linalg.eigvalsh(a)
        assert eigs.min() >= -1e-12


def test_controlled_equilibrium_examples(rotational):
    pm = _inline("f1 = -x1")
    assert al.check_controlled_equilibrium(pm.model, [0.0], tol=1e-9).found
    shifted = _inline("f1 = x1 + 1")
    res = al.check_controlled_equilibrium(shifted.model, [0.0], tol=1e-9)
    assert not res.found
    assert res.residual == pytest.approx(1.0)
    assert al.check_controlled_equilibrium(rotational.model, [0.0, 0.0], tol=1e-12).found


def test_lipschitz_samples():
    one = _inline("f1 = -x1")
    two = _inline("f1 = -2*x1")
    c1 = al.check_lipschitz_sample(one.model, 2000, seed=5)
    c2 = al.check_lipschitz_sample(two.model, 2000, seed=5)
    assert c1 == pytest.approx(1.0, rel=1e-9)
    assert c2 == pytest.approx(2.0, rel=1e-9)


def test_lipschitz_rotational_finite(rotational):
    c = al.check_lipschitz_sample(rotational.model, 500, seed=5)
    assert np.isfinite(c) and 0 < c < 10
    assert rotational.model.lipschitz_estimate == c


def test_round_trip_all_bundled_models():
    for path in sorted(MODELS.glob("*.model")):
        pm = load(path.name)
        text = al.serialize_model(pm)
        pm2 = al.parse_model(text)
        assert pm2 == pm, path.name
        assert al.serialize_model(pm2) == text, path.name


def test_evaluators_are_deterministic(rotational):
    x = np.array([[0.3, 0.4], [-0.1, 0.9]])
    a = rotational.model.drift(x, 0)
    b = rotational.model.drift(x.copy(), 0)
    assert np.array_equal(a, b)


def test_per_control_override():
    pm = _inline(
        "f1 = a1*x1\nf1@special = 7*x1",
        controls="normal = 2.0\nspecial = 3.0",
    )
    assert pm.model.drift([1.0], 0) == pytest.approx([2.0])
    assert pm.model.drift([1.0], 1) == pytest.approx([7.0])
    # overrides survive the round trip
    again = al.parse_model(al.serialize_model(pm))
    assert again.model.drift([1.0], 1) == pytest.approx([7.0])


def test_candidate_analytic_vs_central_difference(rotational):
    cand = rotational.candidate
    fd = al.CandidateFunction(cand.expression, 2, "central-difference", cand.fd_step)
    rng = np.random.Generator(np.random.Philox(key=9))
    xs = rng.uniform(-1, 1, size=(200, 2))
    xs = xs[np.linalg.norm(xs, axis=1) > 0.2][:100]
    ga, gf = cand.gradient(xs), fd.gradient(xs)
    ha, hf = cand.hessian(xs), fd.hessian(xs)
    step = cand.fd_step
    assert np.abs(ga - gf).max() <= 10 * step**2
    assert np.abs(ha - hf).max() <= 1e-4


def test_candidate_requires_positive_fd_step():
    with pytest.raises(ValueError):
        al.CandidateFunction("x1^2", 1, "central-difference", fd_step=0.0)
    with pytest.raises(ValueError):
        al.CandidateFunction("x1^2", 1, "nonsense")


def test_gauge_from_model_is_radial(rotational):
    assert rotational.gauge(0.5) == pytest.approx(0.25)
    assert rotational.gauge.of_points(np.array([[0.3, 0.4]])) == pytest.approx([0.25])


def test_missing_sections_rejected():
    with pytest.raises(ModelError, match=r"\[controls\]"):
        al.parse_model("[dimensions]\nstate = 1\nnoise = 1\n[dynamics]\nf1 = -x1\n"
                       "[domain]\nlower = -1\nupper = 1\n")
