from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sgsplat import color_model as cm
from sgsplat.color_model import (
    DiffuseOrthoSG,
    DiffuseSG,
    MixedSHSG,
    OrthoSGSet,
    SGLobe,
    SHCoeffs,
    SHOnly,
    eval_color,
    eval_sg,
    eval_sh_basis,
    grad_color,
    param_count,
)
from sgsplat.errors import ContractError, OrthogonalityError, UnsupportedDegreeError

from conftest import random_unit, unit

# Degree-2 real SH at (1, 0, 0) from the closed-form polynomials
#   Y00 = 1/(2 sqrt(pi)), band 1 = C1 * (-y, z, -x),
#   Y2,0 = (1/4) sqrt(5/pi) (3z^2 - 1), Y2,2 = (1/4) sqrt(15/pi) (x^2 - y^2),
# the remaining band-2 terms vanish on the x axis.
SH_DEG2_AT_X = [
    0.28209479177387814,
    0.0,
    0.0,
    -0.4886025119029199,
    0.0,
    0.0,
    -0.31539156525252005,
    0.0,
    0.5462742152960396,
]

directions = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3).map(unit)


def test_sh_degree0_constant():
    assert eval_sh_basis([0, 0, 1], 0) == pytest.approx([0.2820947918], abs=1e-10)
    assert cm.SH_C0 == pytest.approx(1.0 / (2.0 * np.sqrt(np.pi)), abs=1e-15)


def test_sh_degree1_at_z():
    assert eval_sh_basis([0, 0, 1], 1) == pytest.approx([0.2820947918, 0.0, 0.4886025, 0.0], abs=1e-7)


def test_sh_degree2_at_x_matches_closed_form():
    assert eval_sh_basis([1, 0, 0], 2) == pytest.approx(SH_DEG2_AT_X, abs=1e-12)
    assert 0.25 * np.sqrt(5 / np.pi) == pytest.approx(-SH_DEG2_AT_X[6], abs=1e-15)
    assert 0.25 * np.sqrt(15 / np.pi) == pytest.approx(SH_DEG2_AT_X[8], abs=1e-15)


def test_sh_basis_orthonormal_on_sphere():
    from sgsplat.convert import fibonacci_sphere

    d = fibonacci_sphere(20000)
    y = cm.sh_basis(d, 3)
    gram = 4 * np.pi * (y.T @ y) / len(d)
    assert np.abs(gram - np.eye(16)).max() < 2e-3


def test_sh_basis_contract_errors():
    with pytest.raises(ContractError):
        eval_sh_basis([0, 0, 2], 1)
    with pytest.raises(UnsupportedDegreeError):
        eval_sh_basis([0, 0, 1], 4)
    with pytest.raises(ContractError):
        SHCoeffs(2, np.zeros((4, 3)))


def test_eval_sg_examples():
    d = unit([0.3, -0.2, 0.9])
    lobe = SGLobe(np.ones(3), 0.0, unit([1, 2, 3]))
    assert eval_sg(lobe, d) == pytest.approx([1, 1, 1], abs=1e-15)
    mu = unit([1, 1, 0])
    assert eval_sg(SGLobe([0.5, 0.2, 0.1], 7.3, mu), mu) == pytest.approx([0.5, 0.2, 0.1], abs=1e-15)
    lobe = SGLobe(np.ones(3), np.log(2.0), np.array([0.0, 0.0, 1.0]))
    assert eval_sg(lobe, [0, 0, -1]) == pytest.approx([0.25] * 3, abs=1e-15)


def test_sg_lobe_invariants():
    with pytest.raises(ContractError):
        SGLobe(np.ones(3), -0.1, [0, 0, 1])
    with pytest.raises(ContractError):
        SGLobe(np.ones(3), 1.0, [0, 0, 1.01])


def test_diffuse_sg_with_zero_amplitude_is_constant(rng):
    model = DiffuseSG([0.3, 0.3, 0.3], SGLobe(np.zeros(3), 4.0, [0, 1, 0]))
    for d in random_unit(rng, 10):
        assert eval_color(model, d) == pytest.approx([0.3] * 3, abs=1e-15)


def test_mixed_zero_lobes_equals_sh_degree0(rng):
    sh = SHCoeffs(0, rng.normal(size=(1, 3)))
    mixed = MixedSHSG(sh, OrthoSGSet.zeros())
    for d in random_unit(rng, 10):
        np.testing.assert_allclose(eval_color(mixed, d), eval_color(SHOnly(sh), d), atol=1e-12, rtol=0)


def test_ortho_example():
    alpha = np.zeros((3, 3))
    alpha[0] = [1, 0, 0]
    model = DiffuseOrthoSG(np.zeros(3), OrthoSGSet(alpha, [1.0, 1.0, 1.0], np.eye(3)))
    assert eval_color(model, [1, 0, 0]) == pytest.approx([1, 0, 0], abs=1e-15)
    assert eval_color(model, [0, 1, 0]) == pytest.approx([np.exp(-1), 0, 0], abs=1e-15)


def test_diffuse_has_no_offset():
    model = DiffuseOrthoSG([0.1, 0.2, 0.3], OrthoSGSet.zeros())
    assert eval_color(model, [0, 0, 1]) == pytest.approx([0.1, 0.2, 0.3], abs=1e-15)


def test_sh_offset_and_clamp():
    coeffs = np.zeros((1, 3))
    coeffs[0] = [0.0, -5.0, 1.0]
    out = eval_color(SHOnly(SHCoeffs(0, coeffs)), [0, 0, 1])
    assert out == pytest.approx([0.5, 0.0, 0.5 + cm.SH_C0], abs=1e-15)


def test_override_rules(rng):
    mixed = MixedSHSG(SHCoeffs(2, rng.normal(size=(9, 3))), OrthoSGSet.zeros())
    d = random_unit(rng)
    truncated = MixedSHSG(SHCoeffs(1, mixed.sh.coeffs[:4]), OrthoSGSet.zeros())
    np.testing.assert_allclose(eval_color(mixed, d, sh_degree_override=1), eval_color(truncated, d), atol=1e-15)
    with pytest.raises(ContractError):
        eval_color(SHOnly(SHCoeffs(3, np.zeros((16, 3)))), d, sh_degree_override=1)
    with pytest.raises(ContractError):
        eval_color(mixed, d, sh_degree_override=3)
    with pytest.raises(ContractError):
        MixedSHSG(SHCoeffs(3, np.zeros((16, 3))), OrthoSGSet.zeros())


def test_param_counts():
    assert param_count(SHOnly(SHCoeffs.zeros(3))) == 48
    assert param_count(SHOnly(SHCoeffs.zeros(0))) == 3
    assert param_count(DiffuseSG(np.zeros(3), SGLobe(np.zeros(3), 1.0, [0, 0, 1]))) == 10
    ortho = DiffuseOrthoSG(np.zeros(3), OrthoSGSet.zeros())
    assert param_count(ortho) == 15
    assert cm.shared_param_count(ortho) == 3
    assert param_count(MixedSHSG(SHCoeffs.zeros(2), OrthoSGSet.zeros())) == 39
    assert param_count(SHOnly(SHCoeffs.zeros(3))) - param_count(ortho) == 33


def test_orthogonality_check():
    cm.check_orthonormal(Rotation.from_euler("xyz", [0.3, 1.0, -2.0]).as_matrix())
    bad = np.eye(3)
    bad[0, 1] = 2e-6
    with pytest.raises(OrthogonalityError):
        OrthoSGSet(np.zeros((3, 3)), np.ones(3), bad)
    ok = np.eye(3)
    ok[0, 1] = 2e-7
    OrthoSGSet(np.zeros((3, 3)), np.ones(3), ok)


def test_flops_ordering():
    assert cm.color_flops("sg3") < cm.color_flops("sh", 3)
    assert cm.color_flops("sg1") < cm.color_flops("sg3") < cm.color_flops("mixed") < cm.color_flops("sh", 3)


@settings(max_examples=60, deadline=None)
@given(d=directions, alpha=st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_zero_sharpness_lobe_is_constant(d, alpha):
    lobe = SGLobe(alpha, 0.0, unit([0.2, -0.7, 0.4]))
    np.testing.assert_allclose(eval_sg(lobe, d), alpha, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(d=directions, seed=st.integers(0, 2**31))
def test_mixed_zero_amplitude_equals_sh(d, seed):
    rng = np.random.default_rng(seed)
    sh = SHCoeffs(2, rng.normal(size=(9, 3)))
    axes = Rotation.random(random_state=seed).as_matrix()
    mixed = MixedSHSG(sh, OrthoSGSet(np.zeros((3, 3)), rng.uniform(0, 10, 3), axes))
    for deg in (0, 1, 2):
        np.testing.assert_allclose(
            eval_color(mixed, d, deg), eval_color(SHOnly(SHCoeffs(deg, sh.coeffs[: (deg + 1) ** 2])), d),
            atol=1e-12, rtol=0,
        )


@settings(max_examples=60, deadline=None)
@given(d=directions, seed=st.integers(0, 2**31))
def test_rotational_coherence(d, seed):
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=seed).as_matrix()
    mu = random_unit(rng)
    lobe = SGLobe(rng.normal(size=3), rng.uniform(0, 20), mu)
    single = DiffuseSG(rng.uniform(0, 1, 3), lobe)
    single_r = DiffuseSG(single.diffuse, SGLobe(lobe.alpha, lobe.lam, rot @ mu))
    np.testing.assert_allclose(eval_color(single, d), eval_color(single_r, rot @ d), atol=1e-9)
    axes = Rotation.random(random_state=seed + 1).as_matrix()
    sgs = OrthoSGSet(rng.normal(size=(3, 3)), rng.uniform(0, 20, 3), axes)
    ortho = DiffuseOrthoSG(rng.uniform(0, 1, 3), sgs)
    ortho_r = DiffuseOrthoSG(ortho.diffuse, OrthoSGSet(sgs.alpha, sgs.lam, axes @ rot.T))
    np.testing.assert_allclose(eval_color(ortho, d), eval_color(ortho_r, rot @ d), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(0, 30))
def test_sharpness_is_monotone(seed, lam):
    rng = np.random.default_rng(seed)
    mu = random_unit(rng)
    d = random_unit(rng)
    if d @ mu > 1 - 1e-6:
        return
    lobe_a = SGLobe([1.0, 0.5, 2.0], lam, mu)
    lobe_b = SGLobe([1.0, 0.5, 2.0], lam + 0.5, mu)
    assert np.all(eval_sg(lobe_b, d) < eval_sg(lobe_a, d))


def test_grad_simple_identities(rng):
    d = random_unit(rng)
    up = rng.normal(size=3)
    model = DiffuseOrthoSG(rng.uniform(0.5, 1, 3), OrthoSGSet(rng.uniform(0, 0.1, (3, 3)), rng.uniform(0, 3, 3)))
    g = grad_color(model, d, up)
    np.testing.assert_allclose(g["diffuse"], up, atol=1e-15)
    w = np.exp(model.sgs.lam * (model.sgs.axes @ d - 1))
    np.testing.assert_allclose(g["alpha"], w[:, None] * up[None, :], atol=1e-15)


def _random_model(kind, rng):
    if kind == "sh":
        return SHOnly(SHCoeffs(3, rng.normal(size=(16, 3)) * 0.2))
    if kind == "sg1":
        return DiffuseSG(rng.uniform(0.5, 1, 3), SGLobe(rng.normal(size=3) * 0.3, rng.uniform(0.1, 10), random_unit(rng)))
    axes = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
    sgs = OrthoSGSet(rng.normal(size=(3, 3)) * 0.3, rng.uniform(0.1, 10, 3), axes)
    if kind == "sg3":
        return DiffuseOrthoSG(rng.uniform(0.8, 1.5, 3), sgs)
    sh = rng.normal(size=(9, 3)) * 0.2
    sh[0] = 2.0
    return MixedSHSG(SHCoeffs(2, sh), sgs)


@pytest.mark.parametrize("kind", ["sh", "sg1", "sg3", "mixed"])
def test_grad_color_matches_finite_differences(kind):
    rng = np.random.default_rng({"sh": 1, "sg1": 2, "sg3": 3, "mixed": 4}[kind])
    h = 1e-4
    worst = 0.0
    for _ in range(100):
        model = _random_model(kind, rng)
        d = random_unit(rng)
        up = rng.normal(size=3)
        raw = cm.eval_color(model, d)
        if np.any(np.abs(raw) < 1e-3):
            continue  # next to the clamp
        g = grad_color(model, d, up)
        params = cm.model_params(model)
        for name, value in params.items():
            if name == "mu":
                # the analytic gradient is tangent; compare along tangent directions
                t1 = np.cross(value, [1.0, 0.0, 0.0])
                t1 /= np.linalg.norm(t1)
                for t in (t1, np.cross(value, t1)):
                    f = [up @ eval_color(cm.with_params(model, {**params, "mu": unit(value + s * h * t)}), d) for s in (1, -1)]
                    fd = (f[0] - f[1]) / (2 * h)
                    worst = max(worst, abs(fd - g["mu"] @ t) / max(abs(fd), 1e-3))
                continue
            flat = np.array(value, dtype=np.float64).ravel()
            for i in range(flat.size):
                vals = []
                for s in (1, -1):
                    p = flat.copy()
                    p[i] += s * h
                    vals.append(up @ eval_color(cm.with_params(model, {**params, name: p.reshape(np.shape(value))}), d))
                fd = (vals[0] - vals[1]) / (2 * h)
                an = np.ravel(g[name])[i]
                worst = max(worst, abs(fd - an) / max(abs(fd), 1e-3))
    assert worst < 1e-4
