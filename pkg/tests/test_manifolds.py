from __future__ import annotations

import math

import numpy as np
import pytest

from manifold_lab.manifolds import (
    ManifoldError,
    ManifoldSpec,
    Mixture,
    arc,
    chart,
    circle,
    classify_perturbation,
    distance,
    flat_patch,
    measure,
    overlap_measure,
    sample_manifold,
    sample_transversal_offset,
    segment,
    spec_from_kv,
    spec_to_kv,
    torus_curve,
    translate,
)
from manifold_lab.transport import wasserstein

BUILTINS = {
    "segment": segment((0.0, 0.0), (1.0, 0.0)),
    "arc": arc((0.0, 0.0), 2.0, 0.0, math.pi / 2),
    "circle": circle((0.0, 0.0), 1.0),
    "flat_patch": flat_patch((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 1.0), (0.0, 0.5)),
    "torus_knotless_curve": torus_curve(),
}


# --- specs -------------------------------------------------------------------


def test_invalid_specs_rejected():
    with pytest.raises(ManifoldError):
        circle((0.0, 0.0), -1.0)
    with pytest.raises(ManifoldError):
        arc((0.0, 0.0), 1.0, 0.0, 7.0)
    with pytest.raises(ManifoldError):
        segment((0.0, 0.0), (0.0, 0.0))
    with pytest.raises(ManifoldError):
        flat_patch((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    with pytest.raises(ManifoldError):
        torus_curve(major=0.2, minor=0.3)
    with pytest.raises(ManifoldError):
        ManifoldSpec("sphere", (), 2, 3, ((0, 1), (0, 1)))
    with pytest.raises(ManifoldError):
        ManifoldSpec("segment", (), 3, 2, ((0, 1),) * 3)


def test_specs_are_hashable_values():
    a, b = circle((0.0, 0.0), 1.0), circle((0.0, 0.0), 1.0)
    assert a == b and hash(a) == hash(b)


@pytest.mark.parametrize("name", list(BUILTINS))
def test_kv_roundtrip(name):
    m = BUILTINS[name]
    assert spec_from_kv(spec_to_kv(m)) == m


def test_kv_errors():
    kv = spec_to_kv(BUILTINS["circle"])
    broken = dict(kv)
    del broken["radius"]
    with pytest.raises(ManifoldError, match="radius"):
        spec_from_kv(broken)
    with pytest.raises(ManifoldError, match="missing"):
        spec_from_kv({"chart_id": "circle"})
    with pytest.raises(ManifoldError):
        spec_from_kv({**kv, "radius": "abc"})


# --- measure and sampling ----------------------------------------------------


def test_measures():
    assert measure(BUILTINS["segment"]) == pytest.approx(1.0)
    assert measure(BUILTINS["arc"]) == pytest.approx(math.pi)
    assert measure(BUILTINS["circle"]) == pytest.approx(2 * math.pi)
    assert measure(BUILTINS["flat_patch"]) == pytest.approx(0.5)


def test_unit_circle_samples_on_chart():
    P = sample_manifold(circle((0.0, 0.0), 1.0), 4, seed=1)
    assert P.size == 4 and np.all(P.weights == 0.25)
    assert np.max(np.abs(np.linalg.norm(P.points, axis=1) - 1.0)) <= 1e-12


def test_segment_samples_have_zero_y():
    P = sample_manifold(segment((0.0, 0.0), (1.0, 0.0)), 50, seed=0)
    assert np.all(P.points[:, 1] == 0.0)
    assert np.all((P.points[:, 0] >= 0) & (P.points[:, 0] <= 1))


@pytest.mark.parametrize("name", list(BUILTINS))
def test_samples_lie_on_every_chart(name):
    m = BUILTINS[name]
    P = sample_manifold(m, 200, seed=3)
    slack = 1e-12 if name != "torus_knotless_curve" else 1e-4
    assert np.max(distance(m, P.points)) <= slack


def test_mixture_mode_masses_binomial():
    m = circle((0.0, 0.0), 1.0)
    mix = Mixture(((0.0,), (math.pi,)), (0.3, 0.7), 0.2)
    P = sample_manifold(m, 10_000, mix, seed=0)
    near_zero = np.mean(P.points[:, 0] > 0)
    sd = math.sqrt(0.3 * 0.7 / 10_000)
    assert abs(near_zero - 0.3) <= 3 * sd


def test_sampling_rejects_bad_input():
    with pytest.raises(ManifoldError):
        sample_manifold(BUILTINS["circle"], 0)
    with pytest.raises(ManifoldError):
        sample_manifold(BUILTINS["circle"], 5, density="gaussian")
    with pytest.raises(ManifoldError):
        Mixture(((0.0,),), (0.5,), 0.1)


def test_torus_samples_uniform_in_length():
    m = torus_curve()
    P, u = sample_manifold(m, 20_000, seed=0, return_params=True)
    # half the arc length lies before the parameter that splits it evenly
    t = np.linspace(0, 2 * math.pi, 200_001)
    pts = chart(m, t[:, None])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    split = t[np.searchsorted(cum, cum[-1] / 2)]
    frac = np.mean(u[:, 0] < split)
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / 20_000)


# --- overlap -----------------------------------------------------------------


def test_circle_self_overlap():
    m = circle((0.0, 0.0), 1.0)
    r = overlap_measure(m, m, 1e-3)
    assert r.overlap_estimate == pytest.approx(2 * math.pi, rel=0.02)
    assert r.tau == 1e-2 and r.shared_cells == r.total_cells


@pytest.mark.parametrize("name", list(BUILTINS))
def test_every_builtin_self_overlap_within_two_percent(name):
    m = BUILTINS[name]
    assert overlap_measure(m, m, 1e-3).overlap_estimate == pytest.approx(measure(m), rel=0.02)


def test_arcs_sharing_quarter_circle():
    a = arc((0.0, 0.0), 1.0, 0.0, math.pi)
    b = arc((0.0, 0.0), 1.0, math.pi / 2, 3 * math.pi / 2)
    assert overlap_measure(a, b, 1e-3).overlap_estimate == pytest.approx(math.pi / 2, rel=0.02)


def test_offset_circles_collapse_linearly_in_tau():
    # two crossings at angle theta; each keeps a length ~ 2 tau / sin(theta)
    a = circle((0.0, 0.0), 1.0)
    b = circle((0.5, 0.0), 1.0)
    theta = math.acos(0.875)
    const = 4 / math.sin(theta)
    values = []
    for res in (1e-3, 1e-4, 1e-5):
        r = overlap_measure(a, b, res)
        values.append(r.overlap_estimate)
        assert r.overlap_estimate / r.tau == pytest.approx(const, rel=0.05)
    assert values[0] > values[1] > values[2]
    assert values[-1] < 1e-3
    # the crossing band is narrower than a cell once tau = resolution / 10
    assert overlap_measure(a, b, 1e-4, 1e-5).overlap_estimate <= 4e-5


def test_overlap_bounded_by_smaller_measure():
    a = segment((0.0, 0.0), (1.0, 0.0))
    b = segment((0.25, 0.0), (0.5, 0.0))
    for x, y in ((a, b), (b, a)):
        r = overlap_measure(x, y, 1e-3)
        assert r.overlap_estimate <= min(measure(a), measure(b)) + 2 * r.tau + 1e-3


def test_overlap_rejects_undersampled_tau():
    m = BUILTINS["circle"]
    with pytest.raises(ManifoldError):
        overlap_measure(m, m, 1e-3, 5e-5)
    overlap_measure(m, m, 1e-3, 1e-4)
    with pytest.raises(ManifoldError):
        overlap_measure(m, BUILTINS["flat_patch"], 1e-2)


# --- translation -------------------------------------------------------------


def test_translate_examples():
    m = circle((0.0, 0.0), 1.0)
    assert translate(m, [0.0, 0.0]) == m
    moved = translate(m, [0.3, 0.0])
    assert moved.param("center").tolist() == [0.3, 0.0]
    s = segment((0.0, 0.0), (1.0, 1.0))
    assert translate(s, [1.0, 2.0]).param("end").tolist() == [2.0, 3.0]
    with pytest.raises(ManifoldError):
        translate(m, [1.0])


@pytest.mark.parametrize("name", list(BUILTINS))
def test_translated_samples_shift_exactly(name):
    m = BUILTINS[name]
    t = np.arange(1, m.n + 1) * 0.1
    a = sample_manifold(m, 16, seed=5)
    b = sample_manifold(translate(m, t), 16, seed=5)
    assert np.allclose(b.points, a.points + t, rtol=0, atol=1e-12)


def test_w2_of_translated_samples_is_shift_norm():
    m = circle((0.0, 0.0), 1.0)
    t = np.array([0.3, -0.4])
    a = sample_manifold(m, 40, seed=2)
    b = sample_manifold(translate(m, t), 40, seed=2)
    assert wasserstein(a, b) == pytest.approx(0.5, abs=1e-9)


def test_transversal_offsets_in_ball():
    a = circle((0.0, 0.0, 0.0), 1.0)
    for seed in range(50):
        assert np.linalg.norm(sample_transversal_offset(0.01, a, a, seed)) <= 0.01
    with pytest.raises(ManifoldError):
        sample_transversal_offset(0.0, a, a)


@pytest.mark.slow
def test_coincident_circles_collapse_for_100_seeds():
    a = circle((0.0, 0.0, 0.0), 1.0)
    for seed in range(100):
        t = sample_transversal_offset(0.01, a, a, seed)
        r = overlap_measure(a, translate(a, t), 1e-4, 1e-5)
        assert r.overlap_estimate <= 4 * r.tau


def test_planar_translation_keeps_overlap_above_four_tau():
    # in the plane a translated copy of a circle still crosses it at two
    # points, at an angle of order |t|, so the kept length is ~ 4 tau / |t|
    a = circle((0.0, 0.0), 1.0)
    r = overlap_measure(a, translate(a, [0.01, 0.0]), 1e-4, 1e-5)
    assert r.overlap_estimate > 4 * r.tau
    assert r.overlap_estimate == pytest.approx(4 * r.tau / 0.01, rel=0.1)


# --- perturbation classification --------------------------------------------


def test_classify_examples():
    s = segment((0.0, 0.0), (1.0, 0.0))
    x = [0.5, 0.0]
    assert classify_perturbation(s, x, [0.0, 0.0], 1e-3) == "on_manifold"
    assert classify_perturbation(s, x, [0.2, 0.0], 1e-3) == "on_manifold"
    assert classify_perturbation(s, x, [0.0, 1e-2], 1e-3) == "off_manifold"
    with pytest.raises(ManifoldError):
        classify_perturbation(s, [0.5, 0.1], [0.0, 0.0], 1e-3)


@pytest.mark.parametrize("name", ["segment", "arc", "circle", "flat_patch"])
def test_classify_monotone_along_normal(name):
    m = BUILTINS[name]
    P = sample_manifold(m, 1, seed=0)
    x = P.points[0]
    rng = np.random.default_rng(0)
    direction = rng.normal(size=m.n)
    direction /= np.linalg.norm(direction)
    labels = [classify_perturbation(m, x, s * direction, 1e-3) for s in np.geomspace(1e-6, 1.0, 40)]
    first_off = labels.index("off_manifold") if "off_manifold" in labels else len(labels)
    assert all(lbl == "off_manifold" for lbl in labels[first_off:])
