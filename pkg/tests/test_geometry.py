import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluidsteer.geometry import (BodyShape, ClosedCurve, DomainSpec, build_mesh, min_separation, place_bodies,
                                 polygon_centroid, signed_area)


def test_ellipse_samples_lie_on_the_curve():
    pts = ClosedCurve.ellipse(0.6, 0.3).sample(200)
    assert np.allclose((pts[:, 0] / 0.6) ** 2 + (pts[:, 1] / 0.3) ** 2, 1.0, atol=1e-12)


def test_ellipse_samples_are_equally_spaced_in_arclength():
    pts = ClosedCurve.ellipse(1.0, 0.25).sample(400)
    gaps = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    assert gaps.max() / gaps.min() < 1.01


def test_ellipse_perimeter_matches_ramanujan():
    a, b = 0.6, 0.3
    h = ((a - b) / (a + b)) ** 2
    ramanujan = np.pi * (a + b) * (1 + 3 * h / (10 + np.sqrt(4 - 3 * h)))
    assert ClosedCurve.ellipse(a, b).perimeter == pytest.approx(ramanujan, rel=1e-8)


def test_polygon_perimeter_and_centroid():
    square = ClosedCurve.polygon([[0, 0], [2, 0], [2, 2], [0, 2]])
    assert square.perimeter == pytest.approx(8.0)
    assert polygon_centroid(square.sample(64)) == pytest.approx([1.0, 1.0])


def test_disk_is_rejected_unless_allowed():
    with pytest.raises(ValueError, match="disk"):
        BodyShape(ClosedCurve.circle(0.3), 1.0, 0.1)
    BodyShape(ClosedCurve.circle(0.3), 1.0, 0.1, allow_disk=True)


def test_clockwise_body_is_rejected():
    with pytest.raises(ValueError, match="counterclockwise"):
        BodyShape(ClosedCurve.polygon([[0, 0], [0, 1], [2, 1], [2, 0]]), 1.0, 0.1)


def test_nonpositive_mass_is_rejected():
    with pytest.raises(ValueError):
        BodyShape(ClosedCurve.ellipse(0.5, 0.2), 0.0, 0.1)


def test_sigma_must_be_proper_arc():
    with pytest.raises(ValueError):
        DomainSpec(ClosedCurve.circle(1.0), (0.3, 0.3))
    assert DomainSpec(ClosedCurve.circle(1.0), (0.8, 0.1)).sigma_fraction == pytest.approx(0.3)


def test_separation_of_two_ellipses_side_by_side(disk_domain):
    shape = BodyShape(ClosedCurve.ellipse(0.2, 0.1), 1.0, 0.01)
    q = np.array([-0.3, 0.0, 0.0, 0.3, 0.0, 0.0])
    # the tips sit at -0.1 and 0.1; polygon sampling shaves a little off
    assert min_separation(disk_domain, [shape, shape], q) == pytest.approx(0.2, abs=1e-4)


def test_separation_to_wall(disk_domain, ellipse):
    assert min_separation(disk_domain, [ellipse], np.zeros(3)) == pytest.approx(1.0 - 0.6, abs=1e-4)


def test_overlap_gives_negative_separation(disk_domain):
    shape = BodyShape(ClosedCurve.ellipse(0.2, 0.1), 1.0, 0.01)
    q = np.array([-0.05, 0.0, 0.0, 0.05, 0.0, 0.0])
    assert min_separation(disk_domain, [shape, shape], q) < 0


def test_mesh_orientation_and_normals(one_body):
    m = one_body.mesh(np.array([0.1, -0.05, 0.4]))
    outer, body = m.slices
    assert m.turning(0) == pytest.approx(-2 * np.pi, abs=1e-9)
    assert m.turning(1) == pytest.approx(2 * np.pi, abs=1e-9)
    # normals point out of the fluid: away from the origin on the wall, into the body on the body
    assert np.all(np.sum(m.normals[outer] * m.midpoints[outer], axis=1) > 0)
    rel = m.midpoints[body] - m.ref_points[0]
    assert np.all(np.sum(m.normals[body] * rel, axis=1) < 0)


def test_sigma_panels_cover_requested_fraction(one_body):
    m = one_body.mesh(np.zeros(3))
    wall = m.slices[0]
    frac = m.lengths[wall][m.sigma[wall]].sum() / m.lengths[wall].sum()
    assert frac == pytest.approx(0.9, abs=0.01)
    s = m.sigma_s[m.sigma]
    assert s.min() > 0 and s.max() < 1
    assert not np.any(m.sigma[m.body_mask])


def test_mesh_refuses_colliding_pose(one_body):
    with pytest.raises(ValueError, match="collision"):
        build_mesh(one_body.domain, one_body.shapes, np.array([0.45, 0.0, 0.0]), 20, margin=0.05)


def test_rigid_data_is_normal_velocity_of_unit_motions(one_body):
    m = one_body.mesh(np.array([0.05, 0.02, 0.7]))
    rng = np.random.default_rng(3)
    qdot = rng.normal(size=3)
    v = m.rigid_velocity(qdot)
    assert np.allclose(m.rigid_data @ qdot, np.sum(v * m.normals, axis=1))


@given(x=st.floats(-0.2, 0.2), y=st.floats(-0.2, 0.2), theta=st.floats(-np.pi, np.pi))
def test_rigid_motion_preserves_body_panels(one_body, x, y, theta):
    ref = one_body.mesh(np.zeros(3), check=False)
    moved = one_body.mesh(np.array([x, y, theta]), check=False)
    sl = ref.slices[1]
    assert np.allclose(np.sort(ref.lengths[sl]), np.sort(moved.lengths[sl]), atol=1e-12)
    placed = place_bodies(one_body.shapes, np.array([x, y, theta]))[0]
    assert signed_area(placed) == pytest.approx(signed_area(one_body.shapes[0].boundary), rel=1e-12)


@given(theta=st.floats(-np.pi, np.pi))
def test_rotation_about_center_keeps_wall_distance_bounded(disk_domain, ellipse, theta):
    sep = min_separation(disk_domain, [ellipse], np.array([0.0, 0.0, theta]))
    assert 0.39 < sep < 0.41
