import math

import numpy as np
import pytest

from updsim.core import VoxelGrid
from updsim.hemo import (
    FlowField,
    InletDensity,
    InletPlane,
    StepUnderflow,
    backpropagate_inlet,
    export_flow,
    filter_inlet_points,
    import_flow,
    inlet_density,
    integrate_trajectory,
    load_stl_ascii,
    poiseuille_field,
    rk23,
    rotation_field,
    sample_velocity,
    simulate_particles,
    uniform_field,
)
from updsim.core import write_bundle

R = 1e-3
L = 10e-3
VMAX = 0.02


@pytest.fixture(scope="module")
def tube():
    # nodes on the axis (x = y = 0) and on the inlet plane z = 0
    grid = VoxelGrid.covering([-1.5e-3, -1.5e-3, -0.5e-3], [1.5e-3, 1.5e-3, 10.5e-3], 0.1e-3)
    return poiseuille_field([0, 0, 0], [0, 0, L], R, VMAX, grid)


@pytest.mark.parametrize("r, expected", [(0.0, VMAX), (R, 0.0), (R / 2, 0.75 * VMAX)])
def test_poiseuille_profile(tube, r, expected):
    v = sample_velocity(tube, [r, 0, 5e-3])
    assert v[2] == pytest.approx(expected, abs=1e-15)
    assert v[0] == 0 and v[1] == 0


def test_poiseuille_grid_must_contain_tube():
    grid = VoxelGrid.covering([0, 0, 0], [1e-3, 1e-3, 1e-3], 1e-4)
    with pytest.raises(ValueError, match="contain"):
        poiseuille_field([0, 0, 0], [0, 0, 5e-3], 1e-4, 1.0, grid)


def test_flow_roundtrip(tube, tmp_path):
    export_flow(tube, tmp_path / "flow.fqf")
    got = import_flow(tmp_path / "flow.fqf")
    assert got.velocity.data.tobytes() == tube.velocity.data.tobytes()
    np.testing.assert_array_equal(got.mask.data, tube.mask.data)
    np.testing.assert_array_equal(got.inlet.normal, tube.inlet.normal)
    assert got.import_warnings == 0


def test_import_dim_mismatch(tmp_path):
    grid = VoxelGrid((3, 3, 3), (1, 1, 1))
    header = grid.header()
    header.update(inlet_point="0,0,0", inlet_normal="0,0,1", inlet_radius="1")
    write_bundle(tmp_path / "bad.fqf", header, {"velocity": np.zeros((3, 3, 3, 3)), "mask": np.ones((3, 3, 2), np.uint8)})
    with pytest.raises(ValueError, match="dims"):
        import_flow(tmp_path / "bad.fqf")


def test_import_missing_inlet(tmp_path):
    grid = VoxelGrid((3, 3, 3), (1, 1, 1))
    write_bundle(tmp_path / "bad.fqf", grid.header(), {"velocity": np.zeros((3, 3, 3, 3)), "mask": np.ones((3, 3, 3), np.uint8)})
    with pytest.raises(ValueError, match="inlet"):
        import_flow(tmp_path / "bad.fqf")


def test_import_zeroes_outside_mask(tmp_path):
    grid = VoxelGrid((4, 4, 4), (1, 1, 1))
    mask = np.zeros((4, 4, 4), np.uint8)
    mask[1:3, 1:3, :] = 1
    vel = np.zeros((4, 4, 4, 3))
    vel[mask > 0] = [0, 0, 1]
    outside = np.argwhere(mask == 0)[:5]
    for i, j, k in outside:
        vel[i, j, k] = [1, 2, 3]
    header = grid.header()
    header.update(inlet_point="1.5,1.5,0", inlet_normal="0,0,1", inlet_radius="1")
    write_bundle(tmp_path / "f.fqf", header, {"velocity": vel, "mask": mask})
    with pytest.warns(UserWarning, match="5 velocity samples"):
        flow = import_flow(tmp_path / "f.fqf")
    assert flow.import_warnings == 5
    assert not np.any(flow.velocity.data[mask == 0])


def test_interpolation_reproduces_nodes_and_edges():
    rng = np.random.default_rng(0)
    grid = VoxelGrid((4, 5, 6), (0.1, 0.2, 0.3), (1.0, -1.0, 0.5))
    data = rng.normal(size=(4, 5, 6, 3))
    flow = FlowField(grid.with_data(data), grid.with_data(np.ones((4, 5, 6), np.uint8)), InletPlane([1, -1, 0.5], [0, 0, 1], 1))
    x, y, z = grid.axes()
    for i, j, k in [(0, 0, 0), (3, 4, 5), (2, 1, 3)]:
        np.testing.assert_allclose(sample_velocity(flow, [x[i], y[j], z[k]]), data[i, j, k], rtol=1e-12, atol=1e-14)
    mid = [0.5 * (x[1] + x[2]), y[3], z[2]]
    np.testing.assert_allclose(sample_velocity(flow, mid), 0.5 * (data[1, 3, 2] + data[2, 3, 2]), rtol=1e-12)
    with pytest.raises(ValueError, match="outside"):
        sample_velocity(flow, [0.0, 0.0, 0.0])


def test_interpolation_piecewise_linear_along_axis():
    rng = np.random.default_rng(1)
    grid = VoxelGrid((5, 3, 3), (1.0, 1.0, 1.0))
    data = rng.normal(size=(5, 3, 3, 3))
    flow = FlowField(grid.with_data(data), grid.with_data(np.ones((5, 3, 3), np.uint8)), InletPlane([0, 0, 0], [1, 0, 0], 1))
    s = np.linspace(1.0, 2.0, 11)
    v = flow.sample(np.stack([s, np.ones_like(s), np.ones_like(s)], 1))
    np.testing.assert_allclose(np.diff(v, 2, axis=0), 0, atol=1e-12)


def test_zero_outside_mask(tube):
    np.testing.assert_array_equal(sample_velocity(tube, [1.4e-3, 1.4e-3, 5e-3]), 0.0)


def test_inlet_density_plug_flow():
    grid = VoxelGrid.covering([-2e-3, -2e-3, -1e-3], [2e-3, 2e-3, 3e-3], 0.2e-3)
    flow = uniform_field(grid, [0, 0, 0.01], InletPlane([0, 0, 0], [0, 0, 1], 1e-3))
    dens = inlet_density(flow, 200)
    np.testing.assert_allclose(dens.weights, 1 / len(dens.weights), rtol=1e-12)
    assert dens.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_inlet_density_poiseuille(tube):
    dens = inlet_density(tube, 400)
    r2 = np.sum(dens.points[:, :2] ** 2, axis=1)
    analytic = np.clip(1 - r2 / R**2, 0, None)
    analytic /= analytic.sum()
    # away from the wall kink, trilinear sampling of the parabola errs by O(h^2 / R^2)
    interior = np.sqrt(r2) < R - 2 * 0.1e-3
    np.testing.assert_allclose(dens.weights[interior], analytic[interior], atol=0.02 * analytic.max())
    order = np.argsort(r2)
    assert np.all(np.diff(dens.weights[order]) <= 1e-12 + 0.02 * analytic.max())
    centre = np.argmin(r2)
    assert r2[centre] == 0
    assert dens.weights[centre] == dens.weights.max()
    assert np.all(dens.weights >= 0) and dens.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_inlet_density_reversed_flow():
    grid = VoxelGrid.covering([-2e-3, -2e-3, -1e-3], [2e-3, 2e-3, 3e-3], 0.2e-3)
    flow = uniform_field(grid, [0, 0, -0.01], InletPlane([0, 0, 0], [0, 0, 1], 1e-3))
    with pytest.raises(ValueError, match="zero total flux"):
        inlet_density(flow, 50)


def test_uniform_field_exact_displacement():
    grid = VoxelGrid.covering([-1e-3, -1e-3, -1e-3], [4e-3, 1e-3, 1e-3], 0.5e-3)
    flow = uniform_field(grid, [1e-3, 0, 0])
    traj = integrate_trajectory(flow, [0, 0, 0], 2.0)
    assert not traj.exited
    assert traj.times[-1] == 2.0
    np.testing.assert_allclose(traj.positions[-1], [2e-3, 0, 0], rtol=0, atol=1e-15)


def test_zero_field_stationary():
    grid = VoxelGrid.covering([-1e-3] * 3, [1e-3] * 3, 0.5e-3)
    flow = FlowField(grid.with_data(np.zeros(grid.dims + (3,))), grid.with_data(np.ones(grid.dims, np.uint8)),
                     InletPlane([0, 0, 0], [0, 0, 1], 1e-3))
    traj = integrate_trajectory(flow, [1e-4, 2e-4, 0], 5.0)
    np.testing.assert_array_equal(traj.positions[-1], [1e-4, 2e-4, 0])


@pytest.fixture(scope="module")
def spinner():
    grid = VoxelGrid.covering([-0.03, -0.03, -0.01], [0.03, 0.03, 0.01], 0.005)
    return rotation_field(grid, 1.0)


def test_rotation_radius_drift(spinner):
    p0 = np.array([0.02, 0.0, 0.0])
    traj = integrate_trajectory(spinner, p0, 2 * math.pi, rel_tol=1e-6)
    drift = abs(np.linalg.norm(traj.positions[-1]) - 0.02) / 0.02
    assert drift < 1e-3
    np.testing.assert_allclose(traj.positions[-1], p0, atol=1e-4)


def test_rk23_observed_order(spinner):
    p0 = np.array([0.02, 0.0, 0.0])
    T = math.pi / 2
    exact = np.array([0.0, 0.02, 0.0])
    errs = []
    for h in (T / 8, T / 16, T / 32):
        traj = integrate_trajectory(spinner, p0, T, fixed_step=h)
        errs.append(np.linalg.norm(traj.positions[-1] - exact))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios >= 4.0)


def test_step_underflow():
    def stiff(y, t):
        return -1e12 * y

    with pytest.raises(StepUnderflow):
        rk23(stiff, np.ones((1, 3)), 1.0, min_step=1e-9, rtol=1e-12, atol=1e-15)


def test_trajectory_flags_exit(tube):
    traj = integrate_trajectory(tube, [0, 0, 9e-3], 1.0)
    assert traj.exited
    assert 0 < traj.exit_time < 1.0
    assert traj.positions[-1, 2] > L


def test_start_outside_mask(tube):
    with pytest.raises(ValueError, match="outside"):
        integrate_trajectory(tube, [1.4e-3, 0, 5e-3], 1.0)


def test_backpropagate_straight_tube(tube):
    seeds = np.array([[0, 0, L], [0.4e-3, 0.3e-3, 8e-3], [0.7e-3, 0, 9e-3]])
    res = backpropagate_inlet(tube, seeds)
    assert res.dropped == 0
    np.testing.assert_allclose(res.points[:, 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(res.points[:, :2], seeds[:, :2], atol=0.1 * 0.1e-3)


def test_backpropagate_wall_seed_dropped(tube):
    res = backpropagate_inlet(tube, [[R, 0, 5e-3]])
    assert res.dropped == 1 and len(res.points) == 0


def test_backprop_then_forward_returns_to_seed(tube):
    seed = np.array([0.3e-3, -0.2e-3, 7e-3])
    res = backpropagate_inlet(tube, [seed])
    start = res.points[0] + np.array([0, 0, 1e-12])
    traj = integrate_trajectory(tube, start, res.times[0])
    assert np.linalg.norm(traj.positions[-1] - seed) <= 2 * 0.1e-3


def test_filter_inlet_points():
    plane = InletPlane([0, 0, 0], [0, 0, 1], 1e-3)
    tol = 1e-5
    assert len(filter_inlet_points([[0, 0, 0]], plane, tol)) == 1
    assert len(filter_inlet_points([[0, 0, 2 * tol]], plane, tol)) == 0
    rng = np.random.default_rng(4)
    on = np.column_stack([rng.uniform(-0.5e-3, 0.5e-3, (40, 2)), rng.uniform(-tol / 2, tol / 2, 40)])
    off_plane = np.column_stack([rng.uniform(-0.5e-3, 0.5e-3, (40, 2)), rng.uniform(3 * tol, 1e-3, 40)])
    off_radius = np.column_stack([np.full(20, 2e-3), np.zeros(20), np.zeros(20)])
    pts = rng.permutation(np.vstack([on, off_plane, off_radius]))
    assert len(filter_inlet_points(pts, plane, tol)) == 40


def test_particle_count_invariant():
    grid = VoxelGrid.covering([-1.2e-3, -1.2e-3, -0.3e-3], [1.2e-3, 1.2e-3, 3.3e-3], 0.1e-3)
    flow = poiseuille_field([0, 0, 0], [0, 0, 3e-3], R, 0.05, grid)
    dens = inlet_density(flow, 300)
    ens = simulate_particles(flow, dens, 500, 0.2, 100.0, 0, warmup=0.06)
    assert ens.positions.shape == (20, 500, 3)
    assert ens.reinjected[1:].any()
    for frame in ens.positions:
        assert len(frame) == 500
        assert np.all(flow.inside(frame))


def test_centerline_speed(tube):
    centre = InletDensity(np.array([[0.0, 0.0, 0.0]]), np.array([1.0]), 0.0, tube.inlet)
    ens = simulate_particles(tube, centre, 20, 0.5, 100.0, 0, jitter=False)
    dz = np.diff(ens.positions[:, :, 2], axis=0)
    valid = ~ens.reinjected[1:]
    speed = dz[valid].mean() * 100.0
    assert speed == pytest.approx(VMAX, rel=0.02)


def test_zero_velocity_frames_identical():
    grid = VoxelGrid.covering([-1e-3] * 3, [1e-3] * 3, 0.25e-3)
    flow = uniform_field(grid, [0, 0, 1e-3])
    dens = inlet_density(flow, 50)
    still = FlowField(grid.with_data(np.zeros(grid.dims + (3,))), flow.mask, flow.inlet)
    ens = simulate_particles(still, dens, 30, 0.05, 100.0, 2)
    for frame in ens.positions[1:]:
        np.testing.assert_array_equal(frame, ens.positions[0])


def test_particle_frames_roundtrip(tmp_path, tube):
    dens = inlet_density(tube, 100)
    ens = simulate_particles(tube, dens, 10, 0.03, 100.0, 1, radius_range=(1e-6, 3e-6))
    ens.save(tmp_path / "p")
    got = type(ens).load(tmp_path / "p")
    np.testing.assert_array_equal(got.positions, ens.positions)
    np.testing.assert_array_equal(got.radius, ens.radius)
    assert got.frame_interval == ens.frame_interval


def test_stl_ascii(tmp_path):
    text = "solid t\n facet normal 0 0 1\n  outer loop\n   vertex 0 0 0\n   vertex 1 0 0\n   vertex 0 1 0\n  endloop\n endfacet\nendsolid t\n"
    (tmp_path / "t.stl").write_text(text)
    mesh = load_stl_ascii(tmp_path / "t.stl")
    assert mesh.triangles.shape == (1, 3, 3)
