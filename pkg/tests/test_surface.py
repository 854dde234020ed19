import numpy as np
import pytest

from divflow import autodiff as ad
from divflow import surface as sf
from divflow.interpolant import make_interpolant


def flat_cloud(height=0.0, n=11, extent=1.0):
    ax = np.linspace(-extent, extent, n)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, height)])
    return sf.PointCloud(pts)


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        sf.PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        sf.PointCloud(np.zeros((4, 2)))
    with pytest.raises(ad.NonFiniteError):
        sf.PointCloud(np.array([[0.0, 0.0, np.nan]]))


def test_nearest_query_on_cloud_point():
    cloud = flat_cloud()
    p = cloud.points[37]
    assert cloud.nearest_xy(p) == 37
    assert np.array_equal(sf.nearest_neighbor_xy(p, cloud), p)


def test_nearest_ignores_height():
    cloud = sf.PointCloud(np.array([[0.0, 0.0, 5.0], [10.0, 0.0, 1.0]]))
    got = sf.nearest_neighbor_xy(np.array([1.0, 0.0, 99.0]), cloud)
    assert np.array_equal(got, [0.0, 0.0, 5.0])


def test_nearest_tie_breaks_to_lowest_index():
    cloud = sf.PointCloud(np.array([[1.0, 0.0, 0.0],
                                    [-1.0, 0.0, 1.0],
                                    [0.0, 1.0, 2.0]]))
    # origin is equidistant from all three
    assert cloud.nearest_xy(np.zeros(2)) == 0


def test_grid_index_matches_linear_scan():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-3, 3, size=(1000, 2)),
                           rng.normal(size=1000)])
    cloud = sf.PointCloud(pts)
    queries = np.vstack([rng.uniform(-4, 4, size=(900, 2)),
                         pts[rng.integers(1000, size=100), :2]])
    for p in queries:
        assert cloud.nearest_xy(p) == cloud.nearest_xy_brute(p)


def test_land_metric_coincident_point():
    params = sf.LandParams(sigma=0.5, eps=1e-2)
    z = np.array([0.3, -0.2, 1.0])
    cloud = sf.PointCloud(z.reshape(1, 3))
    g = sf.land_metric(z, cloud, params)
    assert np.allclose(g, 1.0 / params.eps)


def test_land_metric_far_field():
    params = sf.LandParams(sigma=0.1, eps=1e-2)
    cloud = flat_cloud()
    g = sf.land_metric(np.array([50.0, 50.0, 50.0]), cloud, params)
    assert np.allclose(g, 1.0 / params.eps, rtol=1e-6)


def test_land_metric_mirror_symmetry():
    params = sf.LandParams(sigma=0.3, eps=1e-2)
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(50, 3))
    z = rng.normal(size=3)
    g1 = sf.land_metric(z, sf.PointCloud(pts), params)
    flip = np.array([-1.0, 1.0, 1.0])
    g2 = sf.land_metric(z * flip, sf.PointCloud(pts * flip), params)
    assert np.allclose(g1, g2)


def test_land_params_validate():
    with pytest.raises(ValueError):
        sf.LandParams(sigma=0.0)
    with pytest.raises(ValueError):
        sf.LandParams(eps=-1.0)


def zero_gamma(d=3):
    it = make_interpolant(d, hidden=(4,), seed=0)
    for lf in it.gamma.leaves():
        lf.value = np.zeros_like(lf.value)
    return it


def test_mfm_loss_zero_when_path_is_still():
    it = zero_gamma()
    cloud = flat_cloud()
    x = np.array([[0.1, 0.2, 0.0]])
    t = np.array([0.4])
    loss = sf.mfm_loss(it, [(x, x.copy(), t)], cloud, sf.LandParams())
    assert float(loss.value) == pytest.approx(0.0, abs=1e-18)


def test_mfm_loss_euclidean_limit():
    # single coincident cloud point and eps = 1 force G = 1 exactly
    it = zero_gamma()
    x = np.array([[0.0, 0.0, 0.0]])
    y = np.array([[2.0, 1.0, 0.0]])
    t = np.array([0.5])
    z = 0.5 * (x + y)
    cloud = sf.PointCloud(z.reshape(1, 3))
    params = sf.LandParams(sigma=0.5, eps=1.0)
    loss = sf.mfm_loss(it, [(x, y, t)], cloud, params)
    # dz = y - x, its squared norm divided by (residual 0 + eps 1)
    assert float(loss.value) == pytest.approx(np.sum((y - x) ** 2))


def test_mfm_loss_quadratic_in_speed():
    it = zero_gamma()
    params = sf.LandParams(sigma=0.5, eps=1e6)  # metric ~ 1/eps, constant
    cloud = flat_cloud()
    x = np.array([[0.0, 0.0, 0.0]])
    t = np.array([0.5])
    l1 = float(sf.mfm_loss(it, [(x, np.array([[1.0, 0.0, 0.0]]), t)], cloud,
                           params).value)
    l2 = float(sf.mfm_loss(it, [(x, np.array([[2.0, 0.0, 0.0]]), t)], cloud,
                           params).value)
    # the metric is 1/eps only up to the O(1) residual term, hence rel 1e-4
    assert l2 / l1 == pytest.approx(4.0, rel=1e-4)


def test_mfm_loss_rejects_2d():
    it = make_interpolant(2, hidden=(4,), seed=0)
    with pytest.raises(ValueError, match="3-D"):
        sf.mfm_loss(it, [(np.zeros((1, 2)), np.ones((1, 2)), np.array([0.5]))],
                    flat_cloud(), sf.LandParams())


def test_mfm_gradcheck():
    it = make_interpolant(3, hidden=(4,), seed=7)
    rng = np.random.default_rng(8)
    cloud = sf.PointCloud(rng.normal(size=(20, 3)))
    params = sf.LandParams(sigma=0.6, eps=1e-2)
    x = rng.normal(size=(3, 3))
    y = rng.normal(size=(3, 3))
    t = rng.uniform(0.1, 0.9, size=3)

    def f(vec):
        it.gamma.set_flat(vec)
        loss = sf.mfm_loss(it, [(x, y, t)], cloud, params)
        g = ad.backward(loss, it.gamma.leaves())
        return float(loss.value), np.concatenate(
            [g[id(lf)].ravel() for lf in it.gamma.leaves()])

    assert ad.finite_diff_check(f, it.gamma.flat(), 1e-5) < 1e-3


def test_surface_adherence_on_surface_is_zero():
    cloud = flat_cloud(height=0.0)
    # trajectory glued to cloud points
    states = np.stack([cloud.points[:4], cloud.points[4:8]])  # (2 states, 4, 3)
    assert sf.surface_adherence(states, cloud) == 0.0


def test_surface_adherence_constant_offset():
    cloud = flat_cloud(height=0.0)
    steps = 6
    traj = np.zeros((steps + 1, 1, 3))
    traj[:, 0, 2] = 1.0  # constant height 1 above a height-0 surface
    assert sf.surface_adherence(traj, cloud) == pytest.approx(steps)


def test_surface_adherence_single_step():
    cloud = flat_cloud(height=0.0)
    traj = np.zeros((2, 1, 3))
    traj[1, 0] = [0.1, 0.1, 0.7]
    assert sf.surface_adherence(traj, cloud) == pytest.approx(0.7)


def test_surface_adherence_translation_invariant():
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(-1, 1, size=(200, 2)),
                           rng.normal(size=200)])
    cloud = sf.PointCloud(pts)
    traj = rng.normal(size=(5, 3, 3)) * 0.5
    shift = np.array([10.0, -20.0, 0.0])
    moved_cloud = sf.PointCloud(pts + shift)
    sa1 = sf.surface_adherence(traj, cloud)
    sa2 = sf.surface_adherence(traj + shift, moved_cloud)
    assert sa1 == pytest.approx(sa2, rel=1e-9)


def test_surface_adherence_rejects_empty():
    cloud = flat_cloud()
    with pytest.raises(ValueError):
        sf.surface_adherence(np.zeros((1, 2, 3)), cloud)


def test_swarm_scenario_contract():
    cloud = sf.make_bump_cloud(n_grid=24)
    ds = sf.swarm_scenario(cloud, [(-1.0, 0.0), (1.0, 0.0)],
                           [(1.0, 0.5), (-1.0, -0.5)], k=50, seed=0)
    assert ds.q == 2 and ds.dim == 3
    assert all(x.shape == (50, 3) for x in ds.xs)
    # default sample count and variances
    ds2 = sf.swarm_scenario(cloud, [(-1.0, 0.0), (1.0, 0.0)],
                            [(1.0, 0.5), (-1.0, -0.5)], seed=0)
    assert all(x.shape[0] == 4000 for x in ds2.xs)
    assert np.std(ds2.xs[0][:, 0]) == pytest.approx(np.sqrt(0.02), rel=0.1)
    assert np.std(ds2.ys[0][:, 0]) == pytest.approx(np.sqrt(0.03), rel=0.1)


def test_swarm_scenario_zero_variance_snaps_to_center():
    cloud = sf.make_bump_cloud(n_grid=24)
    ds = sf.swarm_scenario(cloud, [(-1.0, 0.0), (1.0, 0.0)],
                           [(1.0, 0.0), (-1.0, 0.0)], variances=(0.0, 0.0),
                           k=5, seed=0)
    assert np.allclose(ds.xs[0][:, :2], [-1.0, 0.0])
    heights = [cloud.surface_height([-1.0, 0.0])] * 5
    assert np.allclose(ds.xs[0][:, 2], heights)


def test_point_cloud_file_roundtrip(tmp_path):
    cloud = sf.make_bump_cloud(n_grid=8)
    path = tmp_path / "cloud.xyz"
    sf.save_point_cloud(path, cloud)
    again = sf.load_point_cloud(path)
    assert np.array_equal(cloud.points, again.points)


def test_point_cloud_file_formats(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\n1.0, 2.0, 3.0\n4 5 6\n\n")
    cloud = sf.load_point_cloud(path)
    assert np.array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])

    bad = tmp_path / "bad.txt"
    bad.write_text("1.0 2.0\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        sf.load_point_cloud(bad)
