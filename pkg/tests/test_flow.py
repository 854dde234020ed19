import numpy as np
import pytest

from divflow import autodiff as ad
from divflow import flow, nn
from divflow.coupling import ConditionalDataset, PairBatch
from divflow.interpolant import interp_eval_np, interp_dt_np, make_interpolant


def shift_dataset(n=200, d=2, shift=(3.0, 0.0), seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, scale, size=(n, d))
    y = rng.normal(0, scale, size=(n, d)) + np.asarray(shift)
    return ConditionalDataset(xs=[x], ys=[y])


def constant_velocity(d, c):
    """Velocity net that outputs the constant c for every (z, t)."""
    p = nn.MlpParams([d + 1, d])
    p.weights = [ad.leaf(np.zeros((d + 1, d)))]
    p.biases = [ad.leaf(np.asarray(c, dtype=np.float64))]
    return flow.VelocityField(net=p)


def test_fm_loss_zero_when_field_equals_target():
    # single pair: the target slope y - x is one constant the net can hit exactly
    x = np.array([[0.5, -1.0]])
    y = np.array([[1.5, 2.0]])
    v = constant_velocity(2, y[0] - x[0])
    pairs = PairBatch(x, y, np.zeros(1, dtype=np.int64))
    loss = flow.fm_loss(v, None, pairs, np.array([0.3]))
    assert float(loss.value) == 0.0


def test_fm_loss_linear_zero_field():
    v = constant_velocity(2, [0.0, 0.0])
    pairs = PairBatch(np.zeros((1, 2)), np.array([[2.0, 0.0]]),
                      np.zeros(1, dtype=np.int64))
    loss = flow.fm_loss(v, None, pairs, np.array([0.7]))
    assert float(loss.value) == pytest.approx(4.0)


def test_fm_loss_nonnegative_and_t_validated():
    rng = np.random.default_rng(0)
    v = flow.make_velocity(2, hidden=(8,), seed=0)
    pairs = PairBatch(rng.normal(size=(16, 2)), rng.normal(size=(16, 2)),
                      np.zeros(16, dtype=np.int64))
    loss = flow.fm_loss(v, None, pairs, rng.uniform(size=16))
    assert float(loss.value) >= 0.0
    with pytest.raises(ValueError, match="\\[0,1\\]"):
        flow.fm_loss(v, None, pairs, np.full(16, 1.2))


def test_fm_loss_flags_nan_state_with_sample_index():
    v = flow.make_velocity(2, hidden=(8,), seed=0)
    x = np.zeros((3, 2))
    y = np.zeros((3, 2))
    pairs = PairBatch(x, y, np.zeros(3, dtype=np.int64))
    pairs.x = pairs.x.copy()
    pairs.x[1, 0] = np.nan
    with pytest.raises(ad.NonFiniteError, match="sample 1"):
        flow.fm_loss(v, None, pairs, np.full(3, 0.5))


def test_fm_loss_gradient_never_reaches_interpolant():
    rng = np.random.default_rng(1)
    interp = make_interpolant(2, hidden=(8,), seed=3)
    v = flow.make_velocity(2, hidden=(8,), seed=0)
    pairs = PairBatch(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)),
                      np.zeros(8, dtype=np.int64))
    loss = flow.fm_loss(v, interp, pairs, rng.uniform(size=8))
    grads = ad.backward(loss, v.net.leaves() + interp.gamma.leaves())
    assert any(np.any(grads[id(lf)] != 0) for lf in v.net.leaves())
    for lf in interp.gamma.leaves():
        assert np.all(grads[id(lf)] == 0.0)


def test_fm_loss_gradcheck():
    rng = np.random.default_rng(2)
    v = flow.make_velocity(2, hidden=(4,), seed=5)
    pairs = PairBatch(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)),
                      np.zeros(4, dtype=np.int64))
    t = rng.uniform(size=4)

    def f(vec):
        v.net.set_flat(vec)
        loss = flow.fm_loss(v, None, pairs, t)
        g = ad.backward(loss, v.net.leaves())
        return float(loss.value), np.concatenate(
            [g[id(lf)].ravel() for lf in v.net.leaves()])

    assert ad.finite_diff_check(f, v.net.flat(), 1e-5) < 1e-3


def test_train_fm_learns_a_shift():
    ds = shift_dataset()
    cfg = flow.TrainConfig(mode="fm", iterations=500, batch_size=128,
                           seed=0, hidden=(32, 32))
    res = flow.train_fm(cfg, ds)
    y_hat = flow.translate(res.velocity, ds.xs[0], steps=100)
    from divflow.metrics import emd
    assert emd(y_hat, ds.ys[0]) < 0.2
    # endpoints sit near x + shift
    err = np.linalg.norm(y_hat - (ds.xs[0] + [3.0, 0.0]), axis=1).mean()
    assert err < 0.4


def test_train_fm_reproducible():
    ds = shift_dataset(n=50)
    cfg = flow.TrainConfig(mode="fm-cond", iterations=30, batch_size=32, seed=7,
                           hidden=(8,))
    r1 = flow.train_fm(cfg, ds)
    r2 = flow.train_fm(cfg, ds)
    assert np.array_equal(r1.velocity.net.flat(), r2.velocity.net.flat())
    assert r1.log == r2.log


def test_train_fm_rejects_wrong_mode():
    ds = shift_dataset(n=20)
    with pytest.raises(ValueError):
        flow.train_fm(flow.TrainConfig(mode="dfm-two-phase"), ds)
    with pytest.raises(ValueError, match="unknown mode"):
        flow.run_training(flow.TrainConfig(mode="bogus"), ds)


def two_blob_dataset(n=128, seed=0, sep=4.0, scale=0.3):
    rng = np.random.default_rng(seed)
    m1 = np.array([sep / 2, sep / 2])
    m2 = np.array([sep / 2, -sep / 2])
    xs = [rng.normal(0, scale, size=(n, 2)) + m for m in (m1, m2)]
    ys = [-(rng.normal(0, scale, size=(n, 2)) + m) for m in (m1, m2)]
    return ConditionalDataset(xs=xs, ys=ys)


def test_dfm_two_phase_needs_two_populations():
    ds = shift_dataset(n=20)
    cfg = flow.TrainConfig(mode="dfm-two-phase", sigma1=1.0, sigma2=0.5)
    with pytest.raises(ValueError, match="Q >= 2"):
        flow.train_dfm_two_phase(cfg, ds)


def test_dfm_requires_kernel_bandwidths():
    ds = two_blob_dataset(n=16)
    cfg = flow.TrainConfig(mode="dfm-two-phase", iterations=5,
                           iterations_interp=5, batch_size=8)
    with pytest.raises(ValueError, match="sigma1 and sigma2"):
        flow.train_dfm_two_phase(cfg, ds)


def test_dfm_phase2_loss_decreases():
    ds = two_blob_dataset(n=64, seed=1)
    cfg = flow.TrainConfig(mode="dfm-two-phase", iterations=100,
                           iterations_interp=20, batch_size=64,
                           sigma1=1.0, sigma2=0.5, seed=0, hidden=(16,))
    res = flow.train_dfm_two_phase(cfg, ds)
    fm_losses = [row[2] for row in res.log if row[2] is not None]
    assert len(fm_losses) == 100
    assert np.mean(fm_losses[90:]) < np.mean(fm_losses[:10])


def test_dfm_zero_phase1_keeps_interpolant_near_init():
    ds = two_blob_dataset(n=32, seed=2)
    cfg = flow.TrainConfig(mode="dfm-two-phase", iterations=5,
                           iterations_interp=1, batch_size=16,
                           sigma1=1.0, sigma2=0.5, seed=3, hidden=(8,))
    res = flow.train_dfm_two_phase(cfg, ds)
    init = make_interpolant(2, hidden=(8,), seed=cfg.seed + 1)
    drift = np.abs(res.interpolant.gamma.flat() - init.gamma.flat()).max()
    assert drift < 5e-4  # one Adam step of lr 1e-4


def test_interleaved_runs_and_is_deterministic():
    ds = two_blob_dataset(n=32, seed=4)
    cfg = flow.TrainConfig(mode="dfm-interleaved", iterations=25, batch_size=16,
                           sigma1=1.0, sigma2=0.5, seed=5, hidden=(8,))
    r1 = flow.train_dfm_interleaved(cfg, ds)
    r2 = flow.train_dfm_interleaved(cfg, ds)
    assert np.array_equal(r1.velocity.net.flat(), r2.velocity.net.flat())
    assert np.array_equal(r1.interpolant.gamma.flat(), r2.interpolant.gamma.flat())
    assert all(row[1] is not None and row[2] is not None for row in r1.log)


def test_split_trains_all_networks():
    ds = two_blob_dataset(n=32, seed=6)
    cfg = flow.TrainConfig(mode="split", iterations=20, batch_size=16,
                           lambda_split=1.0, seed=0, hidden=(8,))
    res = flow.train_split(cfg, ds)
    assert len(res.private_velocities) == 2
    assert len(res.private_interpolants) == 2
    # interpolants actually moved: gradient flows through them here
    init = make_interpolant(2, hidden=(8,), seed=cfg.seed + 201)
    assert not np.array_equal(res.private_interpolants[0].gamma.flat(),
                              init.gamma.flat())


def test_split_rejects_nonpositive_consensus_weight():
    ds = two_blob_dataset(n=16)
    with pytest.raises(ValueError, match="consensus"):
        flow.train_split(flow.TrainConfig(mode="split", lambda_split=0.0), ds)


def test_integrate_constant_field_exact():
    v = constant_velocity(3, [1.0, -2.0, 0.5])
    x = np.array([0.0, 0.0, 1.0])
    for method in ("euler", "rk4"):
        for steps in (1, 7, 100):
            traj = flow.integrate(v, x, steps=steps, method=method)
            assert np.allclose(traj.states[-1], x + [1.0, -2.0, 0.5], atol=1e-12)
            assert traj.states.shape == (steps + 1, 3)
            assert np.array_equal(traj.states[0], x)
            assert traj.times[0] == 0.0 and traj.times[-1] == 1.0


def linear_growth_field():
    # v(z, t) = z in 1-D: z(1) = e * z(0)
    p = nn.MlpParams([2, 1])
    p.weights = [ad.leaf(np.array([[1.0], [0.0]]))]
    p.biases = [ad.leaf(np.zeros(1))]
    return flow.VelocityField(net=p)


def test_integrate_exponential_growth_rk4():
    v = linear_growth_field()
    traj = flow.integrate(v, np.array([1.0]), steps=100, method="rk4")
    assert abs(traj.states[-1, 0] - np.e) < 1e-6


def test_integrate_euler_first_order_convergence():
    v = linear_growth_field()

    def endpoint(steps):
        return flow.integrate(v, np.array([1.0]), steps=steps,
                              method="euler").states[-1, 0]

    e100 = abs(endpoint(100) - np.e)
    e200 = abs(endpoint(200) - np.e)
    assert 1.8 <= e100 / e200 <= 2.2


def test_integrate_validates_args():
    v = linear_growth_field()
    with pytest.raises(ValueError, match="steps"):
        flow.integrate(v, np.array([1.0]), steps=0)
    with pytest.raises(ValueError, match="method"):
        flow.integrate(v, np.array([1.0]), steps=10, method="midpoint")


def test_integrate_flags_nonfinite_state_with_step():
    p = nn.MlpParams([2, 1])
    p.weights = [ad.leaf(np.array([[1e308], [0.0]]))]
    p.biases = [ad.leaf(np.zeros(1))]
    v = flow.VelocityField(net=p)
    with np.errstate(over="ignore"):
        with pytest.raises(ad.NonFiniteError, match="step"):
            flow.integrate(v, np.array([1e30]), steps=4)


def test_integrate_tracks_interpolant_path():
    # drive the ODE with the interpolant's own slope along one fixed pair
    interp = make_interpolant(2, hidden=(8, 8), seed=11)
    for lf in interp.gamma.leaves():
        lf.value = lf.value * 2.0
    x = np.array([[1.0, -0.5]])
    y = np.array([[-1.0, 0.75]])

    class SlopeField:
        def velocity(self, z, t):
            return interp_dt_np(interp, x, y, np.array([min(max(t, 0.0), 1.0)]),
                                h=1e-4)

    def max_path_error(steps):
        states = flow.integrate_batch(SlopeField(), x, steps=steps, method="rk4")
        ts = np.linspace(0, 1, steps + 1)
        errs = [np.linalg.norm(states[k, 0] - interp_eval_np(interp, x, y,
                                                             np.array([ts[k]]))[0])
                for k in range(steps + 1)]
        return max(errs)

    e_coarse = max_path_error(25)
    e_fine = max_path_error(100)
    assert e_fine < e_coarse
    assert e_fine < 5e-3


def test_translate_identity_and_order():
    v = constant_velocity(2, [0.0, 0.0])
    x = np.random.default_rng(3).normal(size=(10, 2))
    out = flow.translate(v, x, steps=20)
    assert np.array_equal(out, x)
    v2 = constant_velocity(2, [1.0, 0.0])
    out2 = flow.translate(v2, x, steps=20)
    assert np.allclose(out2, x + [1.0, 0.0])


def test_translate_deterministic():
    v = flow.make_velocity(2, hidden=(16,), seed=9)
    x = np.random.default_rng(4).normal(size=(5, 2))
    assert np.array_equal(flow.translate(v, x, 50), flow.translate(v, x, 50))
