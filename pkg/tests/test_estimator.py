import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apu_fdi.estimator import (
    EstimationError, EstimatorConfig, EstimatorKind, GaussianBelief, ShaftPowerInput,
    SingularInnovationError, StepInput, belief_sequence, cee_recursion_pes, covariance_schedule,
    filter_means, joseph, kalman_gain, predict_mpes, predict_pens, predict_pes, run_estimator,
    stand_in_power, update,
)
from apu_fdi.model import AugmentedModel, augment
from apu_fdi.theorems import random_inputs, random_model

from conftest import random_spd


def toy_aug(rng, n=5, ny=3):
    A = rng.normal(size=(n, n))
    A *= 0.9 / np.max(np.abs(np.linalg.eigvals(A)))
    return AugmentedModel(A=A, B=rng.normal(size=(n, 1)), C=rng.normal(size=(ny, n)),
                          F=rng.normal(size=(n, 1)), Q=random_spd(rng, n, 0.1),
                          D=rng.normal(size=(ny, 1)), R=random_spd(rng, ny, 0.5), n_x=2, n_theta=n - 2)


def belief(rng, n):
    return GaussianBelief(rng.normal(size=n), random_spd(rng, n))


# ------------------------------------------------------------ predict

def test_identity_dynamics_leave_belief_unchanged():
    n = 3
    aug = AugmentedModel(A=np.eye(n), B=np.zeros((n, 1)), C=np.eye(n), F=np.zeros((n, 1)),
                         Q=np.zeros((n, n)), D=np.zeros((n, 1)), R=np.eye(n), n_x=1, n_theta=2)
    b = belief(np.random.default_rng(0), n)
    out = predict_pes(b, aug, [0.3], ShaftPowerInput(5.0, 2.0))
    np.testing.assert_array_equal(out.mean, b.mean)
    np.testing.assert_allclose(out.cov, b.cov, rtol=1e-15)


def test_shaft_power_shifts_speed_by_F(aug):
    b = GaussianBelief(np.zeros(5), np.zeros((5, 5)))
    out = predict_pes(b, aug, [0.0], ShaftPowerInput(1000.0, 0.0))
    assert out.mean[0] == pytest.approx(-289.8, rel=1e-12)
    np.testing.assert_array_equal(out.mean[1:], 0.0)


def test_large_stand_in_variance_floors_speed_prior(aug):
    b = GaussianBelief(np.zeros(5), np.zeros((5, 5)))
    out = predict_pens(b, aug, [0.0], ShaftPowerInput(0.0, 1e12))
    assert out.cov[0, 0] >= 8.398e10


def test_predict_covariance_matches_propagated_samples():
    rng = np.random.default_rng(1)
    aug = toy_aug(rng)
    b = belief(rng, 5)
    pe = ShaftPowerInput(0.7, 0.4)
    out = predict_pes(b, aug, [0.2], pe)
    m = 100_000
    x = rng.multivariate_normal(b.mean, b.cov, m)
    w = rng.multivariate_normal(np.zeros(5), aug.Q, m)
    p = pe.Pe + np.sqrt(pe.var) * rng.standard_normal(m)
    xp = x @ aug.A.T + 0.2 * aug.B[:, 0] + p[:, None] * aug.f + w
    sample = np.cov(xp.T)
    np.testing.assert_allclose(np.diag(sample), np.diag(out.cov), rtol=0.02)
    np.testing.assert_allclose(xp.mean(axis=0), out.mean, atol=0.05 * np.sqrt(np.diag(out.cov)).max())


def test_predictor_collapses():
    rng = np.random.default_rng(2)
    aug = toy_aug(rng)
    b = belief(rng, 5)
    pe = ShaftPowerInput(1.3, 0.25)
    pes = predict_pes(b, aug, [0.1], pe)
    pens_same = predict_pens(b, aug, [0.1], pe)
    np.testing.assert_array_equal(pes.mean, pens_same.mean)
    np.testing.assert_array_equal(pes.cov, pens_same.cov)
    mpes_collapsed = predict_mpes(b, aug, [0.1], pe, pe.var)
    np.testing.assert_array_equal(mpes_collapsed.mean, pes.mean)
    np.testing.assert_array_equal(mpes_collapsed.cov, pes.cov)
    # MPES = PES mean + PENS covariance
    mp = predict_mpes(b, aug, [0.1], pe, 1e4)
    pens = predict_pens(b, aug, [0.1], ShaftPowerInput(0.0, 1e4))
    np.testing.assert_array_equal(mp.mean, pes.mean)
    np.testing.assert_array_equal(mp.cov, pens.cov)


def test_predict_input_validation(aug):
    b = GaussianBelief(np.zeros(5), np.eye(5))
    with pytest.raises(ValueError):
        predict_pes(GaussianBelief(np.zeros(4), np.eye(4)), aug, [0.0], ShaftPowerInput(0, 0))
    with pytest.raises(ValueError):
        predict_pes(b, aug, [0.0, 1.0], ShaftPowerInput(0, 0))
    with pytest.raises(EstimationError):
        predict_pes(b, aug, [np.nan], ShaftPowerInput(0, 0))
    with pytest.raises(ValueError):
        ShaftPowerInput(0.0, -1.0)
    with pytest.raises(ValueError):
        predict_mpes(b, aug, [0.0], ShaftPowerInput(0, 0), 0.0)
    with pytest.raises(ValueError):
        EstimatorConfig(EstimatorKind.PENS, pPeT=0.0)


# ------------------------------------------------------------ update

def scalar_aug():
    return AugmentedModel(A=np.eye(1), B=np.zeros((1, 1)), C=np.eye(1), F=np.zeros((1, 1)),
                          Q=np.zeros((1, 1)), D=np.zeros((1, 1)), R=np.eye(1), n_x=1, n_theta=0)


def test_scalar_update_by_hand():
    post, diag = update(GaussianBelief([0.0], [[1.0]]), scalar_aug(), [[0.0]], [0.0], [2.0], [[1.0]])
    assert diag.K[0, 0] == pytest.approx(0.5)
    assert post.cov[0, 0] == pytest.approx(0.5)
    assert post.mean[0] == pytest.approx(1.0)
    assert diag.innovation[0] == pytest.approx(2.0)


def test_uninformative_measurement_leaves_prior():
    rng = np.random.default_rng(3)
    aug = toy_aug(rng)
    prior = belief(rng, 5)
    R = aug.R * 1e12
    post, diag = update(prior, aug, aug.D, [0.0], rng.normal(size=3), R)
    np.testing.assert_allclose(post.cov, prior.cov, rtol=1e-6, atol=1e-6 * np.abs(prior.cov).max())
    assert np.abs(diag.K).max() < 1e-6


def test_singular_innovation_reports_condition():
    aug = scalar_aug()
    with pytest.raises(SingularInnovationError) as err:
        update(GaussianBelief([0.0], [[0.0]]), aug, [[0.0]], [0.0], [1.0], [[0.0]])
    assert err.value.cond == np.inf
    C = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(SingularInnovationError, match="cond"):
        kalman_gain(np.diag([1e14, 0.0]), C, np.diag([1.0, 1e-3]))


def test_update_validates_shapes(aug):
    prior = GaussianBelief(np.zeros(5), np.eye(5))
    with pytest.raises(ValueError):
        update(prior, aug, aug.D, [0.0], np.zeros(3), aug.R)
    with pytest.raises(ValueError):
        update(prior, aug, aug.D, [0.0], np.zeros(4), np.eye(3))


psd_case = st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))


@settings(max_examples=60, deadline=None)
@given(psd_case, st.floats(-6, 3))
def test_joseph_preserves_psd(dims, log_r):
    n, ny, seed = dims
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, max(1, n - 1)))           # possibly rank-deficient prior
    P = L @ L.T * 10.0 ** rng.uniform(-3, 3)
    C = rng.normal(size=(ny, n))
    R = random_spd(rng, ny, 10.0 ** log_r)
    K = rng.normal(size=(n, ny))                       # Joseph is PSD for any gain
    for gain in (K, kalman_gain(P, C, R, max_cond=1e18)):
        out = joseph(P, gain, C, R)
        lam = np.linalg.eigvalsh(out)
        assert lam.min() >= -1e-10 * max(np.trace(out), 1e-300)
        np.testing.assert_array_equal(out, out.T)


@settings(max_examples=60, deadline=None)
@given(psd_case)
def test_update_matches_information_form(dims):
    n, ny, seed = dims
    rng = np.random.default_rng(seed)
    P = random_spd(rng, n)
    C = rng.normal(size=(ny, n))
    R = random_spd(rng, ny)
    aug = AugmentedModel(A=np.eye(n), B=np.zeros((n, 1)), C=C, F=np.zeros((n, 1)),
                         Q=np.zeros((n, n)), D=np.zeros((ny, 1)), R=R, n_x=n, n_theta=0)
    m = rng.normal(size=n)
    y = rng.normal(size=ny)
    post, _ = update(GaussianBelief(m, P), aug, aug.D, [0.0], y, R)
    Rinv = np.linalg.inv(R)
    info = np.linalg.inv(np.linalg.inv(P) + C.T @ Rinv @ C)
    mean = info @ (np.linalg.solve(P, m) + C.T @ Rinv @ y)
    np.testing.assert_allclose(post.cov, info, rtol=1e-8, atol=1e-8 * np.abs(info).max())
    np.testing.assert_allclose(post.mean, mean, rtol=1e-8, atol=1e-8 * np.abs(mean).max())
    # posterior never exceeds the prior
    assert np.linalg.eigvalsh(P - post.cov).min() >= -1e-10 * np.trace(P)


# ------------------------------------------------------------ runs

def steps_from(rng, n_steps, ny=3, var=0.5):
    return [StepInput(rng.normal(size=1), rng.normal(size=ny), ShaftPowerInput(float(rng.normal()), var))
            for _ in range(n_steps)]


def test_single_step_equals_predict_then_update():
    rng = np.random.default_rng(4)
    aug = toy_aug(rng)
    init = belief(rng, 5)
    (step,) = steps_from(rng, 1)
    [(post, diag)] = run_estimator(EstimatorConfig(EstimatorKind.PES), aug, init, [step])
    prior = predict_pes(init, aug, step.u, step.pe)
    ref, ref_diag = update(prior, aug, aug.D, step.u, step.y, aug.R)
    np.testing.assert_array_equal(post.mean, ref.mean)
    np.testing.assert_array_equal(post.cov, ref.cov)
    np.testing.assert_array_equal(diag.K, ref_diag.K)


def test_pens_with_true_power_equals_pes():
    rng = np.random.default_rng(5)
    aug = toy_aug(rng)
    init = belief(rng, 5)
    steps = steps_from(rng, 30)
    pes = run_estimator(EstimatorConfig(EstimatorKind.PES), aug, init, steps)
    b = init
    for s, (ref, _) in zip(steps, pes):
        conf = EstimatorConfig(EstimatorKind.PENS, peT=s.pe.Pe, pPeT=s.pe.var)
        [(b, _)] = run_estimator(conf, aug, b, [s])
        np.testing.assert_array_equal(b.mean, ref.mean)
        np.testing.assert_array_equal(b.cov, ref.cov)


def test_pens_ignores_reported_power():
    rng = np.random.default_rng(6)
    aug = toy_aug(rng)
    init = belief(rng, 5)
    steps = steps_from(rng, 20)
    other = [StepInput(s.u, s.y, ShaftPowerInput(s.pe.Pe + 100.0, 3.0)) for s in steps]
    conf = EstimatorConfig(EstimatorKind.PENS, peT=0.2, pPeT=50.0)
    a, _, _ = belief_sequence(run_estimator(conf, aug, init, steps))
    b, _, _ = belief_sequence(run_estimator(conf, aug, init, other))
    np.testing.assert_array_equal(a, b)


def test_errors_carry_step_index():
    rng = np.random.default_rng(7)
    aug = toy_aug(rng)
    steps = steps_from(rng, 5)
    steps[3] = StepInput(steps[3].u, np.full(3, np.nan), steps[3].pe)
    with pytest.raises(EstimationError) as err:
        run_estimator(EstimatorConfig(EstimatorKind.PES), aug, belief(rng, 5), steps)
    assert err.value.step == 3
    with pytest.raises(EstimationError):
        run_estimator(EstimatorConfig(EstimatorKind.PES), aug, belief(rng, 5), [])


@pytest.mark.parametrize("kind", list(EstimatorKind))
def test_batched_means_match_step_by_step(kind):
    rng = np.random.default_rng(8)
    aug = toy_aug(rng)
    init = belief(rng, 5)
    conf = EstimatorConfig(kind, peT=0.3, pPeT=40.0)
    runs = [steps_from(rng, 40) for _ in range(3)]
    var = 0.5 if kind is EstimatorKind.PES else conf.pPeT
    sched = covariance_schedule(aug, init.cov, var, 40)
    u = np.array([[s.u for s in r] for r in runs])
    y = np.array([[s.y for s in r] for r in runs])
    pe = stand_in_power(conf, np.array([[s.pe.Pe for s in r] for r in runs]))
    batched = filter_means(aug, sched, init.mean, u, y, pe)
    for i, r in enumerate(runs):
        means, covs, gains = belief_sequence(run_estimator(conf, aug, init, r))
        np.testing.assert_allclose(batched[i], means, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(sched.post_covs, covs, rtol=1e-12)
        np.testing.assert_allclose(sched.gains, gains, rtol=1e-12)


def test_batched_means_do_not_depend_on_batch_composition():
    rng = np.random.default_rng(9)
    aug = toy_aug(rng)
    init = belief(rng, 5)
    sched = covariance_schedule(aug, init.cov, 0.5, 25)
    u, y, pe = rng.normal(size=(7, 25, 1)), rng.normal(size=(7, 25, 3)), rng.normal(size=(7, 25))
    full = filter_means(aug, sched, init.mean, u, y, pe)
    for i in range(7):
        alone = filter_means(aug, sched, init.mean, u[i:i + 1], y[i:i + 1], pe[i:i + 1])
        np.testing.assert_array_equal(alone[0], full[i])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3),
       st.sampled_from(list(EstimatorKind)))
def test_filter_is_linear_in_inputs(seed, alpha, kind):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    aug = augment(model)
    init = GaussianBelief(np.zeros(aug.n), np.eye(aug.n))
    steps = random_inputs(model, rng, 30)
    scaled = [StepInput(alpha * s.u, alpha * s.y, ShaftPowerInput(alpha * s.pe.Pe, s.pe.var)) for s in steps]
    conf = EstimatorConfig(kind, peT=0.0, pPeT=100.0)
    m1, P1, _ = belief_sequence(run_estimator(conf, aug, init, steps))
    m2, P2, _ = belief_sequence(run_estimator(conf, aug, init, scaled))
    np.testing.assert_allclose(m2, alpha * m1, rtol=1e-10, atol=1e-10 * abs(alpha) * np.abs(m1).max())
    np.testing.assert_array_equal(P1, P2)


# ------------------------------------------------------------ error covariance

def test_pes_error_covariance_equals_reported(aug):
    init = np.diag([200.0 ** 2] + [1e-6] * 4)
    sched = covariance_schedule(aug, init, 0.0625, 500)
    cee = cee_recursion_pes(aug, init, sched.gains, 0.0625)
    np.testing.assert_allclose(cee, sched.post_covs, rtol=1e-9, atol=1e-9 * np.abs(sched.post_covs).max())


def test_noise_free_error_covariance_decays():
    A = np.array([[0.8, 0.1], [0.0, 0.7]])
    aug = AugmentedModel(A=A, B=np.zeros((2, 1)), C=np.eye(2), F=np.ones((2, 1)), Q=np.zeros((2, 2)),
                         D=np.zeros((2, 1)), R=np.eye(2), n_x=2, n_theta=0)
    gains = np.zeros((200, 2, 2))           # open loop: error follows the stable dynamics
    cee = cee_recursion_pes(aug, np.eye(2), gains, 0.0)
    norms = np.array([np.abs(P).max() for P in cee])
    assert norms[-1] < 1e-30
    assert np.all(np.diff(norms[5:]) < 0)


def test_error_recursion_validates_shapes(aug):
    with pytest.raises(ValueError):
        cee_recursion_pes(aug, np.eye(5), np.zeros((3, 5, 2)), 0.0)
    with pytest.raises(ValueError):
        cee_recursion_pes(aug, np.eye(4), np.zeros((3, 5, 4)), 0.0)
