import math

import numpy as np
import pytest

from ssep_tree_lib.graphical import Configuration, EventLog, RngStream, sample_events, sample_nu_p
from ssep_tree_lib.martingale import (
    ExactGProvider,
    MCGProvider,
    active_edges,
    apply_generator,
    carre_du_champ,
    decompose_path,
    exp_martingale_check,
    exp_martingale_path,
    exp_martingale_samples,
    martingale_moments,
    quadratic_variation,
    render_decomposition_csv,
    verify_generator_identity,
)
from ssep_tree_lib.observables import accumulate_xi, evaluate, occupation_function, product_function
from ssep_tree_lib.tree import VertexAddr, build_ball

ROOT = VertexAddr.root(2)


@pytest.fixture
def small_ball():
    return build_ball(2, 1)


def test_generator_and_carre_du_champ(small_ball):
    F = occupation_function(ROOT, 0.5)
    eta = Configuration.with_particles(small_ball, [ROOT])
    assert active_edges(eta).tolist() == [0, 1, 2]
    assert active_edges(Configuration.empty(small_ball)).tolist() == []

    # every edge moves the particle off the root
    assert apply_generator(small_ball, lambda e: evaluate(F, e), eta) == pytest.approx(-3.0)
    assert carre_du_champ(small_ball, lambda e: evaluate(F, e), eta) == pytest.approx(3.0)

    leaf = Configuration.with_particles(small_ball, [VertexAddr((1,), 2)])
    assert apply_generator(small_ball, lambda e: evaluate(F, e), leaf) == pytest.approx(1.0)

    with pytest.raises(ValueError):
        apply_generator(build_ball(2, 2), lambda e: 0.0, eta)


def test_generator_identity_exhaustive(small_ball):
    F = occupation_function(ROOT, 0.5)
    for lam in (0.5, 1.0):
        assert verify_generator_identity(small_ball, F, lam) < 1e-10

    ball = build_ball(2, 2)
    G = product_function([ROOT, VertexAddr((0,), 2)], 0.5)
    rng = RngStream(31)
    samples = [sample_nu_p(ball, 0.5, rng.spawn(i)) for i in range(100)]
    assert verify_generator_identity(ball, G, 0.3, samples) < 1e-10


def test_exact_provider_caches(small_ball):
    F = occupation_function(ROOT, 0.5)
    provider = ExactGProvider(small_ball, F, 1.0)
    eta = Configuration.with_particles(small_ball, [ROOT])
    assert provider.exact
    assert provider.G(eta) == pytest.approx(-0.1)
    diffs = provider.differences(eta)
    assert diffs is provider.differences(eta)
    assert len(diffs) == small_ball.n_edges
    assert np.all(diffs < 0)


def test_mc_provider(small_ball):
    F = occupation_function(ROOT, 0.5)
    provider = MCGProvider(F, 1.0, 2000, RngStream(17))
    eta = Configuration.with_particles(small_ball, [ROOT])
    assert not provider.exact
    assert provider.G(eta) == provider.G(eta)
    assert abs(provider.G(eta) + 0.1) < 0.05
    assert verify_generator_identity(small_ball, F, 1.0, [eta], provider) < 0.3


def test_decompose_hand_built_path(small_ball):
    F = occupation_function(ROOT, 0.5)
    provider = ExactGProvider(small_ball, F, 1.0)
    eta0 = Configuration.with_particles(small_ball, [ROOT])
    log = EventLog(small_ball, 3.0, np.array([0.5, 1.0, 2.0]), np.array([0, 1, 0]))
    record = decompose_path(eta0, log, F, 1.0, 3.0, provider, path_id=4)
    assert record.path_id == 4
    assert record.lam == 1.0
    assert record.xi == pytest.approx(accumulate_xi(eta0, log, F, 3.0).xi)
    assert abs(record.residual) < 1e-12
    assert record.J > 0
    assert quadratic_variation(eta0, log, F, 1.0, 3.0, provider) == record.J


def test_decompose_random_paths():
    ball = build_ball(2, 2)
    F = product_function([ROOT, VertexAddr((2,), 2)], 0.5)
    provider = ExactGProvider(ball, F, 0.5)
    records = []
    for i in range(100):
        stream = RngStream.for_replicate(5, i)
        eta0 = sample_nu_p(ball, 0.5, stream)
        log = sample_events(ball, 5.0, stream)
        record = decompose_path(eta0, log, F, 0.5, 5.0, provider, i)
        assert abs(record.residual) < 1e-8
        assert record.xi == pytest.approx(accumulate_xi(eta0, log, F, 5.0).xi, abs=1e-9)
        records.append(record)

    moments = martingale_moments(records)
    assert abs(moments["mean_M"]) < 4 * moments["se_M"] + 1e-9
    assert abs(moments["mean_M2_minus_J"]) < 4 * moments["se_M2_minus_J"] + 1e-9

    csv = render_decomposition_csv(records).splitlines()
    assert csv[0] == "# ssep-tree decomposition v1"
    assert csv[1] == "path_id,t,lambda,xi,M,remainder,J,residual"
    assert len(csv) == 102

    with pytest.raises(ValueError):
        martingale_moments(records[:1])


def test_decompose_rejects_mismatches(small_ball):
    F = occupation_function(ROOT, 0.5)
    provider = ExactGProvider(small_ball, F, 1.0)
    eta0 = Configuration.empty(small_ball)
    log = sample_events(small_ball, 1.0, RngStream(1))
    with pytest.raises(ValueError):
        decompose_path(eta0, log, F, 0.5, 1.0, provider)
    with pytest.raises(ValueError):
        decompose_path(eta0, log, occupation_function(VertexAddr((0,), 2), 0.5), 1.0, 1.0, provider)
    with pytest.raises(ValueError):
        decompose_path(eta0, log, F, 1.0, 2.0, provider)
    with pytest.raises(ValueError):
        decompose_path(Configuration.empty(build_ball(2, 2)), log, F, 1.0, 1.0, provider)


def test_exp_martingale(small_ball):
    F = occupation_function(ROOT, 0.5)
    samples = exp_martingale_samples(small_ball, F, 0.0, 4.0, 2.0, 20, RngStream(3))
    assert samples == [1.0] * 20
    assert exp_martingale_check(small_ball, F, 0.0, 4.0, 2.0, 20, RngStream(3)) == (1.0, 0.0)

    mean, std_error = exp_martingale_check(small_ball, F, 0.5, 4.0, 2.0, 2000, RngStream(4))
    assert abs(mean - 1.0) < 4 * std_error + 1e-3

    provider = ExactGProvider(small_ball, F, 1.0)
    eta0 = Configuration.with_particles(small_ball, [ROOT])
    log = EventLog(small_ball, 1.0, np.array([]), np.array([], dtype=np.int64))
    # no events: the exponent is the bracket of the initial state times t
    bracket = float(np.expm1(0.3 * provider.differences(eta0)).sum())
    assert exp_martingale_path(eta0, log, 1.0, 0.3, provider) == pytest.approx(math.exp(-bracket))

    with pytest.raises(OverflowError):
        exp_martingale_samples(small_ball, F, 1e4, 4.0, 2.0, 2, RngStream(3))
    # a harmless theta, but the bracket alone could reach 3 edges times t
    with pytest.raises(OverflowError):
        exp_martingale_samples(small_ball, F, 0.1, 300.0, 2.0, 2, RngStream(3))
    with pytest.raises(ValueError):
        exp_martingale_check(small_ball, F, 0.5, 4.0, 2.0, 1, RngStream(3))
