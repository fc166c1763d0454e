import numpy as np
import pytest

from ssep_tree_lib.graphical import Configuration, EventLog, RngStream, evolve, sample_events, sample_nu_p
from ssep_tree_lib.observables import (
    LocalFunction,
    XiRecord,
    accumulate_xi,
    bits_to_index,
    center,
    evaluate,
    index_to_bits,
    mean_under_nu_p,
    occupation_function,
    product_function,
    render_xi_csv,
    require_centered,
)
from ssep_tree_lib.tree import VertexAddr, build_ball

ROOT = VertexAddr.root(2)
CHILD = VertexAddr((0,), 2)


def test_bits():
    assert bits_to_index([1, 0, 1]) == 5
    assert index_to_bits(5, 3) == (1, 0, 1)
    assert index_to_bits(1, 2) == (0, 1)


def test_local_function():
    F = LocalFunction.from_mapping([ROOT, CHILD], {"00": 0, "01": 1, "10": 2, (1, 1): 3})
    assert F.table.tolist() == [0, 1, 2, 3]
    assert F.m == 2
    assert F.degree == 2
    assert F.sup_norm == 3
    assert F.value([1, 0]) == 2
    assert (F - F).is_zero()
    assert (2 * F).table.tolist() == [0, 2, 4, 6]
    assert F + F == F * 2

    with pytest.raises(ValueError):
        LocalFunction([ROOT, ROOT], [0, 1, 2, 3])
    with pytest.raises(ValueError):
        LocalFunction([ROOT], [0, 1, 2])
    with pytest.raises(ValueError):
        LocalFunction([], [0])
    with pytest.raises(ValueError):
        LocalFunction([ROOT], [0, float("nan")])
    with pytest.raises(ValueError):
        LocalFunction.from_mapping([ROOT], {"0": 1})
    with pytest.raises(ValueError):
        F + occupation_function(ROOT, 0.5)


def test_local_function_text(tmp_path):
    F = LocalFunction([ROOT, VertexAddr((2, 1), 2)], [0.25, -1.0, 0.0, 2.5])
    text = F.to_text()
    assert text.splitlines()[0] == "sites: . 2.1"
    assert LocalFunction.from_text(text, 2) == F

    path = tmp_path / "function.txt"
    F.to_file(path)
    assert LocalFunction.from_file(path, 2) == F

    with pytest.raises(ValueError):
        LocalFunction.from_text("0,1\n1,2\n", 2)
    with pytest.raises(ValueError):
        LocalFunction.from_text("sites: .\n0,1\n0,2\n1,3\n", 2)


async def test_local_function_async_file(tmp_path):
    F = occupation_function(CHILD, 0.3)
    path = tmp_path / "nested" / "function.txt"
    await F.async_to_file(path)
    assert await LocalFunction.async_from_file(path, 2) == F
    with pytest.raises(FileNotFoundError):
        await LocalFunction.async_from_file(tmp_path / "missing.txt", 2)


def test_centering():
    F = occupation_function(ROOT, 0.3)
    assert F.table.tolist() == pytest.approx([-0.3, 0.7])
    assert mean_under_nu_p(F, 0.3) == pytest.approx(0.0)
    require_centered(F, 0.3)
    with pytest.raises(ValueError):
        require_centered(F, 0.5)

    G = product_function([ROOT, CHILD], 0.5)
    assert G.table.tolist() == pytest.approx([-0.25, -0.25, -0.25, 0.75])
    assert mean_under_nu_p(center(LocalFunction([ROOT], [1.0, 3.0]), 0.25), 0.25) == pytest.approx(0.0)


def test_evaluate():
    ball = build_ball(2, 1)
    eta = Configuration.with_particles(ball, [CHILD])
    F = LocalFunction([ROOT, CHILD], [0, 1, 2, 3])
    assert evaluate(F, eta) == 1
    with pytest.raises(ValueError):
        evaluate(LocalFunction([VertexAddr((0, 0), 2)], [0, 1]), eta)


def test_accumulate_xi():
    ball = build_ball(2, 1)
    eta0 = Configuration.with_particles(ball, [ROOT])
    log = EventLog(ball, 3.0, np.array([0.5, 1.0, 2.0]), np.array([0, 1, 0]))
    F = occupation_function(ROOT, 0.5)
    # the particle leaves the root at 0.5 and comes back at 2.0
    assert accumulate_xi(eta0, log, F, 0.0).xi == 0.0
    assert accumulate_xi(eta0, log, F, 0.5).xi == pytest.approx(0.25)
    assert accumulate_xi(eta0, log, F, 3.0).xi == pytest.approx(0.25 - 0.75 + 0.5)

    records = [accumulate_xi(eta0, log, F, t, path_id=i) for i, t in enumerate((1.0, 3.0))]
    assert records[1] == XiRecord(t=3.0, xi=pytest.approx(0.0), path_id=1, seed="")
    csv = render_xi_csv(records)
    assert csv.splitlines()[0] == "# ssep-tree xi v1"
    assert csv.splitlines()[1] == "path_id,t,xi,seed"


def test_xi_is_additive_over_time():
    ball = build_ball(2, 3)
    F = product_function([ROOT, CHILD], 0.4)
    for replicate in range(5):
        rng = RngStream.for_replicate(31, replicate)
        eta0 = sample_nu_p(ball, 0.4, rng)
        log = sample_events(ball, 6.0, rng)
        for s in (0.0, 1.3, 4.0, 6.0):
            head = accumulate_xi(eta0, log, F, s).xi
            tail = accumulate_xi(evolve(eta0, log, s), log.tail(s), F, 6.0).xi
            assert head + tail == pytest.approx(accumulate_xi(eta0, log, F, 6.0).xi, abs=1e-9)
