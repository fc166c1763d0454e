import pickle
from pathlib import Path

import aiofiles.os as aioos
import pytest
import pytest_asyncio

from ssep_tree_lib import cli
from ssep_tree_lib.config import ExperimentConfig
from ssep_tree_lib.observables import LocalFunction, mean_under_nu_p
from ssep_tree_lib.runner import TRUNCATION_STREAM, CheckResult, ExperimentRunner, green_check, verify_suite, xi_batch
from ssep_tree_lib.utils import CapExceededError, async_read_text, async_rmtree, parse_csv

TEST_ROOT_PATH = Path("/tmp/ssep_tree_test_dir")


def small_config(**overrides) -> ExperimentConfig:
    config = {
        "tree": {"degree": 2, "radius": 3},
        "schedule": {"t_grid": [1.0, 2.0], "batch_size": 2, "duality_reps": 40},
        "replicates": 6,
        "seed": 99,
    }
    config.update(overrides)
    return ExperimentConfig.from_dict(config)


@pytest_asyncio.fixture  # type: ignore
async def teardown():
    if await aioos.path.exists(TEST_ROOT_PATH):
        await async_rmtree(TEST_ROOT_PATH)
    await aioos.makedirs(TEST_ROOT_PATH)
    yield TEST_ROOT_PATH
    await async_rmtree(TEST_ROOT_PATH)


def test_check_result_line():
    assert CheckResult("residual", 1e-12, 1e-8, True).line() == "PASS residual: 1.000e-12 (threshold 1.000e-08)"
    assert CheckResult("residual", 1.0, 1e-8, False).line().startswith("FAIL residual")


def test_verify_suite():
    checks = verify_suite(5)
    assert len(checks) == 7
    assert all(check.passed for check in checks), [c.line() for c in checks if not c.passed]


async def test_verify(teardown: Path):
    runner = ExperimentRunner(small_config(), teardown)
    assert await runner.run("verify") == 0
    assert all(line.startswith("PASS") for line in runner.lines)
    schema, frame = parse_csv(await async_read_text(teardown / "verify" / "checks.csv"))
    assert schema == "ssep-tree checks v1"
    assert len(frame) == 7
    assert await aioos.path.exists(teardown / "verify" / "resolved_config.yaml")


async def test_simulate_is_independent_of_workers(teardown: Path):
    config = small_config()
    single = ExperimentRunner(config, teardown / "single", workers=1)
    double = ExperimentRunner(config, teardown / "double", workers=2)
    assert await single.run("simulate") == 0
    assert await double.run("simulate") == 0

    first = await async_read_text(teardown / "single" / "simulate" / "xi.csv")
    second = await async_read_text(teardown / "double" / "simulate" / "xi.csv")
    assert first == second
    schema, frame = parse_csv(first)
    assert schema == "ssep-tree xi v1"
    assert len(frame) == 12
    assert sorted(set(frame["path_id"])) == [str(i) for i in range(6)]
    assert frame["seed"].iloc[0] == "99:0"

    resolved = ExperimentConfig.from_file(teardown / "single" / "simulate" / "resolved_config.yaml")
    assert resolved == config


async def test_simulate_resolves_auto_radius(teardown: Path):
    config = small_config(tree={"degree": 2, "radius": "auto"}, schedule={"t_grid": [0.5]}, replicates=2)
    assert await ExperimentRunner(config, teardown).run("simulate") == 0
    resolved = ExperimentConfig.from_file(teardown / "simulate" / "resolved_config.yaml")
    assert resolved.tree.radius == config.radius_for(0.5)


async def test_decompose(teardown: Path):
    config = small_config(
        tree={"degree": 2, "radius": 1},
        schedule={"decompose_t": 2.0, "batch_size": 10},
        replicates=20,
        mdp={"c_grid": [0.0, 0.25]},
    )
    runner = ExperimentRunner(config, teardown)
    code = await runner.run("decompose")
    assert code in (0, 1)
    assert runner.lines[0].startswith("PASS pathwise decomposition residual")
    assert any("exponential martingale mean is 1 at c=0.0" in line and line.startswith("PASS") for line in runner.lines)
    schema, frame = parse_csv(await async_read_text(teardown / "decompose" / "decomposition.csv"))
    assert schema == "ssep-tree decomposition v1"
    assert len(frame) == 20
    assert max(abs(float(r)) for r in frame["residual"]) < 1e-8


async def test_sigma(teardown: Path):
    config = small_config(schedule={"t_grid": [1.0], "duality_reps": 40}, replicates=40)
    runner = ExperimentRunner(config, teardown)
    assert await runner.run("sigma") in (0, 1)
    schema, frame = parse_csv(await async_read_text(teardown / "sigma" / "estimates.csv"))
    assert schema == "ssep-tree estimates v1"
    assert frame["method"].tolist() == ["empirical", "duality", "exact"]
    assert await aioos.path.exists(teardown / "sigma" / "checks.csv")


async def test_center(teardown: Path):
    config = small_config(
        tree={"degree": 2, "radius": 1},
        function={"kind": "table", "sites": ["0"], "table": {"0": 1.0, "1": 3.0}},
        p=0.25,
    )
    runner = ExperimentRunner(config, teardown)
    assert await runner.run("center") == 0
    F = await LocalFunction.async_from_file(teardown / "center" / "function.txt", 2)
    assert mean_under_nu_p(F, 0.25) == pytest.approx(0.0)
    assert F.table.tolist() == pytest.approx([-0.5, 1.5])

    with pytest.raises(ValueError):
        await runner.run("simulate")
    with pytest.raises(ValueError):
        await runner.run("bogus")


def test_cli_exit_codes(tmp_path: Path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("tree:\n  degree: 1\n")
    assert cli.main(["verify", str(bad), "--output-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["verify", str(tmp_path / "missing.yaml"), "--output-dir", str(tmp_path)]) == cli.EXIT_CONFIG

    huge = tmp_path / "huge.yaml"
    ExperimentConfig.from_dict({"replicates": 2}).to_file(huge)
    assert cli.main(["decompose", str(huge), "--output-dir", str(tmp_path)]) == cli.EXIT_CAP

    good = tmp_path / "good.yaml"
    small_config().to_file(good)
    assert cli.main(["verify", str(good), "--output-dir", str(tmp_path), "--workers", "1"]) == cli.EXIT_OK
    assert cli.main(["verify", str(good), "--workers", "0"]) == cli.EXIT_CONFIG

    malformed = tmp_path / "malformed.yaml"
    malformed.write_text("tree: {degree: 2\n")
    assert cli.main(["verify", str(malformed), "--output-dir", str(tmp_path)]) == cli.EXIT_CONFIG

    listing = tmp_path / "listing.yaml"
    listing.write_text("- 1\n- 2\n")
    assert cli.main(["verify", str(listing), "--output-dir", str(tmp_path)]) == cli.EXIT_CONFIG

    capped = tmp_path / "capped.yaml"
    small_config(caps={"tuple_states": 5}, replicates=4).to_file(capped)
    for workers in ("1", "2"):
        assert cli.main(["decompose", str(capped), "--output-dir", str(tmp_path), "--workers", workers]) == cli.EXIT_CAP


def test_cap_exceeded_error_survives_pickling():
    error = pickle.loads(pickle.dumps(CapExceededError("ball vertices", 586000, 200000)))
    assert isinstance(error, CapExceededError)
    assert (error.what, error.required, error.cap) == ("ball vertices", 586000, 200000)
    assert str(error) == "ball vertices would need 586000 states but the configured cap is 200000"


async def test_cap_exceeded_in_worker_pool(teardown: Path):
    config = small_config(caps={"tuple_states": 5}, replicates=4)
    runner = ExperimentRunner(config, teardown, workers=2)
    with pytest.raises(CapExceededError):
        await runner.run("decompose")


def test_truncation_rerun_uses_its_own_streams():
    config = small_config()
    replicate_records = xi_batch(config, [2.0], None, 0, 3)
    rerun_records = xi_batch(config, [2.0], TRUNCATION_STREAM, 0, 3)
    assert xi_batch(config, [2.0], TRUNCATION_STREAM, 0, 3) == rerun_records
    assert [r.seed for r in replicate_records] != [r.seed for r in rerun_records]
    assert [r.xi for r in replicate_records] != [r.xi for r in rerun_records]


@pytest.mark.parametrize("d", [2, 3])
def test_green_check(d):
    check = green_check(d, 2000, 5)
    assert check.passed, check.line()


async def test_heat(teardown: Path):
    config = small_config(schedule={"t_grid": [1.0], "duality_reps": 1000}, replicates=2000)
    runner = ExperimentRunner(config, teardown)
    assert await runner.run("heat") == 0
    assert all(line.startswith("PASS") for line in runner.lines)
    schema, frame = parse_csv(await async_read_text(teardown / "heat" / "heat.csv"))
    assert schema == "ssep-tree heat v1"
    assert len(frame) == 8
    assert sorted(set(frame["degree"])) == ["2", "3"]
