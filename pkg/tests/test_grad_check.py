import pytest

from dual_branch_sam.exceptions import ConfigurationError
from dual_branch_sam.grad_check import CASES, TOLERANCE, GradCheckResult, check_block, format_table, grad_check_suite


@pytest.mark.parametrize("block", list(CASES))
def test_block_gradients(block):
    result = check_block(block)
    assert result.passed, f"{block}: max rel err {result.max_rel_err:.3e}"


def test_injected_error_fails_only_that_block():
    results = grad_check_suite(["conv2d", "layer_norm", "dice_loss"], inject="layer_norm")
    status = {r.block: r.passed for r in results}
    assert status == {"conv2d": True, "layer_norm": False, "dice_loss": True}
    assert next(r for r in results if r.block == "layer_norm").max_rel_err > 0.1


def test_other_seed_passes():
    assert check_block("fusion_gate", seed=5).passed


def test_unknown_block():
    with pytest.raises(ConfigurationError, match="unknown"):
        grad_check_suite(["conv3d"])
    with pytest.raises(ConfigurationError):
        grad_check_suite(["conv2d"], inject="nope")


def test_result_threshold():
    assert GradCheckResult("x", TOLERANCE / 2).passed
    assert not GradCheckResult("x", TOLERANCE).passed


def test_format_table():
    table = format_table([GradCheckResult("conv2d", 1e-9), GradCheckResult("bce_loss", 0.5)])
    lines = table.splitlines()
    assert lines[0].split() == ["block", "max_rel_err", "status"]
    assert lines[1].split()[0] == "conv2d" and lines[1].endswith("ok")
    assert lines[2].endswith("FAIL")
