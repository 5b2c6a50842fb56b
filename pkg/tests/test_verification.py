import pytest

from app.core.numerics.gradcheck import gradient_check
from app.core.numerics.rng import RngStream
from app.services.verification import OPERATIONS, TOLERANCE, run_suite, well_conditioned


@pytest.mark.parametrize("name", list(OPERATIONS))
def test_operation_gradients(name):
    root = RngStream(123)
    for i in range(5):
        loss, params = well_conditioned(OPERATIONS[name], root.spawn(i))
        assert gradient_check(loss, params) <= TOLERANCE


def test_instances_are_reproducible():
    loss_a, params_a = well_conditioned(OPERATIONS["snp_log_prob"], RngStream(9))
    loss_b, params_b = well_conditioned(OPERATIONS["snp_log_prob"], RngStream(9))
    assert loss_a(params_a)[0] == loss_b(params_b)[0]


def test_suite_subset():
    reports = run_suite(instances=3, seed=1, operations=["mlp_backward", "ratio_loss"])
    assert [r.operation for r in reports] == ["mlp_backward", "ratio_loss"]
    assert all(r.passed and r.instances == 3 for r in reports)


@pytest.mark.slow
def test_full_suite():
    reports = run_suite(instances=20, seed=0)
    assert len(reports) == len(OPERATIONS)
    failed = [(r.operation, r.max_error) for r in reports if not r.passed]
    assert failed == []
