import pytest

from speq.gradcheck import run_all, registered_ops

RESULTS = run_all(seed=0)


@pytest.mark.parametrize("result", RESULTS, ids=[r.name for r in RESULTS])
def test_gradient_check(result):
    assert result.passed, f"{result.name}: relative error {result.rel_error:.2e}"


def test_registry_covers_core_ops():
    ops = set(registered_ops())
    for name in ("matmul", "conv2d_s1", "relu6", "maxpool2d", "batchnorm_batch", "softmax_t1", "kl_loss", "cs_loss",
                 "speq_loss_cs", "speq_kd_loss"):
        assert name in ops
