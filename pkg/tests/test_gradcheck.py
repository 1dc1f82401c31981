import numpy as np
import pytest

from promptseg import tensor as T
from promptseg.errors import NumericsError
from promptseg.gradcheck import OP_CHECKS, grad_check, run_op_checks
from promptseg.params import Parameter
from promptseg.tensor import Tensor


def test_sum_gradient_is_ones():
    p = Parameter("x", np.random.default_rng(0).standard_normal(6).astype(np.float64))
    report = grad_check(lambda: T.reduce_sum(p.tensor), [p])
    assert report["x"] < 1e-10


def test_linear_random_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = Parameter("x", rng.standard_normal((3, 4)).astype(np.float64))
    w = Parameter("w", rng.standard_normal((4, 2)).astype(np.float64))
    coeff = Tensor(rng.standard_normal((3, 2)))
    report = grad_check(lambda: T.reduce_sum(T.mul(T.matmul(x.tensor, w.tensor), coeff)), [x, w])
    assert max(report.values()) < 1e-4


def test_two_layer_mlp_grad():
    rng = np.random.default_rng(11)
    w1 = Parameter("w1", rng.standard_normal((3, 5)).astype(np.float64))
    b1 = Parameter("b1", rng.standard_normal(5).astype(np.float64))
    w2 = Parameter("w2", rng.standard_normal((5, 1)).astype(np.float64))
    x = Tensor(rng.standard_normal((4, 3)))

    def f():
        return T.reduce_sum(T.mlp(x, [(w1.tensor, b1.tensor), (w2.tensor, None)]))

    report = grad_check(f, [w1, b1, w2])
    assert max(report.values()) < 1e-4


def test_dice_of_sigmoid_grad():
    # dice loss of sigmoid(logits) against a fixed binary mask
    rng = np.random.default_rng(3)
    logits = Parameter("logits", rng.standard_normal((4, 4)).astype(np.float64))
    gt = Tensor((rng.random((4, 4)) > 0.5).astype(np.float64))

    def f():
        p = T.sigmoid(logits.tensor)
        inter = T.reduce_sum(T.mul(p, gt))
        denom = T.reduce_sum(p) + T.reduce_sum(gt)
        return 1.0 - (2.0 * inter + 1e-6) / (denom + 1e-6)

    report = grad_check(f, [logits])
    assert report["logits"] < 1e-4


def test_frozen_parameter_excluded_and_zero_grad():
    rng = np.random.default_rng(5)
    a = Parameter("a", rng.standard_normal(3).astype(np.float64))
    b = Parameter("b", rng.standard_normal(3).astype(np.float64), frozen=True)

    def f():
        return T.reduce_sum(T.mul(a.tensor, b.tensor))

    report = grad_check(f, [a, b])
    assert "b" not in report and "a" in report
    assert b.tensor.grad is None


def test_nonfinite_objective_is_an_error():
    p = Parameter("p", np.array([-1.0]))

    def f():
        with_nan = np.array([np.nan])
        t = Tensor(with_nan)
        T.set_finite_checks(False)
        try:
            return T.reduce_sum(T.mul(p.tensor, t))
        finally:
            T.set_finite_checks(True)

    with pytest.raises(NumericsError):
        grad_check(f, [p])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_registered_op_passes_fd(seed):
    for name, builder in OP_CHECKS.items():
        rng = np.random.default_rng([seed, 99, len(name)])
        objective, params = builder(rng)
        report = grad_check(objective, params, eps=1e-4)
        worst = max(report.values()) if report else 0.0
        assert worst < 1e-4, f"op {name} failed gradcheck: {worst}"


def test_run_op_checks_lists_every_op_once():
    results = run_op_checks(seeds=(0,))
    assert sorted(results) == sorted(OP_CHECKS)
    assert len(results) == len(OP_CHECKS)
