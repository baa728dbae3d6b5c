"""Finite-difference suite over every primitive and training loss"""

import numpy as np
import pytest

import dcml_tensor as T
from dcml_gradcheck import check_gradients, gradcheck_suite, numeric_gradient, relative_error


@pytest.fixture(scope="module")
def clean_report():
    return gradcheck_suite(seed=0)


def test_fresh_suite_passes(clean_report):
    assert clean_report.passed, clean_report.to_text()


def test_every_primitive_has_an_item(clean_report):
    names = {i.name.split('[')[0] for i in clean_report.items}
    assert set(T.PRIMITIVES) <= names
    conv = [i.name for i in clean_report.items if i.name.startswith("conv2d")]
    assert conv == ["conv2d[k1s1]", "conv2d[k3s1]", "conv2d[k3s2]", "conv2d[k7s1]"]


def test_losses_are_covered(clean_report):
    for name in ("fusion_gate", "loss_infonce", "loss_deaging_rho", "loss_identity",
                 "loss_deaging_total", "loss_deaging_spread", "loss_race"):
        assert clean_report.item(name).passed


def test_report_is_deterministic(clean_report):
    assert gradcheck_suite(seed=0).to_dict() == clean_report.to_dict()


def test_corrupted_backward_fails_only_that_item(monkeypatch):
    original = T.PRIMITIVES['exp']

    def broken_exp(arrays, attrs):
        out, backward_fn = original(arrays, attrs)
        return out, lambda g: [2.0 * grad for grad in backward_fn(g)]

    monkeypatch.setitem(T.PRIMITIVES, 'exp', broken_exp)
    report = gradcheck_suite(seed=0)
    assert report.failures == ["exp"]
    assert not report.passed
    assert "FAIL" in report.to_text()


def test_missing_case_is_a_failure(monkeypatch):
    monkeypatch.setitem(T.PRIMITIVES, 'cube', lambda arrays, attrs: (arrays[0] ** 3, lambda g: [g]))
    report = gradcheck_suite(seed=1)
    assert report.failures == ["cube"]
    assert report.item("cube").error == "no gradcheck case"


def test_raising_function_becomes_failed_item():
    x = T.Tensor([1.0])
    item = check_gradients("boom", lambda: T.log(T.neg(x)), [x])
    assert not item.passed and item.error.startswith("NonFiniteError")


def test_numeric_gradient_of_square(f64):
    x = T.Tensor([1.0, -2.0, 0.5])
    grad = numeric_gradient(lambda: T.sum_(T.mul(x, x)), x, h=1e-5)
    assert np.allclose(grad, [2.0, -4.0, 1.0], atol=1e-8)
    assert np.array_equal(x.data, [1.0, -2.0, 0.5])


def test_relative_error_scale():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
