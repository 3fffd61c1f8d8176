import numpy as np
import pytest

from inrslam.gradcheck import GROUPS, GradCheckCase, combinations, reference_frame, relative_error


@pytest.fixture(scope="module")
def frame():
    return reference_frame()


def test_sixty_three_combinations():
    assert len(combinations()) == 63
    assert len(set(combinations())) == 63


@pytest.mark.parametrize("combo", combinations(), ids=lambda c: "-".join(c))
def test_one_state_per_combination(combo, frame):
    case = GradCheckCase.build(*combo, frame=frame)
    errs = case.check(np.random.default_rng(7))
    assert set(errs) <= set(GROUPS) and "mlp" in errs and "twist" in errs
    assert ("beta" in errs) == (combo[2] == "density")
    assert ("features" in errs) == (combo[0] != "mlp")
    assert max(errs.values()) <= 1e-4


def test_check_detects_a_wrong_gradient(frame, monkeypatch):
    case = GradCheckCase.build("dense", "coupled", "direct", frame=frame)
    from inrslam import autodiff as ad
    real = ad.backward

    def broken(tape, loss):
        real(tape, loss)
        for block, _ in tape.leaves.values():
            block.grad *= 1.01

    monkeypatch.setattr(ad, "backward", broken)
    errs = case.check(np.random.default_rng(0))
    assert max(errs.values()) > 1e-4


def test_relative_error_scale():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-6) == pytest.approx(1e-6)
    assert relative_error(200.0, 202.0) == pytest.approx(2 / 202)


def _relu_loss(block):
    from inrslam import autodiff as ad
    return lambda: ad.sum(ad.relu(ad.sub(ad.param(block), 1.0)))


def test_kink_inside_window_shrinks_step():
    from inrslam.autodiff import ParameterBlock
    b = ParameterBlock("x", np.array([1.0 + 3e-7]))  # kink at 1.0 lies within h = 1e-6
    d = [np.ones(1)]
    assert GradCheckCase._directional_error(_relu_loss(b), [b], d, 1.0, 1e-6) < 1e-6
    assert b.values[0] == 1.0 + 3e-7  # values restored


def test_wrong_gradient_in_smooth_window_is_not_rescued():
    from inrslam.autodiff import ParameterBlock
    b = ParameterBlock("x", np.array([2.0]))
    assert GradCheckCase._directional_error(_relu_loss(b), [b], [np.ones(1)], 1.001, 1e-6) > 9e-4
