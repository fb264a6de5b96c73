import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestseg.core import MNI, BinaryMask, Grid, LabelMap, Volume, centered_affine
from nestseg.preprocess import (
    PreprocessConfig,
    PreprocessError,
    PreprocessRecord,
    ToolAdapter,
    ToolError,
    apply_affine_resample,
    normalize_intensity,
    preprocess,
    replay,
    run_adapter,
)

TOOL = str(Path(__file__).parent / "tools" / "mock_tool.py")


def mock(mode, kind="volume", timeout=60.0):
    cmd = [sys.executable, TOOL, mode, "{input}", "{output}"] + (["{affine}"] if kind == "registration" else [])
    return ToolAdapter(f"mock-{mode}", cmd, timeout, kind)


def _volume(shape=(12, 10, 8), seed=0):
    data = np.random.default_rng(seed).uniform(0, 500, shape).astype(np.float32)
    return Volume(data, centered_affine(shape))


# ---------------------------------------------------------------- normalisation


def test_two_value_volume_maps_to_unit_range():
    data = np.zeros((4, 4, 4), np.float32)
    data[:2] = 100
    out, params = normalize_intensity(Volume(data, np.eye(4)))
    assert set(np.unique(out.data)) == {0.0, 1.0}
    assert (params.low_value, params.high_value) == (0.0, 100.0)


def test_constant_volume_is_an_error():
    with pytest.raises(ValueError, match="constant"):
        normalize_intensity(Volume(np.full((3, 3, 3), 7.0), np.eye(4)))


def test_unit_range_volume_is_a_fixed_point():
    data = np.random.default_rng(0).uniform(size=(6, 6, 6)).astype(np.float32)
    data.flat[0], data.flat[1] = 0.0, 1.0
    out, _ = normalize_intensity(Volume(data, np.eye(4)), 0.0, 100.0)
    np.testing.assert_allclose(out.data[0], data, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 5.0), st.floats(95.0, 100.0))
def test_normalisation_is_idempotent(seed, lo, hi):
    data = np.random.default_rng(seed).gamma(2.0, 50.0, size=(8, 8, 8)).astype(np.float32)
    once, _ = normalize_intensity(Volume(data, np.eye(4)), lo, hi)
    twice, _ = normalize_intensity(once, lo, hi)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


# ---------------------------------------------------------------- resampling


def test_identity_resample_is_exact_copy():
    v = _volume()
    out = apply_affine_resample(v, np.eye(4), v.grid)
    np.testing.assert_array_equal(out.data, v.data)


def test_integer_translation_shifts_interior():
    v = _volume()
    t = np.eye(4)
    t[:3, 3] = [2, -1, 1]
    out = apply_affine_resample(v, t, v.grid)
    np.testing.assert_array_equal(out.data[0, 2:, :-1, 1:], v.data[0, :-2, 1:, :-1])


def test_scaling_constant_volume_stays_constant():
    v = Volume(np.full((10, 10, 10), 3.5, np.float32), np.eye(4))
    target = Grid((5, 5, 5), np.eye(4))
    out = apply_affine_resample(v, np.diag([2.0, 2.0, 2.0, 1.0]), target)
    np.testing.assert_allclose(out.data, 3.5, rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_nearest_never_creates_labels(seed):
    rng = np.random.default_rng(seed)
    ids = rng.choice(np.arange(1, 133), size=4, replace=False)
    lab = LabelMap(rng.choice(np.r_[0, ids], size=(9, 9, 9)), np.eye(4))
    angle = rng.uniform(0, np.pi)
    rot = np.eye(4)
    rot[:2, :2] = [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
    rot[:3, 3] = rng.uniform(-2, 2, 3)
    out = apply_affine_resample(lab, rot, Grid((11, 7, 9), np.diag([0.7, 1.3, 1.0, 1.0])))
    assert set(np.unique(out.data)) <= set(np.unique(lab.data)) | {0}


def test_trilinear_on_labels_and_singular_affine_are_errors():
    lab = LabelMap(np.zeros((3, 3, 3)), np.eye(4))
    with pytest.raises(ValueError, match="nearest"):
        apply_affine_resample(lab, np.eye(4), lab.grid, "trilinear")
    with pytest.raises(ValueError, match="invertible"):
        apply_affine_resample(_volume(), np.zeros((4, 4)), MNI.grid)
    mask = BinaryMask(np.ones((3, 3, 3)), np.eye(4), "PFV")
    assert apply_affine_resample(mask, np.eye(4), mask.grid).data.dtype == np.uint8


# ---------------------------------------------------------------- adapters


def test_passthrough_needs_permission():
    with pytest.raises(ToolError, match="n4"):
        run_adapter(ToolAdapter("n4"), _volume())
    rec = PreprocessRecord()
    v = _volume()
    out, _ = run_adapter(ToolAdapter("n4"), v, rec, allow_passthrough=True)
    assert out is v and rec.steps[0].mode == "passthrough"


def test_missing_binary_names_the_tool():
    with pytest.raises(ToolError, match="no-such-n4-binary"):
        run_adapter(ToolAdapter("n4", ["no-such-n4-binary", "{input}", "{output}"]), _volume())


def test_mock_bias_adapter_changes_output_and_is_recorded():
    rec = PreprocessRecord()
    v = _volume()
    out, _ = run_adapter(mock("bias"), v, rec)
    assert rec.step_names() == ["mock-bias"] and rec.steps[0].returncode == 0
    assert out.shape == v.shape and not np.allclose(out.data, v.data)
    np.testing.assert_array_equal(out.affine, v.affine)


def test_adapter_failures():
    with pytest.raises(ToolError, match="exited with 3"):
        run_adapter(mock("fail"), _volume())
    with pytest.raises(ToolError, match="timed out"):
        run_adapter(mock("sleep", timeout=0.5), _volume())
    with pytest.raises(ToolError, match="changed the grid"):
        run_adapter(mock("reshape"), _volume())


def test_registration_adapter_returns_affine():
    _, aff = run_adapter(mock("register", "registration"), _volume())
    np.testing.assert_array_equal(aff[:3, 3], [3.0, -2.0, 1.0])


# ---------------------------------------------------------------- pipeline


def test_all_passthrough_is_normalise_then_resample():
    v = _volume((20, 20, 20))
    out, rec = preprocess(v, PreprocessConfig(), allow_passthrough=True)
    assert out.shape == (172, 220, 156)
    norm, _ = normalize_intensity(v)
    expected = apply_affine_resample(norm, np.eye(4), MNI.grid, "trilinear")
    np.testing.assert_array_equal(out.data, expected.data)
    assert rec.step_names() == ["n4", "normalize", "register", "resample"]
    np.testing.assert_array_equal(rec.forward, np.eye(4))


def test_skull_strip_step_and_flag():
    cfg = PreprocessConfig(skull_strip=mock("identity"), skull_stripped=True)
    out, rec = preprocess(_volume((20, 20, 20)), cfg, allow_passthrough=True)
    assert rec.step_names()[0] == "skull_strip" and rec.skull_stripped and out.skull_stripped


def test_replay_is_bit_identical_with_mocked_tools():
    cfg = PreprocessConfig(n4=mock("bias"), register=mock("register", "registration"))
    v = _volume((20, 20, 20))
    out, rec = preprocess(v, cfg)
    again = replay(v, PreprocessRecord.from_dict(rec.to_dict()))
    np.testing.assert_array_equal(again.data, out.data)
    np.testing.assert_array_equal(rec.forward[:3, 3], [3.0, -2.0, 1.0])


def test_failure_carries_partial_record():
    cfg = PreprocessConfig(n4=mock("bias"), register=mock("fail", "registration"))
    with pytest.raises(PreprocessError, match="register") as err:
        preprocess(_volume((20, 20, 20)), cfg)
    assert err.value.record.step_names()[:2] == ["n4", "normalize"]
