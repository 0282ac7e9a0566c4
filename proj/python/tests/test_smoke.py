import numpy as np
import pytest

import mose_vos as mv


def square(h, w, y0, x0, s):
    m = np.zeros((h, w), np.uint8)
    m[y0:y0 + s, x0:x0 + s] = 1
    return m


def test_metrics():
    a = square(6, 6, 1, 1, 2)
    b = square(6, 6, 2, 2, 2)
    assert mv.jaccard(a, b) == 1 / 7
    assert mv.jaccard(a, a) == 1.0
    gt = square(8, 8, 2, 2, 3)
    shifted = np.roll(gt, 1, axis=1)
    assert mv.boundary_f(shifted, gt, 0) == 0.5
    assert mv.boundary_f(shifted, gt, 1) == 1.0
    assert mv.format_score(mv.j_and_f(0.8007, 0.8683)) == "0.8345"
    assert mv.format_score(mv.j_and_f(0.7509, 0.8206)) == "0.7857"


def test_blur_kernel_and_constant_image():
    for size in (3, 9, 15):
        for angle in (0, 30, 60, 90, 120, 150):
            k = mv.blur_kernel(size, angle)
            assert k.shape == (size, size)
            assert abs(k.sum() - 1) < 1e-12
            assert np.count_nonzero(k) == size
    flat = np.full((3, 10, 12), 0.25)
    assert np.array_equal(mv.motion_blur(flat, 7, 60), flat)


def test_memory_policy_and_schedule():
    assert mv.admit_sequence(3, 1, 6) == [0, 4, 5]
    assert mv.admit_sequence(3, 2, 7) == [0, 4, 6]
    assert mv.admit_sequence(18, 1, 30) == [0] + list(range(13, 30))
    assert mv.lr_at(0) == 1e-4
    assert mv.lr_at(150_000) == 1e-5
    assert mv.lr_at(170_000) == 1e-6


def test_tta_contracts():
    rng = np.random.default_rng(0)
    p = mv.soft_aggregate(rng.uniform(size=(2, 5, 7)))
    assert p.shape == (3, 5, 7)
    assert np.allclose(p.sum(axis=0), 1)
    assert np.array_equal(mv.flip_horizontal(mv.flip_horizontal(p)), p)
    assert np.array_equal(mv.flip_horizontal(p), p[:, :, ::-1])
    fused = mv.fuse_tta([[p], [p]], 5, 7)
    assert np.allclose(fused[0], p)
    small = mv.soft_aggregate(rng.uniform(size=(2, 3, 4)))
    assert np.allclose(mv.fuse_tta([[p], [small]], 5, 7)[0].sum(axis=0), 1, atol=1e-5)


def test_network_segments_a_clip():
    net = mv.Network(seed=1)
    assert net.parameter_count == 393473
    rng = np.random.default_rng(2)
    frames = rng.uniform(size=(3, 3, 32, 32))
    first = np.zeros((32, 32), np.int32)
    first[4:12, 4:12] = 1
    first[20:28, 18:30] = 2
    out = net.segment(frames, first, t_max=2)
    assert out.shape == (3, 32, 32)
    assert np.array_equal(out[0], first)
    assert set(np.unique(out)) <= {0, 1, 2}
    with pytest.raises(ValueError):
        net.segment(frames[:, :2], first)


def test_cli_and_errors(tmp_path):
    assert mv.run_cli(["datagen", "--synthetic", "1", "--frames", "2", "--size", "16",
                       "--out", str(tmp_path / "corpus")]) == 0
    assert (tmp_path / "corpus" / "Annotations" / "synthetic_0000" / "00001.png").exists()
    report = mv.evaluate(str(tmp_path / "corpus" / "Annotations"), str(tmp_path / "corpus"))
    assert report["J&F"] == 1.0
    with pytest.raises(mv.DataError):
        mv.evaluate(str(tmp_path / "missing"), str(tmp_path / "corpus"))
