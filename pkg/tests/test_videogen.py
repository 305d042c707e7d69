import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prism import videogen as vg
from prism.rng import stream


def _small(seed=0, train=4, test=2):
    return vg.generate(vg.default_programs(), train, test, (8, 16, 16, 3), seed)


def test_linear_translate_is_an_arithmetic_sequence():
    prog = vg.MotionProgram(0, "linear-translate", velocity=(1.0, 0.0))
    centers, _ = vg.trajectory(prog, 8, 16, 16, stream(0, "t"))
    t = np.arange(8.0)
    np.testing.assert_array_equal(centers[:, 0], centers[0, 0] + 1.0 * t)
    np.testing.assert_array_equal(centers[:, 1], centers[0, 1])
    np.testing.assert_allclose(np.diff(centers[:, 0]), 1.0, rtol=0, atol=1e-12)


def _simulate_bounce(x0, v, T, wall):
    # Step-by-step reflection, written independently of the vectorised law.
    xs, x, d = [], x0, v
    for _ in range(T):
        xs.append(x)
        x += d
        if x > wall:
            x, d = 2 * wall - x, -d
        elif x < 0:
            x, d = -x, -d
    return np.array(xs)


def test_bounce_matches_simulation_with_one_direction_change():
    prog = vg.program_by_name("bounce", 2)
    for seed in range(20):
        centers, _ = vg.trajectory(prog, 8, 16, 16, stream(seed, "b"))
        x = centers[:, 0]
        np.testing.assert_allclose(x, _simulate_bounce(x[0], prog.velocity[0], 8, 15.0), atol=1e-9)
        slopes = np.sign(np.diff(x))
        assert np.count_nonzero(np.diff(slopes[slopes != 0])) == 1


def test_generation_is_deterministic():
    a, b = _small(3), _small(3)
    assert vg.to_bytes(a) == vg.to_bytes(b)
    assert vg.to_bytes(a) != vg.to_bytes(_small(4))


def test_train_and_test_differ():
    ds = _small()
    assert not np.array_equal(ds.train[:, :2], ds.test[:, :2])


def test_nonlinearity_ranks():
    ranks = {p.name: p.nonlinearity_rank for p in vg.default_programs()}
    assert ranks["translate-right"] == ranks["translate-left"] == 0
    assert min(ranks[n] for n in ("bounce", "zigzag", "orbit", "hold-jump")) >= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**40), st.sampled_from(vg.PROGRAM_NAMES))
def test_frames_in_range_and_sprite_inside(seed, name):
    prog = vg.program_by_name(name, 0)
    rng = stream(seed, "h")
    centers, radii = vg.trajectory(prog, 8, 16, 16, rng)
    assert np.all(centers >= 0) and np.all(centers[:, 0] <= 15) and np.all(centers[:, 1] <= 15)
    video = vg.render_video(prog, (8, 16, 16, 3), stream(seed, "v"))
    assert video.min() >= 0 and video.max() <= 1
    assert np.all(video.reshape(8, -1).max(axis=1) > 0)


def test_sprite_that_cannot_fit_is_rejected():
    prog = vg.MotionProgram(0, "linear-translate", velocity=(3.0, 0.0))
    with pytest.raises(ValueError, match="cannot fit"):
        vg.trajectory(prog, 8, 16, 16, stream(0, "x"))


def test_round_trip_is_bit_exact(tmp_path):
    ds = _small()
    vg.save(ds, tmp_path / "a.pvdc")
    back = vg.load(tmp_path / "a.pvdc", (8, 16, 16, 3))
    vg.save(back, tmp_path / "b.pvdc")
    assert (tmp_path / "a.pvdc").read_bytes() == (tmp_path / "b.pvdc").read_bytes()
    assert back.class_ids == ds.class_ids
    np.testing.assert_array_equal(back.test, ds.test)


def test_payload_size():
    ds = vg.generate(vg.default_programs()[:1], 6, 4, (8, 16, 16, 3), 0)
    blob = vg.to_bytes(ds)
    header = 4 + 8 * 4 + 1 * 4
    assert len(blob) - header == 10 * 8 * 16 * 16 * 3 * 4


def test_format_errors():
    blob = vg.to_bytes(vg.generate(vg.default_programs()[:2], 2, 1, (8, 16, 16, 3), 0))
    assert blob[:4] == b"PVDC"
    with pytest.raises(vg.DatasetFormatError, match="PVDC"):
        vg.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(vg.DatasetFormatError, match="truncated"):
        vg.from_bytes(blob[:-5])
    with pytest.raises(vg.DatasetFormatError, match="geometry"):
        vg.from_bytes(blob, (8, 32, 32, 3))


def test_full_class_batch_is_a_permutation():
    ds = _small(train=5)
    batch = vg.sample_real_batch(ds, 3, 5, seed=1)
    pool = ds.train[ds.class_index(3)]
    order = [next(i for i in range(5) if np.array_equal(b, pool[i])) for b in batch]
    assert sorted(order) == list(range(5))


def test_batches_repeat_for_a_fixed_seed():
    ds = _small()
    np.testing.assert_array_equal(vg.sample_real_batch(ds, 0, 3, 9), vg.sample_real_batch(ds, 0, 3, 9))


def test_flip_frequency():
    ds = _small(train=1)
    original = ds.train[ds.class_index(0), 0]
    flips = 0
    for i in range(1000):
        b = vg.sample_real_batch(ds, 0, 1, stream(i, "flip"), flip=True)[0]
        flips += not np.array_equal(b, original)
        assert np.array_equal(b, original) or np.array_equal(b, original[:, :, ::-1])
    assert 450 <= flips <= 550


def test_batch_errors():
    ds = _small()
    with pytest.raises(KeyError):
        vg.sample_real_batch(ds, 99, 1, 0)
    with pytest.raises(ValueError, match="exceeds"):
        vg.sample_real_batch(ds, 0, 5, 0)
