import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svphw.data import (
    Sequence,
    Sprite,
    SpriteWorldConfig,
    export_pgm,
    generate_sequence,
    load_split,
    read_manifest,
    read_sequence,
    render,
    simulate,
    tile_strip,
    write_dataset,
    write_sequence,
)


def test_same_seed_bit_identical():
    cfg = SpriteWorldConfig(seed=7)
    assert generate_sequence(cfg, 3) == generate_sequence(cfg, 3)
    assert generate_sequence(cfg, 3) != generate_sequence(cfg, 4)


def test_speed_zero_frames_identical():
    cfg = SpriteWorldConfig(min_speed=0, max_speed=0, length=6)
    f = generate_sequence(cfg, 0).frames
    assert all(np.array_equal(f[0], f[t]) for t in range(6))


def test_rectangle_left_edge_advances_one_column_per_frame():
    cfg = SpriteWorldConfig(height=16, width=16, bounce=False, min_size=2, max_size=2)
    sprite = Sprite("rectangle", 3, 5, 2, 2, 1, 0, (255,))
    frames = simulate([sprite], cfg, 11)
    for t, f in enumerate(frames):
        cols = np.nonzero(f[0].any(axis=0))[0]
        assert cols[0] == 3 + t
        assert np.array_equal(np.nonzero(f[0].any(axis=1))[0], [5, 6])


def test_bounce_reverses_at_border():
    cfg = SpriteWorldConfig(height=16, width=16, min_size=2, max_size=2)
    sprite = Sprite("rectangle", 12, 0, 2, 2, 1, 0, (255,))
    frames = simulate([sprite], cfg, 6)
    left = [np.nonzero(f[0].any(axis=0))[0][0] for f in frames]
    assert left == [12, 13, 14, 13, 12, 11]


def test_disc_raster_is_symmetric_and_integer():
    s = Sprite("disc", 0, 0, 7, 7, 0, 0, (255,))
    m = render([s], 7, 7, 1)[0] > 0
    assert np.array_equal(m, m[::-1]) and np.array_equal(m, m.T)
    assert m[3, 3] and not m[0, 0]


def test_later_sprite_occludes_earlier():
    a = Sprite("rectangle", 0, 0, 4, 4, 0, 0, (100,))
    b = Sprite("rectangle", 2, 2, 4, 4, 0, 0, (200,))
    f = render([a, b], 8, 8, 1)[0]
    assert f[3, 3] == np.float32(200 / 255)
    assert f[0, 0] == np.float32(100 / 255)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 3]))
def test_frames_in_unit_range(seed, channels):
    cfg = SpriteWorldConfig(height=32, width=32, channels=channels, max_speed=3, length=8, switch_prob=0.2)
    f = generate_sequence(cfg, seed).frames
    assert f.shape == (8, channels, 32, 32) and f.dtype == np.float32
    assert f.min() >= 0.0 and f.max() <= 1.0


def test_bimodal_branches_share_prefix_then_diverge():
    cfg = SpriteWorldConfig(bimodal=True, branch_step=5, length=10, seed=2)
    down = generate_sequence(cfg, 11, branch=0).frames
    up = generate_sequence(cfg, 11, branch=1).frames
    assert np.array_equal(down[:6], up[:6])
    assert not np.array_equal(down[7], up[7])


def test_config_validation():
    with pytest.raises(ValueError, match="min\\(H, W\\)/4"):
        SpriteWorldConfig(height=16, width=16, max_speed=4)
    with pytest.raises(ValueError, match="kinds"):
        SpriteWorldConfig(kinds=("triangle",))
    with pytest.raises(ValueError, match="channels"):
        SpriteWorldConfig(channels=2)


def test_infeasible_placement_errors():
    cfg = SpriteWorldConfig(height=16, width=16, min_sprites=5, max_sprites=5, min_size=12, max_size=12, max_speed=1)
    with pytest.raises(RuntimeError, match="could not place"):
        generate_sequence(cfg, 0)


def test_config_hash_changes_with_fields():
    assert SpriteWorldConfig().hash() != SpriteWorldConfig(seed=1).hash()
    assert SpriteWorldConfig().hash() == SpriteWorldConfig().hash()


def test_seq1_round_trip(tmp_path):
    seq = generate_sequence(SpriteWorldConfig(length=4), 9)
    path = tmp_path / "a.seq"
    write_sequence(seq, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SEQ1"
    assert struct.unpack_from("<4I", raw, 4) == (4, 1, 64, 64)
    assert len(raw) == 20 + 4 * 4 * 64 * 64 + 12
    assert read_sequence(path) == seq


def test_seq1_errors(tmp_path):
    seq = generate_sequence(SpriteWorldConfig(length=2), 0)
    path = tmp_path / "a.seq"
    write_sequence(seq, path)
    raw = path.read_bytes()
    cases = {
        "unexpected end of sequence file": raw[:-1],
        "bad sequence magic": b"SEQ2" + raw[4:],
        "dimensions must be >= 1": b"SEQ1" + struct.pack("<4I", 0, 1, 64, 64) + raw[-12:],
        "trailing": raw + b"\0",
    }
    for message, data in cases.items():
        path.write_bytes(data)
        with pytest.raises(ValueError, match=message):
            read_sequence(path)
    path.write_bytes(raw[:10])
    with pytest.raises(ValueError, match="unexpected end"):
        read_sequence(path)


@pytest.mark.parametrize("value,byte", [(0.0, 0), (0.5, 128), (1.0, 255), (1 / 255, 1), (0.499 / 255, 0)])
def test_pgm_rounding(tmp_path, value, byte):
    path = tmp_path / "f.pgm"
    export_pgm(np.full((1, 2, 3), value), path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert raw[len(b"P5\n3 2\n255\n") :] == bytes([byte]) * 6


def test_ppm_interleaves_channels(tmp_path):
    frame = np.zeros((3, 1, 2))
    frame[0, 0, 0], frame[2, 0, 1] = 1.0, 1.0
    path = tmp_path / "f.ppm"
    export_pgm(frame, path)
    assert path.read_bytes() == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])


def test_pgm_clamps_with_warning(tmp_path):
    with pytest.warns(UserWarning, match="clamped 2"):
        n = export_pgm(np.array([[[-0.5, 0.5, 1.5]]]), tmp_path / "c.pgm")
    assert n == 2
    assert (tmp_path / "c.pgm").read_bytes()[-3:] == bytes([0, 128, 255])


def test_tile_strip_layout():
    frames = np.arange(2 * 1 * 2 * 3).reshape(2, 1, 2, 3)
    strip = tile_strip(frames)
    assert strip.shape == (1, 2, 6)
    assert np.array_equal(strip[:, :, 3:], frames[1])


def test_dataset_manifest_and_threads(tmp_path):
    cfg = SpriteWorldConfig(height=16, width=16, max_size=5, min_size=3, length=4)
    counts = {"train": 3, "val": 1, "test": 2}
    write_dataset(tmp_path / "a", cfg, counts)
    write_dataset(tmp_path / "b", cfg, counts, threads=3)
    entries = read_manifest(tmp_path / "a")
    assert len(entries) == 6
    assert [s for _, s in entries].count("train") == 3
    for name, _ in entries:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    seeds = [s.seed for s in load_split(tmp_path / "a", "test")]
    assert seeds == [4, 5]
