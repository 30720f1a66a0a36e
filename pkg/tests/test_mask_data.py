import zlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from thin_inpaint.mask_data import (Dilate, MaskIOError, Noise, Rotate, SynthConfig, augment,
                                    dilate, generate_structure, load_mask, save_mask, skeletonize)
from thin_inpaint.metrics import connected_components, count_tips


def _decode_png_gray8(data: bytes) -> np.ndarray:
    """Minimal independent PNG decoder for 8-bit grayscale, non-interlaced images."""
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    pos, idat = 8, b""
    while pos < len(data):
        (length,), kind = struct.unpack(">I", data[pos:pos + 4]), data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + length]
        if kind == b"IHDR":
            w, h, depth, colour = struct.unpack(">IIBB", body[:10])
            assert depth == 8 and colour == 0
        elif kind == b"IDAT":
            idat += body
        pos += 12 + length
    raw = zlib.decompress(idat)
    out = np.zeros((h, w), dtype=np.int32)
    stride = w + 1
    prev = np.zeros(w, dtype=np.int32)
    for r in range(h):
        ftype, line = raw[r * stride], np.frombuffer(raw[r * stride + 1:(r + 1) * stride], np.uint8).astype(np.int32)
        cur = np.zeros(w, dtype=np.int32)
        for c in range(w):
            a = cur[c - 1] if c else 0
            b = prev[c]
            cc = prev[c - 1] if c else 0
            if ftype == 0:
                pred = 0
            elif ftype == 1:
                pred = a
            elif ftype == 2:
                pred = b
            elif ftype == 3:
                pred = (a + b) // 2
            else:
                p = a + b - cc
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - cc)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else cc)
            cur[c] = (line[c] + pred) % 256
        out[r] = cur
        prev = cur
    return out


def test_load_all_white(tmp_path):
    Image.fromarray(np.full((4, 4), 255, np.uint8)).save(tmp_path / "w.png")
    m = load_mask(tmp_path / "w.png")
    assert m.shape == (4, 4) and m.all()


def test_threshold_127_128(tmp_path):
    Image.fromarray(np.array([[127, 128]], np.uint8)).save(tmp_path / "t.png")
    assert load_mask(tmp_path / "t.png").tolist() == [[False, True]]


def test_rgb_uses_bt601_luma(tmp_path):
    luma = 0.299 * 200 + 0.587 * 100 + 0.114 * 50
    assert luma == pytest.approx(124.2)
    Image.fromarray(np.array([[[200, 100, 50], [255, 255, 255]]], np.uint8)).save(tmp_path / "c.png")
    assert load_mask(tmp_path / "c.png").tolist() == [[luma > 127, True]]


def test_unreadable_file_names_path(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(MaskIOError, match="bad.png"):
        load_mask(bad)
    with pytest.raises(MaskIOError, match="missing.png"):
        load_mask(tmp_path / "missing.png")


def test_16bit_rejected(tmp_path):
    Image.fromarray(np.full((3, 3), 40000, np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(MaskIOError, match="bit depth"):
        load_mask(tmp_path / "d.png")


def test_save_all_zero(tmp_path):
    save_mask(np.zeros((5, 7), bool), tmp_path / "z.png")
    assert (np.asarray(Image.open(tmp_path / "z.png")) == 0).all()


def test_save_checkerboard_independent_decoder(tmp_path):
    board = np.array([[1, 0], [0, 1]], bool)
    save_mask(board, tmp_path / "cb.png")
    decoded = _decode_png_gray8((tmp_path / "cb.png").read_bytes())
    assert decoded.tolist() == [[255, 0], [0, 255]]


@settings(max_examples=30, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 40), st.integers(1, 40))))
def test_save_load_roundtrip(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("rt") / "m.png"
    save_mask(m, p)
    assert np.array_equal(load_mask(p), m)


def test_generate_is_deterministic():
    cfg = SynthConfig(seed=7, canvas=(128, 128), min_length=50)
    assert np.array_equal(generate_structure(cfg), generate_structure(cfg))


@pytest.mark.parametrize("seed", range(8))
def test_generate_single_component(seed):
    m = generate_structure(SynthConfig(seed=seed, canvas=(256, 192)))
    assert connected_components(m, 8) == 1
    assert m[:3].any()  # rooted at the top edge


@pytest.mark.parametrize("seed", range(6))
def test_unbranched_single_stem_has_two_tips(seed):
    m = generate_structure(SynthConfig(seed=seed, stem_count=1, branch_prob=0.0, canvas=(256, 256)))
    assert count_tips(skeletonize(m)) == 2


def test_generate_too_small_canvas():
    with pytest.raises(ValueError):
        generate_structure(SynthConfig(canvas=(64, 64), min_length=10_000))


@pytest.mark.parametrize("bad", [dict(branch_prob=1.5), dict(thickness=0), dict(canvas=(32, 128))])
def test_synth_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def _reference_zhang_suen(img):
    """Straightforward pixel-by-pixel Zhang-Suen, written independently of the vectorised one."""
    img = [list(map(int, row)) for row in img]
    h, w = len(img), len(img[0])

    def px(r, c):
        return img[r][c] if 0 <= r < h and 0 <= c < w else 0

    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            marked = []
            for r in range(h):
                for c in range(w):
                    if not img[r][c]:
                        continue
                    p = [px(r - 1, c), px(r - 1, c + 1), px(r, c + 1), px(r + 1, c + 1),
                         px(r + 1, c), px(r + 1, c - 1), px(r, c - 1), px(r - 1, c - 1)]
                    b = sum(p)
                    a = sum(1 for i in range(8) if p[i] == 0 and p[(i + 1) % 8] == 1)
                    p2, p4, p6, p8 = p[0], p[2], p[4], p[6]
                    if step == 0:
                        ok = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
                    else:
                        ok = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
                    if 2 <= b <= 6 and a == 1 and ok:
                        marked.append((r, c))
            for r, c in marked:
                img[r][c] = 0
            changed |= bool(marked)
    return np.array(img, bool)


def test_skeleton_of_line_unchanged():
    m = np.zeros((5, 12), bool)
    m[2, 1:11] = True
    assert np.array_equal(skeletonize(m), m)


def test_skeleton_of_empty():
    assert not skeletonize(np.zeros((6, 6), bool)).any()


def test_skeleton_disk_matches_reference_trace():
    yy, xx = np.mgrid[-3:4, -3:4]
    disk7 = (yy ** 2 + xx ** 2) <= 9
    ref = _reference_zhang_suen(disk7)
    out = skeletonize(disk7)
    assert np.array_equal(out, ref)
    assert out.sum() >= 1


@pytest.mark.parametrize("seed", range(5))
def test_skeleton_matches_reference_on_thick_strokes(seed):
    m = generate_structure(SynthConfig(seed=seed, canvas=(64, 64), min_length=20, thickness=3))
    ref = _reference_zhang_suen(m)
    out = skeletonize(m)
    blocks = ref[:-1, :-1] & ref[1:, :-1] & ref[:-1, 1:] & ref[1:, 1:]
    if not blocks.any():
        assert np.array_equal(out, ref)
    assert not (out & ~ref).any()


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(3, 24), st.integers(3, 24))))
def test_skeleton_properties(m):
    s = skeletonize(m)
    assert not (s & ~m).any()
    assert not (s[:-1, :-1] & s[1:, :-1] & s[:-1, 1:] & s[1:, 1:]).any()
    assert np.array_equal(skeletonize(s), s)


def test_dilate_radius_zero_identity():
    m = np.random.default_rng(0).random((9, 9)) < 0.3
    assert np.array_equal(dilate(m, 0), m)


def test_dilate_single_pixel():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    out = dilate(m, 1)
    assert out.sum() == 9 and out[2:5, 2:5].all()


@settings(max_examples=40, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 20), st.integers(1, 20))), st.integers(0, 3))
def test_dilate_monotone(m, r):
    assert not (m & ~dilate(m, r)).any()


def test_rotate_90_exact_permutation():
    m = np.zeros((4, 5), bool)
    m[0, 0:3] = True
    m[1:4, 0] = True
    out = augment(m, [Rotate(90)])
    h = m.shape[0]
    assert out.shape == (5, 4)
    for r, c in zip(*np.nonzero(m)):
        assert out[c, h - 1 - r]
    assert out.sum() == m.sum()


def test_rotate_arbitrary_angle_nearest_neighbour():
    m = np.zeros((9, 9), bool)
    m[4, 4:] = True
    out = augment(m, [Rotate(45.0)])
    assert out.dtype == bool and out[4, 4]
    # clockwise: the ray pointing right now points down-right
    assert out[7, 7] and not out[1, 7]


def test_noise_is_seeded():
    m = np.zeros((50, 50), bool)
    a = augment(m, [Noise(0.1, seed=3)])
    b = augment(m, [Noise(0.1, seed=3)])
    assert np.array_equal(a, b)
    assert 0.05 < a.mean() < 0.15
    assert np.array_equal(augment(m, [Noise(0.0, seed=1)]), m)


def test_augment_pipeline_order():
    m = np.zeros((9, 9), bool)
    m[0, 0] = True
    out = augment(m, [Dilate(1), Rotate(180)])
    assert out[7:, 7:].all() and out.sum() == 4
