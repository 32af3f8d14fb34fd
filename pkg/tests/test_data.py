import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsicodec.data import (
    DataError,
    LeakageError,
    SlideRecord,
    TileRef,
    TileSet,
    check_no_leakage,
    load_image,
    load_tiles,
    read_manifest,
    read_tileset,
    save_image,
    scan_images,
    split_slides,
    synthetic_tissue,
    tile_coords,
    tile_image,
    write_manifest,
    write_synthetic_corpus,
    write_tileset,
)


def png_bytes(width, height, depth, raw_rows):
    def chunk(kind, body):
        return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", zlib.crc32(kind + body))

    ihdr = struct.pack(">IIBBBBB", width, height, depth, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw_rows)) + chunk(b"IEND", b"")


def test_png_round_trip_bit_identical(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, size=(1, 3, 17, 23)).astype(np.float32) / 255
    save_image(pixels, tmp_path / "a.png")
    loaded = load_image(tmp_path / "a.png")
    assert loaded.shape == (1, 3, 17, 23) and loaded.dtype == np.float32
    np.testing.assert_array_equal(np.round(loaded * 255), np.round(pixels * 255))
    save_image(loaded, tmp_path / "b.png")
    np.testing.assert_array_equal(load_image(tmp_path / "b.png"), loaded)


def test_ppm_definition(tmp_path):
    body = bytes(range(12))
    (tmp_path / "x.ppm").write_bytes(b"P6 2 2 255\n" + body)
    img = load_image(tmp_path / "x.ppm")
    assert img.shape == (1, 3, 2, 2)
    # pixel (0, 0) is bytes 0, 1, 2; pixel (0, 1) is 3, 4, 5
    np.testing.assert_allclose(img[0, :, 0, 0] * 255, [0, 1, 2], atol=1e-4)
    np.testing.assert_allclose(img[0, :, 0, 1] * 255, [3, 4, 5], atol=1e-4)


def test_ppm_with_comment_and_round_trip(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n\x0a\x14\x1e")
    np.testing.assert_allclose(load_image(tmp_path / "c.ppm")[0, :, 0, 0] * 255, [10, 20, 30], atol=1e-4)
    img = synthetic_tissue(1, 20, 30)
    save_image(img, tmp_path / "d.ppm")
    np.testing.assert_allclose(load_image(tmp_path / "d.ppm")[0], img, atol=1e-6)


def test_save_rounds_half_up(tmp_path):
    img = np.full((3, 1, 2), 0.5 / 255)
    img[:, 0, 1] = 1.5 / 255
    save_image(img, tmp_path / "h.ppm")
    assert (tmp_path / "h.ppm").read_bytes()[-6:] == bytes([1, 1, 1, 2, 2, 2])


def test_sixteen_bit_png_rejected(tmp_path):
    row = b"\x00" + bytes(6 * 2)
    (tmp_path / "deep.png").write_bytes(png_bytes(2, 2, 16, row * 2))
    with pytest.raises(DataError, match="bit depth 16"):
        load_image(tmp_path / "deep.png")


def test_truncated_and_unknown_files(tmp_path):
    (tmp_path / "t.ppm").write_bytes(b"P6 4 4 255\n" + bytes(10))
    with pytest.raises(DataError, match="truncated"):
        load_image(tmp_path / "t.ppm")
    good = png_bytes(2, 2, 8, (b"\x00" + bytes(6)) * 2)
    (tmp_path / "t.png").write_bytes(good[:40])
    with pytest.raises(DataError):
        load_image(tmp_path / "t.png")
    (tmp_path / "u.bmp").write_bytes(b"BM" + bytes(40))
    with pytest.raises(DataError, match="unsupported"):
        load_image(tmp_path / "u.bmp")
    (tmp_path / "p3.ppm").write_bytes(b"P3 1 1 255\n0 0 0\n")
    with pytest.raises(DataError):
        load_image(tmp_path / "p3.ppm")


@pytest.mark.parametrize("h, w, count", [(460, 700, 6), (5000, 5000, 484), (224, 224, 1)])
def test_tile_counts(h, w, count):
    assert len(tile_coords(h, w)) == count


def test_tile_size_too_large():
    with pytest.raises(ValueError):
        tile_coords(100, 300)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(8, 80), w=st.integers(8, 80), s=st.integers(4, 8))
def test_tiling_exhaustive_and_reassembles(h, w, s):
    img = np.random.default_rng(h * 1000 + w).uniform(size=(3, h, w))
    tiles = tile_image(img, s)
    ny, nx = h // s, w // s
    assert len(tiles) == ny * nx
    rebuilt = np.concatenate([np.concatenate(tiles[r * nx:(r + 1) * nx], axis=2) for r in range(ny)], axis=1)
    np.testing.assert_array_equal(rebuilt, img[:, :ny * s, :nx * s])


def records(n, tiles_per=2):
    return [SlideRecord(f"s{i}", f"/x/s{i}.png", 224, 224 * tiles_per) for i in range(n)]


def test_split_ten_slides():
    train, test = split_slides(records(10), 0.2, seed=3)
    assert len(test.slide_ids) == 2 and len(train.slide_ids) == 8
    assert not train.slide_ids & test.slide_ids
    assert len(train) + len(test) == 20


def test_split_deterministic_and_seeded():
    a = split_slides(records(10), seed=1)
    b = split_slides(records(10), seed=1)
    assert a == b
    others = {split_slides(records(10), seed=s)[1].slide_ids for s in range(10)}
    assert len(others) > 1


def test_split_rejects_single_slide():
    with pytest.raises(DataError):
        split_slides(records(1))
    two = [SlideRecord("same", "/a.png", 224, 224), SlideRecord("same", "/b.png", 224, 224)]
    with pytest.raises(DataError):
        split_slides(two)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(1, 3)), min_size=2, max_size=30),
       st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_disjoint_property(spec, frac, seed):
    recs = [SlideRecord(f"slide{sid}", f"/img{k}.png", 224, 224 * n) for k, (sid, n) in enumerate(spec)]
    n_ids = len({r.slide_id for r in recs})
    if n_ids < 2:
        return
    train, test = split_slides(recs, frac, seed)
    assert not train.slide_ids & test.slide_ids
    assert train.slide_ids | test.slide_ids == {r.slide_id for r in recs}
    assert abs(len(test.slide_ids) - frac * n_ids) <= 1


def test_leakage_detected():
    t = TileRef("a", "/a.png", 0, 0, 224)
    with pytest.raises(LeakageError):
        check_no_leakage(TileSet("train", (t,)), TileSet("test", (t,)))


def test_manifests_round_trip(tmp_path):
    recs = records(3)
    write_manifest(recs, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == recs
    train, _ = split_slides(recs)
    write_tileset(train, tmp_path / "train.jsonl")
    assert read_tileset(tmp_path / "train.jsonl") == train
    first = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert {"slide_id", "path", "height", "width"} <= set(first)


def test_record_rejects_escaping_tile():
    with pytest.raises(ValueError):
        SlideRecord("a", "/a.png", 224, 224, tiles=((10, 0),))


def test_synthetic_corpus_pipeline(tmp_path):
    write_synthetic_corpus(tmp_path, 3, 240, 460, seed=2)
    recs = scan_images(tmp_path)
    assert [r.slide_id for r in recs] == ["slide000", "slide001", "slide002"]
    assert all(len(r.tiles) == 2 for r in recs)
    tiles = load_tiles(recs[0].tile_refs())
    assert tiles.shape == (2, 3, 224, 224)
    full = load_image(recs[0].path)[0]
    np.testing.assert_array_equal(tiles[1], full[:, :224, 224:448])


def test_synthetic_tissue_deterministic():
    a, b = synthetic_tissue(5, 64, 64), synthetic_tissue(5, 64, 64)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 64, 64) and 0 <= a.min() and a.max() <= 1
    np.testing.assert_array_equal(np.round(a * 255) / 255, a)
    assert not np.array_equal(a, synthetic_tissue(6, 64, 64))
