import numpy as np
import pytest
from scipy import ndimage

from tsenet.scenes import (
    BUILDING,
    GROUND,
    SceneConfig,
    cast_shadows,
    generate_dataset,
    generate_scene,
    load_manifest,
    load_split,
    make_splits,
    read_raster,
    write_raster,
)


def scenes(n, seed=0, **kw):
    cfg = SceneConfig(**kw)
    return [generate_scene(np.random.default_rng([seed, i]), cfg) for i in range(n)]


def test_ground_only_scene_is_low():
    (s,) = scenes(1, buildings=(0, 0), trees=(0, 0))
    assert s.heights.max() < 1.0
    assert np.all(s.semantics == GROUND)


def test_scene_invariants():
    for s in scenes(50):
        assert s.heights.min() >= 0
        assert np.all(s.heights[s.semantics == GROUND] < 1.0)
        assert s.image.shape == (3, 64, 64) and 0 <= s.image.min() and s.image.max() <= 1
        for b in np.unique(s.instances[s.instances > 0]):
            sel = s.instances == b
            assert np.unique(s.heights[sel]).size == 1
            assert ndimage.label(sel)[1] == 1  # 4-connected


def test_twenty_meter_building_casts_ten_pixels():
    h = np.zeros((5, 40))
    raised = np.zeros((5, 40), dtype=bool)
    h[1:4, 5:10] = 20.0
    raised[1:4, 5:10] = True
    shaded = cast_shadows(h, raised)
    np.testing.assert_array_equal(np.flatnonzero(shaded[2]), np.arange(10, 20))
    assert not shaded[0].any()


def measured_shadows(scene_list):
    out = []
    for s in scene_list:
        dark = s.image.mean(axis=0) < 0.2
        for b in np.unique(s.instances[s.instances > 0]):
            ys, xs = np.nonzero(s.instances == b)
            row, col = (ys.min() + ys.max()) // 2, xs.max() + 1
            n = 0
            while col + n < s.heights.shape[1] and s.semantics[row, col + n] == GROUND and dark[row, col + n]:
                n += 1
            end = col + n
            # skip shadows cut off by the frame or by another object
            if end >= s.heights.shape[1] or s.semantics[row, end] != GROUND:
                continue
            out.append((n, s.heights[row, col - 1]))
    return np.array(out, dtype=float)


def test_shadow_length_explains_height():
    # one building per clean scene so no taller neighbour extends the shadow
    data = measured_shadows(scenes(200, seed=3, noise=0.0, trees=(0, 0), buildings=(1, 1)))
    assert len(data) > 100
    x, y = data[:, 0], data[:, 1]
    slope, icpt = np.polyfit(x, y, 1)
    r2 = 1 - np.sum((y - (slope * x + icpt)) ** 2) / np.sum((y - y.mean()) ** 2)
    assert r2 > 0.95


def test_long_tail_over_1000_scenes():
    h = np.concatenate([s.heights.ravel() for s in scenes(1000, seed=11)])
    assert np.median(h) < 1.0
    assert np.percentile(h, 99.9) > 30.0
    assert np.mean(h < 1.0) > 0.5
    # roofs clipped to h_max pile up exactly at 100 m; the decay holds below it
    edges = np.array([1.0, 5.0, 10.0, 20.0, 40.0, 100.0])
    counts, _ = np.histogram(h[h < 100.0], bins=edges)
    assert np.all(np.diff(counts / np.diff(edges)) < 0)


def test_overcrowded_rejected():
    with pytest.raises(ValueError, match="overcrowded"):
        generate_scene(np.random.default_rng(0), SceneConfig(size=16, buildings=(6, 6), building_side=(6, 6)))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_raster_roundtrip(tmp_path, dtype):
    arr = np.random.default_rng(0).normal(size=(3, 5, 7)).astype(dtype)
    write_raster(tmp_path / "r.tser", arr)
    back = read_raster(tmp_path / "r.tser")
    assert back.dtype == dtype and back.tobytes() == arr.tobytes()


def test_raster_u16_semantics(tmp_path):
    sem = np.array([[0, 1], [2, 1]], dtype=np.uint16)
    write_raster(tmp_path / "s.tser", sem)
    np.testing.assert_array_equal(read_raster(tmp_path / "s.tser")[0], sem)


def test_raster_truncated_and_bad_magic(tmp_path):
    p = tmp_path / "r.tser"
    write_raster(p, np.zeros((1, 4, 4)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(ValueError, match=f"expected {len(raw)} bytes, got {len(raw) - 3}"):
        read_raster(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError, match="byte 0"):
        read_raster(p)


def test_splits_counts_and_disjoint():
    m = make_splits(1000, 0.01, np.random.default_rng(0))
    assert m.counts() == {"labeled": 6, "unlabeled": 594, "val": 200, "test": 200}
    full = make_splits(1000, 1.0, np.random.default_rng(0))
    assert full.counts()["labeled"] == 600 and full.counts()["unlabeled"] == 0


def test_tiny_fraction_promoted_with_warning(caplog):
    m = make_splits(10, 0.001, np.random.default_rng(0))
    assert m.counts()["labeled"] == 1
    assert "rounds to 0" in caplog.text


def test_bad_fraction_and_too_few_scenes():
    with pytest.raises(ValueError):
        make_splits(100, 0.3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        make_splits(5, 0.1, np.random.default_rng(0))


def test_dataset_determinism(tmp_path):
    a = generate_dataset(tmp_path / "a", 12, 4, 0.1)
    b = generate_dataset(tmp_path / "b", 12, 4, 0.1)
    assert a.to_json() == b.to_json()
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    for f in a.scenes:
        assert (tmp_path / "a" / f["heights"]).read_bytes() == (tmp_path / "b" / f["heights"]).read_bytes()
    m = load_manifest(tmp_path / "a")
    test = load_split(tmp_path / "a", m, "test")
    assert len(test) == m.counts()["test"]
    assert any((s.semantics == BUILDING).any() for s in test)
