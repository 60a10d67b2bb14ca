import numpy as np
import pytest

from pixelret.errors import (
    ChecksumError,
    CoordError,
    EmptyDataset,
    FormatError,
    ParamError,
)
from pixelret.iip import IipConfig, make_iik
from pixelret.layout import LayoutPattern, rasterize
from pixelret.tiling import (
    SPLIT_NAMES,
    PixelDataset,
    TilingConfig,
    build_dataset,
    compress_window,
    datasets_equal,
    extract_window,
    load_dataset,
    merge_datasets,
    save_dataset,
    split_dataset,
)


def rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def toy_tiling(**kw):
    base = dict(
        interaction_distance=8.0,
        px_per_nm=1.0,
        compression_factor=2,
        row_reducer="mean",
        col_reducer="mean",
    )
    base.update(kw)
    return TilingConfig(**base)


class TestWindowGeometry:
    def test_default_window(self):
        t = TilingConfig()
        assert t.window_side == 1601
        assert t.output_side == 200

    def test_reference_profile(self):
        t = TilingConfig(interaction_distance=500.0, px_per_nm=2.0, compression_factor=8)
        assert t.window_side == 2001
        assert t.output_side == 250

    def test_toy_profile(self):
        t = TilingConfig(interaction_distance=100.0, px_per_nm=1.0, compression_factor=4)
        assert t.window_side == 201
        assert t.output_side == 50

    def test_bad_params(self):
        with pytest.raises(ParamError):
            TilingConfig(interaction_distance=0.0)
        with pytest.raises(ParamError):
            TilingConfig(compression_factor=0)
        with pytest.raises(ParamError):
            TilingConfig(row_reducer="median")


class TestExtractWindow:
    def test_interior(self, grid_factory, rng):
        arr = rng.random((32, 32)).astype(np.float32)
        g = grid_factory(arr)
        t = toy_tiling()
        w = extract_window(g, (16, 16), t)
        assert w.values.shape == (17, 17)
        assert np.array_equal(w.values, arr[8:25, 8:25])

    def test_corner_zero_padded(self, grid_factory):
        g = grid_factory(np.ones((20, 20), dtype=np.float32))
        t = toy_tiling()
        w = extract_window(g, (0, 0), t).values
        assert w[8, 8] == 1.0
        assert w[0, 0] == 0.0
        assert w[: 8, :].sum() == 0.0
        assert w[8:, 8:].sum() == 9 * 9

    def test_out_of_bounds_rejected(self, grid_factory):
        g = grid_factory(np.ones((10, 10), dtype=np.float32))
        with pytest.raises(CoordError):
            extract_window(g, (10, 3), toy_tiling())
        with pytest.raises(CoordError):
            extract_window(g, (-1, 3), toy_tiling())


class TestCompressWindow:
    def test_bright_column_mean_max(self):
        # 8x8 window, one fully lit column: row-mean keeps 1.0 per block row,
        # column-max then keeps 1.0
        t = TilingConfig(
            interaction_distance=4.0, px_per_nm=1.0, compression_factor=4,
            row_reducer="mean", col_reducer="max",
        )
        w = np.zeros((9, 9), dtype=np.float32)
        w[:, 2] = 1.0
        out = compress_window(w, t)
        assert out.shape == (2, 2)
        assert out[0, 0] == 1.0
        assert out[1, 0] == 1.0
        assert out[:, 1].max() == 0.0

    def test_bright_column_mean_mean(self):
        t = TilingConfig(
            interaction_distance=4.0, px_per_nm=1.0, compression_factor=4,
            row_reducer="mean", col_reducer="mean",
        )
        w = np.zeros((9, 9), dtype=np.float32)
        w[:, 2] = 1.0
        out = compress_window(w, t)
        assert out[0, 0] == pytest.approx(0.25)

    def test_constant_window_any_reducers(self):
        for rr in ("mean", "max", "center_weighted"):
            for cr in ("mean", "max", "center_weighted"):
                t = TilingConfig(
                    interaction_distance=4.0, px_per_nm=1.0, compression_factor=2,
                    row_reducer=rr, col_reducer=cr,
                )
                w = np.full((9, 9), 0.625, dtype=np.float32)
                out = compress_window(w, t)
                assert np.allclose(out, 0.625, atol=1e-6)

    def test_center_weighted_prefers_center(self):
        t = TilingConfig(
            interaction_distance=4.0, px_per_nm=1.0, compression_factor=4,
            row_reducer="center_weighted", col_reducer="center_weighted",
        )
        # block with bright center rows scores higher than bright edge rows
        w_center = np.zeros((9, 9), dtype=np.float32)
        w_center[1:3, :] = 1.0  # middle rows of the first 4-row block
        w_edge = np.zeros((9, 9), dtype=np.float32)
        w_edge[0, :] = 1.0
        w_edge[3, :] = 1.0
        t_center = compress_window(w_center, t)[0, 0]
        t_edge = compress_window(w_edge, t)[0, 0]
        assert t_center > t_edge

    def test_far_edge_trimmed(self):
        t = TilingConfig(
            interaction_distance=4.0, px_per_nm=1.0, compression_factor=4,
            row_reducer="mean", col_reducer="mean",
        )
        w = np.zeros((9, 9), dtype=np.float32)
        w[:, 8] = 1.0  # trimmed column must not contribute
        out = compress_window(w, t)
        assert out.max() == 0.0

    def test_float32_output(self):
        t = toy_tiling()
        out = compress_window(np.ones((17, 17), dtype=np.float32), t)
        assert out.dtype == np.float32
        assert out.shape == (8, 8)


def build_small(seed=0, cap=50):
    pattern = LayoutPattern([rect(8, 8, 24, 24)])
    tiling = toy_tiling()
    iik = make_iik("gaussian", 2.0, 6.0, 1.0)
    iip_cfg = IipConfig(num_classes=5, iik=iik, threshold=0.5)
    ref = rasterize(LayoutPattern([rect(6, 6, 26, 26)]), 1.0, (0, 0, 32, 32))
    return build_dataset(pattern, ref, tiling, iip_cfg, per_class_cap=cap, seed=seed), ref


class TestBuildDataset:
    def test_shapes_and_meta(self):
        ds, ref = build_small()
        assert ds.images.ndim == 3
        assert ds.images.shape[1:] == (8, 8)
        assert ds.images.dtype == np.float32
        assert ds.labels.dtype == np.uint16
        assert ds.coords.shape == (len(ds), 2)
        assert ds.meta["num_classes"] == 5
        assert ds.meta["row_reducer"] == "mean"
        assert ds.meta["ref_mask_checksum"] == ref.checksum()

    def test_label_matches_center_pixel_iip(self):
        from pixelret.iip import bin_class, compute_iip

        ds, ref = build_small()
        iik = make_iik("gaussian", 2.0, 6.0, 1.0)
        m = compute_iip(ref, iik)
        for i in range(0, len(ds), 7):
            x, y = ds.coords[i]
            assert int(ds.labels[i]) == bin_class(float(m.grid.values[y, x]), 5)

    def test_per_class_cap(self):
        ds, _ = build_small(cap=10)
        assert ds.class_histogram().max() <= 10

    def test_deterministic(self):
        a, _ = build_small(seed=3)
        b, _ = build_small(seed=3)
        assert datasets_equal(a, b)

    def test_seed_changes_selection(self):
        a, _ = build_small(seed=1, cap=10)
        b, _ = build_small(seed=2, cap=10)
        assert not datasets_equal(a, b)

    def test_resolution_mismatch(self, grid_factory):
        pattern = LayoutPattern([rect(8, 8, 24, 24)])
        ref = grid_factory(np.ones((32, 32)), px_per_nm=2.0)
        iik = make_iik("gaussian", 2.0, 6.0, 1.0)
        with pytest.raises(ParamError):
            build_dataset(pattern, ref, toy_tiling(), IipConfig(num_classes=5, iik=iik))

    def test_empty_everything_rejected(self, grid_factory):
        iik = make_iik("gaussian", 2.0, 6.0, 1.0)
        ref = grid_factory(np.zeros((32, 32)))
        with pytest.raises(EmptyDataset):
            build_dataset(
                LayoutPattern([]), ref, toy_tiling(), IipConfig(num_classes=5, iik=iik)
            )


class TestSplit:
    def test_fraction_sizes(self):
        ds, _ = build_small(cap=60)
        out = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
        n = len(out)
        tr = out.split_indices("train").size
        va = out.split_indices("val").size
        te = out.split_indices("test").size
        assert tr + va + te == n
        assert abs(tr - 0.8 * n) <= out.class_histogram().size  # +-1 per class
        assert va > 0 and te > 0

    def test_stratified(self):
        ds, _ = build_small(cap=60)
        out = split_dataset(ds, (0.5, 0.25, 0.25), seed=0)
        hist = out.class_histogram()
        for name in SPLIT_NAMES:
            idx = out.split_indices(name)
            sub = np.bincount(out.labels[idx], minlength=hist.size)
            # each class appears in each split roughly per its fraction
            for c in range(hist.size):
                if hist[c] >= 4:
                    assert sub[c] > 0

    def test_deterministic(self):
        ds, _ = build_small(cap=60)
        a = split_dataset(ds, (0.8, 0.1, 0.1), seed=5)
        b = split_dataset(ds, (0.8, 0.1, 0.1), seed=5)
        assert np.array_equal(a.splits, b.splits)
        c = split_dataset(ds, (0.8, 0.1, 0.1), seed=6)
        assert not np.array_equal(a.splits, c.splits)

    def test_bad_fractions(self):
        ds, _ = build_small()
        with pytest.raises(ParamError):
            split_dataset(ds, (0.8, 0.3, 0.1), seed=0)


class TestMerge:
    def test_merge_and_subset(self):
        a, _ = build_small(seed=1, cap=20)
        b, _ = build_small(seed=2, cap=20)
        m = merge_datasets([a, b])
        assert len(m) == len(a) + len(b)
        assert m.meta["sample_source_index"][: len(a)] == [0] * len(a)
        sub = m.subset(np.arange(len(a), len(m)))
        assert len(sub) == len(b)

    def test_empty_list_rejected(self):
        with pytest.raises(EmptyDataset):
            merge_datasets([])


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        ds, _ = build_small(cap=30)
        ds = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert datasets_equal(ds, back)
        # loader records payload checksums on top of the saved meta
        for k, v in ds.meta.items():
            assert back.meta[k] == v

    def test_payload_corruption_rejected(self, tmp_path):
        ds, _ = build_small(cap=30)
        save_dataset(ds, tmp_path / "d")
        f = tmp_path / "d" / "images.f32"
        raw = bytearray(f.read_bytes())
        raw[100] ^= 0xFF
        f.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_dataset(tmp_path / "d")

    def test_truncation_rejected(self, tmp_path):
        # digest check runs before the size check, so truncation surfaces
        # as a checksum failure
        ds, _ = build_small(cap=30)
        save_dataset(ds, tmp_path / "d")
        f = tmp_path / "d" / "labels.u16"
        f.write_bytes(f.read_bytes()[:-4])
        with pytest.raises(ChecksumError):
            load_dataset(tmp_path / "d")

    def test_missing_file_rejected(self, tmp_path):
        ds, _ = build_small(cap=30)
        save_dataset(ds, tmp_path / "d")
        (tmp_path / "d" / "coords.i32").unlink()
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d")

    def test_meta_garbage_rejected(self, tmp_path):
        ds, _ = build_small(cap=30)
        save_dataset(ds, tmp_path / "d")
        (tmp_path / "d" / "meta").write_text("{not json")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d")


class TestPixelDataset:
    def test_duplicate_coords_rejected(self):
        ds, _ = build_small(cap=10)
        images = np.concatenate([ds.images, ds.images[:1]])
        labels = np.concatenate([ds.labels, ds.labels[:1]])
        coords = np.concatenate([ds.coords, ds.coords[:1]])
        splits = np.concatenate([ds.splits, ds.splits[:1]])
        with pytest.raises(FormatError):
            PixelDataset(images, labels, coords, splits, dict(ds.meta))

    def test_getitem(self):
        ds, _ = build_small(cap=10)
        s = ds[0]
        assert s.image.shape == (8, 8)
        assert s.coord == (int(ds.coords[0, 0]), int(ds.coords[0, 1]))
