import numpy as np
import pytest

from pixelret.classifier import (
    ArchDescriptor,
    ConvBlock,
    ModelParams,
    TrainConfig,
    default_arch,
    forward,
    init_model,
    knn_predict,
    load_model,
    predict,
    predict_batch,
    save_model,
    train,
)
from pixelret.errors import (
    ArchError,
    ChecksumError,
    EmptyDataset,
    FormatError,
    ParamError,
    ShapeError,
)
from pixelret.iip import IipConfig, make_iik
from pixelret.layout import LayoutPattern, rasterize
from pixelret.tiling import TilingConfig, build_dataset, split_dataset


def rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def tiny_arch(input_side=8, num_classes=5):
    return ArchDescriptor(
        input_side=input_side,
        num_classes=num_classes,
        conv_blocks=[ConvBlock(4), ConvBlock(8)],
    )


def tiny_dataset(cap=40):
    tiling = TilingConfig(
        interaction_distance=8.0, px_per_nm=1.0, compression_factor=2,
        row_reducer="mean", col_reducer="mean",
    )
    pattern = LayoutPattern([rect(8, 8, 24, 24)])
    ref = rasterize(LayoutPattern([rect(6, 6, 26, 26)]), 1.0, (0, 0, 32, 32))
    iik = make_iik("gaussian", 2.0, 6.0, 1.0)
    ds = build_dataset(
        pattern, ref, tiling, IipConfig(num_classes=5, iik=iik),
        per_class_cap=cap, seed=0,
    )
    return split_dataset(ds, (0.6, 0.2, 0.2), seed=1)


class TestArchValidation:
    def test_conv_block_params(self):
        with pytest.raises(ArchError):
            ConvBlock(0)
        with pytest.raises(ArchError):
            ConvBlock(8, kernel=4)
        with pytest.raises(ArchError):
            ConvBlock(8, stride=0)
        with pytest.raises(ArchError):
            ConvBlock(8, activation="tanh")

    def test_descriptor_params(self):
        with pytest.raises(ArchError):
            ArchDescriptor(8, 5, [])
        with pytest.raises(ArchError):
            ArchDescriptor(8, 1, [ConvBlock(4)])
        with pytest.raises(ArchError):
            ArchDescriptor(8, 5, [ConvBlock(4)], pool="max")

    def test_spatial_collapse_rejected(self):
        # 8 -> 3 -> 1, a third 3x3 block has nothing left to convolve
        with pytest.raises(ArchError):
            ArchDescriptor(8, 5, [ConvBlock(4), ConvBlock(8), ConvBlock(16)])

    def test_feature_sides(self):
        a = default_arch(50, 20)
        assert a.feature_sides == [50, 24, 11, 5]

    def test_default_arch_shape(self):
        a = default_arch(200, 100)
        assert [b.filters for b in a.conv_blocks] == [8, 16, 32]
        assert all(b.stride == 2 for b in a.conv_blocks)
        assert a.pool == "global_average"

    def test_dict_roundtrip(self):
        a = tiny_arch()
        b = ArchDescriptor.from_dict(a.to_dict())
        assert b.to_dict() == a.to_dict()


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ParamError):
            TrainConfig(epochs=0)
        with pytest.raises(ParamError):
            TrainConfig(batch_size=0)
        with pytest.raises(ParamError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ParamError):
            TrainConfig(optimizer="adam")
        TrainConfig(learning_rate=0.0)  # freeze is legal


class TestInitAndForward:
    def test_init_deterministic(self):
        a = init_model(tiny_arch(), seed=7)
        b = init_model(tiny_arch(), seed=7)
        assert a.checksum() == b.checksum()
        c = init_model(tiny_arch(), seed=8)
        assert a.checksum() != c.checksum()

    def test_weights_float32(self):
        m = init_model(tiny_arch(), seed=0)
        for v in m.weights.values():
            assert v.dtype == np.float32

    def test_forward_probability_simplex(self, rng):
        m = init_model(tiny_arch(), seed=0)
        x = rng.random((8, 8)).astype(np.float32)
        probs, logits = forward(m, x)
        assert probs.shape == (5,)
        assert logits.shape == (5,)
        assert probs.min() >= 0.0
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_predict_in_range(self, rng):
        m = init_model(tiny_arch(), seed=0)
        for _ in range(5):
            x = rng.random((8, 8)).astype(np.float32)
            assert 0 <= predict(m, x) < 5

    def test_predict_batch_matches_single(self, rng):
        m = init_model(tiny_arch(), seed=0)
        xs = rng.random((9, 8, 8)).astype(np.float32)
        batched = predict_batch(m, xs, batch_size=4)
        singles = np.array([predict(m, x) for x in xs])
        assert np.array_equal(batched, singles)

    def test_forward_shape_mismatch(self, rng):
        m = init_model(tiny_arch(), seed=0)
        with pytest.raises(ShapeError):
            forward(m, rng.random((9, 9)).astype(np.float32))


class TestTraining:
    def test_loss_decreases(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(), seed=0)
        _, hist = train(m, ds, TrainConfig(epochs=8, batch_size=8, learning_rate=0.05))
        assert len(hist["train_loss"]) == 8
        assert len(hist["val_accuracy"]) == 8
        assert hist["train_loss"][-1] < hist["train_loss"][0]

    def test_bitwise_deterministic(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(), seed=0)
        cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=0.05, seed=3)
        m1, h1 = train(m, ds, cfg)
        m2, h2 = train(m, ds, cfg)
        assert m1.checksum() == m2.checksum()
        assert h1 == h2

    def test_train_seed_changes_result(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(), seed=0)
        m1, _ = train(m, ds, TrainConfig(epochs=3, batch_size=8, seed=1))
        m2, _ = train(m, ds, TrainConfig(epochs=3, batch_size=8, seed=2))
        assert m1.checksum() != m2.checksum()

    def test_best_epoch_snapshot(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(), seed=0)
        out, hist = train(m, ds, TrainConfig(epochs=6, batch_size=8))
        acc = hist["val_accuracy"]
        best = out.train_meta["best_epoch"]
        assert acc[best] == max(acc)
        assert acc.index(max(acc)) == best  # ties resolve to earlier epoch
        assert out.train_meta["final_val_accuracy"] == max(acc)

    def test_zero_lr_freezes_weights(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(), seed=0)
        out, _ = train(m, ds, TrainConfig(epochs=2, batch_size=8, learning_rate=0.0))
        assert out.checksum() == m.checksum()

    def test_provenance_carried(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(), seed=0)
        out, _ = train(m, ds, TrainConfig(epochs=1, batch_size=8))
        for key in ("interaction_distance", "px_per_nm", "compression_factor",
                    "row_reducer", "col_reducer", "num_classes"):
            assert key in out.train_meta

    def test_class_count_mismatch(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(num_classes=7), seed=0)
        with pytest.raises(ShapeError):
            train(m, ds, TrainConfig(epochs=1))

    def test_image_side_mismatch(self):
        ds = tiny_dataset()
        m = init_model(tiny_arch(input_side=10), seed=0)
        with pytest.raises(ShapeError):
            train(m, ds, TrainConfig(epochs=1))


class TestKnn:
    def test_exact_match(self):
        ds = tiny_dataset()
        i = 3
        assert knn_predict(ds, ds.images[i], k=1) == int(ds.labels[i])

    def test_vote_tie_lowest_class(self):
        ds = tiny_dataset()
        # find two samples of different classes, query midway between them
        a = 0
        b = next(i for i in range(len(ds)) if ds.labels[i] != ds.labels[a])
        mid = (ds.images[a].astype(np.float64) + ds.images[b]) / 2.0
        got = knn_predict(ds.subset(np.array([a, b])), mid, k=2)
        assert got == min(int(ds.labels[a]), int(ds.labels[b]))

    def test_bad_k(self):
        ds = tiny_dataset()
        with pytest.raises(ParamError):
            knn_predict(ds, ds.images[0], k=0)

    def test_empty_train_set(self):
        ds = tiny_dataset()
        empty = ds.subset(np.array([], dtype=np.int64))
        with pytest.raises(EmptyDataset):
            knn_predict(empty, ds.images[0], k=1)

    def test_query_size_mismatch(self, rng):
        ds = tiny_dataset()
        with pytest.raises(ShapeError):
            knn_predict(ds, rng.random((9, 9)), k=1)


class TestModelIO:
    def test_roundtrip(self, tmp_path):
        ds = tiny_dataset()
        m = init_model(tiny_arch(), seed=0)
        out, _ = train(m, ds, TrainConfig(epochs=2, batch_size=8))
        p = tmp_path / "model.bin"
        save_model(out, p)
        back = load_model(p)
        assert back.checksum() == out.checksum()
        assert back.arch.to_dict() == out.arch.to_dict()
        assert back.train_meta == out.train_meta
        for k in out.weights:
            assert np.array_equal(back.weights[k], out.weights[k])

    def test_payload_corruption_rejected(self, tmp_path):
        m = init_model(tiny_arch(), seed=0)
        p = tmp_path / "model.bin"
        save_model(m, p)
        raw = bytearray(p.read_bytes())
        raw[-3] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_model(p)

    def test_truncation_rejected(self, tmp_path):
        m = init_model(tiny_arch(), seed=0)
        p = tmp_path / "model.bin"
        save_model(m, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_model(p)

    def test_garbage_header_rejected(self, tmp_path):
        p = tmp_path / "model.bin"
        p.write_bytes(b"\x00\x01\x02 not json\n" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_model(p)

    def test_wrong_format_tag_rejected(self, tmp_path):
        p = tmp_path / "model.bin"
        p.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(FormatError):
            load_model(p)

    def test_missing_newline_rejected(self, tmp_path):
        p = tmp_path / "model.bin"
        p.write_bytes(b'{"format": "pixel-correction-model"}')
        with pytest.raises(FormatError):
            load_model(p)
