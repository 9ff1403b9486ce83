"""
数据服务测试：合成数据、文件格式、描述符解析、增强与双加载器
"""

import numpy as np
import pytest

from app.core.errors import ConfigError, DataFormatError, ShapeError
from app.services.data_service import (
    AugmentationPipeline,
    Dataset,
    DualLoader,
    EpochExhausted,
    augment,
    dual_loader_next,
    pad_crop,
    parse_data_spec,
    shifted_toy,
    synth_toy,
    toy_centers,
    uniform_noise,
    write_csv2d,
    write_idx,
)


def make_loader(dataset, batch_size=8, augment_gen=False, drop_last=False, pad=2, seed=0):
    pipeline = AugmentationPipeline.for_dataset(dataset, flip=True, pad=pad)
    return DualLoader(dataset, pipeline, batch_size, np.random.default_rng(seed), np.random.default_rng(seed + 1),
                      np.random.default_rng(seed + 2), augment_gen=augment_gen, drop_last=drop_last)


@pytest.mark.parametrize("name", ["gaussians8", "rings", "moons"])
def test_synth_toy_is_deterministic_and_clamped(name):
    a = synth_toy(name, n=200, noise=0.1, seed=3)
    b = synth_toy(name, n=200, noise=0.1, seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.labels, b.labels)
    lo, hi = a.clamp_range
    assert a.samples.min() >= lo and a.samples.max() <= hi
    assert a.class_count == 2 and np.bincount(a.labels).tolist() == [100, 100]
    assert a.samples.dtype == np.float32 and not a.samples.flags.writeable


def test_synth_toy_rejects_unknown_name():
    with pytest.raises(ConfigError):
        synth_toy("spirals", n=10)


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2, kind="toy")
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2, kind="toy")
    with pytest.raises(DataFormatError):
        Dataset(np.full((2, 2), 3.0), np.array([0, 1]), 2, kind="toy")


def test_parse_toy_spec_and_test_split():
    train = parse_data_spec("toy:moons:n=400:noise=0.05:seed=2")
    test = parse_data_spec("toy:moons:n=400:noise=0.05:seed=2", split="test")
    assert len(train) == 400 and train.split == "train"
    assert len(test) == 100 and test.split == "test"
    assert test.meta["seed"] == 3 and test.meta["noise"] == 0.05


@pytest.mark.parametrize("spec", [
    "toy",
    "toy:moons:depth=3",
    "toy:moons:n=abc",
    "synth:bars:pixels=4",
    "idx:only-one",
    "hdf5:data.h5",
])
def test_parse_bad_specs(spec):
    with pytest.raises(ConfigError):
        parse_data_spec(spec)


def test_parse_synth_spec():
    dataset = parse_data_spec("synth:bars:n=40:size=8:classes=4")
    assert dataset.shape == (1, 8, 8) and dataset.is_image
    assert dataset.class_count == 4 and len(dataset) == 40


def test_csv_round_trip_is_bit_exact(toy_ds, tmp_path):
    path = write_csv2d(tmp_path / "toy.csv", toy_ds)
    assert path.read_text().splitlines()[0] == "x1,x2,label"
    loaded = parse_data_spec(f"csv:{path}")
    np.testing.assert_array_equal(loaded.samples, toy_ds.samples)
    np.testing.assert_array_equal(loaded.labels, toy_ds.labels)


def test_csv_rejects_bad_files(tmp_path):
    bad_header = tmp_path / "bad.csv"
    bad_header.write_text("a,b,label\n0,0,0\n")
    with pytest.raises(DataFormatError):
        parse_data_spec(f"csv:{bad_header}")
    bad_label = tmp_path / "label.csv"
    bad_label.write_text("x1,x2,label\n0,0,0.5\n")
    with pytest.raises(DataFormatError):
        parse_data_spec(f"csv:{bad_label}")
    with pytest.raises(ShapeError):
        write_csv2d(tmp_path / "x.csv", parse_data_spec("synth:bars:n=8:size=8:classes=2"))


def test_idx_round_trip(image_ds, tmp_path):
    images, labels = write_idx(tmp_path / "img.idx", tmp_path / "lbl.idx", image_ds)
    loaded = parse_data_spec(f"idx:{images}:{labels}")
    assert loaded.shape == image_ds.shape
    np.testing.assert_array_equal(loaded.labels, image_ds.labels)
    np.testing.assert_allclose(loaded.samples, image_ds.samples, atol=0.5 / 127.5 + 1e-6)


def test_idx_rejects_truncation(image_ds, tmp_path):
    images, labels = write_idx(tmp_path / "img.idx", tmp_path / "lbl.idx", image_ds)
    images.write_bytes(images.read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        parse_data_spec(f"idx:{images}:{labels}")
    images.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(DataFormatError):
        parse_data_spec(f"idx:{images}:{labels}")


def test_pad_crop_offsets():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(pad_crop(x, 1, np.array([[1, 1]]), fill=-1.0), x)
    shifted = pad_crop(x, 1, np.array([[0, 0]]), fill=-1.0)
    np.testing.assert_array_equal(shifted[0, 0, 1:, 1:], x[0, 0, :3, :3])
    assert (shifted[0, 0, 0] == -1.0).all() and (shifted[0, 0, :, 0] == -1.0).all()
    with pytest.raises(ConfigError):
        pad_crop(x, 4, np.array([[0, 0]]), fill=-1.0)


def test_toy_pipeline_is_identity(toy_ds, rng):
    pipeline = AugmentationPipeline.for_dataset(toy_ds)
    assert pipeline.identity
    x = toy_ds.samples[:5]
    assert augment(x, pipeline, rng) is x


def test_augment_requires_images(rng):
    with pytest.raises(ShapeError):
        augment(np.zeros((3, 2)), AugmentationPipeline(flip=True), rng)


def test_dual_loader_generative_branch_is_clean(image_ds):
    loader = make_loader(image_ds, batch_size=32)
    batch = dual_loader_next(loader)
    assert batch.gen_x.tobytes() == image_ds.samples[batch.gen_index].tobytes()
    assert not np.array_equal(batch.clf_x, image_ds.samples[batch.clf_index])
    np.testing.assert_array_equal(batch.clf_y, image_ds.labels[batch.clf_index])
    assert batch.clf_x.shape == batch.gen_x.shape == (32, 1, 8, 8)


def test_dual_loader_augment_gen_ablation(image_ds):
    batch = dual_loader_next(make_loader(image_ds, batch_size=32, augment_gen=True))
    assert not np.array_equal(batch.gen_x, image_ds.samples[batch.gen_index])


def test_dual_loader_epochs_cover_dataset(image_ds):
    loader = make_loader(image_ds, batch_size=10)
    assert loader.batches_per_epoch() == 4
    batches = list(loader.epoch_batches())
    assert [len(b.clf_index) for b in batches] == [10, 10, 10, 2]
    assert sorted(np.concatenate([b.clf_index for b in batches])) == list(range(32))
    assert sorted(np.concatenate([b.gen_index for b in batches])) == list(range(32))
    assert loader.epoch == 1

    dropping = make_loader(image_ds, batch_size=10, drop_last=True)
    assert dropping.batches_per_epoch() == 3
    for _ in range(3):
        dropping.next()
    with pytest.raises(EpochExhausted):
        dropping.next()


def test_dual_loader_orders_are_independent(image_ds):
    batch = dual_loader_next(make_loader(image_ds, batch_size=32))
    assert not np.array_equal(batch.clf_index, batch.gen_index)


def test_dual_loader_rejects_oversized_batch(image_ds):
    with pytest.raises(ConfigError):
        make_loader(image_ds, batch_size=64)


def test_ood_partners(toy_ds, rng):
    shifted = shifted_toy(toy_ds, 1.5)
    np.testing.assert_allclose(shifted.samples, toy_ds.samples + np.float32(1.5), rtol=1e-6)
    assert shifted.split == "ood"
    noise = uniform_noise((2,), 50, toy_ds.clamp_range, rng)
    assert len(noise) == 50 and noise.kind == "noise"
    assert noise.samples.min() >= toy_ds.clamp_range[0]


class ForcedFlip:
    """random() 恒为 0，保证每个样本都被翻转"""

    def random(self, n):
        return np.zeros(n)


def test_noise_free_gaussians8_sits_on_centers():
    dataset = synth_toy("gaussians8", n=64, noise=0.0)
    centers = toy_centers("gaussians8").astype(np.float32)
    distances = np.linalg.norm(dataset.samples[:, None, :] - centers[None], axis=2).min(axis=1)
    assert distances.max() < 1e-6


def test_idx_pixel_endpoints(tmp_path):
    images, labels = tmp_path / "img.idx", tmp_path / "lbl.idx"
    images.write_bytes(bytes([0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 255]))
    labels.write_bytes(bytes([0, 0, 0x08, 1, 0, 0, 0, 2, 0, 1]))
    dataset = parse_data_spec(f"idx:{images}:{labels}")
    np.testing.assert_array_equal(dataset.samples.reshape(-1), [-1.0, 1.0])

    labels.write_bytes(bytes([0, 0, 0x08, 1, 0, 0, 0, 3, 0, 1, 1]))
    with pytest.raises(DataFormatError):
        parse_data_spec(f"idx:{images}:{labels}")


def test_double_flip_is_identity(rng):
    x = rng.uniform(-1, 1, (3, 1, 4, 4))
    pipeline = AugmentationPipeline(flip=True)
    once = augment(x, pipeline, ForcedFlip())
    np.testing.assert_array_equal(once, x[..., ::-1])
    np.testing.assert_array_equal(augment(once, pipeline, ForcedFlip()), x)


def test_zero_pad_crop_is_identity(rng):
    x = rng.uniform(-1, 1, (2, 1, 4, 4))
    np.testing.assert_array_equal(pad_crop(x, 0, np.zeros((2, 2), dtype=int), fill=-1.0), x)


def test_pad_two_corner_crop_matches_hand_built():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    expected = np.full((4, 4), -1.0, dtype=np.float32)
    expected[2:, 2:] = x[0, 0, :2, :2]
    np.testing.assert_array_equal(pad_crop(x, 2, np.array([[0, 0]]), fill=-1.0)[0, 0], expected)


def test_identity_pipeline_rows_are_dataset_rows(toy_ds):
    loader = make_loader(toy_ds, batch_size=16)
    batch = loader.next()
    np.testing.assert_array_equal(batch.clf_x, toy_ds.samples[batch.clf_index])
    np.testing.assert_array_equal(batch.gen_x, toy_ds.samples[batch.gen_index])


def test_loader_is_deterministic(image_ds):
    a, b = make_loader(image_ds, batch_size=8, seed=5), make_loader(image_ds, batch_size=8, seed=5)
    for _ in range(4):
        first, second = a.next(), b.next()
        np.testing.assert_array_equal(first.clf_x, second.clf_x)
        np.testing.assert_array_equal(first.gen_index, second.gen_index)


def test_single_row_tail_joins_previous_batch(rng):
    dataset = Dataset(rng.uniform(-1, 1, (33, 2)), np.arange(33) % 2, 2, kind="toy")
    loader = make_loader(dataset, batch_size=16)
    assert loader.batches_per_epoch() == 2
    batches = list(loader.epoch_batches())
    assert [len(b.clf_index) for b in batches] == [16, 17]
    assert sorted(np.concatenate([b.clf_index for b in batches])) == list(range(33))
    assert [len(b.clf_index) for b in make_loader(dataset, batch_size=33).epoch_batches()] == [33]
    assert make_loader(dataset, batch_size=16, drop_last=True).batches_per_epoch() == 2
