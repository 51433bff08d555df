import numpy as np
import pytest

from dpdnet.data import (Dataset, augment_batch, load_cifar, read_cifar_records, synth_dataset,
                         synth_templates)
from dpdnet.errors import CorruptDataError, FormatError, ShapeError
from dpdnet.tensor import make_rng


def _record(label_bytes, fill):
    pixels = (np.arange(3072) * fill % 256).astype(np.uint8)
    return bytes(label_bytes) + pixels.tobytes()


def test_cifar10_two_records(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(_record([3], 1) + _record([9], 7))
    images, labels = read_cifar_records(path, "cifar10")
    assert labels.tolist() == [3, 9]
    assert images.shape == (2, 3, 32, 32)
    # byte i of the pixel block is channel i // 1024, row (i % 1024) // 32, col i % 32
    assert images[0, 0, 0, 5] == 5 / 255
    assert images[0, 1, 0, 0] == (1024 % 256) / 255
    assert images[1, 2, 31, 31] == (3071 * 7 % 256) / 255
    assert images[1, 0, 1, 2] == (34 * 7 % 256) / 255


def test_cifar100_uses_fine_label(tmp_path):
    path = tmp_path / "train.bin"
    path.write_bytes(_record([2, 57], 1) + _record([19, 99], 3))
    images, labels = read_cifar_records(path, "cifar100")
    assert labels.tolist() == [57, 99]
    assert images[1, 0, 0, 1] == 3 / 255


def test_truncated_file(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(_record([1], 1)[:-1])
    with pytest.raises(FormatError):
        read_cifar_records(path)


def test_label_out_of_range(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(_record([1], 1) + _record([10], 1))
    with pytest.raises(CorruptDataError):
        read_cifar_records(path)


def test_load_cifar_directory(tmp_path):
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    for i in range(1, 6):
        (sub / f"data_batch_{i}.bin").write_bytes(_record([i], i) + _record([0], 2))
    (sub / "test_batch.bin").write_bytes(_record([4], 5))
    train, test = load_cifar(tmp_path, "cifar10")
    assert len(train) == 10 and len(test) == 1
    np.testing.assert_allclose(train.channel_mean, train.images.mean(axis=(0, 2, 3)))
    np.testing.assert_array_equal(test.channel_mean, train.channel_mean)
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path / "nowhere", "cifar10")


def test_synth_histogram():
    d = synth_dataset(make_rng(0), 10, 20, 32)
    assert len(d) == 200
    assert np.bincount(d.labels).tolist() == [20] * 10
    assert d.images.min() >= 0 and d.images.max() <= 1


def test_synth_noiseless_is_separable():
    d = synth_dataset(make_rng(1), 10, 5, 32, noise=0.0)
    t = synth_templates(10, 32)
    dist = ((d.images[:, None] - t[None]) ** 2).sum(axis=(2, 3, 4))
    assert (dist.argmin(axis=1) == d.labels).all()


def test_synth_seeds():
    a = synth_dataset(make_rng(0), 10, 20, 32)
    b = synth_dataset(make_rng(1), 10, 20, 32)
    assert not np.array_equal(a.images, b.images)
    assert np.array_equal(np.bincount(a.labels), np.bincount(b.labels))
    c = synth_dataset(make_rng(0), 10, 20, 32)
    assert np.array_equal(a.images, c.images)


def test_augment_centre_crop_is_identity(rng):
    x = rng.uniform(size=(3, 3, 32, 32))
    y = augment_batch(rng, x, offsets=np.full((3, 2), 4), flips=np.zeros(3, bool))
    np.testing.assert_array_equal(x, y)


def test_augment_zero_image(rng):
    assert not augment_batch(rng, np.zeros((5, 3, 32, 32))).any()


def test_augment_flip_and_shift(rng):
    x = rng.uniform(size=(1, 3, 32, 32))
    y = augment_batch(rng, x, offsets=[[4, 4]], flips=[True])
    np.testing.assert_array_equal(y, x[..., ::-1])
    y = augment_batch(rng, x, offsets=[[0, 8]], flips=[False])
    np.testing.assert_array_equal(y[..., 4:, :28], x[..., :28, 4:])
    assert not y[..., :4, :].any() and not y[..., 28:].any()


def test_augment_distribution():
    # a single lit pixel reveals the crop offset and the flip of every sample
    n = 2000
    x = np.zeros((n, 3, 32, 32))
    x[:, :, 10, 4] = 1.0
    y = augment_batch(make_rng(0), x)
    _, rows, cols = np.nonzero(y[:, 0])
    assert rows.size == n  # pad 4 keeps the pixel inside every crop
    dy = 10 + 4 - rows
    flipped = cols > 15  # unflipped columns land in 0..8, mirrored ones in 23..31
    dx = np.where(flipped, 4 + 4 - (31 - cols), 4 + 4 - cols)
    assert 0.45 < flipped.mean() < 0.55
    # chi-square goodness of fit against uniform 0..8; 26.12 is the 0.999 quantile with 8 dof
    for off in (dy, dx):
        counts = np.bincount(off, minlength=9)
        assert counts.size == 9
        expected = n / 9
        assert ((counts - expected) ** 2 / expected).sum() < 26.12


def test_augment_wrong_size(rng):
    with pytest.raises(ShapeError):
        augment_batch(rng, np.zeros((1, 3, 28, 28)))


def test_dataset_validation():
    with pytest.raises(CorruptDataError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 3], 3, np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 1], 3, np.zeros(3), np.array([1.0, 0.0, 1.0]))
