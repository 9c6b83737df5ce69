import os

import numpy as np
import pytest

from mimetic_mlp.data import (
    CIFAR_MEAN,
    CIFAR_STD,
    Dataset,
    FormatError,
    SyntheticTaskSpec,
    augment,
    batches,
    encode_cifar10_bytes,
    hflip,
    load_cifar10,
    load_cifar10_file,
    make_synthetic,
    pad_crop,
    parse_cifar10_bytes,
    synthetic_templates,
)

# least-squares linear probe accuracy on the default synthetic task (seed 0), measured once
LINEAR_PROBE_ACC_DEFAULT = 1.0


def test_crafted_record(tmp_path):
    record = bytes([3]) + bytes([255]) * 3072
    assert len(record) == 3073
    path = tmp_path / "one.bin"
    path.write_bytes(record)
    ds = load_cifar10_file(path)
    assert ds.labels.tolist() == [3]
    for c in range(3):
        np.testing.assert_allclose(ds.images[0, c], (1.0 - CIFAR_MEAN[c]) / CIFAR_STD[c])


def test_channel_plane_order():
    record = bytearray([1]) + bytearray(3072)
    record[1 + 1024 + 5] = 200  # G plane, row 0, col 5
    images, labels = parse_cifar10_bytes(bytes(record))
    assert images[0, 1, 0, 5] == 200 and images.sum() == 200


def test_truncated_and_bad_label():
    with pytest.raises(FormatError):
        parse_cifar10_bytes(bytes(3072))
    with pytest.raises(FormatError, match="label"):
        parse_cifar10_bytes(bytes([10]) + bytes(3072))


def _fake_cifar_dir(tmp_path, per_file=4):
    rng = np.random.default_rng(0)
    files = {}
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        imgs = rng.integers(0, 256, size=(per_file, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, size=per_file)
        (tmp_path / name).write_bytes(encode_cifar10_bytes(imgs, labels))
        files[name] = (imgs, labels)
    return files


def test_load_cifar10_directory_roundtrip(tmp_path):
    files = _fake_cifar_dir(tmp_path)
    train, test = load_cifar10(tmp_path)
    assert len(train) == 20 and len(test) == 4
    np.testing.assert_array_equal(test.labels, files["test_batch.bin"][1])
    restored = np.rint(test.denormalize() * 255).astype(np.uint8)
    np.testing.assert_array_equal(restored, files["test_batch.bin"][0])


def test_synthetic_roundtrip_through_cifar_layout(tmp_path):
    spec = SyntheticTaskSpec(image_size=32, samples_per_class=2, test_samples_per_class=1)
    train, _ = make_synthetic(spec, 3)
    pix = np.clip((train.images - train.images.min()) / np.ptp(train.images), 0, 1)
    quantized = np.rint(pix * 255).astype(np.uint8)
    path = tmp_path / "syn.bin"
    path.write_bytes(encode_cifar10_bytes(quantized, train.labels))
    back = load_cifar10_file(path)
    np.testing.assert_array_equal(back.labels, train.labels)
    np.testing.assert_array_equal(np.rint(back.denormalize() * 255).astype(np.uint8), quantized)


def test_normalization_invertible():
    pix = np.random.default_rng(1).random((3, 3, 32, 32))
    from mimetic_mlp.data import normalize

    ds = Dataset(normalize(pix), np.zeros(3, dtype=np.int64), "train", 10, CIFAR_MEAN, CIFAR_STD)
    np.testing.assert_allclose(ds.denormalize(), pix, atol=1e-6)


@pytest.mark.skipif(not os.environ.get("MIMETIC_DATA_DIR"), reason="real CIFAR-10 not available")
def test_real_cifar_sizes():
    train, test = load_cifar10(os.environ["MIMETIC_DATA_DIR"])
    assert len(train) == 50000 and len(test) == 10000


# -- synthetic task ---------------------------------------------------------

def test_synthetic_noise_free_is_templates():
    spec = SyntheticTaskSpec(noise_std=0.0, samples_per_class=3, test_samples_per_class=2)
    train, test = make_synthetic(spec, 0)
    templates = synthetic_templates(spec)
    np.testing.assert_array_equal(train.images, templates[train.labels])
    flat_t = templates.reshape(10, -1)
    d = ((test.images.reshape(len(test), 1, -1) - flat_t[None]) ** 2).sum(-1)
    assert np.mean(np.argmin(d, axis=1) == test.labels) == 1.0


def test_synthetic_shifted_samples_are_rolled_templates():
    spec = SyntheticTaskSpec(image_size=8, noise_std=0.0, samples_per_class=4, test_samples_per_class=1,
                             max_shift=7)
    train, _ = make_synthetic(spec, 1)
    templates = synthetic_templates(spec)
    rolled = 0
    for img, label in zip(train.images, train.labels):
        matches = [(dy, dx) for dy in range(8) for dx in range(8)
                   if np.allclose(img, np.roll(templates[label], (dy, dx), axis=(1, 2)))]
        assert matches
        rolled += matches[0] != (0, 0)
    assert rolled > len(train) // 2
    with pytest.raises(ValueError):
        SyntheticTaskSpec(image_size=8, max_shift=8)


def test_synthetic_deterministic_and_balanced():
    spec = SyntheticTaskSpec(samples_per_class=5, test_samples_per_class=5)
    a, b = make_synthetic(spec, 4), make_synthetic(spec, 4)
    assert a[0].images.tobytes() == b[0].images.tobytes()
    assert np.bincount(a[0].labels).tolist() == [5] * 10
    assert not np.array_equal(a[0].images, a[1].images)


def test_synthetic_linear_probe_fixture():
    train, test = make_synthetic(SyntheticTaskSpec(), 0)
    X = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    W, *_ = np.linalg.lstsq(X, np.eye(10)[train.labels], rcond=None)
    Xt = np.c_[test.images.reshape(len(test), -1), np.ones(len(test))]
    acc = np.mean(np.argmax(Xt @ W, axis=1) == test.labels)
    assert acc > 0.1
    assert acc == pytest.approx(LINEAR_PROBE_ACC_DEFAULT, abs=0.01)


# -- augmentation -----------------------------------------------------------

def test_flip_twice_identity_and_center_crop():
    img = np.random.default_rng(0).standard_normal((3, 8, 8))
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    np.testing.assert_array_equal(pad_crop(img, 4, 4), img)


def test_augment_disabled_and_shape_preserving():
    imgs = np.random.default_rng(0).standard_normal((6, 3, 8, 8))
    assert augment(imgs, np.random.default_rng(1), enabled=False) is imgs
    out = augment(imgs, np.random.default_rng(1))
    assert out.shape == imgs.shape
    assert not np.array_equal(out, imgs)


def test_augment_matches_reference_per_image():
    imgs = np.random.default_rng(2).standard_normal((5, 3, 8, 8))
    rng = np.random.default_rng(3)
    flips = rng.random(5) < 0.5
    offs = rng.integers(0, 9, size=(5, 2))
    expected = [pad_crop(hflip(im) if f else im, *o) for im, f, o in zip(imgs, flips, offs)]
    np.testing.assert_array_equal(augment(imgs, np.random.default_rng(3)), np.array(expected))


# -- batching ---------------------------------------------------------------

def _tiny(n=10):
    return Dataset(np.arange(n * 3.0).reshape(n, 3, 1, 1), np.arange(n) % 10, "train", 10)


def test_batch_sizes_keep_partial():
    assert [len(y) for _, y in batches(_tiny(), 4, shuffle_seed=0)] == [4, 4, 2]


def test_batches_deterministic_and_permutation():
    ds = _tiny()
    a = np.concatenate([y for _, y in batches(ds, 3, shuffle_seed=5, epoch=2)])
    b = np.concatenate([y for _, y in batches(ds, 3, shuffle_seed=5, epoch=2)])
    np.testing.assert_array_equal(a, b)
    assert sorted(a.tolist()) == list(range(10))
    c = np.concatenate([y for _, y in batches(ds, 3, shuffle_seed=5, epoch=3)])
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        next(batches(ds, 0))
