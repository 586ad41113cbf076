import json

import numpy as np
import pytest
import torch

from noisy_i2i.datasets import (CleanLabelAccessError, LabeledDataset, LabeledSample, SyntheticShapesSpec,
                                augment_hflip, export_image_folder, generate_synthetic, load_image_folder,
                                save_split_manifest, scan_domains, split, with_noisy_labels)
from noisy_i2i.errors import InvalidInputError, InvalidSpecError


def dummy(n_per_class, c):
    img = np.zeros((4, 4, 3), np.float32)
    return [LabeledSample(img, d, d, f"{d}_{i}") for d in range(c) for i in range(n_per_class)]


def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticShapesSpec(num_domains=3, samples_per_domain=5, seed=3))
    b = generate_synthetic(SyntheticShapesSpec(num_domains=3, samples_per_domain=5, seed=3))
    assert all(np.array_equal(x.image, y.image) and x.sample_id == y.sample_id for x, y in zip(a, b))
    c = generate_synthetic(SyntheticShapesSpec(num_domains=3, samples_per_domain=5, seed=4))
    assert not np.array_equal(a[0].image, c[0].image)


def test_synthetic_layout():
    s = generate_synthetic(SyntheticShapesSpec(num_domains=4, samples_per_domain=6, image_size=16))
    assert len(s) == 24
    assert s[0].image.shape == (16, 16, 3)
    assert s[0].image.min() >= -1 and s[0].image.max() <= 1
    assert [x.clean_label for x in s].count(3) == 6
    assert len({x.sample_id for x in s}) == 24


def test_synthetic_domains_differ_by_hue():
    s = generate_synthetic(SyntheticShapesSpec(num_domains=3, samples_per_domain=20, image_size=32))
    centre = {d: np.mean([x.image[12:20, 12:20].mean((0, 1)) for x in s if x.clean_label == d], 0) for d in range(3)}
    assert np.argmax(centre[0]) == 0 and np.argmax(centre[1]) == 1 and np.argmax(centre[2]) == 2


def test_spec_validation():
    with pytest.raises(InvalidSpecError):
        SyntheticShapesSpec(num_domains=9)
    with pytest.raises(InvalidSpecError):
        SyntheticShapesSpec(samples_per_domain=0)


def test_ninety_ten_split_sizes():
    # 4824 images, 8 classes of 603
    train, test = split(dummy(603, 8), 0.9, seed=0)
    assert (len(train), len(test)) == (4341, 483)
    counts = np.bincount([s.clean_label for s in train])
    assert counts.max() - counts.min() <= 1


def test_split_exact_train_size_and_disjoint():
    samples = dummy(220, 3)
    train, test = split(samples, train_size=600, seed=1)
    assert (len(train), len(test)) == (600, 60)
    assert not {s.sample_id for s in train} & {s.sample_id for s in test}
    assert np.bincount([s.clean_label for s in test]).tolist() == [20, 20, 20]


def test_split_is_seeded():
    samples = dummy(30, 3)
    ids = lambda part: [s.sample_id for s in part]  # noqa: E731
    assert ids(split(samples, seed=5)[0]) == ids(split(samples, seed=5)[0])
    assert ids(split(samples, seed=5)[0]) != ids(split(samples, seed=6)[0])
    with pytest.raises(InvalidSpecError):
        split(samples, 1.0)
    with pytest.raises(InvalidSpecError):
        split(samples, train_size=90)


def test_hflip():
    x = torch.arange(16.0).reshape(1, 1, 4, 4).repeat(200, 1, 1, 1)
    out = augment_hflip(x, torch.Generator().manual_seed(0))
    flipped = torch.tensor([torch.equal(o, x[0].flip(-1)) for o in out])
    kept = torch.tensor([torch.equal(o, x[0]) for o in out])
    assert bool((flipped | kept).all())
    assert 60 < int(flipped.sum()) < 140
    assert torch.equal(augment_hflip(x, p=0.0), x)
    assert torch.equal(augment_hflip(x, p=1.0), x.flip(-1))


def test_training_view_hides_clean_labels():
    samples = with_noisy_labels(dummy(4, 3), [1] * 12)
    ds = LabeledDataset(samples, expose_clean=True)
    assert ds.clean_labels.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    view = ds.training_view()
    with pytest.raises(CleanLabelAccessError):
        view.clean_labels
    assert view.noisy_labels.tolist() == [1] * 12
    batches = list(view.batches(5))
    assert len(batches) == 2 and all(len(b) == 2 for b in batches)
    assert all(len(b) == 3 for b in ds.batches(5))
    assert len(list(view.batches(5, drop_last=False))) == 3
    assert ds.expose_clean  # the original view is untouched


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        LabeledDataset([])
    bad = [LabeledSample(np.full((2, 2, 3), 2.0, np.float32), 0, 0, "x")]
    with pytest.raises(InvalidInputError):
        LabeledDataset(bad)
    with pytest.raises(InvalidInputError):
        with_noisy_labels(dummy(2, 2), [0])


def test_multilabel_tensor():
    img = np.zeros((4, 4, 3), np.float32)
    ds = LabeledDataset([LabeledSample(img, [1, 0], [1, 1], "a"), LabeledSample(img, [0, 1], [0, 1], "b")])
    assert ds.noisy_labels.dtype == torch.float32 and ds.noisy_labels.shape == (2, 2)


def test_image_folder_round_trip(tmp_path):
    samples = generate_synthetic(SyntheticShapesSpec(num_domains=3, samples_per_domain=3, image_size=16))
    export_image_folder(samples, tmp_path, ["angry", "happy", "sad"])
    (tmp_path / "happy" / "broken.png").write_bytes(b"not an image")
    (tmp_path / "happy" / "notes.txt").write_text("ignored")
    loaded = load_image_folder(tmp_path, image_size=16)
    assert scan_domains(tmp_path) == ["angry", "happy", "sad"]
    assert len(loaded) == 9
    assert [s.clean_label for s in loaded] == [0] * 3 + [1] * 3 + [2] * 3
    # 8-bit quantization only
    assert np.abs(loaded[0].image - samples[0].image).max() <= 1 / 127.5 + 1e-6


def test_image_folder_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        scan_domains(tmp_path / "missing")
    with pytest.raises(InvalidInputError):
        scan_domains(tmp_path)
    (tmp_path / "empty").mkdir()
    with pytest.raises(InvalidInputError):
        load_image_folder(tmp_path)
    with pytest.raises(InvalidSpecError):
        load_image_folder(tmp_path, channels=2)


def test_split_manifest(tmp_path):
    train, test = split(dummy(10, 2), 0.8)
    save_split_manifest(tmp_path / "m.json", train, test)
    m = json.loads((tmp_path / "m.json").read_text())
    assert sum(v == "train" for v in m.values()) == 16 and len(m) == 20
