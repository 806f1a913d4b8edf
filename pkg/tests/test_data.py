import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proteus.data import (HEADER_SIZE, AugRecipe, ContainerError, DatasetContainer, ToySpec, augment_train,
                          decode_container, encode_container, epoch_order, eval_view, gen_single_image_dataset,
                          gen_toy_dataset, hflip, iter_batches, load_container, make_source_image, merge,
                          normalize, resize_bilinear, sample_crop, save_container, select_classes, subsample)
from proteus.errors import ConfigError
from proteus.eval import fit_logreg, accuracy
from proteus.eval import _predict


def small(n=2, labels=True, c=1, s=8, seed=0):
    r = np.random.default_rng(seed)
    imgs = r.integers(0, 256, size=(n, c, s, s), dtype=np.uint8)
    return DatasetContainer(imgs, r.integers(0, 3, n) if labels else None, 3 if labels else 0)


def test_header_is_21_bytes():
    assert HEADER_SIZE == 21


def test_file_size_arithmetic():
    assert len(encode_container(small(2))) == 21 + 2 * 2 + 2 * 64


def test_save_load_round_trip(tmp_path):
    ds = small(5)
    ds.provenance["note"] = "x"
    save_container(ds, tmp_path / "a.pxds")
    back = load_container(tmp_path / "a.pxds")
    assert back.equals(ds)
    assert back.provenance == {"note": "x"}
    assert encode_container(back) == encode_container(ds)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.booleans(), st.integers(1, 3), st.integers(1, 9), st.integers(0, 999))
def test_encode_decode_round_trip(n, labels, c, s, seed):
    ds = small(n, labels, c, s, seed)
    buf = encode_container(ds)
    assert encode_container(decode_container(buf)) == buf


def test_truncated_names_missing_bytes():
    buf = encode_container(small(2))
    with pytest.raises(ContainerError, match="missing 10 bytes"):
        decode_container(buf[:-10])


@pytest.mark.parametrize("mutate,msg", [(lambda b: b"XXXX" + b[4:], "magic"), (lambda b: b + b"\0", "trailing"),
                                        (lambda b: b[:10], "header")])
def test_corruption_detected(mutate, msg):
    with pytest.raises(ContainerError, match=msg):
        decode_container(mutate(encode_container(small(2))))


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError):
        DatasetContainer(np.zeros((1, 1, 2, 2)), [5], 3)


def test_container_is_immutable():
    ds = small(2)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1


def test_label_reads_counted():
    ds = small(2)
    assert ds.label_reads == 0
    _ = ds.labels
    assert ds.label_reads == 1


def test_toy_counts_and_balance():
    ds = gen_toy_dataset(ToySpec(classes=10, per_class=50))
    assert len(ds) == 500
    assert np.all(np.bincount(ds.labels, minlength=10) == 50)


def test_toy_is_deterministic():
    a = encode_container(gen_toy_dataset(ToySpec(seed=3, per_class=5)))
    b = encode_container(gen_toy_dataset(ToySpec(seed=3, per_class=5)))
    assert a == b


def test_toy_pixel_logistic_regression_separates():
    ds = gen_toy_dataset(ToySpec(classes=10, per_class=50))
    x = ds.images.reshape(len(ds), -1).astype(np.float64) / 255.0
    x = (x - x.mean(0)) / (x.std(0) + 1e-12)
    w, _ = fit_logreg(x, ds.labels.astype(np.int64), 10, 1e-4, max_iter=300)
    assert accuracy(_predict(w, x, 10), ds.labels) >= 0.95


def test_single_image_count_and_unlabeled():
    ds = gen_single_image_dataset(make_source_image(64), 1000, AugRecipe(output_size=16), seed=0)
    assert len(ds) == 1000 and not ds.has_labels


def test_single_image_crops_are_diverse():
    ds = gen_single_image_dataset(make_source_image(64), 100, AugRecipe(output_size=16), seed=1)
    flat = ds.images.reshape(100, -1)
    same = sum(np.array_equal(flat[i], flat[j]) for i in range(100) for j in range(i + 1, 100))
    assert same <= 0.01 * (100 * 99 / 2)


def test_degenerate_recipe_gives_full_resizes():
    src = make_source_image(32)
    recipe = AugRecipe(crop_scale=(1, 1), crop_aspect=(1, 1), hflip_prob=0.0, output_size=16)
    ds = gen_single_image_dataset(src, 5, recipe, seed=0)
    for img in ds.images[1:]:
        assert np.array_equal(img, ds.images[0])
    assert sample_crop(32, 32, recipe, np.random.default_rng(0)) == (0, 0, 32, 32)


def test_resize_identity_and_constant():
    x = np.random.default_rng(0).random((2, 5, 5))
    np.testing.assert_allclose(resize_bilinear(x, 5, 5), x, atol=1e-12)
    np.testing.assert_allclose(resize_bilinear(np.full((1, 8, 8), 3.0), 3, 5), 3.0)


def test_hflip_involution():
    x = np.random.default_rng(0).random((3, 4, 5))
    np.testing.assert_array_equal(hflip(hflip(x)), x)


def test_constant_image_normalisation():
    mean, std = np.array([0.4, 0.5, 0.6]), np.array([0.2, 0.25, 0.3])
    img = np.full((3, 16, 16), 128, dtype=np.uint8)
    recipe = AugRecipe(output_size=8)
    out = augment_train(img, recipe, np.random.default_rng(0), mean, std)
    np.testing.assert_allclose(out, ((128 / 255 - mean) / std)[:, None, None] * np.ones((3, 8, 8)), atol=1e-12)


def test_subsample_identity_fraction():
    ds = gen_toy_dataset(ToySpec(per_class=5))
    out = subsample(ds, "per_class_fraction", 1.0)
    assert sorted(map(bytes, out.images)) == sorted(map(bytes, ds.images))


def test_subsample_class_fraction_reindexes():
    ds = gen_toy_dataset(ToySpec(per_class=5))
    out = subsample(ds, "class_fraction", 0.2, seed=1)
    assert out.class_count == 2
    assert set(out.labels.tolist()) == {0, 1}
    assert len(out.provenance["kept_classes"]) == 2


def test_subsample_per_class_counts():
    out = subsample(gen_toy_dataset(ToySpec(per_class=50)), "per_class_fraction", 0.5)
    assert len(out) == 250


def test_subsample_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        subsample(small(3), "class_fraction", 0.0)


def test_select_classes_order():
    ds = gen_toy_dataset(ToySpec(per_class=3))
    out = select_classes(ds, [7, 2])
    assert len(out) == 6 and out.class_count == 2
    np.testing.assert_array_equal(out.images[:3], ds.images[6:9])


def test_merge_examples():
    a, b = small(3, labels=False, seed=1), small(4, labels=False, seed=2)
    assert np.array_equal(merge([a]).images, a.images)
    m = merge([a, b])
    assert len(m) == 7
    np.testing.assert_array_equal(m.images[:3], a.images)
    np.testing.assert_array_equal(m.images[3:], b.images)
    assert m.images.nbytes == a.images.nbytes + b.images.nbytes


def test_merge_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        merge([small(1, s=8), small(1, s=4)])


def test_epoch_order_depends_only_on_seed_and_epoch():
    assert np.array_equal(epoch_order(10, 1, 2), epoch_order(10, 1, 2))
    assert not np.array_equal(epoch_order(50, 1, 2), epoch_order(50, 1, 3))
    batches = list(iter_batches(10, 3, 0, 0))
    assert len(batches) == 3 and all(len(b) == 3 for b in batches)


def test_eval_view_uses_recorded_stats():
    ds = gen_toy_dataset(ToySpec(per_class=2))
    mean, std = ds.provenance["mean"], ds.provenance["std"]
    np.testing.assert_allclose(eval_view(ds, [0])[0], normalize(ds.images[0], mean, std))
