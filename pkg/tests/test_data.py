import numpy as np
import pytest

from swinq import data
from swinq.data import (
    DatasetIndex,
    DecodeError,
    PreprocessSpec,
    bilinear_resize,
    calibration_samples,
    centroid_oracle_accuracy,
    decode_image,
    generate_synthetic,
    index_and_split,
    preprocess,
    read_ppm,
    write_ppm,
)


def checker(h, w):
    img = np.zeros((h, w, 3), np.uint8)
    img[::2, ::2] = 255
    return img


class TestPpm:
    def test_round_trip(self, tmp_path):
        img = checker(6, 4)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        assert np.array_equal(read_ppm(path), img)

    def test_header_comment_tolerated(self, tmp_path):
        img = np.full((2, 2, 3), 7, np.uint8)
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# comment\n2 2\n255\n" + img.tobytes())
        assert np.array_equal(read_ppm(path), img)

    def test_corrupt_file_mentions_path(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00")
        with pytest.raises(DecodeError, match="bad.ppm"):
            read_ppm(path)

    def test_unknown_suffix(self, tmp_path):
        path = tmp_path / "f.gif"
        path.write_bytes(b"GIF89a")
        with pytest.raises(DecodeError):
            decode_image(path)

    def test_png_round_trip_via_pillow(self, tmp_path):
        PIL = pytest.importorskip("PIL.Image")
        img = checker(5, 7)
        path = tmp_path / "x.png"
        PIL.fromarray(img).save(path)
        assert np.array_equal(decode_image(path), img)


class TestPreprocess:
    def test_already_cropped_identity_layout(self):
        img = checker(8, 8)
        spec = PreprocessSpec(resize_shorter=8, crop=8, mean=(0, 0, 0), std=(1, 1, 1))
        out = preprocess(img, spec)
        assert out.shape == (8, 8, 3)
        assert np.allclose(out, img.astype(np.float32) / 255.0, atol=1e-7)

    def test_constant_gray_normalization(self):
        img = np.full((8, 8, 3), 128, np.uint8)
        spec = PreprocessSpec(resize_shorter=8, crop=8, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
        out = preprocess(img, spec)
        assert np.allclose(out, (128 / 255 - 0.5) / 0.5, atol=1e-6)
        assert abs(float(out[0, 0, 0]) - 0.0039216) < 1e-4

    def test_two_to_one_aspect_resizes_shorter_side(self):
        img = checker(16, 32)
        spec = PreprocessSpec(resize_shorter=8, crop=8, mean=(0, 0, 0), std=(1, 1, 1))
        out = preprocess(img, spec)
        assert out.shape == (8, 8, 3)

    def test_crop_larger_than_resize_rejected(self):
        with pytest.raises(ValueError):
            PreprocessSpec(resize_shorter=8, crop=16)

    def test_bilinear_identity_when_same_size(self):
        img = np.random.default_rng(0).uniform(0, 255, (5, 5, 3)).astype(np.float32)
        assert np.array_equal(bilinear_resize(img, 5, 5), img)

    def test_bilinear_constant_preserved(self):
        img = np.full((4, 4, 3), 9.0, np.float32)
        assert np.allclose(bilinear_resize(img, 7, 9), 9.0, atol=1e-5)

    def test_output_is_f32(self):
        out = preprocess(checker(8, 8), PreprocessSpec(resize_shorter=8, crop=8))
        assert out.dtype == np.float32


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_synthetic(root, num_classes=4, per_class=30, size=16, seed=7)
    return root


class TestSplit:
    def test_fractions_at_100(self, tmp_path):
        root = tmp_path / "d"
        for c in range(2):
            d = root / f"class_{c}"
            d.mkdir(parents=True)
            for i in range(100):
                write_ppm(d / f"{i:03d}.ppm", np.full((2, 2, 3), i % 255, np.uint8))
        index = index_and_split(root, seed=0)
        for c in range(2):
            per = [s for s in index.samples if s.class_index == c]
            counts = {k: sum(1 for s in per if s.split == k) for k in ("train", "val", "test")}
            assert counts == {"train": 70, "val": 20, "test": 10}

    def test_fractions_at_10(self, tmp_path):
        root = tmp_path / "d"
        d = root / "only"
        d.mkdir(parents=True)
        for i in range(10):
            write_ppm(d / f"{i}.ppm", np.zeros((2, 2, 3), np.uint8))
        index = index_and_split(root, seed=1)
        counts = {k: len(index.split(k)) for k in ("train", "val", "test")}
        assert counts == {"train": 7, "val": 2, "test": 1}

    def test_deterministic_and_disjoint(self, corpus):
        a = index_and_split(corpus, seed=3)
        b = index_and_split(corpus, seed=3)
        assert a.to_manifest() == b.to_manifest()
        paths = [s.path for s in a.samples]
        assert len(paths) == len(set(paths)) == 120
        assert {s.split for s in a.samples} == {"train", "val", "test"}

    def test_different_seed_changes_assignment(self, corpus):
        a = index_and_split(corpus, seed=3)
        b = index_and_split(corpus, seed=4)
        assert a.to_manifest() != b.to_manifest()

    def test_classes_sorted(self, corpus):
        index = index_and_split(corpus, seed=0)
        assert index.classes == sorted(index.classes)

    def test_manifest_round_trip(self, corpus, tmp_path):
        index = index_and_split(corpus, seed=5)
        path = tmp_path / "manifest.json"
        index.save(path)
        again = DatasetIndex.load(path)
        assert again.to_manifest() == index.to_manifest()

    def test_calibration_set_is_first_train_images(self, corpus):
        index = index_and_split(corpus, seed=6)
        calib = calibration_samples(index, 32)
        assert calib == index.split("train")[:32]
        assert len(calib) == 32

    def test_empty_root_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            index_and_split(tmp_path, seed=0)


class TestSynthetic:
    def test_counts_and_layout(self, corpus):
        dirs = sorted(p.name for p in corpus.iterdir())
        assert dirs == [f"class_{c:02d}" for c in range(4)]
        assert sum(1 for _ in corpus.rglob("*.ppm")) == 120

    def test_determinism_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic(a, 2, 30, 8, seed=9)
        generate_synthetic(b, 2, 30, 8, seed=9)
        for pa in sorted(a.rglob("*.ppm")):
            pb = b / pa.relative_to(a)
            assert pa.read_bytes() == pb.read_bytes()

    def test_centroid_oracle_separability(self, corpus):
        assert centroid_oracle_accuracy(corpus) >= 0.95

    def test_parameter_validation(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic(tmp_path, 1, 30, 8, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic(tmp_path, 2, 10, 8, seed=0)

    def test_load_split_shapes(self, corpus):
        index = index_and_split(corpus, seed=2)
        spec = PreprocessSpec.synthetic(16)
        test = data.load_split(index, "test", spec)
        assert len(test) == len(index.split("test"))
        image, label = test[0]
        assert image.shape == (16, 16, 3) and image.dtype == np.float32
        assert 0 <= label < 4
