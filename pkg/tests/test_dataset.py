import hashlib
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image as PILImage

from onepixel.dataset import (
    CIFAR_RECORD,
    Image,
    LabeledImage,
    gen_weights,
    read_cifar10,
    read_pgm,
    read_ppm,
    synth_dataset,
    write_cifar10,
    write_pgm,
    write_ppm,
)
from onepixel.errors import FormatError, ParameterError
from onepixel.model import bundled_manifest, serialize_weights

LENET_SEED42_SHA256 = "4a8bb798606ad4671ef7b237162956fe1a4eebabc90eb6e3ccb95fe3422c45c7"


class TestCifar:
    def test_empty(self):
        assert read_cifar10(b"") == []

    def test_hand_built_record(self):
        record = bytes([3]) + b"\xff" * 1024 + b"\x00" * 2048
        (s,) = read_cifar10(record)
        assert s.label == 3
        assert tuple(s.image.pixels[0, 0]) == (255, 0, 0)
        assert tuple(s.image.pixels[31, 31]) == (255, 0, 0)

    def test_plane_layout(self):
        # R plane holds the row index, G the column, B constant 7
        r = np.repeat(np.arange(32, dtype=np.uint8), 32)
        g = np.tile(np.arange(32, dtype=np.uint8), 32)
        record = bytes([9]) + r.tobytes() + g.tobytes() + bytes([7]) * 1024
        (s,) = read_cifar10(record)
        assert tuple(s.image.pixels[5, 17]) == (5, 17, 7)

    def test_bad_length(self):
        with pytest.raises(FormatError) as err:
            read_cifar10(b"\x00" * 3074)
        assert err.value.offset == 1

    def test_bad_label(self):
        data = bytes([1]) + bytes(3072) + bytes([10]) + bytes(3072)
        with pytest.raises(FormatError, match="record 1"):
            read_cifar10(data)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 2**32 - 1)), max_size=4))
    def test_round_trip(self, specs):
        data = b"".join(
            bytes([label]) + np.random.default_rng(seed).integers(0, 256, 3072, dtype=np.uint8).tobytes()
            for label, seed in specs
        )
        assert write_cifar10(read_cifar10(data)) == data

    @settings(max_examples=50, deadline=None)
    @given(st.binary(max_size=2 * CIFAR_RECORD + 5))
    def test_malformed_never_truncates(self, data):
        ok_length = len(data) % CIFAR_RECORD == 0
        ok_labels = all(data[i] <= 9 for i in range(0, len(data), CIFAR_RECORD))
        if ok_length and ok_labels:
            assert len(read_cifar10(data)) == len(data) // CIFAR_RECORD
        else:
            with pytest.raises(FormatError):
                read_cifar10(data)


def _pil_bytes(array, mode, fmt="PPM"):
    buf = io.BytesIO()
    PILImage.fromarray(array, mode).save(buf, format=fmt)
    return buf.getvalue()


class TestNetpbm:
    def test_single_pixel(self):
        img = read_ppm(b"P6\n1 1\n255\n" + bytes([10, 20, 30]))
        assert img.pixels.shape == (1, 1, 3)
        assert tuple(img.pixels[0, 0]) == (10, 20, 30)

    def test_wrong_magic(self):
        with pytest.raises(FormatError):
            read_ppm(b"P5\n1 1\n255\n\x00")

    def test_independent_writer(self):
        px = np.array([[[1, 2, 3], [4, 5, 6]], [[250, 251, 252], [0, 128, 255]]], dtype=np.uint8)
        img = read_ppm(_pil_bytes(px, "RGB"))
        np.testing.assert_array_equal(img.pixels, px)
        back = np.asarray(PILImage.open(io.BytesIO(write_ppm(img))))
        np.testing.assert_array_equal(back, px)

    def test_header_comments(self):
        img = read_ppm(b"P6 # comment\n2 # w\n1\n255\n" + bytes(6))
        assert img.pixels.shape == (1, 2, 3)

    @pytest.mark.parametrize("data", [
        b"P6\n1 1\n65535\n" + bytes(6),
        b"P6\n2 2\n255\n" + bytes(11),
        b"P6\n1 1\n255\n" + bytes(4),
        b"P6\n1 1\n",
        b"P6\n0 1\n255\n",
    ])
    def test_malformed(self, data):
        with pytest.raises(FormatError):
            read_ppm(data)

    def test_pgm_round_trip(self):
        gray = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        data = write_pgm(gray)
        np.testing.assert_array_equal(read_pgm(data), gray)
        np.testing.assert_array_equal(np.asarray(PILImage.open(io.BytesIO(data))), gray)


class TestImage:
    def test_normalized_view(self):
        img = Image(np.array([[[0, 51, 255]]], dtype=np.uint8))
        np.testing.assert_allclose(img.normalized, [[[0.0, 0.2, 1.0]]])
        np.testing.assert_array_equal(np.rint(img.normalized * 255).astype(np.uint8), img.pixels)

    def test_immutable(self):
        img = Image(np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1

    def test_bad_shape(self):
        with pytest.raises(ParameterError):
            Image(np.zeros((2, 2), dtype=np.uint8))


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(1, 1), synth_dataset(1, 1)
        assert a[0].image.pixels.tobytes() == b[0].image.pixels.tobytes()
        assert a[0].label == b[0].label

    def test_seed_matters(self):
        assert synth_dataset(1, 1)[0].image != synth_dataset(2, 1)[0].image

    def test_label_histogram(self):
        labels = [s.label for s in synth_dataset(7, 100)]
        counts = np.bincount(labels, minlength=10)
        assert counts.min() >= 7 and counts.max() <= 13, counts

    def test_prefix_stable(self):
        a = synth_dataset(7, 3)
        b = synth_dataset(7, 10)
        assert [s.image for s in a] == [s.image for s in b[:3]]

    def test_n_must_be_positive(self):
        with pytest.raises(ParameterError):
            synth_dataset(1, 0)

    def test_nearest_centroid_beats_chance(self):
        # independent classifier on 4x4 block means; chance is 10%
        def feats(samples):
            return np.stack([s.image.normalized.reshape(4, 8, 4, 8, 3).mean(axis=(1, 3)).ravel() for s in samples])

        fit, test = synth_dataset(100, 300), synth_dataset(7, 200)
        x, y = feats(fit), np.array([s.label for s in fit])
        centroids = np.stack([x[y == c].mean(axis=0) for c in range(10)])
        xt = feats(test)
        pred = np.argmin(((xt[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
        acc = np.mean(pred == [s.label for s in test])
        assert acc > 0.3, acc


class TestGenWeights:
    def test_deterministic(self):
        text = bundled_manifest("resnet-mini")
        assert serialize_weights(gen_weights(5, text)) == serialize_weights(gen_weights(5, text))

    def test_block_sizes(self):
        w = gen_weights(0, "0 input h=8 w=8 c=3\n1 conv out=8 k=3 w=c\n2 flatten\n3 softmax")
        assert w["c.w"].size == 216 and w["c.b"].size == 8
        assert not w["c.b"].any()

    def test_pinned_lenet_checksum(self):
        data = serialize_weights(gen_weights(42, bundled_manifest("lenet-small")))
        assert hashlib.sha256(data).hexdigest() == LENET_SEED42_SHA256

    def test_he_scaling_and_batchnorm(self):
        w = gen_weights(0, bundled_manifest("resnet-mini"))
        # fan_in = 16 * 9, expect std sqrt(2/144)
        assert np.std(w["b1c1.w"]) == pytest.approx(np.sqrt(2 / 144), rel=0.05)
        assert abs(np.mean(w["b1c1.w"])) < 0.01
        np.testing.assert_array_equal(w["b1bn1.gamma"], 1)
        np.testing.assert_array_equal(w["b1bn1.var"], 1)
        np.testing.assert_array_equal(w["b1bn1.beta"], 0)
        np.testing.assert_array_equal(w["b1bn1.mean"], 0)


def test_labeled_image_fields():
    s = LabeledImage(Image(np.zeros((1, 1, 3), dtype=np.uint8)), 2, "x")
    assert (s.label, s.id) == (2, "x")
