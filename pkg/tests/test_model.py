import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onepixel import tensor
from onepixel.dataset import gen_weights, synth_dataset
from onepixel.errors import ConfigError, FormatError, ShapeError
from onepixel.model import (
    BUNDLED_MANIFESTS,
    ModelOutput,
    build_model,
    bundled_manifest,
    forward,
    load_weights,
    parse_manifest,
    predict,
    serialize_weights,
)

from conftest import IDENTITY_NET
from oracles import conv2d_loops, dense_loops, pool_loops

GOLDEN = json.loads((Path(__file__).parent / "golden" / "lenet_small_forward.json").read_text())


def handmade_file(blocks, version=1):
    """Independent .opxw writer built from the byte layout, not the library."""
    out = b"OPXW" + struct.pack("<I", version) + struct.pack("<I", len(blocks))
    for name, dims, values in blocks:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(dims))
        out += b"".join(struct.pack("<I", d) for d in dims)
        out += b"".join(struct.pack("<f", v) for v in values)
    return out


class TestWeightFile:
    def test_empty_store(self):
        assert load_weights(handmade_file([])) == {}

    def test_single_block(self):
        data = handmade_file([("conv1.w", (2, 1, 1, 1), [1.0, 2.0])])
        assert data[-8:] == bytes.fromhex("0000803f00000040")
        store = load_weights(data)
        assert list(store) == ["conv1.w"]
        assert store["conv1.w"].shape == (2, 1, 1, 1)
        np.testing.assert_array_equal(store["conv1.w"].ravel(), [1.0, 2.0])
        assert serialize_weights(store) == data

    def test_bad_magic(self):
        with pytest.raises(FormatError) as err:
            load_weights(b"XXXX" + handmade_file([])[4:])
        assert err.value.offset == 0

    def test_unsupported_version(self):
        with pytest.raises(FormatError) as err:
            load_weights(handmade_file([], version=2))
        assert err.value.offset == 4

    def test_truncated(self):
        data = handmade_file([("a", (3,), [1.0, 2.0, 3.0])])
        for cut in range(len(data)):
            with pytest.raises(FormatError):
                load_weights(data[:cut])

    def test_trailing_garbage(self):
        data = handmade_file([("a", (1,), [1.0])])
        with pytest.raises(FormatError) as err:
            load_weights(data + b"\x00")
        assert err.value.offset == len(data)

    def test_dimension_overflow(self):
        data = b"OPXW" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"a" + struct.pack("<B", 2)
        data += struct.pack("<II", 0xFFFFFFFF, 0xFFFFFFFF)
        with pytest.raises(FormatError, match="overflow"):
            load_weights(data)

    @settings(max_examples=100, deadline=None)
    @given(
        st.dictionaries(
            st.text(min_size=1, max_size=12),
            st.lists(st.integers(1, 4), min_size=0, max_size=3),
            max_size=4,
        ),
        st.integers(0, 2**32 - 1),
    )
    def test_round_trip(self, shapes, seed):
        rng = np.random.default_rng(seed)
        store = {k: rng.normal(size=tuple(v)).astype(np.float32) for k, v in shapes.items()}
        data = serialize_weights(store)
        loaded = load_weights(data)
        assert serialize_weights(loaded) == data
        for k in store:
            np.testing.assert_array_equal(loaded[k], store[k])


class TestBuildModel:
    def test_identity_net(self):
        m = build_model(IDENTITY_NET, {"id.w": np.ones((1, 1, 1, 1)), "id.b": np.zeros(1)})
        x = np.array([[0.1, 0.7], [0.3, 0.2]], dtype=np.float32).reshape(2, 2, 1)
        out = forward(m, x, capture=True)
        np.testing.assert_allclose(out.trace[0][1], x)
        np.testing.assert_allclose(out.probabilities, tensor.softmax(x.reshape(-1)), atol=1e-7)
        assert len(out.trace) == len(m.conv_layers) == 1

    def test_missing_weight_named(self):
        text = bundled_manifest("lenet-small")
        w = gen_weights(0, text)
        del w["fc.w"]
        with pytest.raises(ConfigError, match="fc.w"):
            build_model(text, w)

    def test_weight_shape_mismatch(self):
        text = bundled_manifest("lenet-small")
        w = gen_weights(0, text)
        w["conv2.w"] = np.zeros((16, 8, 5, 5), dtype=np.float32)
        with pytest.raises(ConfigError, match="conv2"):
            build_model(text, w)

    def test_lenet_small_shapes(self, lenet):
        assert lenet.input_shape == (32, 32, 3)
        assert lenet.class_count == 10
        assert lenet.shapes == {
            0: (32, 32, 3), 1: (32, 32, 8), 2: (32, 32, 8), 3: (16, 16, 8),
            4: (16, 16, 16), 5: (16, 16, 16), 6: (8, 8, 16), 7: (1024,), 8: (10,), 9: (10,),
        }
        assert lenet.weights["conv1.w"].shape == (8, 3, 3, 3)
        assert lenet.weights["fc.w"].shape == (10, 1024)

    @pytest.mark.parametrize("bad,match", [
        ("0 input h=4 w=4 c=1\n1 bogus\n2 softmax", "unknown layer kind"),
        ("0 input h=4 w=4 c=1\n1 flatten in=2\n2 softmax", "cyclic"),
        ("0 input h=4 w=4 c=1\n1 flatten in=1\n2 softmax", "cyclic"),
        ("0 input h=4 w=4 c=1\n1 conv out=1 k=5 w=c\n2 flatten\n3 softmax", "shape mismatch"),
        ("0 input h=4 w=4 c=1\n1 conv out=2 k=1 w=c\n2 residual_add in=1,0\n3 flatten\n4 softmax", "shape mismatch"),
        ("0 input h=4 w=4 c=1\n1 flatten\n2 flatten in=0\n3 softmax in=2", "single output"),
        ("0 input h=4 w=4 c=1\n1 flatten", "softmax"),
    ])
    def test_invalid_manifests(self, bad, match):
        # parsing and shape inference fail before any weight lookup
        with pytest.raises(ConfigError, match=match):
            build_model(bad, {})

    def test_comments_and_default_inputs(self):
        layers = parse_manifest("# header\n0 input h=2 w=2 c=1  # trailing\n\n1 flatten\n2 softmax\n")
        assert [s.inputs for s in layers] == [(), (0,), (1,)]

    @pytest.mark.parametrize("name", BUNDLED_MANIFESTS)
    def test_inferred_shapes_match_execution(self, name):
        text = bundled_manifest(name)
        m = build_model(text, gen_weights(3, text))
        h, w, c = m.input_shape
        acts = m.activations(np.random.default_rng(0).random((2, h, w, c)))
        for idx, shape in m.shapes.items():
            assert acts[idx].shape == (2, *shape), idx


class TestForward:
    def test_golden_lenet_forward(self, lenet):
        sample = synth_dataset(7, 1)[0]
        out = forward(lenet, sample.image)
        np.testing.assert_allclose(out.probabilities, GOLDEN["probabilities"], atol=1e-5)
        assert out.predicted_class == GOLDEN["predicted_class"]

    def test_golden_matches_loop_oracle(self, lenet):
        """The pinned vector is reproduced by a naive float64 loop network."""
        x = synth_dataset(7, 1)[0].image.normalized
        w = lenet.weights
        h = np.maximum(conv2d_loops(x, w["conv1.w"], w["conv1.b"], 1, 1), 0)
        h = pool_loops(h, "max", 2, 2)
        h = np.maximum(conv2d_loops(h, w["conv2.w"], w["conv2.b"], 1, 1), 0)
        h = pool_loops(h, "max", 2, 2)
        logits = dense_loops(h.reshape(-1), w["fc.w"], w["fc.b"])
        z = sum(math.exp(v) for v in logits)
        np.testing.assert_allclose([math.exp(v) / z for v in logits], GOLDEN["probabilities"], atol=1e-5)

    def test_deterministic(self, lenet, synth7):
        a = forward(lenet, synth7[3].image, capture=True)
        b = forward(lenet, synth7[3].image, capture=True)
        assert a.probabilities.tobytes() == b.probabilities.tobytes()
        for (i, fa), (j, fb) in zip(a.trace, b.trace):
            assert i == j and fa.tobytes() == fb.tobytes()

    def test_capture_does_not_change_probabilities(self, resnet, synth7):
        for s in synth7[:3]:
            with_trace = forward(resnet, s.image, capture=True)
            without = forward(resnet, s.image)
            assert with_trace.probabilities.tobytes() == without.probabilities.tobytes()
            assert [i for i, _ in with_trace.trace] == [s.index for s in resnet.conv_layers]
            assert without.trace is None

    def test_output_invariants(self, resnet, synth7):
        out = forward(resnet, synth7[0].image)
        assert abs(float(out.probabilities.sum()) - 1) <= 1e-6
        assert out.predicted_class == int(np.argmax(out.probabilities))
        assert out.confidence == out.probabilities[out.predicted_class]

    def test_shape_mismatch(self, lenet):
        with pytest.raises(ShapeError):
            forward(lenet, np.zeros((16, 16, 3), dtype=np.uint8))


class TestPredict:
    def test_uniform_tie_breaks_low(self):
        out = ModelOutput.from_probabilities(np.full(10, 0.1))
        assert out.predicted_class == 0

    def test_two_class(self):
        out = ModelOutput.from_probabilities([0.1, 0.9])
        assert (out.predicted_class, out.confidence) == (1, pytest.approx(0.9))

    def test_consistent_with_forward(self, lenet):
        img = synth_dataset(7, 1)[0].image
        cls, conf = predict(lenet, img)
        assert cls == GOLDEN["predicted_class"]
        assert conf == pytest.approx(max(GOLDEN["probabilities"]), abs=1e-5)
