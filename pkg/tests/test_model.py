import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsicodec import tensor as T
from wsicodec import weights
from wsicodec.bitstream import unpack_bitstream
from wsicodec.codec import (
    channel_ids,
    compress,
    decompress,
    estimated_bits,
    estimated_file_bits,
    prior_bits,
    read_code,
    stream_bpp,
)
from wsicodec.entropy import build_cdf_tables, table_rate_bits
from wsicodec.model import (
    CodecConfig,
    FingerprintMismatch,
    ModelBundle,
    decode,
    encode,
    latent_code,
    quantize,
)

SMALL = CodecConfig(latent_channels=4, hidden_channels=4, stages=3)


@pytest.fixture(scope="module")
def model():
    return ModelBundle.create(seed=0)


def image(h, w, seed=0):
    return np.random.default_rng(seed).uniform(size=(1, 3, h, w)).astype(np.float32)


def test_latent_shape_224(model):
    assert encode(image(224, 224), model).shape == (1, 48, 28, 28)


def test_latent_shape_16(model):
    assert encode(image(16, 16), model).shape == (1, 48, 2, 2)


def test_encode_deterministic(model):
    x = image(64, 48)
    np.testing.assert_array_equal(encode(x, model).data, encode(x, model).data)


def test_undersized_and_bad_input(model):
    with pytest.raises(T.ShapeError):
        encode(image(7, 32), model)
    with pytest.raises(T.ShapeError):
        encode(np.zeros((1, 1, 32, 32), np.float32), model)
    with pytest.raises(ValueError):
        encode(image(16, 16) + 2.0, model)


def test_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(stages=0)
    with pytest.raises(ValueError):
        CodecConfig(activation="tanh")


def test_eval_rounding():
    q = quantize(np.array([1.4, -1.5, 1.5, -0.5, 0.5, 2.6, -0.49]), "eval")
    assert q.tolist() == [1.0, -2.0, 2.0, -1.0, 1.0, 3.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), spread=st.floats(1e-3, 1e4))
def test_train_noise_bounded(seed, spread):
    y = np.random.default_rng(seed).normal(scale=spread, size=500).astype(np.float32)
    out = quantize(y, "train", rng=seed)
    assert np.all(np.abs(out.astype(np.float64) - y.astype(np.float64)) <= 0.5)


def test_train_noise_reproducible():
    y = np.zeros(100, np.float32)
    np.testing.assert_array_equal(quantize(y, "train", rng=3), quantize(y, "train", rng=3))
    assert not np.array_equal(quantize(y, "train", rng=3), quantize(y, "train", rng=4))
    with pytest.raises(ValueError):
        quantize(y, "train")


def test_train_noise_passes_gradient():
    y = T.Tensor(np.ones((2, 3)), requires_grad=True)
    T.sum(quantize(y, "train", rng=0)).backward()
    np.testing.assert_array_equal(y.grad, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_eval_idempotent(values):
    q = quantize(np.array(values), "eval")
    np.testing.assert_array_equal(quantize(q, "eval"), q)


def test_decode_shape_and_range(model):
    x = image(224, 224, seed=1)
    with T.no_grad():
        y = quantize(encode(x, model), "eval")
    out = decode(y, model, size=(224, 224))
    assert out.shape == (1, 3, 224, 224)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_decode_latent_grid(model):
    y = np.random.default_rng(2).integers(-3, 4, size=(48, 28, 28))
    assert decode(y.astype(np.float32), model).shape == (1, 3, 224, 224)


def test_decode_refuses_foreign_code(model):
    code = latent_code(image(32, 32), model)
    other = ModelBundle.create(seed=1)
    with pytest.raises(FingerprintMismatch):
        decode(code, other)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(16, 512), w=st.integers(16, 512))
def test_geometry_round_trip(h, w):
    small = ModelBundle.create(SMALL, seed=0)
    code = latent_code(image(h, w), small)
    assert code.symbols.shape == (4, -(-h // 8), -(-w // 8))
    assert decode(code, small).shape == (1, 3, h, w)


def test_save_load_save_identical(tmp_path, model):
    a = tmp_path / "a.pwgt"
    b = tmp_path / "b.pwgt"
    model.save(a)
    loaded = ModelBundle.load(a)
    loaded.save(b)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.fingerprint == model.fingerprint
    assert loaded.config == model.config


def test_fingerprint_covers_every_parameter(model):
    params = model.state()
    for name in ("enc.0.weight", "prior.log_scale", "dec.2.bias"):
        changed = dict(params)
        changed[name] = params[name].copy()
        changed[name].reshape(-1)[0] += 1e-3
        assert ModelBundle(model.config, changed).fingerprint != model.fingerprint


def test_weight_file_errors(tmp_path, model):
    with pytest.raises(FileNotFoundError):
        ModelBundle.load(tmp_path / "missing.pwgt")
    data = bytearray(model.to_bytes())
    data[100] ^= 1
    with pytest.raises(weights.WeightFileError):
        ModelBundle.from_bytes(bytes(data))
    with pytest.raises(weights.WeightFileError):
        ModelBundle.from_bytes(weights.dumps({"x": np.zeros(3, np.float32)}))


def test_compress_round_trip(model):
    x = image(40, 56, seed=5)
    blob = compress(x, model)
    code = latent_code(x, model)
    np.testing.assert_array_equal(read_code(blob, model).symbols, code.symbols)
    out = decompress(blob, model)
    np.testing.assert_array_equal(out.data, decode(code, model).data)
    assert stream_bpp(blob) == pytest.approx(8 * len(blob) / (40 * 56))
    assert prior_bits(code, model) >= estimated_bits(code, model) >= 0


def test_estimate_tracks_payload(model):
    x = image(64, 64, seed=6)
    code = latent_code(x, model)
    blob = compress(x, model)
    payload = 8 * len(unpack_bitstream(blob).payload)
    est = estimated_bits(code, model)
    tables = build_cdf_tables(model.prior, code.q_min, code.q_max)
    ideal = table_rate_bits(code.symbols.reshape(-1), channel_ids(code.symbols.shape), tables)
    # 16-bit table rounding and the coder's flush are the only gaps
    assert abs(ideal - est) <= 0.01 * est + 8
    assert abs(payload - ideal) <= 0.01 * ideal + 64
    assert estimated_file_bits(code, model) - est == 8 * (len(blob) - len(unpack_bitstream(blob).payload))


def test_compress_refuses_other_model(model):
    blob = compress(image(16, 16), model)
    with pytest.raises(FingerprintMismatch):
        decompress(blob, ModelBundle.create(seed=9))
