import hashlib
import struct

import numpy as np
import pytest

from fmamba import numerics as nx
from fmamba.io import quantize
from fmamba.network import (ModelConfig, ModelState, StateFileError, count_flops, expected_names,
                            format_shape_table, forward_fuse, fuse_images, load_state, model_init,
                            model_init_shapes, save_state, shape_audit)
from fmamba.tape import NonFiniteError

# frozen regression values (this implementation, seed 0)
FULL_PARAMS = 62_151_069
TOY_PARAMS = 745_181
MICRO_PARAMS = 200_349
MICRO_OUT_SUM = 512.466194154857
MICRO_OUT_PIXEL = 0.49848104339212357
MICRO_OUT_SHA256 = "dc12bc4fd49deb6ad2aad727556a66126f916cca5635e0ce74748a9794e7ee4a"


def micro_pair(n=32):
    yy, xx = np.mgrid[0:n, 0:n] / n
    return 0.5 + 0.4 * np.sin(2 * np.pi * 2 * xx) * np.cos(2 * np.pi * yy), 0.2 + 0.6 * yy


@pytest.fixture(scope="module")
def micro():
    return model_init(ModelConfig.micro())


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(base_dim=7)
    with pytest.raises(ValueError):
        ModelConfig(depths=(1, 1, 1))
    with pytest.raises(ValueError):
        ModelConfig(depths=(1, 0, 1, 1))
    with pytest.raises(ValueError):
        ModelConfig(state_size=0)
    with pytest.raises(ValueError):
        ModelConfig(patch_size=2)
    assert ModelConfig().dims == [96, 192, 384, 768] and ModelConfig().stride == 32


def test_parameter_counts():
    assert sum(int(np.prod(s)) for s in model_init_shapes(ModelConfig()).values()) == FULL_PARAMS
    assert model_init(ModelConfig.toy()).n_params == TOY_PARAMS


def test_micro_init(micro):
    assert micro.n_params == MICRO_PARAMS
    assert list(micro.params) == expected_names(micro.config)
    again = model_init(ModelConfig.micro())
    assert all(np.array_equal(micro.params[k], again.params[k]) for k in micro.params)
    other = model_init(ModelConfig.micro(seed=1))
    assert not np.array_equal(micro.params["embed.a.weight"], other.params["embed.a.weight"])


def test_micro_forward_regression(micro):
    out = fuse_images(micro, *micro_pair())
    assert out.shape == (32, 32)
    assert ((out > 0) & (out < 1)).all()
    assert out.sum() == pytest.approx(MICRO_OUT_SUM, rel=1e-10)
    assert out[3, 5] == pytest.approx(MICRO_OUT_PIXEL, rel=1e-10)
    assert hashlib.sha256(quantize(out).tobytes()).hexdigest() == MICRO_OUT_SHA256


def test_forward_input_validation(micro):
    with pytest.raises(ValueError, match="divisible"):
        forward_fuse(micro, np.zeros((48, 32)), np.zeros((48, 32)))
    with pytest.raises(ValueError):
        forward_fuse(micro, np.zeros((32, 32)), np.zeros((64, 32)))
    with pytest.raises(ValueError):
        forward_fuse(micro.params, np.zeros((32, 32)), np.zeros((32, 32)))


def test_raw_mapping_forward_matches_state(micro):
    I1, I2 = micro_pair()
    a = forward_fuse(micro, I1, I2).data
    b = forward_fuse(micro.params, I1, I2, config=micro.config).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_stage_is_named(micro):
    bad = dict(micro.params)
    bad["embed.a.bias"] = np.full_like(bad["embed.a.bias"], 1e308)
    with pytest.raises(NonFiniteError):
        forward_fuse(ModelState(micro.config, bad), *micro_pair())


def test_shape_audit_micro(micro):
    rows, counter = shape_audit(micro, 64, 64)
    table = dict(rows)
    assert table["embed.a"] == (16, 16, 8)
    assert table["enc3.b"] == (2, 2, 64)
    assert table["dffm3"] == (2, 2, 64) and table["dec0"] == (16, 16, 8)
    assert table["output"] == (64, 64)
    assert counter.total > 0 and set(counter.by_scope) >= {"encoder.a", "encoder.b", "fusion", "decoder", "head"}
    assert "output" in format_shape_table(rows)


def test_flop_count_scales_with_area():
    small = count_flops(ModelConfig.micro(), 32, 32)
    big = count_flops(ModelConfig.micro(), 64, 64)
    assert big["total"] == pytest.approx(4 * small["total"], rel=0.02)
    assert small["total"] == sum(v for k, v in small.items() if k.startswith("kind."))


def test_state_roundtrip(tmp_path, micro):
    path = tmp_path / "m.fm"
    save_state(micro, path)
    loaded = load_state(path, expect=ModelConfig.micro())
    assert loaded.config == micro.config
    assert all(np.array_equal(loaded.params[k], micro.params[k]) for k in micro.params)
    assert path.read_bytes()[:4] == b"FMAM"


def test_state_errors(tmp_path, micro):
    path = tmp_path / "m.fm"
    save_state(micro, path)
    data = path.read_bytes()

    bad = tmp_path / "bad.fm"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(StateFileError, match="magic"):
        load_state(bad)
    bad.write_bytes(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(StateFileError, match="version"):
        load_state(bad)
    bad.write_bytes(data[:-5])
    with pytest.raises(StateFileError, match="truncated at byte"):
        load_state(bad)
    bad.write_bytes(data + b"\0")
    with pytest.raises(StateFileError, match="trailing"):
        load_state(bad)
    with pytest.raises(StateFileError, match="does not match"):
        load_state(path, expect=ModelConfig.toy())


def test_state_name_mismatch(tmp_path, micro):
    params = dict(micro.params)
    params["extra.weight"] = np.ones(2)
    del params["head.proj.bias"]
    path = tmp_path / "m.fm"
    save_state(ModelState(micro.config, params), path)
    with pytest.raises(StateFileError, match="missing=\\['head.proj.bias'\\] extra=\\['extra.weight'\\]"):
        load_state(path)


def test_flop_counting_is_off_by_default(micro):
    counter = nx.FlopCounter()
    fuse_images(micro, *micro_pair())
    assert counter.total == 0
