"""Config parsing, checkpoint format, PPM output, CLI surface."""

import struct

import numpy as np
import pytest

from dualstream.cli import main
from dualstream.config import Config, config_hash, load_config, parse_config
from dualstream.errors import ConfigError, FormatError
from dualstream.rng import SeededRng
from dualstream.storage import (
    MAGIC,
    VERSION,
    heat_ramp,
    load_checkpoint,
    params_from_arrays,
    save_checkpoint,
    write_ppm,
)
from dualstream.tensor import Tensor
from dualstream.train import ModelConfig, init_dual_stream
from dualstream import tree as tr


# ---------------------------------------------------------------------------
# config


def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg == Config()
    assert cfg.lambda_ == 100.0
    assert cfg.n_blocks == 5
    assert cfg.pos_encoding == "learn_rel"
    assert cfg.tau_base == 0.99


def test_parse_full_config():
    text = """
    # ablation run
    dataset = synth:100:4
    epochs = 3
    batch_size = 32
    lambda = 0
    n_blocks = 2            # desk depth
    pos_encoding = sincos_abs
    normalize_att = true
    symmetrize = off
    seed = 11
    """
    cfg = parse_config(text)
    assert cfg.dataset == "synth:100:4"
    assert cfg.epochs == 3 and cfg.batch_size == 32
    assert cfg.lambda_ == 0.0 and cfg.n_blocks == 2
    assert cfg.pos_encoding == "sincos_abs"
    assert cfg.normalize_att is True and cfg.symmetrize is False
    assert cfg.seed == 11


def test_parse_errors_name_the_line():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("epochs 5")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("epochs = 5\nnot_a_key = 1")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("epochs = five")


@pytest.mark.parametrize("bad", [
    "lambda = -1",
    "epochs = 0",
    "batch_size = 0",
    "pos_encoding = rotary",
    "tau_base = 1.5",
    "probe_lr = 0",
])
def test_validation_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_load_config_and_hash(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 7\n")
    cfg = load_config(str(path))
    assert cfg.epochs == 7
    assert config_hash(cfg) != config_hash(Config())
    assert config_hash(cfg) == config_hash(parse_config("epochs = 7"))
    assert len(config_hash(cfg)) == 64


# ---------------------------------------------------------------------------
# checkpoints


def small_params():
    rng = np.random.default_rng(0)
    return {
        "online": {
            "encoder": {"w": Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                                    requires_grad=True)},
            "blocks": [
                {"w": Tensor(rng.standard_normal((2, 2)).astype(np.float32),
                             requires_grad=True)},
                {"w": Tensor(rng.standard_normal((2,)).astype(np.float32),
                             requires_grad=True)},
            ],
        },
        "momentum": {
            "encoder": {"w": Tensor(rng.standard_normal((3, 4)).astype(np.float32))},
        },
    }


def test_checkpoint_roundtrip_bitwise(tmp_path):
    path = str(tmp_path / "model.ckpt")
    params = small_params()
    meta = {"step": 17, "config_sha256": "ab" * 32}
    save_checkpoint(path, params, meta)
    arrays, got_meta = load_checkpoint(path)
    assert got_meta == meta
    flat = tr.flatten(params)
    assert set(arrays) == {name for name, _ in flat}
    for name, tensor in flat:
        assert arrays[name].dtype == np.float32
        np.testing.assert_array_equal(arrays[name], tensor.data, err_msg=name)


def test_checkpoint_roundtrip_full_model(tmp_path):
    cfg = Config(n_blocks=2)
    params = init_dual_stream(ModelConfig.from_run_config(cfg), seed=0)
    path = str(tmp_path / "full.ckpt")
    save_checkpoint(path, {"online": params["online"],
                           "momentum": params["momentum"]}, {"step": 0})
    arrays, _ = load_checkpoint(path)
    for group in ("online", "momentum"):
        for name, tensor in tr.flatten(params[group]):
            np.testing.assert_array_equal(arrays[f"{group}/{name}"], tensor.data,
                                          err_msg=name)


def test_params_from_arrays_rebuilds_structure(tmp_path):
    path = str(tmp_path / "m.ckpt")
    params = small_params()
    save_checkpoint(path, params, {})
    arrays, _ = load_checkpoint(path)
    rebuilt = params_from_arrays(arrays)
    assert rebuilt["online"]["blocks"][1]["w"].shape == (2,)
    assert rebuilt["online"]["encoder"]["w"].requires_grad
    assert not rebuilt["momentum"]["encoder"]["w"].requires_grad
    np.testing.assert_array_equal(rebuilt["online"]["blocks"][0]["w"].data,
                                  params["online"]["blocks"][0]["w"].data)


def test_checkpoint_header_layout(tmp_path):
    path = str(tmp_path / "h.ckpt")
    save_checkpoint(path, {"w": Tensor(np.zeros(2, dtype=np.float32))}, {})
    blob = open(path, "rb").read()
    assert blob[:4] == MAGIC
    version, count = struct.unpack("<II", blob[4:12])
    assert version == VERSION
    assert count == 2  # the tensor plus the metadata entry


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(str(path))


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "v.ckpt"
    path.write_bytes(MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(str(path))


def test_checkpoint_truncation(tmp_path):
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(path, small_params(), {"step": 1})
    blob = open(path, "rb").read()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-7])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(str(cut))


def test_checkpoint_empty_params(tmp_path):
    path = str(tmp_path / "e.ckpt")
    save_checkpoint(path, {}, {"note": "empty"})
    arrays, meta = load_checkpoint(path)
    assert arrays == {} and meta == {"note": "empty"}


# ---------------------------------------------------------------------------
# PPM


def test_write_ppm_rgb(tmp_path):
    path = tmp_path / "img.ppm"
    img = np.zeros((3, 2, 4), dtype=np.float32)
    img[0] = 1.0
    write_ppm(str(path), img)
    blob = path.read_bytes()
    header, pixels = blob.split(b"255\n", 1)
    assert header.startswith(b"P6")
    assert b"4 2" in header
    assert len(pixels) == 2 * 4 * 3
    assert pixels[0] == 255 and pixels[1] == 0 and pixels[2] == 0


def test_write_ppm_heatmap_ramp(tmp_path):
    path = tmp_path / "heat.ppm"
    heat = np.array([[0.0, 1.0]], dtype=np.float32)
    write_ppm(str(path), heat)
    pixels = path.read_bytes().split(b"255\n", 1)[1]
    assert pixels[0:3] == bytes([0, 0, 255])    # 0 -> blue
    assert pixels[3:6] == bytes([255, 0, 0])    # 1 -> red


def test_heat_ramp_endpoints():
    ramp = heat_ramp(np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(ramp[:, 0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(ramp[:, 2], [1.0, 0.0, 0.0])
    clipped = heat_ramp(np.array([-1.0, 2.0]))
    assert clipped.min() >= 0.0 and clipped.max() <= 1.0


def test_write_ppm_rejects_bad_shape(tmp_path):
    with pytest.raises(FormatError):
        write_ppm(str(tmp_path / "x.ppm"), np.zeros((4, 2, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# CLI


def test_cli_requires_subcommand(capsys):
    assert main([]) != 0


def test_cli_selftest_passes():
    assert main(["selftest", "--seed", "1"]) == 0


def test_cli_pretrain_probe_viz_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        "dataset = synth:24:0\nepochs = 1\nbatch_size = 12\nn_blocks = 2\n")
    ckpt = str(tmp_path / "model.ckpt")
    metrics = str(tmp_path / "metrics.csv")
    rc = main(["pretrain", "--config", str(cfg_path), "--out", ckpt,
               "--metrics", metrics])
    assert rc == 0
    assert (tmp_path / "metrics.csv").exists()
    arrays, meta = load_checkpoint(ckpt)
    assert meta["step"] == 2
    assert any(name.startswith("online/encoder/") for name in arrays)

    rc = main(["probe", "--ckpt", ckpt, "--dataset", "synth:40:1",
               "--epochs", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "top-1 accuracy:" in out

    ppm = tmp_path / "heat.ppm"
    rc = main(["viz", "--ckpt", ckpt, "--image", "0",
               "--dataset", "synth:4:0", "--out", str(ppm)])
    assert rc == 0
    assert ppm.read_bytes().startswith(b"P6")


def test_cli_errors_exit_2(tmp_path, capsys):
    rc = main(["probe", "--ckpt", str(tmp_path / "missing.ckpt"),
               "--dataset", "synth:8:0"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
