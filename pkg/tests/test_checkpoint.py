import numpy as np
import pytest

import scvm.tensor as T
from scvm.checkpoint import (
    CheckpointError,
    FORMAT_VERSION,
    MAGIC,
    load_checkpoint,
    save_checkpoint,
    split_model_and_optim,
)
from scvm.trainer import (
    config_to_dict,
    default_config,
    load_model_checkpoint,
    save_model_checkpoint,
)
from tests.test_model import tiny_batch, tiny_cfg, build


def small_arrays():
    rng = np.random.default_rng(0)
    return {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "a.b": rng.normal(size=4).astype(np.float32),
        "z.scalar": np.array(2.5, dtype=np.float32),
    }


def test_save_load_save_is_byte_identical(tmp_path):
    arrays = small_arrays()
    cfg = config_to_dict(default_config())
    p1, p2 = tmp_path / "one.scvm", tmp_path / "two.scvm"
    save_checkpoint(p1, arrays, cfg, step=7)
    loaded, cfg2, step = load_checkpoint(p1)
    save_checkpoint(p2, loaded, cfg2, step)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "c.scvm"
    save_checkpoint(path, small_arrays(), {"k": 1}, step=3)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == FORMAT_VERSION


def test_values_roundtrip_exactly(tmp_path):
    arrays = small_arrays()
    path = tmp_path / "c.scvm"
    save_checkpoint(path, arrays, {}, step=0)
    loaded, _, _ = load_checkpoint(path)
    assert sorted(loaded) == sorted(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == np.float32


def test_bad_magic_and_version_rejected(tmp_path):
    path = tmp_path / "c.scvm"
    save_checkpoint(path, small_arrays(), {}, step=0)
    raw = bytearray(path.read_bytes())

    other = tmp_path / "bad_magic.scvm"
    other.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(other)

    worse = tmp_path / "bad_version.scvm"
    raw[4:8] = (99).to_bytes(4, "little")
    worse.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(worse)


def test_model_checkpoint_restores_forward_bit_exactly(tmp_path):
    cfg = tiny_cfg()
    model = build(cfg, seed=5)
    batch = tiny_batch(cfg, seed=6)
    probe = model.predict(batch)
    with T.no_grad():
        t = model.project_question(batch.question_hidden)
        tokens, _, _ = model.encode(model.patches_tensor(batch.images), t)
    path = tmp_path / "m.scvm"
    save_model_checkpoint(path, model, cfg, step=0)

    restored, cfg2, step = load_model_checkpoint(path)
    assert step == 0
    with T.no_grad():
        t2 = restored.project_question(batch.question_hidden)
        tokens2, _, _ = restored.encode(restored.patches_tensor(batch.images), t2)
    assert tokens.data.tobytes() == tokens2.data.tobytes()
    np.testing.assert_array_equal(probe, restored.predict(batch))


def test_optimizer_moments_are_stored(tmp_path):
    from scvm.optim import AdamW

    cfg = tiny_cfg()
    model = build(cfg)
    batch = tiny_batch(cfg)
    opt = AdamW(model.parameters())
    model.zero_grad()
    model.losses(batch, lam=0.05)["total"].backward()
    opt.step(lr=1e-4)

    path = tmp_path / "m.scvm"
    save_model_checkpoint(path, model, cfg, step=1, opt=opt)
    arrays, _, _ = load_checkpoint(path)
    state, optim = split_model_and_optim(arrays)
    assert len(optim) == 2 * len(state)
    name = model.parameters()[0].name
    np.testing.assert_allclose(optim[f"optim.m.{name}"], opt.m[name], rtol=1e-6)


def test_every_parameter_name_appears_once(tmp_path):
    cfg = tiny_cfg()
    model = build(cfg)
    path = tmp_path / "m.scvm"
    save_model_checkpoint(path, model, cfg, step=0)
    arrays, _, _ = load_checkpoint(path)
    names = sorted(arrays)
    assert names == sorted(set(names))
    assert names == sorted(p.name for p in model.parameters())
