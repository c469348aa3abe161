import numpy as np
import pytest

from peftlab.checkpoint import (
    CheckpointError,
    load_checkpoint,
    restore_tensors,
    save_checkpoint,
)
from peftlab.config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    load_config,
    resolve_out_dir,
    save_config,
)
from peftlab.tensor import Tensor


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=7)
    cfg.adapter.kind = "lora"
    cfg.optimizer.lr = 1e-3
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "bad.json").write_text('{"seed": 1, "bogus": 2}')
    with pytest.raises(ValueError, match="bogus"):
        load_config(tmp_path / "bad.json")


def test_overrides_coerce_types():
    cfg = ExperimentConfig()
    out = apply_overrides(cfg, ["adapter.r=4", "optimizer.lr=0.001",
                                "adapter.pos_embed=false", "adapter.kind=dora",
                                "adapter.alpha=32", "corpus.sizes={\"train\":16,\"val\":16,\"test\":16}",
                                "adapter.t_max=none", "seed=3"])
    assert out.adapter.r == 4 and isinstance(out.adapter.r, int)
    assert out.optimizer.lr == 0.001
    assert out.adapter.pos_embed is False
    assert out.adapter.kind == "dora"
    assert out.adapter.alpha == 32
    assert out.corpus.sizes == {"train": 16, "val": 16, "test": 16}
    assert out.adapter.t_max is None
    assert out.seed == 3
    # original untouched
    assert cfg.adapter.r == 8


def test_overrides_reject_unknown_paths():
    cfg = ExperimentConfig()
    with pytest.raises(ValueError, match="unknown config path"):
        apply_overrides(cfg, ["adapter.rank=4"])
    with pytest.raises(ValueError, match="key=value"):
        apply_overrides(cfg, ["adapter.r"])


def test_config_hash_sensitivity():
    a = ExperimentConfig()
    b = apply_overrides(a, ["adapter.r=4"])
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(ExperimentConfig())


def test_out_dir_resolution(monkeypatch, tmp_path):
    cfg = ExperimentConfig()
    monkeypatch.delenv("PEFTLAB_OUT", raising=False)
    assert resolve_out_dir(cfg).name == "runs"
    monkeypatch.setenv("PEFTLAB_OUT", str(tmp_path / "envroot"))
    assert resolve_out_dir(cfg) == tmp_path / "envroot"
    cfg.out_dir = str(tmp_path / "explicit")
    assert resolve_out_dir(cfg) == tmp_path / "explicit"


# ---------------------------------------------------------------------------
# checkpoint container


def _named(seed=0):
    rng = np.random.default_rng(seed)
    return [
        ("b.weight", Tensor(rng.normal(size=(3, 4))), False),
        ("a.bias", Tensor(rng.normal(size=(4,))), True),
        ("c.scalar", Tensor(np.array(2.5)), True),
    ]


def test_checkpoint_round_trip_bitwise(tmp_path):
    named = _named()
    meta = {"config_hash": "abc", "best_val_loss": 0.25}
    save_checkpoint(tmp_path / "x.ckpt", named, meta)
    tensors, back_meta = load_checkpoint(tmp_path / "x.ckpt")
    assert back_meta == meta
    for name, tensor, trainable in named:
        data, flag = tensors[name]
        assert np.array_equal(data, tensor.data)
        assert flag == trainable
    save_checkpoint(tmp_path / "y.ckpt",
                    [(n, d, f) for n, (d, f) in tensors.items()], back_meta)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", _named(), {})
    blob = bytearray((tmp_path / "x.ckpt").read_bytes())
    blob[:8] = b"NOTMAGIC"
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes((tmp_path / "x.ckpt").read_bytes()[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_rejects_duplicate_names(tmp_path):
    named = [("w", Tensor(np.ones(2)), True), ("w", Tensor(np.ones(2)), False)]
    with pytest.raises(CheckpointError, match="duplicate"):
        save_checkpoint(tmp_path / "x.ckpt", named, {})


def test_restore_tensors_in_place_and_mismatches(tmp_path):
    named = _named()
    save_checkpoint(tmp_path / "x.ckpt", named, {})
    stored, _ = load_checkpoint(tmp_path / "x.ckpt")
    fresh = _named(seed=1)
    assert not np.array_equal(fresh[0][1].data, named[0][1].data)
    restore_tensors(fresh, stored)
    for (name, tensor, _), (_, orig, _) in zip(fresh, named):
        assert np.array_equal(tensor.data, orig.data), name

    bad_shape = [("b.weight", Tensor(np.zeros((9, 9))), False)]
    with pytest.raises(CheckpointError, match="shape"):
        restore_tensors(bad_shape, stored)
    with pytest.raises(CheckpointError, match="missing"):
        restore_tensors([("ghost", Tensor(np.zeros(2)), True)], stored)
