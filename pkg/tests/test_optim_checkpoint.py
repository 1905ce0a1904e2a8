import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nwsynth.checkpoint import (
    ARCH_NAMES, CheckpointError, load_checkpoint, load_model, save_checkpoint,
)
from nwsynth.features import FT, TS
from nwsynth.graph import Param
from nwsynth.optim import Adam, NonFiniteGradient, clip_grad_norm
from nwsynth.training import new_model


def test_adam_zero_gradient_is_identity():
    p = Param("p", np.array([1.0, -2.0, 3.0]))
    opt = Adam([p], lr=1e-3)
    for _ in range(5):
        p.grad = np.zeros(3)
        opt.step()
    assert np.array_equal(p.data, [1.0, -2.0, 3.0])


def test_adam_first_step():
    p = Param("p", np.array(0.0))
    opt = Adam([p], lr=1e-3)
    p.grad = np.array(1.0)
    opt.step()
    # m_hat = v_hat = 1 after bias correction
    assert float(p.data) == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.integers(1, 6))
def test_adam_deterministic(grads, steps):
    results = []
    for _ in range(2):
        p = Param("p", np.ones(len(grads)))
        opt = Adam([p], lr=1e-3)
        for _ in range(steps):
            p.grad = np.array(grads)
            opt.step()
        results.append(p.data.copy())
    assert np.array_equal(*results)


def test_adam_non_finite_aborts():
    good, bad = Param("good", np.ones(2)), Param("layer.bad", np.ones(2))
    opt = Adam([good, bad])
    good.grad = np.ones(2)
    bad.grad = np.array([1.0, np.nan])
    with pytest.raises(NonFiniteGradient, match="layer.bad"):
        opt.step()
    assert np.array_equal(good.data, np.ones(2)) and opt.t == 0


def test_clip_global_norm():
    a, b = Param("a", np.zeros(1)), Param("b", np.zeros(1))
    a.grad, b.grad = np.array([30.0]), np.array([40.0])
    assert clip_grad_norm([a, b], 5.0) == pytest.approx(50.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(5.0)
    a.grad, b.grad = np.array([0.3]), np.array([0.4])
    clip_grad_norm([a, b], 5.0)
    assert a.grad[0] == 0.3


@pytest.fixture(params=["nsf", "wavenet"])
def saved(request, tmp_path):
    model = new_model(request.param, TS, "tiny", seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    return request.param, model, path


def test_roundtrip_bit_exact(saved, tmp_path):
    arch, model, path = saved
    loaded = load_model(path, ARCH_NAMES[arch])
    assert list(loaded.params) == list(model.params)
    for k, p in model.params.items():
        assert np.array_equal(loaded.params[k].data, p.data)
        assert loaded.params[k].data.dtype == np.float32
    # scalar hparams travel in the float32 tensor table
    for f, v in vars(model.config).items():
        got = getattr(loaded.config, f)
        if isinstance(v, float):
            assert got == np.float32(v)
        else:
            assert got == v, f
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_truncated_checkpoint(saved, tmp_path):
    _, _, path = saved
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-1])
    with pytest.raises(CheckpointError, match="truncated tensor table"):
        load_checkpoint(tmp_path / "t.ckpt")


@settings(max_examples=30, deadline=None)
@given(cut=st.integers(0, 10 ** 6))
def test_no_prefix_loads_silently(cut):
    model = new_model("nsf", TS, "tiny", seed=0)
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:cut % len(raw)])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_bad_magic_version_and_trailing(saved, tmp_path):
    _, _, path = saved
    raw = path.read_bytes()
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    p.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)


def test_arch_mismatch(tmp_path):
    save_checkpoint(new_model("nsf", TS, "tiny"), tmp_path / "n.ckpt")
    with pytest.raises(CheckpointError, match="arch mismatch"):
        load_model(tmp_path / "n.ckpt", ARCH_NAMES["wavenet"])


def test_shape_mismatch(tmp_path):
    ckpt_model = new_model("wavenet", FT, "tiny")
    from nwsynth.checkpoint import to_checkpoint
    ckpt = to_checkpoint(ckpt_model)
    ckpt.tensors["out.b"] = np.zeros(7, dtype=np.float32)
    save_checkpoint(ckpt, tmp_path / "s.ckpt")
    with pytest.raises(CheckpointError, match="shape"):
        load_model(tmp_path / "s.ckpt")


def test_profile_recorded(tmp_path):
    save_checkpoint(new_model("wavenet", FT, "tiny"), tmp_path / "w.ckpt")
    assert load_checkpoint(tmp_path / "w.ckpt").profile_name == "FT"
