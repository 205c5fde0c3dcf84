import numpy as np
import pytest
import torch

from uacseg.model import (
    SegModelSpec,
    clone_params,
    count_params,
    init_params,
    load_snapshot,
    model_forward,
    save_snapshot,
)


def test_default_size_is_desk_scale():
    n = count_params(init_params(SegModelSpec()))
    assert 15_000 <= n <= 40_000


def test_output_shape_and_batching():
    spec = SegModelSpec(num_classes=5, height=32, width=48)
    params = init_params(spec)
    imgs = torch.rand(2, 3, 32, 48, 3)
    out = model_forward(params, spec, imgs)
    assert out.shape == (2, 3, 32, 48, 5)
    single = model_forward(params, spec, imgs[1, 2])
    torch.testing.assert_close(single, out[1, 2], rtol=1e-5, atol=1e-6)


def test_deterministic():
    spec = SegModelSpec()
    params = init_params(spec)
    img = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
    a = model_forward(params, spec, img)
    b = model_forward(init_params(spec), spec, img)
    assert torch.equal(a, b)


def test_constant_image_zero_head():
    spec = SegModelSpec(height=32, width=32)
    params = init_params(spec, zero_head=True)
    params["head.bias"] = torch.tensor([0.1, -0.2, 0.3, 0.0, 0.5])
    out = model_forward(params, spec, np.full((32, 32, 3), 0.4, np.float32))
    assert torch.equal(out, out[0, 0].expand_as(out))


def test_size_mismatch():
    spec = SegModelSpec()
    with pytest.raises(ValueError, match="does not match"):
        model_forward(init_params(spec), spec, np.zeros((32, 64, 3), np.float32))


@pytest.mark.parametrize("kw", [{"num_classes": 1}, {"height": 40}, {"widths": (8, 8, 8)}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SegModelSpec(**kw)


def test_gradient_matches_finite_differences():
    spec = SegModelSpec(num_classes=3, widths=(4, 6, 8, 8), height=16, width=16, init_seed=3)
    params = clone_params(init_params(spec, dtype=torch.float64), requires_grad=True)
    rng = np.random.default_rng(0)
    img = torch.tensor(rng.random((16, 16, 3)), requires_grad=True)
    weights = torch.tensor(rng.normal(size=(16, 16, 3)))

    def functional(p, x):
        return (torch.tanh(model_forward(p, spec, x)) * weights).sum()

    functional(params, img).backward()
    h = 1e-6
    checks = []
    for name in ["down0.weight", "down3.weight", "up1.bias", "head.weight"]:
        flat = params[name].detach().view(-1)
        for k in rng.choice(flat.numel(), size=3, replace=False):
            with torch.no_grad():
                orig = flat[k].item()
                flat[k] = orig + h
                fp = functional(params, img).item()
                flat[k] = orig - h
                fm = functional(params, img).item()
                flat[k] = orig
            checks.append((params[name].grad.view(-1)[k].item(), (fp - fm) / (2 * h)))
    x = img.detach().clone()
    for idx in [(0, 0, 0), (7, 9, 1), (15, 3, 2)]:
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fd = (functional(params, xp) - functional(params, xm)).item() / (2 * h)
        checks.append((img.grad[idx].item(), fd))
    for analytic, fd in checks:
        assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-8)


def test_snapshot_roundtrip(tmp_path):
    params = init_params(SegModelSpec())
    save_snapshot(tmp_path / "p.bin", params)
    back = load_snapshot(tmp_path / "p.bin")
    assert list(back) == list(params)
    for k in params:
        assert torch.equal(back[k], params[k])


def test_snapshot_is_little_endian_float32(tmp_path):
    import struct

    params = {"w": torch.tensor([[1.5, -2.0, 3.25]])}
    save_snapshot(tmp_path / "p.bin", params)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == b"UACP"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    assert raw[-12:] == struct.pack("<3f", 1.5, -2.0, 3.25)
