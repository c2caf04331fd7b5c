import zipfile

import numpy as np
import pytest
import torch

from midget.checkpoint import (
    load_checkpoint,
    load_module_tensors,
    load_optimizer_tensors,
    module_tensors,
    optimizer_tensors,
    save_checkpoint,
)
from midget.errors import FormatError


def test_roundtrip_is_byte_identical(tmp_path, rng):
    tensors = {"b": rng.normal(size=(3, 2)), "a": np.arange(4, dtype=np.int64)}
    a = save_checkpoint(tmp_path / "a.ckpt", tensors, {"kind": "x", "epoch": 3})
    loaded, manifest = load_checkpoint(a)
    assert manifest["epoch"] == 3 and manifest["tensors"] == ["a", "b"]
    b = save_checkpoint(tmp_path / "b.ckpt", loaded, {k: v for k, v in manifest.items() if k not in ("format", "version", "tensors")})
    assert a.read_bytes() == b.read_bytes()
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(p)
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("manifest.json", '{"format": "other", "version": 1, "tensors": []}')
    with pytest.raises(FormatError):
        load_checkpoint(p)
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("manifest.json", '{"format": "midget-checkpoint", "version": 99, "tensors": []}')
    with pytest.raises(FormatError):
        load_checkpoint(p)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_module_and_optimizer_state_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Linear(3, 2)
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    net(torch.randn(4, 3)).sum().backward()
    opt.step()
    tensors = module_tensors(net)
    opt_t, groups = optimizer_tensors(opt)
    path = save_checkpoint(tmp_path / "n.ckpt", {**tensors, **opt_t}, {"optimizer": groups})
    loaded, manifest = load_checkpoint(path)

    net2 = torch.nn.Linear(3, 2)
    load_module_tensors(net2, loaded)
    opt2 = torch.optim.Adam(net2.parameters(), lr=1e-2)
    load_optimizer_tensors(opt2, loaded, manifest["optimizer"])
    for p1, p2 in zip(net.parameters(), net2.parameters()):
        assert torch.equal(p1, p2)
    x = torch.randn(4, 3)
    for n, o in ((net, opt), (net2, opt2)):
        o.zero_grad()
        n(x).sum().backward()
        o.step()
    for p1, p2 in zip(net.parameters(), net2.parameters()):
        assert torch.equal(p1, p2)
