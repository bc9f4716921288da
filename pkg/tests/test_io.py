import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dyngrain.io import (
    load_checkpoint, load_grain_png, load_png, render_grain, save_checkpoint, save_grain_png, save_pgm, save_png,
    side_by_side,
)


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((8, 8, 3))
    save_png(tmp_path / "a.png", img)
    back = load_png(tmp_path / "a.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6


def test_pgm_header(tmp_path):
    save_pgm(tmp_path / "g.pgm", np.full((4, 6, 1), 0.5))
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5")


def test_render_colors():
    heat = render_grain(np.array([[1, 2]]), 2, cell=2)
    assert heat.shape == (2, 4, 3)
    assert heat[0, 0].tolist() == [255, 0, 0] and heat[0, 3].tolist() == [0, 0, 255]


@given(hnp.arrays(np.int64, (4, 5), elements=st.integers(1, 3)))
def test_grain_png_roundtrip(grain):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "g.png"
        save_grain_png(p, grain, 3, cell=4)
        assert np.array_equal(load_grain_png(p, 4, 5, 3), grain)


def test_side_by_side():
    out = side_by_side(np.zeros((16, 16, 3)), np.ones((2, 2), dtype=int))
    assert out.shape == (16, 32, 3)


def test_checkpoint_roundtrip(tmp_path):
    state = {
        "model": {"w": torch.randn(3, 2), "step": torch.tensor(4.0)},
        "optim": {"state": {0: {"exp_avg": torch.ones(2)}}, "param_groups": [{"lr": 0.1, "betas": (0.9, 0.99)}]},
        "ema": {"decay": 0.99, "shadow": {"w": torch.zeros(3, 2)}},
        "misc": [float("-inf"), None, "x"],
        "index": torch.tensor([1, 2], dtype=torch.long),
    }
    save_checkpoint(tmp_path / "ck", state, {"step": 7})
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 7
    assert torch.equal(back["model"]["w"], state["model"]["w"]) and back["model"]["step"].shape == ()
    assert 0 in back["optim"]["state"]
    assert back["misc"][0] == float("-inf") and back["index"].dtype == torch.long
    names = [t["name"] for t in manifest["tensors"]]
    assert "model.w" in names and "optim.state.0.exp_avg" in names


def test_checkpoint_shape_mismatch(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": torch.zeros(2, 2)})
    m = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    m["tensors"][0]["shape"] = [4]
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(tmp_path / "ck")
