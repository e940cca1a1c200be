"""Smoke test for the `mipsr` extension module.

Build and install first:  maturin build -m crates/py/Cargo.toml --release && pip install target/wheels/mipsr-*.whl
"""

import math
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

import mipsr


def blobs(h, w, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w, 3))
    for _ in range(8):
        cy, cx, r = rng.uniform(0, 1, 3) * [1, 1, 0.3]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < (r + 0.05) ** 2
        img[mask] = rng.uniform(0.1, 0.9, 3)
    return (img * 255).round().astype(np.uint8)


def main():
    assert mipsr.lanczos(0.0) == 1.0
    assert abs(mipsr.lanczos(0.5) - 0.607927) < 1e-6
    cfg = mipsr.config({"levels": "1", "iterations": "5"})
    assert "iterations = 5" in cfg and "levels = 1" in cfg
    try:
        mipsr.config({"scale": "1"})
    except ValueError:
        pass
    else:
        raise AssertionError("scale 1 accepted")

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        gt = blobs(64, 64, 0)
        Image.fromarray(gt).save(d / "gt.png")
        Image.fromarray(np.roll(gt, (2, -1), axis=(0, 1))).save(d / "ref.png")
        mipsr.downsample_file(d / "gt.png", 4, d / "lsr.png")
        assert Image.open(d / "lsr.png").size == (16, 16)

        m = mipsr.metrics(d / "gt.png", d / "gt.png")
        assert math.isinf(m["psnr"]) and m["ergas"] == 0.0

        settings = {"levels": "1", "channels": "4", "noise_channels": "4",
                    "ref_channels": "4", "iterations": "5", "log_every": "2"}
        log = mipsr.super_resolve(d / "lsr.png", d / "ref.png", d / "sr.png", settings)
        assert [r[0] for r in log] == [1, 2, 4, 5], log
        assert all(math.isfinite(r[1]) and math.isfinite(r[2]) for r in log)
        again = mipsr.super_resolve(d / "lsr.png", d / "ref.png", d / "sr2.png", settings)
        assert log == again
        assert (d / "sr.png").read_bytes() == (d / "sr2.png").read_bytes()
        m = mipsr.metrics(d / "gt.png", d / "sr.png")
        print("sr metrics", {k: round(v, 4) for k, v in m.items()})
    print("smoke ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
