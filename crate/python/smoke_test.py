"""Smoke test for the bendlens_py extension.

Build it first:

    cargo build --release -p bendlens-py
    cp target/release/libbendlens_py.so python/bendlens_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import bendlens_py as bl


def main():
    ens = bl.Ensemble(16, 16, mode="wavefront_shaped", seed=0)
    ids = ens.config_ids()
    assert len(ens) == 11 and ids[0] == "C_10", ids
    assert len(ens.matrix("C_10")) == 16
    assert abs(ens.correlation("C_10", "C_10") - 1.0) < 1e-12
    assert ens.correlation("C_10", "C_0") < 0.5

    x = [0.0] * 16
    x[5] = 1.0
    y = ens.measure("C_10", x)
    assert len(y) == 32 and all(0.0 <= v <= 1.0 for v in y)
    assert bl.psnr(x, x) == 100.0
    assert abs(bl.psnr(x, [0.5] * 16) - 20 * math.log10(2)) < 1e-12

    try:
        ens.matrix("C_42")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown configuration accepted")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ens.spkl")
        ens.save(path)
        again = bl.Ensemble.load(path)
        assert again.matrix("C_3") == ens.matrix("C_3")
        with open(path, "r+b") as f:
            f.write(b"JUNK")
        try:
            bl.Ensemble.load(path)
        except ValueError as e:
            assert "bad magic" in str(e)
        else:
            raise AssertionError("corrupted ensemble accepted")

    print("ok")


if __name__ == "__main__":
    main()
