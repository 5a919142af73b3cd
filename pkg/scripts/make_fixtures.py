"""Regenerate the tiny series and checkpoint bundled under src/ragl/fixtures."""
import os
import shutil
import sys
import tempfile

from ragl.cli import run_cli

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, os.pardir, "src", "ragl", "fixtures")


def main():
    os.makedirs(OUT, exist_ok=True)
    series = os.path.join(OUT, "tiny_series.txt")
    code = run_cli(["datagen", "--n", "4", "--steps", "600", "--seed", "7", "--text", "--out", series])
    if code:
        return code
    with tempfile.TemporaryDirectory() as tmp:
        code = run_cli(["train", "--data", series, "--out", tmp, "--epochs", "3", "--seed", "0",
                        "--set", "model.d_in=8", "--set", "model.d_tid=8", "--set", "model.d_diw=8",
                        "--set", "model.d_node=8"])
        if code:
            return code
        shutil.copy(os.path.join(tmp, "checkpoint.ckpt"), os.path.join(OUT, "tiny.ckpt"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
