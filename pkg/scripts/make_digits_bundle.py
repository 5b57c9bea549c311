"""Write the ten-glyph training set as a bundle directory usable with ``data.source = "bundle"``.

Example::

    python3 scripts/make_digits_bundle.py out/digits
    echo '{"data": {"source": "bundle", "path": "out/digits"}, "loss": "cross_entropy"}' > digits.json
    deepide train --config digits.json --out out/train_digits
"""
import argparse

from deepide.datasets import digits_training_set
from deepide.io import write_training_set


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", help="target directory")
    ap.add_argument("--size", type=int, default=8, help="cells per side of the image grid")
    ap.add_argument("--raster", type=int, default=28, help="pixel size of the rendered glyphs")
    args = ap.parse_args()
    data = digits_training_set(args.size, args.raster)
    write_training_set(args.out, data)
    print(f"wrote {data.n} images on {data.y_grid.size} cells to {args.out}")


if __name__ == "__main__":
    main()
