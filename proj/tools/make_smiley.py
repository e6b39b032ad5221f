#!/usr/bin/env python3
"""Writes presets/smiley.pgm: bright face outline, eyes and mouth on black."""
import math
import sys

N = 64


def intensity(px, py):
    # pixel centre in [-1, 1]^2, y up
    x = 2.0 * (px + 0.5) / N - 1.0
    y = 1.0 - 2.0 * (py + 0.5) / N
    r = math.hypot(x, y)
    v = 0.0
    if abs(r - 0.78) < 0.09:
        v = 1.0
    for ex in (-0.3, 0.3):
        if math.hypot(x - ex, y - 0.28) < 0.13:
            v = 1.0
    if y < -0.05 and abs(math.hypot(x, y - 0.05) - 0.45) < 0.08:
        v = 1.0
    return v


def main(path):
    with open(path, "wb") as f:
        f.write(b"P5\n# smiley\n%d %d\n255\n" % (N, N))
        f.write(bytes(int(round(255 * intensity(i, j))) for j in range(N) for i in range(N)))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "presets/smiley.pgm")
