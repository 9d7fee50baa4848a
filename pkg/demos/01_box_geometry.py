"""Box geometry tour: canonical quads, rotated IoU, and a raster sanity check.

Run: python3 demos/01_box_geometry.py
"""

from __future__ import annotations

import math

import numpy as np

from popeye.geometry import (
    CoordSpace,
    HBox,
    Polygon,
    canonicalize_quad,
    hbox_to_quad,
    polygon_area,
    polygon_clip,
    quad_iou,
    rescale,
)


def main() -> None:
    # Any vertex order of the same rectangle collapses to one canonical form.
    messy = [(0.5, 0.6), (0.1, 0.2), (0.5, 0.2), (0.1, 0.6)]
    quad = canonicalize_quad(messy)
    print("canonical vertices:", quad.vertices)

    # A crossed ("bowtie") ordering is repaired through the convex hull.
    print("bowtie repaired:   ", canonicalize_quad([(0.1, 0.2), (0.5, 0.6), (0.5, 0.2), (0.1, 0.6)]).vertices)

    # A unit square against itself rotated by 45 degrees: the overlap is a
    # regular octagon, and the IoU has the closed form 1/sqrt(2).
    square = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
    t = math.radians(45)
    turned = [(x * math.cos(t) - y * math.sin(t), x * math.sin(t) + y * math.cos(t)) for x, y in square]
    a, b = canonicalize_quad(square), canonicalize_quad(turned)
    octagon = polygon_clip(Polygon(a.vertices), Polygon(b.vertices))
    print(f"octagon vertices {len(octagon.vertices)}, area {polygon_area(octagon):.6f}")
    print(f"IoU {quad_iou(a, b):.9f} vs 1/sqrt(2) = {1 / math.sqrt(2):.9f}")

    # Cross-check against a brute-force cell-center count.
    n = 1000
    ys, xs = (np.mgrid[0:n, 0:n] + 0.5) / n * 2 - 1

    def inside(q, x, y):
        v = np.asarray(q.vertices)
        ok = np.ones_like(x, dtype=bool)
        for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
            ok &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
        return ok

    ia, ib = inside(a, xs, ys), inside(b, xs, ys)
    print(f"raster IoU on a {n}x{n} grid: {(ia & ib).sum() / (ia | ib).sum():.6f}")

    # Axis-aligned boxes are quads too, and rescaling is lossless up to rounding.
    h = HBox(0.1, 0.2, 0.4, 0.8)
    print("hbox as quad:", hbox_to_quad(h).vertices)
    px = rescale(h, h.space, CoordSpace.pixel(640, 480))
    print("in 640x480 pixels:", px.as_tuple())


if __name__ == "__main__":
    main()
