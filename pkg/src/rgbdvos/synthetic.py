"""Procedural RGB-D scenes with moving rectangles, for tests and demos."""

from __future__ import annotations

import numpy as np

from .core import RGBDFrame, SequenceDataset


def moving_squares(n_frames: int = 8, size: int | tuple[int, int] = 64, n_objects: int = 1,
                   seed: int = 0, square: int = 16, speed: float = 2.0,
                   depth_contrast: int = 1500, background_depth: int = 3000,
                   noise: float = 4.0, static: bool = False, name: str | None = None,
                   ) -> SequenceDataset:
    """Textured background with ``n_objects`` solid rectangles that bounce.

    Objects sit ``depth_contrast`` mm in front of the background plane. All
    frames carry ground-truth labels; later objects occlude earlier ones.
    """
    rng = np.random.default_rng(seed)
    h, w = (size, size) if isinstance(size, int) else size
    base = rng.integers(40, 90, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    bg_rgb = (base[None, None, :] + 12 * np.sin(xx / 5.0 + rng.uniform(0, 6))[..., None]
              + 12 * np.cos(yy / 7.0 + rng.uniform(0, 6))[..., None])
    bg_depth = background_depth + 2.0 * (yy - h / 2)

    objs = []
    for k in range(n_objects):
        side = int(square * rng.uniform(0.85, 1.15))
        pos = np.array([rng.uniform(0, w - side), rng.uniform(0, h - side)])
        angle = rng.uniform(0, 2 * np.pi)
        vel = np.zeros(2) if static else speed * np.array([np.cos(angle), np.sin(angle)])
        color = rng.integers(150, 256, size=3)
        color[k % 3] = rng.integers(0, 60)
        depth = background_depth - depth_contrast + 150 * k
        objs.append([pos, vel, side, color, depth])

    frames = []
    for t in range(n_frames):
        rgb = bg_rgb + rng.normal(0, noise, size=(h, w, 3))
        depth = bg_depth + rng.normal(0, noise, size=(h, w))
        labels = np.zeros((h, w), np.uint8)
        for k, (pos, vel, side, color, d) in enumerate(objs, start=1):
            x0, y0 = int(round(pos[0])), int(round(pos[1]))
            sl = (slice(y0, y0 + side), slice(x0, x0 + side))
            rgb[sl] = color + rng.normal(0, noise, size=rgb[sl].shape)
            depth[sl] = d + rng.normal(0, noise, size=depth[sl].shape)
            labels[sl] = k
        frames.append(RGBDFrame(t, np.clip(rgb, 0, 255).astype(np.uint8),
                                np.clip(depth, 1, 65535).astype(np.uint16), labels))
        for o in objs:
            pos, vel, side = o[0], o[1], o[2]
            nxt = pos + vel
            for ax, lim in ((0, w - side), (1, h - side)):
                if not 0 <= nxt[ax] <= lim:
                    vel[ax] = -vel[ax]
            o[0] = np.clip(pos + vel, 0, [w - side, h - side])
    return SequenceDataset(frames, frames[0].gt_mask, n_objects,
                           name=name or f"squares-s{seed}")
