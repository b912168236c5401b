"""Glimpse renderings: binary PPM rasters and SVG overlays, no imaging dependency."""
from __future__ import annotations

import base64
import os
import struct
import zlib

import numpy as np

from . import aodnet
from .geometry import clip_boxes, decode_boxes, to_corners

WHITE = (255, 255, 255)
RED = (255, 0, 0)
# glimpse colors in step order; steps past the list wrap around
GLIMPSE_COLORS = ((0, 96, 255), (255, 220, 0), (0, 200, 120), (220, 0, 220))


def glimpse_color(step):
    """Color of the ``step``-th glimpse (0-based, proposal excluded)."""
    return GLIMPSE_COLORS[step % len(GLIMPSE_COLORS)]


def to_rgb(image, scale=1):
    """``C x H x W`` floats in [0, 1] to an ``H*scale x W*scale x 3`` uint8 array."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=0) if img.shape[0] != 3 else None
    rgb = np.repeat(gray[..., None], 3, axis=2) if gray is not None else img.transpose(1, 2, 0)
    rgb = (np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    return rgb


def draw_box(rgb, box, color, scale=1):
    """Draw the outline of a center-form ``box`` (image pixels) in place."""
    H, W = rgb.shape[:2]
    x1, y1, x2, y2 = to_corners(np.asarray(box, dtype=np.float64)[None])[0] * scale
    c0 = int(np.clip(np.floor(x1), 0, W - 1))
    c1 = int(np.clip(np.ceil(x2) - 1, 0, W - 1))
    r0 = int(np.clip(np.floor(y1), 0, H - 1))
    r1 = int(np.clip(np.ceil(y2) - 1, 0, H - 1))
    rgb[r0, c0:c1 + 1] = color
    rgb[r1, c0:c1 + 1] = color
    rgb[r0:r1 + 1, c0] = color
    rgb[r0:r1 + 1, c1] = color
    return rgb


def layers(proposal, glimpses, final_box):
    """Ordered ``(kind, box, color)`` triples: proposal, glimpses in step order, final box."""
    out = [("proposal", np.asarray(proposal), WHITE)]
    for i, g in enumerate(glimpses):
        out.append((f"glimpse{i + 1}", np.asarray(g), glimpse_color(i)))
    out.append(("final", np.asarray(final_box), RED))
    return out


def write_ppm(path, rgb):
    H, W = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    W, H = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: W * H * 3], dtype=np.uint8).reshape(H, W, 3)


def _png_bytes(rgb):
    H, W = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(H))

    def chunk(tag, body):
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))

    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", W, H, 8, 2, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def write_svg(path, image, items, scale=4):
    """SVG with the image as an embedded PNG and one rectangle per layer."""
    rgb = to_rgb(image)
    H, W = rgb.shape[:2]
    href = "data:image/png;base64," + base64.b64encode(_png_bytes(rgb)).decode("ascii")
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale}" height="{H * scale}" '
        f'viewBox="0 0 {W} {H}">',
        f'<image href="{href}" x="0" y="0" width="{W}" height="{H}" style="image-rendering:pixelated"/>',
    ]
    for kind, box, color in items:
        x1, y1, x2, y2 = to_corners(box[None])[0]
        lines.append(
            f'<rect class="{kind}" x="{x1:.3f}" y="{y1:.3f}" width="{x2 - x1:.3f}" height="{y2 - y1:.3f}" '
            f'fill="none" stroke="rgb{color}" stroke-width="{1.5 / scale * 2:.3f}"/>'
        )
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def final_box(probs, deltas, proposal, image_hw):
    """Regressed box of the highest-scoring object class."""
    cls = int(np.argmax(probs[1:]))
    H, W = image_hw
    return clip_boxes(decode_boxes(deltas[cls][None], proposal[None]), W, H)[0], cls


def render_proposals(image, proposals, params, config: aodnet.AODConfig, out_dir, prefix="img", scale=4):
    """One PPM and one SVG per proposal; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    image = np.asarray(image, dtype=params["fc6.W"].value.dtype)
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if props.shape[0] == 0:
        return []
    ro = aodnet.forward_batch(image[None], np.zeros(len(props), dtype=np.int64), props, params, config)
    H, W = image.shape[1:]
    paths = []
    for i in range(len(props)):
        glimpses = clip_boxes(ro.glimpse_boxes[1:, i], W, H) if config.T > 1 else []
        box, _ = final_box(ro.probs[i], ro.bbox_deltas[i], props[i], (H, W))
        items = layers(props[i], glimpses, box)
        rgb = to_rgb(image, scale)
        for _, b, color in items:
            draw_box(rgb, b, color, scale)
        stem = os.path.join(out_dir, f"{prefix}_p{i:03d}")
        write_ppm(stem + ".ppm", rgb)
        write_svg(stem + ".svg", image, items, scale)
        paths += [stem + ".ppm", stem + ".svg"]
    return paths
