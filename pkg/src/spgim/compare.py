"""Side-by-side comparison sheets: input | one alpha per method | cutout."""
import os

import cv2
import numpy as np

from . import imio
from .data import compose

DEFAULT_CELL = (128, 128)
DEFAULT_BG = (0.0, 0.8, 0.0)


def _fit(plane, cell):
    h, w = cell
    plane = np.asarray(plane, dtype=np.float64)
    interp = cv2.INTER_AREA if plane.shape[0] >= h else cv2.INTER_LINEAR
    return cv2.resize(plane, (w, h), interpolation=interp)


def _label(cell_img, text):
    # dark box behind the text keeps it readable on any content
    (tw, th), base = cv2.getTextSize(text, cv2.FONT_HERSHEY_SIMPLEX, 0.35, 1)
    cv2.rectangle(cell_img, (0, 0), (min(tw + 4, cell_img.shape[1] - 1), th + base + 3), (0, 0, 0), -1)
    cv2.putText(cell_img, text, (2, th + 2), cv2.FONT_HERSHEY_SIMPLEX, 0.35, (255, 255, 255), 1,
                cv2.LINE_AA)
    return cell_img


def render_sheet(image, alphas, methods, cell=DEFAULT_CELL, bg_color=DEFAULT_BG):
    """One row of cells as uint8 RGB. ``alphas`` maps method -> plane (or is missing)."""
    ch, cw = cell
    cells = [_label(imio.to_uint8(_fit(image, cell)), "input")]
    for m in methods:
        if m in alphas:
            a = imio.to_uint8(_fit(alphas[m], cell))
            cells.append(_label(np.repeat(a[..., None], 3, axis=2), m))
        else:
            cells.append(_label(np.full((ch, cw, 3), 96, np.uint8), f"{m}: missing"))
    first = next((m for m in methods if m in alphas), None)
    if first is None:
        cells.append(_label(np.full((ch, cw, 3), 96, np.uint8), "cutout: missing"))
    else:
        solid = np.broadcast_to(np.asarray(bg_color, dtype=np.float64), (ch, cw, 3))
        cut = compose(_fit(image, cell), solid, np.clip(_fit(alphas[first], cell), 0, 1),
                      resize_background=False)
        cells.append(_label(imio.to_uint8(cut), f"cutout ({first})"))
    return np.concatenate(cells, axis=1)


def emit_comparison(images, alphas_by_method, out_dir, cell=DEFAULT_CELL, bg_color=DEFAULT_BG):
    """Write ``<id>.png`` per image; returns the written paths in image order.

    ``images`` maps id -> RGB plane; ``alphas_by_method`` maps method ->
    {id -> alpha}. A method lacking an id gets a labelled blank cell.
    """
    methods = list(alphas_by_method)
    for m, per_image in alphas_by_method.items():
        unknown = set(per_image) - set(images)
        if unknown:
            raise ValueError(f"method {m!r} has alphas for unknown image ids {sorted(unknown)}")
    paths = []
    for image_id, image in images.items():
        row = {m: alphas_by_method[m][image_id] for m in methods if image_id in alphas_by_method[m]}
        sheet = render_sheet(image, row, methods, cell, bg_color)
        path = os.path.join(out_dir, f"{image_id}.png")
        imio.write_image(path, sheet.astype(np.float64) / 255.0)
        paths.append(path)
    return paths
