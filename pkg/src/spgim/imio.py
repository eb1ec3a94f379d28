"""PNG read/write helpers. Arrays are float in [0, 1]; colour planes are RGB."""
import os

import cv2
import numpy as np


def read_image(path):
    img = cv2.imread(os.fspath(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def read_alpha(path):
    """Read a single-channel matte; 8- and 16-bit files are both normalised to [0, 1]."""
    a = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if a is None:
        raise FileNotFoundError(f"cannot read alpha {path}")
    if a.ndim == 3:
        a = a[..., 0] if a.shape[2] < 4 else a[..., 3]
    if a.dtype == np.uint16:
        return a.astype(np.float64) / 65535.0
    return a.astype(np.float64) / 255.0


def to_uint8(x):
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, rgb):
    _ensure_parent(path)
    if not cv2.imwrite(os.fspath(path), cv2.cvtColor(to_uint8(rgb), cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def write_gray(path, plane, bits=8):
    _ensure_parent(path)
    plane = np.asarray(plane, dtype=np.float64)
    if bits == 16:
        data = np.clip(np.rint(plane * 65535.0), 0, 65535).astype(np.uint16)
    elif bits == 8:
        data = to_uint8(plane)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    if not cv2.imwrite(os.fspath(path), data):
        raise OSError(f"failed to write {path}")


def write_labels(path, labels):
    _ensure_parent(path)
    if not cv2.imwrite(os.fspath(path), np.asarray(labels, dtype=np.uint8)):
        raise OSError(f"failed to write {path}")


def read_labels(path):
    t = cv2.imread(os.fspath(path), cv2.IMREAD_GRAYSCALE)
    if t is None:
        raise FileNotFoundError(f"cannot read trimap {path}")
    return t


def _ensure_parent(path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
