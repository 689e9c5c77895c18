"""Binary PPM/PGM codec, input preprocessing, label colorization and mIoU."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np

IGNORE_INDEX = 255
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ImageFormatError(ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class BadMaxvalError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


@dataclass
class Image:
    """8-bit image; ``pixels`` has shape (h, w, 3) for RGB or (h, w) for gray."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim not in (2, 3) or (self.pixels.ndim == 3 and self.pixels.shape[2] != 3):
            raise ImageFormatError(f"unsupported pixel array shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImageError("header ended early")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise TruncatedImageError("missing whitespace after header")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> Image:
    magic = data[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4"):
        raise UnsupportedFormatError(f"{magic.decode()} is not supported; use binary P5/P6")
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"bad magic {magic!r}")
    tokens, start = _header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"malformed header {tokens!r}") from None
    if maxval != 255:
        raise BadMaxvalError(f"maxval must be 255, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    payload = data[2 + start:2 + start + size]
    if len(payload) < size:
        raise TruncatedImageError(f"payload has {len(payload)} bytes, expected {size}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return Image(pixels.reshape(shape))


def encode_pnm(img: Image) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    return magic + f"\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


def read_image(path) -> Image:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_image(path, img: Image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def preprocess(img: Image, mean: Sequence[float] = IMAGENET_MEAN,
               std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    """RGB image -> (1, 3, h, w) float32 with x = (pixel/255 - mean) / std."""
    if img.channels != 3:
        raise ImageFormatError("model expects an RGB (P6) image, got grayscale")
    mean = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    x = img.pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
    return ((x - mean) / std)[None].astype(np.float32)


def load_palette() -> List[Tuple[int, int, int]]:
    text = resources.files("ffnet").joinpath("data/cityscapes_palette.txt").read_text()
    palette = []
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            _, r, g, b, _name = line.split()
            palette.append((int(r), int(g), int(b)))
    return palette


def colorize(classmap: np.ndarray, palette: Optional[Sequence[Tuple[int, int, int]]] = None,
             ignore_index: int = IGNORE_INDEX) -> Image:
    """Palette lookup; ignore pixels become black."""
    classmap = np.asarray(classmap)
    palette = load_palette() if palette is None else palette
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[:len(palette)] = np.asarray(palette, dtype=np.uint8)
    lut[ignore_index] = 0
    bad = (classmap >= len(palette)) & (classmap != ignore_index)
    if np.any(bad) or np.any(classmap < 0):
        raise ValueError(f"class index {int(classmap[bad].max()) if np.any(bad) else -1} "
                         f"outside palette of {len(palette)} colors")
    return Image(lut[classmap.astype(np.intp)])


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Counts indexed [gt, pred]; pixels where either map is ``ignore_index`` are dropped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    keep = (pred != ignore_index) & (gt != ignore_index)
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes or g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"class index outside [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-class IoU (nan for classes absent from both maps) and their mean."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = ~np.isnan(iou)
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int,
         ignore_index: int = IGNORE_INDEX) -> Tuple[np.ndarray, float]:
    """IoU_c = TP / (TP + FP + FN); absent classes are excluded from the mean."""
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index))
