"""PRNU sensor-identification baseline.

Noise residuals ``W = I - F(I)`` with a 3x3 Gaussian denoiser, attenuation
of large residual values, maximum-likelihood reference patterns and
zero-shift normalized cross-correlation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import struct

import numpy as np

MIN_SIDE = 16
DENOISE_SIGMA = 0.8
MAGIC = b"PRNU"
FORMAT_VERSION = 1


class PrnuError(ValueError):
    pass


def gaussian_taps(sigma=DENOISE_SIGMA):
    t = np.exp(-np.arange(-1, 2) ** 2 / (2.0 * sigma * sigma))
    return t / t.sum()


def gaussian3x3(img, sigma=DENOISE_SIGMA):
    """Separable 3x3 Gaussian blur with mirrored borders (edge pixel repeated)."""
    taps = gaussian_taps(sigma)
    p = np.pad(img, 1, mode="symmetric")
    rows = taps[0] * p[:-2] + taps[1] * p[1:-1] + taps[2] * p[2:]
    return taps[0] * rows[:, :-2] + taps[1] * rows[:, 1:-1] + taps[2] * rows[:, 2:]


DENOISERS = {"gaussian3": gaussian3x3}


def noise_residual(image, denoiser="gaussian3"):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < MIN_SIDE:
        raise PrnuError(f"need a 2-D image with sides >= {MIN_SIDE}, got {image.shape}")
    return image - DENOISERS[denoiser](image)


@dataclass(frozen=True)
class EnhanceConfig:
    alpha: float = 6.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


def enhance_model3(residual, cfg=EnhanceConfig()):
    """Scale each value x by exp(-x^2 / (2 alpha^2 sigma^2)).

    sigma is the residual's own standard deviation. Values well below
    ``alpha * sigma`` pass almost unchanged; large ones, which usually come
    from scene edges rather than the sensor, are suppressed.
    """
    r = np.asarray(residual, dtype=np.float64)
    sigma = r.std()
    if sigma == 0:
        return r.copy()
    c = cfg.alpha * sigma
    return r * np.exp(-r * r / (2.0 * c * c))


def ncc(a, b):
    """Zero-mean normalized cross-correlation at zero shift."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PrnuError(f"ncc shape mismatch: {a.shape} vs {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        raise PrnuError("ncc undefined for a zero-variance input")
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


@dataclass
class ReferencePattern:
    sensor_id: str
    pattern: np.ndarray
    count: int


def build_reference(residuals, images, sensor_id):
    """ML estimate ``sum(W_i I_i) / sum(I_i^2)``, made zero-mean."""
    residuals = [np.asarray(w, dtype=np.float64) for w in residuals]
    images = [np.asarray(i, dtype=np.float64) for i in images]
    if len(residuals) < 2 or len(residuals) != len(images):
        raise PrnuError(f"sensor {sensor_id}: need >= 2 residual/image pairs, "
                        f"got {len(residuals)}/{len(images)}")
    shape = residuals[0].shape
    if any(w.shape != shape for w in residuals) or any(i.shape != shape for i in images):
        raise PrnuError(f"sensor {sensor_id}: residuals and images must share one shape")
    num = np.zeros(shape)
    den = np.zeros(shape)
    for w, i in zip(residuals, images):
        num += w * i
        den += i * i
    k = num / np.maximum(den, 1e-12)
    return ReferencePattern(sensor_id, k - k.mean(), len(residuals))


def image_residual(image, enhance=True, cfg=EnhanceConfig()):
    w = noise_residual(image)
    return enhance_model3(w, cfg) if enhance else w


def build_gallery(images, sensor_ids, enhance=True, cfg=EnhanceConfig()):
    """One reference pattern per sensor, sorted by sensor id."""
    by_sensor = {}
    for img, sid in zip(images, sensor_ids):
        by_sensor.setdefault(sid, []).append(np.asarray(img, dtype=np.float64))
    gallery = []
    for sid in sorted(by_sensor):
        imgs = by_sensor[sid]
        gallery.append(build_reference([image_residual(i, enhance, cfg) for i in imgs], imgs, sid))
    return gallery


def identify_sensor(image, gallery, enhance=True, cfg=EnhanceConfig()):
    """``(sensor_id, scores)``: the best-correlated reference and all NCC scores.

    Scores follow gallery order; exact ties go to the lowest sensor id.
    """
    if not gallery:
        raise PrnuError("empty reference-pattern gallery")
    w = image_residual(image, enhance, cfg)
    scores = []
    for ref in gallery:
        if ref.pattern.shape != w.shape:
            raise PrnuError(f"image {w.shape} vs reference {ref.sensor_id} {ref.pattern.shape}")
        scores.append(ncc(w, ref.pattern))
    best = 0
    for i in range(1, len(gallery)):
        if scores[i] > scores[best] or (
                scores[i] == scores[best] and gallery[i].sensor_id < gallery[best].sensor_id):
            best = i
    return gallery[best].sensor_id, scores


def identification_accuracy(images, sensor_ids, gallery, enhance=True, cfg=EnhanceConfig()):
    hits = [identify_sensor(img, gallery, enhance, cfg)[0] == sid
            for img, sid in zip(images, sensor_ids)]
    return float(np.mean(hits))


# -- reference-pattern store ----------------------------------------------------------

def save_reference(ref, path):
    """``PRNU`` magic, u32 version, u32 rows, u32 cols, u32 count, u16 id length + id,
    then rows*cols little-endian float64 values."""
    rows, cols = ref.pattern.shape
    sid = ref.sensor_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IIII", FORMAT_VERSION, rows, cols, ref.count))
        fh.write(struct.pack("<H", len(sid)) + sid)
        fh.write(np.ascontiguousarray(ref.pattern, dtype="<f8").tobytes())


def load_reference(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise PrnuError(f"{path}: not a PRNU reference file")
    if len(buf) < 22:
        raise PrnuError(f"{path}: truncated header")
    version, rows, cols, count = struct.unpack_from("<IIII", buf, 4)
    if version != FORMAT_VERSION:
        raise PrnuError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (n,) = struct.unpack_from("<H", buf, 20)
    sid = buf[22:22 + n].decode("utf-8")
    data = buf[22 + n:]
    if len(data) != 8 * rows * cols:
        raise PrnuError(f"{path}: expected {rows * cols} values, found {len(data) // 8}")
    pattern = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return ReferencePattern(sid, pattern, count)


def save_gallery(gallery, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for ref in gallery:
        save_reference(ref, d / f"{ref.sensor_id}.prnu")


def load_gallery(directory):
    d = Path(directory)
    if not d.is_dir():
        raise PrnuError(f"gallery directory {d} does not exist")
    gallery = [load_reference(p) for p in sorted(d.glob("*.prnu"))]
    if not gallery:
        raise PrnuError(f"no .prnu reference patterns in {d}")
    return sorted(gallery, key=lambda r: r.sensor_id)
