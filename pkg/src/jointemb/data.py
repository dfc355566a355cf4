"""Manifests, joint (subject, sensor) labels, splits, image I/O and the
synthetic subject+sensor image generator."""

from __future__ import annotations

from dataclasses import dataclass, asdict
import json
import logging
import os
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

CANONICAL_SIZE = 48


class DataError(Exception):
    """Bad manifest, unreadable image, or a split that cannot be made."""


@dataclass
class ImageSample:
    path: str
    subject_id: str
    sensor_id: str
    split: str | None = None
    class_index: int | None = None

    @property
    def sample_id(self):
        return Path(self.path).stem

    def to_record(self):
        rec = {"path": self.path, "subject_id": self.subject_id, "sensor_id": self.sensor_id}
        if self.split is not None:
            rec["split"] = self.split
        return rec


@dataclass(frozen=True)
class JointLabel:
    subject_id: str
    sensor_id: str
    class_index: int


# -- manifests ------------------------------------------------------------------

def read_manifest(path):
    """Load a JSON manifest; relative image paths resolve against its folder."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(records, list):
        raise DataError(f"manifest {path} must be a JSON array")
    samples = []
    for i, rec in enumerate(records):
        try:
            p = Path(rec["path"])
            if not p.is_absolute():
                p = path.parent / p
            samples.append(ImageSample(str(p), str(rec["subject_id"]), str(rec["sensor_id"]),
                                       rec.get("split")))
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest {path} entry {i} malformed: {rec!r}") from exc
    return samples


def write_manifest(samples, path):
    """Write samples as a JSON array, storing paths relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    records = []
    for s in samples:
        rec = s.to_record()
        try:
            rec["path"] = os.path.relpath(Path(s.path).resolve(), base)
        except ValueError:
            pass
        records.append(rec)
    path.write_text(json.dumps(records, indent=1) + "\n")


def build_joint_labels(samples):
    """Assign dense class indices to the (subject, sensor) pairs that occur.

    Classes are numbered in sorted (subject_id, sensor_id) order, so the map
    does not depend on manifest order. Sets ``class_index`` on every sample and
    returns ``(label_map, n_classes)`` where ``label_map`` maps the pair to its
    ``JointLabel``.
    """
    if not samples:
        raise DataError("cannot build joint labels from an empty manifest")
    pairs = sorted({(s.subject_id, s.sensor_id) for s in samples})
    label_map = {p: JointLabel(p[0], p[1], i) for i, p in enumerate(pairs)}
    for s in samples:
        s.class_index = label_map[(s.subject_id, s.sensor_id)].class_index
    return label_map, len(pairs)


def class_count(structure):
    """|L| for a list of ``(subjects, sensors)`` blocks, e.g. ``[(60, ["a", "b"])]``.

    Each block crosses its subjects with its sensors; only occurring pairs count.
    """
    samples = [ImageSample(f"{sub}_{sen}", str(sub), str(sen))
               for subjects, sensors in structure for sub in subjects for sen in sensors]
    return build_joint_labels(samples)[1]


def train_count(n):
    """Training samples for a class of size n: round(0.7 n), leaving >= 1 for test."""
    if n < 2:
        raise ValueError("a class needs at least 2 samples to split")
    return min(int(np.floor(0.7 * n + 0.5)), n - 1)


def split_70_30(samples, seed):
    """Tag each sample train/test, per joint class, uniformly at random given ``seed``."""
    build_joint_labels(samples)
    by_class = {}
    for s in sorted(samples, key=lambda s: (s.class_index, s.sample_id, s.path)):
        by_class.setdefault(s.class_index, []).append(s)
    rng = np.random.default_rng(seed)
    for members in by_class.values():
        if len(members) < 2:
            s = members[0]
            raise DataError(f"class ({s.subject_id}, {s.sensor_id}) has a single sample; "
                            "cannot split")
        chosen = set(rng.permutation(len(members))[:train_count(len(members))].tolist())
        for i, s in enumerate(members):
            s.split = "train" if i in chosen else "test"
    return samples


def select_split(samples, split):
    return [s for s in samples if s.split == split]


# -- images ---------------------------------------------------------------------

def write_pgm(path, pixels):
    """Write an 8-bit binary (P5) PGM."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _pgm_tokens(buf):
    """Yield header tokens and the offset following each, skipping comments."""
    i = 2
    while True:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if i == j:
            raise ValueError("unexpected end of PGM header")
        yield buf[i:j], j
        i = j


def read_pgm(path):
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError("not a binary P5 PGM")
    tokens = _pgm_tokens(buf)
    (w, _), (h, _), (maxval, end) = next(tokens), next(tokens), next(tokens)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    data = buf[end + 1:end + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"PGM pixel data truncated ({len(data)} of {w * h} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def read_image(path):
    """8-bit grayscale pixels from a PGM or PNG file."""
    try:
        if str(path).lower().endswith(".pgm"):
            return read_pgm(path)
        from PIL import Image
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _bilinear_axis(n_in, n_out):
    # half-pixel centres: output i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, x - lo


def resize_bilinear(img, size=CANONICAL_SIZE):
    """Bilinear resize to ``size`` x ``size`` (no antialiasing, edge-clamped)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    r0, r1, fr = _bilinear_axis(h, size)
    c0, c1, fc = _bilinear_axis(w, size)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def load_and_resize(sample, size=CANONICAL_SIZE):
    """Canonical network input: bilinear resize to 48x48, scaled to [0, 1]."""
    path = sample.path if isinstance(sample, ImageSample) else sample
    pixels = read_image(path)
    if pixels.shape != (size, size):
        pixels = resize_bilinear(pixels, size)
    return np.asarray(pixels, dtype=np.float64) / 255.0


def load_images(samples, size=CANONICAL_SIZE):
    if not samples:
        return np.zeros((0, size, size))
    return np.stack([load_and_resize(s, size) for s in samples])


# -- synthetic data ---------------------------------------------------------------

# sub-seed domains: every random draw is keyed by (master seed, domain, indices)
_SUBJECT, _SENSOR, _IMAGE = 1, 2, 3


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 10
    n_sensors: int = 3
    images_per_class: int = 20
    size: int = CANONICAL_SIZE
    bandwidth: float = 3.0  # gaussian blur sigma (px) shaping the subject pattern
    sigma_k: float = 0.05
    sigma_eta: float = 0.02
    jitter: int = 2
    seed: int = 42

    def __post_init__(self):
        for name in ("n_subjects", "n_sensors", "images_per_class", "size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("bandwidth", "sigma_k", "sigma_eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")

    def to_dict(self):
        return asdict(self)


def _rng(cfg, *key):
    return np.random.default_rng([cfg.seed, *key])


def subject_pattern(cfg, subject):
    """Smooth random field in roughly [0.15, 0.85], padded by the jitter margin."""
    side = cfg.size + 2 * cfg.jitter
    rng = _rng(cfg, _SUBJECT, subject)
    field = rng.standard_normal((side, side))
    if cfg.bandwidth > 0:
        field = gaussian_filter(field, cfg.bandwidth, mode="wrap")
    std = field.std()
    field = (field - field.mean()) / (std if std > 0 else 1.0)
    return np.clip(0.5 + 0.15 * field, 0.0, 1.0)


def sensor_prnu(cfg, sensor):
    """Zero-mean white gaussian multiplicative pattern with std ``sigma_k``."""
    rng = _rng(cfg, _SENSOR, sensor)
    return cfg.sigma_k * rng.standard_normal((cfg.size, cfg.size))


def synth_image(cfg, subject, sensor, index, base=None, prnu=None):
    """One image in [0, 1]: clip(A * (1 + K) + noise), A the shifted, rescaled subject."""
    base = subject_pattern(cfg, subject) if base is None else base
    prnu = sensor_prnu(cfg, sensor) if prnu is None else prnu
    rng = _rng(cfg, _IMAGE, subject, sensor, index)
    brightness = rng.uniform(0.8, 1.2)
    dy, dx = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
    j = cfg.jitter
    a = brightness * base[j + dy:j + dy + cfg.size, j + dx:j + dx + cfg.size]
    noise = cfg.sigma_eta * rng.standard_normal((cfg.size, cfg.size))
    return np.clip(a * (1.0 + prnu) + noise, 0.0, 1.0)


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic(cfg, out_dir):
    """Write ``cfg``'s images as PGMs plus ``manifest.json``; returns the samples.

    Files are named ``sub{S}_sen{C}_{i}.pgm``. Subjects are ``subNN`` and
    sensors ``senNN``; every subject is imaged by every sensor.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    prnus = [sensor_prnu(cfg, c) for c in range(cfg.n_sensors)]
    samples = []
    for s in range(cfg.n_subjects):
        base = subject_pattern(cfg, s)
        for c in range(cfg.n_sensors):
            for i in range(cfg.images_per_class):
                img = synth_image(cfg, s, c, i, base, prnus[c])
                path = out / "images" / f"sub{s:02d}_sen{c:02d}_{i:03d}.pgm"
                write_pgm(path, to_uint8(img))
                samples.append(ImageSample(str(path), f"sub{s:02d}", f"sen{c:02d}"))
    write_manifest(samples, out / "manifest.json")
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    log.info("wrote %d synthetic images to %s", len(samples), out)
    return samples


def add_highlight_edges(img, rng, count=40, amplitude=1.0, min_len=8, max_len=16):
    """Burn ``count`` one-pixel-wide bright segments into a copy of ``img``.

    Each segment is horizontal or vertical with a random position and length.
    The sharp edges they create dominate a noise residual, which makes this a
    stress input for sensor fingerprinting.
    """
    out = np.array(img, dtype=np.float64, copy=True)
    h, w = out.shape
    for _ in range(count):
        r, c = rng.integers(0, h), rng.integers(0, w)
        n = int(rng.integers(min_len, max_len + 1))
        if rng.random() < 0.5:
            out[r, c:c + n] += amplitude
        else:
            out[r:r + n, c] += amplitude
    return np.clip(out, 0.0, 1.0)
