"""Images, augmentations, the synthetic instance set and Oxford-style ground truth.

Images are float arrays shaped ``(3, H, W)`` with values in [0, 1].
"""

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, GroundTruthError, ShapeError
from .evaluate import GroundTruth
from .seeding import generator


class PPMError(FormatError):
    pass


class WrongMagicError(PPMError):
    code = "ppm_magic"


class MalformedHeaderError(PPMError):
    code = "ppm_header"


class TruncatedPayloadError(PPMError):
    code = "ppm_truncated"


def to_bytes(img):
    img = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(img, path):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError("image must be 3 x H x W, got %s" % (img.shape,))
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(to_bytes(img).transpose(1, 2, 0).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_ppm(raw):
    if raw[:2] != b"P6":
        raise WrongMagicError("wrong magic %r (only binary P6 is supported)" % raw[:2])
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if not m or not m.group(1).isdigit():
            raise MalformedHeaderError("malformed PPM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(raw) or raw[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1 or maxval != 255:
        raise MalformedHeaderError("unsupported PPM geometry %dx%d maxval %d" % (w, h, maxval))
    payload = raw[pos : pos + 3 * w * h]
    if len(payload) < 3 * w * h:
        raise TruncatedPayloadError("expected %d bytes of pixels, got %d" % (3 * w * h, len(payload)))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_ppm(path):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


@dataclass(frozen=True)
class AugmentConfig:
    crop_min: int = 24
    crop_max: int = 32
    out_size: int = 32
    flip_prob: float = 0.5
    scale_min: float = 0.6
    scale_max: float = 1.4
    blur_prob: float = 0.5
    blur_sigma: float = 1.0

    @classmethod
    def identity(cls, size=32):
        return cls(crop_min=size, crop_max=size, out_size=size, flip_prob=0.0,
                   scale_min=1.0, scale_max=1.0, blur_prob=0.0)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centers and edge clamping."""
    _, h, w = img.shape

    def taps(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = taps(h, out_h)
    x0, x1, fx = taps(w, out_w)
    rows = img[:, y0, :] * (1.0 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1.0 - fx) + rows[:, :, x1] * fx


def gaussian_blur3(img, sigma=1.0):
    k = np.exp(-(np.arange(-1, 2) ** 2) / (2.0 * sigma * sigma))
    k /= k.sum()
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    _, h, w = img.shape
    rows = sum(k[i] * padded[:, i : i + h, :] for i in range(3))
    return sum(k[j] * rows[:, :, j : j + w] for j in range(3))


def augment(img, cfg, rng):
    """Random crop, resize, flip, per-channel scaling and blur, in that order.

    Exactly the same number of draws is taken from ``rng`` on every call.
    """
    _, h, w = img.shape
    if min(h, w) < cfg.crop_min:
        raise ShapeError("image %dx%d smaller than minimum crop %d" % (h, w, cfg.crop_min))
    side = int(rng.integers(cfg.crop_min, min(cfg.crop_max, h, w) + 1))
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    flip = rng.random() < cfg.flip_prob
    scales = rng.uniform(cfg.scale_min, cfg.scale_max, size=3)
    blur = rng.random() < cfg.blur_prob

    out = resize_bilinear(img[:, y : y + side, x : x + side], cfg.out_size, cfg.out_size)
    if flip:
        out = out[:, :, ::-1]
    out = np.clip(out * scales[:, None, None], 0.0, 1.0)
    if blur:
        out = gaussian_blur3(out, cfg.blur_sigma)
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class SynthSpec:
    instances: int = 16
    views: int = 8
    size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.instances < 2 or self.views < 2:
            raise ValueError("need at least 2 instances and 2 views")


SHAPES = ("rectangle", "disc", "cross")


def _draw_shape(canvas, kind, color, cy, cx, r):
    size = canvas.shape[1]
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rectangle":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.6 * r)
    elif kind == "disc":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        arm = max(1.0, r / 3.0)
        mask = ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)) | (
            (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)
        )
    canvas[:, mask] = color[:, None]


def render_instance(rng, size=32):
    """A canonical composition: 3-5 colored shapes on a noise background."""
    base = rng.uniform(0.2, 0.8, size=3)
    canvas = np.clip(base[:, None, None] + rng.normal(0.0, 0.08, size=(3, size, size)), 0.0, 1.0)
    for _ in range(int(rng.integers(3, 6))):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(4, size - 4, size=2)
        r = rng.uniform(3.0, size / 4.0)
        _draw_shape(canvas, kind, color, cy, cx, r)
    return canvas


def synth_generate(spec, out_dir, augment_cfg=None):
    """Write ``instances * views`` PPM views plus ``manifest.tsv``.

    Returns the manifest as a list of ``(filename, label)``.
    """
    augment_cfg = augment_cfg or AugmentConfig(out_size=spec.size)
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for k in range(spec.instances):
        canonical = render_instance(generator(spec.seed, "synth", "instance", k), spec.size)
        rng = generator(spec.seed, "synth", "views", k)
        for v in range(spec.views):
            name = "inst%03d_v%02d.ppm" % (k, v)
            write_ppm(augment(canonical, augment_cfg, rng), os.path.join(out_dir, name))
            manifest.append((name, k))
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


def write_manifest(manifest, path):
    with open(path, "w") as fh:
        for name, label in manifest:
            fh.write("%s\t%s\n" % (name, label))


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError("%s:%d: expected filename<TAB>label" % (path, lineno))
            entries.append((parts[0], int(parts[1])))
    return entries


def image_id(filename):
    return os.path.splitext(os.path.basename(filename))[0]


def _read_list(path):
    try:
        with open(path) as fh:
            return [line.strip() for line in fh if line.strip()]
    except FileNotFoundError:
        raise GroundTruthError("missing file %s" % path) from None


def parse_ground_truth(gt_dir, query_name):
    """Read ``<query>_{query,good,ok,junk}.txt`` in the Oxford5k layout.

    The ``oxc1_`` prefix that the Oxford query files put on image stems is
    stripped.
    """
    lines = _read_list(os.path.join(gt_dir, query_name + "_query.txt"))
    if len(lines) != 1:
        raise GroundTruthError("query file for %r must hold exactly one line" % query_name)
    parts = lines[0].split()
    if len(parts) != 5:
        raise GroundTruthError("malformed bbox line %r" % lines[0])
    stem = parts[0]
    if stem.startswith("oxc1_"):
        stem = stem[len("oxc1_") :]
    try:
        bbox = tuple(float(t) for t in parts[1:])
    except ValueError:
        raise GroundTruthError("malformed bbox line %r" % lines[0]) from None
    if not (bbox[0] < bbox[2] and bbox[1] < bbox[3]):
        raise GroundTruthError("bbox must satisfy x1 < x2 and y1 < y2, got %r" % (bbox,))
    good = _read_list(os.path.join(gt_dir, query_name + "_good.txt"))
    ok = _read_list(os.path.join(gt_dir, query_name + "_ok.txt"))
    junk = _read_list(os.path.join(gt_dir, query_name + "_junk.txt"))
    return GroundTruth(query_name, frozenset(good) | frozenset(ok), frozenset(junk), bbox, stem)


def list_queries(gt_dir):
    suffix = "_query.txt"
    return sorted(f[: -len(suffix)] for f in os.listdir(gt_dir) if f.endswith(suffix))


def write_ground_truth(gt_dir, gt):
    os.makedirs(gt_dir, exist_ok=True)
    x1, y1, x2, y2 = gt.bbox
    with open(os.path.join(gt_dir, gt.query_id + "_query.txt"), "w") as fh:
        fh.write("%s %s %s %s %s\n" % (gt.query_image, repr(x1), repr(y1), repr(x2), repr(y2)))
    for suffix, items in (("good", gt.positives), ("ok", ()), ("junk", gt.junk)):
        with open(os.path.join(gt_dir, "%s_%s.txt" % (gt.query_id, suffix)), "w") as fh:
            fh.writelines(s + "\n" for s in sorted(items))


def crop_bbox(img, bbox):
    _, h, w = img.shape
    x1, y1, x2, y2 = bbox
    c0 = max(0, int(math.floor(x1)))
    r0 = max(0, int(math.floor(y1)))
    c1 = min(w, int(math.ceil(x2)))
    r1 = min(h, int(math.ceil(y2)))
    if c1 <= c0 or r1 <= r0:
        raise ShapeError("bbox %r does not intersect the %dx%d image" % (tuple(bbox), w, h))
    return img[:, r0:r1, c0:c1].copy()
