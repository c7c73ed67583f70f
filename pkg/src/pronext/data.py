"""Procedural desk-scale datasets with ground-truth masks and boxes.

Three task families, one per challenge regime:

  detail      the class is carried by a tiny 3x3 glyph stamped somewhere
              inside a large common shape; background clutter and colors are
              class-independent, so channel statistics are useless.
  structure   two concentric ellipses; the class is whether the vertical
              radius ratio of inner to outer exceeds 0.6. Textures are
              randomized and horizontal radii are independent, so only the
              vertical geometry decides.
  interaction the class pairs an object texture factor (stripe orientation)
              with a background palette factor (warm/cool); each factor alone
              leaves a 2-way ambiguity, so accuracy above 1/2 requires using
              both object and context.

Labels are deterministic functions of the rendered factors (Bayes accuracy
is 1 by construction). Every image is quantized to 8-bit levels at
generation time so the PPM/PGM round trip is lossless.

Directory layout: index.csv with `filename,label,x0,y0,x1,y1` lines, P6
images, P5 masks named `<image>_mask.pgm` (+ `_mask2.pgm` for the inner
structure), and a cues.csv sidecar recording the generative factors.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, InputError, ParseError
from .netpbm import read_pgm_p5, read_ppm_p6, write_pgm_p5, write_ppm_p6

TASKS = ("detail", "structure", "interaction")


def max_workers():
    """Worker-pool cap from PRONEXT_THREADS (defaults to 1)."""
    raw = os.environ.get("PRONEXT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PRONEXT_THREADS must be an integer, got '{raw}'") from None


@dataclass
class Dataset:
    name: str
    images: np.ndarray                    # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray                    # (N,) int64
    boxes: np.ndarray                     # (N, 4) int64, (x0, y0, x1, y1)
    masks: np.ndarray                     # (N, H, W) uint8 object masks
    masks2: np.ndarray | None = None      # inner-structure masks, if any
    cues: list = field(default_factory=list)
    num_classes: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self):
        return self.images.shape[1]


# ---------------------------------------------------------------------------
# rendering helpers
# ---------------------------------------------------------------------------


def _quantize(img):
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _ellipse(size, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _speckle(rng, size, base, amp=0.04):
    noise = rng.uniform(-amp, amp, size=(size, size, 1))
    return np.clip(np.asarray(base, dtype=np.float64)[None, None, :] + noise, 0, 1)


def _clutter(img, rng, colors, count, size, r_lo=2, r_hi=6):
    """Scatter small ellipses of the given color family; returns their union mask."""
    touched = np.zeros(img.shape[:2], dtype=bool)
    for _ in range(count):
        cy, cx = rng.integers(0, size, 2)
        ry, rx = rng.integers(r_lo, r_hi + 1, 2)
        blob = _ellipse(size, cy, cx, ry, rx)
        color = colors[rng.integers(0, len(colors))] + rng.uniform(-0.05, 0.05, 3)
        img[blob] = np.clip(color, 0, 1)
        touched |= blob
    return touched


def _bbox_of(mask):
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.int64)


def _make_glyphs():
    """16 distinct, roughly balanced 3x3 binary patterns (fixed table)."""
    rng = np.random.default_rng(90125)
    glyphs, seen = [], set()
    while len(glyphs) < 16:
        g = rng.integers(0, 2, size=(3, 3))
        if not (3 <= g.sum() <= 6):
            continue
        key = g.tobytes()
        if key in seen:
            continue
        seen.add(key)
        glyphs.append(g.astype(np.float64))
    return glyphs


GLYPHS = _make_glyphs()

_MUTED = [np.array(c) for c in
          ([0.45, 0.45, 0.5], [0.5, 0.42, 0.4], [0.4, 0.5, 0.45], [0.48, 0.48, 0.42])]
_WARM = [np.array(c) for c in
         ([0.75, 0.3, 0.2], [0.8, 0.55, 0.2], [0.85, 0.75, 0.25], [0.7, 0.4, 0.3])]
_COOL = [np.array(c) for c in
         ([0.2, 0.35, 0.75], [0.2, 0.6, 0.65], [0.25, 0.55, 0.35], [0.3, 0.4, 0.7])]


def _spawn_rngs(rng, n):
    """Independent per-sample generators; order-independent by construction."""
    seed = int(rng.integers(0, 2 ** 63 - 1))
    return [np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(i,)))) for i in range(n)]


def _render_all(render_one, rngs):
    workers = max_workers()
    if workers == 1:
        return [render_one(r) for r in rngs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(render_one, rngs))


# ---------------------------------------------------------------------------
# detail task
# ---------------------------------------------------------------------------


def gen_detail_task(n, num_classes, rng, image_size=64):
    """Large common shape; the label is the 3x3 glyph stamped inside it."""
    if num_classes > 16:
        raise InputError("detail task supports at most 16 classes")
    S = image_size

    def render(r):
        label = int(r.integers(0, num_classes))
        img = _speckle(r, S, _MUTED[r.integers(0, 4)] * 0.55, amp=0.05)
        _clutter(img, r, _MUTED, count=7, size=S)
        cy = S / 2 + r.uniform(-0.09, 0.09) * S
        cx = S / 2 + r.uniform(-0.09, 0.09) * S
        ry = r.uniform(0.22, 0.3) * S
        rx = r.uniform(0.22, 0.3) * S
        shape = _ellipse(S, cy, cx, ry, rx)
        shade = r.uniform(0.55, 0.75)
        img[shape] = np.clip([shade, shade * r.uniform(0.9, 1.1), shade * 0.9]
                             + r.uniform(-0.03, 0.03, 3), 0, 1)
        # stamp the glyph fully inside the shape, near its center
        while True:
            gy = int(cy + r.uniform(-0.4, 0.4) * ry)
            gx = int(cx + r.uniform(-0.4, 0.4) * rx)
            if shape[gy - 1:gy + 2, gx - 1:gx + 2].all():
                break
        patch = GLYPHS[label][:, :, None]
        img[gy - 1:gy + 2, gx - 1:gx + 2, :] = patch
        cue = {"glyph": label, "gy": gy, "gx": gx}
        return _quantize(img), label, shape.astype(np.uint8), cue

    rows = _render_all(render, _spawn_rngs(rng, n))
    images, labels, masks, cues = zip(*rows)
    masks = np.stack(masks)
    return Dataset(name="detail", images=np.stack(images),
                   labels=np.array(labels, dtype=np.int64),
                   boxes=np.stack([_bbox_of(m) for m in masks]),
                   masks=masks, cues=list(cues), num_classes=num_classes)


def detail_label_rule(cue):
    return cue["glyph"]


# ---------------------------------------------------------------------------
# structure task
# ---------------------------------------------------------------------------

VERTICAL_RATIO_THRESHOLD = 0.6


def gen_structure_task(n, num_classes, rng, image_size=64):
    """Concentric ellipses; label 1 iff vertical radius ratio > 0.6."""
    if num_classes != 2:
        raise InputError("structure task is binary (num_classes must be 2)")
    S = image_size

    def render(r):
        # quantize the ratio so the stored cue reproduces the label exactly
        ratio = round(r.uniform(0.35, 0.85), 3)
        label = int(ratio > VERTICAL_RATIO_THRESHOLD)
        img = _speckle(r, S, np.array([0.16, 0.14, 0.15]) * r.uniform(0.8, 1.3), amp=0.05)
        _clutter(img, r, [np.array([0.25, 0.22, 0.24])], count=5, size=S, r_hi=5)
        cy = S / 2 + r.uniform(-0.04, 0.04) * S
        cx = S / 2 + r.uniform(-0.04, 0.04) * S
        ry_d = r.uniform(0.30, 0.42) * S
        rx_d = r.uniform(0.28, 0.40) * S
        ry_c = ratio * ry_d
        rx_c = r.uniform(0.40, 0.80) * rx_d  # horizontal ratio independent of label
        disc = _ellipse(S, cy, cx, ry_d, rx_d)
        cup = _ellipse(S, cy, cx, ry_c, rx_c)
        disc_color = np.array([0.78, 0.55, 0.32]) + r.uniform(-0.08, 0.08, 3)
        cup_color = np.array([0.95, 0.82, 0.55]) + r.uniform(-0.06, 0.06, 3)
        img[disc] = np.clip(disc_color + r.uniform(-0.03, 0.03, (int(disc.sum()), 3)), 0, 1)
        img[cup] = np.clip(cup_color + r.uniform(-0.03, 0.03, (int(cup.sum()), 3)), 0, 1)
        cue = {"ratio_milli": int(round(ratio * 1000))}
        return _quantize(img), label, disc.astype(np.uint8), cup.astype(np.uint8), cue

    rows = _render_all(render, _spawn_rngs(rng, n))
    images, labels, discs, cups, cues = zip(*rows)
    discs = np.stack(discs)
    return Dataset(name="structure", images=np.stack(images),
                   labels=np.array(labels, dtype=np.int64),
                   boxes=np.stack([_bbox_of(m) for m in discs]),
                   masks=discs, masks2=np.stack(cups), cues=list(cues), num_classes=2)


def structure_label_rule(cue):
    return int(cue["ratio_milli"] / 1000.0 > VERTICAL_RATIO_THRESHOLD)


# ---------------------------------------------------------------------------
# interaction task
# ---------------------------------------------------------------------------


def _stripe_field(r, S, orient, pitch, hi, lo):
    yy, xx = np.mgrid[0:S, 0:S]
    phase = int(r.integers(0, pitch))
    bands = ((yy if orient == 0 else xx) + phase) // pitch % 2
    return np.repeat(np.where(bands[:, :, None] == 0, hi, lo), 3, axis=2)


def gen_interaction_task(n, num_classes, rng, image_size=64):
    """Object stripe orientation x background palette; label = 2*tex + pal.

    Object size and position vary widely (an input-independent mask cannot
    track them) and the clutter includes small randomly-oriented striped
    decoys, so clean focal/context separation actually matters.
    """
    if num_classes != 4:
        raise InputError("interaction task needs exactly 4 classes")
    S = image_size
    pitch = max(2, S // 16)

    def render(r):
        tex = int(r.integers(0, 2))       # 0 horizontal stripes, 1 vertical
        pal = int(r.integers(0, 2))       # 0 warm, 1 cool
        label = 2 * tex + pal
        colors = _WARM if pal == 0 else _COOL
        base = colors[r.integers(0, len(colors))] * r.uniform(0.5, 0.7)
        img = _speckle(r, S, base, amp=0.05)
        _clutter(img, r, colors, count=9, size=S)
        # small striped decoys in random orientation, label-independent
        for _ in range(2):
            dy, dx = r.integers(0, S, 2)
            blob = _ellipse(S, dy, dx, r.integers(2, 5), r.integers(2, 5))
            decoy = _stripe_field(r, S, int(r.integers(0, 2)), pitch,
                                  r.uniform(0.55, 0.7), r.uniform(0.3, 0.45))
            img[blob] = decoy[blob]
        cy = S / 2 + r.uniform(-0.10, 0.10) * S
        cx = S / 2 + r.uniform(-0.10, 0.10) * S
        ry = r.uniform(0.14, 0.34) * S
        rx = r.uniform(0.14, 0.34) * S
        obj = _ellipse(S, cy, cx, ry, rx)
        stripes = _stripe_field(r, S, tex, pitch,
                                r.uniform(0.62, 0.68), r.uniform(0.38, 0.44))
        img[obj] = stripes[obj]
        img[obj] = np.clip(img[obj] + r.uniform(-0.06, 0.06, (int(obj.sum()), 3)), 0, 1)
        cue = {"texture": tex, "palette": pal}
        return _quantize(img), label, obj.astype(np.uint8), cue

    rows = _render_all(render, _spawn_rngs(rng, n))
    images, labels, masks, cues = zip(*rows)
    masks = np.stack(masks)
    return Dataset(name="interaction", images=np.stack(images),
                   labels=np.array(labels, dtype=np.int64),
                   boxes=np.stack([_bbox_of(m) for m in masks]),
                   masks=masks, cues=list(cues), num_classes=4)


def interaction_label_rule(cue):
    return 2 * cue["texture"] + cue["palette"]


LABEL_RULES = {"detail": detail_label_rule, "structure": structure_label_rule,
               "interaction": interaction_label_rule}


def generate(task, n, rng, image_size=64, num_classes=None):
    if task == "detail":
        return gen_detail_task(n, num_classes or 8, rng, image_size)
    if task == "structure":
        return gen_structure_task(n, 2, rng, image_size)
    if task == "interaction":
        return gen_interaction_task(n, 4, rng, image_size)
    raise ConfigError(f"unknown task '{task}'; choose from {TASKS}")


# ---------------------------------------------------------------------------
# negative controls
# ---------------------------------------------------------------------------


def channel_mean_classifier(train_ds, test_ds):
    """Nearest-centroid on per-image channel means: no spatial detail at all."""
    feats = train_ds.images.mean(axis=(1, 2))
    centroids = np.stack([feats[train_ds.labels == c].mean(axis=0)
                          for c in range(train_ds.num_classes)])
    test_feats = test_ds.images.mean(axis=(1, 2))
    d = ((test_feats[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == test_ds.labels))


def factor_ceiling(ds, factor_key):
    """Best possible accuracy for a classifier that observes one generative
    factor perfectly and nothing else (computed from the joint cue table)."""
    values = sorted({cue[factor_key] for cue in ds.cues})
    total = 0
    for v in values:
        idx = [i for i, cue in enumerate(ds.cues) if cue[factor_key] == v]
        counts = np.bincount(ds.labels[idx], minlength=ds.num_classes)
        total += counts.max()
    return total / len(ds)


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------


def write_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    cue_lines = []
    for i in range(len(ds)):
        stem = f"img_{i:05d}"
        write_ppm_p6(os.path.join(out_dir, stem + ".ppm"),
                     np.round(ds.images[i] * 255.0).astype(np.uint8))
        write_pgm_p5(os.path.join(out_dir, stem + "_mask.pgm"), ds.masks[i] * 255)
        if ds.masks2 is not None:
            write_pgm_p5(os.path.join(out_dir, stem + "_mask2.pgm"), ds.masks2[i] * 255)
        x0, y0, x1, y1 = ds.boxes[i]
        lines.append(f"{stem}.ppm,{ds.labels[i]},{x0},{y0},{x1},{y1}")
        if ds.cues:
            packed = ";".join(f"{k}={v}" for k, v in sorted(ds.cues[i].items()))
            cue_lines.append(f"{stem}.ppm,{packed}")
    with open(os.path.join(out_dir, "index.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "meta.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"name,{ds.name}\nnum_classes,{ds.num_classes}\n")
    if cue_lines:
        with open(os.path.join(out_dir, "cues.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(cue_lines) + "\n")


def load_dataset(data_dir):
    index_path = os.path.join(data_dir, "index.csv")
    if not os.path.exists(index_path):
        raise DataError(f"{data_dir}: no index.csv")
    images, labels, boxes, masks, masks2 = [], [], [], [], []
    with open(index_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ParseError(f"expected 6 fields, got {len(parts)}", line=lineno)
            fname = parts[0]
            try:
                label, x0, y0, x1, y1 = (int(p) for p in parts[1:])
            except ValueError:
                raise ParseError(f"non-integer field in '{line}'", line=lineno) from None
            img_path = os.path.join(data_dir, fname)
            if not os.path.exists(img_path):
                raise DataError(f"index references missing file '{fname}' (line {lineno})")
            images.append(read_ppm_p6(img_path).astype(np.float32) / 255.0)
            labels.append(label)
            boxes.append((x0, y0, x1, y1))
            stem = fname.rsplit(".", 1)[0]
            mask_path = os.path.join(data_dir, stem + "_mask.pgm")
            if not os.path.exists(mask_path):
                raise DataError(f"missing mask file for '{fname}'")
            masks.append((read_pgm_p5(mask_path) > 127).astype(np.uint8))
            mask2_path = os.path.join(data_dir, stem + "_mask2.pgm")
            if os.path.exists(mask2_path):
                masks2.append((read_pgm_p5(mask2_path) > 127).astype(np.uint8))

    name, num_classes = os.path.basename(os.path.normpath(data_dir)), 0
    meta_path = os.path.join(data_dir, "meta.csv")
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            for line in fh:
                key, _, val = line.strip().partition(",")
                if key == "name":
                    name = val
                elif key == "num_classes":
                    num_classes = int(val)
    if not num_classes:
        num_classes = int(max(labels)) + 1

    cues = []
    cues_path = os.path.join(data_dir, "cues.csv")
    if os.path.exists(cues_path):
        with open(cues_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                _, _, packed = line.partition(",")
                try:
                    cues.append({k: int(v) for k, v in
                                 (item.split("=", 1) for item in packed.split(";"))})
                except ValueError:
                    raise ParseError("malformed cue record", line=lineno) from None

    if masks2 and len(masks2) != len(images):
        raise DataError(f"{data_dir}: inner masks present for only some images")
    return Dataset(name=name, images=np.stack(images),
                   labels=np.array(labels, dtype=np.int64),
                   boxes=np.array(boxes, dtype=np.int64), masks=np.stack(masks),
                   masks2=np.stack(masks2) if masks2 else None,
                   cues=cues, num_classes=num_classes)


def split_dataset(ds, n_train):
    """Deterministic head/tail split (generation order is already random)."""
    def take(sl):
        return Dataset(name=ds.name, images=ds.images[sl], labels=ds.labels[sl],
                       boxes=ds.boxes[sl], masks=ds.masks[sl],
                       masks2=None if ds.masks2 is None else ds.masks2[sl],
                       cues=ds.cues[sl] if ds.cues else [],
                       num_classes=ds.num_classes)
    return take(slice(0, n_train)), take(slice(n_train, len(ds)))
