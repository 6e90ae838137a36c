"""Dataset manifests, CSV ingestion, raster IO, and the synthetic shapes corpus.

File formats (all line-based text unless noted):

* manifest      ``id<TAB>image<TAB>labels<TAB>proposals[<TAB>gt]`` with paths
                relative to the manifest's directory
* proposals     CSV lines ``x1,y1,x2,y2`` (floats, x2>x1, y2>y1)
* labels        one CSV line of C entries, each +1 or -1
* ground truth  CSV lines ``class,x1,y1,x2,y2`` (evaluation only; training
                never reads these files)
* images        binary PGM (P5) or PPM (P6), 8-bit

The synthetic corpus draws three shape archetypes (ring, cross, blob), each
carrying a small high-contrast class-specific part so that detectors which
latch onto discriminative parts score measurably worse on localization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box, iou

FLOAT_FMT = "{:.17g}"


@dataclass(frozen=True)
class Sample:
    image_id: str
    image_path: Path
    labels_path: Path
    proposals_path: Path
    gt_path: Path | None = None


def load_manifest(path) -> list[Sample]:
    """Parse a manifest; paths are resolved relative to the manifest file."""
    base = Path(path).parent
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (4, 5):
                raise ValueError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")
            image_id = fields[0]
            if image_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            seen.add(image_id)
            gt = base / fields[4] if len(fields) == 5 else None
            samples.append(
                Sample(image_id, base / fields[1], base / fields[2], base / fields[3], gt)
            )
    return samples


def write_manifest(path, rows: list[tuple[str, ...]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")


def load_proposals(path) -> list[Box]:
    """Parse proposal boxes; malformed or inverted lines are hard errors."""
    boxes: list[Box] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 comma-separated values")
            try:
                x1, y1, x2, y2 = (float(tok) for tok in parts)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if x2 <= x1 or y2 <= y1:
                raise ValueError(f"{path}:{lineno}: inverted or empty box")
            boxes.append(Box(x1, y1, x2, y2))
    return boxes


def save_proposals(path, boxes: list[Box]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in boxes:
            fh.write(",".join(FLOAT_FMT.format(v) for v in b.as_tuple()) + "\n")


def load_labels(path, num_classes: int) -> np.ndarray:
    """Read a +/-1 label vector of exactly `num_classes` entries."""
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().strip().split(",")
    if len(tokens) != num_classes:
        raise ValueError(f"{path}: expected {num_classes} labels, got {len(tokens)}")
    values = []
    for tok in tokens:
        tok = tok.strip()
        if tok not in ("1", "+1", "-1"):
            raise ValueError(f"{path}: label must be 1 or -1, got {tok!r}")
        values.append(int(tok))
    return np.array(values, dtype=np.float64)


def save_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(str(int(v)) for v in labels) + "\n")


def load_ground_truth(path) -> dict[int, list[Box]]:
    """Read per-class ground-truth boxes for one image."""
    gt: dict[int, list[Box]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected class,x1,y1,x2,y2")
            cls = int(parts[0])
            x1, y1, x2, y2 = (float(tok) for tok in parts[1:])
            gt.setdefault(cls, []).append(Box(x1, y1, x2, y2))
    return gt


def save_ground_truth(path, gt: list[tuple[int, Box]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cls, box in gt:
            fh.write(
                str(cls) + "," + ",".join(FLOAT_FMT.format(v) for v in box.as_tuple()) + "\n"
            )


# ---------------------------------------------------------------------------
# Raster IO and resizing
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H, W) or (1, H, W) float image in [0,1] as binary PGM."""
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise ValueError("write_pgm expects a single-channel image")
        image = image[0]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_image(path) -> np.ndarray:
    """Read a binary PGM/PPM into a (C, H, W) float64 array in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError(f"{path}: truncated raster header")
        tokens.append(data[start:i])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported raster magic {magic!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit rasters supported")
    i += 1  # single whitespace byte after header
    channels = 1 if magic == b"P5" else 3
    count = w * h * channels
    payload = data[i : i + count]
    if len(payload) != count:
        raise ValueError(f"{path}: truncated raster payload")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(1, h, w)
    return arr.reshape(h, w, 3).transpose(2, 0, 1)


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image (half-pixel sample centers)."""
    c, h, w = image.shape
    if (out_h, out_w) == (h, w):
        return image
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# Synthetic shapes corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    num_classes: int = 3
    train_images: int = 200
    test_images: int = 100
    objects_min: int = 1
    objects_max: int = 2
    with_parts: bool = True
    noise: float = 0.05
    proposals_per_gt: int = 8
    random_proposals: int = 8
    grid_sizes: tuple[int, ...] = (26, 48, 88)
    seed: int = 7

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.num_classes > 3:
            raise ValueError("the shapes corpus supports 1 to 3 classes")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError("bad objects_min/objects_max")


def _draw_shape(canvas: np.ndarray, cls: int, cy: float, cx: float, side: float,
                with_part: bool) -> None:
    h, w = canvas.shape
    yy, xx = np.ogrid[:h, :w]
    half = side / 2.0
    body = 0.42
    if cls == 0:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        thick = max(3.0, 0.18 * side)
        mask = (d2 <= half**2) & (d2 >= (half - thick) ** 2)
    elif cls == 1:  # cross of two bars
        t = max(4.0, 0.2 * side)
        vbar = (np.abs(xx - cx) <= t / 2) & (np.abs(yy - cy) <= half)
        hbar = (np.abs(yy - cy) <= t / 2) & (np.abs(xx - cx) <= half)
        mask = vbar | hbar
    else:  # filled blob
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = d2 <= half**2
    canvas[mask] = body

    if not with_part:
        return
    # High-contrast class-specific part: small enough that a part-tight box
    # has IoU well below 0.5 with the object, textured enough to dominate the
    # class evidence.
    p = max(10.0, 0.28 * side)
    if cls == 0:  # checkered patch on the top rim
        pcy, pcx = cy - half + p / 2, cx
        pattern = ((yy // 3 + xx // 3) % 2) * 0.85 + 0.15
    elif cls == 1:  # bright patch at the right arm end
        pcy, pcx = cy, cx + half - p / 2
        pattern = np.ones_like(canvas)
    else:  # striped patch at the center
        pcy, pcx = cy, cx
        pattern = (xx % 6 < 3) * 0.85 + 0.15
    pmask = (np.abs(yy - pcy) <= p / 2) & (np.abs(xx - pcx) <= p / 2)
    canvas[pmask] = np.broadcast_to(pattern, canvas.shape)[pmask]


def _jittered_gt_proposals(
    rng: np.random.Generator, gt: Box, count: int
) -> list[Box]:
    side_w, side_h = gt.width, gt.height
    cx, cy = gt.center
    boxes = []
    # First jitter stays within a pixel per edge, guaranteeing IoU > 0.5;
    # the rest range from part-sized crops up to loose supersets.
    d = rng.uniform(-1.0, 1.0, size=4)
    boxes.append(Box(gt.x1 + d[0], gt.y1 + d[1], gt.x2 + d[2], gt.y2 + d[3]))
    for _ in range(count - 1):
        fw = rng.uniform(0.4, 1.35)
        fh = rng.uniform(0.4, 1.35)
        dx = rng.uniform(-0.2, 0.2) * side_w
        dy = rng.uniform(-0.2, 0.2) * side_h
        w2, h2 = side_w * fw / 2, side_h * fh / 2
        boxes.append(Box(cx + dx - w2, cy + dy - h2, cx + dx + w2, cy + dy + h2))
    return boxes


def _grid_proposals(size: int, image_size: int) -> list[Box]:
    if size >= image_size:
        return []
    if size * 3 <= image_size:
        npos = 4
    elif size * 3 <= 2 * image_size:
        npos = 3
    else:
        npos = 2
    coords = np.rint(np.linspace(0, image_size - size, npos))
    return [
        Box(float(x), float(y), float(x + size), float(y + size))
        for y in coords
        for x in coords
    ]


def _random_proposals(
    rng: np.random.Generator, count: int, image_size: int
) -> list[Box]:
    boxes = []
    for _ in range(count):
        cx = rng.uniform(14, image_size - 14)
        cy = rng.uniform(14, image_size - 14)
        w = rng.uniform(24, 100)
        h = rng.uniform(24, 100)
        x1, x2 = max(0.0, cx - w / 2), min(float(image_size), cx + w / 2)
        y1, y2 = max(0.0, cy - h / 2), min(float(image_size), cy + h / 2)
        if x2 - x1 > 21 and y2 - y1 > 21:
            boxes.append(Box(x1, y1, x2, y2))
    return boxes


def _generate_one(
    rng: np.random.Generator, cfg: SynthConfig
) -> tuple[np.ndarray, list[tuple[int, Box]], list[Box], np.ndarray]:
    size = cfg.image_size
    canvas = np.full((size, size), 0.12)
    n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    gt: list[tuple[int, Box]] = []
    for _ in range(n_objects):
        cls = int(rng.integers(cfg.num_classes))
        for _ in range(50):
            side = rng.uniform(0.34 * size, 0.58 * size)
            half = side / 2
            cy = rng.uniform(half + 2, size - half - 2)
            cx = rng.uniform(half + 2, size - half - 2)
            box = Box(cx - half, cy - half, cx + half, cy + half)
            if all(iou(box, b) < 0.1 for _, b in gt):
                _draw_shape(canvas, cls, cy, cx, side, cfg.with_parts)
                gt.append((cls, box))
                break

    noise = rng.normal(0.0, cfg.noise, size=(size, size))
    image = np.clip(canvas + noise, 0.0, 1.0)[None]

    proposals: list[Box] = []
    for _, box in gt:
        proposals.extend(_jittered_gt_proposals(rng, box, cfg.proposals_per_gt))
    proposals.extend(_random_proposals(rng, cfg.random_proposals, size))
    for gsize in cfg.grid_sizes:
        proposals.extend(_grid_proposals(gsize, size))

    labels = np.full(cfg.num_classes, -1.0)
    for cls, _ in gt:
        labels[cls] = 1.0
    return image, gt, proposals, labels


def synth_generate(cfg: SynthConfig, out_dir) -> tuple[Path, Path]:
    """Materialize a deterministic corpus; returns (train, test) manifest paths.

    Every positive image is checked to contain at least one proposal with
    IoU > 0.5 against each of its ground-truth boxes.
    """
    out = Path(out_dir)
    for sub in ("images", "labels", "proposals", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    manifests = {}
    for split, count in (("train", cfg.train_images), ("test", cfg.test_images)):
        rows = []
        for i in range(count):
            image_id = f"{split}_{i:05d}"
            image, gt, proposals, labels = _generate_one(rng, cfg)
            for _, gt_box in gt:
                if not any(iou(p, gt_box) > 0.5 for p in proposals):
                    raise AssertionError(f"{image_id}: no proposal covers a ground-truth box")
            write_pgm(out / "images" / f"{image_id}.pgm", image)
            save_labels(out / "labels" / f"{image_id}.csv", labels)
            save_proposals(out / "proposals" / f"{image_id}.csv", proposals)
            save_ground_truth(out / "gt" / f"{image_id}.csv", gt)
            rows.append(
                (
                    image_id,
                    f"images/{image_id}.pgm",
                    f"labels/{image_id}.csv",
                    f"proposals/{image_id}.csv",
                    f"gt/{image_id}.csv",
                )
            )
        manifest_path = out / f"{split}.tsv"
        write_manifest(manifest_path, rows)
        manifests[split] = manifest_path
    return manifests["train"], manifests["test"]
