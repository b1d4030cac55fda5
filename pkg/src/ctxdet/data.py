"""Synthetic rectangle scenes, P6 pixmap I/O and COCO-subset annotations.

Images are uint8 [3,H,W]; boxes are float64 pixel xyxy. On disk a dataset
is a directory of binary pixmaps plus an annotations document (images,
annotations, categories arrays with xywh boxes and 1-based category ids)
and a canonical-JSON manifest.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError
from .geometry import iou
from .ioutil import canonical_json, dump_json, ensure_dir, load_json

CATEGORY_NAMES = ("solid", "striped", "gradient")
CLASS_COLORS = ((200, 50, 50), (50, 200, 50), (60, 60, 210))


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    num_classes: int = 3
    min_instances: int = 1
    max_instances: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.size <= 0 or self.size % 32:
            raise ConfigError(
                f"image size must be a positive multiple of 32, "
                f"got {self.size}")
        if not 1 <= self.num_classes <= len(CATEGORY_NAMES):
            raise ConfigError(
                f"num_classes must be in [1,{len(CATEGORY_NAMES)}], "
                f"got {self.num_classes}")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 0 <= min_instances <= max_instances")

    def to_dict(self) -> dict:
        return {"size": self.size, "num_classes": self.num_classes,
                "min_instances": self.min_instances,
                "max_instances": self.max_instances, "seed": self.seed}


@dataclass
class Dataset:
    images: list
    boxes: list
    classes: list
    image_ids: list
    categories: list  # (external id, name) pairs, id-ascending

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.boxes) == len(self.classes)
                == len(self.image_ids) == n):
            raise ParseError("dataset arrays must have equal length")

    def __len__(self):
        return len(self.images)


def _draw_instance(img: np.ndarray, x: int, y: int, w: int, h: int,
                   cls: int) -> None:
    color = np.array(CLASS_COLORS[cls], dtype=np.float64)
    patch = np.empty((3, h, w), dtype=np.float64)
    if cls == 0:
        patch[:] = color[:, None, None]
    elif cls == 1:
        cols = (np.arange(w) // 2) % 2 == 0
        patch[:] = 30.0
        patch[:, :, cols] = color[:, None, None]
    else:
        ramp = np.linspace(0.2, 1.0, w)
        patch[:] = color[:, None, None] * ramp[None, None, :]
    img[:, y:y + h, x:x + w] = np.clip(patch, 0, 255).astype(np.uint8)


def generate_synthetic(cfg: SynthConfig, n_images: int,
                       start_id: int = 0) -> Dataset:
    """Render scenes of class-coded rectangles with exact box labels.

    Fill tells the classes apart: solid, striped or gradient, each with its
    own hue. Placement rejects heavy overlap so no object is buried. The
    whole dataset is a pure function of the config seed.
    """
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    rng = np.random.default_rng(cfg.seed)
    s = cfg.size
    images, boxes, classes, ids = [], [], [], []
    for i in range(n_images):
        img = rng.integers(25, 70, size=(3, s, s)).astype(np.uint8)
        want = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        img_boxes, img_classes = [], []
        for _ in range(want):
            for _attempt in range(20):
                w = int(rng.integers(10, s // 2 + 1))
                h = int(rng.integers(10, s // 2 + 1))
                x = int(rng.integers(0, s - w + 1))
                y = int(rng.integers(0, s - h + 1))
                cand = np.array([x, y, x + w, y + h], dtype=np.float64)
                if all(iou(cand, b) <= 0.1 for b in img_boxes):
                    cls = int(rng.integers(0, cfg.num_classes))
                    _draw_instance(img, x, y, w, h, cls)
                    img_boxes.append(cand)
                    img_classes.append(cls)
                    break
        images.append(img)
        boxes.append(np.array(img_boxes, dtype=np.float64).reshape(-1, 4))
        classes.append(np.array(img_classes, dtype=np.int64))
        ids.append(start_id + i)
    cats = [(c + 1, CATEGORY_NAMES[c]) for c in range(cfg.num_classes)]
    return Dataset(images, boxes, classes, ids, cats)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise ConfigError(f"pixmap wants uint8 [3,H,W], got "
                          f"{img.dtype} {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.transpose(img, (1, 2, 0)).tobytes())


def _ppm_tokens(raw: bytes, count: int, path):
    """First `count` whitespace-separated header tokens, '#' comments
    skipped; returns (tokens, offset just past the single whitespace byte
    that terminates the last token)."""
    tokens, i, tok = [], 0, b""
    while i < len(raw) and len(tokens) < count:
        ch = raw[i:i + 1]
        if ch == b"#" and not tok:
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif ch in b" \t\r\n":
            if tok:
                tokens.append(tok)
                tok = b""
            if len(tokens) == count:
                return tokens, i + 1
        else:
            tok += ch
        i += 1
    raise ParseError(f"{path}: truncated pixmap header")


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, offset = _ppm_tokens(raw, 4, path)
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: not a binary pixmap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: non-numeric pixmap header")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise ParseError(f"{path}: bad dimensions {w}x{h}")
    body = raw[offset:offset + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ParseError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(np.transpose(pixels, (2, 0, 1)))


def image_to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def _image_file_name(image_id: int) -> str:
    return f"images/img_{image_id:06d}.ppm"


def save_dataset(dataset: Dataset, out_dir, extra_manifest=None) -> str:
    """Write pixmaps + annotations.json + manifest.json; returns the
    annotations path."""
    ensure_dir(out_dir)
    ensure_dir(os.path.join(out_dir, "images"))
    images_json, annotations_json = [], []
    ann_id = 1
    for img, bxs, cls, img_id in zip(dataset.images, dataset.boxes,
                                     dataset.classes, dataset.image_ids):
        name = _image_file_name(img_id)
        write_ppm(os.path.join(out_dir, name), img)
        _, h, w = img.shape
        images_json.append({"id": int(img_id), "file_name": name,
                            "width": int(w), "height": int(h)})
        for b, c in zip(bxs, cls):
            annotations_json.append({
                "id": ann_id, "image_id": int(img_id),
                "bbox": [float(b[0]), float(b[1]),
                         float(b[2] - b[0]), float(b[3] - b[1])],
                "category_id": int(c) + 1,
            })
            ann_id += 1
    doc = {
        "images": images_json,
        "annotations": annotations_json,
        "categories": [{"id": int(i), "name": n}
                       for i, n in dataset.categories],
    }
    ann_path = os.path.join(out_dir, "annotations.json")
    dump_json(ann_path, doc)
    manifest = {"kind": "dataset", "n_images": len(dataset),
                "annotations": "annotations.json",
                "categories": [n for _, n in dataset.categories]}
    if extra_manifest:
        manifest.update(extra_manifest)
    dump_json(os.path.join(out_dir, "manifest.json"), manifest)
    return ann_path


def load_coco_subset(path) -> Dataset:
    """Read an annotations document (or its directory) back into memory.

    Boxes convert xywh -> xyxy and are clamped to the image; a box that
    dies under clamping is an error naming the annotation. Unknown fields
    ride along unread.
    """
    if os.path.isdir(path):
        path = os.path.join(path, "annotations.json")
    root = os.path.dirname(os.path.abspath(path))
    try:
        doc = load_json(path)
    except ValueError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}")
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise ParseError(f"{path}: missing '{key}' array")

    categories = []
    for cat in doc["categories"]:
        if "id" not in cat or "name" not in cat:
            raise ParseError(f"{path}: category {cat!r} needs id and name")
        categories.append((int(cat["id"]), str(cat["name"])))
    categories.sort()
    cat_to_class = {cid: k for k, (cid, _) in enumerate(categories)}

    records = {}
    for im in sorted(doc["images"], key=lambda r: r.get("id", -1)):
        for key in ("id", "file_name", "width", "height"):
            if key not in im:
                raise ParseError(f"{path}: image record {im!r} "
                                 f"missing '{key}'")
        img = read_ppm(os.path.join(root, im["file_name"]))
        if img.shape[1:] != (im["height"], im["width"]):
            raise ParseError(
                f"{path}: image {im['id']} is {img.shape[2]}x{img.shape[1]} "
                f"but declared {im['width']}x{im['height']}")
        records[int(im["id"])] = (img, [], [])

    for ann in doc["annotations"]:
        aid = ann.get("id", "?")
        img_id = ann.get("image_id")
        if img_id not in records:
            raise ParseError(f"{path}: annotation {aid} references unknown "
                             f"image {img_id}")
        bbox = ann.get("bbox")
        if (not isinstance(bbox, list) or len(bbox) != 4
                or not all(isinstance(v, (int, float)) for v in bbox)):
            raise ParseError(f"{path}: annotation {aid} has malformed "
                             f"bbox {bbox!r}")
        cat = ann.get("category_id")
        if cat not in cat_to_class:
            raise ParseError(f"{path}: annotation {aid} has unknown "
                             f"category {cat!r}")
        img, bxs, cls = records[img_id]
        _, h, w = img.shape
        x, y, bw, bh = (float(v) for v in bbox)
        x1, y1 = max(0.0, x), max(0.0, y)
        x2, y2 = min(float(w), x + bw), min(float(h), y + bh)
        if not (x2 > x1 and y2 > y1):
            raise ParseError(f"{path}: annotation {aid} bbox {bbox} is "
                             f"empty after clamping to {w}x{h}")
        bxs.append([x1, y1, x2, y2])
        cls.append(cat_to_class[cat])

    ids = sorted(records)
    return Dataset(
        images=[records[i][0] for i in ids],
        boxes=[np.array(records[i][1], dtype=np.float64).reshape(-1, 4)
               for i in ids],
        classes=[np.array(records[i][2], dtype=np.int64) for i in ids],
        image_ids=ids,
        categories=categories,
    )


def dataset_to_eval_gts(dataset: Dataset) -> list:
    """Flatten to the ground-truth dicts the metrics code consumes."""
    out = []
    for img_id, bxs, cls in zip(dataset.image_ids, dataset.boxes,
                                dataset.classes):
        for b, c in zip(bxs, cls):
            ext = dataset.categories[int(c)][0]
            out.append({"image_id": int(img_id), "category_id": int(ext),
                        "bbox": [float(v) for v in b]})
    return out


def augment(image: np.ndarray, boxes: np.ndarray, classes: np.ndarray, rng,
            hflip_p: float = 0.5, scale_jitter: float = 0.125):
    """Horizontal flip plus scale jitter about the image center.

    The canvas size never changes; zoom-out leaves black borders, zoom-in
    crops. Boxes follow the same map, get clipped, and vanish below 2 px
    on a side. Draws exactly two rng samples, so callers stay in sync.
    """
    img = np.asarray(image)
    _, h, w = img.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    classes = np.asarray(classes, dtype=np.int64)

    flip = rng.uniform() < hflip_p
    factor = 1.0 + rng.uniform(-scale_jitter, scale_jitter)

    if flip:
        img = img[:, :, ::-1]
        boxes = boxes[:, [2, 1, 0, 3]]
        boxes[:, 0] = w - boxes[:, 0]
        boxes[:, 2] = w - boxes[:, 2]

    if factor != 1.0:
        ys = np.round((np.arange(h) - (h - 1) / 2.0) / factor
                      + (h - 1) / 2.0).astype(np.int64)
        xs = np.round((np.arange(w) - (w - 1) / 2.0) / factor
                      + (w - 1) / 2.0).astype(np.int64)
        valid_y = (ys >= 0) & (ys < h)
        valid_x = (xs >= 0) & (xs < w)
        out = np.zeros_like(img)
        sub = img[:, ys[valid_y][:, None], xs[valid_x][None, :]]
        out[:, np.flatnonzero(valid_y)[:, None],
            np.flatnonzero(valid_x)[None, :]] = sub
        img = out
        boxes[:, [0, 2]] = (boxes[:, [0, 2]] - w / 2.0) * factor + w / 2.0
        boxes[:, [1, 3]] = (boxes[:, [1, 3]] - h / 2.0) * factor + h / 2.0

    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= 2.0) & \
           ((boxes[:, 3] - boxes[:, 1]) >= 2.0)
    return np.ascontiguousarray(img), boxes[keep], classes[keep]


def dataset_manifest_json(dataset: Dataset, cfg: SynthConfig = None) -> str:
    doc = {"kind": "dataset", "n_images": len(dataset),
           "categories": [n for _, n in dataset.categories]}
    if cfg is not None:
        doc["config"] = cfg.to_dict()
    return canonical_json(doc)
