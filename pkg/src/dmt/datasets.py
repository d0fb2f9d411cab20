"""Annotated image datasets: XML ingestion, splitting and mirroring.

The XML layout follows the common detector/shape-predictor convention::

    <dataset>
      <images>
        <image file='a.png' width='160' height='160'>
          <box top='10' left='20' width='80' height='80' ignore='1'>
            <part name='00' x='31' y='44'/>
          </box>
        </image>
      </images>
    </dataset>

``width``/``height`` on ``<image>`` are optional; when absent the image
header is read (if the file exists) to validate box bounds.
"""
from __future__ import annotations

import math
import os
import warnings
import xml.etree.ElementTree as ET
from xml.parsers import expat
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationParseError, ValidationError
from .hog import to_gray

MIRROR_SUFFIX = "_mirrored"

# 0-based left/right correspondences of the 68-point face layout
_PAIRS_68 = (
    [(i, 16 - i) for i in range(8)]
    + [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]
    + [(31, 35), (32, 34)]
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    + [(60, 64), (61, 63), (65, 67)]
)


def _symmetry_68():
    table = list(range(68))
    for a, b in _PAIRS_68:
        table[a], table[b] = b, a
    return table


SYMMETRY_68 = _symmetry_68()


@dataclass
class Box:
    left: float
    top: float
    width: float
    height: float
    ignore: bool = False
    parts: dict = field(default_factory=dict)  # name -> (x, y)

    @property
    def rect(self):
        return (self.left, self.top, self.width, self.height)

    def part_names(self) -> list:
        names = list(self.parts)
        try:
            return sorted(names, key=int)
        except ValueError:
            return names

    def shape_array(self) -> np.ndarray:
        """Landmarks as an ``(L, 2)`` array in part-name order."""
        return np.array([self.parts[n] for n in self.part_names()], dtype=np.float64).reshape(-1, 2)


@dataclass
class ImageRecord:
    path: str | None
    boxes: list = field(default_factory=list)
    image: np.ndarray | None = None
    width: int | None = None
    height: int | None = None
    base_dir: Path | None = None

    @property
    def resolved_path(self) -> Path | None:
        if self.path is None:
            return None
        p = Path(self.path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    @property
    def key(self):
        # in-memory pixels are keyed by identity: synthetic corpora reuse file names
        p = self.resolved_path
        if self.image is not None or p is None:
            return ("mem", id(self.image if self.image is not None else self))
        return str(p)

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        return load_png(self.resolved_path)

    def size(self):
        """(width, height) if known without decoding pixels, else None."""
        if self.image is not None:
            return self.image.shape[1], self.image.shape[0]
        if self.width is not None and self.height is not None:
            return self.width, self.height
        p = self.resolved_path
        if p is not None and p.exists():
            with Image.open(p) as im:
                return im.size
        return None


@dataclass
class AnnotatedDataset:
    images: list = field(default_factory=list)
    name: str = ""
    base_dir: Path | None = None

    def __len__(self):
        return len(self.images)

    def boxes(self, include_ignored=False):
        for rec in self.images:
            for b in rec.boxes:
                if include_ignored or not b.ignore:
                    yield rec, b

    def landmark_count(self):
        counts = {len(b.parts) for _, b in self.boxes(True) if b.parts}
        return counts.pop() if len(counts) == 1 else (0 if not counts else None)

    def subset(self, indices, name=None):
        return AnnotatedDataset([self.images[i] for i in indices], name or self.name, self.base_dir)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return to_gray(np.asarray(im))


def save_png(path, image):
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# ----------------------------------------------------------------------- XML


def _num(text, what, elem_line):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise AnnotationParseError(f"bad numeric {what}={text!r}", elem_line) from None
    if not math.isfinite(v):
        raise AnnotationParseError(f"non-finite {what}", elem_line)
    return v


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


_LINE = "__line__"


def _line(el):
    return int(el.get(_LINE, 0)) or None


def _parse_tree(path):
    """ElementTree parse that records each element's line under ``_LINE``."""
    builder = ET.TreeBuilder()
    parser = expat.ParserCreate()

    def start(tag, attrs):
        attrs[_LINE] = str(parser.CurrentLineNumber)
        builder.start(tag, attrs)

    parser.StartElementHandler = start
    parser.EndElementHandler = builder.end
    parser.CharacterDataHandler = builder.data
    try:
        with open(path, "rb") as fh:
            parser.ParseFile(fh)
    except expat.ExpatError as exc:
        raise AnnotationParseError(expat.errors.messages[exc.code], exc.lineno) from None
    return builder.close()


def _check_bounds(rec: ImageRecord, box: Box, line):
    if box.ignore:
        return
    if box.width <= 0 or box.height <= 0:
        raise ValidationError(f"line {line}: box in {rec.path} has non-positive size")
    size = rec.size()
    if size is None:
        return
    w, h = size
    if box.left < 0 or box.top < 0 or box.left + box.width > w or box.top + box.height > h:
        raise ValidationError(f"line {line}: box {box.rect} outside {w}x{h} image {rec.path}")


def parse_annotations(xml_path) -> AnnotatedDataset:
    xml_path = Path(xml_path)
    root = _parse_tree(xml_path)
    base = xml_path.parent
    ds = AnnotatedDataset(name="", base_dir=base)
    if root.tag != "dataset":
        raise AnnotationParseError(f"root element is <{root.tag}>, expected <dataset>", _line(root))
    for child in root:
        if child.tag == "name":
            ds.name = (child.text or "").strip()
        elif child.tag == "comment":
            continue
        elif child.tag == "images":
            for img_el in child:
                if img_el.tag != "image":
                    warnings.warn(f"line {_line(img_el)}: ignoring unknown element <{img_el.tag}>")
                    continue
                ds.images.append(_parse_image(img_el, base))
        else:
            warnings.warn(f"line {_line(child)}: ignoring unknown element <{child.tag}>")
    counts = {len(b.parts) for _, b in ds.boxes(True) if b.parts}
    if len(counts) > 1:
        raise ValidationError(f"inconsistent part counts {sorted(counts)} in {xml_path}")
    return ds


def _parse_image(el, base) -> ImageRecord:
    line = _line(el)
    file = el.get("file")
    if file is None:
        raise AnnotationParseError("<image> without file attribute", line)
    rec = ImageRecord(file, base_dir=base)
    if el.get("width") is not None:
        rec.width = int(_num(el.get("width"), "width", line))
        rec.height = int(_num(el.get("height"), "height", line))
    for box_el in el:
        if box_el.tag != "box":
            warnings.warn(f"line {_line(box_el)}: ignoring unknown element <{box_el.tag}>")
            continue
        bl = _line(box_el)
        box = Box(
            left=_num(box_el.get("left"), "left", bl),
            top=_num(box_el.get("top"), "top", bl),
            width=_num(box_el.get("width"), "width", bl),
            height=_num(box_el.get("height"), "height", bl),
            ignore=box_el.get("ignore", "0").strip() in ("1", "true", "True"),
        )
        for part in box_el:
            if part.tag == "label":
                continue
            if part.tag != "part":
                warnings.warn(f"line {_line(part)}: ignoring unknown element <{part.tag}>")
                continue
            name = part.get("name")
            if name is None:
                raise AnnotationParseError("<part> without name", _line(part))
            box.parts[name] = (_num(part.get("x"), "x", _line(part)), _num(part.get("y"), "y", _line(part)))
        _check_bounds(rec, box, bl)
        rec.boxes.append(box)
    return rec


def write_annotations(ds: AnnotatedDataset, xml_path, write_images=True):
    """Write ``ds`` as XML; in-memory images are saved as PNG next to it.

    Records without a path get ``img_<index>.png``.
    """
    xml_path = Path(xml_path)
    out_dir = xml_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    root = ET.Element("dataset")
    ET.SubElement(root, "name").text = ds.name
    images_el = ET.SubElement(root, "images")
    for i, rec in enumerate(ds.images):
        path = rec.path or f"img_{i:05d}.png"
        if rec.image is None and rec.path is not None and rec.base_dir is not None \
                and not Path(rec.path).is_absolute():
            # keep on-disk images reachable from the new XML location
            path = Path(os.path.relpath(rec.resolved_path, out_dir)).as_posix()
        attrs = {"file": path}
        size = rec.size()
        if size is not None:
            attrs["width"], attrs["height"] = str(size[0]), str(size[1])
        img_el = ET.SubElement(images_el, "image", attrs)
        if write_images and rec.image is not None:
            target = Path(path) if Path(path).is_absolute() else out_dir / path
            target.parent.mkdir(parents=True, exist_ok=True)
            save_png(target, rec.image)
        for box in rec.boxes:
            battrs = {"top": _fmt(box.top), "left": _fmt(box.left),
                      "width": _fmt(box.width), "height": _fmt(box.height)}
            if box.ignore:
                battrs["ignore"] = "1"
            box_el = ET.SubElement(img_el, "box", battrs)
            for name, (x, y) in box.parts.items():
                ET.SubElement(box_el, "part", {"name": name, "x": _fmt(x), "y": _fmt(y)})
    ET.indent(root)
    ET.ElementTree(root).write(xml_path, encoding="utf-8", xml_declaration=True)
    return xml_path


# ----------------------------------------------------------------------- transforms


def split_dataset(ds: AnnotatedDataset, n_parts: int, holdout=0, seed: int = 0):
    """Shuffle by ``seed`` and cut ``n_parts`` equal parts; leftovers form the test set.

    ``holdout`` is the minimum test-set size, as an image count or, when it
    is a float in (0, 1), a fraction of the dataset.
    """
    n = len(ds.images)
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    if isinstance(holdout, float) and 0 < holdout < 1:
        holdout = int(round(holdout * n))
    holdout = int(holdout)
    if n_parts > n - holdout:
        raise ValidationError(f"cannot cut {n_parts} parts from {n} images with holdout {holdout}")
    size = (n - holdout) // n_parts
    order = np.random.default_rng(seed).permutation(n)
    parts = [ds.subset(order[k * size:(k + 1) * size].tolist(), f"{ds.name}-P{k + 1}")
             for k in range(n_parts)]
    test = ds.subset(order[n_parts * size:].tolist(), f"{ds.name}-test")
    return parts, test


def merge_datasets(datasets, name=None) -> AnnotatedDataset:
    images = [rec for d in datasets for rec in d.images]
    base = datasets[0].base_dir if datasets else None
    return AnnotatedDataset(images, name or "+".join(d.name for d in datasets), base)


def _mirror_path(path):
    if path is None:
        return None
    p = Path(path)
    stem = p.stem
    stem = stem[: -len(MIRROR_SUFFIX)] if stem.endswith(MIRROR_SUFFIX) else stem + MIRROR_SUFFIX
    return str(p.with_name(stem + p.suffix))


def mirror(ds: AnnotatedDataset) -> AnnotatedDataset:
    """Left/right flip of every image, box and landmark.

    68-point shapes also swap left/right landmark identities; other
    landmark layouts keep their names.
    """
    name = ds.name
    if name:
        name = name[: -len(MIRROR_SUFFIX)] if name.endswith(MIRROR_SUFFIX) else name + MIRROR_SUFFIX
    out = AnnotatedDataset(name=name, base_dir=ds.base_dir)
    for rec in ds.images:
        img = rec.load_image()
        w = img.shape[1]
        boxes = []
        for b in rec.boxes:
            parts = {}
            names = b.part_names()
            if len(names) == 68:
                for i, name in enumerate(names):
                    x, y = b.parts[names[SYMMETRY_68[i]]]
                    parts[name] = (w - 1 - x, y)
            else:
                parts = {n: (w - 1 - x, y) for n, (x, y) in b.parts.items()}
            boxes.append(replace(b, left=w - b.left - b.width, parts=parts))
        out.images.append(ImageRecord(_mirror_path(rec.path), boxes, img[:, ::-1].copy(),
                                      rec.width, rec.height, rec.base_dir))
    return out
