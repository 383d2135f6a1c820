"""Deterministic synthetic image/caption/box data.

Scenes hold 1-3 non-overlapping axis-aligned shapes (square, bar, circle) in
distinct saturated colors on black. Rendering uses integer arithmetic only,
so a shape's bounding box and its patch overlap are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

SPECIALS = ("[CLS]", "[SEP]", "[MASK]", "[PAD]")
TEMPLATE_WORDS = ("this", "is", "a", "left", "right", "of", "above", "below")
COLORS: dict[str, tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "white": (255, 255, 255),
}
KINDS = ("square", "bar", "circle")
CLASS_TEMPLATE = "this is a {}"


class Vocab:
    """Fixed word list; special tokens occupy the first ids."""

    def __init__(self, words=None):
        words = list(words) if words is not None else [*SPECIALS, *TEMPLATE_WORDS, *COLORS, *KINDS]
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary entries")
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def cls_id(self) -> int:
        return self.ids["[CLS]"]

    @property
    def sep_id(self) -> int:
        return self.ids["[SEP]"]

    @property
    def mask_id(self) -> int:
        return self.ids["[MASK]"]

    @property
    def pad_id(self) -> int:
        return self.ids["[PAD]"]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.ids[s] for s in SPECIALS)

    def encode(self, text: str) -> list[int]:
        out = []
        for word in text.split():
            if word not in self.ids:
                raise DataError(f"word {word!r} is not in the vocabulary")
            out.append(self.ids[word])
        return out

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids)


VOCAB = Vocab()


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    x: int
    y: int
    w: int
    h: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    @property
    def label(self) -> str:
        return f"{self.color} {self.kind}"


@dataclass(eq=False)
class SynthSample:
    image: np.ndarray  # uint8 [H, W, 3]
    caption: list[int]
    box: tuple[int, int, int, int] | None = None
    label: str = ""
    seed: int = 0

    @property
    def pixels(self) -> np.ndarray:
        """Image as float64 in [0, 1]."""
        return self.image.astype(np.float64) / 255.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, SynthSample):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and list(self.caption) == list(other.caption)
            and self.box == other.box
            and self.label == other.label
        )


def shape_mask(shape: Shape, image_size: int) -> np.ndarray:
    """Boolean pixel mask of one shape, integer arithmetic only."""
    rows = np.arange(image_size)[:, None]
    cols = np.arange(image_size)[None, :]
    inside = (cols >= shape.x) & (cols < shape.x + shape.w) & (rows >= shape.y) & (rows < shape.y + shape.h)
    if shape.kind == "circle":
        diameter = shape.w
        dx = 2 * cols + 1 - 2 * shape.x - diameter
        dy = 2 * rows + 1 - 2 * shape.y - diameter
        inside &= dx * dx + dy * dy <= diameter * diameter
    return inside


def _sizes(rng: np.random.Generator, kind: str, image_size: int) -> tuple[int, int]:
    lo = max(5, image_size // 6)
    hi = max(lo + 1, image_size // 3 + 1)
    a = int(rng.integers(lo, hi + 1))
    if kind == "bar":
        b = max(3, a // 2)
        return (a, b) if rng.integers(2) else (b, a)
    return a, a


def render_scene(seed: int, image_size: int) -> list[Shape]:
    """Place 1-3 shapes with distinct colors and a one-pixel gap between boxes."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 4))
    colors = [list(COLORS)[i] for i in rng.permutation(len(COLORS))[:count]]
    shapes: list[Shape] = []
    for color in colors:
        kind = KINDS[int(rng.integers(len(KINDS)))]
        for _ in range(50):
            w, h = _sizes(rng, kind, image_size)
            x = int(rng.integers(0, image_size - w + 1))
            y = int(rng.integers(0, image_size - h + 1))
            clear = all(
                x + w + 1 <= s.x or s.x + s.w + 1 <= x or y + h + 1 <= s.y or s.y + s.h + 1 <= y for s in shapes
            )
            if clear:
                shapes.append(Shape(kind, color, x, y, w, h))
                break
    return shapes


def rasterize(shapes: list[Shape], image_size: int) -> np.ndarray:
    image = np.zeros((image_size, image_size, 3), dtype=np.uint8)
    for s in shapes:
        image[shape_mask(s, image_size)] = COLORS[s.color]
    return image


def _relation(target: Shape, other: Shape) -> str:
    dx = (2 * target.x + target.w) - (2 * other.x + other.w)
    dy = (2 * target.y + target.h) - (2 * other.y + other.h)
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


def describe(shapes: list[Shape], rng: np.random.Generator) -> tuple[str, Shape]:
    target = shapes[int(rng.integers(len(shapes)))]
    text = f"a {target.color} {target.kind}"
    others = [s for s in shapes if s is not target]
    if others and rng.integers(2):
        other = others[int(rng.integers(len(others)))]
        text += f" {_relation(target, other)} a {other.color} {other.kind}"
    return text, target


def class_label_to_text(label: str, vocab: Vocab = VOCAB) -> list[int]:
    """Token ids of the filled template ``this is a <label>``."""
    if not label or not label.strip():
        raise DataError("empty class label")
    return vocab.encode(CLASS_TEMPLATE.format(label.strip()))


def generate(seed: int, kind: str = "paired", image_size: int = 32, vocab: Vocab = VOCAB) -> SynthSample:
    if kind not in ("paired", "region"):
        raise ValueError(f"kind must be 'paired' or 'region', got {kind!r}")
    shapes = render_scene(seed, image_size)
    image = rasterize(shapes, image_size)
    rng = np.random.default_rng([seed, 1])
    text, target = describe(shapes, rng)
    if kind == "paired":
        return SynthSample(image, vocab.encode(text), seed=seed)
    return SynthSample(image, class_label_to_text(target.label, vocab), box=target.box, label=target.label, seed=seed)


# ------------------------------------------------------------------- shard I/O

MAGIC = b"BUSD"
VERSION = 1


def encode_shard(samples) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(samples))
    for s in samples:
        h, w = s.image.shape[:2]
        out += struct.pack("<QHH", s.seed, h, w)
        out += np.ascontiguousarray(s.image, dtype=np.uint8).tobytes()
        out += struct.pack(f"<H{len(s.caption)}H", len(s.caption), *s.caption)
        box = s.box or (0, 0, 0, 0)
        label = s.label.encode("utf-8")
        out += struct.pack("<B4HH", s.box is not None, *box, len(label))
        out += label
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated shard reading {what} at byte offset {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_shard(buf: bytes) -> list[SynthSample]:
    reader = _Reader(buf)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("bad shard magic at byte offset 0")
    version, count = reader.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported shard version {version} at byte offset 4")
    samples = []
    for _ in range(count):
        seed, h, w = reader.unpack("<QHH", "sample header")
        image = np.frombuffer(reader.take(h * w * 3, "pixels"), dtype=np.uint8).reshape(h, w, 3).copy()
        (length,) = reader.unpack("<H", "caption length")
        caption = list(reader.unpack(f"<{length}H", "caption ids"))
        has_box, x, y, bw, bh, label_len = reader.unpack("<B4HH", "box record")
        label = reader.take(label_len, "label").decode("utf-8")
        samples.append(SynthSample(image, caption, (x, y, bw, bh) if has_box else None, label, seed))
    if reader.pos != len(buf):
        raise FormatError(f"trailing bytes after last sample at byte offset {reader.pos}")
    return samples


def write_shard(path: str | Path, samples) -> Path:
    path = Path(path)
    path.write_bytes(encode_shard(list(samples)))
    return path


def read_shard(path: str | Path) -> list[SynthSample]:
    return decode_shard(Path(path).read_bytes())
