"""PartGlyphs: a seeded procedural dataset with known part locations.

Every image shows one glyph made of ``P`` coloured parts laid out around a
pale body, over a smooth background with distractor dots. Two designated
slots carry the class (4 colours each, so 16 classes); the
other slots look the same in every image. Part centres are annotated
analytically from the glyph pose.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PreconditionError
from .transforms import RigidTransform

SHAPES = ("disc", "square", "triangle", "cross")

# saturated part colours; distractors and background stay desaturated
DEFAULT_SLOTS = (
    # (shape choices, colour choices)
    (("disc",), ((0.90, 0.10, 0.10), (0.95, 0.55, 0.05), (0.85, 0.10, 0.75), (0.45, 0.10, 0.05))),
    (("square",), ((0.10, 0.20, 0.90), (0.05, 0.75, 0.85), (0.50, 0.30, 0.95), (0.05, 0.05, 0.35))),
    (("cross",), ((0.10, 0.75, 0.15),)),
    (("triangle",), ((0.95, 0.90, 0.10),)),
)
# body-frame part centres, as fractions of the image size relative to the centre
DEFAULT_OFFSETS = ((0.0, -0.24), (-0.22, 0.04), (0.22, 0.04), (0.0, 0.26))

BODY_COLOR = (0.82, 0.80, 0.74)


@dataclass
class GlyphSpec:
    image_size: int = 64
    part_radius: float = 0.08  # fraction of image size
    slots: tuple = DEFAULT_SLOTS
    offsets: tuple = DEFAULT_OFFSETS
    max_angle: float = math.radians(30)
    max_shift: float = 0.08
    scale_range: tuple[float, float] = (0.9, 1.1)
    n_distractors: int = 8
    occlude_prob: float = 0.0

    def __post_init__(self):
        self.slots = tuple((tuple(s), tuple(tuple(c) for c in cols)) for s, cols in self.slots)
        self.offsets = tuple(tuple(float(v) for v in o) for o in self.offsets)
        self.scale_range = tuple(self.scale_range)
        if len(self.slots) != len(self.offsets):
            raise ConfigError("one offset per part slot is required")
        for shapes, _ in self.slots:
            if any(s not in SHAPES for s in shapes):
                raise ConfigError(f"unknown shape in {shapes}")
        if not 0.0 <= self.occlude_prob < 1.0:
            raise ConfigError("occlude_prob must lie in [0, 1)")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        reach = max(math.hypot(*o) for o in self.offsets) * self.scale_range[1]
        if self.part_radius <= 0 or reach + self.part_radius + self.max_shift * math.sqrt(2) >= 0.5:
            raise ConfigError("parts do not fit inside the frame at the extreme pose")

    @property
    def num_parts(self) -> int:
        return len(self.slots)

    @property
    def num_classes(self) -> int:
        return int(np.prod([len(s) * len(c) for s, c in self.slots]))

    def class_attributes(self, label: int) -> list[tuple[str, tuple[float, float, float]]]:
        """Shape and colour of every slot for class ``label`` (mixed radix over slots)."""
        if not 0 <= label < self.num_classes:
            raise PreconditionError(f"class {label} out of range")
        attrs = []
        rest = label
        for shapes, colors in reversed(self.slots):
            rest, ci = divmod(rest, len(colors))
            rest, si = divmod(rest, len(shapes))
            attrs.append((shapes[si], colors[ci]))
        return attrs[::-1]


@dataclass
class LabeledSample:
    sample_id: int
    image: np.ndarray  # 3×S×S in [0, 1], multiples of 1/255
    label: int
    keypoints: np.ndarray  # P×2 (x, y) in [0, 1]
    visible: np.ndarray = field(repr=False)  # P bool


def _shape_mask(shape: str, lx: np.ndarray, ly: np.ndarray, r: float) -> np.ndarray:
    if shape == "disc":
        return lx * lx + ly * ly <= r * r
    if shape == "square":
        return np.maximum(np.abs(lx), np.abs(ly)) <= 0.85 * r
    if shape == "cross":
        arm = r / 3
        return ((np.abs(lx) <= arm) & (np.abs(ly) <= r)) | ((np.abs(ly) <= arm) & (np.abs(lx) <= r))
    if shape == "triangle":
        # equilateral, centroid at the origin, pointing up
        rc = 1.2 * r
        inside = np.ones_like(lx, dtype=bool)
        for k in range(3):
            phi = -math.pi / 2 + k * 2 * math.pi / 3 + math.pi  # outward normal of edge opposite vertex k
            nx, ny = math.cos(phi), math.sin(phi)
            inside &= lx * nx + ly * ny <= rc / 2
        return inside
    raise ValueError(shape)


def _render(spec: GlyphSpec, label: int, pose: RigidTransform, visible: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    px, py = np.meshgrid(np.arange(s) + 0.5 - s / 2, np.arange(s) + 0.5 - s / 2)

    # smooth background: desaturated base colour plus a random linear ramp
    base = rng.uniform(0.25, 0.5) + rng.uniform(-0.05, 0.05, size=3)
    direction = rng.uniform(0, 2 * math.pi)
    ramp = (px * math.cos(direction) + py * math.sin(direction)) / s
    img = base[:, None, None] + rng.uniform(0.1, 0.25) * ramp[None]

    # distractor dots
    for _ in range(spec.n_distractors):
        cx, cy = rng.uniform(-0.45, 0.45, size=2) * s
        col = rng.uniform(0.3, 0.7) + rng.uniform(-0.08, 0.08, size=3)
        rad = rng.uniform(1.5, 2.5)
        m = (px - cx) ** 2 + (py - cy) ** 2 <= rad * rad
        img[:, m] = col[:, None]

    rot_inv = RigidTransform(-pose.angle).matrix()
    r = spec.part_radius * s * pose.scale

    # body: ellipse through the part slots
    cx, cy = pose.tx * s, pose.ty * s
    lx = (px - cx) * rot_inv[0, 0] + (py - cy) * rot_inv[0, 1]
    ly = (px - cx) * rot_inv[1, 0] + (py - cy) * rot_inv[1, 1]
    ax = 0.17 * s * pose.scale
    ay = 0.22 * s * pose.scale
    img[:, (lx / ax) ** 2 + (ly / ay) ** 2 <= 1.0] = np.array(BODY_COLOR)[:, None]

    centres = _part_centres(spec, pose)
    for p, (shape, color) in enumerate(spec.class_attributes(label)):
        if not visible[p]:
            continue
        cx, cy = centres[p]
        dx, dy = px - cx, py - cy
        lx = (dx * rot_inv[0, 0] + dy * rot_inv[0, 1]) / pose.scale
        ly = (dx * rot_inv[1, 0] + dy * rot_inv[1, 1]) / pose.scale
        m = _shape_mask(shape, lx, ly, r / pose.scale)
        img[:, m] = np.array(color)[:, None]
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


def _part_centres(spec: GlyphSpec, pose: RigidTransform) -> np.ndarray:
    """Posed part centres in pixel units relative to the image centre."""
    s = spec.image_size
    return pose.apply_points(np.array(spec.offsets) * s, s, s)


def _sample_pose(spec: GlyphSpec, rng: np.random.Generator) -> RigidTransform:
    s = spec.image_size
    margin = spec.part_radius * s * spec.scale_range[1] * 1.2
    while True:
        pose = RigidTransform(
            rng.uniform(-spec.max_angle, spec.max_angle),
            rng.uniform(-spec.max_shift, spec.max_shift),
            rng.uniform(-spec.max_shift, spec.max_shift),
            rng.uniform(*spec.scale_range),
        )
        c = _part_centres(spec, pose)
        if np.all(np.abs(c) <= s / 2 - margin):
            return pose


def make_sample(spec: GlyphSpec, seed: int, index: int, label: int) -> LabeledSample:
    rng = np.random.default_rng([seed, index])
    pose = _sample_pose(spec, rng)
    visible = rng.random(spec.num_parts) >= spec.occlude_prob
    image = _render(spec, label, pose, visible, rng)
    s = spec.image_size
    kp = (_part_centres(spec, pose) + s / 2) / s
    return LabeledSample(index, image, label, kp, visible)


def generate(seed: int, n: int, spec: GlyphSpec | None = None) -> list[LabeledSample]:
    """``n`` samples with classes balanced to within one; deterministic in ``seed``."""
    spec = spec or GlyphSpec()
    if n < 1:
        raise PreconditionError("n must be >= 1")
    c = spec.num_classes
    labels = np.random.default_rng(seed).permutation(np.arange(n) % c)
    return [make_sample(spec, seed, i, int(labels[i])) for i in range(n)]


def split(samples: list[LabeledSample], train_fraction: float, seed: int):
    """Stratified, disjoint train/test split; each class contributes ``round(n_c·f)`` to train."""
    if not 0.0 < train_fraction < 1.0:
        raise PreconditionError("train_fraction must lie in (0, 1)")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(seed)
    train_idx: set[int] = set()
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            raise PreconditionError(f"class {label} has fewer than 2 samples")
        n_train = min(max(int(round(len(idx) * train_fraction)), 1), len(idx) - 1)
        train_idx.update(rng.permutation(idx)[:n_train].tolist())
    train = [s for i, s in enumerate(samples) if i in train_idx]
    test = [s for i, s in enumerate(samples) if i not in train_idx]
    return train, test


def stack(samples: list[LabeledSample]):
    """Images ``N×3×S×S``, labels ``N``, keypoints ``N×P×2``, visibility ``N×P``."""
    return (
        np.stack([s.image for s in samples]),
        np.array([s.label for s in samples]),
        np.stack([s.keypoints for s in samples]),
        np.stack([s.visible for s in samples]),
    )


# ---------------------------------------------------------------------------
# on-disk format: images/NNNNN.ppm, annotations.csv, manifest.json


def write_ppm(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255


def spec_to_dict(spec: GlyphSpec) -> dict:
    return json.loads(json.dumps(asdict(spec)))


def spec_from_dict(d: dict) -> GlyphSpec:
    return GlyphSpec(**d)


def save_dataset(root, samples, spec: GlyphSpec, seed: int, train_ids=None, test_ids=None,
                 extra: dict | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_ppm(root / "images" / f"{s.sample_id:05d}.ppm", s.image)
    with open(root / "annotations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "class", "part_id", "x", "y", "visible"])
        for s in samples:
            for p, (x, y) in enumerate(s.keypoints):
                w.writerow([s.sample_id, s.label, p, repr(float(x)), repr(float(y)), int(s.visible[p])])
    manifest = {
        "format": "partglyphs-1",
        "seed": seed,
        "n": len(samples),
        "spec": spec_to_dict(spec),
        "split": {"train": list(train_ids or []), "test": list(test_ids or [])},
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(root):
    """Return ``(samples, manifest)``; samples are ordered by id."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    rows: dict[int, dict] = {}
    with open(root / "annotations.csv", newline="") as f:
        for r in csv.DictReader(f):
            sid = int(r["sample_id"])
            entry = rows.setdefault(sid, {"label": int(r["class"]), "parts": {}})
            entry["parts"][int(r["part_id"])] = (float(r["x"]), float(r["y"]), bool(int(r["visible"])))
    samples = []
    for sid in sorted(rows):
        parts = rows[sid]["parts"]
        order = sorted(parts)
        kp = np.array([parts[p][:2] for p in order])
        vis = np.array([parts[p][2] for p in order])
        img = read_ppm(root / "images" / f"{sid:05d}.ppm")
        samples.append(LabeledSample(sid, img, rows[sid]["label"], kp, vis))
    return samples, manifest
