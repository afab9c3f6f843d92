"""Procedural track-like scenes with labeled regions and controllable defects.

A scene is a textured ballast background, a pair of bright vertical rails and
faint horizontal ties. Every scene carries three labeled regions: the
``on_track`` corridor around the rails and two ``track_side`` strips flanking
it. Defects are pasted patches that are never labeled; the same patch can be
placed on the track or beside it, which is what makes location sensitivity
measurable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box

CATEGORY_NAMES = ("on_track", "track_side")
ON_TRACK, TRACK_SIDE = 0, 1
DEFECT_KINDS = ("rail_break", "vegetation", "obstruction")
PLACEMENTS = ("on_track", "off_track")
EVAL_CLASSES = ("healthy", "on_track", "off_track", "priority_pairs")

# intensity the defect textures are designed against
REFERENCE_BALLAST = 0.35
REFERENCE_RAIL = 0.85


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so a PNG round trip is lossless."""
    return (np.round(np.clip(x, 0, 1) * 255) / 255).astype(np.float32)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    rail_left: int = 22
    gauge: int = 18
    rail_width: int = 2
    rail_intensity: float = REFERENCE_RAIL
    ballast_level: float = REFERENCE_BALLAST
    ballast_noise: float = 0.03
    tie_spacing: int = 8
    tie_phase: int = 0
    tie_height: int = 2
    tie_intensity: float = 0.45
    corridor_margin: int = 3
    side_width: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.gauge < 4:
            raise ValueError("gauge must be >= 4 px")
        if self.gauge <= self.rail_width:
            raise ValueError("rails overlap: gauge must exceed rail width")
        x0, x1 = self.corridor
        if x0 < 0 or x1 > self.width:
            raise ValueError(f"rail corridor [{x0}, {x1}) does not fit in width {self.width}")
        if self.tie_spacing < 1 or not 0 <= self.tie_height <= self.tie_spacing:
            raise ValueError("bad tie layout")
        if self.height < 1:
            raise ValueError("height must be >= 1")

    @property
    def rail_xs(self) -> tuple[int, int]:
        return self.rail_left, self.rail_left + self.gauge

    @property
    def corridor(self) -> tuple[int, int]:
        return (self.rail_left - self.corridor_margin,
                self.rail_left + self.gauge + self.rail_width + self.corridor_margin)

    @property
    def side_strips(self) -> list[tuple[int, int]]:
        x0, x1 = self.corridor
        strips = [(max(0, x0 - self.side_width), x0),
                  (x1, min(self.width, x1 + self.side_width))]
        return [(a, b) for a, b in strips if b - a >= 4]


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    placement: str
    size: int
    contrast: float = 1.0

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.size < 1:
            raise ValueError("defect size must be >= 1")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must be in (0, 1]")


@dataclass
class LabeledImage:
    image: np.ndarray  # (1, 1, H, W) float32 in [0, 1]
    regions: list[tuple[Box, int]]
    defect: dict | None = None
    scene: SceneSpec | None = None
    defect_box: Box | None = None

    def to_json(self) -> dict:
        return {
            "boxes": [dict(b.to_dict(), category=CATEGORY_NAMES[c]) for b, c in self.regions],
            "defect": self.defect,
        }


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def generate_scene(spec: SceneSpec) -> LabeledImage:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    img = spec.ballast_level + spec.ballast_noise * rng.uniform(-1, 1, size=(h, w))
    x0, x1 = spec.corridor
    rows = (np.arange(h) - spec.tie_phase) % spec.tie_spacing < spec.tie_height
    img[rows, x0:x1] = spec.tie_intensity + 0.5 * spec.ballast_noise * rng.uniform(
        -1, 1, size=(int(rows.sum()), x1 - x0))
    for rx in spec.rail_xs:
        img[:, rx:rx + spec.rail_width] = spec.rail_intensity
    regions = [(Box(x0, 0, x1, h), ON_TRACK)]
    regions += [(Box(a, 0, b, h), TRACK_SIDE) for a, b in spec.side_strips]
    return LabeledImage(quantize(img)[None, None], regions, None, spec)


def defect_patch(defect: DefectSpec, rng: np.random.Generator, rail_width: int = 2):
    """Pixel values and paste mask of a defect; depends only on ``defect`` and ``rng``."""
    s = defect.size
    if defect.kind == "rail_break":
        base = REFERENCE_RAIL - defect.contrast * (REFERENCE_RAIL - REFERENCE_BALLAST)
        values = base + 0.03 * rng.uniform(-1, 1, size=(s, rail_width + 2))
        mask = np.ones_like(values, dtype=bool)
    elif defect.kind == "vegetation":
        half = max(1, (s + 1) // 2)
        tex = np.kron(rng.uniform(0, 1, size=(half, half)), np.ones((2, 2)))[:s, :s]
        values = REFERENCE_BALLAST + defect.contrast * (0.25 + 0.35 * tex)
        yy, xx = np.mgrid[:s, :s] - (s - 1) / 2
        r = np.hypot(yy, xx) / (s / 2)
        ragged = rng.uniform(0, 1, size=(s, s)) < 0.35
        mask = (r <= 1.0) & ~((r > 0.7) & ragged)
    else:
        values = REFERENCE_BALLAST + 0.6 * defect.contrast + 0.02 * rng.uniform(-1, 1, size=(s, s))
        mask = np.ones_like(values, dtype=bool)
    return quantize(values), mask


def inject_defect(scene: LabeledImage, defect: DefectSpec, seed: int) -> LabeledImage:
    """Paste a defect into a copy of ``scene``; labeled regions are left unchanged.

    With the same ``defect`` (apart from placement) and ``seed`` the pasted
    pixels and vertical position are identical for both placements.
    """
    spec = scene.scene
    if spec is None:
        raise ValueError("inject_defect needs a generated scene (scene spec missing)")
    rng = np.random.default_rng(seed)
    values, mask = defect_patch(defect, rng, spec.rail_width)
    ph, pw = values.shape
    if ph > spec.height:
        raise ValueError(f"defect of height {ph} larger than the image")
    y = int(rng.integers(0, spec.height - ph + 1))
    rail_pick = int(rng.integers(0, 2))
    side_pick = int(rng.integers(0, 2))

    if defect.placement == "on_track":
        if defect.kind == "rail_break":
            x = spec.rail_xs[rail_pick] - 1
        else:
            inner0 = spec.rail_left + spec.rail_width
            inner = spec.gauge - spec.rail_width
            c0, c1 = spec.corridor
            if pw <= inner:
                x = inner0 + (inner - pw) // 2
            elif pw <= c1 - c0:
                x = c0 + (c1 - c0 - pw) // 2
            else:
                raise ValueError(f"defect of width {pw} larger than the track corridor")
    else:
        fits = [(a, b) for a, b in spec.side_strips if b - a >= pw]
        if not fits:
            raise ValueError(f"defect of width {pw} larger than every track-side strip")
        a, b = fits[side_pick % len(fits)]
        x = a + (b - a - pw) // 2

    img = scene.image[0, 0].copy()
    region = img[y:y + ph, x:x + pw]
    region[mask] = values[mask]
    return LabeledImage(img[None, None], list(scene.regions),
                        {"kind": defect.kind, "placement": defect.placement},
                        spec, Box(x, y, x + pw, y + ph))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneRanges:
    """Inclusive ranges the dataset generator draws scene parameters from."""

    corridor_center: tuple[int, int] = (28, 36)
    gauge: tuple[int, int] = (16, 20)
    ballast_level: tuple[float, float] = (0.3, 0.4)
    ballast_noise: tuple[float, float] = (0.02, 0.04)
    scenario1_size: tuple[int, int] = (8, 10)
    scenario1_contrast: tuple[float, float] = (0.7, 1.0)
    break_size: tuple[int, int] = (12, 16)
    vegetation_size: tuple[int, int] = (12, 14)
    vegetation_contrast: float = 0.5


@dataclass
class Dataset:
    train: list[LabeledImage]
    eval: dict[str, list[LabeledImage]] = field(default_factory=dict)
    seed: int = 0


def random_scene_spec(rng: np.random.Generator, ranges: SceneRanges = SceneRanges(),
                      base: SceneSpec = SceneSpec()) -> SceneSpec:
    gauge = int(rng.integers(ranges.gauge[0], ranges.gauge[1] + 1))
    center = int(rng.integers(ranges.corridor_center[0], ranges.corridor_center[1] + 1))
    rail_left = center - (gauge + base.rail_width) // 2
    return replace(
        base,
        gauge=gauge,
        rail_left=rail_left,
        ballast_level=float(rng.uniform(*ranges.ballast_level)),
        ballast_noise=float(rng.uniform(*ranges.ballast_noise)),
        tie_phase=int(rng.integers(0, base.tie_spacing)),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def generate_dataset(count_train: int, count_eval_per_class: int,
                     ranges: SceneRanges = SceneRanges(), seed: int = 0) -> Dataset:
    """Healthy training scenes plus a four-class evaluation split.

    ``on_track[i]`` and ``off_track[i]`` share their scene and defect, differing
    only in where the defect sits. ``priority_pairs`` alternates a small
    on-track rail break and a large off-track vegetation patch in the same scene.
    """
    rng = np.random.default_rng(seed)
    train = [generate_scene(random_scene_spec(rng, ranges)) for _ in range(count_train)]

    m = count_eval_per_class
    healthy = [generate_scene(random_scene_spec(rng, ranges)) for _ in range(m)]
    on, off = [], []
    for i in range(m):
        scene = generate_scene(random_scene_spec(rng, ranges))
        kind = ("vegetation", "obstruction")[i % 2]
        size = int(rng.integers(ranges.scenario1_size[0], ranges.scenario1_size[1] + 1))
        contrast = float(rng.uniform(*ranges.scenario1_contrast))
        dseed = int(rng.integers(0, 2**31 - 1))
        for placement, bucket in (("on_track", on), ("off_track", off)):
            bucket.append(inject_defect(scene, DefectSpec(kind, placement, size, contrast), dseed))
    pairs = []
    while len(pairs) < m:
        scene = generate_scene(random_scene_spec(rng, ranges))
        brk = DefectSpec("rail_break", "on_track",
                         int(rng.integers(ranges.break_size[0], ranges.break_size[1] + 1)))
        veg = DefectSpec("vegetation", "off_track",
                         int(rng.integers(ranges.vegetation_size[0],
                                          ranges.vegetation_size[1] + 1)),
                         ranges.vegetation_contrast)
        pairs.append(inject_defect(scene, brk, int(rng.integers(0, 2**31 - 1))))
        pairs.append(inject_defect(scene, veg, int(rng.integers(0, 2**31 - 1))))
    return Dataset(train, {"healthy": healthy, "on_track": on, "off_track": off,
                           "priority_pairs": pairs[:m]}, seed)


# ---------------------------------------------------------------------------
# disk format: 8-bit PNG + JSON sidecar per image, manifest per dataset
# ---------------------------------------------------------------------------

def save_image(path: Path, item: LabeledImage) -> None:
    pixels = np.round(item.image[0, 0] * 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)
    path.with_suffix(".json").write_text(json.dumps(item.to_json(), indent=1) + "\n")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
        return (np.asarray(im, dtype=np.float32) / 255.0)[None, None]


def load_image(path) -> LabeledImage:
    path = Path(path)
    image = load_png(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    regions = [(Box(b["x_min"], b["y_min"], b["x_max"], b["y_max"]),
                CATEGORY_NAMES.index(b["category"])) for b in meta["boxes"]]
    return LabeledImage(image, regions, meta.get("defect"))


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    splits: dict = {"train": []}
    (out / "train").mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(dataset.train):
        name = f"train/{i:05d}.png"
        save_image(out / name, item)
        splits["train"].append(name)
    splits["eval"] = {}
    for cls, items in dataset.eval.items():
        (out / "eval" / cls).mkdir(parents=True, exist_ok=True)
        names = []
        for i, item in enumerate(items):
            name = f"eval/{cls}/{i:05d}.png"
            save_image(out / name, item)
            names.append(name)
        splits["eval"][cls] = names
    manifest = {"format": "rpae-dataset-1", "seed": dataset.seed,
                "categories": list(CATEGORY_NAMES), "splits": splits}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(data_dir, splits=("train", "eval")) -> Dataset:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    sp = manifest["splits"]
    for s in splits:
        if s not in sp:
            raise ValueError(f"{root / 'manifest.json'}: missing split {s!r}")
    train = [load_image(root / n) for n in sp["train"]] if "train" in splits else []
    ev = {}
    if "eval" in splits:
        ev = {cls: [load_image(root / n) for n in names] for cls, names in sp["eval"].items()}
    return Dataset(train, ev, manifest.get("seed", 0))


def scene_spec_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
