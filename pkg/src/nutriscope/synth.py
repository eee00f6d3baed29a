"""Procedural food-scene generator with exact, compositional nutrition labels.

Scenes are composed from a pool of item prototypes: a footprint (ellipse or
convex polygon), a smooth height dome, a base color, and a nutrient profile
derived deterministically from that color. Labels are computed from placed
geometry alone, never from pixels: each placed item contributes grams
proportional to its analytic footprint area, scaled down only by the fraction
clipped away at the canvas edge. Occlusion hides pixels, not grams.

Ground-truth depth is the camera-plane distance: a constant baseline minus the
tallest item surface at each pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .losses import TASKS
from .tensor_io import write_pgm, write_ppm, write_tensor

# prototype sampling ranges (per-100g profile is tied to base color below)
HEIGHT_RANGE = (0.02, 0.08)  # meters
COLOR_RANGE = (0.15, 0.95)
PROTEIN_PER_100G = (8.0, 26.0)   # 8 + 18 * red
FAT_PER_100G = (5.0, 25.0)       # 5 + 20 * blue
CARB_PER_100G = (12.0, 42.0)     # 12 + 30 * green
# areal mass density rises with how bright the item looks, so every label is
# recoverable from the image and the footprint geometry alone
MASS_DENSITY_BASE = 0.22         # g / px^2
MASS_DENSITY_BRIGHTNESS = 0.12   # g / px^2 per unit mean color
ATWATER = {"protein": 4.0, "fat": 9.0, "carbohydrate": 4.0}
DECOY_COUNT_MAX = 3              # flat look-alike patches per scene


def nutrition_vector(calories=0.0, mass=0.0, fat=0.0, carbohydrate=0.0, protein=0.0):
    return np.array([calories, mass, fat, carbohydrate, protein], dtype=np.float64)


def vector_to_dict(vec):
    return {t: float(v) for t, v in zip(TASKS, vec)}


def vector_from_dict(payload):
    return np.array([payload[t] for t in TASKS], dtype=np.float64)


class NutrientDatabase:
    """Total lookup from ingredient name to its per-100g nutrition vector."""

    def __init__(self, entries=None):
        self.entries = {k: np.asarray(v, dtype=np.float64) for k, v in (entries or {}).items()}

    def add(self, name, per_100g):
        self.entries[name] = np.asarray(per_100g, dtype=np.float64)

    def lookup(self, name):
        if name not in self.entries:
            raise DataError(f"unknown ingredient '{name}' (not in nutrient database)")
        return self.entries[name]

    def to_json(self):
        return json.dumps(
            {k: vector_to_dict(v) for k, v in sorted(self.entries.items())},
            indent=2, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        return cls({k: vector_from_dict(v) for k, v in payload.items()})


def annotate_from_ingredients(ingredients, db):
    """Sum per-100g database entries weighted by grams; mass is the gram total."""
    total = nutrition_vector()
    grams_total = 0.0
    for name, grams in ingredients:
        if grams < 0:
            raise ParameterError(f"ingredient '{name}' has negative weight {grams}")
        total = total + (grams / 100.0) * db.lookup(name)
        grams_total += grams
    total[TASKS.index("mass")] = grams_total
    return total


@dataclass
class ItemPrototype:
    """One recombination unit: geometry, appearance and nutrient densities."""

    name: str
    seed: int
    kind: str                      # "ellipse" or "polygon"
    semi_axes: tuple = (8.0, 8.0)  # ellipse
    rotation: float = 0.0
    vertices: np.ndarray = None    # polygon, local pixel coords
    max_height: float = 0.05       # meters at the dome peak
    base_color: np.ndarray = None  # rgb in [0, 1]
    texture_seed: int = 0
    areal_mass_density: float = 0.25  # g / px^2

    @property
    def base_area(self):
        """Analytic footprint area in px^2 at placement scale 1."""
        if self.kind == "ellipse":
            return float(np.pi * self.semi_axes[0] * self.semi_axes[1])
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    @property
    def per_100g(self):
        """Nutrient profile per 100 g, a deterministic function of base color."""
        r, g, b = self.base_color
        protein = PROTEIN_PER_100G[0] + 18.0 * r
        fat = FAT_PER_100G[0] + 20.0 * b
        carb = CARB_PER_100G[0] + 30.0 * g
        calories = (
            ATWATER["protein"] * protein
            + ATWATER["fat"] * fat
            + ATWATER["carbohydrate"] * carb
        )
        return nutrition_vector(calories, 100.0, fat, carb, protein)

    @property
    def nutrient_density_per_area(self):
        """Nutrients per px^2 of footprint (mass component is the areal density)."""
        return self.per_100g * (self.areal_mass_density / 100.0)

    def local_radius2(self, x, y):
        """Squared normalized radius in footprint coordinates (1.0 at the rim)."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        xr = x * c + y * s
        yr = -x * s + y * c
        if self.kind == "ellipse":
            return (xr / self.semi_axes[0]) ** 2 + (yr / self.semi_axes[1]) ** 2
        rim = np.max(np.hypot(self.vertices[:, 0], self.vertices[:, 1]))
        return (xr * xr + yr * yr) / (rim * rim)

    def inside(self, x, y):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        xr = x * c + y * s
        yr = -x * s + y * c
        if self.kind == "ellipse":
            return (xr / self.semi_axes[0]) ** 2 + (yr / self.semi_axes[1]) ** 2 <= 1.0
        ok = np.ones_like(xr, dtype=bool)
        verts = self.vertices
        for i in range(len(verts)):
            ax, ay = verts[i]
            bx, by = verts[(i + 1) % len(verts)]
            ok &= (bx - ax) * (yr - ay) - (by - ay) * (xr - ax) >= 0.0
        return ok

    def height_at(self, x, y):
        """Smooth dome over the footprint, zero outside it."""
        dome = np.maximum(0.0, 1.0 - self.local_radius2(x, y))
        return self.max_height * dome * self.inside(x, y)


def make_prototype(seed, radius_range=(6.0, 14.0)):
    """Deterministically sample one prototype from its seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    kind = "ellipse" if rng.random() < 0.6 else "polygon"
    base = rng.uniform(*radius_range)
    if kind == "ellipse":
        semi_axes = (base, base * rng.uniform(0.6, 1.0))
        vertices = None
    else:
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n))
        radii = base * rng.uniform(0.7, 1.0, size=n)
        vertices = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        semi_axes = (base, base)
    max_height = rng.uniform(*HEIGHT_RANGE)
    color = rng.uniform(COLOR_RANGE[0], COLOR_RANGE[1], size=3)
    return ItemPrototype(
        name=f"item-{seed}",
        seed=seed,
        kind=kind,
        semi_axes=semi_axes,
        rotation=rng.uniform(0.0, np.pi),
        vertices=vertices,
        max_height=max_height,
        base_color=color,
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        areal_mass_density=MASS_DENSITY_BASE
        + MASS_DENSITY_BRIGHTNESS * float(color.mean()),
    )


@dataclass
class Placement:
    prototype_index: int
    center: tuple  # (row, col) in canvas pixels; may sit near or past the edge
    scale: float = 1.0


@dataclass
class Scene:
    canvas: tuple
    placements: list
    rgb: np.ndarray        # (3, H, W) in [0, 1]
    depth: np.ndarray      # (1, H, W) meters
    label: np.ndarray      # 5-vector
    ingredients: list      # [(name, grams)]
    seed: int
    clip_fractions: list = field(default_factory=list)


def _texture(proto, height, width, rows, cols):
    rng = np.random.Generator(np.random.PCG64(proto.texture_seed))
    fy, fx = rng.uniform(0.05, 0.25, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = 1.0 + 0.25 * np.sin(2.0 * np.pi * (fy * rows + fx * cols) + phase)
    return np.clip(proto.base_color[:, None, None] * wave[None], 0.0, 1.0)


def _background(height, width, seed):
    """Tabletop plane plus flat decoy patches that mimic item colors.

    Decoys carry no height and no nutrition; they are visually ambiguous in
    RGB but trivially flat in depth, which is exactly what a depth branch is
    for.
    """
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5A17))
    shade = rng.uniform(0.55, 0.75)
    tilt = rng.uniform(-0.08, 0.08)
    rows_plane = np.linspace(0.0, 1.0, height)[:, None]
    plane = np.clip(shade + tilt * rows_plane, 0.0, 1.0)
    canvas = np.broadcast_to(plane, (3, height, width)).copy()
    rows = np.arange(height)[:, None].astype(np.float64)
    cols = np.arange(width)[None, :].astype(np.float64)
    for _ in range(int(rng.integers(0, DECOY_COUNT_MAX + 1))):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * (height, width)
        a = rng.uniform(0.06, 0.16) * height
        b = a * rng.uniform(0.6, 1.0)
        color = rng.uniform(COLOR_RANGE[0], COLOR_RANGE[1], size=3)
        fy, fx = rng.uniform(0.05, 0.25, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        inside = ((rows - cy) / a) ** 2 + ((cols - cx) / b) ** 2 <= 1.0
        wave = 1.0 + 0.25 * np.sin(2.0 * np.pi * (fy * rows + fx * cols) + phase)
        patch = np.clip(color[:, None, None] * wave[None], 0.0, 1.0)
        canvas[:, inside] = patch[:, inside]
    return canvas


def clip_fraction(proto, placement, canvas):
    """In-canvas share of the footprint, from pixel-center rasterization."""
    h, w = canvas
    cy, cx = placement.center
    s = placement.scale
    if proto.kind == "ellipse":
        reach = s * max(proto.semi_axes)
    else:
        reach = s * float(np.max(np.hypot(proto.vertices[:, 0], proto.vertices[:, 1])))
    r0, r1 = int(np.floor(cy - reach)) - 1, int(np.ceil(cy + reach)) + 1
    c0, c1 = int(np.floor(cx - reach)) - 1, int(np.ceil(cx + reach)) + 1
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    yy = (rows[:, None] - cy) / s
    xx = (cols[None, :] - cx) / s
    inside = proto.inside(np.broadcast_to(xx, (len(rows), len(cols))),
                          np.broadcast_to(yy, (len(rows), len(cols))))
    total = int(inside.sum())
    if total == 0:
        return 0.0
    in_canvas = inside & (rows[:, None] >= 0) & (rows[:, None] < h) \
        & (cols[None, :] >= 0) & (cols[None, :] < w)
    return int(in_canvas.sum()) / total


def compose_scene(prototypes, placements, canvas, seed, db,
                  baseline_distance=0.5):
    """Render a scene and derive its exact label from the placed geometry."""
    h, w = canvas
    rows = np.arange(h)[:, None].astype(np.float64)
    cols = np.arange(w)[None, :].astype(np.float64)
    rgb = _background(h, w, seed)
    best_height = np.zeros((h, w), dtype=np.float64)
    ingredients = []
    fractions = []
    for placement in placements:
        proto = prototypes[placement.prototype_index]
        cy, cx = placement.center
        s = placement.scale
        local_x = (cols - cx) / s
        local_y = (rows - cy) / s
        height_map = proto.height_at(
            np.broadcast_to(local_x, (h, w)), np.broadcast_to(local_y, (h, w))
        )
        visible = (height_map > 0.0) & (height_map >= best_height)
        if np.any(visible):
            texture = _texture(proto, h, w, rows, cols)
            rgb[:, visible] = texture[:, visible]
        best_height = np.maximum(best_height, height_map)
        fraction = clip_fraction(proto, placement, canvas)
        grams = proto.areal_mass_density * (proto.base_area * (s * s)) * fraction
        ingredients.append((proto.name, grams))
        fractions.append(fraction)
    label = annotate_from_ingredients(ingredients, db)
    depth = (baseline_distance - best_height)[None, :, :]
    return Scene(
        canvas=canvas,
        placements=list(placements),
        rgb=rgb,
        depth=depth,
        label=label,
        ingredients=ingredients,
        seed=seed,
        clip_fractions=fractions,
    )


@dataclass
class SceneRecord:
    """One manifest line: where the sample lives and what it contains."""

    sample_id: str
    rgb_path: str
    depth_path: str
    ingredients: list
    label: np.ndarray
    split: str
    seed: int

    def to_json(self):
        return json.dumps({
            "id": self.sample_id,
            "rgb": self.rgb_path,
            "depth": self.depth_path,
            "ingredients": [[n, g] for n, g in self.ingredients],
            "label": vector_to_dict(self.label),
            "split": self.split,
            "seed": self.seed,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        p = json.loads(line)
        return cls(p["id"], p["rgb"], p["depth"],
                   [(n, g) for n, g in p["ingredients"]],
                   vector_from_dict(p["label"]), p["split"], p["seed"])


def derive_seed(master_seed, index):
    return int((master_seed * 0x9E3779B1 + index * 0x85EBCA77 + 1) % (2**31 - 1))


def _build_pool(master_seed, pool_size, canvas):
    radius_range = (0.08 * canvas, 0.18 * canvas)
    protos = [make_prototype(derive_seed(master_seed, 10_000 + i), radius_range)
              for i in range(pool_size)]
    db = NutrientDatabase()
    for p in protos:
        db.add(p.name, p.per_100g)
    return protos, db


def generate_dataset(out_root, *, samples, canvas=64, items_min=1, items_max=4,
                     split_train=7, split_test=3, master_seed=0, pool_size=60,
                     baseline_distance=0.5, previews=False, scale_range=(0.7, 1.3)):
    """Write a full corpus: tensors, previews, nutrient database and manifest.

    Deterministic in every byte for a fixed argument set; per-sample seeds are
    derived from the master seed so samples can be regenerated independently.
    """
    if samples < 2:
        raise ParameterError(f"need at least 2 samples, got {samples}")
    if items_min < 1 or items_max < items_min:
        raise ParameterError(f"bad item count range [{items_min}, {items_max}]")
    out_root = Path(out_root)
    (out_root / "scenes").mkdir(parents=True, exist_ok=True)
    if previews:
        (out_root / "preview").mkdir(exist_ok=True)
    protos, db = _build_pool(master_seed, pool_size, canvas)
    n_train = samples * split_train // (split_train + split_test)
    records = []
    for i in range(samples):
        seed = derive_seed(master_seed, i)
        rng = np.random.Generator(np.random.PCG64(seed))
        count = int(rng.integers(items_min, items_max + 1))
        placements = []
        for _ in range(count):
            idx = int(rng.integers(0, len(protos)))
            margin = 0.08 * canvas
            center = tuple(rng.uniform(margin, canvas - margin, size=2))
            placements.append(Placement(idx, center, float(rng.uniform(*scale_range))))
        scene = compose_scene(protos, placements, (canvas, canvas), seed, db,
                              baseline_distance=baseline_distance)
        sample_id = f"s{i:05d}"
        rgb_rel = f"scenes/{sample_id}_rgb.ntsr"
        depth_rel = f"scenes/{sample_id}_depth.ntsr"
        try:
            write_tensor(out_root / rgb_rel, scene.rgb.astype(np.float32))
            write_tensor(out_root / depth_rel, scene.depth.astype(np.float32))
            if previews:
                write_ppm(out_root / f"preview/{sample_id}.ppm", scene.rgb)
                write_pgm(out_root / f"preview/{sample_id}_depth.pgm",
                          scene.depth[0], max_value=baseline_distance)
        except OSError as exc:
            raise DataError(f"failed writing sample {sample_id}: {exc}") from exc
        records.append(SceneRecord(
            sample_id, rgb_rel, depth_rel, scene.ingredients, scene.label,
            "train" if i < n_train else "test", seed,
        ))
    (out_root / "db.json").write_text(db.to_json())
    (out_root / "manifest.jsonl").write_text(
        "".join(r.to_json() + "\n" for r in records)
    )
    return records


def load_manifest(root):
    path = Path(root) / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    return [SceneRecord.from_json(line)
            for line in path.read_text().splitlines() if line.strip()]


def load_database(root):
    path = Path(root) / "db.json"
    if not path.exists():
        raise DataError(f"no nutrient database at {path}")
    return NutrientDatabase.from_json(path.read_text())
