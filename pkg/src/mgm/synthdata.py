"""Procedural multi-task scene benchmark.

Scenes are rendered with an orthographic camera looking down the depth axis.
Normals live in a camera frame with x to the right, y up and z pointing back
toward the camera, so every visible surface has ``n_z > 0`` and the camera
coordinate ``z = -depth`` satisfies ``dz/dx = -n_x/n_z``, ``dz/dy = -n_y/n_z``.
"""

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import read_raster, save_png, write_raster

C_SCENE = 8
C_OBJ = 6
DEPTH_RANGE = (0.5, 5.0)
VIEW_WIDTH = 2.0  # meters spanned by the image width
AMBIENT = 0.2
LIGHT_DIR = np.array([-0.4, 0.5, 0.77])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
EDGE_DEPTH_THRESHOLD = 0.1
MANIFEST_VERSION = 1

DENSE_KEYS = ("seg", "depth", "normal", "edge")
ALL_ANNOTATIONS = frozenset(DENSE_KEYS + ("scene_class",))

HUES = np.array([[0.8, 0.2, 0.2], [0.2, 0.75, 0.25], [0.2, 0.3, 0.85]])


class GenerationError(RuntimeError):
    pass


class StrippedAnnotationError(AttributeError):
    pass


@dataclass
class SceneObject:
    shape: str  # "box" or "sphere"
    center: tuple  # (x, y, depth) in meters
    size: float  # sphere radius or box half-size
    albedo: tuple
    obj_class: int = 1
    aspect: tuple = (1.0, 1.0, 1.0)  # box half-extent multipliers
    angles: tuple = (0.0, 0.0, 0.0)  # box rotation (x, y, z), radians

    def bounding_radius(self):
        if self.shape == "sphere":
            return float(self.size)
        return float(self.size * np.linalg.norm(self.aspect))


@dataclass
class SceneSpec:
    scene_class: int
    room_depth_range: tuple  # (nearest, farthest) back-wall depth in meters
    objects: list
    rng_seed: int = 0
    wall_tilt: tuple = (0.0, 0.0)  # depth slope of the back wall along x, y
    wall_albedo: tuple = (0.7, 0.7, 0.7)
    ambient: float = AMBIENT

    def wall_depth_at(self, x, y):
        near, far = self.room_depth_range
        mid = 0.5 * (near + far)
        return mid + self.wall_tilt[0] * x + self.wall_tilt[1] * y

    def validate(self, depth_range=DEPTH_RANGE):
        if not 0 <= self.scene_class < C_SCENE:
            raise GenerationError(f"scene_class {self.scene_class} out of range")
        if len(self.objects) < 1:
            raise GenerationError("scene needs at least one object")
        near, far = self.room_depth_range
        if not depth_range[0] <= near <= far <= depth_range[1]:
            raise GenerationError(f"room depth range {self.room_depth_range} outside {depth_range}")
        for obj in self.objects:
            if obj.shape not in ("box", "sphere"):
                raise GenerationError(f"unknown shape {obj.shape!r}")
            r = obj.bounding_radius()
            if obj.center[2] - r < depth_range[0]:
                raise GenerationError("object crosses the near plane")
            if obj.center[2] + r > near:
                raise GenerationError("object pokes through the back wall")
            if not 1 <= obj.obj_class <= C_OBJ:
                raise GenerationError(f"object class {obj.obj_class} out of range")


class SceneSample:
    """Rendered scene. Dense fields raise once stripped from ``annotations``."""

    def __init__(self, image, scene_class, annotations=ALL_ANNOTATIONS, **dense):
        self.image = image
        self._scene_class = int(scene_class)
        self.annotations = frozenset(annotations)
        self._dense = {k: v for k, v in dense.items() if k in self.annotations}

    def _get(self, key):
        if key not in self.annotations or key not in self._dense:
            raise StrippedAnnotationError(f"annotation {key!r} is not available on this sample")
        return self._dense[key]

    seg = property(lambda self: self._get("seg"))
    depth = property(lambda self: self._get("depth"))
    normal = property(lambda self: self._get("normal"))
    edge = property(lambda self: self._get("edge"))

    @property
    def scene_class(self):
        if "scene_class" not in self.annotations:
            raise StrippedAnnotationError("annotation 'scene_class' is not available on this sample")
        return self._scene_class

    @property
    def is_weak(self):
        return not (set(DENSE_KEYS) & self.annotations)


def strip_annotations(sample):
    return SceneSample(sample.image, sample.scene_class, annotations={"scene_class"})


def pixel_grid(resolution):
    h, w = resolution
    px = VIEW_WIDTH / w
    xs = (np.arange(w) + 0.5 - w / 2) * px
    ys = (h / 2 - np.arange(h) - 0.5) * px
    return np.meshgrid(xs, ys)  # each H×W


def _rotation(angles):
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _hit_sphere(obj, x, y):
    cx, cy, cd = obj.center
    dx, dy = x - cx, y - cy
    disc = obj.size ** 2 - dx ** 2 - dy ** 2
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t = np.where(hit, cd - root, np.inf)
    normal = np.stack([dx, dy, root], axis=-1) / obj.size
    return t, normal


def _hit_box(obj, x, y):
    # Camera frame point for depth t is (x, y, -t); ray direction (0, 0, -1).
    rot = _rotation(obj.angles)
    half = obj.size * np.asarray(obj.aspect, dtype=float)
    center = np.array([obj.center[0], obj.center[1], -obj.center[2]])
    origin = np.stack([x, y, np.zeros_like(x)], axis=-1) - center
    o_local = origin @ rot  # rotᵀ·(O - C) per pixel
    d_local = rot.T @ np.array([0.0, 0.0, -1.0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o_local) / d_local
        t2 = (half - o_local) / d_local
    parallel = np.abs(d_local) < 1e-12
    inside = np.abs(o_local) <= half
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = t_lo.max(axis=-1)
    t_far = t_hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > 0)
    axis = t_lo.argmax(axis=-1)
    sign = -np.sign(d_local[axis])
    n_local = np.zeros(x.shape + (3,))
    np.put_along_axis(n_local, axis[..., None], sign[..., None], axis=-1)
    normal = n_local @ rot.T
    t = np.where(hit, t_near, np.inf)
    return t, normal


def derive_edge_map(seg, depth, threshold=EDGE_DEPTH_THRESHOLD):
    """1 where any 4-neighbor has another label or a depth jump above threshold."""
    seg = np.asarray(seg)
    depth = np.asarray(depth)
    if seg.shape != depth.shape or seg.ndim != 2:
        raise ValueError(f"seg {seg.shape} and depth {depth.shape} must be equal 2-D shapes")
    edge = np.zeros(seg.shape, dtype=bool)
    # vertical neighbor pairs
    v = (seg[1:] != seg[:-1]) | (np.abs(depth[1:] - depth[:-1]) > threshold)
    edge[1:] |= v
    edge[:-1] |= v
    h = (seg[:, 1:] != seg[:, :-1]) | (np.abs(depth[:, 1:] - depth[:, :-1]) > threshold)
    edge[:, 1:] |= h
    edge[:, :-1] |= h
    return edge.astype(np.float32)


def generate_scene(spec, resolution=(64, 64), edge_threshold=EDGE_DEPTH_THRESHOLD):
    h, w = resolution
    if h < 16 or w < 16:
        raise ValueError("resolution must be at least 16×16")
    spec.validate()
    x, y = pixel_grid(resolution)

    depth = spec.wall_depth_at(x, y)
    a, b = spec.wall_tilt
    wall_n = np.array([a, b, 1.0]) / np.sqrt(a * a + b * b + 1.0)
    normal = np.broadcast_to(wall_n, (h, w, 3)).copy()
    seg = np.zeros((h, w), dtype=np.int32)
    albedo = np.broadcast_to(np.asarray(spec.wall_albedo, dtype=float), (h, w, 3)).copy()

    for obj in spec.objects:
        hit_fn = _hit_sphere if obj.shape == "sphere" else _hit_box
        t, n = hit_fn(obj, x, y)
        closer = t < depth
        depth = np.where(closer, t, depth)
        normal = np.where(closer[..., None], n, normal)
        seg = np.where(closer, obj.obj_class, seg).astype(np.int32)
        albedo = np.where(closer[..., None], np.asarray(obj.albedo, dtype=float), albedo)

    if not (seg > 0).any():
        raise GenerationError("no object is visible in the rendered scene")

    normal = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
    shade = spec.ambient + (1.0 - spec.ambient) * np.clip(normal @ LIGHT_DIR, 0.0, None)
    image = np.clip(albedo * shade[..., None], 0.0, 1.0) * 2.0 - 1.0
    edge = derive_edge_map(seg, depth, edge_threshold)
    return SceneSample(
        image=image.astype(np.float32),
        scene_class=spec.scene_class,
        seg=seg,
        depth=depth.astype(np.float32),
        normal=normal.astype(np.float32),
        edge=edge,
    )


# Scene-class recipes: bit 0 → object count band, bit 1 → shape mix,
# bit 2 → room depth band.
def scene_recipe(scene_class):
    many = scene_class & 1
    sphere_heavy = (scene_class >> 1) & 1
    far = (scene_class >> 2) & 1
    return {
        "count": (3, 5) if many else (1, 2),
        "p_sphere": 0.8 if sphere_heavy else 0.2,
        "room": (3.6, 4.5) if far else (2.2, 3.0),
        "tilt": 0.12 if far else -0.12,
    }


def sample_scene_spec(scene_class, seed):
    rng = np.random.default_rng(seed)
    recipe = scene_recipe(scene_class)
    tilt = (recipe["tilt"] + rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05))
    mid = float(rng.uniform(*recipe["room"]))
    # wall depth varies by at most this much over a square view
    spread = (abs(tilt[0]) + abs(tilt[1])) * VIEW_WIDTH / 2
    wall_near, wall_far = mid - spread, mid + spread
    count = int(rng.integers(recipe["count"][0], recipe["count"][1] + 1))
    objects = []
    for _ in range(count):
        sphere = rng.random() < recipe["p_sphere"]
        hue = int(rng.integers(0, 3))
        albedo = np.clip(HUES[hue] + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        size = float(rng.uniform(0.16, 0.32))
        if sphere:
            aspect, angles = (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)
        else:
            aspect = tuple(rng.uniform(0.7, 1.0, 3))
            angles = tuple(rng.uniform(-0.7, 0.7, 3))
        obj = SceneObject("sphere" if sphere else "box", (0.0, 0.0, 0.0), size,
                          tuple(albedo), obj_class=1 + (3 if sphere else 0) + hue,
                          aspect=aspect, angles=angles)
        r = obj.bounding_radius()
        lo, hi = DEPTH_RANGE[0] + r + 0.05, wall_near - r - 0.05
        cd = float(rng.uniform(lo, hi))
        cx, cy = rng.uniform(-0.7, 0.7, 2)
        obj.center = (float(cx), float(cy), cd)
        objects.append(obj)
    return SceneSpec(
        scene_class=scene_class,
        room_depth_range=(float(wall_near), float(wall_far)),
        objects=objects,
        rng_seed=int(seed),
        wall_tilt=tilt,
        wall_albedo=tuple(rng.uniform(0.55, 0.8) * np.ones(3) + rng.uniform(-0.05, 0.05, 3)),
        ambient=float(rng.uniform(0.15, 0.25)),
    )


# ---------------------------------------------------------------- dataset I/O


@dataclass
class DatasetConfig:
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 250
    resolution: tuple = (64, 64)
    weak_frac: float = 0.0
    seed: int = 0
    preview_pngs: int = 0  # number of PNG previews to write per split


@dataclass
class DatasetManifest:
    version: int
    resolution: tuple
    c_scene: int
    c_obj: int
    splits: dict  # split name → size
    records: list  # {"id", "split", "files", "scene_class", "annotations", "seed"}
    seed: int
    depth_range: tuple = DEPTH_RANGE
    root: Path = field(default=None, repr=False, compare=False)

    def to_json(self):
        d = {
            "version": self.version,
            "resolution": list(self.resolution),
            "c_scene": self.c_scene,
            "c_obj": self.c_obj,
            "splits": self.splits,
            "depth_range": list(self.depth_range),
            "seed": self.seed,
            "records": self.records,
        }
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def load(cls, root):
        root = Path(root)
        d = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        return cls(
            version=d["version"], resolution=tuple(d["resolution"]), c_scene=d["c_scene"],
            c_obj=d["c_obj"], splits=d["splits"], records=d["records"], seed=d["seed"],
            depth_range=tuple(d["depth_range"]), root=root,
        )

    def split_records(self, split):
        return [r for r in self.records if r["split"] == split]

    def validate(self, min_per_class_for_histogram=5):
        """Return a list of violated invariants (empty when valid)."""
        errors = []
        ids = {}
        for r in self.records:
            if r["id"] in ids and ids[r["id"]] != r["split"]:
                errors.append(f"record {r['id']} appears in splits {ids[r['id']]} and {r['split']}")
            ids[r["id"]] = r["split"]
            if self.root is not None:
                for f in r["files"].values():
                    if not (self.root / f).exists():
                        errors.append(f"missing file {f}")
        for split, n in self.splits.items():
            recs = self.split_records(split)
            if len(recs) != n:
                errors.append(f"split {split}: {len(recs)} records, manifest says {n}")
            if n < min_per_class_for_histogram * self.c_scene:
                continue
            counts = np.bincount([r["scene_class"] for r in recs], minlength=self.c_scene)
            expected = n / self.c_scene
            worst = np.abs(counts - expected).max() / expected
            if worst > 0.2:
                errors.append(f"split {split}: class histogram deviates {worst:.0%} from uniform")
        return errors


def _sample_seed(global_seed, split_idx, i):
    return int(np.random.SeedSequence([global_seed, split_idx, i]).generate_state(1, np.uint64)[0])


def _write_sample(root, rel, sample, weak):
    files = {"image": f"{rel}_image.mgmt"}
    write_raster(root / files["image"], sample.image)
    if not weak:
        files.update(seg=f"{rel}_seg.mgmt", depth=f"{rel}_depth.mgmt",
                     normal=f"{rel}_normal.mgmt", edge=f"{rel}_edge.mgmt")
        write_raster(root / files["seg"], sample.seg.astype(np.int32))
        write_raster(root / files["depth"], sample.depth)
        write_raster(root / files["normal"], sample.normal)
        write_raster(root / files["edge"], sample.edge.astype(np.uint8))
    return files


def make_dataset(config, out_dir):
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".mgm-datagen-", dir=out_dir.parent))
    try:
        records = []
        splits = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
        for split_idx, (split, n) in enumerate(splits.items()):
            (tmp / split).mkdir()
            rng = np.random.default_rng([config.seed, split_idx])
            classes = rng.permutation(np.arange(n) % C_SCENE)
            weak = np.zeros(n, dtype=bool)
            if split == "train":
                n_weak = int(round(config.weak_frac * n))
                weak[rng.permutation(n)[:n_weak]] = True
            for i in range(n):
                seed = _sample_seed(config.seed, split_idx, i)
                sample = generate_scene(sample_scene_spec(int(classes[i]), seed), config.resolution)
                rel = f"{split}/{i:06d}"
                files = _write_sample(tmp, rel, sample, weak[i])
                if i < config.preview_pngs:
                    save_png(tmp / f"{rel}_preview.png", sample.image)
                records.append({
                    "id": f"{split}-{i:06d}",
                    "split": split,
                    "files": files,
                    "scene_class": int(classes[i]),
                    "annotations": ["scene_class"] if weak[i] else sorted(ALL_ANNOTATIONS),
                    "seed": seed,
                })
        manifest = DatasetManifest(
            version=MANIFEST_VERSION, resolution=tuple(config.resolution), c_scene=C_SCENE,
            c_obj=C_OBJ, splits=splits, records=records, seed=config.seed, root=tmp,
        )
        errors = manifest.validate()
        if errors:
            raise GenerationError("; ".join(errors))
        (tmp / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    manifest.root = out_dir
    return manifest


def load_sample(manifest, record):
    root = manifest.root
    files = record["files"]
    image = read_raster(root / files["image"])
    annotations = set(record["annotations"])
    dense = {}
    for key in DENSE_KEYS:
        if key in annotations:
            dense[key] = read_raster(root / files[key])
    if "edge" in dense:
        dense["edge"] = dense["edge"].astype(np.float32)
    return SceneSample(image, record["scene_class"], annotations=annotations, **dense)


class ArraySplit:
    """Stacked arrays for a set of samples; dense keys absent for weak sets."""

    def __init__(self, images, scene_class, dense=None, ids=None):
        self.images = images
        self.scene_class = scene_class
        self.dense = dense or {}
        self.ids = ids if ids is not None else [str(i) for i in range(len(images))]

    def __len__(self):
        return len(self.images)

    @property
    def weak(self):
        return not self.dense

    def subset(self, idx):
        idx = np.asarray(idx)
        return ArraySplit(self.images[idx], self.scene_class[idx],
                          {k: v[idx] for k, v in self.dense.items()},
                          [self.ids[i] for i in idx])

    def stripped(self):
        return ArraySplit(self.images, self.scene_class, None, self.ids)

    @classmethod
    def from_samples(cls, samples, ids=None):
        images = np.stack([s.image for s in samples]).astype(np.float32)
        classes = np.array([s.scene_class for s in samples], dtype=np.int64)
        dense = {}
        if samples and not any(s.is_weak for s in samples):
            dense = {
                "seg": np.stack([s.seg for s in samples]).astype(np.int64),
                "depth": np.stack([s.depth for s in samples]).astype(np.float32),
                "normal": np.stack([s.normal for s in samples]).astype(np.float32),
                "edge": np.stack([s.edge for s in samples]).astype(np.float32),
            }
        return cls(images, classes, dense, ids)


def load_split(manifest, split, weak=None):
    """Load a split; ``weak`` selects only weak (True) or full (False) records."""
    recs = manifest.split_records(split)
    if weak is not None:
        recs = [r for r in recs if (r["annotations"] == ["scene_class"]) == weak]
    samples = [load_sample(manifest, r) for r in recs]
    if not samples:
        h, w = manifest.resolution
        return ArraySplit(np.zeros((0, h, w, 3), np.float32), np.zeros(0, np.int64), None, [])
    return ArraySplit.from_samples(samples, [r["id"] for r in recs])
