"""Synthetic paired (point cloud, interaction video, heatmap) samples.

Objects are unions of primitive parts. The same category is generated with
different affordance parts under different labels, so shape alone does not
say which part is being used; the video does. Each video orbits the object
(fixed world-frame start, 10 degrees per frame) while a bright "hand" disc
moves from a fixed corner toward the affordance part, reaching it in the
last quarter of the frames.

File formats
------------
points   text, one ``x,y,z,h`` line per point (9 significant digits, LF)
clip     little-endian binary: b"PVAD", u32 version=1, u32 T, C, H, W, then
         T*C*H*W float32 values row-major
meta     ``key=value`` lines: id, category, affordance, split, viewpoint
         (eye, look_at, up as 9 floats), focal, image_size
manifest one ``id,split,points_path,clip_path,meta_path`` line per sample
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraParams, PointCloud, image_coords, orbit_camera, project_points, select_viewpoint

CLIP_MAGIC = b"PVAD"
CLIP_VERSION = 1
MAX_CLIP_VALUES = 1 << 28
SPLITS = ("seen-train", "seen-eval", "unseen-eval")


class DataConfigError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed sample or manifest file."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


# ---------------------------------------------------------------------------
# primitive parts


@dataclass(frozen=True)
class Part:
    name: str
    kind: str                  # box | cylinder | sphere
    center: tuple[float, float, float]
    size: tuple[float, ...]    # box: half extents; cylinder: (radius, half height); sphere: (radius,)
    share: float               # fraction of the point budget
    affordance: str | None = None


def _sample_box(rng, center, half, n):
    half = np.asarray(half)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 3))
    axis = face % 3
    u[np.arange(n), axis] = np.where(face < 3, 1.0, -1.0)
    return np.asarray(center) + u * half


def _sample_cylinder(rng, center, radius, hh, n):
    side, cap = 2 * np.pi * radius * 2 * hh, np.pi * radius ** 2
    kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(kind == 0, rng.uniform(-hh, hh, size=n), np.where(kind == 1, hh, -hh))
    return np.asarray(center) + np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_sphere(rng, center, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def sample_part(rng, part: Part, n: int, jitter: float) -> np.ndarray:
    scale = 1 + rng.uniform(-jitter, jitter)
    size = tuple(s * scale for s in part.size)
    if part.kind == "box":
        return _sample_box(rng, part.center, size, n)
    if part.kind == "cylinder":
        return _sample_cylinder(rng, part.center, size[0], size[1], n)
    return _sample_sphere(rng, part.center, size[0], n)


# Canonical (z-up) object definitions: a body plus two appendages at the
# corners of a roughly equilateral triangle. The wide gaps keep each part's
# heatmap halo off the other parts.
CATEGORIES: dict[str, tuple[Part, ...]] = {
    "mug": (
        Part("body", "cylinder", (0, 0, 0), (0.3, 0.35), 0.5, "contain"),
        Part("handle", "box", (0.8, 0, 1.35), (0.06, 0.05, 0.15), 0.25, "grasp"),
        Part("spout", "box", (-0.8, 0, 1.35), (0.1, 0.06, 0.05), 0.25, "pour"),
    ),
    "kettle": (
        Part("body", "sphere", (0, 0, 0), (0.35,), 0.5),
        Part("handle", "box", (0.8, 0, 1.35), (0.06, 0.05, 0.15), 0.25, "grasp"),
        Part("knob", "sphere", (-0.8, 0, 1.35), (0.09,), 0.25, "open"),
    ),
    "pot": (
        Part("body", "cylinder", (0, 0, 0), (0.35, 0.25), 0.4),
        # mirror twins: kept within the point encoder's reach of the body, since
        # two isolated mirror-symmetric boxes have identical local features
        Part("handle_pos", "box", (0.5, 0, 0.3), (0.08, 0.12, 0.04), 0.3, "grasp"),
        Part("handle_neg", "box", (-0.5, 0, 0.3), (0.08, 0.12, 0.04), 0.3, "lift"),
    ),
    "bottle": (
        Part("body", "cylinder", (0, 0, 0), (0.22, 0.4), 0.5, "contain"),
        Part("cap", "cylinder", (0.8, 0, 1.35), (0.1, 0.06), 0.25, "open"),
        Part("grip", "box", (-0.8, 0, 1.35), (0.1, 0.05, 0.15), 0.25, "grasp"),
    ),
    "lamp": (
        Part("shade", "cylinder", (0, 0, 0), (0.35, 0.25), 0.5),
        Part("switch", "box", (0.8, 0, 1.35), (0.06, 0.06, 0.05), 0.25, "press"),
        Part("finial", "sphere", (-0.8, 0, 1.35), (0.08,), 0.25, "lift"),
    ),
    "drawer": (
        Part("cabinet", "box", (0, 0, 0), (0.35, 0.28, 0.28), 0.5),
        Part("knob", "sphere", (0.8, 0, 1.35), (0.08,), 0.25, "open"),
        Part("button", "box", (-0.8, 0, 1.35), (0.08, 0.08, 0.04), 0.25, "press"),
    ),
}

# categories whose two affordance parts are mirror images of each other
SYMMETRIC_CATEGORIES = ("pot",)


def valid_pairs() -> list[tuple[str, str]]:
    return [(cat, p.affordance) for cat, parts in CATEGORIES.items() for p in parts if p.affordance]


def affordance_part(category: str, affordance: str) -> Part:
    for p in CATEGORIES.get(category, ()):
        if p.affordance == affordance:
            return p
    raise DataConfigError(f"invalid (category, affordance) pair: ({category}, {affordance})")


# ---------------------------------------------------------------------------
# samples


@dataclass
class VideoSpec:
    T: int = 8
    size: tuple[int, int] = (32, 32)
    start_azimuth: float = 60.0    # degrees, world frame
    step: float = 10.0             # degrees per frame
    elevation: float = 25.0
    distance: float = 2.5
    focal: float = 2.0
    hand_radius: float = 2.5       # pixels
    hand_start: tuple[float, float] = (29.5, 2.5)   # (row, col) of the pre-contact position
    object_gain: float = 0.6       # silhouette brightness under the full-intensity hand
    azimuth_jitter: float = 5.0


@dataclass
class Sample:
    id: str
    category: str
    affordance: str
    points: PointCloud
    clip: np.ndarray                 # T x 1 x H x W float32
    viewpoint: CameraParams
    split: str = "seen-train"
    part_labels: np.ndarray | None = field(default=None, repr=False)   # per-point part index
    hand_track: np.ndarray | None = field(default=None, repr=False)    # T x 2 disc centers

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.category == other.category
                and self.affordance == other.affordance and self.split == other.split
                and self.viewpoint == other.viewpoint
                and np.array_equal(self.points.coords, other.points.coords)
                and np.array_equal(self.points.heatmap, other.points.heatmap)
                and np.array_equal(self.clip, other.clip))


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def build_object(category: str, rng: np.random.Generator, n_points: int, jitter: float = 0.1):
    """Sampled, centred, unit-radius cloud plus per-point part index."""
    parts = CATEGORIES[category]
    counts = np.floor(np.array([p.share for p in parts]) * n_points).astype(int)
    counts[0] += n_points - counts.sum()
    chunks, labels = [], []
    for i, (part, n) in enumerate(zip(parts, counts)):
        chunks.append(sample_part(rng, part, n, jitter))
        labels.append(np.full(n, i))
    coords = np.concatenate(chunks)
    labels = np.concatenate(labels)
    order = rng.permutation(n_points)
    coords, labels = coords[order], labels[order]
    coords = coords - coords.mean(axis=0)
    coords = coords / np.linalg.norm(coords, axis=1).max()
    return coords, labels


def diameter(coords: np.ndarray) -> float:
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    return float(d.max())


def affordance_heatmap(coords: np.ndarray, part_mask: np.ndarray, rel_sigma: float = 0.15) -> np.ndarray:
    """Gaussian falloff in Euclidean distance to the nearest affordance-part point.

    Part points score exactly 1; sigma is ``rel_sigma`` times the object diameter.
    """
    sigma = rel_sigma * diameter(coords)
    part = coords[part_mask]
    d2 = ((coords[:, None, :] - part[None, :, :]) ** 2).sum(-1).min(axis=1)
    return np.exp(-d2 / (2 * sigma * sigma))


def projected_centroid(coords: np.ndarray, mask: np.ndarray, cam: CameraParams) -> np.ndarray:
    """Mean pixel-centre position of the visible masked points (analytic centroid if hidden)."""
    proj = project_points(coords, cam)
    vis = proj.visible & mask
    if vis.any():
        return proj.pixel_of_point[vis].mean(axis=0) + 0.5
    rc, _ = image_coords(coords[mask].mean(axis=0, keepdims=True), cam)
    return rc[0]


def video_cameras(spec: VideoSpec, rng: np.random.Generator) -> list[CameraParams]:
    az0 = spec.start_azimuth + rng.uniform(-spec.azimuth_jitter, spec.azimuth_jitter)
    el = np.radians(spec.elevation)
    cams = []
    for t in range(spec.T):
        az = np.radians(az0 + spec.step * t)
        d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(orbit_camera((0.0, 0.0, 0.0), d, spec.distance, spec.focal, spec.size))
    return cams


def contact_frame(T: int) -> int:
    """First frame of the final quarter; the hand touches the part from here on."""
    return T - max(1, T // 4)


def render_video(coords: np.ndarray, part_mask: np.ndarray, spec: VideoSpec,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.size
    rows, cols = np.mgrid[0:h, 0:w] + 0.5
    start = np.asarray(spec.hand_start, dtype=float)
    t_contact = contact_frame(spec.T)
    frames, track = [], []
    for t, cam in enumerate(video_cameras(spec, rng)):
        silhouette = project_points(coords, cam).pixels[0] * spec.object_gain
        target = projected_centroid(coords, part_mask, cam)
        s = min(1.0, t / t_contact)
        center = start + s * (target - start)
        disc = ((rows - center[0]) ** 2 + (cols - center[1]) ** 2) <= spec.hand_radius ** 2
        frames.append(np.maximum(silhouette, disc.astype(float))[None])
        track.append(center)
    return np.asarray(frames, dtype=np.float32), np.asarray(track)


def generate_sample(category: str, affordance: str, seed: int, n_points: int = 512,
                    video: VideoSpec | None = None, split: str = "seen-train") -> Sample:
    part = affordance_part(category, affordance)
    video = video or VideoSpec()
    rng = np.random.default_rng(seed)
    coords, labels = build_object(category, rng, n_points)
    part_idx = CATEGORIES[category].index(part)
    mask = labels == part_idx
    coords = _f32(coords)
    heat = _f32(affordance_heatmap(coords, mask))
    pc = PointCloud(coords, heat)
    view = select_viewpoint(pc)
    clip, track = render_video(coords, mask, video, rng)
    return Sample(f"{category}-{affordance}-{seed}", category, affordance, pc, clip, view, split,
                  part_labels=labels, hand_track=track)


def replicate_image_to_clip(img: np.ndarray, T: int) -> np.ndarray:
    img = np.asarray(img)
    return np.repeat(img[None], T, axis=0)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    seen_pairs: frozenset
    unseen_pairs: frozenset
    seed: int = 0

    def __post_init__(self):
        overlap = self.seen_pairs & self.unseen_pairs
        if overlap:
            raise DataConfigError(f"pairs appear in both seen and unseen sets: {sorted(overlap)}")
        known = set(valid_pairs())
        bad = (self.seen_pairs | self.unseen_pairs) - known
        if bad:
            raise DataConfigError(f"invalid (category, affordance) pairs: {sorted(bad)}")
        seen_aff = {a for _, a in self.seen_pairs}
        novel = {a for _, a in self.unseen_pairs} - seen_aff
        if novel:
            raise DataConfigError(f"unseen affordances never seen in training: {sorted(novel)}")

    @classmethod
    def default(cls, seed: int = 0) -> "SplitSpec":
        unseen = {("bottle", "contain"), ("kettle", "open"), ("lamp", "lift"), ("drawer", "press")}
        seen = set(valid_pairs()) - unseen
        return cls(frozenset(seen), frozenset(unseen), seed)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    points_path: str
    clip_path: str
    meta_path: str


def _pair_seed(base: int, category: str, affordance: str, index: int, stream: int) -> int:
    pair_idx = valid_pairs().index((category, affordance))
    ss = np.random.SeedSequence([base, pair_idx, stream, index])
    return int(ss.generate_state(1)[0])


def plan_splits(spec: SplitSpec, n_per_pair: int, n_eval: int | None = None) -> list[tuple[str, str, int, str]]:
    """(category, affordance, seed, split) for every sample of the dataset."""
    if n_eval is None:
        n_eval = max(1, n_per_pair // 4)
    plan = []
    for cat, aff in sorted(spec.seen_pairs):
        plan += [(cat, aff, _pair_seed(spec.seed, cat, aff, i, 0), "seen-train") for i in range(n_per_pair)]
        plan += [(cat, aff, _pair_seed(spec.seed, cat, aff, i, 1), "seen-eval") for i in range(n_eval)]
    for cat, aff in sorted(spec.unseen_pairs):
        plan += [(cat, aff, _pair_seed(spec.seed, cat, aff, i, 2), "unseen-eval") for i in range(n_eval)]
    return plan


def make_splits(spec: SplitSpec, n_per_pair: int, n_eval: int | None = None,
                out_dir: str | Path | None = None, video: VideoSpec | None = None):
    """Generate every sample; with ``out_dir`` also write files and the manifest.

    Returns (manifest entries, samples).
    """
    entries, samples = [], []
    for cat, aff, seed, split in plan_splits(spec, n_per_pair, n_eval):
        s = generate_sample(cat, aff, seed, video=video, split=split)
        e = ManifestEntry(s.id, split, f"{s.id}.points.txt", f"{s.id}.clip.bin", f"{s.id}.meta.txt")
        if out_dir is not None:
            write_sample(s, Path(out_dir), e)
        entries.append(e)
        samples.append(s)
    if out_dir is not None:
        write_manifest(Path(out_dir) / "manifest.csv", entries)
    return entries, samples


# ---------------------------------------------------------------------------
# file formats


def write_points(path: Path, pc: PointCloud) -> None:
    heat = pc.heatmap if pc.heatmap is not None else np.zeros(pc.n)
    lines = [",".join(f"{float(np.float32(v)):.9g}" for v in (*xyz, h)) for xyz, h in zip(pc.coords, heat)]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode())


def read_points(path: Path) -> PointCloud:
    rows = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}: line {i + 1} has {len(parts)} fields, expected 4")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise FormatError(f"{path}: line {i + 1}: {exc}") from None
    # values are float32 on disk; %.9g restores them exactly
    arr = _f32(np.array(rows))
    return PointCloud(arr[:, :3], arr[:, 3])


def write_clip(path: Path, clip: np.ndarray) -> None:
    clip = np.asarray(clip, dtype="<f4")
    if clip.ndim != 4:
        raise FormatError(f"clip must be T x C x H x W, got {clip.shape}")
    header = CLIP_MAGIC + struct.pack("<5I", CLIP_VERSION, *clip.shape)
    Path(path).write_bytes(header + clip.tobytes(order="C"))


def read_clip(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CLIP_MAGIC:
        raise BadMagicError(f"{path}: bad magic at offset 0: {raw[:4]!r} (expected {CLIP_MAGIC!r})")
    if len(raw) < 24:
        raise TruncatedError(f"{path}: header truncated at offset {len(raw)} (need 24 bytes)")
    version, t, c, h, w = struct.unpack_from("<5I", raw, 4)
    if version != CLIP_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    count = t * c * h * w
    if count > MAX_CLIP_VALUES:
        raise DimensionOverflowError(f"{path}: header dims {t}x{c}x{h}x{w} exceed {MAX_CLIP_VALUES} values")
    need = 24 + 4 * count
    if len(raw) != need:
        raise TruncatedError(f"{path}: payload is {len(raw) - 24} bytes at offset 24, header implies {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=24).reshape(t, c, h, w).astype(np.float32)


def write_meta(path: Path, s: Sample) -> None:
    v = s.viewpoint
    vp = ",".join(repr(float(x)) for x in (*v.eye, *v.look_at, *v.up))
    lines = [f"id={s.id}", f"category={s.category}", f"affordance={s.affordance}", f"split={s.split}",
             f"viewpoint={vp}", f"focal={float(v.focal)!r}", f"image_size={v.image_size[0]},{v.image_size[1]}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path: Path) -> dict:
    meta = {}
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if "=" not in line:
            raise FormatError(f"{path}: line {i + 1} is not key=value")
        k, v = line.split("=", 1)
        meta[k] = v
    missing = {"id", "category", "affordance", "split", "viewpoint", "focal", "image_size"} - meta.keys()
    if missing:
        raise FormatError(f"{path}: missing keys {sorted(missing)}")
    vp = [float(x) for x in meta["viewpoint"].split(",")]
    if len(vp) != 9:
        raise FormatError(f"{path}: viewpoint needs 9 floats, got {len(vp)}")
    h, w = (int(x) for x in meta["image_size"].split(","))
    meta["camera"] = CameraParams(tuple(vp[0:3]), tuple(vp[3:6]), tuple(vp[6:9]), float(meta["focal"]), (h, w))
    return meta


def write_sample(s: Sample, out_dir: Path, entry: ManifestEntry | None = None) -> ManifestEntry:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = entry or ManifestEntry(s.id, s.split, f"{s.id}.points.txt", f"{s.id}.clip.bin", f"{s.id}.meta.txt")
    write_points(out_dir / entry.points_path, s.points)
    write_clip(out_dir / entry.clip_path, s.clip)
    write_meta(out_dir / entry.meta_path, s)
    return entry


def read_sample(root: Path, entry: ManifestEntry) -> Sample:
    root = Path(root)
    meta = read_meta(root / entry.meta_path)
    return Sample(meta["id"], meta["category"], meta["affordance"], read_points(root / entry.points_path),
                  read_clip(root / entry.clip_path), meta["camera"], meta["split"])


def write_manifest(path: Path, entries: list[ManifestEntry]) -> None:
    lines = [f"{e.id},{e.split},{e.points_path},{e.clip_path},{e.meta_path}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> list[ManifestEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    out = []
    for i, line in enumerate(path.read_text().splitlines()):
        fields = line.split(",")
        if len(fields) != 5:
            raise FormatError(f"{path}: line {i + 1} has {len(fields)} fields, expected 5")
        if fields[1] not in SPLITS:
            raise FormatError(f"{path}: line {i + 1}: unknown split {fields[1]!r}")
        out.append(ManifestEntry(*fields))
    return out


def load_split(root: str | Path, split: str | None = None) -> list[Sample]:
    """Read every manifest sample (optionally one split) from a dataset directory."""
    root = Path(root)
    if split is not None and split not in SPLITS:
        raise DataConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    return [read_sample(root, e) for e in read_manifest(root) if split is None or e.split == split]
