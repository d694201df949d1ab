"""Pose datasets: native adapters, CSV manifests, subject splits, synthetic renders.

Manifest CSV columns: ``relative_path,yaw,pitch,roll,subject_id`` (degrees,
UTF-8, header row; ``roll`` and ``subject_id`` may be empty).  Relative paths
resolve against the manifest's directory unless a root is given.
"""

from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from .config import DataConfig, DataSpec, SyntheticSpec, resolve_data_root
from .errors import DatasetLoadError, InvalidInputError
from .geometry import EulerPose

MANIFEST_COLUMNS = ("relative_path", "yaw", "pitch", "roll", "subject_id")
KINDS = ("w300lp", "aflw2000", "biwi", "ethxgaze", "manifest", "synthetic")


@dataclass(frozen=True)
class PoseSample:
    pose: EulerPose
    image: np.ndarray | None = field(default=None, repr=False, compare=False)
    path: str | None = None
    h5_index: int | None = None
    subject_id: str | None = None
    source: str = ""
    crop: tuple[int, int, int, int] | None = None

    def load(self) -> np.ndarray:
        """RGB uint8 H x W x 3."""
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DatasetLoadError("sample has neither pixels nor a path")
        if self.h5_index is not None:
            import h5py

            with h5py.File(self.path, "r") as f:
                img = np.asarray(f["face_patch"][self.h5_index])[..., ::-1]
        else:
            img = cv2.imread(self.path, cv2.IMREAD_COLOR)
            if img is None:
                raise DatasetLoadError("cannot decode image", self.path)
            img = img[..., ::-1]
        if self.crop is not None:
            r0, r1, c0, c1 = self.crop
            img = img[max(r0, 0):r1, max(c0, 0):c1]
        return np.ascontiguousarray(img)


@dataclass(frozen=True)
class DatasetHandle:
    samples: tuple[PoseSample, ...]
    name: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> PoseSample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def angle_set(self) -> tuple[str, ...]:
        return self.samples[0].pose.angle_names if self.samples else ()

    @property
    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples if s.subject_id is not None})

    def subset(self, indices: Iterable[int], name: str | None = None) -> "DatasetHandle":
        return DatasetHandle(tuple(self.samples[i] for i in indices), name or self.name)

    def order(self, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).permutation(len(self.samples))

    def labels(self) -> dict[str, np.ndarray]:
        return {
            a: np.array([getattr(s.pose, a) for s in self.samples], dtype=np.float64)
            for a in self.angle_set
        }


# -- operations -----------------------------------------------------------------------------


def filter_extreme(handle: DatasetHandle, threshold_deg: float = 99.0) -> DatasetHandle:
    """Drop samples with any angle beyond ``threshold_deg`` in absolute value."""
    keep = [
        s for s in handle.samples
        if all(abs(v) <= threshold_deg for _, v in s.pose.items())
    ]
    return DatasetHandle(tuple(keep), handle.name)


def _same_subject(a: str, b: str) -> bool:
    return a == b or (a.isdigit() and b.isdigit() and int(a) == int(b))


def split_by_subject(
    handle: DatasetHandle, held_out: Sequence[str | int]
) -> tuple[DatasetHandle, DatasetHandle]:
    known = handle.subjects
    held = []
    for sid in map(str, held_out):
        match = [k for k in known if _same_subject(k, sid)]
        if not match:
            raise InvalidInputError(f"subject {sid!r} is not in {handle.name or 'the dataset'}")
        held.extend(match)
    held = set(held)
    val = tuple(s for s in handle.samples if s.subject_id in held)
    train = tuple(s for s in handle.samples if s.subject_id not in held)
    if not train:
        warnings.warn("every subject was held out; the training split is empty", stacklevel=2)
    return DatasetHandle(train, handle.name), DatasetHandle(val, handle.name)


def take_subjects(handle: DatasetHandle, k: int) -> DatasetHandle:
    """Keep the first ``k`` subjects in ascending lexicographic id order."""
    if k <= 0:
        raise InvalidInputError(f"k must be positive, got {k}")
    subjects = handle.subjects
    if k > len(subjects):
        raise InvalidInputError(f"asked for {k} subjects, dataset has {len(subjects)}")
    keep = set(subjects[:k])
    return DatasetHandle(tuple(s for s in handle.samples if s.subject_id in keep), handle.name)


# -- manifests ------------------------------------------------------------------------------


def read_manifest(path, root=None) -> DatasetHandle:
    path = Path(path)
    if not path.is_file():
        raise DatasetLoadError("manifest not found", path)
    base = Path(root) if root else path.parent
    samples = []
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"relative_path", "yaw", "pitch"} <= set(reader.fieldnames):
            raise DatasetLoadError(f"manifest header must contain {','.join(MANIFEST_COLUMNS)}", path)
        for line, row in enumerate(reader, start=2):
            try:
                roll = row.get("roll") or None
                pose = EulerPose(float(row["yaw"]), float(row["pitch"]), None if roll is None else float(roll))
            except (TypeError, ValueError) as err:
                raise DatasetLoadError(f"bad pose on line {line} ({err})", path) from None
            samples.append(
                PoseSample(
                    pose=pose,
                    path=str(base / row["relative_path"]),
                    subject_id=row.get("subject_id") or None,
                    source="manifest",
                )
            )
    if not samples:
        raise DatasetLoadError("manifest has no rows", path)
    return DatasetHandle(tuple(samples), path.stem)


def write_manifest(handle: DatasetHandle, path, image_dir: str | None = "images", root=None) -> Path:
    """Write a manifest; in-memory images are saved as PNG under ``image_dir``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(root) if root else path.parent
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for i, s in enumerate(handle.samples):
            if s.image is not None or s.path is None or s.h5_index is not None or s.crop is not None:
                rel = Path(image_dir or ".") / f"{i:06d}.png"
                (base / rel).parent.mkdir(parents=True, exist_ok=True)
                cv2.imwrite(str(base / rel), s.load()[..., ::-1])
            elif _inside(s.path, base):
                rel = Path(s.path).resolve().relative_to(base.resolve())
            else:
                rel = Path(s.path).resolve()
            p = s.pose
            writer.writerow([
                rel.as_posix(),
                f"{p.yaw:.6f}",
                f"{p.pitch:.6f}",
                "" if p.roll is None else f"{p.roll:.6f}",
                s.subject_id or "",
            ])
    return path


def _inside(path, base: Path) -> bool:
    try:
        Path(path).resolve().relative_to(base.resolve())
        return True
    except ValueError:
        return False


# -- native adapters ------------------------------------------------------------------------


def _require_dir(root) -> Path:
    if root is None:
        raise DatasetLoadError("no dataset root given (use --data-root or HMTL_DATA_ROOT)")
    root = Path(root)
    if not root.is_dir():
        raise DatasetLoadError("dataset root does not exist", root)
    return root


def _collect(items, parse, errors: list | None):
    out = []
    for item in items:
        try:
            out.append(parse(item))
        except DatasetLoadError as err:
            if errors is None:
                raise
            errors.append((str(err.path or item), str(err)))
    return out


def _mat_pose(mat_path: Path) -> EulerPose:
    from scipy.io import loadmat

    try:
        params = np.asarray(loadmat(str(mat_path))["Pose_Para"]).reshape(-1)[:3]
    except Exception as err:  # scipy raises several unrelated types for bad files
        raise DatasetLoadError(f"cannot read Pose_Para ({err})", mat_path) from None
    pitch, yaw, roll = np.degrees(params.astype(np.float64))
    return EulerPose(float(yaw), float(pitch), float(roll))


def load_mat_dataset(root, source: str, errors: list | None = None) -> DatasetHandle:
    """300W-LP / AFLW2000 layout: ``<name>.jpg`` next to ``<name>.mat`` (radians, pitch-yaw-roll)."""
    root = _require_dir(root)
    mats = sorted(p for p in root.rglob("*.mat") if "landmarks" not in p.parts)

    def parse(mat: Path) -> PoseSample:
        img = mat.with_suffix(".jpg")
        if not img.is_file():
            raise DatasetLoadError("image missing for annotation", mat)
        subject = mat.stem.rsplit("_", 1)[0] if source == "w300lp" else None
        return PoseSample(pose=_mat_pose(mat), path=str(img), subject_id=subject, source=source)

    return DatasetHandle(tuple(_collect(mats, parse, errors)), source)


def biwi_rotation_to_euler(rotation: np.ndarray) -> EulerPose:
    """BIWI stores a row-major head rotation; degrees out."""
    r = np.asarray(rotation, dtype=np.float64).T
    roll = -math.degrees(math.atan2(r[1, 0], r[0, 0]))
    yaw = -math.degrees(math.atan2(-r[2, 0], math.hypot(r[2, 1], r[2, 2])))
    pitch = math.degrees(math.atan2(r[2, 1], r[2, 2]))
    return EulerPose(yaw, pitch, roll)


def _read_biwi_pose(path: Path) -> tuple[EulerPose, np.ndarray]:
    try:
        rows = [[float(x) for x in line.split()] for line in path.read_text().splitlines() if line.strip()]
        rotation, centre = np.array(rows[:3]), np.array(rows[3])
        if rotation.shape != (3, 3) or centre.shape != (3,):
            raise ValueError("expected 3x3 rotation and 3-vector")
    except (OSError, ValueError, IndexError) as err:
        raise DatasetLoadError(f"bad pose file ({err})", path) from None
    return biwi_rotation_to_euler(rotation), centre


def _biwi_crop(centre: np.ndarray, cal: Path, margin: float) -> tuple[int, int, int, int] | None:
    if not cal.is_file():
        return None
    k = np.array([[float(x) for x in line.split()] for line in cal.read_text().splitlines()[:3]])
    x, y, z = centre
    u, v = k[0, 0] * x / z + k[0, 2], k[1, 1] * y / z + k[1, 2]
    half = (1 + margin) * k[0, 0] * 100.0 / z  # ~200 mm head
    return int(v - half), int(v + half), int(u - half), int(u + half)


def load_biwi(root, crop_margin: float | None = None, errors: list | None = None) -> DatasetHandle:
    """``<root>/<subject>/frame_XXXXX_rgb.png`` with ``frame_XXXXX_pose.txt``; RGB frames only."""
    root = _require_dir(root)
    if (root / "hpdb").is_dir():
        root = root / "hpdb"
    poses = sorted(root.glob("*/frame_*_pose.txt"))

    def parse(pose_path: Path) -> PoseSample:
        img = pose_path.with_name(pose_path.name.replace("_pose.txt", "_rgb.png"))
        if not img.is_file():
            raise DatasetLoadError("RGB frame missing for pose file", pose_path)
        pose, centre = _read_biwi_pose(pose_path)
        crop = None if crop_margin is None else _biwi_crop(centre, pose_path.parent / "rgb.cal", crop_margin)
        return PoseSample(pose=pose, path=str(img), subject_id=pose_path.parent.name, source="biwi", crop=crop)

    return DatasetHandle(tuple(_collect(poses, parse, errors)), "biwi")


def load_ethxgaze(root, errors: list | None = None) -> DatasetHandle:
    """``subjectNNNN.h5`` files with ``face_patch`` and ``face_head_pose`` (pitch, yaw radians)."""
    import h5py

    root = _require_dir(root)
    files = sorted(root.rglob("subject*.h5"))
    samples = []
    for path in files:
        try:
            with h5py.File(path, "r") as f:
                head = np.degrees(np.asarray(f["face_head_pose"], dtype=np.float64))
                count = f["face_patch"].shape[0]
        except (OSError, KeyError) as err:
            e = DatasetLoadError(f"cannot read ETH-XGaze file ({err})", path)
            if errors is None:
                raise e from None
            errors.append((str(path), str(e)))
            continue
        sid = re.sub(r"\D", "", path.stem).zfill(4)
        for i in range(count):
            pitch, yaw = head[i, 0], head[i, 1]
            samples.append(
                PoseSample(EulerPose(float(yaw), float(pitch)), path=str(path), h5_index=i, subject_id=sid, source="ethxgaze")
            )
    return DatasetHandle(tuple(samples), "ethxgaze")


def load_dataset(kind: str, source=None, errors: list | None = None, **options) -> DatasetHandle:
    """Load ``kind`` from a root directory, manifest path or ``SyntheticSpec``.

    Every native adapter also accepts a directory containing ``manifest.csv``.
    """
    if kind not in KINDS:
        raise InvalidInputError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if kind == "synthetic":
        spec = source if isinstance(source, SyntheticSpec) else SyntheticSpec(**(source or {}))
        return generate_synthetic(spec)
    if kind == "manifest":
        handle = read_manifest(source, options.get("root"))
    else:
        root = _require_dir(source)
        if (root / "manifest.csv").is_file():
            handle = read_manifest(root / "manifest.csv")
        elif kind in ("w300lp", "aflw2000"):
            handle = load_mat_dataset(root, kind, errors)
        elif kind == "biwi":
            handle = load_biwi(root, options.get("crop_margin"), errors)
        else:
            handle = load_ethxgaze(root, errors)
        handle = replace(handle, name=kind)
    if not len(handle) and errors is None:
        raise DatasetLoadError(f"no {kind} samples found", source)
    return handle


def load_from_spec(spec: DataSpec) -> DatasetHandle:
    if spec.kind == "synthetic":
        handle = generate_synthetic(spec.synthetic or SyntheticSpec())
    elif spec.kind == "manifest":
        handle = load_dataset("manifest", spec.manifest, root=spec.root)
    else:
        handle = load_dataset(spec.kind, spec.root, crop_margin=spec.crop_margin)
    if spec.filter_extreme:
        handle = filter_extreme(handle, spec.extreme_threshold)
    if spec.limit is not None:
        handle = handle.subset(range(min(spec.limit, len(handle))))
    return handle


# -- synthetic marker -----------------------------------------------------------------------

# half extents of the cuboid: wider than deep, taller than wide
_HALF = np.array([0.55, 0.7, 0.4])
_FACES = (  # (axis, sign) for the 6 faces; order fixes texture identity
    (2, 1), (2, -1), (0, 1), (0, -1), (1, 1), (1, -1),
)
_TEXTURE = 64


def rotation_matrix(pose: EulerPose) -> np.ndarray:
    """Head-to-camera rotation: roll about z, then pitch about x, then yaw about y."""
    y, p, r = (math.radians(v) for v in (pose.yaw, pose.pitch, pose.roll or 0.0))
    ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
    rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
    rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    return ry @ rx @ rz


def _face_corners(axis: int, sign: int) -> np.ndarray:
    """Corners in texture order (top-left, top-right, bottom-right, bottom-left) seen from outside."""
    u_axis, v_axis = {0: (2, 1), 1: (0, 2), 2: (0, 1)}[axis]
    normal = np.zeros(3)
    normal[axis] = sign
    u = np.zeros(3)
    u[u_axis] = 1.0
    v = np.zeros(3)
    v[v_axis] = 1.0
    if np.dot(np.cross(u, v), normal) < 0:
        u = -u
    centre = normal * _HALF
    du, dv = u * _HALF, v * _HALF
    return np.array([centre - du + dv, centre + du + dv, centre + du - dv, centre - du - dv])


def face_textures(subject_seed: int) -> list[np.ndarray]:
    """Six asymmetric textures; the pattern identifies the face and its orientation."""
    rng = np.random.default_rng(subject_seed)
    hues = (np.arange(6) * 30 + rng.integers(0, 12)) % 180
    textures = []
    for f, hue in enumerate(hues):
        hsv = np.zeros((_TEXTURE, _TEXTURE, 3), np.uint8)
        hsv[..., 0] = hue
        hsv[..., 1] = 170 + rng.integers(0, 40)
        ramp = np.linspace(110, 230, _TEXTURE, dtype=np.float32)
        hsv[..., 2] = (ramp[None, :] * 0.6 + ramp[:, None] * 0.4).astype(np.uint8)
        tex = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
        # an "L" in the top-left corner and f+1 bars along the bottom edge
        cv2.rectangle(tex, (6, 6), (14, 34), (20, 20, 20), -1)
        cv2.rectangle(tex, (6, 26), (28, 34), (20, 20, 20), -1)
        for b in range(f + 1):
            x0 = 8 + b * 8
            cv2.rectangle(tex, (x0, 48), (x0 + 4, 58), (245, 245, 245), -1)
        cv2.circle(tex, (50, 16), 6, (250, 250, 60), -1)
        textures.append(tex)
    return textures


def _background(size: int) -> np.ndarray:
    ramp = np.linspace(40, 90, size)
    bg = np.empty((size, size, 3), np.uint8)
    bg[..., 0] = ramp[:, None]
    bg[..., 1] = 60
    bg[..., 2] = ramp[None, :]
    return bg


def render_marker(pose: EulerPose, size: int = 224, subject_seed: int = 0) -> np.ndarray:
    """Orthographic render of the textured cuboid at ``pose``; deterministic."""
    canvas = _background(size).copy()
    rot = rotation_matrix(pose)
    scale = size * 0.36
    textures = face_textures(subject_seed)
    src = np.float32([[0, 0], [_TEXTURE - 1, 0], [_TEXTURE - 1, _TEXTURE - 1], [0, _TEXTURE - 1]])
    for tex, (axis, sign) in zip(textures, _FACES):
        normal = np.zeros(3)
        normal[axis] = sign
        if (rot @ normal)[2] <= 1e-6:
            continue  # back face; camera looks down -z from +z
        pts = _face_corners(axis, sign) @ rot.T
        dst = np.float32([[size / 2 + scale * x, size / 2 - scale * y] for x, y, _ in pts])
        h = cv2.getPerspectiveTransform(src, dst)
        warped = cv2.warpPerspective(tex, h, (size, size), flags=cv2.INTER_LINEAR)
        mask = np.zeros((size, size), np.uint8)
        cv2.fillConvexPoly(mask, np.round(dst).astype(np.int32), 1)
        canvas[mask.astype(bool)] = warped[mask.astype(bool)]
    return canvas


def generate_synthetic(config: SyntheticSpec) -> DatasetHandle:
    ranges = [config.yaw_range, config.pitch_range, config.roll_range]
    for name, (lo, hi) in zip(("yaw", "pitch", "roll"), ranges):
        if lo > hi:
            raise InvalidInputError(f"{name} range [{lo}, {hi}] is empty")
    rng = np.random.default_rng(config.seed)
    samples = []
    for i in range(config.count):
        yaw, pitch, roll = (float(rng.uniform(lo, hi)) if lo < hi else float(lo) for lo, hi in ranges)
        pose = EulerPose(yaw, pitch, roll if config.with_roll else None)
        subject = i % config.subjects
        image = render_marker(
            EulerPose(yaw, pitch, roll if config.with_roll else 0.0),
            config.image_size,
            subject_seed=config.seed * 1000 + subject,
        )
        samples.append(PoseSample(pose=pose, image=image, subject_id=f"s{subject:03d}", source="synthetic"))
    return DatasetHandle(tuple(samples), "synthetic")


# -- assembly from config -------------------------------------------------------------------


def prepare_data(data: DataConfig, data_root: str | None = None) -> tuple[DatasetHandle, DatasetHandle | None]:
    """Train and validation splits: held-out subjects first, then the subject cap."""
    train = load_from_spec(resolve_data_root(data.train, data_root))
    val = None
    if data.held_out_subjects:
        train, val = split_by_subject(train, data.held_out_subjects)
    if data.take_subjects:
        train = take_subjects(train, data.take_subjects)
    if data.val is not None:
        val = load_from_spec(resolve_data_root(data.val, data_root))
    return train, val
