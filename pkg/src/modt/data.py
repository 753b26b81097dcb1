"""Synthetic two-frame scenes with analytic ground-truth optical flow.

Each sample renders rectangles over a textured background, displaces every
object by its own integer velocity plus the camera's ego motion, and shifts
the background by the ego motion alone (with wrap-around). The flow field is
exact by construction, and the motion label is decided in world space: a
static object under ego motion still shows image-space flow but stays
"static". All displacements are whole pixels so the flow-warp identity holds
bit-exactly outside disocclusions.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .matching import GroundTruthObject
from .tensor import Tensor

TENSOR_MAGIC = b"MDTB"
TENSOR_VERSION = 1
MANIFEST_VERSION = 1


# object colors used when SceneSpec.palette > 0 (high-contrast against the
# mid-gray background)
PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
], dtype=np.float32)


class GenerationError(Exception):
    """Scene spec could not be satisfied within the retry budget."""


class DatasetFormatError(Exception):
    """On-disk tensor or manifest data is malformed."""


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 0.10  # fractions of width
    max_size: float = 0.25
    min_speed: int = 2  # px/frame for moving objects
    max_speed: int = 6
    static_fraction: float = 0.4
    ego_motion: int = 0  # max |dx|,|dy| px/frame; 0 disables
    background_seed: int = 7
    background_amplitude: float = 0.12  # texture contrast; 0 gives a flat background
    palette: int = 0  # draw object colors from a fixed palette of this size; 0 = continuous
    shared_background: bool = False  # one background texture for every sample
    seed: int = 0

    def __post_init__(self):
        if self.min_speed < 0 or self.max_speed < self.min_speed:
            raise ValueError(f"bad speed range [{self.min_speed}, {self.max_speed}]")
        if not 0.0 <= self.static_fraction <= 1.0:
            raise ValueError(f"static_fraction {self.static_fraction} outside [0, 1]")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError(f"bad object count range [{self.min_objects}, {self.max_objects}]")


@dataclass
class SamplePair:
    frame_t: Tensor  # 3 x H x W in [0, 1]
    frame_t1: Tensor  # 3 x H x W
    flow: Tensor  # 2 x H x W, (dx, dy) in pixels, frame t -> t+1
    objects: list  # GroundTruthObject, boxes on frame t+1
    ego: tuple = (0, 0)  # image-space camera shift in px


def _background(spec, seed):
    if spec.shared_background:
        rng = np.random.default_rng([spec.background_seed])
    else:
        rng = np.random.default_rng([spec.background_seed, seed])
    noise = rng.uniform(-1.0, 1.0, size=(3, spec.height, spec.width))
    # box-blur once so the texture has some spatial structure
    sm = sum(np.roll(np.roll(noise, dy, axis=1), dx, axis=2)
             for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    return (0.45 + spec.background_amplitude * sm).astype(np.float32)


def _rects_disjoint(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax + aw <= bx or bx + bw <= ax or ay + ah <= by or by + bh <= ay


def generate_sample(spec: SceneSpec, seed: int) -> SamplePair:
    """Render one deterministic two-frame scene for (spec, seed)."""
    rng = np.random.default_rng([spec.seed, seed])
    h, w = spec.height, spec.width
    if spec.ego_motion:
        ego = (int(rng.integers(-spec.ego_motion, spec.ego_motion + 1)),
               int(rng.integers(-spec.ego_motion, spec.ego_motion + 1)))
    else:
        ego = (0, 0)
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    placed = []  # (rect_t, rect_t1, velocity, color, label)
    for _ in range(n_obj):
        ok = False
        for _attempt in range(200):
            ow = int(round(rng.uniform(spec.min_size, spec.max_size) * w))
            oh = int(round(rng.uniform(spec.min_size, spec.max_size) * w))
            ow, oh = max(ow, 2), max(oh, 2)
            static = rng.uniform() < spec.static_fraction
            if static or spec.max_speed == 0:
                vx = vy = 0
            else:
                speed = int(rng.integers(max(spec.min_speed, 1), spec.max_speed + 1))
                vx = int(rng.integers(-speed, speed + 1))
                vy = int(np.sign(rng.uniform() - 0.5) or 1) * (speed - abs(vx))
                if vx == 0 and vy == 0:
                    vx = speed
            dx, dy = vx + ego[0], vy + ego[1]
            x0 = int(rng.integers(max(0, -dx), min(w - ow, w - ow - dx) + 1)) \
                if max(0, -dx) <= min(w - ow, w - ow - dx) else -1
            y0 = int(rng.integers(max(0, -dy), min(h - oh, h - oh - dy) + 1)) \
                if max(0, -dy) <= min(h - oh, h - oh - dy) else -1
            if x0 < 0 or y0 < 0:
                continue
            rect_t = (x0, y0, ow, oh)
            rect_t1 = (x0 + dx, y0 + dy, ow, oh)
            if all(_rects_disjoint(rect_t, p[0]) and _rects_disjoint(rect_t1, p[1])
                   for p in placed):
                if spec.palette:
                    k = min(spec.palette, len(PALETTE))
                    color = PALETTE[rng.integers(k)].copy()
                else:
                    color = rng.uniform(0.05, 1.0, size=3).astype(np.float32)
                label = "static" if (vx == 0 and vy == 0) else "moving"
                placed.append((rect_t, rect_t1, (vx, vy), color, label))
                ok = True
                break
        if not ok:
            raise GenerationError(
                f"could not place object {len(placed) + 1}/{n_obj} for seed {seed}")

    bg = _background(spec, seed)
    frame_t = bg.copy()
    frame_t1 = np.roll(bg, (ego[1], ego[0]), axis=(1, 2))
    flow = np.zeros((2, h, w), dtype=np.float32)
    flow[0] = ego[0]
    flow[1] = ego[1]

    objects = []
    for rect_t, rect_t1, (vx, vy), color, label in placed:
        x0, y0, ow, oh = rect_t
        frame_t[:, y0:y0 + oh, x0:x0 + ow] = color[:, None, None]
        flow[0, y0:y0 + oh, x0:x0 + ow] = vx + ego[0]
        flow[1, y0:y0 + oh, x0:x0 + ow] = vy + ego[1]
        x1, y1, _, _ = rect_t1
        frame_t1[:, y1:y1 + oh, x1:x1 + ow] = color[:, None, None]
        box = np.array([(x1 + ow / 2) / w, (y1 + oh / 2) / h, ow / w, oh / h],
                       dtype=np.float32).astype(np.float64)
        objects.append(GroundTruthObject(box, label))

    return SamplePair(
        frame_t=Tensor(frame_t.astype(np.float64)),
        frame_t1=Tensor(frame_t1.astype(np.float64)),
        flow=Tensor(flow.astype(np.float64)),
        objects=objects,
        ego=ego,
    )


def mirror_sample(sample: SamplePair, flip_h: bool = False,
                  flip_v: bool = False) -> SamplePair:
    """Mirror a sample horizontally and/or vertically.

    Frames and flow are flipped spatially; the mirrored flow component changes
    sign, box centers reflect about the image midline, and motion labels are
    unchanged. Useful as training-time augmentation: it multiplies positional
    coverage without touching held-out scenes.
    """
    axes = []
    if flip_v:
        axes.append(1)
    if flip_h:
        axes.append(2)
    if not axes:
        return sample
    axes = tuple(axes)

    def flip(a):
        return np.flip(a, axis=axes).copy()

    flow = flip(sample.flow.numpy())
    if flip_h:
        flow[0] = -flow[0]
    if flip_v:
        flow[1] = -flow[1]
    ego = (-sample.ego[0] if flip_h else sample.ego[0],
           -sample.ego[1] if flip_v else sample.ego[1])
    objects = []
    for o in sample.objects:
        cx, cy, w, h = o.box
        if flip_h:
            cx = 1.0 - cx
        if flip_v:
            cy = 1.0 - cy
        objects.append(GroundTruthObject(np.array([cx, cy, w, h]), o.label))
    return SamplePair(
        frame_t=Tensor(flip(sample.frame_t.numpy())),
        frame_t1=Tensor(flip(sample.frame_t1.numpy())),
        flow=Tensor(flow),
        objects=objects,
        ego=ego,
    )


def mirror_expand(samples) -> list:
    """Each sample plus its three mirror images (H, V, HV)."""
    return [mirror_sample(s, fh, fv)
            for s in samples for fh in (False, True) for fv in (False, True)]


def flow_warp_mismatches(sample: SamplePair) -> int:
    """Count pixels where pushing frame t through the flow fails to land on
    the same value in frame t+1, ignoring disoccluded destinations."""
    ft = sample.frame_t.numpy()
    ft1 = sample.frame_t1.numpy()
    flow = sample.flow.numpy()
    _, h, w = ft.shape
    covered = np.zeros((h, w), dtype=bool)
    for o in sample.objects:
        cx, cy, bw, bh = o.box
        x1 = int(round(cx * w - bw * w / 2))
        y1 = int(round(cy * h - bh * h / 2))
        covered[y1:y1 + int(round(bh * h)), x1:x1 + int(round(bw * w))] = True
    ys, xs = np.mgrid[0:h, 0:w]
    qx = (xs + flow[0].astype(np.int64)) % w
    qy = (ys + flow[1].astype(np.int64)) % h
    same = (ft1[:, qy, qx] == ft).all(axis=0)
    ok = same | covered[qy, qx]
    return int((~ok).sum())


# -------------------------------------------------------------------- format


def write_tensor_file(path, arr):
    """Binary tensor: magic MDTB, u8 version, u8 rank, u32le dims, f32le data."""
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BB", TENSOR_VERSION, arr32.ndim))
        f.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        f.write(arr32.tobytes())


def read_tensor_file(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TENSOR_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic at offset 0: {blob[:4]!r}")
    if len(blob) < 6:
        raise DatasetFormatError(f"{path}: truncated header at offset {len(blob)}")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != TENSOR_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at offset 4")
    need = 6 + 4 * rank
    if len(blob) < need:
        raise DatasetFormatError(f"{path}: truncated dims at offset {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    count = int(np.prod(dims)) if rank else 1
    if len(blob) != need + 4 * count:
        raise DatasetFormatError(
            f"{path}: payload ends at offset {len(blob)}, expected {need + 4 * count}")
    arr = np.frombuffer(blob, dtype="<f4", offset=need).reshape(dims)
    return arr.astype(np.float64)


def write_dataset(out_dir, samples, spec: SceneSpec):
    """Write manifest.json plus per-sample binary tensors into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        files = {"frame_t": f"{sid}_t0.bin", "frame_t1": f"{sid}_t1.bin",
                 "flow": f"{sid}_flow.bin"}
        write_tensor_file(os.path.join(out_dir, files["frame_t"]), s.frame_t.numpy())
        write_tensor_file(os.path.join(out_dir, files["frame_t1"]), s.frame_t1.numpy())
        write_tensor_file(os.path.join(out_dir, files["flow"]), s.flow.numpy())
        records.append({
            "id": sid,
            "files": files,
            "ego": list(s.ego),
            "objects": [{"cx": o.box[0], "cy": o.box[1], "w": o.box[2], "h": o.box[3],
                         "label": o.label} for o in s.objects],
        })
    manifest = {
        "format_version": MANIFEST_VERSION,
        "spec": asdict(spec),
        "samples": records,
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def read_dataset(in_dir):
    """Load a dataset directory; returns (samples, SceneSpec)."""
    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format_version "
                                 f"{manifest.get('format_version')}")
    spec = SceneSpec(**manifest["spec"])
    samples = []
    for rec in manifest["samples"]:
        files = rec["files"]
        objs = [GroundTruthObject(np.array([o["cx"], o["cy"], o["w"], o["h"]]), o["label"])
                for o in rec["objects"]]
        flow = (Tensor(read_tensor_file(os.path.join(in_dir, files["flow"])))
                if "flow" in files else None)
        samples.append(SamplePair(
            frame_t=Tensor(read_tensor_file(os.path.join(in_dir, files["frame_t"]))),
            frame_t1=Tensor(read_tensor_file(os.path.join(in_dir, files["frame_t1"]))),
            flow=flow,
            objects=objs,
            ego=tuple(rec.get("ego", (0, 0))),
        ))
    return samples, spec
