"""Synthetic moving-shapes clips with exact ground truth, and the on-disk
dataset format: P6 PPM frames, run-length-encoded masks, and per-clip text
manifests.

Each clip renders 2-4 coloured shapes moving on straight lines; the query
names exactly one of them by colour, shape and motion direction, and every
distractor shares at most one of those attributes with the target, so the
target is identifiable from appearance alone in any single frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..losses import GroundTruth
from .config import Config


class GenerationError(RuntimeError):
    pass


SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (220, 50, 50),
    "green": (60, 200, 70),
    "blue": (60, 100, 230),
    "yellow": (230, 220, 60),
    "magenta": (220, 70, 210),
    "cyan": (70, 210, 220),
}
# (dy, dx) unit motion per frame; screen rows grow downward
DIRECTIONS = {
    "left": (0.0, -1.0),
    "right": (0.0, 1.0),
    "up": (-1.0, 0.0),
    "down": (1.0, 0.0),
    "still": (0.0, 0.0),
}
BACKGROUND = (18, 18, 18)
QUERY_TEMPLATE = "the {color} {shape} moving {direction}"


@dataclass
class ObjectSpec:
    shape: str
    color: str
    direction: str
    radius: float
    speed: float
    start: tuple[float, float]  # (cy, cx) at frame 0

    def attributes(self) -> tuple[str, str, str]:
        return (self.color, self.shape, self.direction)

    def center(self, t: int) -> tuple[float, float]:
        dy, dx = DIRECTIONS[self.direction]
        return (self.start[0] + dy * self.speed * t, self.start[1] + dx * self.speed * t)


@dataclass
class ClipSample:
    clip_id: str
    frames: np.ndarray  # (T, H, W, 3) uint8
    tokens: list
    gt: GroundTruth  # masks/flags of the single referred object
    target: ObjectSpec | None = None  # generation metadata; absent after reload


def rasterize(shape: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    """Exact pixel-center rasterisation of one shape, clipped to the frame."""
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    if shape == "circle":
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(ys - cy) <= r) & (np.abs(xs - cx) <= r)
    elif shape == "triangle":
        # upward triangle: apex (cy - r, cx), base corners (cy + r, cx +- r)
        dy = ys - (cy - r)
        mask = (dy >= 0) & (dy <= 2 * r) & (np.abs(xs - cx) <= dy / 2.0)
    else:
        raise GenerationError(f"unknown shape {shape!r}")
    return mask.astype(np.uint8)


def _shares_at_most_one(a: tuple, b: tuple) -> bool:
    return sum(x == y for x, y in zip(a, b)) <= 1


def _sample_objects(rng: np.random.Generator, cfg: Config) -> tuple[list, int]:
    d = cfg.data
    n = int(rng.integers(d.min_objects, d.max_objects + 1))
    h, w = cfg.dims.h, cfg.dims.w
    colors = list(COLORS)
    dirs = list(DIRECTIONS)

    def sample_attrs():
        return (colors[rng.integers(len(colors))],
                SHAPES[rng.integers(len(SHAPES))],
                dirs[rng.integers(len(dirs))])

    target_attrs = sample_attrs()
    attrs = [target_attrs]
    for _ in range(n - 1):
        for _ in range(200):
            cand = sample_attrs()
            if cand not in attrs and _shares_at_most_one(cand, target_attrs):
                attrs.append(cand)
                break
        else:
            raise GenerationError("could not sample distinct distractor attributes")

    objects = []
    for attempt in range(50):  # retry the whole layout if packing dead-ends
        objects = []
        ok = True
        for color, shape, direction in attrs:
            r = rng.uniform(d.min_radius, d.max_radius)
            speed = 0.0 if direction == "still" else rng.uniform(d.min_speed, d.max_speed)
            placed = False
            for _ in range(200):
                cy = rng.uniform(r + 1, h - r - 1)
                cx = rng.uniform(r + 1, w - r - 1)
                if all(abs(cy - o.start[0]) > r + o.radius + 1
                       or abs(cx - o.start[1]) > r + o.radius + 1 for o in objects):
                    objects.append(ObjectSpec(shape=shape, color=color,
                                              direction=direction, radius=r,
                                              speed=speed, start=(cy, cx)))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            break
    else:
        raise GenerationError("could not place objects without initial overlap")

    target_index = 0  # attrs[0] is the target by construction
    # shuffle draw order so the target is not always on top
    order = rng.permutation(len(objects))
    objects = [objects[i] for i in order]
    target_index = int(np.where(order == 0)[0][0])
    return objects, target_index


def render_clip(objects: list, target_index: int, cfg: Config) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render frames plus the target's occlusion-aware masks and flags."""
    t, h, w = cfg.dims.t, cfg.dims.h, cfg.dims.w
    frames = np.empty((t, h, w, 3), dtype=np.uint8)
    masks = np.zeros((1, t, h, w), dtype=np.uint8)
    flags = np.zeros((1, t))
    for ti in range(t):
        owner = np.full((h, w), -1, dtype=np.int64)
        for oi, obj in enumerate(objects):  # later objects draw on top
            cy, cx = obj.center(ti)
            m = rasterize(obj.shape, cy, cx, obj.radius, h, w)
            owner[m > 0] = oi
        frame = np.empty((h, w, 3), dtype=np.uint8)
        frame[...] = BACKGROUND
        for oi, obj in enumerate(objects):
            frame[owner == oi] = COLORS[obj.color]
        frames[ti] = frame
        visible = owner == target_index
        masks[0, ti] = visible.astype(np.uint8)
        flags[0, ti] = 1.0 if visible.any() else 0.0
    return frames, masks, flags


def generate_clip(rng: np.random.Generator, cfg: Config, clip_id: str) -> ClipSample:
    objects, target_index = _sample_objects(rng, cfg)
    target = objects[target_index]
    frames, masks, flags = render_clip(objects, target_index, cfg)
    query = QUERY_TEMPLATE.format(color=target.color, shape=target.shape,
                                  direction=target.direction)
    return ClipSample(
        clip_id=clip_id,
        frames=frames,
        tokens=query.split(),
        gt=GroundTruth(masks=masks, flags=flags),
        target=target,
    )


def generate_dataset(cfg: Config, seed: int, count: int, name_prefix: str = "clip") -> list:
    """Deterministic dataset: clip i uses an RNG stream keyed by (seed, i)."""
    clips = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, i))))
        clips.append(generate_clip(rng, cfg, f"{name_prefix}_{i:05d}"))
    return clips


# -- horizontal flip augmentation ------------------------------------------------


def flip_clip(frames: np.ndarray, gt: GroundTruth, tokens: list) -> tuple[np.ndarray, GroundTruth, list]:
    """Mirror frames and masks and swap direction words left<->right."""
    swapped = [{"left": "right", "right": "left"}.get(tok, tok) for tok in tokens]
    return (np.ascontiguousarray(frames[:, :, ::-1, :]),
            GroundTruth(masks=np.ascontiguousarray(gt.masks[..., ::-1]),
                        flags=gt.flags.copy()),
            swapped)


# -- PPM frames -------------------------------------------------------------------


def write_ppm(path, frame: np.ndarray) -> None:
    h, w, _ = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(frame.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise GenerationError(f"{path}: not a P6 pixmap")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise GenerationError(f"{path}: unsupported maxval {maxval}")
        data = fh.read(h * w * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# -- run-length-encoded masks --------------------------------------------------------


def mask_to_rle(mask: np.ndarray) -> str:
    """Row-major runs of ones: text with height, width, starts[], lengths[]."""
    h, w = mask.shape
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    padded = np.concatenate([[0], flat, [0]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    lengths = edges[1::2] - starts
    lines = [f"height {h}", f"width {w}",
             "starts " + " ".join(str(int(s)) for s in starts),
             "lengths " + " ".join(str(int(l)) for l in lengths)]
    return "\n".join(lines) + "\n"


def rle_to_mask(text: str) -> np.ndarray:
    fields = {}
    for line in text.strip().splitlines():
        parts = line.split()
        fields[parts[0]] = parts[1:]
    h, w = int(fields["height"][0]), int(fields["width"][0])
    flat = np.zeros(h * w, dtype=np.uint8)
    for s, l in zip(fields.get("starts", []), fields.get("lengths", [])):
        flat[int(s):int(s) + int(l)] = 1
    return flat.reshape(h, w)


# -- dataset directories ----------------------------------------------------------------


def save_dataset(clips: list, out_dir, cfg: Config, seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "dataset.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"count {len(clips)}\nseed {seed}\n"
                 f"frame_h {cfg.dims.h}\nframe_w {cfg.dims.w}\nframes {cfg.dims.t}\n")
    for clip in clips:
        cdir = os.path.join(out_dir, clip.clip_id)
        os.makedirs(cdir, exist_ok=True)
        n, t = clip.gt.masks.shape[:2]
        with open(os.path.join(cdir, "clip.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"clip_id {clip.clip_id}\n")
            fh.write(f"query {' '.join(clip.tokens)}\n")
            fh.write(f"n_objects {n}\n")
            for ni in range(n):
                row = " ".join(str(int(v)) for v in clip.gt.flags[ni])
                fh.write(f"flags_obj{ni:02d} {row}\n")
        for ti in range(t):
            write_ppm(os.path.join(cdir, f"frame_{ti:03d}.ppm"), clip.frames[ti])
            for ni in range(n):
                with open(os.path.join(cdir, f"mask_obj{ni:02d}_frame_{ti:03d}.rle"),
                          "w", encoding="utf-8") as fh:
                    fh.write(mask_to_rle(clip.gt.masks[ni, ti]))


def load_dataset(data_dir) -> list:
    with open(os.path.join(data_dir, "dataset.txt"), "r", encoding="utf-8") as fh:
        meta = dict(line.split(None, 1) for line in fh.read().strip().splitlines())
    t = int(meta["frames"])
    clips = []
    names = sorted(d for d in os.listdir(data_dir)
                   if os.path.isdir(os.path.join(data_dir, d)))
    for name in names:
        cdir = os.path.join(data_dir, name)
        info = {}
        with open(os.path.join(cdir, "clip.txt"), "r", encoding="utf-8") as fh:
            for line in fh.read().strip().splitlines():
                key, _, rest = line.partition(" ")
                info[key] = rest
        n = int(info["n_objects"])
        frames = np.stack([read_ppm(os.path.join(cdir, f"frame_{ti:03d}.ppm"))
                           for ti in range(t)])
        masks = np.zeros((n, t) + frames.shape[1:3], dtype=np.uint8)
        flags = np.zeros((n, t))
        for ni in range(n):
            flags[ni] = [float(v) for v in info[f"flags_obj{ni:02d}"].split()]
            for ti in range(t):
                with open(os.path.join(cdir, f"mask_obj{ni:02d}_frame_{ti:03d}.rle"),
                          "r", encoding="utf-8") as fh:
                    masks[ni, ti] = rle_to_mask(fh.read())
        clips.append(ClipSample(
            clip_id=info["clip_id"],
            frames=frames,
            tokens=info["query"].split(),
            gt=GroundTruth(masks=masks, flags=flags),
            target=None,
        ))
    return clips
