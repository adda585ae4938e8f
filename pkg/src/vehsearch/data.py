"""Track files, box rasterization, augmentation and the synthetic scene generator."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .text import AttributeLexicon

log = logging.getLogger(__name__)


class TrackFormatError(ValueError):
    pass


@dataclass
class Track:
    track_id: str
    frames: list[str]
    boxes: list[list[int]]  # [x, y, w, h] per frame, pixels
    nl: list[str]

    def validate(self, frame_size: tuple[int, int] | None = None):
        if len(self.nl) != 3:
            raise TrackFormatError(f"track {self.track_id}: expected 3 descriptions, got {len(self.nl)}")
        if not self.frames or len(self.frames) != len(self.boxes):
            raise TrackFormatError(
                f"track {self.track_id}: {len(self.frames)} frames but {len(self.boxes)} boxes")
        for i, box in enumerate(self.boxes):
            if len(box) != 4:
                raise TrackFormatError(f"track {self.track_id}, frame {i}: box needs 4 numbers")
            x, y, w, h = box
            bad = w <= 0 or h <= 0 or x < 0 or y < 0
            if frame_size is not None:
                fw, fh = frame_size
                bad = bad or x + w > fw or y + h > fh
            if bad:
                raise TrackFormatError(f"track {self.track_id}, frame {i}: box {box} out of bounds")


def load_tracks(path: str | Path, frame_size: tuple[int, int] | None = None) -> list[Track]:
    """Parse and validate a tracks file (track_id -> {frames, boxes, nl}).

    ``frame_size`` is (width, height); when given every box must lie inside it.
    """
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        offset = len(text[: err.pos].encode("utf-8"))
        raise TrackFormatError(f"{path}: malformed JSON at byte {offset}: {err.msg}") from None
    if not isinstance(obj, dict):
        raise TrackFormatError(f"{path}: top level must be an object of tracks")
    tracks = []
    for track_id, entry in obj.items():
        try:
            track = Track(track_id, list(entry["frames"]), [list(b) for b in entry["boxes"]], list(entry["nl"]))
        except (KeyError, TypeError) as err:
            raise TrackFormatError(f"track {track_id}: missing or malformed field {err}") from None
        track.validate(frame_size)
        tracks.append(track)
    return tracks


def dumps_tracks(tracks: Iterable[Track]) -> str:
    obj = {t.track_id: {"frames": t.frames, "boxes": t.boxes, "nl": t.nl} for t in tracks}
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def save_tracks(tracks: Iterable[Track], path: str | Path):
    Path(path).write_text(dumps_tracks(tracks), encoding="utf-8")


# --------------------------------------------------------------------------
# rasterization


def render_box_mask(box: Sequence[float], image_size: int, feature_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Box indicator at image resolution (H, W) and at feature resolution (1, h, w).

    A feature cell is active when its center falls inside the scaled box;
    if no center does, the cell containing the box center is used.
    """
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {list(box)}")
    centers = np.arange(image_size) + 0.5
    inside_x = (centers >= x) & (centers < x + w)
    inside_y = (centers >= y) & (centers < y + h)
    g = (inside_y[:, None] & inside_x[None, :]).astype(np.float32)

    stride = image_size / feature_size
    cell_centers = (np.arange(feature_size) + 0.5) * stride
    cx = (cell_centers >= x) & (cell_centers < x + w)
    cy = (cell_centers >= y) & (cell_centers < y + h)
    b = (cy[:, None] & cx[None, :]).astype(np.float32)
    if not b.any():
        j = min(int((x + w / 2) // stride), feature_size - 1)
        i = min(int((y + h / 2) // stride), feature_size - 1)
        b[i, j] = 1.0
    return g, b[None]


# --------------------------------------------------------------------------
# image preprocessing


def resize_image(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a (3, H, W) float image to (3, size, size) or (3, h, w)."""
    h, w = (size, size) if isinstance(size, int) else size
    if image.shape[1:] == (h, w):
        return image.astype(np.float32, copy=False)
    chans = [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
             for ch in image]
    return np.stack(chans).astype(np.float32)


def translate(image: np.ndarray, box: Sequence[float], dx: int, dy: int) -> tuple[np.ndarray, list[float]]:
    """Shift image content by (dx, dy) pixels with zero fill; the box moves with it and is clipped."""
    _, h, w = image.shape
    out = np.zeros_like(image)
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    out[:, dst_y, dst_x] = image[:, src_y, src_x]
    x, y, bw, bh = box
    x0, y0 = max(0.0, x + dx), max(0.0, y + dy)
    x1, y1 = min(float(w), x + dx + bw), min(float(h), y + dy + bh)
    return out, [x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0)]


def preprocess(image: np.ndarray, box: Sequence[float], training: bool, image_size: int,
               rng: np.random.Generator | None = None, max_shift: float = 0.1,
               attempts: int = 5) -> tuple[np.ndarray, list[float], tuple[int, int]]:
    """Resize to ``image_size`` and, in training, apply a random joint translation.

    Returns the image, the box, and the (dx, dy) offset used so companion
    frames can be shifted identically.
    """
    _, h, w = image.shape
    sx, sy = image_size / w, image_size / h
    box = [box[0] * sx, box[1] * sy, box[2] * sx, box[3] * sy]
    image = resize_image(image, image_size)
    if not training:
        return image, box, (0, 0)
    rng = rng or np.random.default_rng()
    limit = int(max_shift * image_size)
    area = box[2] * box[3]
    for _ in range(attempts):
        dx, dy = (int(v) for v in rng.integers(-limit, limit + 1, size=2))
        shifted, new_box = translate(image, box, dx, dy)
        if new_box[2] * new_box[3] >= 0.25 * area:
            return shifted, new_box, (dx, dy)
    return image, box, (0, 0)


class FrameStore:
    """Frame lookup by relative path: in-memory arrays or PNG files under a root."""

    def __init__(self, root: str | Path | None = None, arrays: Mapping[str, np.ndarray] | None = None):
        self.root = Path(root) if root is not None else None
        self.arrays = dict(arrays or {})

    def get(self, relpath: str) -> np.ndarray:
        """(3, H, W) float32 in [0, 1]."""
        if relpath in self.arrays:
            arr = self.arrays[relpath]
        else:
            if self.root is None:
                raise KeyError(relpath)
            with Image.open(self.root / relpath) as im:
                arr = np.asarray(im.convert("RGB"))
        return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32) / 255.0


# --------------------------------------------------------------------------
# synthetic scenes

COLOR_RGB = {
    "black": (0.05, 0.05, 0.05), "white": (0.95, 0.95, 0.95), "gray": (0.50, 0.50, 0.50),
    "silver": (0.74, 0.78, 0.84), "red": (0.85, 0.10, 0.10), "blue": (0.10, 0.25, 0.85),
    "green": (0.10, 0.65, 0.20), "yellow": (0.95, 0.90, 0.10), "orange": (0.95, 0.55, 0.05),
    "brown": (0.50, 0.30, 0.12), "purple": (0.55, 0.15, 0.70), "gold": (0.80, 0.65, 0.25),
}
BACKGROUND_RGB = (0.26, 0.31, 0.36)
WINDOW_RGB = (0.12, 0.12, 0.16)

# footprint (length, width) in pixels; markings are drawn by _mark_vehicle
SHAPE_STYLE = {
    "car": (10, 6),
    "coupe": (13, 7),
    "hatchback": (12, 10),
    "sedan": (16, 8),
    "wagon": (20, 8),
    "suv": (18, 12),
    "pickup": (22, 10),
    "van": (23, 13),
    "truck": (30, 12),
    "bus": (36, 12),
}

MOTION_PHRASES = {
    "straight": ["goes straight", "keeps straight", "drives straight ahead"],
    "left-turn": ["turns left", "makes a left turn", "is turning left"],
    "right-turn": ["turns right", "makes a right turn", "is turning right"],
    "stop": ["stops", "comes to a stop", "slows down and stops"],
}
TEMPLATES = [
    "A {color} {type} {motion}.",
    "{Color} {type} {motion} in the traffic.",
    "There is a {color} {type} that {motion}.",
]
HEADINGS = [(1, 0), (0, -1), (-1, 0), (0, 1)]  # E, N, W, S in image coordinates


@dataclass
class SynthConfig:
    seed: int = 42
    num_tracks: int = 300
    frames_per_track: int = 8
    image_size: int = 96
    palette: tuple[str, ...] = tuple(COLOR_RGB)
    shapes: tuple[str, ...] = tuple(SHAPE_STYLE)
    motions: tuple[str, ...] = tuple(MOTION_PHRASES)
    distractors: int = 2
    p_noise: float = 0.1
    p_synonym: float = 0.3
    speed: float = 2.0
    pixel_noise: float = 0.02


@dataclass
class SynthTruth:
    color: str
    type: str
    motion: str
    noised_index: int | None = None  # description whose color was corrupted
    noised_color: str | None = None


@dataclass
class SynthCorpus:
    tracks: list[Track]
    frames: dict[str, np.ndarray] = field(repr=False)  # relpath -> (H, W, 3) uint8
    truth: dict[str, SynthTruth]

    def store(self) -> FrameStore:
        return FrameStore(arrays=self.frames)

    def write(self, out_dir: str | Path, tracks_name: str = "tracks.json"):
        out = Path(out_dir)
        for rel, arr in self.frames.items():
            path = out / "frames" / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr).save(path)
        save_tracks(self.tracks, out / tracks_name)


def _trajectory(start, heading_idx, motion, n, speed):
    pos = np.array(start, dtype=float)
    h = heading_idx
    out = []
    for i in range(n):
        out.append((pos.copy(), h))
        moving = not (motion == "stop" and i >= n // 2)
        if motion == "left-turn" and i == n // 2 - 1:
            h = (h + 1) % 4
        elif motion == "right-turn" and i == n // 2 - 1:
            h = (h - 1) % 4
        if moving:
            pos += speed * np.array(HEADINGS[h], dtype=float)
    return out


def _footprint(center, heading_idx, shape) -> list[int]:
    length, width = SHAPE_STYLE[shape][:2]
    horizontal = HEADINGS[heading_idx][1] == 0
    w, h = (length, width) if horizontal else (width, length)
    x = int(round(center[0] - w / 2))
    y = int(round(center[1] - h / 2))
    return [x, y, w, h]


def _overlaps(a, b, margin=2) -> bool:
    return not (a[0] + a[2] + margin <= b[0] or b[0] + b[2] + margin <= a[0]
                or a[1] + a[3] + margin <= b[1] or b[1] + b[3] + margin <= a[1])


def _mark_vehicle(body: np.ndarray, shape: str) -> np.ndarray:
    """Vehicle in local coordinates: (length, width, 3), front at row 0.

    Every type has its own marking texture in a shade of the body color
    that contrasts with it: darker on light bodies, lighter on dark ones.
    """
    length, width = SHAPE_STYLE[shape]
    img = np.empty((length, width, 3))
    img[:] = body
    luma = float(body @ np.array([0.299, 0.587, 0.114]))
    if luma > 0.45:
        dark, glass = body * 0.45, np.array(WINDOW_RGB)
    else:
        dark, glass = body * 0.4 + 0.45, body * 0.3 + 0.65
    u = np.arange(length)[:, None]
    v = np.arange(width)[None, :]
    inner = (v >= 2) & (v < width - 2)
    if shape == "coupe":
        c0, r0 = width // 2 - 1, length // 2 - 1
        img[r0 : r0 + 3, c0 : c0 + 3] = glass
    elif shape == "hatchback":
        img[(u >= int(0.6 * length)) & (u < length - 1) & inner] = glass
    elif shape == "sedan":
        img[((u == 4) | (u == 5) | (u == 11) | (u == 12)) & inner] = glass
    elif shape == "wagon":
        img[(u >= 3) & (u < length - 2) & ((v == width // 2) | (v == width // 2 - 1))] = dark
    elif shape == "suv":
        ring = (u == 0) | (u == length - 1) | (v == 0) | (v == width - 1)
        img[ring] = dark
        img[(u >= 4) & (u < 7) & inner] = glass
    elif shape == "pickup":
        img[(u >= 3) & (u < 6) & inner] = glass
        img[(u >= length // 2) & (u < length - 1) & (v >= 1) & (v < width - 1)] = dark
    elif shape == "van":
        img[((u // 2 + v // 2) % 2 == 0) & (v >= 1) & (v < width - 1) & (u >= 1) & (u < length - 1)] = dark
    elif shape == "truck":
        img[(u >= 1) & (u < 4) & inner] = glass
        img[6] = dark
        img[(u > 6) & ((v == 3) | (v == width - 4))] = dark
    elif shape == "bus":
        img[(u % 4 < 2) & (u >= 2) & (u < length - 2) & inner] = glass
    return img


def _draw_vehicle(canvas, box, heading_idx, color, shape):
    x, y, w, h = box
    local = _mark_vehicle(np.array(COLOR_RGB[color]), shape)
    # local rows run from the front; orient them along the heading
    dx, dy = HEADINGS[heading_idx]
    if dy < 0:
        oriented = local
    elif dy > 0:
        oriented = local[::-1]
    elif dx < 0:
        oriented = local.transpose(1, 0, 2)
    else:
        oriented = local.transpose(1, 0, 2)[:, ::-1]
    canvas[y : y + h, x : x + w] = oriented


def _surface(name: str, lexicon_entries: dict[str, list[str]], rng, p_synonym: float) -> str:
    synonyms = lexicon_entries.get(name, [])
    if synonyms and rng.random() < p_synonym:
        return synonyms[int(rng.integers(len(synonyms)))]
    return "SUV" if name == "suv" else name


def _describe(color_word: str, type_word: str, motion: str, template: int, rng) -> str:
    phrases = MOTION_PHRASES[motion]
    phrase = phrases[int(rng.integers(len(phrases)))]
    text = TEMPLATES[template].format(color=color_word, Color=color_word[:1].upper() + color_word[1:],
                                      type=type_word, motion=phrase)
    return text


def generate_synthetic(config: SynthConfig, lexicon: AttributeLexicon | None = None) -> SynthCorpus:
    """Deterministic scenes: one described target plus distractors that differ in color or type."""
    lexicon = lexicon or AttributeLexicon.default()
    for c in config.palette:
        if c not in lexicon.colors or c not in COLOR_RGB:
            raise ValueError(f"palette color {c!r} is not a renderable lexicon color")
    for s in config.shapes:
        if s not in lexicon.types or s not in SHAPE_STYLE:
            raise ValueError(f"shape {s!r} is not a renderable lexicon type")
    if config.num_tracks < 1:
        raise ValueError("num_tracks must be >= 1")
    if len(config.palette) < 2 and config.p_noise > 0:
        raise ValueError("color noise needs at least two palette colors")

    rng = np.random.default_rng(config.seed)
    size, n_frames = config.image_size, config.frames_per_track
    tracks, frames, truth = [], {}, {}
    width = len(str(config.num_tracks - 1))
    combos = [(c, s) for c in config.palette for s in config.shapes]
    cycle: list[tuple[str, str]] = []
    for k in range(config.num_tracks):
        track_id = f"t{k:0{width}d}"
        # targets walk through reshuffled passes over every color/shape pair,
        # so no combination is over-represented
        if not cycle:
            cycle = [combos[i] for i in rng.permutation(len(combos))]
        color, shape = cycle.pop()
        motion = config.motions[int(rng.integers(len(config.motions)))]
        vehicles = [(color, shape, motion)]
        for _ in range(config.distractors):
            while True:
                dc = config.palette[int(rng.integers(len(config.palette)))]
                ds = config.shapes[int(rng.integers(len(config.shapes)))]
                if (dc, ds) != (color, shape) or (len(config.palette) == 1 and len(config.shapes) == 1):
                    break
            vehicles.append((dc, ds, "straight"))

        placed: list[list[tuple[list[int], int]]] = []
        for v_idx, (vc, vs, vm) in enumerate(vehicles):
            for _attempt in range(200):
                heading = int(rng.integers(4))
                start = rng.uniform(16, size - 16, size=2)
                traj = _trajectory(start, heading, vm, n_frames, config.speed)
                boxes = [(_footprint(c, h, vs), h) for c, h in traj]
                in_bounds = all(b[0] >= 0 and b[1] >= 0 and b[0] + b[2] <= size and b[1] + b[3] <= size
                                for b, _ in boxes)
                clear = in_bounds and all(
                    not _overlaps(boxes[f][0], other[f][0]) for other in placed for f in range(n_frames))
                if clear:
                    placed.append(boxes)
                    break
            else:
                if v_idx == 0:
                    raise RuntimeError(f"could not place the target of track {track_id}")
                log.debug("track %s: dropped distractor %d", track_id, v_idx)
                vehicles[v_idx] = None
        drawn = [v for v in vehicles if v is not None]

        frame_paths = []
        for f in range(n_frames):
            canvas = np.empty((size, size, 3))
            canvas[:] = BACKGROUND_RGB
            canvas += rng.normal(0.0, config.pixel_noise, size=canvas.shape)
            for (vc, vs, _), boxes in zip(drawn, placed):
                box, heading = boxes[f]
                _draw_vehicle(canvas, box, heading, vc, vs)
            rel = f"{track_id}/{f:04d}.png"
            frames[rel] = np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)
            frame_paths.append(rel)

        descriptions = []
        for template in range(3):
            cw = _surface(color, lexicon.colors, rng, config.p_synonym)
            tw = _surface(shape, lexicon.types, rng, config.p_synonym)
            descriptions.append(_describe(cw, tw, motion, template, rng))
        record = SynthTruth(color, shape, motion)
        if rng.random() < config.p_noise:
            idx = int(rng.integers(3))
            others = [c for c in config.palette if c != color]
            wrong = others[int(rng.integers(len(others)))]
            tw = _surface(shape, lexicon.types, rng, config.p_synonym)
            descriptions[idx] = _describe(wrong, tw, motion, idx, rng)
            record.noised_index, record.noised_color = idx, wrong

        tracks.append(Track(track_id, frame_paths, [b for b, _ in placed[0]], descriptions))
        truth[track_id] = record
    return SynthCorpus(tracks, frames, truth)


def split_tracks(tracks: Sequence[Track], seed: int, test_fraction: float = 0.2) -> tuple[list[Track], list[Track]]:
    """Seeded train/test split of whole tracks."""
    order = np.random.default_rng(seed).permutation(len(tracks))
    n_test = int(round(test_fraction * len(tracks)))
    test_idx = set(order[:n_test].tolist())
    train = [t for i, t in enumerate(tracks) if i not in test_idx]
    test = [t for i, t in enumerate(tracks) if i in test_idx]
    return train, test
