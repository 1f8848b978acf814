"""Frame annotations, sequence windows, manifests, PPM images and synthetic scenes."""
import csv
import enum
import os
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError, DataError, ParseError
from .rng import make_rng

CSV_HEADER = ("drive", "frame", "path", "straight", "left")


class LightState(str, enum.Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"
    OFF = "off"

    @classmethod
    def parse(cls, token):
        token = token.strip().lower()
        if token in ("unknown", "dark"):
            return cls.OFF
        return cls(token)


class RightOfWayLabel(NamedTuple):
    straight: str  # "pass" | "stop"
    left: str

    def as_indices(self):
        return (0 if self.straight == "pass" else 1, 0 if self.left == "pass" else 1)


STATUSES = ("pass", "stop")


def label_from_lights(straight, left):
    """Only a green light grants right of way; everything else means stop."""
    def status(light):
        return "pass" if LightState(light) is LightState.GREEN else "stop"
    return RightOfWayLabel(status(straight), status(left))


@dataclass(frozen=True)
class FrameRecord:
    drive: str
    frame: int
    path: str
    straight: LightState
    left: LightState


@dataclass(frozen=True)
class SequenceSample:
    paths: tuple  # oldest first, current frame last
    label: RightOfWayLabel
    stride: int = 1


# -- windowing ------------------------------------------------------------------
def group_drives(frames):
    """Frames per drive (first-seen drive order), sorted by frame index."""
    drives = defaultdict(list)
    for rec in frames:
        drives[rec.drive].append(rec)
    out = {}
    for drive, recs in drives.items():
        recs = sorted(recs, key=lambda r: r.frame)
        for a, b in zip(recs, recs[1:]):
            if a.frame == b.frame:
                raise DataError(f"drive {drive!r} has duplicate frame index {a.frame}")
        out[drive] = recs
    return out


def window_sequences(frames, n, stride=1):
    """Every N-frame window with in-window spacing ``stride``, sliding by one frame.

    A window ending at position ``t`` of a drive takes positions
    ``t - (n-1)*stride, ..., t - stride, t`` and is labelled from frame ``t``.
    Windows never cross drives.
    """
    if n < 1 or stride < 1:
        raise ContractError(f"need n >= 1 and stride >= 1, got n={n}, stride={stride}")
    span = (n - 1) * stride
    samples = []
    for recs in group_drives(frames).values():
        for t in range(span, len(recs)):
            window = recs[t - span:t + 1:stride]
            last = window[-1]
            samples.append(SequenceSample(tuple(r.path for r in window),
                                          label_from_lights(last.straight, last.left), stride))
    return samples


def expected_window_count(drive_lengths, n, stride):
    return sum(max(0, length - (n - 1) * stride) for length in drive_lengths)


def split_samples(samples, fraction, seed=0):
    """Seeded shuffle then split into ``(first, rest)`` with ``round(fraction * len)`` first."""
    if not 0 < fraction <= 1:
        raise ContractError(f"split fraction must be in (0, 1], got {fraction}")
    order = make_rng(seed, "split").permutation(len(samples))
    k = int(round(fraction * len(samples)))
    return [samples[i] for i in order[:k]], [samples[i] for i in order[k:]]


# -- frame CSV --------------------------------------------------------------------
def read_frames_csv(path):
    """Parse ``drive,frame,path,straight,left`` rows; paths resolve against the CSV's folder.

    Image files are not touched here; a missing image surfaces when it is loaded.
    """
    path = Path(path)
    base = path.parent
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(path, lineno, f"expected 5 fields, got {len(row)}")
            drive, frame, img, straight, left = (c.strip() for c in row)
            try:
                frame = int(frame)
            except ValueError:
                raise ParseError(path, lineno, f"bad frame index {frame!r}") from None
            try:
                s, lft = LightState.parse(straight), LightState.parse(left)
            except ValueError as exc:
                raise ParseError(path, lineno, f"bad light state: {exc}") from None
            records.append(FrameRecord(drive, frame, os.path.normpath(base / img), s, lft))
    return records


def write_frames_csv(records, path):
    path = Path(path)
    base = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            rel = os.path.relpath(Path(r.path).resolve(), base)
            writer.writerow([r.drive, r.frame, Path(rel).as_posix(), r.straight.value, r.left.value])


# -- manifests --------------------------------------------------------------------
def write_manifest(samples, path, comment=None):
    """One tab-separated line per sample: N paths, straight, left, stride."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    lines = []
    if comment:
        lines += [f"# {line}" for line in comment.splitlines()]
    for s in samples:
        rel = [Path(os.path.relpath(Path(p).resolve(), base)).as_posix() for p in s.paths]
        lines.append("\t".join([*rel, s.label.straight, s.label.left, str(s.stride)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    path = Path(path)
    base = path.parent.resolve()
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise ParseError(path, lineno, f"expected >= 4 tab-separated fields, got {len(fields)}")
        *paths, straight, left, stride = fields
        if straight not in STATUSES or left not in STATUSES:
            raise ParseError(path, lineno, f"labels must be pass/stop, got {straight!r}, {left!r}")
        try:
            stride = int(stride)
        except ValueError:
            raise ParseError(path, lineno, f"bad stride {stride!r}") from None
        if stride < 1:
            raise ParseError(path, lineno, f"stride must be >= 1, got {stride}")
        resolved = tuple(os.path.normpath(base / p) for p in paths)
        samples.append(SequenceSample(resolved, RightOfWayLabel(straight, left), stride))
    return samples


def sample_stats(samples):
    counts = {"straight": Counter(), "left": Counter(), "joint": Counter()}
    for s in samples:
        counts["straight"][s.label.straight] += 1
        counts["left"][s.label.left] += 1
        counts["joint"][f"{s.label.straight}/{s.label.left}"] += 1
    return {
        "straight": {k: counts["straight"][k] for k in STATUSES},
        "left": {k: counts["left"][k] for k in STATUSES},
        "joint": {f"{a}/{b}": counts["joint"][f"{a}/{b}"] for a in STATUSES for b in STATUSES},
    }


def manifest_stats(path):
    """Per-direction pass/stop counts and the four joint-state counts."""
    return sample_stats(read_manifest(path))


# -- PPM ----------------------------------------------------------------------------
def write_ppm(path, image):
    """Write an (H, W, 3) uint8 array as binary P6."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"PPM needs (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def _ppm_tokens(blob, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_ppm(path):
    """Read a binary P6 file (maxval 255) into an (H, W, 3) uint8 array."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    blob = path.read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(blob, 4)
    if magic != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    need = w * h * 3
    body = blob[pos:pos + need]
    if len(body) != need:
        raise DataError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def image_to_array(image):
    """uint8 (H, W, 3) -> float32 (3, H, W) in [0, 1]."""
    return np.transpose(image, (2, 0, 1)).astype(np.float32) / np.float32(255)


def _threads():
    raw = os.environ.get("LIGHTFORMER_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return min(4, os.cpu_count() or 1)


def load_sample(sample):
    return np.stack([image_to_array(read_ppm(p)) for p in sample.paths])


def load_dataset(samples):
    """Stack samples into ``X`` (n, N, 3, H, W) float32 and ``y`` (n, 2) int64.

    Loading runs on up to ``LIGHTFORMER_THREADS`` threads; the output order is
    always the sample order.
    """
    if not samples:
        raise ContractError("no samples to load")
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        buffers = list(pool.map(load_sample, samples))
    shapes = {b.shape for b in buffers}
    if len(shapes) != 1:
        raise DataError(f"samples have differing buffer shapes: {sorted(shapes)}")
    y = np.array([s.label.as_indices() for s in samples], dtype=np.int64)
    return np.stack(buffers), y


# -- synthetic scenes --------------------------------------------------------------
COLOURS = {
    LightState.GREEN: (40, 220, 80),
    LightState.YELLOW: (235, 200, 20),
    LightState.RED: (225, 30, 30),
    LightState.OFF: (45, 45, 45),
}
DISTRACTOR_COLOURS = ((255, 240, 200), (255, 170, 60), (240, 60, 40), (200, 220, 255))
CYCLE = (LightState.GREEN, LightState.YELLOW, LightState.RED)


@dataclass
class SceneSpec:
    """Knobs for :func:`synth_scene`; defaults suit 32x64 frames."""

    scenario: str = "day"
    left_mode: str = "circle"  # "circle" | "arrow"
    occlusion_prob: float = 0.0
    straight_durations: tuple = (9, 3, 9)
    left_durations: tuple = (7, 2, 11)
    box_origin: tuple | None = None  # (row, col) of the light box; random if None
    distractors: int | None = None  # None: 0 by day, 2-4 at night


@dataclass
class Scene:
    frames: list  # (H, W, 3) uint8
    states: list  # (straight, left) LightState per frame
    stats: dict = field(default_factory=dict)

    @property
    def labels(self):
        return [label_from_lights(s, lft) for s, lft in self.states]


def _disc(r):
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def _arrow(r):
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    head = (xx <= 0) & (np.abs(yy) <= xx + r)
    shaft = (xx >= 0) & (np.abs(yy) <= max(1, r // 3))
    return head | shaft


def _stamp(img, mask, top, left, colour):
    h, w = img.shape[:2]
    mh, mw = mask.shape
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + mh, h), min(left + mw, w)
    if r0 >= r1 or c0 >= c1:
        return
    sub = mask[r0 - top:r1 - top, c0 - left:c1 - left]
    img[r0:r1, c0:c1][sub] = colour


def _cycle_state(durations, phase, t):
    total = sum(durations)
    pos = (t + phase) % total
    for state, d in zip(CYCLE, durations):
        if pos < d:
            return state
        pos -= d
    raise AssertionError("unreachable")


def _layout(h, w):
    r = max(2, h // 12)
    box_h, box_w = 2 * r + 3, 4 * r + 6
    return r, box_h, box_w


def synth_scene(seed, scenario="day", num_frames=30, size=(32, 64), spec=None):
    """Render a drive past one traffic light.

    The light box holds a left-turn indicator (circle, or an arrow in its own
    box below the main one) and a straight circle. Both follow independent
    green -> yellow -> red cycles with seeded phases. Night scenes have a dark,
    low-contrast background and coloured distractor blobs. All pixel math is
    integer-valued, so output is bit-reproducible.
    """
    spec = spec or SceneSpec(scenario=scenario)
    if spec.scenario != scenario:
        spec = SceneSpec(**{**vars(spec), "scenario": scenario})
    if scenario not in ("day", "night"):
        raise ContractError(f"scenario must be 'day' or 'night', got {scenario!r}")
    if spec.left_mode not in ("circle", "arrow"):
        raise ContractError(f"left_mode must be 'circle' or 'arrow', got {spec.left_mode!r}")
    if num_frames < 1:
        raise ContractError(f"num_frames must be >= 1, got {num_frames}")
    h, w = size
    r, box_h, box_w = _layout(h, w)
    need_h = 2 * box_h + 2 if spec.left_mode == "arrow" else box_h
    if h < need_h + 2 or w < box_w + 2:
        raise ContractError(f"frame size {size} too small for a {need_h}x{box_w} light box")

    rng = make_rng(seed, f"scene.{scenario}")
    if spec.box_origin is None:
        top = int(rng.integers(1, max(2, h // 2 - need_h // 2)))
        left = int(rng.integers(1, w - box_w))
    else:
        top, left = spec.box_origin
    top = min(max(top, 0), h - need_h)
    left = min(max(left, 0), w - box_w)

    if scenario == "day":
        coarse = rng.integers(70, 190, size=((h + 3) // 4, (w + 3) // 4, 3))
        fine_amp = 24
    else:
        coarse = rng.integers(6, 30, size=((h + 3) // 4, (w + 3) // 4, 3))
        fine_amp = 6
    base = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)[:h, :w]

    n_distract = spec.distractors
    if n_distract is None:
        n_distract = int(rng.integers(2, 5)) if scenario == "night" else 0
    blobs = []
    for _ in range(n_distract):
        br = int(rng.integers(1, r + 2))
        for _attempt in range(20):
            cy, cx = int(rng.integers(br, h - br)), int(rng.integers(br, w - br))
            clear = (cy + br < top - 1 or cy - br > top + need_h
                     or cx + br < left - 1 or cx - br > left + box_w)
            if clear:
                break
        blobs.append((cy, cx, br, DISTRACTOR_COLOURS[int(rng.integers(len(DISTRACTOR_COLOURS)))]))

    s_phase = int(rng.integers(sum(spec.straight_durations)))
    l_phase = int(rng.integers(sum(spec.left_durations)))
    box_colour = (20, 20, 20) if scenario == "day" else (12, 12, 12)
    lamp = _disc(r)
    left_shape = _arrow(r) if spec.left_mode == "arrow" else lamp
    lamp_row = top + 1
    left_col, straight_col = left + 2, left + box_w - 2 - (2 * r + 1)
    arrow_row = top + box_h + 2

    frames, states, occluded = [], [], 0
    for t in range(num_frames):
        img = base + rng.integers(-fine_amp, fine_amp + 1, size=(h, w, 3))
        img = np.clip(img, 0, 255).astype(np.uint8)
        for cy, cx, br, colour in blobs:
            flicker = int(rng.integers(0, 2))
            _stamp(img, _disc(br + flicker), cy - br - flicker, cx - br - flicker, colour)
        s_state = _cycle_state(spec.straight_durations, s_phase, t)
        l_state = _cycle_state(spec.left_durations, l_phase, t)
        img[top:top + box_h, left:left + box_w] = box_colour
        _stamp(img, lamp, lamp_row, straight_col, COLOURS[s_state])
        if spec.left_mode == "arrow":
            img[arrow_row - 1:arrow_row + 2 * r + 2, left:left + 2 * r + 4] = box_colour
            _stamp(img, left_shape, arrow_row, left + 1, COLOURS[l_state])
            _stamp(img, lamp, lamp_row, left_col, COLOURS[LightState.OFF])
        else:
            _stamp(img, left_shape, lamp_row, left_col, COLOURS[l_state])
        if spec.occlusion_prob > 0 and rng.random() < spec.occlusion_prob:
            img[max(top - 1, 0):top + need_h + 1, max(left - 1, 0):left + box_w + 1] = 110
            occluded += 1
        frames.append(img)
        states.append((s_state, l_state))

    stats = {
        "scenario": scenario,
        "left_mode": spec.left_mode,
        "frames": num_frames,
        "distractors": n_distract,
        "occluded_frames": occluded,
        "box_row": top,
        "box_col": left,
        "lamp_radius": r,
    }
    return Scene(frames, states, stats)


def indicator_boxes(stats, size=None):
    """Pixel rectangles ``(r0, r1, c0, c1)`` of the straight and left lamps of a scene."""
    r = stats["lamp_radius"]
    top, left = stats["box_row"], stats["box_col"]
    _, box_h, box_w = _layout(size[0], size[1]) if size else (r, 2 * r + 3, 4 * r + 6)
    straight_col = left + box_w - 2 - (2 * r + 1)
    straight = (top + 1, top + 2 + 2 * r, straight_col, straight_col + 2 * r + 1)
    if stats["left_mode"] == "arrow":
        row = top + box_h + 2
        left_box = (row, row + 2 * r + 1, left + 1, left + 2 + 2 * r)
    else:
        left_box = (top + 1, top + 2 + 2 * r, left + 2, left + 3 + 2 * r)
    return {"straight": straight, "left": left_box}
