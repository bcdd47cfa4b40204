"""Moving-sprites sequences and the on-disk formats for frames and datasets.

Sprites live on the integer grid: positions, sizes and velocities are ints,
and rasterization only compares integers, so a sequence is a pure function of
its config and seed on any machine.
"""

import struct
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

SEQ_MAGIC = b"SEQ1"
MANIFEST = "manifest.txt"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SpriteWorldConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    length: int = 20
    min_sprites: int = 1
    max_sprites: int = 2
    kinds: tuple = ("rectangle", "disc")
    min_size: int = 6
    max_size: int = 12
    min_speed: int = 1
    max_speed: int = 3
    switch_prob: float = 0.0
    bounce: bool = True
    bimodal: bool = False
    branch_step: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if not 1 <= self.min_sprites <= self.max_sprites:
            raise ValueError("need 1 <= min_sprites <= max_sprites")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise ValueError("need 1 <= min_size <= max_size <= frame size")
        if not 0 <= self.min_speed <= self.max_speed:
            raise ValueError("need 0 <= min_speed <= max_speed")
        if 4 * self.max_speed >= min(self.height, self.width):
            raise ValueError(f"max_speed {self.max_speed} must be < min(H, W)/4")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("switch_prob must lie in [0, 1]")
        bad = set(self.kinds) - {"rectangle", "disc"}
        if bad or not self.kinds:
            raise ValueError(f"unknown sprite kinds {sorted(bad)}")
        if self.bimodal and not 1 <= self.branch_step < self.length:
            raise ValueError("branch_step must lie in [1, length)")

    def canonical(self):
        return "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))

    def hash(self):
        return zlib.crc32(self.canonical().encode()) & 0xFFFFFFFF


@dataclass
class Sprite:
    kind: str
    x: int  # left column of the bounding box
    y: int  # top row of the bounding box
    w: int
    h: int
    vx: int
    vy: int
    color: tuple  # one 0..255 level per channel


@dataclass
class Sequence:
    frames: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    seed: int
    config_hash: int

    def __eq__(self, other):
        return (
            isinstance(other, Sequence)
            and self.seed == other.seed
            and self.config_hash == other.config_hash
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


def _mask(sprite, height, width):
    ys = np.arange(height)[:, None] - sprite.y
    xs = np.arange(width)[None, :] - sprite.x
    inside = (ys >= 0) & (ys < sprite.h) & (xs >= 0) & (xs < sprite.w)
    if sprite.kind == "disc":
        # integer test against the inscribed circle, scaled by 2 to stay on the grid
        dy = 2 * ys - (sprite.h - 1)
        dx = 2 * xs - (sprite.w - 1)
        inside &= dy * dy + dx * dx <= sprite.w * sprite.w
    return inside


def render(sprites, height, width, channels):
    """Paint sprites in list order (later ones occlude earlier) on black."""
    levels = np.zeros((channels, height, width), dtype=np.int64)
    for s in sprites:
        m = _mask(s, height, width)
        for c in range(channels):
            levels[c][m] = s.color[c]
    return (levels / 255.0).astype(np.float32)


def _advance(s, height, width, bounce):
    if bounce:
        if not 0 <= s.x + s.vx <= width - s.w:
            s.vx = -s.vx
        if not 0 <= s.y + s.vy <= height - s.h:
            s.vy = -s.vy
    s.x += s.vx
    s.y += s.vy


def simulate(sprites, config, length, branch_dirs=None, rng=None):
    """Render ``length`` frames starting from ``sprites`` (mutated in place).

    ``branch_dirs`` holds one +1/-1 per sprite applied at ``config.branch_step``
    when the world is bimodal; ``rng`` drives random direction switches.
    """
    frames = []
    for t in range(length):
        if config.bimodal and branch_dirs is not None and t == config.branch_step:
            for s, d in zip(sprites, branch_dirs):
                s.vy = d * max(abs(s.vx), config.min_speed, 1)
        frames.append(render(sprites, config.height, config.width, config.channels))
        for s in sprites:
            if rng is not None and config.switch_prob > 0 and rng.random() < config.switch_prob:
                s.vx, s.vy = _velocity(rng, config)
            _advance(s, config.height, config.width, config.bounce)
    return np.stack(frames)


def _velocity(rng, config):
    if config.max_speed == 0:
        return 0, 0
    while True:
        vx, vy = (int(v) for v in rng.integers(-config.max_speed, config.max_speed + 1, size=2))
        if max(abs(vx), abs(vy)) >= config.min_speed:
            return vx, vy


def _place(rng, config, count, retries=200):
    placed = []
    for _ in range(count):
        for _attempt in range(retries):
            kind = config.kinds[int(rng.integers(len(config.kinds)))]
            w = int(rng.integers(config.min_size, config.max_size + 1))
            h = w if kind == "disc" else int(rng.integers(config.min_size, config.max_size + 1))
            x = int(rng.integers(0, config.width - w + 1))
            y = int(rng.integers(0, config.height - h + 1))
            if all(x + w <= p.x or p.x + p.w <= x or y + h <= p.y or p.y + p.h <= y for p in placed):
                break
        else:
            raise RuntimeError(f"could not place {count} non-overlapping sprites after {retries} retries each")
        if config.bimodal:
            # horizontal motion before the branch so the branch alone picks the vertical direction
            speed = int(rng.integers(max(config.min_speed, 1), max(config.max_speed, 1) + 1))
            vx, vy = speed * (1 if rng.random() < 0.5 else -1), 0
        else:
            vx, vy = _velocity(rng, config)
        color = tuple(int(v) for v in rng.integers(96, 256, size=config.channels))
        placed.append(Sprite(kind, x, y, w, h, vx, vy, color))
    return placed


def generate_sequence(config, sequence_seed, branch=None):
    """Deterministic sequence for ``(config, sequence_seed)``.

    In bimodal mode each sprite turns up or down at ``config.branch_step``;
    the choice comes from a stream separate from the rest of the world, and
    ``branch`` (0 = down, 1 = up) forces it for every sprite.
    """
    rng = np.random.default_rng([config.seed, sequence_seed])
    count = int(rng.integers(config.min_sprites, config.max_sprites + 1))
    sprites = _place(rng, config, count)
    dirs = None
    if config.bimodal:
        if branch is None:
            branch_rng = np.random.default_rng([config.seed, sequence_seed, 1])
            dirs = [1 if b else -1 for b in branch_rng.integers(0, 2, size=count)]
        elif branch in (0, 1):
            dirs = [1 if branch == 0 else -1] * count
        else:
            raise ValueError("branch must be 0, 1 or None")
    frames = simulate(sprites, config, config.length, dirs, rng)
    return Sequence(frames, int(sequence_seed), config.hash())


# -- SEQ1 files ----------------------------------------------------------


def write_sequence(seq, path):
    frames = np.asarray(seq.frames, dtype="<f4")
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError(f"sequence frames must be [T>=1, C, H, W], got {frames.shape}")
    with open(path, "wb") as f:
        f.write(SEQ_MAGIC)
        f.write(struct.pack("<4I", *frames.shape))
        f.write(frames.tobytes())
        f.write(struct.pack("<QI", seq.seed, seq.config_hash))


def read_sequence(path):
    raw = Path(path).read_bytes()
    if raw[:4] != SEQ_MAGIC:
        if len(raw) < 4:
            raise ValueError("unexpected end of sequence file")
        raise ValueError(f"bad sequence magic {raw[:4]!r} (expected {SEQ_MAGIC!r})")
    if len(raw) < 20:
        raise ValueError("unexpected end of sequence file")
    shape = struct.unpack_from("<4I", raw, 4)
    if 0 in shape:
        raise ValueError(f"sequence dimensions must be >= 1, got T,C,H,W = {shape}")
    count = int(np.prod(shape))
    end = 20 + 4 * count
    if len(raw) < end + 12:
        raise ValueError("unexpected end of sequence file")
    if len(raw) > end + 12:
        raise ValueError(f"{len(raw) - end - 12} trailing bytes after sequence data")
    frames = np.frombuffer(raw, dtype="<f4", count=count, offset=20).reshape(shape).astype(np.float32)
    seed, chash = struct.unpack_from("<QI", raw, end)
    return Sequence(frames, seed, chash)


# -- images ----------------------------------------------------------------


def to_bytes(frame):
    """[C,H,W] in [0,1] -> (uint8 array, number of clamped values); round half up."""
    frame = np.asarray(frame, dtype=np.float64)
    bad = int(np.count_nonzero((frame < 0) | (frame > 1) | ~np.isfinite(frame)))
    clean = np.clip(np.nan_to_num(frame, nan=0.0), 0.0, 1.0)
    return np.floor(clean * 255.0 + 0.5).astype(np.uint8), bad


def export_pgm(frame, path):
    """Write a [1,H,W] frame as binary PGM or a [3,H,W] frame as binary PPM.

    Returns the number of out-of-range values that were clamped.
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ValueError(f"export_pgm expects [1,H,W] or [3,H,W], got {frame.shape}")
    data, clamped = to_bytes(frame)
    c, h, w = data.shape
    if clamped:
        warnings.warn(f"{path}: clamped {clamped} values outside [0, 1]", stacklevel=2)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.transpose(1, 2, 0).tobytes())
    return clamped


def tile_strip(frames):
    """Concatenate [T,C,H,W] frames left to right into one [C,H,T*W] image."""
    frames = np.asarray(frames)
    return np.concatenate(list(frames), axis=2)


# -- datasets ----------------------------------------------------------------


def write_dataset(out_dir, config, counts, threads=1):
    """Generate ``counts[split]`` sequences per split plus a manifest.

    Sequence seeds run 0, 1, 2, ... across train, val and test in that order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for split in SPLITS:
        for i in range(counts.get(split, 0)):
            jobs.append((f"{split}_{i:04d}.seq", split, len(jobs)))

    def make(job):
        name, _, seed = job
        write_sequence(generate_sequence(config, seed), out / name)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(make, jobs))
    else:
        for job in jobs:
            make(job)
    (out / MANIFEST).write_text("".join(f"{name}\t{split}\n" for name, split, _ in jobs))
    return [name for name, _, _ in jobs]


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {data_dir}")
    entries = []
    for line in path.read_text().splitlines():
        if line.strip():
            name, split = line.split("\t")
            entries.append((name, split))
    return entries


def load_split(data_dir, split):
    return [read_sequence(Path(data_dir) / name) for name, s in read_manifest(data_dir) if s == split]


def config_fields():
    return [f.name for f in fields(SpriteWorldConfig)]
