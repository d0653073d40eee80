"""Deterministic synthetic multimodal task and frozen proxy language space.

Each sample is a 16x16 RGB scene with one to three colored glyphs (a
large 8x8 glyph, a small 4x4 glyph, an optional 5x5 distractor) plus a
templated question about it. Four question families are supported:

  0 large-color   color of the large glyph
  1 large-shape   shape of the large glyph
  2 small-color   color of the small glyph (fine-grained: a few pixels)
  3 count         how many glyphs are present

Answers share one 12-way vocabulary: 6 colors, 3 shapes, 3 counts.
Family and attribute draws are uniform, so answer classes are balanced
by construction.

Randomness comes from splitmix64 used in counter mode: draw k of a
stream seeded with s is finalize(s + (k+1) * 0x9E3779B97F4A7C15) where
finalize(z) xors z with z >> 30, multiplies by 0xBF58476D1CE4E5B9, xors
with z >> 27, multiplies by 0x94D049BB133111EB and xors with z >> 31,
all modulo 2^64. Uniform doubles take the top 53 bits. The same seed
therefore regenerates the same bytes on any platform or implementation.

The proxy language space is a pair of frozen unit-norm embedding tables
standing in for question hidden states and answer-token embeddings; it
is generated once from its own seed and never trained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)

COLORS = (
    ("red", (1.0, 0.0, 0.0)),
    ("green", (0.0, 1.0, 0.0)),
    ("blue", (0.0, 0.0, 1.0)),
    ("yellow", (1.0, 1.0, 0.0)),
    ("magenta", (1.0, 0.0, 1.0)),
    ("cyan", (0.0, 1.0, 1.0)),
)
SHAPES = ("square", "cross", "diamond")
FAMILIES = ("large-color", "large-shape", "small-color", "count")
FINE_GRAINED_FAMILY = "small-color"

N_COLORS = len(COLORS)
N_SHAPES = len(SHAPES)
SHAPE_ANSWER_BASE = N_COLORS          # answers 6..8
COUNT_ANSWER_BASE = N_COLORS + N_SHAPES  # answers 9..11

GLYPH_SIZES = (8, 4, 5)  # large, small, distractor


def _finalize(z: np.ndarray) -> np.ndarray:
    # wraparound modulo 2^64 is the algorithm, not an error
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * MIX1
        z = z ^ (z >> np.uint64(27))
        z = z * MIX2
        return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs start..start+count of the splitmix64 stream seeded with seed."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _finalize(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * GAMMA)


def derive_seed(root: int, index: int) -> int:
    """Independent per-sample seed from a dataset seed and a sample index."""
    with np.errstate(over="ignore"):
        mixed = (np.uint64(root & 0xFFFFFFFFFFFFFFFF) * GAMMA
                 + np.uint64(index & 0xFFFFFFFFFFFFFFFF))
    return int(_finalize(mixed))


class Stream:
    """Sequential view over a splitmix64 counter stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.pos = 0

    def next_u64(self) -> int:
        out = splitmix64(self.seed, self.pos, 1)[0]
        self.pos += 1
        return int(out)

    def randint(self, n: int) -> int:
        # modulo bias is < 2^-50 for the tiny ranges used here
        return self.next_u64() % n

    def floats(self, count: int) -> np.ndarray:
        """count uniform doubles in [0, 1)."""
        raw = splitmix64(self.seed, self.pos, count)
        self.pos += count
        return (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normals(self, count: int) -> np.ndarray:
        """Standard normals via Box-Muller (pairs of uniforms)."""
        pairs = (count + 1) // 2
        u1 = (splitmix64(self.seed, self.pos, pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * (2.0 ** -53)  # keep strictly positive for the log
        u2 = (splitmix64(self.seed, self.pos + pairs, pairs) >> np.uint64(11)).astype(
            np.float64
        ) * (2.0 ** -53)
        self.pos += 2 * pairs
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:count]

    def sample_distinct(self, n: int, k: int) -> list[int]:
        pool = list(range(n))
        out = []
        for _ in range(k):
            out.append(pool.pop(self.randint(len(pool))))
        return out


@dataclass
class TaskConfig:
    image_size: int = 16
    channels: int = 3
    question_vocab: int = 16
    answer_vocab: int = 12
    tokens_per_question: int = 4
    table_seed: int = 7771

    def __post_init__(self):
        if self.answer_vocab != N_COLORS + N_SHAPES + 3:
            raise ValueError(
                f"answer_vocab must be {N_COLORS + N_SHAPES + 3} for this task"
            )
        if self.question_vocab < len(FAMILIES):
            raise ValueError("question_vocab smaller than the family count")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    question_id: int
    question_tokens: list[int]
    answer_id: int
    seed: int
    family: int = 0
    meta: dict = field(default_factory=dict)


def _rects_overlap(a, b):
    ax, ay, asz = a
    bx, by, bsz = b
    return not (ax + asz <= bx or bx + bsz <= ax or ay + asz <= by or by + bsz <= ay)


def _place(stream: Stream, size: int, image_size: int, taken: list) -> tuple:
    span = image_size - size + 1
    for _ in range(40):
        x0, y0 = stream.randint(span), stream.randint(span)
        rect = (x0, y0, size)
        if not any(_rects_overlap(rect, r) for r in taken):
            return rect
    # deterministic fallback: first free slot in row-major order
    for y0 in range(span):
        for x0 in range(span):
            rect = (x0, y0, size)
            if not any(_rects_overlap(rect, r) for r in taken):
                return rect
    return (0, 0, size)  # overlapping as a last resort; small is drawn on top


def _paint(img: np.ndarray, rect, shape: int, rgb) -> None:
    x0, y0, size = rect
    yy, xx = np.mgrid[0:size, 0:size]
    if SHAPES[shape] == "square":
        mask = np.ones((size, size), dtype=bool)
    elif SHAPES[shape] == "cross":
        mask = (yy == xx) | (yy + xx == size - 1)
    else:  # diamond
        c = (size - 1) / 2.0
        mask = (np.abs(yy - c) + np.abs(xx - c)) <= c
    color = 0.2 + 0.75 * np.asarray(rgb)
    img[y0:y0 + size, x0:x0 + size][mask] = color


def question_tokens_for(template: int, cfg: TaskConfig) -> list[int]:
    """Fixed synthetic token ids for one question template."""
    v = cfg.question_vocab
    mults = (1, 5, 7, 3)
    offs = (0, 3, 1, 2)
    return [
        (template * mults[j % 4] + offs[j % 4]) % v
        for j in range(cfg.tokens_per_question)
    ]


def generate_sample(seed: int, cfg: TaskConfig) -> Sample:
    """Render one scene + question pair, fully determined by the seed."""
    stream = Stream(seed)
    template = stream.randint(cfg.question_vocab)
    family = template % len(FAMILIES)
    n_glyphs = 1 + stream.randint(3)
    if FAMILIES[family] == FINE_GRAINED_FAMILY:
        n_glyphs = max(n_glyphs, 2)

    colors = stream.sample_distinct(N_COLORS, 3)
    shapes = [stream.randint(N_SHAPES) for _ in range(3)]

    # biggest first, so the most constrained glyph claims space first;
    # the same order is used for drawing, keeping the small glyph on top
    order = [g for g in (0, 2, 1) if g < n_glyphs]
    taken = []
    rects = {}
    for g in order:
        rect = _place(stream, GLYPH_SIZES[g], cfg.image_size, taken)
        taken.append(rect)
        rects[g] = rect
    overlapped = any(
        _rects_overlap(rects[a], rects[b])
        for i, a in enumerate(order) for b in order[i + 1:]
    )

    noise = stream.floats(cfg.image_size * cfg.image_size * cfg.channels)
    img = (0.08 + 0.04 * noise).reshape(cfg.image_size, cfg.image_size, cfg.channels)

    for g in order:
        _paint(img, rects[g], shapes[g], COLORS[colors[g]][1])

    if family == 0:
        answer = colors[0]
    elif family == 1:
        answer = SHAPE_ANSWER_BASE + shapes[0]
    elif family == 2:
        answer = colors[1]
    else:
        answer = COUNT_ANSWER_BASE + (n_glyphs - 1)

    return Sample(
        image=img.astype(np.float32),
        question_id=template,
        question_tokens=question_tokens_for(template, cfg),
        answer_id=answer,
        seed=int(seed),
        family=family,
        meta={"n_glyphs": n_glyphs, "colors": colors, "shapes": shapes,
              "rects": [rects[g] for g in range(n_glyphs)], "overlap": overlapped},
    )


class ProxyLanguageSpace:
    """Frozen unit-norm embedding tables for questions and answers."""

    def __init__(self, cfg: TaskConfig, llm_dim: int):
        self.cfg = cfg
        self.llm_dim = llm_dim
        stream = Stream(cfg.table_seed)
        q = stream.normals(cfg.question_vocab * llm_dim).reshape(cfg.question_vocab, llm_dim)
        a = stream.normals(cfg.answer_vocab * llm_dim).reshape(cfg.answer_vocab, llm_dim)
        self.question_table = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)
        self.answer_table = (a / np.linalg.norm(a, axis=1, keepdims=True)).astype(np.float32)
        self.question_table.setflags(write=False)
        self.answer_table.setflags(write=False)


def embed_question(sample: Sample, space: ProxyLanguageSpace) -> np.ndarray:
    """Look up the frozen rows for the sample's question tokens."""
    ids = np.asarray(sample.question_tokens)
    if ids.size < 1:
        raise ValueError("embed_question: empty question")
    if ids.min() < 0 or ids.max() >= space.cfg.question_vocab:
        raise ValueError(
            f"embed_question: token id out of range [0, {space.cfg.question_vocab})"
        )
    return space.question_table[ids]


def embed_answer(answer_id: int, space: ProxyLanguageSpace) -> np.ndarray:
    """Embedding of a single answer token (the common T_a = 1 case)."""
    return embed_answer_tokens([answer_id], space)


def embed_answer_tokens(answer_ids, space: ProxyLanguageSpace) -> np.ndarray:
    """Mean of the frozen answer-token rows."""
    ids = np.asarray(answer_ids)
    if ids.size < 1:
        raise ValueError("embed_answer: empty answer")
    if ids.min() < 0 or ids.max() >= space.cfg.answer_vocab:
        raise ValueError(
            f"embed_answer: answer id out of range [0, {space.cfg.answer_vocab})"
        )
    return space.answer_table[ids].mean(axis=0)


# --- binary dataset dump (little-endian, record framed) ---------------------
#
# Per record: u32 payload length, then the payload:
#   u64 seed | u32 question_id | u32 answer_id | u16 n_tokens
#   | n_tokens * u16 | u16 H | u16 W | u16 C | H*W*C float32 image


def _pack_sample(s: Sample) -> bytes:
    h, w, c = s.image.shape
    head = struct.pack(
        "<QIIH" + "H" * len(s.question_tokens) + "HHH",
        s.seed & 0xFFFFFFFFFFFFFFFF, s.question_id, s.answer_id,
        len(s.question_tokens), *s.question_tokens, h, w, c,
    )
    return head + s.image.astype("<f4").tobytes()


def dump_split(path, seeds, cfg: TaskConfig) -> int:
    """Write one split file; returns the number of records written."""
    n = 0
    with open(path, "wb") as fh:
        for seed in seeds:
            payload = _pack_sample(generate_sample(seed, cfg))
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            n += 1
    return n


def load_split(path) -> list[Sample]:
    samples = []
    with open(path, "rb") as fh:
        while True:
            raw_len = fh.read(4)
            if not raw_len:
                break
            (length,) = struct.unpack("<I", raw_len)
            payload = fh.read(length)
            if len(payload) != length:
                raise ValueError(f"truncated record in {path}")
            seed, qid, aid, ntok = struct.unpack_from("<QIIH", payload, 0)
            off = struct.calcsize("<QIIH")
            tokens = list(struct.unpack_from("<" + "H" * ntok, payload, off))
            off += 2 * ntok
            h, w, c = struct.unpack_from("<HHH", payload, off)
            off += 6
            img = np.frombuffer(payload, dtype="<f4", offset=off, count=h * w * c)
            samples.append(
                Sample(
                    image=img.reshape(h, w, c).copy(),
                    question_id=qid,
                    question_tokens=tokens,
                    answer_id=aid,
                    seed=seed,
                    family=qid % len(FAMILIES),
                )
            )
    return samples
