"""Synthetic compositional scene world.

Symbolic scenes (objects with shape, color and grid cell, plus optional
relation or count) are rendered deterministically into small RGB images in
several procedural styles, captioned from a closed grammar, and verified
against prompts by an exact oracle.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .validation import ConfigError, as_rng, check_image

GRID = 4          # cells per image side
CELL = 4          # pixels per cell side
IMAGE_SIZE = GRID * CELL
IMAGE_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)

COLOR_NAMES = (
    "red", "orange", "yellow", "green", "blue",
    "purple", "pink", "brown", "black", "white",
)

COLOR_RGB = np.array(
    [
        (1.00, 0.00, 0.00),  # red
        (1.00, 0.55, 0.00),  # orange
        (1.00, 1.00, 0.00),  # yellow
        (0.00, 0.80, 0.00),  # green
        (0.00, 0.25, 1.00),  # blue
        (0.60, 0.00, 0.90),  # purple
        (1.00, 0.60, 0.85),  # pink
        (0.55, 0.30, 0.08),  # brown
        (0.00, 0.00, 0.00),  # black
        (1.00, 1.00, 1.00),  # white
    ],
    dtype=np.float64,
)

SHAPE_NAMES = (
    "square", "circle", "triangle", "ring",
    "cross", "stripe", "pillar", "dot",
)


def _mask(rows: tuple[str, ...]) -> np.ndarray:
    return np.array([[ch == "X" for ch in row] for row in rows], dtype=bool)


SHAPE_MASKS = np.stack(
    [
        _mask(("XXXX", "XXXX", "XXXX", "XXXX")),  # square
        _mask((".XX.", "XXXX", "XXXX", ".XX.")),  # circle
        _mask(("X...", "XX..", "XXX.", "XXXX")),  # triangle
        _mask((".XX.", "X..X", "X..X", ".XX.")),  # ring
        _mask(("X..X", ".XX.", ".XX.", "X..X")),  # cross
        _mask(("....", "XXXX", "XXXX", "....")),  # stripe
        _mask((".XX.", ".XX.", ".XX.", ".XX.")),  # pillar
        _mask(("....", ".XX.", ".XX.", "....")),  # dot
    ]
)


class TaskType(str, enum.Enum):
    SINGLE_OBJECT = "single_object"
    TWO_OBJECTS = "two_objects"
    COLORS = "colors"
    COLOR_ATTRIBUTION = "color_attribution"
    POSITION = "position"
    COUNTING = "counting"


class Relation(str, enum.Enum):
    LEFT_OF = "left of"
    RIGHT_OF = "right of"
    ABOVE = "above"
    BELOW = "below"


RELATIONS = tuple(Relation)
COUNT_WORDS = ("one", "two", "three", "four")


@dataclass(frozen=True)
class SceneObject:
    shape_id: int
    color_id: int
    cell: tuple[int, int]  # (row, col) on the GRID x GRID lattice


@dataclass(frozen=True)
class SceneSpec:
    task_type: TaskType
    objects: tuple[SceneObject, ...]
    relation: Relation | None = None
    count: int | None = None

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ConfigError("scene objects must occupy distinct cells")
        for o in self.objects:
            if not (0 <= o.shape_id < len(SHAPE_NAMES)):
                raise ConfigError(f"shape_id out of range: {o.shape_id}")
            if not (0 <= o.color_id < len(COLOR_NAMES)):
                raise ConfigError(f"color_id out of range: {o.color_id}")
            r, c = o.cell
            if not (0 <= r < GRID and 0 <= c < GRID):
                raise ConfigError(f"cell out of range: {o.cell}")
        if (self.relation is not None) != (self.task_type is TaskType.POSITION):
            raise ConfigError("relation is set exactly for position scenes")
        if (self.count is not None) != (self.task_type is TaskType.COUNTING):
            raise ConfigError("count is set exactly for counting scenes")
        if self.relation is not None:
            a, b = self.objects[0].cell, self.objects[1].cell
            if not _relation_holds(self.relation, a, b):
                raise ConfigError(
                    f"relation {self.relation.value!r} inconsistent with cells {a}, {b}"
                )
        if self.count is not None and len(self.objects) != self.count:
            raise ConfigError("counting scene must have exactly `count` objects")

    def to_dict(self) -> dict:
        d = {
            "task_type": self.task_type.value,
            "objects": [
                {"shape": o.shape_id, "color": o.color_id, "cell": list(o.cell)}
                for o in self.objects
            ],
        }
        if self.relation is not None:
            d["relation"] = self.relation.value
        if self.count is not None:
            d["count"] = self.count
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            task_type=TaskType(d["task_type"]),
            objects=tuple(
                SceneObject(o["shape"], o["color"], (o["cell"][0], o["cell"][1]))
                for o in d["objects"]
            ),
            relation=Relation(d["relation"]) if "relation" in d else None,
            count=d.get("count"),
        )


def _relation_holds(rel: Relation, a: tuple[int, int], b: tuple[int, int]) -> bool:
    """Relations require a shared row (left/right) or column (above/below),
    which makes the four-way choice set mutually exclusive."""
    if rel is Relation.LEFT_OF:
        return a[0] == b[0] and a[1] < b[1]
    if rel is Relation.RIGHT_OF:
        return a[0] == b[0] and a[1] > b[1]
    if rel is Relation.ABOVE:
        return a[1] == b[1] and a[0] < b[0]
    return a[1] == b[1] and a[0] > b[0]


# --------------------------------------------------------------------------
# scene sampling
# --------------------------------------------------------------------------

def sample_scene(
    task_type: TaskType,
    rng_seed,
    allow_distractors: bool = False,
) -> SceneSpec:
    """Draw a random valid scene for the task; deterministic in the seed."""
    rng = as_rng(rng_seed)
    task_type = TaskType(task_type)
    all_cells = [(r, c) for r in range(GRID) for c in range(GRID)]

    def pick_cells(n):
        idx = rng.choice(len(all_cells), size=n, replace=False)
        return [all_cells[i] for i in idx]

    if task_type in (TaskType.SINGLE_OBJECT, TaskType.COLORS):
        shape = int(rng.integers(len(SHAPE_NAMES)))
        color = int(rng.integers(len(COLOR_NAMES)))
        n_extra = int(rng.integers(1, 3)) if allow_distractors else 0
        cells = pick_cells(1 + n_extra)
        objects = [SceneObject(shape, color, cells[0])]
        for cell in cells[1:]:
            other = int(rng.choice([s for s in range(len(SHAPE_NAMES)) if s != shape]))
            objects.append(SceneObject(other, int(rng.integers(len(COLOR_NAMES))), cell))
        return SceneSpec(task_type, tuple(objects))

    if task_type in (TaskType.TWO_OBJECTS, TaskType.COLOR_ATTRIBUTION):
        sa, sb = rng.choice(len(SHAPE_NAMES), size=2, replace=False)
        ca = int(rng.integers(len(COLOR_NAMES)))
        cb = int(rng.choice([c for c in range(len(COLOR_NAMES)) if c != ca]))
        cells = pick_cells(2)
        return SceneSpec(
            task_type,
            (SceneObject(int(sa), ca, cells[0]), SceneObject(int(sb), cb, cells[1])),
        )

    if task_type is TaskType.POSITION:
        sa, sb = rng.choice(len(SHAPE_NAMES), size=2, replace=False)
        ca = int(rng.integers(len(COLOR_NAMES)))
        cb = int(rng.integers(len(COLOR_NAMES)))
        relation = RELATIONS[int(rng.integers(4))]
        line = int(rng.integers(GRID))
        i, j = sorted(int(v) for v in rng.choice(GRID, size=2, replace=False))
        if relation is Relation.LEFT_OF:
            cell_a, cell_b = (line, i), (line, j)
        elif relation is Relation.RIGHT_OF:
            cell_a, cell_b = (line, j), (line, i)
        elif relation is Relation.ABOVE:
            cell_a, cell_b = (i, line), (j, line)
        else:
            cell_a, cell_b = (j, line), (i, line)
        return SceneSpec(
            task_type,
            (SceneObject(int(sa), ca, cell_a), SceneObject(int(sb), cb, cell_b)),
            relation=relation,
        )

    if task_type is TaskType.COUNTING:
        count = int(rng.integers(1, 5))
        shape = int(rng.integers(len(SHAPE_NAMES)))
        color = int(rng.integers(len(COLOR_NAMES)))
        cells = pick_cells(count)
        return SceneSpec(
            task_type,
            tuple(SceneObject(shape, color, cell) for cell in cells),
            count=count,
        )

    raise ConfigError(f"unknown task type {task_type!r}")


# --------------------------------------------------------------------------
# rendering styles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Style:
    """A procedural render variant ("domain").

    Object colors are mapped affinely (scale * rgb + shift) and drawn over a
    style-specific background; ``noise_amp`` adds seeded per-pixel jitter so
    renders of the same scene vary with the seed.
    """

    name: str
    background: tuple[float, float, float]
    checker_amp: float  # background luminance checkering, 0 disables
    scale: float
    shift: float
    noise_amp: float

    def background_image(self) -> np.ndarray:
        bg = np.empty(IMAGE_SHAPE, dtype=np.float64)
        bg[:] = np.asarray(self.background)
        if self.checker_amp:
            yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
            checker = ((yy // 2 + xx // 2) % 2) * 2.0 - 1.0
            bg += self.checker_amp * checker[..., None]
        return bg

    def object_color(self, color_id: int) -> np.ndarray:
        return self.scale * COLOR_RGB[color_id] + self.shift

    def min_separation(self) -> float:
        """Smallest distance between any mapped object color and the background."""
        bg = self.background_image().reshape(-1, 3)
        cols = self.scale * COLOR_RGB + self.shift
        return float(
            np.min(np.linalg.norm(cols[:, None, :] - bg[None, :, :], axis=-1))
        )


STYLES: dict[str, Style] = {
    "flat": Style("flat", (0.50, 0.50, 0.50), 0.0, 1.00, 0.00, 0.01),
    "noir": Style("noir", (0.10, 0.12, 0.16), 0.0, 0.70, 0.25, 0.01),
    "canvas": Style("canvas", (0.82, 0.78, 0.70), 0.035, 0.85, 0.12, 0.01),
}


def get_style(style) -> Style:
    if isinstance(style, Style):
        return style
    try:
        return STYLES[style]
    except KeyError:
        raise ConfigError(f"unknown style {style!r}; have {sorted(STYLES)}") from None


def render(scene: SceneSpec, style, rng_seed) -> np.ndarray:
    """Render a scene to a float32 (16, 16, 3) image in [0, 1].

    Pure function of (scene, style, seed).
    """
    st = get_style(style)
    img = st.background_image()
    for obj in scene.objects:
        r, c = obj.cell
        window = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
        window[SHAPE_MASKS[obj.shape_id]] = st.object_color(obj.color_id)
    rng = as_rng(rng_seed)
    img += st.noise_amp * rng.uniform(-1.0, 1.0, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# caption grammar
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    """Names used by the caption grammar. The default is the toy shape and
    color lists; larger vocabularies (e.g. natural object names, possibly
    multi-word) can be supplied for prompt-construction utilities."""

    shapes: tuple[str, ...] = SHAPE_NAMES
    colors: tuple[str, ...] = COLOR_NAMES
    plurals: tuple[str, ...] | None = None

    def plural(self, shape: str) -> str:
        if self.plurals is not None:
            return self.plurals[self.shapes.index(shape)]
        return shape + "es" if shape.endswith("s") else shape + "s"

    def singular(self, plural_form: str) -> str | None:
        for s in self.shapes:
            if self.plural(s) == plural_form:
                return s
        return None


TOY_VOCAB = Vocabulary()


@dataclass(frozen=True)
class ParsedPrompt:
    """Facts asserted by a caption: a list of (color-or-None, shape) mentions
    plus an optional relation between the first two, or a count of the first."""

    task_type: TaskType
    mentions: tuple[tuple[str | None, str], ...]
    relation: Relation | None = None
    count: int | None = None


def caption(scene: SceneSpec) -> str:
    """Positive caption for a scene under the fixed grammar."""
    t = scene.task_type
    obj = scene.objects[0]
    shape = SHAPE_NAMES[obj.shape_id]
    color = COLOR_NAMES[obj.color_id]
    if t in (TaskType.SINGLE_OBJECT, TaskType.COLORS):
        return f"a photo of a {color} {shape}"
    if t is TaskType.TWO_OBJECTS:
        shape_b = SHAPE_NAMES[scene.objects[1].shape_id]
        return f"a photo of a {shape} and a {shape_b}"
    if t is TaskType.COLOR_ATTRIBUTION:
        b = scene.objects[1]
        return (
            f"a photo of a {color} {shape} and a "
            f"{COLOR_NAMES[b.color_id]} {SHAPE_NAMES[b.shape_id]}"
        )
    if t is TaskType.POSITION:
        shape_b = SHAPE_NAMES[scene.objects[1].shape_id]
        return f"a photo of a {shape} {scene.relation.value} a {shape_b}"
    if t is TaskType.COUNTING:
        word = COUNT_WORDS[scene.count - 1]
        noun = shape if scene.count == 1 else TOY_VOCAB.plural(shape)
        return f"a photo of {word} {noun}"
    raise ConfigError(f"unknown task type {t!r}")


def _alt(names) -> str:
    return "|".join(re.escape(n) for n in sorted(names, key=len, reverse=True))


def parse_caption(text: str, vocab: Vocabulary = TOY_VOCAB) -> ParsedPrompt:
    """Parse a caption back into its asserted facts.

    Raises ConfigError for text outside the grammar. A caption mentioning one
    colored object is shared by the single-object and colors tasks; it parses
    as SINGLE_OBJECT (benchmark items carry their task type explicitly).
    """
    sh = _alt(vocab.shapes)
    co = _alt(vocab.colors)
    rel = _alt([r.value for r in Relation])
    num = _alt(COUNT_WORDS)
    plurals = {vocab.plural(s): s for s in vocab.shapes}
    pl = _alt(list(plurals) + list(vocab.shapes))

    m = re.fullmatch(
        rf"a photo of a (?P<c1>{co}) (?P<s1>{sh}) and a (?P<c2>{co}) (?P<s2>{sh})",
        text,
    )
    if m:
        return ParsedPrompt(
            TaskType.COLOR_ATTRIBUTION,
            ((m["c1"], m["s1"]), (m["c2"], m["s2"])),
        )
    m = re.fullmatch(rf"a photo of a (?P<s1>{sh}) and a (?P<s2>{sh})", text)
    if m:
        return ParsedPrompt(TaskType.TWO_OBJECTS, ((None, m["s1"]), (None, m["s2"])))
    m = re.fullmatch(rf"a photo of a (?P<s1>{sh}) (?P<rel>{rel}) a (?P<s2>{sh})", text)
    if m:
        return ParsedPrompt(
            TaskType.POSITION,
            ((None, m["s1"]), (None, m["s2"])),
            relation=Relation(m["rel"]),
        )
    m = re.fullmatch(rf"a photo of a (?P<c1>{co}) (?P<s1>{sh})", text)
    if m:
        return ParsedPrompt(TaskType.SINGLE_OBJECT, ((m["c1"], m["s1"]),))
    m = re.fullmatch(rf"a photo of (?P<num>{num}) (?P<noun>{pl})", text)
    if m:
        count = COUNT_WORDS.index(m["num"]) + 1
        noun = m["noun"]
        shape = noun if noun in vocab.shapes else plurals.get(noun)
        if shape is None:
            raise ConfigError(f"unknown shape noun {noun!r}")
        return ParsedPrompt(TaskType.COUNTING, ((None, shape),), count=count)
    raise ConfigError(f"caption outside the grammar: {text!r}")


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------

def _facts_hold(
    parsed: ParsedPrompt,
    objects: list[tuple[str, str, tuple[int, int]]],
) -> bool:
    """Check asserted facts against (color, shape, cell) observations.

    Presence semantics: mentioned objects must appear; unmentioned extras are
    allowed. Counting asserts the exact number of instances of the shape.
    """

    def matches(mention, obj):
        color, shape = mention
        return obj[1] == shape and (color is None or obj[0] == color)

    if parsed.task_type is TaskType.COUNTING:
        (_, shape), = parsed.mentions
        return sum(1 for o in objects if o[1] == shape) == parsed.count

    if parsed.task_type is TaskType.POSITION:
        ma, mb = parsed.mentions
        for a in objects:
            for b in objects:
                if a is b:
                    continue
                if matches(ma, a) and matches(mb, b) and _relation_holds(
                    parsed.relation, a[2], b[2]
                ):
                    return True
        return False

    # presence of each mention on distinct objects
    remaining = list(objects)
    for mention in parsed.mentions:
        hit = next((o for o in remaining if matches(mention, o)), None)
        if hit is None:
            return False
        remaining.remove(hit)
    return True


def scene_observations(scene: SceneSpec) -> list[tuple[str, str, tuple[int, int]]]:
    return [
        (COLOR_NAMES[o.color_id], SHAPE_NAMES[o.shape_id], o.cell)
        for o in scene.objects
    ]


def verify(scene: SceneSpec, prompt: str) -> bool:
    """True iff the prompt's asserted facts hold in the scene.

    Rejects prompts outside the grammar with ConfigError.
    """
    parsed = parse_caption(prompt)
    return _facts_hold(parsed, scene_observations(scene))


# --------------------------------------------------------------------------
# dataset on disk: PNG images + JSON index
# --------------------------------------------------------------------------

def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.astype(np.float32)


def build_dataset(
    out_dir,
    task_counts: dict[TaskType, int],
    style,
    seed: int,
    allow_distractors: bool = False,
    config_hash: str | None = None,
) -> dict:
    """Render a captioned scene dataset into ``out_dir``.

    Layout: images/<id>.png plus index.json mapping id -> scene, caption,
    style, seed. Returns the index dict.
    """
    st = get_style(style)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence([seed, _style_tag(st.name)])
    entries = {}
    i = 0
    for task, n in sorted(task_counts.items(), key=lambda kv: kv[0].value):
        task_seq = root.spawn(1)[0]
        seeds = task_seq.generate_state(2 * n, dtype=np.uint64)
        for k in range(n):
            scene = sample_scene(task, int(seeds[2 * k]), allow_distractors)
            img = render(scene, st, int(seeds[2 * k + 1]))
            image_id = f"{st.name}-{task.value}-{k:05d}"
            save_png(out_dir / "images" / f"{image_id}.png", img)
            entries[image_id] = {
                "scene": scene.to_dict(),
                "caption": caption(scene),
                "style": st.name,
                "scene_seed": int(seeds[2 * k]),
                "render_seed": int(seeds[2 * k + 1]),
            }
            i += 1
    index = {
        "style": st.name,
        "seed": seed,
        "config_hash": config_hash,
        "items": entries,
    }
    with open(out_dir / "index.json", "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)
    return index


def load_dataset(dataset_dir) -> tuple[np.ndarray, list[str], dict]:
    """Load (images, captions, index) from a dataset directory."""
    dataset_dir = Path(dataset_dir)
    with open(dataset_dir / "index.json") as f:
        index = json.load(f)
    ids = sorted(index["items"])
    images = np.stack(
        [load_png(dataset_dir / "images" / f"{i}.png") for i in ids]
    )
    captions = [index["items"][i]["caption"] for i in ids]
    return images, captions, index


def _style_tag(name: str) -> int:
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") % (2**31)
