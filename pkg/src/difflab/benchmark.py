"""Self-generated benchmark: build (generate -> verify -> Full/Correct),
construct per-task negative prompts, and evaluate classifiers in-domain and
cross-domain with drop rates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import classifier as clf
from . import scenes
from .denoiser import DenoiserModel, sample
from .scenes import (
    CELL,
    COLOR_NAMES,
    COUNT_WORDS,
    GRID,
    RELATIONS,
    SHAPE_MASKS,
    SHAPE_NAMES,
    ParsedPrompt,
    Relation,
    SceneSpec,
    Style,
    TaskType,
    TOY_VOCAB,
    Vocabulary,
    caption,
    get_style,
    load_png,
    parse_caption,
    sample_scene,
    save_png,
)
from .sct import ScoreTensor
from .validation import ConfigError, as_rng

DEFAULT_NEGATIVE_CAPS = {
    TaskType.SINGLE_OBJECT: None,     # all other shapes
    TaskType.TWO_OBJECTS: 100,        # 101 prompts total when vocab allows
    TaskType.COLOR_ATTRIBUTION: 19,
}


# --------------------------------------------------------------------------
# negative prompts
# --------------------------------------------------------------------------

def negatives_for(task_type: TaskType, positive: str,
                  vocab: Vocabulary = TOY_VOCAB, cap: int | None = None,
                  seed: int = 0) -> list[str]:
    """Distractor prompts from the task's closed choice set.

    Duplicate-free, never equal to the positive, deterministic in the seed.
    """
    task_type = TaskType(task_type)
    parsed = parse_caption(positive, vocab)
    rng = as_rng(seed)
    if cap is None:
        cap = DEFAULT_NEGATIVE_CAPS.get(task_type)

    if task_type is TaskType.POSITION:
        rel = parsed.relation.value
        return [positive.replace(rel, r.value) for r in RELATIONS
                if r is not parsed.relation]

    if task_type is TaskType.COLORS:
        color, shape = parsed.mentions[0]
        return [f"a photo of a {c} {shape}" for c in vocab.colors if c != color]

    if task_type is TaskType.COUNTING:
        (_, shape), = parsed.mentions
        negs = []
        for i, word in enumerate(COUNT_WORDS):
            if i + 1 == parsed.count:
                continue
            noun = shape if i == 0 else vocab.plural(shape)
            negs.append(f"a photo of {word} {noun}")
        return negs

    if task_type is TaskType.SINGLE_OBJECT:
        color, shape = parsed.mentions[0]
        pool = [f"a photo of a {color} {s}" for s in vocab.shapes if s != shape]
        return _sampled(pool, cap, rng)

    if task_type is TaskType.TWO_OBJECTS:
        (_, sa), (_, sb) = parsed.mentions
        others = [s for s in vocab.shapes if s not in (sa, sb)]
        pool = [f"a photo of a {sa} and a {x}" for x in others]
        pool += [f"a photo of a {x} and a {sb}" for x in others]
        return _sampled(pool, cap, rng)

    if task_type is TaskType.COLOR_ATTRIBUTION:
        (ca, sa), (cb, sb) = parsed.mentions
        swapped = f"a photo of a {cb} {sa} and a {ca} {sb}"
        pool = [
            f"a photo of a {c1} {sa} and a {c2} {sb}"
            for c1 in vocab.colors
            for c2 in vocab.colors
            if c1 != c2 and (c1, c2) != (ca, cb) and (c1, c2) != (cb, ca)
        ]
        negs = [swapped] if swapped != positive else []
        take = None if cap is None else max(0, cap - len(negs))
        return negs + _sampled(pool, take, rng)

    raise ConfigError(f"unknown task type {task_type!r}")


def _sampled(pool: list[str], cap: int | None, rng) -> list[str]:
    if cap is None or cap >= len(pool):
        return list(pool)
    idx = rng.choice(len(pool), size=cap, replace=False)
    return [pool[i] for i in sorted(idx)]


# --------------------------------------------------------------------------
# pixel-level scene parsing (the programmatic stand-in for human filtering)
# --------------------------------------------------------------------------

def parse_image(image, style) -> list[tuple[str, str, tuple[int, int]]]:
    """Detect (color, shape, cell) objects in a rendered or generated image.

    Connected components of the "differs from the style background" mask are
    snapped to grid cells; each occupied cell is classified by template
    correlation over the shape masks and nearest-neighbor color lookup.
    """
    st = get_style(style)
    img = np.asarray(image, dtype=np.float64)
    bg = st.background_image()
    dist = np.linalg.norm(img - bg, axis=-1)
    threshold = 0.45 * st.min_separation()
    mask = dist > threshold

    labels, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    cell_pixels: dict[tuple[int, int], int] = {}
    for comp in range(1, n_comp + 1):
        ys, xs = np.nonzero(labels == comp)
        if len(ys) < 3:
            continue  # speckle
        for r in range(GRID):
            for c in range(GRID):
                inside = ((ys // CELL == r) & (xs // CELL == c)).sum()
                if inside:
                    cell_pixels[(r, c)] = cell_pixels.get((r, c), 0) + inside

    detections = []
    inv_scale = 1.0 / st.scale
    for (r, c), support in cell_pixels.items():
        if support < 4:  # bleed from a neighboring cell
            continue
        window = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
        wdist = dist[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
        on = wdist > threshold
        # template correlation over {-1, +1} encodings
        enc = np.where(on, 1.0, -1.0)
        scores = [(enc * np.where(m, 1.0, -1.0)).sum() for m in SHAPE_MASKS]
        shape_id = int(np.argmax(scores))
        tmpl = SHAPE_MASKS[shape_id] & on
        if tmpl.sum() == 0:
            continue
        mean_rgb = window[tmpl].mean(axis=0)
        raw = (mean_rgb - st.shift) * inv_scale
        color_id = int(np.argmin(np.linalg.norm(scenes.COLOR_RGB - raw, axis=1)))
        detections.append((COLOR_NAMES[color_id], SHAPE_NAMES[shape_id], (r, c)))
    return detections


def verify_image(image, prompt: str, style) -> bool:
    """True iff the prompt's asserted facts hold in the rendered pixels."""
    parsed = parse_caption(prompt)
    return scenes._facts_hold(parsed, parse_image(image, style))


# --------------------------------------------------------------------------
# benchmark construction
# --------------------------------------------------------------------------

@dataclass
class BenchmarkItem:
    item_id: str
    image: np.ndarray
    source_prompt: str
    positive: str
    negatives: tuple[str, ...]
    task_type: TaskType
    producer: str
    correct: bool
    source_scene: SceneSpec | None = None

    def __post_init__(self):
        if self.positive in self.negatives:
            raise ConfigError("positive prompt duplicated among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ConfigError("duplicate negative prompts")
        if self.source_scene is not None and not scenes.verify(
            self.source_scene, self.positive
        ):
            raise ConfigError("positive prompt does not verify against scene")

    @property
    def prompts(self) -> list[str]:
        return [self.positive, *self.negatives]


@dataclass
class Benchmark:
    producer: str
    style: str
    items: list[BenchmarkItem]
    config_hash: str | None = None

    def full(self) -> list[BenchmarkItem]:
        return list(self.items)

    def correct(self) -> list[BenchmarkItem]:
        return [it for it in self.items if it.correct]

    def tasks(self) -> list[TaskType]:
        seen = []
        for it in self.items:
            if it.task_type not in seen:
                seen.append(it.task_type)
        return seen

    def generation_accuracy(self, task: TaskType | None = None) -> tuple[int, int]:
        items = [it for it in self.items
                 if task is None or it.task_type is task]
        return sum(it.correct for it in items), len(items)


def prompt_suite(tasks: dict[TaskType, int], seed: int,
                 allow_distractors: bool = False) -> list[tuple[TaskType, str]]:
    """Distinct positive prompts per task, drawn from the scene sampler."""
    suite = []
    root = np.random.SeedSequence(seed)
    for task, n in sorted(tasks.items(), key=lambda kv: kv[0].value):
        seen = set()
        child = root.spawn(1)[0]
        seeds = child.generate_state(50 * max(n, 1), dtype=np.uint64)
        k = 0
        for s in seeds:
            if len(seen) >= n:
                break
            prompt = caption(sample_scene(task, int(s), allow_distractors))
            if prompt not in seen:
                seen.add(prompt)
                suite.append((task, prompt))
            k += 1
        if len([1 for t, _ in suite if t is task]) < n:
            raise ConfigError(f"could not draw {n} distinct prompts for {task}")
    return suite


def build_benchmark(model: DenoiserModel, suite, images_per_prompt: int = 4,
                    seed: int = 0, style="flat", producer: str | None = None,
                    n_sample_steps: int = 60, guidance_scale: float = 0.0,
                    negative_seed: int = 0, config_hash=None) -> Benchmark:
    """Generate images for every prompt and split them into Full/Correct.

    Correctness is decided by the pixel-level parser against the generation
    prompt; generation accuracy is len(Correct)/len(Full).
    """
    if not model.trained:
        raise ConfigError("model is not trained; cannot build a benchmark")
    st = get_style(style)
    producer = producer or f"toy-{model.kind}-{st.name}"
    root = np.random.SeedSequence(seed)
    items = []
    for p_i, (task, prompt) in enumerate(suite):
        negs = tuple(negatives_for(task, prompt, seed=negative_seed))
        child = root.spawn(1)[0]
        sample_seeds = child.generate_state(images_per_prompt, dtype=np.uint64)
        for r in range(images_per_prompt):
            img = sample(model, prompt, n_sample_steps, guidance_scale,
                         seed=int(sample_seeds[r]))
            ok = verify_image(img, prompt, st)
            items.append(BenchmarkItem(
                item_id=f"{producer}-{task.value}-{p_i:04d}-{r}",
                image=img,
                source_prompt=prompt,
                positive=prompt,
                negatives=negs,
                task_type=task,
                producer=producer,
                correct=ok,
            ))
    return Benchmark(producer=producer, style=st.name, items=items,
                     config_hash=config_hash)


def benchmark_from_scenes(scene_list, style, seed: int = 0,
                          producer: str | None = None,
                          negative_seed: int = 0) -> Benchmark:
    """Oracle benchmark rendered directly from ground-truth scenes."""
    st = get_style(style)
    producer = producer or f"render-{st.name}"
    root = np.random.SeedSequence(seed)
    items = []
    for i, scene in enumerate(scene_list):
        pos = caption(scene)
        render_seed = int(root.spawn(1)[0].generate_state(1, dtype=np.uint64)[0])
        img = scenes.render(scene, st, render_seed)
        items.append(BenchmarkItem(
            item_id=f"{producer}-{scene.task_type.value}-{i:04d}",
            image=img,
            source_prompt=pos,
            positive=pos,
            negatives=tuple(negatives_for(scene.task_type, pos,
                                          seed=negative_seed)),
            task_type=scene.task_type,
            producer=producer,
            correct=verify_image(img, pos, st),
            source_scene=scene,
        ))
    return Benchmark(producer=producer, style=st.name, items=items)


# --------------------------------------------------------------------------
# benchmark directory I/O
# --------------------------------------------------------------------------

def save_benchmark(out_dir, bench: Benchmark) -> None:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = {
        "producer": bench.producer,
        "style": bench.style,
        "config_hash": bench.config_hash,
        "items": [],
    }
    for it in bench.items:
        save_png(out_dir / "images" / f"{it.item_id}.png", it.image)
        entry = {
            "id": it.item_id,
            "task": it.task_type.value,
            "positive": it.positive,
            "negatives": list(it.negatives),
            "source_prompt": it.source_prompt,
            "producer": it.producer,
            "correct": it.correct,
        }
        if it.source_scene is not None:
            entry["scene"] = it.source_scene.to_dict()
        manifest["items"].append(entry)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_benchmark(bench_dir) -> Benchmark:
    bench_dir = Path(bench_dir)
    with open(bench_dir / "manifest.json") as f:
        manifest = json.load(f)
    items = []
    for entry in manifest["items"]:
        items.append(BenchmarkItem(
            item_id=entry["id"],
            image=load_png(bench_dir / "images" / f"{entry['id']}.png"),
            source_prompt=entry["source_prompt"],
            positive=entry["positive"],
            negatives=tuple(entry["negatives"]),
            task_type=TaskType(entry["task"]),
            producer=entry["producer"],
            correct=entry["correct"],
            source_scene=(SceneSpec.from_dict(entry["scene"])
                          if "scene" in entry else None),
        ))
    return Benchmark(producer=manifest["producer"], style=manifest["style"],
                     items=items, config_hash=manifest.get("config_hash"))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class TaskResult:
    task: TaskType
    n_full: int
    n_correct: int
    acc_full: float
    acc_correct: float | None
    generation_accuracy: float
    small_sample: bool  # flagged when the Correct set is thin (< 20 items)


@dataclass
class EvalReport:
    evaluator: str
    producer: str
    per_task: dict[str, TaskResult]
    micro_full: float
    micro_correct: float | None
    macro_full: float
    macro_correct: float | None

    def to_dict(self) -> dict:
        return {
            "evaluator": self.evaluator,
            "producer": self.producer,
            "per_task": {
                k: {
                    "n_full": r.n_full,
                    "n_correct": r.n_correct,
                    "acc_full": r.acc_full,
                    "acc_correct": r.acc_correct,
                    "generation_accuracy": r.generation_accuracy,
                    "small_sample": r.small_sample,
                }
                for k, r in self.per_task.items()
            },
            "micro_full": self.micro_full,
            "micro_correct": self.micro_correct,
            "macro_full": self.macro_full,
            "macro_correct": self.macro_correct,
        }


def score_benchmark(model: DenoiserModel, bench: Benchmark,
                    eval_set: clf.EvalSet, metric: str = "l2",
                    evaluator: str | None = None,
                    config_hash=None) -> ScoreTensor:
    """ScoreTensor over every Full item; row 0 is always the positive."""
    images = np.stack([it.image for it in bench.items])
    prompts = [it.prompts for it in bench.items]
    ids = [it.item_id for it in bench.items]
    return clf.score_errors(
        model, images, prompts, eval_set, metric=metric, image_ids=ids,
        producer=evaluator or f"toy-{model.kind}", config_hash=config_hash,
    )


def _tensor_for(score_source, bench: Benchmark) -> ScoreTensor:
    if isinstance(score_source, ScoreTensor):
        ids = [it.item_id for it in bench.items]
        if list(score_source.image_ids) != ids:
            raise ConfigError("score tensor does not cover this benchmark")
        return score_source
    model, eval_set = score_source
    return score_benchmark(model, bench, eval_set)


def evaluate(score_source, bench: Benchmark, weights="uniform",
             evaluator: str = "evaluator") -> EvalReport:
    """Accuracy of predicting each item's positive among its candidates.

    ``score_source`` is either a ScoreTensor covering the benchmark or a
    (model, eval_set) pair. Reported on Full and Correct, with micro
    (per-item) and macro (mean of per-task) averages.
    """
    tensor = _tensor_for(score_source, bench)
    if isinstance(weights, str) and weights == "uniform":
        from .weights import WeightFunction
        weights = WeightFunction.uniform()
    hits = {}
    t_grid = None
    for i, item in enumerate(bench.items):
        e = tensor.image_errors(i)
        hits[item.item_id] = clf.predict(e, weights, t=_grid_t(tensor)) == 0
    per_task = {}
    for task in bench.tasks():
        full = [it for it in bench.items if it.task_type is task]
        corr = [it for it in full if it.correct]
        acc_full = float(np.mean([hits[it.item_id] for it in full]))
        acc_corr = (float(np.mean([hits[it.item_id] for it in corr]))
                    if corr else None)
        per_task[task.value] = TaskResult(
            task=task,
            n_full=len(full),
            n_correct=len(corr),
            acc_full=acc_full,
            acc_correct=acc_corr,
            generation_accuracy=len(corr) / len(full),
            small_sample=len(corr) < 20,
        )
    item_hits_full = [hits[it.item_id] for it in bench.items]
    item_hits_corr = [hits[it.item_id] for it in bench.items if it.correct]
    macro_corr = [r.acc_correct for r in per_task.values()
                  if r.acc_correct is not None]
    return EvalReport(
        evaluator=evaluator,
        producer=bench.producer,
        per_task=per_task,
        micro_full=float(np.mean(item_hits_full)),
        micro_correct=(float(np.mean(item_hits_corr))
                       if item_hits_corr else None),
        macro_full=float(np.mean([r.acc_full for r in per_task.values()])),
        macro_correct=float(np.mean(macro_corr)) if macro_corr else None,
    )


def _grid_t(tensor: ScoreTensor) -> np.ndarray:
    j = np.arange(1, tensor.n_timesteps + 1, dtype=np.float64)
    if tensor.eval_bias == "later":
        return 0.5 + 0.5 * j / tensor.n_timesteps
    return j / tensor.n_timesteps


def cross_domain_matrix(reports: list[EvalReport],
                        in_domain: dict[str, str],
                        split: str = "correct") -> dict:
    """Accuracy matrix plus drop rates.

    ``reports`` covers (evaluator, producer) pairs; ``in_domain`` maps each
    evaluator to its own producer. Drop rate = in-domain accuracy minus the
    mean of cross-domain accuracies, per evaluator and task.
    """
    acc = {}
    for rep in reports:
        for task, r in rep.per_task.items():
            a = r.acc_correct if split == "correct" else r.acc_full
            if a is not None:
                acc[(rep.evaluator, rep.producer, task)] = a
    evaluators = sorted({e for e, _, _ in acc})
    producers = sorted({p for _, p, _ in acc})
    tasks = sorted({t for _, _, t in acc})
    for ev in evaluators:
        if ev not in in_domain:
            raise ConfigError(f"no in-domain producer declared for {ev!r}")
        if not any((ev, in_domain[ev], t) in acc for t in tasks):
            raise ConfigError(f"no in-domain results for evaluator {ev!r}")
    delta = {}
    for ev in evaluators:
        for task in tasks:
            own = acc.get((ev, in_domain[ev], task))
            others = [acc[(ev, p, task)] for p in producers
                      if p != in_domain[ev] and (ev, p, task) in acc]
            if own is None or not others:
                delta[(ev, task)] = None  # undefined without a cross domain
            else:
                delta[(ev, task)] = own - float(np.mean(others))
    return {
        "evaluators": evaluators,
        "producers": producers,
        "tasks": tasks,
        "accuracy": acc,
        "drop_rate": delta,
        "split": split,
    }


def gen_disc_correlation(pairs) -> float:
    """Pearson correlation between generation and discrimination accuracy."""
    pairs = [(float(g), float(d)) for g, d in pairs]
    if len(pairs) < 3:
        raise ConfigError("need at least 3 (generation, discrimination) pairs")
    g = np.array([p[0] for p in pairs], dtype=np.float64)
    d = np.array([p[1] for p in pairs], dtype=np.float64)
    gc = g - g.mean()
    dc = d - d.mean()
    denom = np.sqrt((gc * gc).sum()) * np.sqrt((dc * dc).sum())
    if denom == 0.0:
        raise ConfigError("zero variance in correlation input")
    return float((gc * dc).sum() / denom)
