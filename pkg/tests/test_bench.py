import numpy as np
import pytest
import scipy.stats

import difflab as d
from difflab import benchmark as bm
from difflab import classifier as clf
from difflab.scenes import TaskType, Vocabulary, COLOR_NAMES
from difflab.validation import ConfigError
from difflab.weights import WeightFunction

T = TaskType

GENEVAL_LIKE_OBJECTS = tuple(
    f"object{i:02d}" for i in range(80)
)


# --------------------------------------------------------------------------
# negatives
# --------------------------------------------------------------------------

def test_position_negatives_wording():
    vocab = Vocabulary(shapes=("parking meter", "teddy bear"))
    negs = bm.negatives_for(
        T.POSITION, "a photo of a parking meter left of a teddy bear", vocab
    )
    assert len(negs) == 3
    assert any("right of" in n for n in negs)
    assert any("above" in n for n in negs)
    assert any("below" in n for n in negs)


def test_counting_negatives():
    negs = bm.negatives_for(T.COUNTING, "a photo of two circles")
    assert set(negs) == {"a photo of one circle", "a photo of three circles",
                         "a photo of four circles"}


def test_colors_negatives():
    negs = bm.negatives_for(T.COLORS, "a photo of a red square")
    assert len(negs) == 9
    assert all("square" in n for n in negs)
    assert "a photo of a red square" not in negs


def test_two_objects_101_prompts_with_large_vocab():
    vocab = Vocabulary(shapes=GENEVAL_LIKE_OBJECTS)
    pos = f"a photo of a {vocab.shapes[0]} and a {vocab.shapes[1]}"
    negs = bm.negatives_for(T.TWO_OBJECTS, pos, vocab)
    assert len(negs) == 100  # 101 candidate prompts with the positive
    assert len(set(negs)) == 100
    assert pos not in negs
    for n in negs:
        assert vocab.shapes[0] in n or vocab.shapes[1] in n


def test_two_objects_small_vocab_capped_by_pool():
    pos = "a photo of a square and a circle"
    negs = bm.negatives_for(T.TWO_OBJECTS, pos)
    # 6 remaining shapes on either side
    assert len(negs) == 12


def test_single_object_negatives_cap():
    pos = "a photo of a red square"
    negs = bm.negatives_for(T.SINGLE_OBJECT, pos)
    assert len(negs) == 7
    capped = bm.negatives_for(T.SINGLE_OBJECT, pos, cap=3, seed=5)
    assert len(capped) == 3 and set(capped) <= set(negs)


def test_color_attribution_negatives_include_swap():
    pos = "a photo of a red square and a blue circle"
    negs = bm.negatives_for(T.COLOR_ATTRIBUTION, pos)
    assert "a photo of a blue square and a red circle" in negs
    assert len(negs) == 19
    assert len(set(negs)) == len(negs)


def test_negatives_deterministic():
    pos = "a photo of a red square"
    a = bm.negatives_for(T.SINGLE_OBJECT, pos, cap=4, seed=3)
    b = bm.negatives_for(T.SINGLE_OBJECT, pos, cap=4, seed=3)
    assert a == b


def test_negatives_reject_unparseable():
    with pytest.raises(ConfigError):
        bm.negatives_for(T.POSITION, "not a caption")


# --------------------------------------------------------------------------
# bookkeeping
# --------------------------------------------------------------------------

def fixed_benchmark(n_correct, n_total, task=T.SINGLE_OBJECT, k_prompts=4,
                    seed=0):
    """Synthetic benchmark with a prescribed Correct count."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_total):
        sc = d.sample_scene(task, 10_000 + i)
        items.append(bm.BenchmarkItem(
            item_id=f"fix-{i:04d}",
            image=d.render(sc, "flat", i),
            source_prompt=d.caption(sc),
            positive=d.caption(sc),
            negatives=tuple(bm.negatives_for(task, d.caption(sc))),
            task_type=task,
            producer="fixture",
            correct=i < n_correct,
        ))
    return bm.Benchmark(producer="fixture", style="flat", items=items)


def test_generation_accuracy_exact_rational():
    bench = fixed_benchmark(314, 320)
    c, f = bench.generation_accuracy(T.SINGLE_OBJECT)
    assert (c, f) == (314, 320)
    assert c / f == 0.98125


def test_full_count_is_prompts_times_replicates(tiny_model):
    model, _, _ = tiny_model
    suite = bm.prompt_suite({T.SINGLE_OBJECT: 5}, seed=3)
    bench = bm.build_benchmark(model, suite, images_per_prompt=4, seed=0,
                               style="flat", n_sample_steps=4)
    assert len(bench.full()) == 5 * 4
    assert set(bench.correct()) <= set(bench.full())


def test_oracle_renderer_generation_accuracy_one():
    scenes = [d.sample_scene(T.SINGLE_OBJECT, 100 + i) for i in range(20)]
    bench = bm.benchmark_from_scenes(scenes, "flat", seed=1)
    c, f = bench.generation_accuracy()
    assert (c, f) == (20, 20)


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def tensor_with_positive_best(bench, t_s=6, seed=0, invert=False):
    rng = np.random.default_rng(seed)
    n = len(bench.items)
    k_max = max(len(it.prompts) for it in bench.items)
    errors = rng.uniform(1.0, 2.0, (n, k_max, t_s)).astype(np.float32)
    for i, it in enumerate(bench.items):
        if not invert:
            errors[i, 0] = rng.uniform(0.0, 0.5, t_s)
        else:
            errors[i, 1] = rng.uniform(0.0, 0.5, t_s)
    return d.ScoreTensor(
        errors=errors,
        prompts=[it.prompts for it in bench.items],
        image_ids=[it.item_id for it in bench.items],
        eval_seed=0,
        producer="fixture",
    )


def test_evaluate_perfect_classifier():
    bench = fixed_benchmark(10, 16)
    tensor = tensor_with_positive_best(bench)
    rep = bm.evaluate(tensor, bench, WeightFunction.uniform(), evaluator="t")
    r = rep.per_task[T.SINGLE_OBJECT.value]
    assert r.acc_full == 1.0 and r.acc_correct == 1.0
    assert r.n_full == 16 and r.n_correct == 10
    assert r.generation_accuracy == 10 / 16


def test_evaluate_random_predictor_near_chance():
    bench = fixed_benchmark(40, 200, task=T.POSITION)
    rng = np.random.default_rng(7)
    n = len(bench.items)
    errors = rng.uniform(1.0, 2.0, (n, 4, 8)).astype(np.float32)
    tensor = d.ScoreTensor(
        errors=errors, prompts=[it.prompts for it in bench.items],
        image_ids=[it.item_id for it in bench.items], eval_seed=0,
    )
    rep = bm.evaluate(tensor, bench, WeightFunction.uniform(), evaluator="t")
    acc = rep.per_task[T.POSITION.value].acc_full
    # exact binomial bounds: P(|acc - 0.25|) within 99.9% interval for n=200
    lo, hi = scipy.stats.binom.ppf([0.0005, 0.9995], 200, 0.25) / 200
    assert lo <= acc <= hi


def test_evaluate_item_order_invariance():
    bench = fixed_benchmark(10, 30)
    tensor = tensor_with_positive_best(bench, seed=5)
    rep1 = bm.evaluate(tensor, bench, WeightFunction.uniform())
    order = np.random.default_rng(1).permutation(len(bench.items))
    bench2 = bm.Benchmark(
        producer=bench.producer, style=bench.style,
        items=[bench.items[i] for i in order],
    )
    tensor2 = d.ScoreTensor(
        errors=tensor.errors[order],
        prompts=[tensor.prompts[i] for i in order],
        image_ids=[tensor.image_ids[i] for i in order],
        eval_seed=0, producer="fixture",
    )
    rep2 = bm.evaluate(tensor2, bench2, WeightFunction.uniform())
    assert rep1.per_task[T.SINGLE_OBJECT.value].acc_full == \
        rep2.per_task[T.SINGLE_OBJECT.value].acc_full
    assert rep1.micro_full == rep2.micro_full


def test_macro_vs_micro_unequal_tasks():
    # task A: 10 items all right; task B: 30 items all wrong
    items = []
    for i in range(10):
        sc = d.sample_scene(T.SINGLE_OBJECT, 300 + i)
        items.append(bm.BenchmarkItem(
            item_id=f"a{i}", image=d.render(sc, "flat", i),
            source_prompt=d.caption(sc), positive=d.caption(sc),
            negatives=tuple(bm.negatives_for(T.SINGLE_OBJECT, d.caption(sc))),
            task_type=T.SINGLE_OBJECT, producer="x", correct=True,
        ))
    for i in range(30):
        sc = d.sample_scene(T.POSITION, 400 + i)
        items.append(bm.BenchmarkItem(
            item_id=f"b{i}", image=d.render(sc, "flat", i),
            source_prompt=d.caption(sc), positive=d.caption(sc),
            negatives=tuple(bm.negatives_for(T.POSITION, d.caption(sc))),
            task_type=T.POSITION, producer="x", correct=True,
        ))
    bench = bm.Benchmark(producer="x", style="flat", items=items)
    n = len(items)
    k_max = max(len(it.prompts) for it in items)
    errors = np.full((n, k_max, 4), 2.0, dtype=np.float32)
    for i in range(10):
        errors[i, 0] = 0.1            # task A predicted right
    for i in range(10, 40):
        errors[i, 1] = 0.1            # task B predicted wrong
    tensor = d.ScoreTensor(
        errors=errors, prompts=[it.prompts for it in items],
        image_ids=[it.item_id for it in items], eval_seed=0,
    )
    rep = bm.evaluate(tensor, bench, WeightFunction.uniform())
    assert rep.micro_full == 10 / 40
    assert rep.macro_full == 0.5  # mean of 1.0 and 0.0


def test_benchmark_item_invariants():
    sc = d.sample_scene(T.SINGLE_OBJECT, 3)
    with pytest.raises(ConfigError):
        bm.BenchmarkItem(
            item_id="x", image=d.render(sc, "flat", 0),
            source_prompt=d.caption(sc), positive=d.caption(sc),
            negatives=(d.caption(sc),), task_type=T.SINGLE_OBJECT,
            producer="p", correct=True,
        )


# --------------------------------------------------------------------------
# cross-domain matrix
# --------------------------------------------------------------------------

def report_stub(evaluator, producer, accs):
    per_task = {
        task: bm.TaskResult(
            task=T(task), n_full=50, n_correct=30, acc_full=a,
            acc_correct=a, generation_accuracy=0.6, small_sample=False,
        )
        for task, a in accs.items()
    }
    return bm.EvalReport(
        evaluator=evaluator, producer=producer, per_task=per_task,
        micro_full=0.0, micro_correct=None, macro_full=0.0, macro_correct=None,
    )


def test_drop_rate_arithmetic():
    reports = [
        report_stub("m1", "p1", {"colors": 0.95}),
        report_stub("m1", "p2", {"colors": 0.85}),
        report_stub("m1", "p3", {"colors": 0.75}),
    ]
    out = bm.cross_domain_matrix(reports, {"m1": "p1"})
    assert abs(out["drop_rate"][("m1", "colors")] - 0.15) < 1e-12


def test_drop_rate_single_domain_absent():
    reports = [report_stub("m1", "p1", {"colors": 0.9})]
    out = bm.cross_domain_matrix(reports, {"m1": "p1"})
    assert out["drop_rate"][("m1", "colors")] is None


def test_drop_rate_identical_domains_zero():
    reports = [
        report_stub("m1", "p1", {"colors": 0.8}),
        report_stub("m1", "p2", {"colors": 0.8}),
    ]
    out = bm.cross_domain_matrix(reports, {"m1": "p1"})
    assert out["drop_rate"][("m1", "colors")] == 0.0


def test_missing_in_domain_is_an_error():
    reports = [report_stub("m1", "p2", {"colors": 0.9})]
    with pytest.raises(ConfigError):
        bm.cross_domain_matrix(reports, {"m1": "p1"})
    with pytest.raises(ConfigError):
        bm.cross_domain_matrix(reports, {})


# --------------------------------------------------------------------------
# generation/discrimination correlation
# --------------------------------------------------------------------------

def test_correlation_perfect_line():
    pairs = [(0.1, 0.1), (0.5, 0.5), (0.9, 0.9)]
    assert abs(bm.gen_disc_correlation(pairs) - 1.0) < 1e-12


def test_correlation_perfect_anticorrelation():
    pairs = [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)]
    assert abs(bm.gen_disc_correlation(pairs) - (-1.0)) < 1e-12


def test_correlation_matches_scipy():
    rng = np.random.default_rng(3)
    pairs = list(zip(rng.uniform(0, 1, 10), rng.uniform(0, 1, 10)))
    want = scipy.stats.pearsonr([p[0] for p in pairs],
                                [p[1] for p in pairs]).statistic
    assert abs(bm.gen_disc_correlation(pairs) - want) < 1e-12


def test_correlation_input_validation():
    with pytest.raises(ConfigError):
        bm.gen_disc_correlation([(0.1, 0.2), (0.3, 0.4)])
    with pytest.raises(ConfigError):
        bm.gen_disc_correlation([(0.5, 0.1), (0.5, 0.7), (0.5, 0.9)])


# --------------------------------------------------------------------------
# benchmark I/O
# --------------------------------------------------------------------------

def test_benchmark_save_load_round_trip(tmp_path):
    scenes = [d.sample_scene(T.COLORS, 500 + i) for i in range(6)]
    bench = bm.benchmark_from_scenes(scenes, "canvas", seed=2)
    bm.save_benchmark(tmp_path, bench)
    loaded = bm.load_benchmark(tmp_path)
    assert loaded.producer == bench.producer
    assert len(loaded.items) == len(bench.items)
    for a, b in zip(loaded.items, bench.items):
        assert a.item_id == b.item_id
        assert a.positive == b.positive
        assert a.negatives == b.negatives
        assert a.correct == b.correct
        assert a.source_scene == b.source_scene
        assert np.allclose(a.image, b.image, atol=1 / 255 + 1e-9)
