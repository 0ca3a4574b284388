"""Command-line entry point: the full pipeline as subcommands.

Artifacts land under a run directory named by the config hash; every file
embeds that hash. Exit codes: 0 success, 2 usage, 3 config error, 4 bad or
missing artifact, 5 numeric failure.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import benchmark as bm
from . import classifier as clf
from . import config as cfgmod
from . import denoiser as dn
from . import domaingap as dg
from . import scenes
from . import sct as sctmod
from . import weights as wmod
from .validation import ConfigError, FormatError, NumericError

EXIT_CONFIG = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except FormatError as e:
            click.echo(f"artifact error: {e}", err=True)
            sys.exit(EXIT_FORMAT)
        except NumericError as e:
            click.echo(f"numeric error: {e}", err=True)
            sys.exit(EXIT_NUMERIC)
        except OSError as e:
            click.echo(f"io error: {e}", err=True)
            sys.exit(EXIT_FORMAT)
    return wrapper


def _load(config_path, out):
    cfg = cfgmod.load_config(config_path)
    run = cfgmod.run_dir(cfg, out)
    run.mkdir(parents=True, exist_ok=True)
    return cfg, run, cfgmod.config_hash(cfg)


def _tasks(cfg_tasks: dict) -> dict:
    return {scenes.TaskType(k): int(v) for k, v in cfg_tasks.items()}


@click.group()
def main():
    """Toy diffusion classification lab."""


common = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="JSON config; defaults are used when omitted."),
    click.option("--out", type=click.Path(), default=None,
                 help="run root (default: $DIFFLAB_CACHE or ./runs)"),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@main.command()
@with_common
@handle_errors
def dataset(config_path, out):
    """Render the scene datasets, one per configured style."""
    cfg, run, chash = _load(config_path, out)
    for style in cfg["styles"]:
        d = run / "datasets" / style
        scenes.build_dataset(
            d, _tasks(cfg["dataset"]["tasks"]), style, cfg["seed"],
            allow_distractors=cfg["dataset"]["allow_distractors"],
            config_hash=chash,
        )
        click.echo(f"dataset[{style}]: {d}")


@main.command()
@with_common
@click.option("--style", required=True)
@click.option("--kind", default=None, help="ddpm or rf (default from config)")
@handle_errors
def train(config_path, out, style, kind):
    """Train the toy denoiser on one style's dataset."""
    cfg, run, chash = _load(config_path, out)
    kind = kind or cfg["kind"]
    data_dir = run / "datasets" / style
    if not (data_dir / "index.json").exists():
        raise FormatError(f"no dataset at {data_dir}; run `dataset` first")
    images, captions, _ = scenes.load_dataset(data_dir)
    tc = dn.TrainConfig(seed=cfg["seed"], **cfg["train"])
    model, curves = dn.train((images, captions), tc, kind)
    model.config_hash = chash
    model_path = run / f"model-{style}.bin"
    dn.save_model(model_path, model)
    dn.save_loss_curve(run / f"loss-{style}.csv", curves)
    click.echo(f"model[{style}]: {model_path} "
               f"(final val loss {curves['val_loss'][-1]:.4f})")


@main.command()
@with_common
@click.option("--style", required=True)
@click.option("--prompt", required=True)
@click.option("--n", default=4, help="samples to draw")
@click.option("--steps", default=None, type=int)
@click.option("--guidance", default=None, type=float)
@click.option("--sweep", is_flag=True,
              help="also write a partial-denoise sweep grid")
@handle_errors
def gen(config_path, out, style, prompt, n, steps, guidance, sweep):
    """Sample images from a trained model; optionally a noise-level sweep."""
    cfg, run, chash = _load(config_path, out)
    model = dn.load_model(run / f"model-{style}.bin")
    steps = steps or cfg["bench"]["sample_steps"]
    guidance = cfg["bench"]["guidance_scale"] if guidance is None else guidance
    gen_dir = run / "samples" / style
    gen_dir.mkdir(parents=True, exist_ok=True)
    imgs = []
    for i in range(n):
        img = dn.sample(model, prompt, steps, guidance,
                        seed=[cfg["seed"], i])
        imgs.append(img)
        scenes.save_png(gen_dir / f"sample-{i}.png", img)
    click.echo(f"samples: {gen_dir}")
    if sweep:
        levels = [round(t, 2) for t in np.linspace(0.1, 1.0, 10)]
        outs = dn.partial_denoise_sweep(model, imgs[0], levels, prompt,
                                        steps, seed=cfg["seed"])
        grid = np.concatenate(
            [np.concatenate([imgs[0], *outs[:5]], axis=1),
             np.concatenate([np.ones_like(imgs[0]), *outs[5:]], axis=1)],
            axis=0,
        )
        scenes.save_png(gen_dir / "sweep.png", grid)
        click.echo(f"sweep grid: {gen_dir / 'sweep.png'}")


@main.command("bench-build")
@with_common
@click.option("--style", required=True)
@handle_errors
def bench_build(config_path, out, style):
    """Generate the self-benchmark for one trained model."""
    cfg, run, chash = _load(config_path, out)
    model = dn.load_model(run / f"model-{style}.bin")
    suite = bm.prompt_suite(_tasks(cfg["bench"]["tasks"]), seed=cfg["seed"])
    bench = bm.build_benchmark(
        model, suite,
        images_per_prompt=cfg["bench"]["images_per_prompt"],
        seed=cfg["seed"], style=style, producer=f"gen-{style}",
        n_sample_steps=cfg["bench"]["sample_steps"],
        guidance_scale=cfg["bench"]["guidance_scale"],
        config_hash=chash,
    )
    bench_dir = run / "bench" / f"gen-{style}"
    bm.save_benchmark(bench_dir, bench)
    correct, full = bench.generation_accuracy()
    click.echo(f"bench[gen-{style}]: {full} items, {correct} correct "
               f"({correct / full:.3f})")


@main.command()
@with_common
@click.option("--style", required=True, help="evaluator model style")
@click.option("--bench", "bench_name", required=True,
              help="benchmark producer name, e.g. gen-flat")
@handle_errors
def score(config_path, out, style, bench_name):
    """Write the evaluator's SCT1 score file over a benchmark."""
    cfg, run, chash = _load(config_path, out)
    model = dn.load_model(run / f"model-{style}.bin")
    bench = bm.load_benchmark(run / "bench" / bench_name)
    es = clf.build_eval_set(cfg["eval_set"]["n_timesteps"], cfg["seed"],
                            bias=cfg["eval_set"]["bias"])
    tensor = bm.score_benchmark(model, bench, es,
                                metric=cfg["score"]["metric"],
                                evaluator=f"eval-{style}", config_hash=chash)
    path = run / "scores" / f"eval-{style}__{bench_name}.sct"
    path.parent.mkdir(parents=True, exist_ok=True)
    sctmod.write_sct(path, tensor)
    click.echo(f"scores: {path}")


@main.command()
@with_common
@click.option("--scores", "scores_path", required=True, type=click.Path())
@click.option("--weights", "weights_path", type=click.Path(), default=None)
@handle_errors
def classify(config_path, out, scores_path, weights_path):
    """Predict prompts from a score file; writes predictions + accuracy."""
    cfg, run, chash = _load(config_path, out)
    tensor = sctmod.read_sct(scores_path)
    wfn = wmod.WeightFunction.uniform()
    if weights_path:
        with open(weights_path) as f:
            wfn = wmod.WeightFunction.from_dict(json.load(f)["weights"])
    t_grid = bm._grid_t(tensor)
    rows = []
    hits = 0
    for i in range(tensor.n_images):
        pred = clf.predict(tensor.image_errors(i), wfn, t=t_grid)
        hits += pred == 0
        rows.append((tensor.image_ids[i], pred, tensor.prompts[i][pred]))
    result = {
        "config_hash": chash,
        "n": tensor.n_images,
        "accuracy_positive_first": hits / tensor.n_images,
        "weights": wfn.to_dict(),
    }
    out_path = Path(scores_path).with_suffix(".predictions.csv")
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "predicted_index", "predicted_prompt"])
        writer.writerows(rows)
    click.echo(json.dumps(result, sort_keys=True))


@main.command()
@with_common
@click.option("--scores", "scores_path", required=True, type=click.Path())
@click.option("--lowshot/--full-data", default=True)
@click.option("--kind", default=None, help="piecewise or polynomial")
@handle_errors
def reweight(config_path, out, scores_path, lowshot, kind):
    """Fit timestep weights on a frozen score file (positive = row 0)."""
    cfg, run, chash = _load(config_path, out)
    tensor = sctmod.read_sct(scores_path)
    k_min = min(tensor.n_prompts(i) for i in range(tensor.n_images))
    errors = np.stack([tensor.image_errors(i)[:k_min]
                       for i in range(tensor.n_images)])
    labels = np.zeros(tensor.n_images, dtype=np.int64)
    if kind is None:
        kind = "polynomial" if lowshot else "piecewise"
    fit_cfg = wmod.FitConfig(
        epochs=cfg["fit"]["epochs"], lr=cfg["fit"]["lr"], kind=kind,
        degree=cfg["fit"]["degree"], seed=cfg["seed"],
    )
    if lowshot:
        ids = list(range(tensor.n_images))
        tr, va, te = wmod.lowshot_split(
            ids, tuple(cfg["fit"]["lowshot_fractions"]), seed=cfg["seed"])
        fit_idx = np.array(tr + va)
        val_mask = np.zeros(len(fit_idx), dtype=bool)
        val_mask[len(tr):] = True
        result = wmod.fit_weights(errors[fit_idx], labels[fit_idx], fit_cfg,
                                  val_mask=val_mask,
                                  t_grid=bm._grid_t(tensor))
        w = wmod.weights_on_grid(result.weight_fn, bm._grid_t(tensor))
        test_acc = float(np.mean(np.argmax(
            -np.einsum("nkt,t->nk", errors[te], w), axis=1) == 0))
        split_info = {"train": len(tr), "val": len(va), "test": len(te),
                      "test_accuracy": test_acc}
    else:
        result = wmod.fit_weights(errors, labels, fit_cfg,
                                  t_grid=bm._grid_t(tensor))
        split_info = {"train": tensor.n_images}
    payload = {
        "config_hash": chash,
        "weights": result.weight_fn.to_dict(),
        "n_timesteps": tensor.n_timesteps,
        "fit": {
            "kind": kind,
            "epochs": fit_cfg.epochs,
            "lr": fit_cfg.lr,
            "seed": fit_cfg.seed,
            "best_epoch": result.best_epoch,
            "final_train_ce": (float(result.train_curve[-1])
                               if len(result.train_curve) else None),
            "train_accuracy": result.train_accuracy,
            "degenerate": result.degenerate,
            **split_info,
        },
    }
    out_path = Path(scores_path).with_suffix(".weights.json")
    with open(out_path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    click.echo(f"weights: {out_path}")


@main.command("verify-sct")
@click.argument("path", type=click.Path())
@handle_errors
def verify_sct_cmd(path):
    """Check an SCT1 file's integrity; exit 0 when clean."""
    problems = sctmod.verify_sct(path)
    if problems:
        for p in problems:
            click.echo(f"problem: {p}", err=True)
        sys.exit(EXIT_FORMAT)
    tensor = sctmod.read_sct(path)
    click.echo(f"ok: {tensor.n_images} images x {tensor.max_prompts} prompts "
               f"x {tensor.n_timesteps} timesteps, producer "
               f"{tensor.producer!r}")


@main.command()
@with_common
@handle_errors
def report(config_path, out):
    """Cross-domain matrix, drop rates, correlations, fixed weighting
    schemes, diversity and gap-vs-gain tables."""
    cfg, run, chash = _load(config_path, out)
    styles = cfg["styles"]
    benches = {}
    for style in styles:
        bdir = run / "bench" / f"gen-{style}"
        if (bdir / "manifest.json").exists():
            benches[f"gen-{style}"] = bm.load_benchmark(bdir)
    if not benches:
        raise FormatError("no benchmarks found; run `bench-build` first")
    reports = []
    tensors = {}
    for ev_style in styles:
        for bname, bench in benches.items():
            spath = run / "scores" / f"eval-{ev_style}__{bname}.sct"
            if not spath.exists():
                continue
            tensor = sctmod.read_sct(spath)
            tensors[(f"eval-{ev_style}", bname)] = tensor
            reports.append(bm.evaluate(tensor, bench,
                                       evaluator=f"eval-{ev_style}"))
    in_domain = {f"eval-{s}": f"gen-{s}" for s in styles
                 if any(r.evaluator == f"eval-{s}" for r in reports)}
    matrix = bm.cross_domain_matrix(reports, in_domain)

    # fixed weighting schemes per evaluator on its in-domain benchmark
    schemes = {
        "uniform": wmod.WeightFunction.uniform(),
        "exp7": wmod.WeightFunction.exponential(7.0),
        "rf_cfm": wmod.WeightFunction.rectified_flow(),
        "later_half": None,  # mask to t > 0.5
    }
    scheme_rows = []
    for (evaluator, bname), tensor in sorted(tensors.items()):
        bench = benches[bname]
        t_grid = bm._grid_t(tensor)
        for name, fn in schemes.items():
            if name == "later_half":
                w = np.where(t_grid > 0.5, 1.0, 0.0)
            elif name == "rf_cfm":
                w = np.zeros_like(t_grid)
                inner = t_grid < 1.0
                w[inner] = t_grid[inner] / (1.0 - t_grid[inner])
            else:
                w = wmod.weights_on_grid(fn, t_grid)
            rep = bm.evaluate(tensor, bench, w, evaluator=evaluator)
            for task, r in rep.per_task.items():
                scheme_rows.append({
                    "evaluator": evaluator, "producer": bname, "task": task,
                    "scheme": name, "acc_full": r.acc_full,
                    "acc_correct": r.acc_correct,
                })

    # generation vs discrimination correlation over (producer, task) pairs
    pairs = []
    for rep in reports:
        if rep.evaluator.replace("eval-", "gen-") != rep.producer:
            continue
        for task, r in rep.per_task.items():
            if r.acc_correct is not None:
                pairs.append((r.generation_accuracy, r.acc_correct))
    correlation = None
    if len(pairs) >= 3:
        try:
            correlation = bm.gen_disc_correlation(pairs)
        except ConfigError:
            correlation = None

    # domain distances between benchmark image sets + diversity stats
    extractor = dg.HandcraftedFeatures()
    distances = {}
    bench_names = sorted(benches)
    for i, a in enumerate(bench_names):
        for b in bench_names[i + 1:]:
            imgs_a = np.stack([it.image for it in benches[a].items])
            imgs_b = np.stack([it.image for it in benches[b].items])
            dist, flagged = dg.domain_distance(extractor, imgs_a, imgs_b,
                                               seed=cfg["seed"])
            distances[f"{a}|{b}"] = {"distance": dist,
                                     "undersized": flagged}
    diversity = {}
    for bname, bench in benches.items():
        groups = {}
        for it in bench.items:
            groups.setdefault(it.source_prompt, []).append(it.image)
        feats = [dg.embed(extractor, np.stack(g))
                 for g in groups.values() if len(g) >= 2]
        if feats:
            diversity.update(dg.diversity_report({bname: feats}))

    payload = {
        "config_hash": chash,
        "reports": [r.to_dict() for r in reports],
        "cross_domain": {
            "accuracy": {f"{e}|{p}|{t}": a
                         for (e, p, t), a in matrix["accuracy"].items()},
            "drop_rate": {f"{e}|{t}": v
                          for (e, t), v in matrix["drop_rate"].items()},
            "split": matrix["split"],
        },
        "fixed_schemes": scheme_rows,
        "gen_disc_correlation": {"r": correlation, "n_pairs": len(pairs)},
        "domain_distances": distances,
        "diversity": diversity,
    }
    report_dir = run / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    with open(report_dir / "report.json", "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    with open(report_dir / "rows.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["evaluator", "producer", "task", "split",
                         "accuracy", "n"])
        for rep in reports:
            for task, r in rep.per_task.items():
                writer.writerow([rep.evaluator, rep.producer, task, "full",
                                 f"{r.acc_full:.6f}", r.n_full])
                if r.acc_correct is not None:
                    writer.writerow([rep.evaluator, rep.producer, task,
                                     "correct", f"{r.acc_correct:.6f}",
                                     r.n_correct])
    with open(report_dir / "schemes.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["evaluator", "producer", "task", "scheme",
                         "acc_full", "acc_correct"])
        for row in scheme_rows:
            writer.writerow([row["evaluator"], row["producer"], row["task"],
                             row["scheme"], f"{row['acc_full']:.6f}",
                             "" if row["acc_correct"] is None
                             else f"{row['acc_correct']:.6f}"])
    _write_text_tables(report_dir / "tables.txt", payload)
    click.echo(f"report: {report_dir}")


def _write_text_tables(path, payload):
    lines = [f"run {payload['config_hash']}", ""]
    lines.append("accuracy (correct split) by evaluator x producer x task")
    for key, acc in sorted(payload["cross_domain"]["accuracy"].items()):
        lines.append(f"  {key:<54} {acc:.3f}")
    lines.append("")
    lines.append("drop rate (in-domain minus mean cross-domain)")
    for key, v in sorted(payload["cross_domain"]["drop_rate"].items()):
        lines.append(f"  {key:<40} "
                     + ("n/a" if v is None else f"{v:+.3f}"))
    lines.append("")
    r = payload["gen_disc_correlation"]
    lines.append(f"generation/discrimination pearson r: "
                 + ("n/a" if r["r"] is None else f"{r['r']:.3f}")
                 + f" over {r['n_pairs']} pairs")
    lines.append("")
    lines.append("domain distances")
    for key, row in sorted(payload["domain_distances"].items()):
        lines.append(f"  {key:<40} {row['distance']:.4f}"
                     + (" (undersized)" if row["undersized"] else ""))
    lines.append("")
    Path(path).write_text("\n".join(lines))


@main.command()
@with_common
@handle_errors
def pipeline(config_path, out):
    """End-to-end: dataset -> train -> bench-build -> score -> report."""
    ctx = click.get_current_context()
    cfg, run, chash = _load(config_path, out)
    ctx.invoke(dataset, config_path=config_path, out=out)
    for style in cfg["styles"]:
        ctx.invoke(train, config_path=config_path, out=out, style=style,
                   kind=None)
        ctx.invoke(bench_build, config_path=config_path, out=out, style=style)
    for ev in cfg["styles"]:
        for producer in cfg["styles"]:
            ctx.invoke(score, config_path=config_path, out=out, style=ev,
                       bench_name=f"gen-{producer}")
    for ev in cfg["styles"]:
        for producer in cfg["styles"]:
            spath = run / "scores" / f"eval-{ev}__gen-{producer}.sct"
            ctx.invoke(classify, config_path=config_path, out=out,
                       scores_path=str(spath), weights_path=None)
            if ev != producer:
                ctx.invoke(reweight, config_path=config_path, out=out,
                           scores_path=str(spath), lowshot=True, kind=None)
    ctx.invoke(report, config_path=config_path, out=out)
    click.echo(f"pipeline complete: {run}")


if __name__ == "__main__":
    main()
