"""``editpoison`` command line: one binary, one subcommand per pipeline stage.

All stages share a working directory (``--out``, default ``output.dir``):

    data/train/samples.tsv   data/test/samples.tsv   data/manifest.tsv   (gen-data)
    poisoned/manifest.tsv                                                (poison)
    train/model.ckpt         train/loss.csv                              (train)
    eval/report.csv          eval/verdicts.tsv                           (eval)

Study commands (sweep-rate, sweep-steps, ablate-adversarial, table) write
under their own subdirectory. Every output directory receives
``config.resolved``. Failures exit with status 1 and print a single line
``error: <kind>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import experiments as ex
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .denoiser import Denoiser
from .diffusion import sample as sample_one, write_loss_curve, train
from .evalkit import emit_plots, emit_report, emit_table, emit_tradeoff_plot, write_rows
from .imagecore import PPMError, load_image, save_image
from .poisonset import (
    VOCAB,
    ManifestError,
    clean_dataset,
    read_manifest,
    read_samples,
    tokenize,
    trigger_sample,
    write_manifest,
    write_samples,
)
from .trigger_textual import UnknownWordError

RESOLVED_NAME = "config.resolved"


class MissingInput(FileNotFoundError):
    pass


# --------------------------------------------------------------------------- helpers


def _require(path: Path, made_by: str | None = None) -> Path:
    if not path.exists():
        hint = f" (run `{made_by}` first)" if made_by else ""
        raise MissingInput(f"expected {path}{hint}")
    return path


def _outdir(cfg: RunConfig, root: Path, sub: str) -> Path:
    d = root / sub
    d.mkdir(parents=True, exist_ok=True)
    (d / RESOLVED_NAME).write_text(cfg.dumps(), encoding="utf-8")
    return d


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _progress(label, rep) -> None:
    _log(f"{label}: ASR {rep.asr:.1f} EAR {rep.ear:.1f} "
         f"align {rep.text_align:.3f} preserve {rep.image_preserve:.3f}")


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    overrides: dict[str, object] = {}
    if args.seed is not None:
        for key in ("dataset.seed", "poison.seed", "train.seed", "eval.seed"):
            overrides[key] = args.seed
    if getattr(args, "rate", None) is not None:
        overrides["poison.rate"] = args.rate
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = args.steps
    if getattr(args, "goal", None) is not None:
        overrides["goal.kind"] = args.goal
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "method", None):
        cfg = ex.set_method(cfg, args.method)
    root = Path(args.out) if args.out else cfg.path("output.dir")
    return cfg, root


def _split_paths(root: Path) -> tuple[Path, Path]:
    return root / "data" / "train" / "samples.tsv", root / "data" / "test" / "samples.tsv"


# --------------------------------------------------------------------------- pipeline stages


def cmd_gen_data(args, cfg: RunConfig, root: Path) -> None:
    d = _outdir(cfg, root, "data")
    tr, te = ex.make_splits(cfg)
    train_path, test_path = _split_paths(root)
    write_samples(tr, train_path)
    write_samples(te, test_path)
    _outdir(cfg, root, "data/train")
    _outdir(cfg, root, "data/test")
    write_manifest(clean_dataset(tr), d / "manifest.tsv")
    _log(f"wrote {len(tr)} train / {len(te)} test samples under {d}")


def cmd_poison(args, cfg: RunConfig, root: Path) -> None:
    train_path, _ = _split_paths(root)
    tr = read_samples(_require(train_path, "gen-data"), cfg.int("dataset.side"))
    method = ex.method_from_config(cfg)
    ds = ex.build_training_set(tr, ex.poison_config_from(cfg, method), ex.goal_from_config(cfg))
    d = _outdir(cfg, root, "poisoned")
    write_manifest(ds, d / "manifest.tsv")
    counts = " ".join(f"{k}={v}" for k, v in ds.role_counts.items())
    _log(f"poisoned with {method.name}: {counts}")


def cmd_train(args, cfg: RunConfig, root: Path) -> None:
    ds = read_manifest(_require(root / "poisoned" / "manifest.tsv", "poison"))
    tcfg = ex.train_config_from(cfg)
    model = Denoiser(ex.model_config_from(cfg), seed=tcfg.seed)
    every = max(1, tcfg.total_steps // 10)

    def progress(step, loss):
        if step % every == 0:
            _log(f"step {step}/{tcfg.total_steps} loss {loss:.5f}")

    res = train(ds, tcfg, model=model, progress=progress)
    d = _outdir(cfg, root, "train")
    res.model.save(d / "model.ckpt")
    write_loss_curve(res.curve, d / "loss.csv")


def cmd_edit(args, cfg: RunConfig, root: Path) -> None:
    ckpt = Path(args.checkpoint) if args.checkpoint else root / "train" / "model.ckpt"
    model = Denoiser.load(_require(ckpt, None if args.checkpoint else "train"))
    img = load_image(_require(Path(args.image)))
    method = ex.method_from_config(cfg) if (args.with_visual_trigger or args.with_text_trigger) else None
    vis = method.visual if method and args.with_visual_trigger else None
    txt = method.textual if method and args.with_text_trigger else None
    if args.with_visual_trigger and vis is None:
        raise ConfigError("--with-visual-trigger given but the config names no visual trigger")
    if args.with_text_trigger and txt is None:
        raise ConfigError("--with-text-trigger given but the config names no textual trigger")
    from .poisonset import Sample

    probe = Sample("edit", img, args.prompt, img, None, None, None)
    src, prompt = trigger_sample(probe, vis, txt)
    out = sample_one(model, src, prompt, ex.train_config_from(cfg).schedule(), cfg.int("eval.seed"))
    target = Path(args.output) if args.output else _outdir(cfg, root, "edit") / "edited.ppm"
    target.parent.mkdir(parents=True, exist_ok=True)
    if not (target.parent / RESOLVED_NAME).exists():
        (target.parent / RESOLVED_NAME).write_text(cfg.dumps(), encoding="utf-8")
    save_image(out, target)
    _log(f"wrote {target}")


def cmd_eval(args, cfg: RunConfig, root: Path) -> None:
    ckpt = Path(args.checkpoint) if args.checkpoint else root / "train" / "model.ckpt"
    model = Denoiser.load(_require(ckpt, None if args.checkpoint else "train"))
    _, test_path = _split_paths(root)
    te = read_samples(_require(test_path, "gen-data"), cfg.int("dataset.side"))
    method = ex.method_from_config(cfg)
    goal = ex.goal_from_config(cfg)
    rep = ex.evaluate(model, te, method, goal, ex.train_config_from(cfg).schedule(),
                      cfg.float("eval.margin"), cfg.int("eval.seed"), single_triggers=method.multimodal)
    d = _outdir(cfg, root, "eval")
    emit_report([rep], d / "report.csv")
    rows = [["triggered", v.sample_id, v.classified.value, f"{v.dist_to_backdoor:.6g}", f"{v.dist_to_normal:.6g}"]
            for v in rep.triggered]
    rows += [["clean", v.sample_id, v.classified.value, f"{v.dist_to_backdoor:.6g}", f"{v.dist_to_normal:.6g}"]
             for v in rep.clean]
    with open(d / "verdicts.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["condition", "id", "verdict", "mse_backdoor", "mse_normal"])
        w.writerows(rows)
    _progress(f"{method.name}/{goal.kind.value}", rep)


# --------------------------------------------------------------------------- studies


def _methods(args, cfg: RunConfig, key: str) -> list[str]:
    return [args.method] if args.method else cfg.list(key)


def cmd_sweep_rate(args, cfg: RunConfig, root: Path) -> None:
    rates = [float(r) for r in args.rates.split(",")] if args.rates else cfg.floats("sweep.rates")
    study = ex.Study.from_config(cfg)
    rows = ex.sweep_rate(study, _methods(args, cfg, "sweep.methods"), rates, progress=_progress)
    d = _outdir(cfg, root, "sweep-rate")
    write_rows(d / "sweep_rate.csv", ["method", "rate", "asr_pct", "ear_pct"], rows)
    emit_plots(ex.group_rows(rows), d / "asr_vs_rate.svg", "ASR vs poison rate", "poison rate", "ASR (%)")


def cmd_sweep_steps(args, cfg: RunConfig, root: Path) -> None:
    marks = [int(s) for s in args.marks.split(",")] if args.marks else cfg.ints("sweep.steps")
    study = ex.Study.from_config(cfg)
    rows = ex.sweep_steps(study, _methods(args, cfg, "sweep.methods"), marks, progress=_progress)
    d = _outdir(cfg, root, "sweep-steps")
    write_rows(d / "sweep_steps.csv", ["method", "step", "asr_pct", "ear_pct"], rows)
    emit_plots(ex.group_rows(rows), d / "asr_vs_steps.svg", "ASR vs training steps", "training step", "ASR (%)")


def cmd_ablate(args, cfg: RunConfig, root: Path) -> None:
    method = args.method or ex.method_from_config(cfg).name
    study = ex.Study.from_config(cfg)
    rows = ex.ablate_adversarial(study, method, progress=_progress)
    d = _outdir(cfg, root, "ablate-adversarial")
    write_rows(d / "ablation.csv", ex.ABLATION_HEADER, rows)


def cmd_table(args, cfg: RunConfig, root: Path) -> None:
    goals = [args.goal] if args.goal else cfg.list("table.goals")
    study = ex.Study.from_config(cfg)
    reports = ex.main_table(study, _methods(args, cfg, "table.methods"), goals, progress=_progress)
    d = _outdir(cfg, root, "table")
    emit_report(reports, d / "report.csv")
    emit_table(reports, d / "table.csv")
    emit_tradeoff_plot(reports, d / "tradeoff.svg")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic editing dataset and its train/test split"),
    "poison": (cmd_poison, "build the poisoned training manifest"),
    "train": (cmd_train, "train the denoiser on the poisoned manifest"),
    "edit": (cmd_edit, "edit one image with a trained checkpoint"),
    "eval": (cmd_eval, "ASR/EAR and functionality proxies on the held-out split"),
    "sweep-rate": (cmd_sweep_rate, "ASR/EAR as a function of poison rate"),
    "sweep-steps": (cmd_sweep_steps, "ASR/EAR as a function of training steps"),
    "ablate-adversarial": (cmd_ablate, "multimodal training with and without adversarial negatives"),
    "table": (cmd_table, "methods x goals EAR/ASR table and trade-off plot"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, metavar="N", help="overrides every seed in the config")
    common.add_argument("--out", metavar="DIR", help="working directory (default: output.dir)")
    common.add_argument("--rate", type=float, help="poison rate override")
    common.add_argument("--steps", type=int, help="training steps override")
    common.add_argument("--method", help="badnet, blend, wanet, refool, color, badt2i, mark, word or <visual>+<textual>")
    common.add_argument("--goal", choices=("image", "style", "object"))

    parser = argparse.ArgumentParser(prog="editpoison", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=help_) for name, (_, help_) in COMMANDS.items()}
    e = parsers["edit"]
    e.add_argument("--image", required=True, metavar="PPM")
    e.add_argument("--prompt", required=True)
    e.add_argument("--checkpoint", metavar="PATH")
    e.add_argument("--output", metavar="PPM")
    e.add_argument("--with-visual-trigger", action="store_true")
    e.add_argument("--with-text-trigger", action="store_true")
    parsers["eval"].add_argument("--checkpoint", metavar="PATH")
    parsers["sweep-rate"].add_argument("--rates", help="comma-separated rates (default: sweep.rates)")
    parsers["sweep-steps"].add_argument("--marks", help="comma-separated step marks (default: sweep.steps)")
    return parser


def _kind(exc: BaseException) -> str:
    if isinstance(exc, (MissingInput, FileNotFoundError)):
        return "missing-input"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (ManifestError, PPMError)):
        return "bad-input"
    if isinstance(exc, UnknownWordError):
        return "unknown-word"
    if isinstance(exc, ValueError):
        return "invalid"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, root = _resolve(args)
        COMMANDS[args.command][0](args, cfg, root)
    except Exception as exc:  # noqa: BLE001 - surfaced as a one-line error
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {_kind(exc)}: {' '.join(msg.split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
