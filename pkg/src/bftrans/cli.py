"""Command line entry point: ``bftrans <command> ...``.

Every failure prints one line ``error: <kind>: <message>`` on stderr and
exits nonzero (2 for usage and input problems, 3 for a diverged training run,
1 for failed checks).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import config as C
from .boxes import BBox
from .data import ATTRIBUTES, SequenceDataset, generate, generate_suite, load_suite, read_boxes, render_sequence, standard_suite, write_boxes
from .evaluation import SequenceScore, attribute_report, format_report, overall, score_sequence, write_report
from .model import VARIANTS, ModelConfig, init_params
from .params import CheckpointError, ParamStore
from .tensor import ContractError
from .tracker import Tracker, TrackerInitError, track_sequence
from .train import TrainingDiverged, load_sequences, train

log = logging.getLogger("bftrans")

EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 1, 2, 3

CONFIG_HELP = """\
configuration file (INI).  Sections and keys:
  [run]      seed, preset (desk|large), variant ({variants})
{sections}
Unknown sections or keys are rejected."""


def _config_help() -> str:
    import dataclasses

    lines = []
    for name, cls in C.SECTIONS.items():
        keys = ", ".join(f.name for f in dataclasses.fields(cls))
        lines.append(f"  [{name}] {keys}")
    return CONFIG_HELP.format(variants="|".join(VARIANTS), sections="\n".join(lines))


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def threads() -> int:
    raw = os.environ.get("BFT_THREADS", "")
    try:
        return max(1, int(raw)) if raw else min(5, os.cpu_count() or 1)
    except ValueError:
        raise CliError("env", f"BFT_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- helpers


def _load_config(path, seed: int | None = None, variant: str | None = None, epochs: int | None = None) -> C.RunConfig:
    cfg = C.load(path)
    if seed is not None:
        cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed), synth=replace(cfg.synth, seed=seed))
    if variant is not None:
        cfg = cfg.with_variant(variant)
    if epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
    return cfg


def _suite(path) -> list[SequenceDataset]:
    path = Path(path)
    if not path.is_dir():
        raise CliError("input", f"no such directory: {path}")
    seqs = load_suite(path)
    if not seqs:
        raise CliError("input", f"no sequences (directories with groundtruth.csv) under {path}")
    return seqs


def _load_model(path, cfg: ModelConfig) -> ParamStore:
    loaded = ParamStore.load(path)
    params = init_params(cfg)
    missing = set(params.names()) ^ set(loaded.names())
    if missing:
        raise CliError("checkpoint", f"{path} does not match the configured architecture ({len(missing)} mismatched entries)")
    params.load_state(loaded.state())
    return params


def _run_tracker(params, cfg: ModelConfig, frames, init_box: BBox) -> list[BBox]:
    return track_sequence(Tracker(params, cfg), frames, init_box)


def _parse_tags(raw: str | None) -> list[str] | None:
    if raw is None:
        return None
    tags = [t.strip().upper() for t in raw.split(",") if t.strip()]
    bad = [t for t in tags if t not in ATTRIBUTES]
    if bad:
        raise CliError("usage", f"unknown attribute tag(s) {','.join(bad)}; expected a subset of {','.join(ATTRIBUTES)}")
    return tags


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.suite:
        seqs = generate_suite(args.out, seed=cfg.seed, frames=cfg.synth.frames)
    else:
        seqs = [generate(cfg.synth, args.out)]
    for s in seqs:
        print(f"{s.root},{len(s)},{' '.join(s.tags)}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed, args.variant, args.epochs)
    sequences = load_sequences(_suite(args.data))
    params = init_params(cfg.model, cfg.seed)
    out = Path(args.out)
    loss_log = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    for p in (out, loss_log):
        p.parent.mkdir(parents=True, exist_ok=True)
    res = train(params, cfg.model, sequences, cfg.train, out=out, loss_log=loss_log)
    params.save(out)
    print(f"trained variant={cfg.variant} iterations={res.iterations} final_loss={res.losses[-1][1]:.6f} checkpoint={out}")
    return 0


def cmd_track(args) -> int:
    cfg = _load_config(args.config, variant=args.variant)
    params = _load_model(args.model, cfg.model)
    seq_dir = Path(args.seq)
    single = (seq_dir / "groundtruth.csv").exists()
    seqs = _suite(seq_dir)
    out = Path(args.out)
    for s in seqs:
        boxes = _run_tracker(params, cfg.model, s.load_all(), s.boxes[0])
        dest = out if single else out / f"{s.name}.csv"
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_boxes(dest, boxes)
        print(f"{s.name},{len(boxes)},{dest}")
    return 0


def _pairs(results: Path, gt: Path) -> list[tuple[str, Path, Path, list[str]]]:
    """Match result files to ground truth: file to sequence, or directory to suite."""
    if results.is_dir():
        out = []
        for s in _suite(gt):
            r = results / f"{s.name}.csv"
            if not r.exists():
                raise CliError("input", f"missing results for sequence {s.name}: {r}")
            out.append((s.name, r, s.root / "groundtruth.csv", s.tags))
        return out
    if not results.exists():
        raise CliError("input", f"no such results file: {results}")
    if gt.is_dir():
        s = _suite(gt)
        if len(s) != 1:
            raise CliError("input", f"{gt} holds {len(s)} sequences; pass a results directory")
        return [(s[0].name, results, s[0].root / "groundtruth.csv", s[0].tags)]
    if not gt.exists():
        raise CliError("input", f"no such ground-truth file: {gt}")
    return [(results.stem, results, gt, [])]


def cmd_eval(args) -> int:
    only = _parse_tags(args.attr)
    scores = []
    for name, r, g, tags in _pairs(Path(args.results), Path(args.gt)):
        pred, truth = read_boxes(r), read_boxes(g)
        if len(pred) != len(truth):
            raise CliError("input", f"{name}: {len(pred)} result boxes for {len(truth)} ground-truth boxes")
        scores.append(score_sequence(name, pred, truth, tags or (only or [])))
    attrs = attribute_report(scores)
    if only is not None:
        attrs = {k: v for k, v in attrs.items() if k in only}
    sys.stdout.write(format_report(scores, attrs))
    if args.out:
        write_report(args.out, scores, attrs)
    if args.curves:
        _write_curves(args.curves, scores)
    if args.plot:
        from .plotting import plot_curves

        plot_curves({s.name: s.success for s in scores}, {s.name: s.precision for s in scores}, args.plot)
    return 0


def _write_curves(path, scores: Sequence[SequenceScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "curve", "threshold", "value"])
        for s in scores:
            for curve, c in (("success", s.success), ("precision", s.precision)):
                for t, v in zip(c.thresholds, c.values):
                    w.writerow([s.name, curve, f"{t:g}", f"{v:.6f}"])


# ---------------------------------------------------------------- ablation

TABLE_HEADER = ["#", "variant", "FFM", "BFM", "TAPE", "Succ", "Prec"]
_FLAGS = {"baseline": (0, 0, 0), "ffm": (1, 0, 0), "bfm": (0, 1, 0), "bidir": (1, 1, 0), "full": (1, 1, 1)}


def ablation_row(cfg: C.RunConfig, variant: str, sequences, heldout) -> tuple[str, float, float]:
    vcfg = cfg.with_variant(variant)
    params = init_params(vcfg.model, vcfg.seed)
    train(params, vcfg.model, sequences, vcfg.train)
    scores = []
    for name, frames, boxes in heldout:
        pred = _run_tracker(params, vcfg.model, frames, boxes[0])
        scores.append(score_sequence(name, pred, boxes))
    auc, p20 = overall(scores)
    log.info("variant %s success %.4f precision %.4f", variant, auc, p20)
    return variant, auc, p20


def run_ablation(cfg: C.RunConfig, sequences, heldout, workers: int = 1) -> list[tuple[str, float, float]]:
    """Train, track and score all five variants; rows come back in variant order."""
    if workers <= 1:
        return [ablation_row(cfg, v, sequences, heldout) for v in VARIANTS]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: ablation_row(cfg, v, sequences, heldout), VARIANTS))


def format_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for k, (variant, auc, p20) in enumerate(rows, start=1):
        w.writerow([k, variant, *_FLAGS[variant], f"{auc:.4f}", f"{p20:.4f}"])
    return buf.getvalue()


def default_heldout(seed: int, frames: int):
    out = []
    for sc in standard_suite(seed + 1000, frames):
        f, b, _ = render_sequence(sc)
        out.append((sc.name, f, b))
    return out


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.seed, epochs=args.epochs)
    sequences = load_sequences(_suite(args.data))
    if args.heldout:
        heldout = [(s.name, s.load_all(), list(s.boxes)) for s in _suite(args.heldout)]
    else:
        heldout = default_heldout(cfg.seed, cfg.synth.frames)
    rows = run_ablation(cfg, sequences, heldout, threads())
    table = format_table(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    sys.stdout.write(table)
    if args.plot:
        from .plotting import plot_ablation

        plot_ablation(rows, args.plot)
    return 0


# ---------------------------------------------------------------- checks


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck, scopes_for

    try:
        scopes = scopes_for(args.scope)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    worst, where, failed, checked, kinked = 0.0, "", False, 0, 0
    for scope in scopes:
        for seed in range(args.seed, args.seed + args.seeds):
            rep = run_gradcheck(scope, seed, args.tol)
            log.info("%s seed %d: %s", scope, seed, rep.line())
            checked += rep.checked
            kinked += rep.kinked
            failed |= not rep.passed
            if rep.max_rel_err >= worst:
                worst = rep.max_rel_err
                at = f" at={rep.worst[0]}{list(rep.worst[1])}" if rep.worst else ""
                where = f" scope={scope} seed={seed}{at}"
    stats = f"checked={checked} kinked={kinked}"
    if failed:
        print(f"FAIL max_rel_err={worst:.3e}{where} {stats}")
        return EXIT_FAIL
    print(f"PASS max_rel_err={worst:.3e} scopes={','.join(scopes)} seeds={args.seeds} {stats}")
    return 0


def cmd_selftest(args) -> int:
    from .checks import selftest

    failed = 0
    for r in selftest():
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} {r.detail} ({r.seconds:.2f}s)")
        failed += not r.ok
    print(f"{'PASS' if not failed else 'FAIL'} selftest failed={failed}")
    return EXIT_FAIL if failed else 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="bftrans", description="Bidirectional fusion transformer tracker on synthetic data.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    cfg_help = _config_help()

    def add(name, help_, fn):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=cfg_help, formatter_class=fmt)
        sp.set_defaults(fn=fn)
        return sp

    s = add("synth", "render one synthetic sequence ([synth] section) or the 12-sequence attribute suite", cmd_synth)
    s.add_argument("--config", help="configuration file (defaults to the desk preset)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--suite", action="store_true", help="render the standard suite, one subdirectory per sequence")
    s.add_argument("--seed", type=int, help="override [run] seed")

    s = add("train", "train a model on every sequence under --data", cmd_train)
    s.add_argument("--config", help="configuration file (defaults to the desk preset)")
    s.add_argument("--data", required=True, help="sequence or suite directory")
    s.add_argument("--out", required=True, help="checkpoint path (BFT1 format)")
    s.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    s.add_argument("--variant", choices=VARIANTS, help="override [run] variant")
    s.add_argument("--epochs", type=int, help="override [train] epochs")
    s.add_argument("--seed", type=int, help="override [run] seed")

    s = add("track", "run the tracker over a sequence (or each sequence of a suite)", cmd_track)
    s.add_argument("--model", required=True, help="checkpoint path")
    s.add_argument("--seq", required=True, help="sequence directory, or suite directory")
    s.add_argument("--out", required=True, help="results CSV (x,y,w,h per frame); a directory when --seq is a suite")
    s.add_argument("--variant", choices=VARIANTS, help="fusion wiring to run the checkpoint with")
    s.add_argument("--config", help="configuration file matching the checkpoint's architecture")

    s = add("eval", "score tracker results: success AUC, precision at 20 px, attribute slices", cmd_eval)
    s.add_argument("--results", required=True, help="results CSV, or directory of <sequence>.csv files")
    s.add_argument("--gt", required=True, help="ground-truth CSV, sequence directory or suite directory")
    s.add_argument("--attr", help=f"comma-separated tags to report (subset of {','.join(ATTRIBUTES)}); "
                   "also tags sequences that carry no attributes.txt")
    s.add_argument("--plot", help="write success and precision plots (SVG)")
    s.add_argument("--out", help="write the report CSV here as well as to stdout")
    s.add_argument("--curves", help="write every curve point to this CSV")

    s = add("ablate", "train, track and score all five fusion variants with a shared seed", cmd_ablate)
    s.add_argument("--data", required=True, help="training suite directory")
    s.add_argument("--out", required=True, help="table CSV: #,variant,FFM,BFM,TAPE,Succ,Prec")
    s.add_argument("--config", help="configuration file (defaults to the desk preset)")
    s.add_argument("--heldout", help="evaluation suite directory (default: standard suite rendered with seed+1000)")
    s.add_argument("--epochs", type=int, help="override [train] epochs")
    s.add_argument("--seed", type=int, help="override [run] seed")
    s.add_argument("--plot", help="bar chart of the table (SVG)")

    s = add("gradcheck", "compare analytic gradients with finite differences in float64", cmd_gradcheck)
    s.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    s.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds (default 3)")
    s.add_argument("--tol", type=float, default=1e-4, help="maximum relative error (default 1e-4)")
    s.add_argument("--scope", default="all", help="tensor|tape|fusion|heads|model|all (default all)")

    add("selftest", "dataset-free checks of every module", cmd_selftest)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.fn(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc), EXIT_DIVERGED)
    except C.ConfigError as exc:
        return _fail("config", str(exc))
    except CheckpointError as exc:
        return _fail("checkpoint", str(exc))
    except TrackerInitError as exc:
        return _fail("track", str(exc))
    except (ContractError, ValueError) as exc:
        return _fail("input", str(exc))
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": "))


def _fail(kind: str, message: str, code: int = EXIT_USAGE) -> int:
    one_line = " ".join(message.split())
    print(f"error: {kind}: {one_line}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
