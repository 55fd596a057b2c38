"""Command-line entry point: ``bilctc <subcommand> ...``.

Every subcommand writes into ``--out`` (a run directory) a ``config.ini``
with all resolved settings and the tool version, next to its outputs.
Errors exit with the code of their class (see :mod:`bilctc.errors`).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, ctc
from .config import RunConfig, load_run_config, parse_set_option
from .data import generate_splits, load_dataset, save_dataset, synthetic_vocabs, write_vocab
from .decode import decode_samples, read_nbest, best_tokens, write_nbest
from .errors import BilctcError, InfeasibleTargetError, InvalidInputError, MissingFileError
from .metrics import evaluate, write_report
from .model import CTC, XCTC, model_from_checkpoint, average_checkpoints
from .nn import save_checkpoint
from .report import plot_alignment, plot_ladder, plot_training_curves, read_train_log, write_tsv, TABLE_COLUMNS
from .train import LADDER_ROWS, ladder_table, run_ablation_ladder, train

log = logging.getLogger("bilctc")

SPLITS = ("train", "dev", "test")


def _existing(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such file or directory: {p}")
    return p


def _run_config(args, flag_overrides: dict[str, dict[str, str]]) -> RunConfig:
    overrides = parse_set_option(args.set or [])
    for section, kv in flag_overrides.items():
        overrides.setdefault(section, {}).update({k: v for k, v in kv.items() if v is not None})
    rc = load_run_config(args.config, overrides)
    # the model's input size and vocabularies always follow the task
    rc.model = replace(
        rc.model, d_in=rc.task.d_in, vocab_x=rc.task.vocab_x, vocab_y=rc.task.vocab_y
    )
    return rc


def _out_dir(args, rc: RunConfig | None = None, extra: dict | None = None) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if rc is not None:
        rc.save(out / "config.ini")
    command = {"tool_version": __version__, "argv": sys.argv[1:], **(extra or {})}
    (out / "command.json").write_text(json.dumps(command, indent=2, sort_keys=True) + "\n")
    return out


def _split_file(data: Path, split: str) -> Path:
    return _existing(data / f"{split}.jsonl" if data.is_dir() else data)


def cmd_gen_data(args) -> None:
    rc = _run_config(args, {"task": {"seed": args.seed}})
    out = _out_dir(args, rc)
    d = rc.data
    splits = generate_splits(rc.task, d.n_train, d.n_dev, d.n_test)
    start = {"train": 0, "dev": d.n_train, "test": d.n_train + d.n_dev}
    for name in SPLITS:
        samples = splits[name]
        if d.store == "seed":
            idx = list(range(start[name], start[name] + len(samples)))
            save_dataset(out / f"{name}.jsonl", samples, task=rc.task, indices=idx)
        else:
            save_dataset(out / f"{name}.jsonl", samples)
    src, tgt = synthetic_vocabs(rc.task)
    write_vocab(out / "vocab_x.txt", src)
    write_vocab(out / "vocab_y.txt", tgt)
    print(f"wrote {sum(len(s) for s in splits.values())} samples to {out}")


def cmd_train(args) -> None:
    rc = _run_config(args, {"train": {"seed": args.seed, "steps": args.steps}})
    out = _out_dir(args, rc)
    data = _existing(args.data)
    tr = load_dataset(_split_file(data, "train"))
    dev = load_dataset(_split_file(data, "dev")) if data.is_dir() else []
    result = train(rc.model, tr, dev, rc.train, out)
    plot_training_curves({out.name: read_train_log(result.log_path)}, out / "training_curves.png")
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.best_dev_loss is not None:
        print(f"best dev loss: {result.best_dev_loss:.4f}")


def cmd_decode(args) -> None:
    rc = _run_config(
        args,
        {"decode": {"mode": args.mode, "ctc_weight": args.ctc_weight, "beam": args.beam, "nbest": args.nbest}},
    )
    out = _out_dir(args, rc, {"checkpoint": args.checkpoint})
    model = model_from_checkpoint(_existing(args.checkpoint))
    samples = load_dataset(_split_file(_existing(args.data), "test"))
    records = decode_samples(model, samples, rc.decode)
    path = write_nbest(records, out / "nbest.tsv")
    print(f"decoded {len(samples)} utterances -> {path}")


def cmd_align(args) -> None:
    out = _out_dir(args, extra={"checkpoint": args.checkpoint, "head": args.head})
    model = model_from_checkpoint(_existing(args.checkpoint))
    samples = load_dataset(_split_file(_existing(args.data), "test"))
    if args.id:
        samples = [s for s in samples if s.id in set(args.id)]
        if not samples:
            raise InvalidInputError(f"none of the ids {args.id} are in the dataset")
    head = args.head
    rows = []
    import torch

    with torch.no_grad():
        for s in samples:
            feats = torch.as_tensor(s.features)[None]
            enc = model.encode(feats, torch.tensor([s.num_frames]))
            lp = enc.log_probs(head)[0].double().numpy()
            target = s.x if head == CTC else s.y
            if not ctc.is_feasible(len(lp), target):
                raise InfeasibleTargetError(
                    f"{s.id}: {len(target)} labels cannot be aligned to {len(lp)} frames"
                )
            path, score = ctc.forced_align(lp, target)
            rows.append(
                {
                    "id": s.id,
                    "head": head,
                    "frames": len(lp),
                    "score": score,
                    "path": " ".join(map(str, path)),
                    "collapsed": " ".join(map(str, ctc.collapse(path))),
                    "target": " ".join(map(str, target)),
                }
            )
            if len(rows) == 1:
                plot_alignment(lp, path, out / f"alignment_{s.id}.png", title=f"{s.id} ({head})")
    write_tsv(rows, out / "alignments.tsv")
    print(f"aligned {len(rows)} utterances -> {out / 'alignments.tsv'}")


def cmd_eval(args) -> None:
    out = _out_dir(args, extra={"nbest": args.nbest, "target": args.target})
    records = read_nbest(_existing(args.nbest))
    samples = load_dataset(_split_file(_existing(args.data), "test"))
    hyp_map = best_tokens(records)
    missing = [s.id for s in samples if s.id not in hyp_map]
    if missing:
        raise InvalidInputError(f"n-best file lacks {len(missing)} ids, e.g. {missing[0]}")
    refs = [s.y if args.target == "y" else s.x for s in samples]
    hyps = [hyp_map[s.id] for s in samples]
    report = evaluate([s.id for s in samples], hyps, refs, {"nbest": args.nbest, "target": args.target})
    write_report(report, out / "report.json")
    write_tsv(
        [{"id": r["id"], "errors": r["errors"], "ref_len": len(r["ref"]), "exact": r["hyp"] == r["ref"]} for r in report.records],
        out / "per_sample.tsv",
    )
    print(report.summary_line())


def cmd_avg(args) -> None:
    out_file = Path(args.out)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    paths = [_existing(p) for p in args.checkpoints]
    ckpt = average_checkpoints(paths, k=args.k)
    save_checkpoint(out_file, ckpt)
    print(f"averaged steps {ckpt.meta['averaged_from']} -> {out_file}")


def cmd_ablation(args) -> None:
    rc = _run_config(args, {"train": {"steps": args.steps}})
    out = _out_dir(args, rc, {"seeds": args.seeds, "tasks": args.task})
    data = _existing(args.data)
    splits = {name: load_dataset(_split_file(data, name)) for name in SPLITS}
    if args.limit_test:
        splits["test"] = splits["test"][: args.limit_test]
    rows = args.rows or list(LADDER_ROWS)
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = []
    for task in args.task.split(","):
        cells += run_ablation_ladder(
            rc.model, splits, rc.train, rc.decode, out,
            topologies=args.topologies.split(","), rows=rows, seeds=seeds, task=task,
        )
    table = ladder_table(cells, metric=args.metric)
    write_tsv(table, out / "ladder.tsv", TABLE_COLUMNS)
    plot_ladder(table, out / "ladder.png", metric=args.metric.replace("_", " "))
    logs = {}
    for c in cells:
        run = Path(c.checkpoint).parent
        logs[run.name] = read_train_log(run / "train_log.jsonl")
    plot_training_curves(logs, out / "training_curves.png")
    per_run = [
        {"task": c.task, "topology": c.topology, "method": c.row, "seed": c.seed,
         **{m: (None if v is None else v[args.metric]) for m, v in c.metrics.items()}}
        for c in cells
    ]
    write_tsv(per_run, out / "runs.tsv")
    print((out / "ladder.tsv").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bilctc", description="Bilingual CTC desk-scale lab")
    p.add_argument("--version", action="version", version=f"bilctc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="run directory (output file for avg-checkpoints)")
        if config:
            sp.add_argument("--config", help="INI configuration file")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                            help="override one config value; repeatable")

    g = sub.add_parser("gen-data", help="generate the synthetic train/dev/test splits")
    common(g)
    g.add_argument("--seed", help="task seed (overrides task.seed)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--seed")
    t.add_argument("--steps")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="write an n-best TSV for a dataset")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True, help="dataset file, or a directory (uses test.jsonl)")
    d.add_argument("--mode", choices=["ctc_greedy", "ctc_prefix_beam", "attn_only", "rescoring", "rescoring_two_pass"])
    d.add_argument("--lambda", dest="ctc_weight", help="CTC weight in the fused score")
    d.add_argument("--beam", help="beam width, or 'none' for exhaustive search")
    d.add_argument("--nbest")
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("align", help="forced alignment of references against a CTC head")
    common(a, config=False)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--head", choices=[CTC, XCTC], default=CTC)
    a.add_argument("--id", action="append", help="restrict to these sample ids")
    a.set_defaults(func=cmd_align)

    e = sub.add_parser("eval", help="score an n-best TSV against references")
    common(e, config=False)
    e.add_argument("--nbest", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--target", choices=["x", "y"], default="y")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("avg-checkpoints", help="average checkpoints with the lowest dev loss")
    v.add_argument("checkpoints", nargs="+")
    v.add_argument("--out", required=True, help="output checkpoint file")
    v.add_argument("--k", type=int, help="keep the k lowest dev-loss checkpoints (default: all)")
    v.set_defaults(func=cmd_avg)

    b = sub.add_parser("ablation", help="train and decode the cumulative ablation ladder")
    common(b)
    b.add_argument("--data", required=True)
    b.add_argument("--steps")
    b.add_argument("--seeds", default="0", help="comma separated")
    b.add_argument("--task", default="st", help="st, asr or st,asr")
    b.add_argument("--topologies", default="progressive,synchronous")
    b.add_argument("--rows", nargs="*", choices=list(LADDER_ROWS))
    b.add_argument("--metric", default="exact_match", choices=["exact_match", "bleu", "wer"])
    b.add_argument("--limit-test", type=int, help="decode only the first N test samples")
    b.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except BilctcError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
