"""Command-line surface: gen-data | pretrain | embed | probe | prompt | ablate | report.

Every subcommand accepts --config and --seed; artifacts are pure functions
of (config, seed) plus input files. Exit codes: 0 success, 1 validation or
usage error, 2 runtime error. Set CINP_LOG=debug|info|warning for logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import workflows as wf
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, load_config
from .errors import CinpError, CinpValidationError, UsageError
from .evalkit import split_dataset
from .synthdata import load_cohort, save_cohort

log = logging.getLogger("cinp")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would sys.exit(2); we map to 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cinp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser):
        p.add_argument("--config", help="JSON config file (defaults fill the rest)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate a synthetic paired cohort")
    common(p)
    p.add_argument("--out", required=True, help="output cohort directory")

    p = sub.add_parser("pretrain", help="run contrastive pretraining")
    common(p)
    p.add_argument("--cohort", required=True, help="cohort directory")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("embed", help="write image/network embedding files")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="all",
                   choices=["all", "train", "val", "test"])

    p = sub.add_parser("probe", help="linear probe on frozen image embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="metrics JSON file")

    p = sub.add_parser("prompt", help="network-prompting classification")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="metrics JSON file")
    p.add_argument("--r", type=int, default=None,
                   help="references per class (default: first config prompt_r)")
    p.add_argument("--fcn-fraction", type=float, default=None,
                   help="fraction of training FCNs in the bank")
    p.add_argument("--refs-out", default=None,
                   help="optional path for the reference-set JSON")

    p = sub.add_parser("ablate", help="loss-combination ablation")
    common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--r", type=int, default=None)

    p = sub.add_parser("report", help="render history/metrics to text")
    common(p)
    p.add_argument("--history", default=None, help="history.jsonl from pretrain")
    p.add_argument("--metrics", nargs="*", default=[], help="metrics JSON files")
    p.add_argument("--out", default=None, help="write to file instead of stdout")

    return parser


def _resolve_config(args, ckpt: Checkpoint | None = None) -> Config:
    if args.config:
        cfg = load_config(args.config)
    elif ckpt is not None:
        cfg = Config.from_dict(ckpt.config)
    else:
        cfg = Config.default()
    if args.seed is not None:
        data = cfg.as_dict()
        data["seed"] = args.seed
        cfg = Config.from_dict(data)
    return cfg


def _write_json(path: str | Path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    config = _resolve_config(args)
    samples = wf.generate_cohort(config)
    save_cohort(args.out, samples, seed=config.seed)
    log.info("wrote cohort of %d subjects to %s", len(samples), args.out)
    return 0


def _cmd_pretrain(args) -> int:
    config = _resolve_config(args)
    cohort = load_cohort(args.cohort)
    ckpt, history = wf.train_on(config, cohort)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.cinp", ckpt.params, ckpt.opt_state,
                    ckpt.config, ckpt.step)
    wf.write_history(out / "history.jsonl", history)
    log.info("trained %d steps; checkpoint and history in %s", ckpt.step, out)
    return 0


def _select_split(config: Config, samples, which: str):
    if which == "all":
        return samples
    train, val, test = split_dataset(samples, config.split_spec())
    return {"train": train, "val": val, "test": test}[which]


def _cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = _resolve_config(args, ckpt)
    samples = _select_split(config, load_cohort(args.cohort), args.split)
    images, networks = wf.embed_cohort(ckpt, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images.save(out / "image.emb")
    networks.save(out / "network.emb")
    log.info("wrote %d embeddings per modality to %s", len(samples), out)
    return 0


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = _resolve_config(args, ckpt)
    train, _, test = split_dataset(load_cohort(args.cohort), config.split_spec())
    metrics = wf.probe_evaluate(ckpt, train, test, config.probe_cfg())
    _write_json(args.out, metrics.as_dict())
    log.info("probe metrics: %s", metrics.as_dict())
    return 0


def _cmd_prompt(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = _resolve_config(args, ckpt)
    train, _, test = split_dataset(load_cohort(args.cohort), config.split_spec())
    r = args.r if args.r is not None else config.eval["prompt_r"][0]
    fraction = args.fcn_fraction if args.fcn_fraction is not None \
        else config.eval["fcn_fraction"]
    if not (0.0 < fraction <= 1.0):
        raise UsageError("--fcn-fraction must be in (0, 1]")
    if r < 1:
        raise UsageError("--r must be >= 1")
    metrics, refs = wf.prompt_pipeline(ckpt, train, test, r, fraction, config.seed)
    _write_json(args.out, {"r": r, "fcn_fraction": fraction, **metrics.as_dict()})
    if args.refs_out:
        Path(args.refs_out).write_text(refs.to_json() + "\n")
    log.info("prompt metrics (r=%d): %s", r, metrics.as_dict())
    return 0


def _cmd_ablate(args) -> int:
    config = _resolve_config(args)
    cohort = load_cohort(args.cohort)
    rows = wf.ablate(config, cohort, r=args.r)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", rows)
    (out / "ablation.txt").write_text(wf.ablation_table(rows) + "\n")
    log.info("ablation rows written to %s", out)
    return 0


def _cmd_report(args) -> int:
    lines: list[str] = []
    if args.history:
        records = wf.read_history(args.history)
        if records:
            first, last = records[0], records[-1]
            best = min(r["total"] for r in records)
            lines += [
                f"training steps : {len(records)}",
                f"first total    : {first['total']:.6f} "
                f"(inc {first['inc']:.4f}, mim {first['mim']:.4f}, inm {first['inm']:.4f})",
                f"last total     : {last['total']:.6f} "
                f"(inc {last['inc']:.4f}, mim {last['mim']:.4f}, inm {last['inm']:.4f})",
                f"best total     : {best:.6f}",
                f"lr range       : {first['lr']:.3e} -> {last['lr']:.3e}",
                f"final tau      : {last['tau']:.4f}",
                "",
            ]
        else:
            lines.append("history: empty")
    for path in args.metrics:
        payload = json.loads(Path(path).read_text())
        lines.append(f"metrics {path}:")
        for key in sorted(payload):
            if key != "confusion":
                lines.append(f"  {key:<14} {payload[key]}")
        if "confusion" in payload:
            lines.append(f"  confusion      {payload['confusion']}")
        lines.append("")
    text = "\n".join(lines).rstrip() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "embed": _cmd_embed,
    "probe": _cmd_probe,
    "prompt": _cmd_prompt,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("CINP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CinpValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CinpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
