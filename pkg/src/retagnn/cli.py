"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from . import numkernel as nk
from .checkpoint import CheckpointError, load_params, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, model_config_from_dict
from .ingest import (TEST, TRAIN, VALIDATION, ConfigurationError, DataError, ingest_dataset, make_csr_samples,
                     make_isr_samples, make_isr_split, read_bundle, write_bundle)
from .recommender import LONG, Domain, RetaGNN
from .ssa import export_attention
from .synthetic import planted_dataset

log = logging.getLogger("retagnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for key, (owner, attr) in sorted(RunConfig().keys().items()):
        current = getattr(owner, attr)
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None,
                       metavar=type(current).__name__.upper(),
                       help=f"default: {current}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retagnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {
        "ingest": "normalize a raw dataset (movielens, bookcrossing, planted) into a bundle",
        "train": "train on a bundle; writes checkpoint and loss curve",
        "eval": "evaluate a checkpoint on a bundle (csr or isr)",
        "transfer": "zero-shot evaluation of a source checkpoint on a target bundle",
        "dump-subgraph": "write the enclosing subgraph of one sample",
        "export-attention": "write mean self-attention matrices",
    }
    for name, help_text in cmds.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "dump-subgraph":
            p.add_argument("--sample", type=int, default=0, help="sample id")
            p.add_argument("--term", default="long",
                           help="'long' or a subsession index 0..pi-1")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return load_run_config(args.config, overrides)


def _header(cfg: RunConfig, command: str) -> dict:
    head = {"command": command}
    head.update(cfg.as_dict())
    return head


def _write_text(path: Path, cfg: RunConfig, command: str, body: str) -> None:
    head = "".join(f"# {k}={v}\n" for k, v in _header(cfg, command).items())
    path.write_text(head + body, encoding="utf-8")


def _load_bundle(path):
    if not path:
        raise ConfigError("a bundle directory is required (--bundle)")
    try:
        return read_bundle(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def _samples(cfg: RunConfig, bundle):
    m = cfg.model
    stride = cfg.stride or None
    if cfg.protocol == "isr":
        tr, te = make_isr_split(bundle.sequences, cfg.train_frac, cfg.seed)
        samples = make_isr_samples(tr, te, m.t, m.g, stride)
        held = {s.user for s in te}
        test = [s for s in samples if s.user in held]
    else:
        samples = make_csr_samples(bundle.sequences, m.t, m.g, stride)
        test = [s for s in samples if s.split == TEST]
    if not samples:
        raise DataError("no sequence is long enough for a single t+g window")
    return samples, test


# -- commands ------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, out: Path) -> None:
    if cfg.dataset == "planted":
        try:
            seqs, catalog, stats = planted_dataset(cfg.planted_users, cfg.planted_items,
                                                   cfg.planted_attrs, seed=cfg.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        if not cfg.data:
            raise ConfigError("ingest needs --data pointing at the raw dataset directory")
        try:
            seqs, catalog, stats = ingest_dataset(cfg.dataset, cfg.data,
                                                  cfg.threshold or None, cfg.min_interactions)
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from None
    write_bundle(out, seqs, catalog, stats, extra={f"config.{k}": v
                                                   for k, v in _header(cfg, "ingest").items()})
    print(stats.to_text(), end="")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    bundle = _load_bundle(cfg.bundle)
    samples, _ = _samples(cfg, bundle)
    model = RetaGNN(cfg.model, cfg.seed)
    domain = Domain(bundle.catalog, samples, cfg.model, primitive_seed=cfg.seed)
    result = harness.train(model, domain, cfg.train, cfg.seed,
                           on_epoch=lambda e, l, n: print(f"epoch {e} loss {l:.6f} val_ndcg {n:.6f}"))
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    save_checkpoint(ckpt, result.params, _header(cfg, "train"))
    curve = "".join(f"{e} {l:.10f}\n" for e, l in result.curve)
    _write_text(out / "loss_curve.txt", cfg, "train", curve)
    print(f"best_epoch={result.best_epoch} steps={result.steps} checkpoint={ckpt}")


def _load_model(cfg: RunConfig, path: str):
    if not path:
        raise ConfigError("a checkpoint path is required (--checkpoint or --source)")
    try:
        params, header = load_params(path, cfg.model)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    return params, header


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    bundle = _load_bundle(cfg.bundle)
    samples, test = _samples(cfg, bundle)
    params, _ = _load_model(cfg, cfg.checkpoint)
    model = RetaGNN(cfg.model, cfg.seed, params)
    domain = Domain(bundle.catalog, samples, cfg.model, primitive_seed=cfg.seed)
    config = _header(cfg, "eval")
    if cfg.protocol == "isr":
        report = harness.eval_isr(model, domain, test, cfg.train, cfg.seed, config)
    else:
        report = harness.eval_csr(model, domain, cfg.train, cfg.seed, config)
    report.write(out)
    print(report.to_text(), end="")


def cmd_transfer(cfg: RunConfig, out: Path) -> None:
    target = _load_bundle(cfg.target or cfg.bundle)
    cfg.protocol = "csr"
    samples, _ = _samples(cfg, target)
    params, _ = _load_model(cfg, cfg.source or cfg.checkpoint)
    report, _, _ = harness.eval_tsr(params, cfg.model, target.catalog, samples, cfg.train,
                                    cfg.seed, _header(cfg, "transfer"),
                                    fine_tune_epochs=cfg.fine_tune_epochs,
                                    reinit_embed_ffn=cfg.reinit_embed_ffn)
    report.write(out)
    print(report.to_text(), end="")


def cmd_dump_subgraph(cfg: RunConfig, out: Path, sample_id: int, term: str) -> None:
    bundle = _load_bundle(cfg.bundle)
    samples, _ = _samples(cfg, bundle)
    if not 0 <= sample_id < len(samples):
        raise ConfigError(f"sample id {sample_id} outside 0..{len(samples) - 1}")
    domain = Domain(bundle.catalog, samples, cfg.model, primitive_seed=cfg.seed)
    if term == "long":
        key = LONG
    else:
        try:
            key = int(term)
        except ValueError:
            raise ConfigError(f"bad --term {term!r}") from None
        if not 0 <= key < cfg.model.pi:
            raise ConfigError(f"--term must be in 0..{cfg.model.pi - 1}")
    sg = domain.subgraph(samples[sample_id], key)
    path = out / f"subgraph_{sample_id}_{term}.txt"
    sg.dump(path)
    body = path.read_text(encoding="utf-8")
    _write_text(path, cfg, "dump-subgraph", body)
    print(f"nodes={sg.num_nodes} edges={sg.graph.edge_count // 2} path={path}")


def cmd_export_attention(cfg: RunConfig, out: Path) -> None:
    bundle = _load_bundle(cfg.bundle)
    samples, _ = _samples(cfg, bundle)
    params, _ = _load_model(cfg, cfg.checkpoint)
    model = RetaGNN(cfg.model, cfg.seed, params)
    domain = Domain(bundle.catalog, samples, cfg.model, primitive_seed=cfg.seed)
    splits = (TRAIN, VALIDATION) if cfg.split == "both" else (cfg.split,)
    for split in splits:
        chosen = [s for s in samples if s.split == split]
        if not chosen:
            raise DataError(f"no samples in split {split!r}")
        for term, betas in sorted(model.attention(domain, chosen).items()):
            name = "long" if term == LONG else f"short{term}"
            path = out / f"attention_{split}_{name}.txt"
            mean = export_attention(betas)
            body = "".join(" ".join(f"{x:.8f}" for x in row) + "\n" for row in mean)
            _write_text(path, cfg, "export-attention", f"# split={split} term={name}\n" + body)
            print(f"{split} {name}: {mean.shape[0]}x{mean.shape[1]} -> {path}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        nk.set_precision(cfg.train.precision)
        print(cfg.to_text(), end="")
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "ingest":
            cmd_ingest(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out)
        elif args.command == "transfer":
            cmd_transfer(cfg, out)
        elif args.command == "dump-subgraph":
            cmd_dump_subgraph(cfg, out, args.sample, args.term)
        else:
            cmd_export_attention(cfg, out)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except harness.DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
