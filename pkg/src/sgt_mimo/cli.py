"""Command-line harness: train, ber, ablate, complexity.

Experiments are declarative TOML files (see configs/) plus a few flag
overrides. Every command is a pure function of (config, seeds): outputs are
CSV files whose first line embeds the config hash and seed, and reruns
produce byte-identical files. Wall-clock timing goes to stderr only.

Worker count for Monte-Carlo evaluation comes from the SGT_WORKERS env var.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .channel import Constellation
from .complexity import (
    ATTENTION_SCALING_SCOPES,
    count_forward,
    fit_loglog_slope,
    symbolic_counts,
)
from .network import (
    SgtConfig,
    SgtModel,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    BerRecord,
    LmmseDetector,
    MlDetector,
    OampDetector,
    SgtDetector,
    TrainConfig,
    TrainLog,
    check_ordering,
    evaluate_ber,
    train,
)

__all__ = ["main", "ExperimentConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Parsed experiment file plus its raw bytes for provenance hashing."""

    raw: bytes
    tree: dict

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        raw = Path(path).read_bytes()
        return cls(raw=raw, tree=tomllib.loads(raw.decode("utf-8")))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    def require(self, section: str, key: str):
        try:
            sec = self.tree[section]
        except KeyError:
            raise ConfigError(f"missing config section: [{section}]") from None
        try:
            return sec[key]
        except KeyError:
            raise ConfigError(
                f"missing config field: {section}.{key}"
            ) from None

    def get(self, section: str, key: str, default):
        return self.tree.get(section, {}).get(key, default)


def _provenance(cfg: ExperimentConfig, command: str, seed: int) -> str:
    return f"# command={command} seed={seed} config_sha256={cfg.sha256}\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header_comment: str, columns: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(header_comment)
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Config -> objects

def _build_sgt_config(cfg: ExperimentConfig, variant: str | None) -> SgtConfig:
    const = Constellation.from_name(cfg.get("system", "constellation", "qpsk"))
    d_model = cfg.require("sgt", "d_model")
    return SgtConfig(
        n_t=cfg.require("system", "n_t"),
        n_r=cfg.require("system", "n_r"),
        d_model=d_model,
        n_layers=cfg.require("sgt", "n_layers"),
        n_heads=cfg.get("sgt", "n_heads", SgtConfig.default_heads(d_model)),
        ffn_hidden=cfg.get("sgt", "ffn_hidden", 2 * d_model),
        bits_per_axis=const.bits_per_axis,
        variant=variant or cfg.get("sgt", "variant", "full-sgt"),
        weight_sharing=cfg.get("sgt", "weight_sharing", False),
        bidirectional_cross=cfg.get("sgt", "bidirectional_cross", False),
    )


def _build_train_config(cfg: ExperimentConfig, seed: int | None) -> TrainConfig:
    return TrainConfig(
        n_t=cfg.require("system", "n_t"),
        n_r=cfg.require("system", "n_r"),
        constellation=cfg.get("system", "constellation", "qpsk"),
        batch_size=cfg.get("train", "batch_size", 128),
        steps=cfg.require("train", "steps"),
        lr=cfg.get("train", "lr", 1e-3),
        lr_schedule=cfg.get("train", "lr_schedule", "cosine"),
        snr_lo_db=cfg.get("train", "snr_lo_db", 0.0),
        snr_hi_db=cfg.get("train", "snr_hi_db", 15.0),
        seed=seed if seed is not None else cfg.get("train", "seed", 0),
        prior_fraction=cfg.get("train", "prior_fraction", 0.25),
        prior_llr_scale=cfg.get("train", "prior_llr_scale", 16.0),
        val_every=cfg.get("train", "val_every", 0),
        val_snrs=tuple(cfg.get("train", "val_snrs", [])),
        val_trials=cfg.get("train", "val_trials", 2000),
        snapshot_every=cfg.get("train", "snapshot_every", 1000),
    )


def _trainlog_rows(log: TrainLog, val_snrs: tuple[float, ...]):
    val_at = {step: recs for step, recs in log.val_history}
    for i, (l, lr) in enumerate(zip(log.losses, log.lrs)):
        step = i + 1
        row = [step, repr(l), repr(lr)]
        recs = val_at.get(step)
        for j, _ in enumerate(val_snrs):
            row.append(repr(recs[j].ber) if recs else "")
        yield row


def _write_trainlog(
    path: Path, cfg: ExperimentConfig, seed: int, log: TrainLog,
    val_snrs: tuple[float, ...],
) -> None:
    columns = ["step", "loss", "lr"] + [f"val_ber@{s:g}dB" for s in val_snrs]
    _write_csv(path, _provenance(cfg, "train", seed), columns,
               _trainlog_rows(log, val_snrs))


# ---------------------------------------------------------------------------
# Subcommands

def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    tc = _build_train_config(cfg, args.seed)
    sc = _build_sgt_config(cfg, args.variant)
    model = SgtModel.init(sc, seed=tc.seed)
    log = train(model, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"sgt_{sc.variant}.npz"
    save_checkpoint(ckpt, model)
    _write_trainlog(out / f"trainlog_{sc.variant}.csv", cfg, tc.seed, log,
                    tc.val_snrs)
    print(f"wall_clock_s={log.wall_clock_s:.1f}", file=sys.stderr)
    if log.aborted:
        print("training aborted on non-finite loss; last snapshot retained",
              file=sys.stderr)
        return 1
    print(f"checkpoint written to {ckpt}")
    return 0


_DETECTORS = ("ml", "lmmse", "oamp", "sgt")


def _make_detectors(cfg: ExperimentConfig, names: list[str], checkpoint):
    detectors = []
    for name in names:
        if name == "ml":
            detectors.append(MlDetector())
        elif name == "lmmse":
            detectors.append(LmmseDetector())
        elif name == "oamp":
            detectors.append(OampDetector(cfg.get("eval", "oamp_iterations", 10)))
        elif name == "sgt":
            if checkpoint is None:
                raise ConfigError("detector 'sgt' requires --checkpoint")
            model = load_checkpoint(checkpoint)
            if (model.config.n_t, model.config.n_r) != (
                cfg.require("system", "n_t"), cfg.require("system", "n_r")
            ):
                raise ConfigError(
                    f"checkpoint dims {model.config.n_t}x{model.config.n_r} do not "
                    f"match config system dims "
                    f"{cfg.require('system', 'n_t')}x{cfg.require('system', 'n_r')}"
                )
            detectors.append(SgtDetector(model))
        else:
            raise ConfigError(
                f"unknown detector {name!r}, expected one of {_DETECTORS}"
            )
    return detectors


def _ber_rows(records: list[BerRecord]):
    for r in records:
        yield [r.detector, r.snr_db, repr(r.ber), r.errors, r.bits,
               repr(r.ci_low), repr(r.ci_high), r.trials, int(r.capped)]


BER_COLUMNS = ["detector", "snr_db", "ber", "errors", "bits",
               "ci_low", "ci_high", "trials", "capped"]


def cmd_ber(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seed = args.seed if args.seed is not None else cfg.get("eval", "seed", 0)
    const = Constellation.from_name(cfg.get("system", "constellation", "qpsk"))
    names = cfg.get("eval", "detectors", ["ml", "lmmse", "oamp"])
    detectors = _make_detectors(cfg, names, args.checkpoint)
    snrs = [float(s) for s in cfg.require("eval", "snrs_db")]
    trials = cfg.require("eval", "trials")
    records: list[BerRecord] = []
    for det in detectors:
        records.extend(
            evaluate_ber(
                det, snrs, trials=trials, seed=seed,
                n_t=cfg.require("system", "n_t"),
                n_r=cfg.require("system", "n_r"),
                constellation=const,
                min_errors=cfg.get("eval", "min_errors", 100),
            )
        )
    out = Path(args.out)
    _write_csv(out / "ber.csv", _provenance(cfg, "ber", seed), BER_COLUMNS,
               _ber_rows(records))
    print(f"ber table written to {out / 'ber.csv'}")
    if args.assert_ordering:
        scoped = [r for r in records if r.snr_db >= args.ordering_min_snr]
        violations = check_ordering(scoped, args.assert_ordering)
        if violations:
            for v in violations:
                print(f"ordering violation: {v}", file=sys.stderr)
            return 1
        print(f"ordering {args.assert_ordering!r} holds "
              f"(snr >= {args.ordering_min_snr:g} dB)")
    return 0


def final_loss(losses: list[float], window: int = 500) -> float:
    """Mean loss over the trailing window (the run's 'final' loss)."""
    w = min(window, len(losses))
    return float(np.mean(losses[-w:]))


def crossing_step(losses: list[float], target: float, window: int = 500) -> int:
    """First step whose trailing-window mean reaches the target loss; -1 if never."""
    arr = np.asarray(losses)
    csum = np.cumsum(np.insert(arr, 0, 0.0))
    for i in range(len(arr)):
        w = min(window, i + 1)
        if (csum[i + 1] - csum[i + 1 - w]) / w <= target:
            return i + 1
    return -1


def cmd_ablate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seed = args.seed
    variants = cfg.get("ablate", "variants",
                       ["full-sgt", "no-cross-attention", "qr-baseline"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    const = Constellation.from_name(cfg.get("system", "constellation", "qpsk"))
    snrs = [float(s) for s in cfg.get("eval", "snrs_db", [])]
    trials = cfg.get("eval", "trials", 0)

    results = {}
    for variant in variants:
        tc = _build_train_config(cfg, seed)  # identical budget for every variant
        sc = _build_sgt_config(cfg, variant)
        model = SgtModel.init(sc, seed=tc.seed)
        log = train(model, tc)
        if log.aborted:
            print(f"{variant}: training aborted on non-finite loss",
                  file=sys.stderr)
            return 1
        save_checkpoint(out / f"sgt_{variant}.npz", model)
        _write_trainlog(out / f"trainlog_{variant}.csv", cfg, tc.seed, log,
                        tc.val_snrs)
        records = []
        if snrs and trials:
            records = evaluate_ber(
                SgtDetector(model, name=variant), snrs, trials=trials,
                seed=seed, n_t=tc.n_t, n_r=tc.n_r, constellation=const,
                min_errors=cfg.get("eval", "min_errors", 100),
            )
        results[variant] = (log, records)
        print(f"{variant}: final_loss={final_loss(log.losses):.6f}",
              file=sys.stderr)

    report_rows = []
    for variant, (log, records) in results.items():
        row = [variant, len(log.losses), repr(final_loss(log.losses))]
        for r in records:
            row.append(repr(r.ber))
        report_rows.append(row)
    columns = ["variant", "steps", "final_loss"] + [f"ber@{s:g}dB" for s in snrs]
    _write_csv(out / "ablate_report.csv", _provenance(cfg, "ablate", seed),
               columns, report_rows)

    crossing_rows = []
    for va, (log_a, _) in results.items():
        for vb, (log_b, _) in results.items():
            if va == vb:
                continue
            step = crossing_step(log_a.losses, final_loss(log_b.losses))
            frac = step / len(log_a.losses) if step > 0 else float("inf")
            crossing_rows.append([va, vb, step, repr(frac)])
    _write_csv(out / "ablate_crossings.csv", _provenance(cfg, "ablate", seed),
               ["variant", "reaches_final_loss_of", "step", "fraction_of_steps"],
               crossing_rows)
    print(f"ablation report written to {out / 'ablate_report.csv'}")
    return 0


def cmd_complexity(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    d_model = cfg.require("sgt", "d_model") if cfg else args.d_model
    n_layers = cfg.require("sgt", "n_layers") if cfg else args.n_layers
    sizes = [int(s) for s in args.dims.split(",")]
    rows = []
    score_macs = []
    for n in sizes:
        sc = SgtConfig(
            n_t=n, n_r=n, d_model=d_model, n_layers=n_layers,
            n_heads=SgtConfig.default_heads(d_model), ffn_hidden=2 * d_model,
        )
        counted = count_forward(sc)
        symbolic = symbolic_counts(sc)
        if counted.by_scope != symbolic:
            print(f"instrumented/symbolic mismatch at N={n}: "
                  f"{counted.by_scope} vs {symbolic}", file=sys.stderr)
            return 1
        for scope in sorted(counted.by_scope):
            rows.append([n, n, d_model, n_layers, scope,
                         counted.by_scope[scope], symbolic[scope]])
        score_macs.append(counted.attention_score_macs())
    slope = fit_loglog_slope(sizes, score_macs)
    out = Path(args.out)
    header = (
        (_provenance(cfg, "complexity", 0) if cfg else "# command=complexity\n")
        + f"# attention_score_loglog_slope={slope:.6f} "
        + f"scopes={'+'.join(ATTENTION_SCALING_SCOPES)}\n"
    )
    _write_csv(out / "macs.csv", header,
               ["n_t", "n_r", "d_model", "n_layers", "scope", "macs",
                "symbolic_macs"], rows)
    print(f"attention-score log-log slope over N={sizes}: {slope:.4f}")
    print(f"mac table written to {out / 'macs.csv'}")
    return 0


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sgt-mimo",
        description="Soft Graph Transformer MIMO detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a detector from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default="out")
    p_train.add_argument("--variant", default=None,
                         help="overrides sgt.variant from the config")
    p_train.set_defaults(fn=cmd_train)

    p_ber = sub.add_parser("ber", help="Monte-Carlo BER sweep over an SNR grid")
    p_ber.add_argument("--config", required=True)
    p_ber.add_argument("--seed", type=int, default=None)
    p_ber.add_argument("--out", default="out")
    p_ber.add_argument("--checkpoint", default=None,
                       help="SGT checkpoint (required when detectors include sgt)")
    p_ber.add_argument("--assert-ordering", default=None,
                       help="e.g. 'ml<=sgt<=lmmse'; nonzero exit on violation")
    p_ber.add_argument("--ordering-min-snr", type=float, default=float("-inf"))
    p_ber.set_defaults(fn=cmd_ber)

    p_abl = sub.add_parser(
        "ablate", help="train all variants under one budget and compare"
    )
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--seed", type=int, default=0)
    p_abl.add_argument("--out", default="out")
    p_abl.set_defaults(fn=cmd_ablate)

    p_cx = sub.add_parser("complexity", help="MAC scaling table and slope fit")
    p_cx.add_argument("--dims", default="4,8,16,32",
                      help="comma-separated N values (runs N x N systems)")
    p_cx.add_argument("--config", default=None)
    p_cx.add_argument("--d-model", type=int, default=64)
    p_cx.add_argument("--n-layers", type=int, default=4)
    p_cx.add_argument("--out", default="out")
    p_cx.set_defaults(fn=cmd_complexity)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
