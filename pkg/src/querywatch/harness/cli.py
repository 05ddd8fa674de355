"""Command-line entry point: ``querywatch <command> [--config FILE] [--section.key VALUE ...]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .. import numerics as nx
from ..detector import BanPolicy, BufferPolicy, calibrate_threshold, identity_embed, k_sweep
from ..gateway import GatewayServer
from ..models import accuracy
from .config import Settings, known_keys, load_settings
from .desk import load_or_build, substream
from .economics import summarize_costs
from .episode import run_episode, run_trial
from .report import emit_report, emit_sweep, format_table

log = logging.getLogger("querywatch")

COMMANDS = ("train", "calibrate", "sweep-k", "attack", "episode", "economics", "serve", "report")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key-value settings file")
    p.add_argument("--seed", help="root seed (overrides QW_SEED and the file)")
    group = p.add_argument_group("settings")
    for section, keys in known_keys().items():
        if section == "run":
            keys = {k: v for k, v in keys.items() if k != "seed"}
        for key in keys:
            group.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", metavar="VALUE", default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="querywatch", description="Stateful query-sequence detection experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    helps = {
        "train": "build (or load) the desk: dataset, classifier, encoder, thresholds",
        "calibrate": "recompute encoder and raw-l2 thresholds for [desk] k / fpr",
        "sweep-k": "threshold as a function of k",
        "attack": "run a single trial and print its trace record",
        "episode": "run [episode] trials and print the summary row",
        "economics": "attacker cost and side-channel arithmetic",
        "serve": "serve the defended classifier over TCP",
        "report": "run every attack in [run] suite and write a CSV",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def settings_from_args(args) -> Settings:
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return load_settings(args.config, overrides)


def _out(settings: Settings, default: str) -> str:
    return settings.get("run", "out") or default


def cmd_train(s: Settings) -> int:
    desk = load_or_build(s.desk(), s.cache_dir)
    print(f"classifier accuracy {accuracy(desk.classifier, desk.test):.3f}")
    print(f"encoder threshold   {desk.tau:.6f}")
    print(f"raw-l2 threshold    {desk.tau_raw:.6f}")
    out = s.get("run", "out")
    if out:
        os.makedirs(out, exist_ok=True)
        nx.save_model(desk.classifier, os.path.join(out, "classifier.qwm"))
        nx.save_model(desk.encoder, os.path.join(out, "encoder.qwm"))
        print(f"models written to {out}")
    return 0


def cmd_calibrate(s: Settings) -> int:
    desk = load_or_build(s.desk(), s.cache_dir)
    cfg = s.desk()
    buf = BufferPolicy("query", cfg.buffer)
    tau = calibrate_threshold(desk.embed, desk.calibration, cfg.k, cfg.fpr, substream(s.seed, "detector-shuffle"), buf)
    raw = calibrate_threshold(identity_embed, desk.calibration, cfg.k, cfg.fpr,
                              substream(s.seed, "detector-shuffle"), buf)
    print(f"k={cfg.k} fpr={cfg.fpr}: encoder {tau:.6f}, raw-l2 {raw:.6f}")
    return 0


def cmd_sweep_k(s: Settings) -> int:
    desk = load_or_build(s.desk(), s.cache_dir)
    cfg = s.desk()
    pairs = k_sweep(desk.embed, desk.calibration, s.get("run", "k_list"), cfg.fpr,
                    substream(s.seed, "detector-shuffle"), BufferPolicy("query", cfg.buffer))
    for k, tau in pairs:
        print(f"{k:>5} {tau:.6f}")
    path = _out(s, "k-sweep.csv")
    emit_sweep(pairs, path)
    print(f"written to {path}")
    return 0


def cmd_attack(s: Settings) -> int:
    desk = load_or_build(s.desk(), s.cache_dir)
    trace = run_trial(desk, s.episode(), int(s.get("run", "trial")))
    print(trace.to_record())
    return 0 if trace.success else 1


def cmd_episode(s: Settings) -> int:
    desk = load_or_build(s.desk(), s.cache_dir)
    rep = run_episode(desk, s.episode())
    print(format_table([rep]))
    if s.get("run", "out"):
        emit_report([rep], s.get("run", "out"))
    return 0


def cmd_economics(s: Settings) -> int:
    e = s.values["economics"]
    print("\n".join(summarize_costs(detections=e["detections"], buffer_hours=e["buffer_hours"],
                                    buffer_queries=e["buffer_queries"],
                                    undefended_queries=e["undefended_queries"],
                                    price_per_1000=e["price_per_1000"]).lines()))
    return 0


def cmd_serve(s: Settings) -> int:
    desk = load_or_build(s.desk(), s.cache_dir)
    gw = desk.gateway(BanPolicy(**s.values["ban"]), soft=s.get("run", "soft"))
    server = GatewayServer(gw, s.get("run", "host"), int(s.get("run", "port")))
    print(f"serving on {s.get('run', 'host')}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_report(s: Settings) -> int:
    desk = load_or_build(s.desk(), s.cache_dir)
    base = s.episode()
    reports = []
    for entry in s.get("run", "suite"):
        attack, _, blinding = entry.partition("/")
        cfg = replace(base, attack=attack, blinding=blinding or None)
        reports.append(run_episode(desk, cfg, name=entry))
        print(format_table(reports[-1:]).splitlines()[-1], flush=True)
    path = _out(s, "report.csv")
    emit_report(reports, path)
    print(f"written to {path}")
    return 0


HANDLERS = {"train": cmd_train, "calibrate": cmd_calibrate, "sweep-k": cmd_sweep_k, "attack": cmd_attack,
            "episode": cmd_episode, "economics": cmd_economics, "serve": cmd_serve, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = settings_from_args(args)
    except (KeyError, ValueError) as exc:
        print(f"querywatch: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(settings.get("run", "log_level")).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    np.set_printoptions(precision=6)
    return HANDLERS[args.command](settings)


if __name__ == "__main__":
    sys.exit(main())
