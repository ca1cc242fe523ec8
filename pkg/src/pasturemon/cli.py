"""Command-line front end: ``pasturemon <command> [--config P] [--seed N] [--out D] [key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, float_list, int_list, resolve, write_config

log = logging.getLogger("pasturemon")

COMMANDS = ("synth", "train", "predict", "plan", "perceive", "eval")


class CommandError(RuntimeError):
    pass


def _torch(cfg):
    import torch
    torch.set_num_threads(max(int(cfg["threads"]), 1))
    return torch


def _require(cfg, key):
    if not cfg[key]:
        raise CommandError(f"config key {key!r} must be set for this command")
    return cfg[key]


def _load_dataset(cfg) -> np.ndarray:
    from .hmap import read_sequence
    return read_sequence(_require(cfg, "dataset_dir"), prefix="map")


def _series(cfg):
    from .field_synth import load_historical_series, seasonal_series
    if cfg["series_path"]:
        if not Path(cfg["series_path"]).is_file():
            raise CommandError(f"series file not found: {cfg['series_path']}")
        return load_historical_series(cfg["series_path"])
    return seasonal_series(cfg["days"])


def _synthesize(cfg):
    from .field_synth import GPParams, SynthConfig, synthesize_dataset
    sc = SynthConfig(rows=cfg["rows"], cols=cfg["cols"], width=cfg["width"], height=cfg["height"],
                     gp=GPParams(cfg["gp_length_scale"] or None), noise_std=cfg["noise_std"],
                     length_scale_factor=cfg["length_scale_factor"], weight_scale=cfg["weight_scale"])
    return synthesize_dataset(sc, _series(cfg), cfg["seed"])


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, out: Path, args):
    from .field_synth import write_dataset
    res = _synthesize(cfg)
    write_dataset(res, out)
    log.info("wrote %d maps of %dx%d to %s", res.maps.shape[0], cfg["rows"], cfg["cols"], out)


def _train(cfg, maps, out: Path):
    torch = _torch(cfg)
    from .predictor import Network, NetworkConfig, TrainConfig, build_sequences, save_model, train
    torch.manual_seed(cfg["seed"])
    M, N = maps.shape[1:]
    net = Network(NetworkConfig(M, N, int_list(cfg["channels"]), cfg["kernel"], cfg["dropout"])).float()
    s, a = cfg["stride"], cfg["alpha"]
    tr = build_sequences(maps[:cfg["train_end"]], s, a)
    va = build_sequences(maps[cfg["train_end"]:cfg["val_end"]], s, a)
    res = train(net, tr, va, TrainConfig(cfg["lr"], cfg["momentum"], cfg["batch_size"], cfg["max_epochs"],
                                         cfg["patience"], None, cfg["seed"]))
    save_model(net, out / "model.pstl")
    with open(out / "train_log.csv", "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for i, (a_, b_) in enumerate(zip(res.train_loss, res.val_loss)):
            fh.write(f"{i},{a_!r},{b_!r}\n")
    log.info("trained %d epochs (best %d, early stop %s); model at %s", res.epochs, res.best_epoch,
             res.stopped_early, out / "model.pstl")
    return net


def cmd_train(cfg, out: Path, args):
    _train(cfg, _load_dataset(cfg), out)


def _load_model(cfg):
    _torch(cfg)
    from .predictor import load_model
    path = Path(_require(cfg, "model_path"))
    if not path.is_file():
        raise CommandError(f"model file not found: {path}")
    return load_model(path)


def cmd_predict(cfg, out: Path, args):
    from .predictor import mc_predict, write_prediction
    net = _load_model(cfg)
    maps = _load_dataset(cfg)
    s, a, i0 = cfg["stride"], cfg["alpha"], cfg["input_start"]
    idx = i0 + s * np.arange(a)
    if i0 < 0 or idx[-1] >= maps.shape[0]:
        raise CommandError(f"input window {i0}..{idx[-1]} lies outside the {maps.shape[0]}-map dataset")
    res = mc_predict(net, maps[idx], cfg["K"], cfg["p"], cfg["seed"], horizon=cfg["horizon"] or None)
    write_prediction(res, out)
    log.info("predicted %d steps with K=%d p=%g into %s", res.means.shape[0], res.K, res.p, out)


def cmd_plan(cfg, out: Path, args):
    from .hmap import read_sequence
    from .planner import (MAX_EXHAUSTIVE, BudgetConstraint, GroundSet, PlannerWeights, brute_force_plan,
                          certificate, curvature, greedy_plan, write_policy)
    var = read_sequence(_require(cfg, "variance_dir"), prefix="var")
    rho = float_list(cfg["robot_weights"]) or (1.0,) * cfg["robots"]
    V = GroundSet(var.shape[1], var.shape[2], rho, cfg["t1"], var.shape[0])
    w = PlannerWeights(cfg["w1"], cfg["w2"], cfg["w3"])
    c = BudgetConstraint(cfg["per_day"], cfg["total_days"])
    if not np.any(var > 0):
        log.warning("all predicted variances are zero; the plan only reflects the waiting penalty")
    cf = ratio = None
    if args.certify and len(V) > MAX_EXHAUSTIVE:
        raise CommandError(f"--certify needs exhaustive search, limited to |V| <= {MAX_EXHAUSTIVE}; "
                           f"this ground set has {len(V)} factors")
    pol = greedy_plan(V, var, w, c)
    if args.certify:
        opt = brute_force_plan(V, var, w, c)
        cv = curvature(V, var, w)
        cert = certificate(pol.value, opt.value, cv.value)
        cf, ratio = cv.value, cert.ratio
        log.info("greedy %.6g, optimum %.6g, c_f %.4g, bound %s", pol.value, opt.value, cv.value,
                 "holds" if cert.passed else "VIOLATED")
    write_policy(out / "policy.txt", pol, weights=w, budget=c, seed=cfg["seed"], curvature_value=cf, ratio=ratio)
    log.info("policy with %d factors, f=%.6g, written to %s", len(pol), pol.value, out / "policy.txt")


def cmd_perceive(cfg, out: Path, args):
    from .hmap import read_hmap, write_hmap
    from .perception import (CropBox, estimate_heightmap, format_report, read_point_cloud, sample_point_cloud,
                             write_point_cloud)
    if cfg["cloud_path"]:
        cloud = read_point_cloud(cfg["cloud_path"])
    else:
        truth = read_hmap(cfg["truth_path"]) if cfg["truth_path"] else np.full((cfg["rows"], cfg["cols"]), 100.0)
        cloud = sample_point_cloud(truth, cfg["density"], cfg["lidar_std"], cfg["dropout_frac"],
                                   np.random.default_rng(cfg["seed"]), width=cfg["width"], height=cfg["height"],
                                   band=cfg["band"])
        write_point_cloud(out / "cloud.txt", cloud)
    box = CropBox.around(cfg["width"], cfg["height"], cfg["band"])
    res = estimate_heightmap(cloud, box, cfg["rows"], cfg["cols"], statistic=cfg["statistic"],
                             filtered=cfg["filtered"])
    write_hmap(out / "heightmap.hmap", res.heightmap)
    write_hmap(out / "raw.hmap", res.raw)
    (out / "report.txt").write_text(format_report(res))
    log.info("heightmap from %d plot points written to %s", res.n_plot, out)


def cmd_eval(cfg, out: Path, args):
    from .evaluation import EvalConfig, NetPredictor, run_comparison
    from .planner import PlannerWeights
    if cfg["dataset_dir"]:
        maps = _load_dataset(cfg)
    else:
        maps = _synthesize(cfg).maps
    net = _load_model(cfg) if cfg["model_path"] else _train(cfg, maps, out)
    ecfg = EvalConfig(stride=cfg["stride"], alpha=cfg["alpha"], horizon=cfg["eval_horizon"],
                      repredict=cfg["repredict"], meas_std=cfg["meas_std"],
                      weights=PlannerWeights(cfg["w1"], cfg["w2"], cfg["w3"]),
                      test_start=cfg["test_start"], fold=cfg["fold"])
    res = run_comparison(maps, NetPredictor(net, cfg["K"], cfg["p"]), cfg["n_trials"], ecfg, cfg["seed"], out,
                         progress=lambda i: log.info("trial %d done", i))
    for method, s in res.summary().items():
        log.info("%-12s mean f %12.4f   mean error %8.4f mm", method, s["mean_f"], s["mean_error_mm"])


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "plan": cmd_plan,
            "perceive": cmd_perceive, "eval": cmd_eval}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="pasturemon", parents=[common],
                                     description="Pasture monitoring pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("overrides", nargs="*", metavar="key=value")
        if name == "plan":
            sp.add_argument("--certify", action="store_true",
                            help="also run exhaustive search and curvature (|V| <= 20)")
    return parser


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve(getattr(args, "config", None), _overrides(args.overrides), seed=getattr(args, "seed", None))
        out = Path(getattr(args, "out", "out"))
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out / "run_config.txt")
        HANDLERS[args.command](cfg, out, args)
    except Exception as exc:  # every failure becomes one diagnostic line and a nonzero exit
        if getattr(args, "verbose", False):
            log.exception("%s failed", args.command)
        print(f"pasturemon {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
