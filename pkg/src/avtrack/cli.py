"""``avtrack`` command line.

Every subcommand resolves its configuration as defaults, then an optional
JSON file (``--config``), then explicit flags; unknown file keys are usage
errors.  The resolved configuration goes to stderr and into the header of
every file the command writes.

Exit codes: 0 success, 2 usage or missing input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from avtrack import numeric as nm
from avtrack import tensorio

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _opt_float(s):
    return None if s in (None, "none", "None", "") else float(s)


def _betas(s):
    if isinstance(s, (list, tuple)):
        parts = s
    else:
        parts = [p for p in str(s).split(",") if p.strip()]
    out = []
    for p in parts:
        v = float(p)  # accepts "inf"
        if not v >= 0:
            raise ValueError(f"beta must be nonnegative, got {p}")
        out.append(v)
    if not out:
        raise ValueError("need at least one beta")
    return out


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes"):
        return True
    if str(s).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# (key, type, default, help); a default of None means optional or required per command
WORLD = [
    ("world_seed", int, 0, "seed of the synthetic latent-to-feature maps"),
    ("latent_dim", int, 32, "synthetic latent dimension"),
    ("noise_sigma", float, 0.0, "Gaussian noise added to visual features"),
]
DATASET = [
    ("data", str, None, "multi-track dataset directory (built on the fly when absent)"),
    ("n", int, 8, "tracks per sample when building on the fly"),
    ("count", int, 200, "samples when building on the fly"),
    ("mode", str, "independent", "distractor mode: independent or time-shifted"),
    ("t_min", int, None, "shortest base pair (steps)"),
    ("t_max", int, None, "longest base pair (steps)"),
]
COMMANDS = {
    "gen-data": [("n", int, None, "tracks per sample"), ("count", int, 200, "number of samples"),
                 ("mode", str, "independent", "distractor mode: independent or time-shifted"),
                 ("seed", int, 0, "dataset seed"), ("t_min", int, None, "shortest base pair (steps)"),
                 ("t_max", int, None, "longest base pair (steps)"),
                 ("out", str, "data", "output directory")] + WORLD,
    "train": [("steps", int, 2000, "total optimiser steps"), ("batch", int, 8, "minibatch size B"),
              ("seed", int, 0, "training seed"), ("train_len", int, 20, "synthetic sequence length T"),
              ("peak_lr", float, None, "peak learning rate (default: desk-scale value)"),
              ("schedule_divisor", float, 100.0, "divide the schedule step boundaries by this"),
              ("grad_clip", _opt_float, None, "global gradient norm clip (off by default)"),
              ("weight_decay", float, 0.0, "L2 weight decay (off by default)"),
              ("checkpoint_every", int, 100, "steps between checkpoints"),
              ("eval_batches", int, 8, "batches for the final diagonal accuracy"),
              ("data", str, None, "train on the base pairs of this dataset instead of synthetic pairs"),
              ("resume", _bool, False, "continue from the checkpoint in --out"),
              ("out", str, "run", "output directory")] + WORLD,
    "eval": [("checkpoint", str, None, "checkpoint directory"), ("beta", float, 1.0, "inverse temperature"),
             ("seed", int, 0, "dataset seed when building on the fly"),
             ("out", str, "eval.csv", "report CSV")] + DATASET + WORLD,
    "sweep": [("checkpoint", str, None, "checkpoint directory"),
              ("betas", _betas, "0,0.5,1,2,inf", "comma-separated inverse temperatures"),
              ("seed", int, 0, "dataset seed when building on the fly"),
              ("out", str, "sweep.csv", "curve CSV")] + DATASET + WORLD,
    "export": [("checkpoint", str, None, "checkpoint directory"), ("beta", float, 1.0, "inverse temperature"),
               ("sample", int, 0, "sample index"), ("seed", int, 0, "dataset seed when building on the fly"),
               ("out", str, "attention", "output path prefix (.csv and .pgm are added)")] + DATASET + WORLD,
    "gradcheck": [("seed", int, 0, "seed"), ("b", int, 3, "batch size B"), ("t", int, 4, "time steps T"),
                  ("instances", int, 20, "random instances"), ("h", float, 1e-5, "finite-difference step")],
    "features": [("wav", str, None, "16 kHz mono 16-bit WAV file"),
                 ("out", str, "features", "output tensor path (no extension)")],
}
HELP = {
    "gen-data": "build a multi-track evaluation dataset",
    "train": "train the attention stack with the cross-entropy objective",
    "eval": "frame and utterance selection accuracy of a checkpoint",
    "sweep": "selection accuracy and entropy across inverse temperatures",
    "export": "write the attention map of one sample as CSV and PGM",
    "gradcheck": "compare analytic and finite-difference gradients",
    "features": "acoustic features of a WAV file",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="avtrack", description="Audio-visual track selection by attention.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON file with keys for this command; flags win")
        for key, typ, default, text in keys:
            shown = default if not isinstance(default, list) else ",".join(map(str, default))
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=argparse.SUPPRESS,
                           help=text if "default" in text else f"{text} (default: {shown})")
    return parser


def resolve_config(command: str, args: dict) -> dict:
    keys = {k: (t, d) for k, t, d, _ in COMMANDS[command]}
    cfg = {k: d for k, (t, d) in keys.items()}
    if args.get("config"):
        path = Path(args["config"])
        if not path.exists():
            raise FileNotFoundError(f"missing config file: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(keys))
        if unknown:
            raise UsageError(f"{path}: unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in loaded.items():
            typ = keys[k][0]
            try:
                cfg[k] = None if v is None else typ(v)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{path}: bad value for {k}: {exc}") from exc
    for k in keys:
        if k in args:
            cfg[k] = args[k]
    if "betas" in cfg and isinstance(cfg["betas"], str):
        cfg["betas"] = _betas(cfg["betas"])
    return cfg


def _jsonable(cfg: dict) -> dict:
    out = {}
    for k, v in cfg.items():
        if isinstance(v, float) and math.isinf(v):
            v = "inf"
        elif isinstance(v, list):
            v = ["inf" if isinstance(x, float) and math.isinf(x) else x for x in v]
        out[k] = v
    return out


def _header(command: str, cfg: dict) -> dict:
    return {"command": command, "config": _jsonable(cfg)}


def _require(cfg, key):
    if cfg.get(key) is None:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _existing(path_str, what="path") -> Path:
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _spec(cfg):
    from avtrack.frontend import SyntheticTrackSpec
    if cfg["latent_dim"] < 1:
        raise UsageError("--latent-dim must be >= 1")
    if cfg["noise_sigma"] < 0:
        raise UsageError("--noise-sigma must be >= 0")
    return SyntheticTrackSpec(latent_dim=cfg["latent_dim"], noise_sigma=cfg["noise_sigma"],
                              seed=cfg["world_seed"])


def _length_range(cfg):
    from avtrack.harness import min_shifted_length
    shifted = cfg["mode"] == "time-shifted"
    t_min = cfg.get("t_min") or (min_shifted_length(cfg["n"]) if shifted else 24)
    t_max = cfg.get("t_max") or max(t_min, t_min + 32 if shifted else 40)
    if not 1 <= t_min <= t_max:
        raise UsageError(f"need 1 <= --t-min <= --t-max, got {t_min}, {t_max}")
    return t_min, t_max


def _build_dataset(cfg):
    from avtrack import harness
    n, count = cfg["n"], cfg["count"]
    if n is None or n < 1:
        raise UsageError(f"--n must be a positive integer, got {n}")
    if count < 1:
        raise UsageError(f"--count must be a positive integer, got {count}")
    if cfg["mode"] not in harness.MODES:
        raise UsageError(f"--mode must be one of {', '.join(harness.MODES)}, got {cfg['mode']!r}")
    if cfg["mode"] == "independent" and count < n:
        raise UsageError(f"--count {count} is smaller than --n {n}")
    t_min, t_max = _length_range(cfg)
    if cfg["mode"] == "time-shifted" and t_min < harness.min_shifted_length(n):
        raise UsageError(f"time-shifted mode at --n {n} needs --t-min >= {harness.min_shifted_length(n)}")
    base = harness.make_base_pairs(_spec(cfg), count, cfg["seed"], t_min, t_max)
    ds = harness.build_multitrack(base, n, nm.make_rng(cfg["seed"], "multitrack", n), cfg["mode"], cfg["seed"])
    ds.meta = {"world_seed": cfg["world_seed"], "latent_dim": cfg["latent_dim"],
               "noise_sigma": cfg["noise_sigma"], "t_min": t_min, "t_max": t_max}
    return ds


def _dataset(cfg):
    from avtrack import harness
    if cfg.get("data"):
        return harness.MultiTrackDataset.load(_existing(cfg["data"], "dataset directory"))
    return _build_dataset(cfg)


def _load_model(cfg):
    from avtrack.training import load_checkpoint
    path = _existing(_require(cfg, "checkpoint"), "checkpoint directory")
    _existing(path / "manifest.json", "checkpoint manifest")
    model, _, step, _ = load_checkpoint(path)
    return model, step


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, out):
    ds = _build_dataset(cfg)
    checksum = ds.save(cfg["out"], _header("gen-data", cfg))
    print(f"N={ds.N} count={len(ds)} mode={ds.mode} checksum={checksum}", file=out)
    return EXIT_OK


def cmd_train(cfg, out):
    from avtrack import training as tr
    from avtrack.attention import AttentionModel

    if cfg["batch"] < 2:
        raise UsageError(f"--batch must be >= 2, got {cfg['batch']}")
    if cfg["steps"] < 0:
        raise UsageError(f"--steps must be >= 0, got {cfg['steps']}")
    if cfg["checkpoint_every"] < 1:
        raise UsageError("--checkpoint-every must be >= 1")
    if cfg["train_len"] < 1:
        raise UsageError("--train-len must be >= 1")
    peak = cfg["peak_lr"] if cfg["peak_lr"] is not None else tr.DESK_PEAK_LR
    if not peak > 0 or cfg["schedule_divisor"] <= 0:
        raise UsageError("--peak-lr and --schedule-divisor must be positive")
    try:
        schedule = tr.LrSchedule.scaled(cfg["schedule_divisor"], peak)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    config = tr.TrainConfig(batch=cfg["batch"], steps=cfg["steps"], seed=cfg["seed"], schedule=schedule,
                            eval_batches=cfg["eval_batches"], weight_decay=cfg["weight_decay"],
                            grad_clip=cfg["grad_clip"])
    if cfg["data"]:
        from avtrack.harness import MultiTrackDataset
        ds = MultiTrackDataset.load(_existing(cfg["data"], "dataset directory"))
        source = tr.ArrayPairs(ds.base.acoustic, ds.base.visual)
    else:
        source = tr.SyntheticPairs(_spec(cfg), cfg["train_len"])

    run = Path(cfg["out"])
    ckpt, log_path = run / "checkpoint", run / "train_log.csv"
    header = _header("train", cfg)
    if cfg["resume"]:
        _existing(ckpt / "manifest.json", "checkpoint manifest")
        model, adam, start, _ = tr.load_checkpoint(ckpt)
        if start > config.steps:
            raise UsageError(f"checkpoint is at step {start}, beyond --steps {config.steps}")
    else:
        model = AttentionModel(seed=nm.derive_seed(cfg["seed"], "model-init"))
        adam = nm.AdamState(beta1=config.beta1, beta2=config.beta2)
        start = 0
        run.mkdir(parents=True, exist_ok=True)
        tr.save_checkpoint(ckpt, model, adam, 0, header)
        tr.write_log(log_path, tr.TrainReport(), header)

    written = [0]

    def on_step(step, model_, adam_, report):
        if step % cfg["checkpoint_every"] == 0 or step == config.steps:
            tr.save_checkpoint(ckpt, model_, adam_, step, header)
            _flush_log(report)

    def _flush_log(report):
        part = tr.TrainReport(*(getattr(report, f)[written[0]:] for f in
                                ("steps", "lrs", "losses", "accuracies", "entropies")))
        tr.write_log(log_path, part, header, append=True)
        written[0] = len(report.steps)

    try:
        model, adam, report = tr.train_attention(config, source, model=model, adam=adam,
                                                 start_step=start, on_step=on_step)
    except tr.TrainingAborted as exc:
        _flush_log(exc.report)
        print(f"avtrack train: {exc}; last good checkpoint kept in {ckpt}", file=sys.stderr)
        return EXIT_NUMERIC
    _flush_log(report)
    tail = report.losses[-100:]
    final_loss = math.fsum(tail) / len(tail) if tail else float("nan")
    summary = {"step": config.steps, "final_loss": final_loss, "accuracy": report.final_accuracy,
               "checksum": report.checksum, **header}
    (run / "summary.json").write_text(tensorio.dumps_json(_jsonable(summary)))
    print(f"step={config.steps} loss={final_loss!r} accuracy={report.final_accuracy!r} "
          f"checksum={report.checksum}", file=out)
    print(f"avtrack train: {len(report.steps)} steps in {report.wall_time:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_eval(cfg, out):
    from avtrack import harness
    model, _ = _load_model(cfg)
    ds = _dataset(cfg)
    if cfg["beta"] < 0:
        raise UsageError("--beta must be nonnegative")
    report = harness.evaluate_selection(model, ds, cfg["beta"])
    harness.write_report_csv(cfg["out"], report, ds.truth, _header("eval", cfg))
    print(json.dumps(report.summary(), sort_keys=True), file=out)
    return EXIT_OK


def cmd_sweep(cfg, out):
    from avtrack import harness
    model, _ = _load_model(cfg)
    ds = _dataset(cfg)
    curve = harness.sweep_beta(model, ds, cfg["betas"])
    harness.write_curve_csv(cfg["out"], curve, _header("sweep", cfg))
    for _, rep in curve:
        print(json.dumps(rep.summary(), sort_keys=True), file=out)
    return EXIT_OK


def cmd_export(cfg, out):
    from avtrack import harness
    model, _ = _load_model(cfg)
    ds = _dataset(cfg)
    if not 0 <= cfg["sample"] < len(ds):
        raise UsageError(f"--sample must be in [0, {len(ds)}), got {cfg['sample']}")
    if cfg["beta"] < 0:
        raise UsageError("--beta must be nonnegative")
    prefix = Path(cfg["out"])
    harness.export_attention(model, ds[cfg["sample"]], prefix, cfg["beta"], _header("export", cfg))
    print(f"wrote {prefix.with_suffix('.csv')} {prefix.with_suffix('.pgm')}", file=out)
    return EXIT_OK


def cmd_gradcheck(cfg, out):
    from avtrack import gradcheck
    if cfg["b"] < 2 or cfg["t"] < 1 or cfg["instances"] < 1 or not cfg["h"] > 0:
        raise UsageError("need --b >= 2, --t >= 1, --instances >= 1 and --h > 0")
    results = gradcheck.run_gradcheck(cfg["seed"], cfg["instances"], cfg["b"], cfg["t"], cfg["h"])
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = worst.max_rel_err < gradcheck.TOLERANCE
    print(f"max_rel_err={worst.max_rel_err:.3e} {'<' if ok else '>='} {gradcheck.TOLERANCE:g} "
          f"(instances={len(results)}, worst tensor {worst.worst}, "
          f"componentwise {max(r.elementwise for r in results):.3e})", file=out)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_features(cfg, out):
    from avtrack import features
    path = _existing(_require(cfg, "wav"), "WAV file")
    try:
        wave_ = features.read_wav(path)
        feats = features.acoustic_features(wave_)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    tensorio.save_tensor(cfg["out"], feats, meta=_header("features", cfg))
    print(f"steps={feats.shape[0]} dim={feats.shape[1]}", file=out)
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "export": cmd_export, "gradcheck": cmd_gradcheck, "features": cmd_features}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args = vars(ns)
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        print(f"avtrack {command}: config {json.dumps(_jsonable(cfg), sort_keys=True)}", file=sys.stderr)
        return HANDLERS[command](cfg, out)
    except UsageError as exc:
        print(f"avtrack {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"avtrack {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (nm.NumericalError, FloatingPointError) as exc:
        print(f"avtrack {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
