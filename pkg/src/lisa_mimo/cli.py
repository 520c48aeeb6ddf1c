"""``lisa-mimo`` command line: train, sweep, eval, info."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, model_metadata, save_checkpoint
from .classic import mld_detect, mmse_detect, sphere_detect, zf_detect, zfdf_detect
from .harness import (
    DETECTORS,
    ConfigError,
    ExperimentConfig,
    encode_complex,
    export_csv,
    load_config,
    run_ber_sweep,
    write_loss_trace,
)
from .linalg import complex_to_real_matrix, complex_to_real_vector, ql_decompose, residual_metric, rotate_observation
from .lisa import TrainingDiverged, detect_indices, lisa_parameter_count, train
from .modem import make_constellation, real_symbols_to_bits

log = logging.getLogger("lisa_mimo")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint or args.out or "model.lisa")
    trace = Path(args.out) if args.out and args.checkpoint else ckpt.with_suffix(ckpt.suffix + ".loss.csv")
    tcfg = cfg.train_config()
    try:
        result = train(tcfg, progress_every=100)
    except TrainingDiverged as exc:
        save_checkpoint(exc.last_good, ckpt)
        write_loss_trace(exc.losses, trace)
        raise
    if tcfg.channel.fixed_channel is not None:
        result.model.meta["fixed_channel"] = encode_complex(tcfg.channel.fixed_channel)
    result.model.meta["snr_range_db"] = list(cfg.snr_range_db)
    save_checkpoint(result.model, ckpt)
    write_loss_trace(result.losses, trace)
    print(f"wrote {ckpt} ({result.model.n_params} parameters) and {trace}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    curves = run_ber_sweep(cfg, model, threads=args.threads)
    out = Path(args.out or "ber.csv")
    export_csv(curves, out)
    print(f"wrote {out}")
    return 0


def _load_sample(path) -> dict:
    raw = json.loads(Path(path).read_text())
    if "H" in raw:
        H = np.asarray(raw["H"], dtype=np.float64)
        y = np.asarray(raw["y"], dtype=np.float64)
    elif "H_re" in raw:
        Hc = np.asarray(raw["H_re"], float) + 1j * np.asarray(raw["H_im"], float)
        yc = np.asarray(raw["y_re"], float) + 1j * np.asarray(raw["y_im"], float)
        H, y = complex_to_real_matrix(Hc), complex_to_real_vector(yc)
    else:
        raise ConfigError("sample file needs either H/y (real model) or H_re/H_im/y_re/y_im")
    if H.ndim != 2 or y.shape != (H.shape[0],) or H.shape[0] % 2 or H.shape[1] % 2:
        raise ConfigError(f"sample shapes are inconsistent: H {H.shape}, y {y.shape}")
    return {"H": H, "y": y, "constellation": raw.get("constellation", "QPSK"),
            "noise_var": float(raw.get("noise_var", 0.0)),
            "detectors": raw.get("detectors")}


def cmd_eval(args) -> int:
    sample = _load_sample(args.sample)
    c = make_constellation(sample["constellation"])
    H, y = sample["H"], sample["y"]
    detectors = sample["detectors"] or (["zf", "mmse", "zfdf", "sd", "mld"] + (["lisa"] if args.checkpoint else []))
    unknown = [d for d in detectors if d not in DETECTORS]
    if unknown:
        raise ConfigError(f"unknown detector(s): {', '.join(unknown)}")
    ql = ql_decompose(H)
    y_tilde = rotate_observation(ql.Q, y)
    out = {}
    for name in detectors:
        if name == "zf":
            s = zf_detect(H, y, c)
        elif name == "mmse":
            s = mmse_detect(H, y, c, sample["noise_var"])
        elif name == "zfdf":
            s = zfdf_detect(ql, y_tilde, c)
        elif name == "sd":
            s = sphere_detect(ql, y_tilde, c)
        elif name == "mld":
            s = mld_detect(H, y, c)
        else:
            if not args.checkpoint:
                raise ConfigError("detector 'lisa' needs --checkpoint")
            model = load_checkpoint(args.checkpoint)
            idx = detect_indices(model, H[None], y[None], ql.Q[None], ql.L[None])[0]
            s = model.const.alphabet[idx]
        out[name] = {"symbols": [float(v) for v in s],
                     "bits": [int(b) for b in real_symbols_to_bits(c, s)],
                     "residual": residual_metric(y, H, s)}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_info(args) -> int:
    model = load_checkpoint(args.checkpoint)
    meta = model_metadata(model)
    meta.pop("fixed_channel", None)
    for key in sorted(meta):
        print(f"{key}: {meta[key]}")
    if model.variant == "varying":
        print(f"parameter_count: {lisa_parameter_count(model.n_t, model.d_h, model.M)}")
    else:
        print(f"parameter_count: {model.n_params}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lisa-mimo", description="LISA MIMO detection lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--checkpoint", help="model checkpoint path")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="parallel sweep points")

    common(sub.add_parser("train", help="train a model; writes checkpoint and loss trace"))
    common(sub.add_parser("sweep", help="BER sweep; writes CSV"))
    p = sub.add_parser("eval", help="detect one sample from a JSON file")
    p.add_argument("sample")
    common(p, config=False)
    p = sub.add_parser("info", help="print checkpoint metadata")
    p.add_argument("checkpoint_path", nargs="?")
    common(p, config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    if args.command == "info":
        args.checkpoint = args.checkpoint_path or args.checkpoint
        if not args.checkpoint:
            parser.error("info needs a checkpoint path")
    handlers = {"train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval, "info": cmd_info}
    try:
        return handlers[args.command](args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
