"""Command-line front end.

Subcommands: synth, calibrate, analyze, quantize, ablate, eval, grid.
Exit codes: 0 success, 1 data error, 2 usage error. All randomness is seeded
via --seed, so identical invocations produce byte-identical artifacts; every
JSON artifact validates against a schema in ssm_ptq/schemas/.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import SsmPtqError
from .harness import (
    QuantConfig,
    evaluate_fidelity,
    generate_tokens,
    load_eval_model,
    load_tokens,
    prepare,
    run_grid,
    save_quantized_model,
    split_corpus,
)
from .model import ModelConfig, TapPoint, load_model, save_model
from .stats import (
    BASIS_ACTIVATION,
    BASIS_CHANNEL_ABSMAX,
    calibrate_model,
    detect_outliers,
    report_from_dict,
    stats_from_dict,
    stats_to_dict,
    zero_outlier_hook,
)

_ABLATE_SCOPES = {
    "in": (TapPoint.IN_PROJ_OUT,),
    "x": (TapPoint.X_PROJ_OUT,),
    "dt": (TapPoint.DT_PROJ_OUT,),
    "out": (TapPoint.OUT_PROJ_OUT,),
    "all": (
        TapPoint.IN_PROJ_OUT,
        TapPoint.X_PROJ_OUT,
        TapPoint.DT_PROJ_OUT,
        TapPoint.OUT_PROJ_OUT,
    ),
}


def _schema(name: str) -> dict:
    text = resources.files("ssm_ptq.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _write_json(obj, path, schema_name: str) -> None:
    jsonschema.validate(instance=obj, schema=_schema(schema_name))
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _corpus(args, vocab_size: int):
    if args.tokens:
        ids = load_tokens(args.tokens)
    else:
        ids = generate_tokens(args.gen_len, vocab_size, args.seed)
    return split_corpus(ids, args.seq_len)


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tokens", help="token file (raw little-endian u32 ids); generated when omitted")
    p.add_argument("--seq-len", type=int, default=64, help="sequence window length (default 64)")
    p.add_argument("--gen-len", type=int, default=4096, help="generated-corpus length (default 4096)")
    p.add_argument("--seed", type=int, default=0, help="seed for the generated corpus (default 0)")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="SPTQ model archive")
    p.add_argument("--config", required=True, help="model config JSON")


def cmd_synth(args) -> int:
    dt_rank = args.dt_rank if args.dt_rank > 0 else max(1, args.d_model // 16)
    config = ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        d_state=args.d_state,
        d_conv=args.d_conv,
        dt_rank=dt_rank,
        vocab_size=args.vocab_size,
    )
    from .harness import make_outlier_model

    n_outliers = int(round(args.outlier_frac * config.d_inner))
    if args.outlier_frac > 0 and n_outliers == 0:
        n_outliers = 1
    channels: list[int] = []
    if n_outliers:
        rng = np.random.default_rng([args.seed, 1])
        channels = sorted(int(c) for c in rng.choice(config.d_inner, n_outliers, replace=False))
    model = make_outlier_model(config, channels, args.magnitude, args.seed)
    config_out = args.config_out or str(Path(args.out).with_suffix(".json"))
    save_model(model, args.out, config_out)
    print(f"wrote {args.out} and {config_out} (d_inner={config.d_inner}, outlier channels {channels})")
    return 0


def cmd_calibrate(args) -> int:
    model = load_model(args.model, args.config)
    corpus = _corpus(args, model.config.vocab_size)
    stats = calibrate_model(model, corpus.calibration)
    obj = {
        "seq_len": args.seq_len,
        "n_sequences": len(corpus.calibration),
        **stats_to_dict(stats),
    }
    _write_json(obj, args.out, "stats")
    print(f"calibrated {len(corpus.calibration)} sequences -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    stats = stats_from_dict(_read_json(args.stats))
    reports = [
        detect_outliers(st, args.sigma, args.basis)
        for _, st in sorted(stats.items(), key=lambda kv: kv[1].key)
    ]
    obj = {
        "sigma_mult": args.sigma,
        "basis": args.basis,
        "reports": [r.to_dict() for r in reports],
    }
    _write_json(obj, args.out, "outliers")
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    lines = ["tap,channel,absmax"]
    for r in reports:
        key = r.to_dict()["tap"]
        for c, v in enumerate(r.channel_absmax):
            lines.append(f"{key},{c},{float(v)!r}")
    Path(csv_path).write_text("\n".join(lines) + "\n")
    total = sum(len(r.outlier_channels) for r in reports)
    print(f"{total} outlier channel(s) across {len(reports)} taps -> {args.out}, {csv_path}")
    return 0


def cmd_quantize(args) -> int:
    model = load_model(args.model, args.config)
    qcfg = QuantConfig(
        wbits=args.wbits,
        abits=args.abits,
        scope=args.scope,
        smooth_alpha=args.alpha,
    )
    stats = None
    if qcfg.needs_stats:
        if not args.stats:
            raise SsmPtqError(
                f"config {qcfg.notation} needs --stats (activation quantization or smoothing)"
            )
        stats = stats_from_dict(_read_json(args.stats))
    p = prepare(qcfg, model, stats)
    save_quantized_model(p, args.out)
    n_q = len(p.quantized or {})
    print(f"quantized {n_q} tensors ({qcfg.notation}, scope={qcfg.scope}) -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    model = load_model(args.model, args.config)
    corpus = _corpus(args, model.config.vocab_size)
    payload = _read_json(args.outliers)
    reports = [report_from_dict(d) for d in payload["reports"]]
    hooks = zero_outlier_hook(reports, _ABLATE_SCOPES[args.scope])
    qcfg = QuantConfig(ablate_outliers=True, sigma_mult=float(payload.get("sigma_mult", 6.0)))
    rep = evaluate_fidelity(model, (model, hooks), corpus.evaluation, config=qcfg)
    zeroed = sum(len(r.outlier_channels) for r in reports if r.tap in _ABLATE_SCOPES[args.scope])
    print(f"zeroed {zeroed} outlier channel(s) at scope '{args.scope}'")
    print(f"top1_agreement {rep.top1_agreement:.4f} (baseline 1.0000)")
    print(f"logit_mse {rep.mse:.6e}  cosine {rep.cosine:.6f}  max_abs {rep.max_abs:.6e}")
    if args.out:
        _write_json(rep.to_dict(), args.out, "report")
    return 0


def cmd_eval(args) -> int:
    base_model, base_hooks, _ = load_eval_model(args.baseline, args.config)
    cand_model, cand_hooks, qcfg = load_eval_model(args.candidate, args.config)
    corpus = _corpus(args, base_model.config.vocab_size)
    rep = evaluate_fidelity(
        (base_model, base_hooks), (cand_model, cand_hooks), corpus.evaluation, config=qcfg
    )
    _write_json(rep.to_dict(), args.out, "report")
    print(
        f"{qcfg.notation} (scope={qcfg.scope}): mse {rep.mse:.6e}  cosine {rep.cosine:.6f}  "
        f"top1 {rep.top1_agreement:.4f} -> {args.out}"
    )
    return 0


def cmd_grid(args) -> int:
    model = load_model(args.model, args.config)
    corpus = _corpus(args, model.config.vocab_size)
    cells = _read_json(args.configs)
    if not isinstance(cells, list):
        raise SsmPtqError(f"{args.configs}: grid config must be a JSON array")
    configs = [QuantConfig.from_dict(d) for d in cells]
    reports = run_grid(model, corpus, configs)
    _write_json([r.to_dict() for r in reports], args.out, "report")
    for rep in reports:
        print(
            f"{rep.config.notation:>6} scope={rep.config.scope:<3} "
            f"alpha={rep.config.smooth_alpha!s:>5} ablate={rep.config.ablate_outliers!s:<5} "
            f"mse {rep.mse:.6e}  cosine {rep.cosine:.6f}  top1 {rep.top1_agreement:.4f}"
        )
    print(f"wrote {len(reports)} report(s) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssm-ptq",
        description="Post-training quantization toolkit for selective state-space models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic outlier-injected toy model")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-state", type=int, default=8)
    p.add_argument("--d-conv", type=int, default=4)
    p.add_argument("--dt-rank", type=int, default=0, help="0 = d_model/16")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.add_argument("--magnitude", type=float, default=50.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--config-out", help="default: --out with .json suffix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="record channel stats over a corpus")
    _add_model_flags(p)
    _add_corpus_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", help="detect outlier channels from stats")
    p.add_argument("--stats", required=True)
    p.add_argument("--sigma", type=float, default=6.0)
    p.add_argument("--basis", choices=[BASIS_CHANNEL_ABSMAX, BASIS_ACTIVATION],
                   default=BASIS_CHANNEL_ABSMAX)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="per-channel absmax CSV (default: --out with .csv suffix)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("quantize", help="write a quantized model archive")
    _add_model_flags(p)
    p.add_argument("--wbits", type=int, choices=[4, 8], required=True)
    p.add_argument("--abits", type=int, choices=[8])
    p.add_argument("--scope", choices=["mlp", "all"], default="mlp")
    p.add_argument("--alpha", type=float, nargs="?", const=0.5,
                   help="SmoothQuant migration strength (bare flag: 0.5)")
    p.add_argument("--stats", help="stats JSON (required with --abits/--alpha)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("ablate", help="zero detected outlier channels, report fidelity delta")
    _add_model_flags(p)
    _add_corpus_flags(p)
    p.add_argument("--outliers", required=True, help="analyze output JSON")
    p.add_argument("--scope", choices=sorted(_ABLATE_SCOPES), default="all")
    p.add_argument("--out", help="optional report JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="fidelity of a candidate archive vs a baseline archive")
    p.add_argument("--baseline", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--config", required=True)
    _add_corpus_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run a Table-1-shaped config sweep")
    _add_model_flags(p)
    _add_corpus_flags(p)
    p.add_argument("--configs", required=True, help="JSON array of config cells")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SsmPtqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
