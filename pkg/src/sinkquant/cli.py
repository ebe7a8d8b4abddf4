"""Command-line front end.

Subcommands: ``detect``, ``quantize``, ``analyze`` (error | bias | disruption
| qk | stages), ``simulate``, ``bench``. Reports go to stdout as JSON;
failures write one machine-readable JSON object ``{code, message, context}``
to stderr. Exit statuses: 0 success, 2 usage/configuration, 3 file format,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, bench, cache, decoder, dumpio, profiles
from .errors import ConfigError, SinkQuantError, UsageError, exit_status
from .quant import SCHEME_PRESETS, CalibrationSet, QuantSpec, quantize_scheme
from .sinks import SinkProfile, SinkSet, classify_stages, detect_sinks, preserve_first_n


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse failures become usage errors
        raise UsageError(message)


def _read_matrix(path: str, name: str) -> np.ndarray:
    arr = np.asarray(dumpio.read_dump(path), dtype=np.float64)
    if arr.ndim != 2:
        raise UsageError(f"{name} must be a 2-D dump, got rank {arr.ndim}", path=path)
    return arr


def _load_sinks(args, tokens: int) -> SinkSet:
    if getattr(args, "sinks", None) and getattr(args, "pfn", None) is not None:
        raise UsageError("--sinks and --pfn are mutually exclusive")
    if getattr(args, "sinks", None):
        return SinkSet.from_json_dict(dumpio.read_json(args.sinks))
    if getattr(args, "pfn", None) is not None:
        return preserve_first_n(tokens, args.pfn)
    return SinkSet.empty(0)


def _load_profile_arg(name: str) -> SinkProfile:
    return profiles.load_profile(name)


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError as exc:
        raise UsageError(f"{flag} expects a comma-separated integer list, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [part for part in text.split(",") if part != ""]


def _calibration_from_dir(path: str, sub: str) -> CalibrationSet:
    directory = os.path.join(path, sub)
    if not os.path.isdir(directory):
        raise UsageError(f"calibration directory must contain a {sub!r} subdirectory", path=path)
    files = sorted(f for f in os.listdir(directory) if f.endswith(".kvsd"))
    if not files:
        raise UsageError(f"no .kvsd files in {directory}")
    return CalibrationSet([dumpio.read_dump(os.path.join(directory, f)) for f in files])


def _cmd_detect(args) -> dict:
    arr = _read_matrix(args.dump, "hidden-state dump")
    profile = _load_profile_arg(args.profile)
    found = detect_sinks(arr, profile, args.k, args.ratio)
    return {"sinks": found.to_json_dict(), "count": len(found), "model": profile.model_name}


def _cmd_quantize(args) -> dict:
    keys = _read_matrix(args.keys, "keys")
    values = _read_matrix(args.values, "values")
    sinks = _load_sinks(args, keys.shape[0])
    key_cal = value_cal = None
    if args.calib:
        key_cal = _calibration_from_dir(args.calib, "keys")
        value_cal = _calibration_from_dir(args.calib, "values")
    qk, qv = quantize_scheme(
        keys,
        values,
        args.scheme,
        sinks,
        bits=args.bits,
        group_size=args.group,
        sparse_fraction=args.sparse,
        key_calibration=key_cal,
        value_calibration=value_cal,
    )
    os.makedirs(args.out, exist_ok=True)
    dumpio.write_quantized(os.path.join(args.out, "keys.kvsq"), qk)
    dumpio.write_quantized(os.path.join(args.out, "values.kvsq"), qv)
    dumpio.write_json(os.path.join(args.out, "sinks.json"), sinks.to_json_dict())
    sink_rows = len(sinks)
    footprint = {
        "quantized_bytes": len(qk.packed) + len(qv.packed),
        "sink_bytes": sink_rows * (keys.shape[1] + values.shape[1]) * cache.SINK_BYTES_PER_ELEMENT,
        "params_bytes": (qk.params.n_groups + qv.params.n_groups) * cache.PARAM_BYTES_PER_GROUP,
        "sparse_bytes": (qk.outlier_indices.size + qv.outlier_indices.size)
        * cache.SPARSE_BYTES_PER_OUTLIER,
    }
    return {
        "scheme": args.scheme,
        "bits": args.bits,
        "group_size": args.group,
        "tokens": int(keys.shape[0]),
        "sinks": sinks.to_json_dict(),
        "files": ["keys.kvsq", "values.kvsq", "sinks.json"],
        "footprint": footprint,
        "footprint_mb": cache.footprint_megabytes(footprint),
    }


def _specs_from_flags(args) -> list[QuantSpec]:
    bits = _int_list(args.bits, "--bits")
    axes = _str_list(args.axes) if hasattr(args, "axes") else [args.axis]
    modes = _str_list(args.modes) if hasattr(args, "modes") else [args.mode]
    return [
        QuantSpec(b, axis, mode, args.group, args.clip, args.sparse or 0.0)
        for b in bits
        for axis in axes
        for mode in modes
    ]


def _cmd_analyze_error(args) -> dict:
    arr = _read_matrix(args.tensor, "input tensor")
    sinks = _load_sinks(args, arr.shape[0])
    specs = _specs_from_flags(args)
    cal = None
    if any(s.mode == "static" for s in specs):
        cal = CalibrationSet([arr], sinks=[sinks])
    report = analysis.error_decomposition(arr, sinks, specs, cal=cal)
    result = report.to_json_dict(display_scale=args.display_scale)
    if args.csv:
        analysis.write_rows_csv(result["rows"], args.csv)
        result["csv"] = args.csv
    return result


def _cmd_analyze_bias(args) -> dict:
    a = np.asarray(dumpio.read_dump(args.attention), dtype=np.float64)
    v = np.asarray(dumpio.read_dump(args.values), dtype=np.float64)
    if a.ndim == 2:
        a = a[None, :, :]
    if v.ndim == 2:
        v = v[None, :, :]
    sinks = _load_sinks(args, a.shape[1])
    rows = analysis.bias_report_from_heads(a, v, sinks, layer=args.layer, method=args.method)
    if args.csv:
        analysis.write_rows_csv(rows, args.csv)
    return {"sinks": sinks.to_json_dict(), "method": args.method, "rows": rows}


def _cmd_analyze_disruption(args) -> dict:
    keys = _read_matrix(args.keys, "keys")
    values = _read_matrix(args.values, "values")
    queries = _read_matrix(args.queries, "queries")
    sinks = _load_sinks(args, keys.shape[0])
    specs = [
        QuantSpec(b, args.axis, args.mode, args.group, args.clip, args.sparse or 0.0)
        for b in _int_list(args.bits, "--bits")
    ]
    rows = analysis.bias_disruption(
        keys, values, queries, sinks, specs, num_heads=args.heads, preserve_sinks=args.preserve_sinks
    )
    if args.csv:
        analysis.write_rows_csv(rows, args.csv)
    return {"sinks": sinks.to_json_dict(), "rows": rows}


def _cmd_analyze_qk(args) -> dict:
    queries = np.asarray(dumpio.read_dump(args.queries), dtype=np.float64)
    keys = np.asarray(dumpio.read_dump(args.keys), dtype=np.float64)
    values = np.asarray(dumpio.read_dump(args.values), dtype=np.float64) if args.values else None
    tokens = queries.shape[0] if queries.ndim == 2 else queries.shape[1]
    sinks = _load_sinks(args, tokens)
    rows = analysis.qk_sink_diagnostics(queries, keys, sinks, V=values)
    if args.csv:
        analysis.write_rows_csv(rows, args.csv)
    return {"sinks": sinks.to_json_dict(), "rows": rows}


def _cmd_analyze_stages(args) -> dict:
    entries = dumpio.load_manifest(args.manifest)
    profile = _load_profile_arg(args.profile)
    per_layer: dict[int, dict] = {}
    for entry in entries:
        if entry.kind in ("X_d_in", "X_d_out", "H_prime", "H"):
            per_layer.setdefault(entry.layer, {})[entry.kind] = dumpio.read_dump(
                dumpio.manifest_file_path(entry, args.manifest)
            )
    if not per_layer:
        raise ConfigError("manifest holds no stage-classification dumps", manifest=args.manifest)
    layers = [per_layer[l] for l in sorted(per_layer)]
    report = classify_stages(layers, profile, ratio=args.ratio)
    return report.to_json_dict()


def _cmd_simulate(args) -> dict:
    cfg = decoder.DecoderConfig.from_json_dict(dumpio.read_json(args.config))
    hooks = ()
    plant_channels: list[int] = []
    plant_meta = None
    if args.plant:
        plant_meta = dumpio.read_json(args.plant)
        targets = [tuple(t) for t in plant_meta["targets"]]
        weights, hooks = decoder.synthesize_sink_model(
            cfg, targets, int(plant_meta["emerge_layer"]), int(plant_meta["dissipate_layer"])
        )
        plant_channels = sorted({int(c) for _, c, _ in targets})
    else:
        weights = decoder.init_weights(cfg)

    profile = None
    if args.profile:
        profile = _load_profile_arg(args.profile)
    elif plant_meta is not None:
        profile = SinkProfile(
            model_name="synthetic",
            total_layers=cfg.num_layers,
            emergence_layer=int(plant_meta["emerge_layer"]),
            hidden_size=cfg.hidden,
            outlier_channels=tuple(plant_channels),
        )
    if args.mode == "kvsink" and profile is None:
        raise ConfigError("kvsink mode needs --profile or --plant")

    rng = np.random.default_rng(args.seed)
    h0 = rng.normal(size=(args.tokens, cfg.hidden))
    h_fp, _ = decoder.decoder_forward(h0, weights, cfg, hooks=hooks)
    h_q, kv, sinks = decoder.prefill_with_kvsink(
        h0,
        weights,
        cfg,
        profile,
        scheme=args.scheme,
        bits=args.bits,
        group_size=args.group,
        sparse_fraction=args.sparse,
        k=args.k,
        mode=args.mode,
        pfn_n=args.pfn_n,
        magnitude_ratio=args.ratio,
        hooks=hooks,
    )
    os.makedirs(args.out, exist_ok=True)
    dumpio.write_dump(os.path.join(args.out, "h_last.kvsd"), h_q)
    dumpio.write_json(os.path.join(args.out, "sinks.json"), sinks.to_json_dict())
    cache.save_snapshot(kv, os.path.join(args.out, "snapshot"))
    footprint = kv.memory_footprint()
    return {
        "mode": args.mode,
        "scheme": args.scheme,
        "bits": args.bits,
        "tokens": args.tokens,
        "sinks": sinks.to_json_dict(),
        "h_l2_delta": float(np.linalg.norm(h_q - h_fp)),
        "h_max_delta": float(np.abs(h_q - h_fp).max()),
        "footprint": footprint,
        "footprint_mb": cache.footprint_megabytes(footprint),
        "out": args.out,
    }


def _cmd_bench(args) -> dict:
    cfg = None
    if args.config:
        cfg = decoder.DecoderConfig.from_json_dict(dumpio.read_json(args.config))
    report = bench.run_bench(
        cfg,
        tokens=args.tokens,
        repeats=args.repeat,
        scheme=args.scheme,
        bits=args.bits,
        group_size=args.group,
        k=args.k,
        seed=args.seed,
    )
    return report.to_json_dict()


def build_parser() -> _Parser:
    parser = _Parser(prog="sinkquant", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="predict sink tokens from a hidden-state dump")
    p.add_argument("--dump", required=True, help="emergence-layer output (.kvsd, [tokens, hidden])")
    p.add_argument("--profile", required=True, help="model profile name or JSON path")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--ratio", type=float, default=None, help="optional magnitude-ratio filter")
    p.set_defaults(handler=_cmd_detect)

    p = sub.add_parser("quantize", help="quantize a K/V pair under a scheme preset")
    p.add_argument("--keys", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--scheme", required=True, choices=sorted(SCHEME_PRESETS))
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--sinks", help="sink-set JSON file")
    p.add_argument("--pfn", type=int, default=None, help="preserve the first N tokens instead")
    p.add_argument("--sparse", type=float, default=None)
    p.add_argument("--calib", help="directory with keys/ and values/ calibration dumps")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_quantize)

    pa = sub.add_parser("analyze", help="measurement reports")
    asub = pa.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("error", help="quantization-error decomposition by sink membership")
    p.add_argument("--tensor", required=True)
    p.add_argument("--sinks")
    p.add_argument("--pfn", type=int, default=None)
    p.add_argument("--bits", default="4")
    p.add_argument("--axes", default="per_token")
    p.add_argument("--modes", default="dynamic")
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--sparse", type=float, default=None)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--display-scale", type=float, default=None)
    p.add_argument("--csv")
    p.set_defaults(handler=_cmd_analyze_error)

    p = asub.add_parser("bias", help="sink-bias consistency per head")
    p.add_argument("--attention", required=True, help="[heads, n, n] attention dump")
    p.add_argument("--values", required=True, help="[kv_heads, n, head_dim] value dump")
    p.add_argument("--sinks")
    p.add_argument("--pfn", type=int, default=None)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--method", choices=("pairwise", "centroid"), default="pairwise")
    p.add_argument("--csv")
    p.set_defaults(handler=_cmd_analyze_bias)

    p = asub.add_parser("disruption", help="bias/logit deltas under quantization")
    p.add_argument("--keys", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--sinks")
    p.add_argument("--pfn", type=int, default=None)
    p.add_argument("--bits", default="2,3,4,8")
    p.add_argument("--axis", choices=("per_token", "per_channel", "per_tensor"), default="per_token")
    p.add_argument("--mode", choices=("dynamic", "static"), default="dynamic")
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--sparse", type=float, default=None)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--preserve-sinks", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(handler=_cmd_analyze_disruption)

    p = asub.add_parser("qk", help="query-to-sink-key cosines and norm ratios")
    p.add_argument("--queries", required=True)
    p.add_argument("--keys", required=True)
    p.add_argument("--values")
    p.add_argument("--sinks")
    p.add_argument("--pfn", type=int, default=None)
    p.add_argument("--csv")
    p.set_defaults(handler=_cmd_analyze_qk)

    p = asub.add_parser("stages", help="cross-layer outlier stage classification")
    p.add_argument("--manifest", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--ratio", type=float, default=100.0)
    p.set_defaults(handler=_cmd_analyze_stages)

    p = sub.add_parser("simulate", help="prefill the toy decoder with a quantized cache")
    p.add_argument("--config", required=True, help="decoder config JSON")
    p.add_argument("--plant", help="planted-outlier JSON: targets, emerge_layer, dissipate_layer")
    p.add_argument("--profile", help="sink profile name or path (defaults to the plant)")
    p.add_argument("--mode", choices=decoder.PREFILL_MODES, default="kvsink")
    p.add_argument("--scheme", choices=sorted(SCHEME_PRESETS), default="pt_kv_static")
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--sparse", type=float, default=None)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--pfn-n", type=int, default=None)
    p.add_argument("--ratio", type=float, default=100.0)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("bench", help="prefill vs detection timing and footprint")
    p.add_argument("--config", help="decoder config JSON (defaults to the reference fixture)")
    p.add_argument("--tokens", type=int, default=4096)
    p.add_argument("--repeat", type=int, default=11)
    p.add_argument("--scheme", choices=sorted(SCHEME_PRESETS), default="pt_kv_dynamic")
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_bench)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = args.handler(args)
        json.dump(result, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return 0
    except SinkQuantError as exc:
        json.dump(exc.to_json_dict(), sys.stderr, sort_keys=True, default=str)
        sys.stderr.write("\n")
        return exit_status(exc)


if __name__ == "__main__":
    sys.exit(main())
