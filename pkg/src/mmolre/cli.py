"""Command-line entry point: ``mmolre {train,analyze,gradcheck,sweep}``.

Exit codes: 0 success, 1 configuration error, 2 training divergence,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as C
from .cost import compare_moe
from .data import FeatureFormatError, generate_dataset, read_features, split_dataset
from .model import DivergenceError, build_variant, evaluate, fit, save_weights

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3

SWEEP_AXES = ("n_experts", "top_k", "rank")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)


def _load_samples(cfg: dict):
    path = cfg["data"]["features_path"]
    if path:
        return read_features(path)
    return generate_dataset(C.dataset_config(cfg))


def _train_once(cfg: dict, out: Path) -> dict:
    """Train one run into ``out``; returns the final-evaluation record."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(C.dump(cfg), encoding="utf-8")
    samples = _load_samples(cfg)
    train, val = split_dataset(samples, cfg["train"]["val_fraction"])
    if not train:
        raise C.ConfigError("train.val_fraction", "leaves no training samples")
    molre = C.molre_config(cfg)
    model = build_variant(
        cfg["variant"], molre, C.fusion_config(cfg), n_classes=cfg["n_classes"],
        head_hidden=cfg["head_hidden"], seed=cfg["train"]["seed"],
    )
    tcfg = C.train_config(cfg)
    records = fit(model, train, tcfg, val=val or None, metrics_path=out / "metrics.jsonl")
    result = {
        "steps": len(records),
        "initial_l_joint": records[0]["l_joint"],
        "final_l_joint": records[-1]["l_joint"],
        "eval_split": "val" if val else "train",
        "metrics": evaluate(model, val or train),
        "parameters": model.parameter_count(),
    }
    (out / "eval.json").write_text(_json(result) + "\n", encoding="utf-8")
    save_weights(model, out / "weights.bin")
    return result


def cmd_train(args) -> int:
    try:
        cfg = C.resolve(args.config, args.set, args.preset, args.seed)
        result = _train_once(cfg, Path(args.out or "runs/train"))
    except C.ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (FeatureFormatError, OSError) as exc:
        _err(f"data.features_path: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    print(_json(result))
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        cfg = C.resolve(args.config, args.set, args.preset, args.seed)
        a = cfg["analysis"]
        report = compare_moe(
            C.molre_config(cfg), int(a["seq_len"]),
            include_shared=bool(a["include_shared"]), include_task=bool(a["include_task"]),
            include_routers=bool(a["include_routers"]),
        )
    except (C.ConfigError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    text = report.to_json()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost_report.json").write_text(text + "\n", encoding="utf-8")
        (out / "config.yaml").write_text(C.dump(cfg), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run_suite

    results = run_suite(scale=args.scale, seed=args.seed or 0)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f" ({r.error})" if r.error else ""
        print(f"{status} {r.name:32s} max_rel_err={r.max_error:.3e} checked={r.checked} kinks={r.kinks}{extra}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks below {TOLERANCE:g}")
    return EXIT_OK


def parse_axis_values(axis: str, spec: str | None) -> list:
    if axis not in SWEEP_AXES:
        raise C.ConfigError("--axis", f"must be one of {', '.join(SWEEP_AXES)}")
    if spec is None:
        if axis == "rank":
            return list(C.RANK_SETTINGS)
        raise C.ConfigError("--values", f"required for axis {axis}")
    spec = spec.strip()
    if axis == "rank":
        values = [v.strip() for v in spec.split(",") if v.strip()]
        for v in values:
            if v not in C.RANK_SETTINGS and not v.isdigit():
                raise C.ConfigError("--values", f"rank value {v!r} is neither an integer nor one of {list(C.RANK_SETTINGS)}")
        return [int(v) if v.isdigit() else v for v in values]
    try:
        if ".." in spec:
            lo, hi = (int(p) for p in spec.split(".."))
            values = list(range(lo, hi + 1))
        else:
            values = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise C.ConfigError("--values", f"cannot parse {spec!r}; use 'a..b' or 'a,b,c'") from None
    if not values:
        raise C.ConfigError("--values", "empty range")
    return values


def point_config(base: dict, axis: str, value) -> dict:
    cfg = copy.deepcopy(base)
    m = cfg["model"]
    if axis == "n_experts":
        m["n_experts"] = value
        m["shared_ranks"] = None
        m["rank_setting"] = None
    elif axis == "top_k":
        m["top_k"] = value
    elif isinstance(value, str):
        m["rank_setting"], m["shared_ranks"] = value, None
    else:
        m["rank"], m["rank_setting"], m["shared_ranks"] = value, None, None
    C.validate(cfg)
    return cfg


def _run_point(args):
    cfg, out = args
    result = _train_once(cfg, Path(out))
    sa = result["metrics"].get("SA", {})
    er = result["metrics"].get("ER", {})
    return {
        "final_l_joint": result["final_l_joint"],
        "mae": sa.get("mae"),
        "corr": sa.get("corr"),
        "acc2_has0": sa.get("acc2_has0"),
        "er_avg_acc": er.get("avg_acc"),
        "er_avg_wf1": er.get("avg_wf1"),
    }


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MOLRE_THREADS", "1")))
    except ValueError:
        return 1


def cmd_sweep(args) -> int:
    out = Path(args.out or "runs/sweep")
    try:
        base = C.resolve(args.config, args.set, args.preset, args.seed)
        values = parse_axis_values(args.axis, args.values)
        points = [(point_config(base, args.axis, v), str(out / f"{args.axis}={v}")) for v in values]
    except C.ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(C.dump(base), encoding="utf-8")
    try:
        workers = min(_threads(), len(points))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_run_point, points))
        else:
            rows = [_run_point(p) for p in points]
    except DivergenceError as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    except (FeatureFormatError, OSError) as exc:
        _err(f"data.features_path: {exc}")
        return EXIT_CONFIG

    cols = ["final_l_joint", "mae", "corr", "acc2_has0", "er_avg_acc", "er_avg_wf1"]
    lines = ["\t".join([args.axis] + cols)]
    with open(out / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for v, row in zip(values, rows):
            fh.write(json.dumps({args.axis: v, **row}, sort_keys=True) + "\n")
            lines.append("\t".join([str(v)] + ["-" if row[c] is None else f"{row[c]:.4f}" for c in cols]))
    table = "\n".join(lines) + "\n"
    (out / "sweep.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    presets = "\n".join(f"  {k:12s} {v}" for k, v in C.PRESET_HELP.items())
    parser = argparse.ArgumentParser(
        prog="mmolre",
        description="Mixture of low-rank experts for joint sentiment regression and emotion recognition.",
        epilog=f"presets:\n{presets}\n\nenv: MOLRE_THREADS caps sweep parallelism; MOLRE_NUMBA=0 forces the numpy kernels.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", metavar="PATH", help="YAML config file")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override a config key (repeatable), e.g. model.top_k=3")
        p.add_argument("--seed", type=int, help="seed for data generation and initialization")
        p.add_argument("--out", metavar="DIR", help=out_help)
        p.add_argument("--preset", choices=list(C.PRESETS), help="base preset")

    p = sub.add_parser("train", help="train one variant and evaluate it")
    common(p, "output directory (default runs/train): config.yaml, metrics.jsonl, eval.json, weights.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="parameter/FLOP report, low-rank vs full-rank experts")
    common(p, "also write cost_report.json and config.yaml here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full model")
    p.add_argument("--scale", choices=["small", "full"], default="small", help="full checks every model coordinate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train once per value of one hyperparameter")
    common(p, "output directory (default runs/sweep)")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", help="'a..b' or 'a,b,c'; for rank: setting names (" + ", ".join(C.RANK_SETTINGS) + ") or ints")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
