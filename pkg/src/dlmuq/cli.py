"""Command-line entry point for batch scoring, evaluation, and simulation.

Exit codes: 0 on success, 1 when a batch completed but some instances failed,
2 on usage, configuration, or I/O errors.  All randomness flows from the seed
in the run or simulator config, so identical configs and inputs produce
identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import evaluation as ev
from . import oracle, plotting, signals as sig
from .cocoa import CocoaConfig, d_cocoa, global_config, local_config
from .dissimilarity import ADConfig, SimilarityProvider, trajectory_dissimilarity
from .signals import SignalValue, UncertaintyReport
from .trace import TraceError, read_traces, validate, write_traces

AD_VIEWS = ("block", "last", "last_prefix", "full")


class ConfigError(Exception):
    pass


class _StrictAbort(Exception):
    pass


def _require_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}")


def _load_json(path: str, where: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read {where} {path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{where} {path!r} is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} {path!r} must hold a JSON object")
    return obj


@dataclass
class RunConfig:
    seed: int = 0
    signals: list = field(default_factory=lambda: sorted(sig.SIGNAL_CATALOG))
    provider: SimilarityProvider = field(default_factory=lambda: SimilarityProvider("exact_match"))
    render_masks: str = "sentinel"
    remask_mode: str = "events"
    metric: str = "prr"
    preset: str | None = None
    threshold: float | None = None
    max_reject: float = ev.DEFAULT_MAX_REJECT
    dataset: str | None = None
    traces: list[str] = field(default_factory=list)
    qualities: str | None = None
    out_dir: str = "."

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        obj = _load_json(path, "config file")
        _require_keys(obj, {"seed", "signals", "provider", "eval", "io", "remask_mode"}, "config")
        if "seed" in obj:
            cfg.seed = int(obj["seed"])
        if "remask_mode" in obj:
            if obj["remask_mode"] not in ("events", "masked_state"):
                raise ConfigError(f"remask_mode must be 'events' or 'masked_state', got {obj['remask_mode']!r}")
            cfg.remask_mode = obj["remask_mode"]
        if "signals" in obj:
            if not isinstance(obj["signals"], list):
                raise ConfigError("config key 'signals' must be a list")
            cfg.signals = obj["signals"]
        if "provider" in obj:
            prov = obj["provider"]
            _require_keys(
                prov,
                {"kind", "endpoint", "batch_size", "timeout", "max_retries", "max_in_flight", "render_masks"},
                "config.provider",
            )
            cfg.render_masks = prov.pop("render_masks", "sentinel")
            try:
                cfg.provider = SimilarityProvider(**prov)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad provider config: {e}") from e
        if "eval" in obj:
            ev_obj = obj["eval"]
            _require_keys(
                ev_obj, {"metric", "preset", "threshold", "max_reject", "dataset"}, "config.eval"
            )
            cfg.metric = ev_obj.get("metric", cfg.metric)
            cfg.preset = ev_obj.get("preset", cfg.preset)
            cfg.threshold = ev_obj.get("threshold", cfg.threshold)
            cfg.max_reject = float(ev_obj.get("max_reject", cfg.max_reject))
            cfg.dataset = ev_obj.get("dataset", cfg.dataset)
        if "io" in obj:
            io_obj = obj["io"]
            _require_keys(io_obj, {"traces", "qualities", "out_dir"}, "config.io")
            traces = io_obj.get("traces", [])
            cfg.traces = [traces] if isinstance(traces, str) else list(traces)
            cfg.qualities = io_obj.get("qualities", cfg.qualities)
            cfg.out_dir = io_obj.get("out_dir", cfg.out_dir)
        return cfg


# -- signal resolution ------------------------------------------------------


def _ad_config(cfg: RunConfig, view: str, weighted: bool) -> ADConfig:
    return ADConfig(
        view=view, provider=cfg.provider, weighted=weighted, render_masks=cfg.render_masks
    )


def _resolve_signal(entry, cfg: RunConfig):
    """Turn one entry of the config's signal list into (name, trace -> SignalValue)."""
    if isinstance(entry, dict):
        _require_keys(
            entry, {"variant_name", "info_signal", "view", "weighted", "include_nfe"}, "signal variant"
        )
        try:
            config = CocoaConfig(
                info_signal=entry["info_signal"],
                consistency=_ad_config(cfg, entry.get("view", "full"), bool(entry.get("weighted", False))),
                include_nfe=bool(entry.get("include_nfe", False)),
                variant_name=entry.get("variant_name", "d_cocoa"),
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"bad signal variant {entry!r}: {e}") from e
        return config.variant_name, lambda t: d_cocoa(t, config)
    name = str(entry)
    if name == "remask":
        return name, lambda t: sig.remask(t, mode=cfg.remask_mode)
    if name in sig.SIGNAL_CATALOG:
        return name, sig.SIGNAL_CATALOG[name]
    if name == "d_cocoa_local":
        config = local_config(cfg.provider)
        return name, lambda t: d_cocoa(t, config)
    if name == "d_cocoa_global":
        config = global_config(cfg.provider)
        return name, lambda t: d_cocoa(t, config)
    base = name
    weighted = False
    if base.endswith("_weighted"):
        base, weighted = base[: -len("_weighted")], True
    if base.startswith("ad_") and base[3:] in AD_VIEWS:
        ad = _ad_config(cfg, base[3:], weighted)
        return name, (
            lambda t, _ad=ad, _name=name: _rename(trajectory_dissimilarity(t, _ad), _name)
        )
    raise ConfigError(f"unknown signal name {name!r}")


def _rename(value: SignalValue, name: str) -> SignalValue:
    return SignalValue(name, value.value, value.well_defined)


# -- commands ----------------------------------------------------------------


def cmd_score(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.signals:
        cfg.signals = args.signals.split(",")
    if args.traces:
        cfg.traces = args.traces
    if args.out:
        out_path = args.out
    else:
        os.makedirs(cfg.out_dir, exist_ok=True)
        out_path = os.path.join(cfg.out_dir, "report.jsonl")
    if not cfg.traces:
        raise ConfigError("no input traces given (config io.traces or positional arguments)")
    for path in cfg.traces:
        if not os.path.exists(path):
            raise ConfigError(f"input trace file {path!r} does not exist")

    resolved = [_resolve_signal(s, cfg) for s in cfg.signals]
    failures = 0

    def score_one(trace):
        out: dict[str, SignalValue] = {}
        for name, fn in resolved:
            out[name] = fn(trace)
        return UncertaintyReport(trace.instance_id, out)

    def all_traces():
        for path in cfg.traces:
            yield from read_traces(path)

    jobs = args.jobs or os.cpu_count() or 1
    try:
        with open(out_path, "w", encoding="utf-8") as out_fh, ThreadPoolExecutor(jobs) as pool:
            # Bounded submission window keeps memory flat while preserving input order.
            window: deque = deque()

            def drain(block_all: bool) -> None:
                nonlocal failures
                while window and (block_all or len(window) >= 2 * jobs):
                    instance_id, future = window.popleft()
                    try:
                        report = future.result()
                        out_fh.write(json.dumps(report.to_json()) + "\n")
                    except Exception as e:  # noqa: BLE001 - per-instance isolation
                        failures += 1
                        print(f"error: instance {instance_id!r}: {e}", file=sys.stderr)
                        if args.strict:
                            raise _StrictAbort from e

            for trace in all_traces():
                window.append((trace.instance_id, pool.submit(score_one, trace)))
                drain(block_all=False)
            drain(block_all=True)
    except _StrictAbort:
        return 2

    if failures:
        print(f"completed with {failures} failed instance(s)", file=sys.stderr)
        return 1
    return 0


def _threshold_for(cfg: RunConfig) -> float:
    if cfg.threshold is not None:
        return float(cfg.threshold)
    if cfg.preset is not None:
        if cfg.preset not in ev.TASK_PRESETS:
            raise ConfigError(
                f"unknown preset {cfg.preset!r}; known presets: {sorted(ev.TASK_PRESETS)}"
            )
        return ev.TASK_PRESETS[cfg.preset]
    return 0.5


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.reports:
        reports_path = args.reports
    else:
        raise ConfigError("eval needs --reports pointing at a score report")
    if args.qualities:
        cfg.qualities = args.qualities
    if args.metric:
        cfg.metric = args.metric
    if args.preset:
        cfg.preset = args.preset
    if args.threshold is not None:
        cfg.threshold = args.threshold
    if args.max_reject is not None:
        cfg.max_reject = args.max_reject
    if args.dataset:
        cfg.dataset = args.dataset
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if cfg.qualities is None:
        raise ConfigError("eval needs a quality file (config io.qualities or --qualities)")
    for path in (reports_path, cfg.qualities):
        if not os.path.exists(path):
            raise ConfigError(f"input file {path!r} does not exist")

    report_lines = list(ev.read_jsonl(reports_path))
    quality_lines = list(ev.read_jsonl(cfg.qualities))
    signal_names = sorted({name for obj in report_lines for name in obj.get("signals", {})})
    metrics = [cfg.metric] if cfg.metric != "both" else ["prr", "roc_auc"]

    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    curves_csv = os.path.join(cfg.out_dir, "rejection_curves.csv")
    curves_png = os.path.join(cfg.out_dir, "rejection_curves.png")

    curves_by_signal = {}
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for name in signal_names:
            records, stats = ev.join(report_lines, quality_lines, name)
            if len(records) < 2:
                print(f"skipping {name}: {len(records)} joined records", file=sys.stderr)
                continue
            for metric in metrics:
                if metric == "prr":
                    result = ev.prr(records, cfg.max_reject)
                    value, degenerate = result.prr, result.degenerate
                else:
                    value = ev.roc_auc(records, _threshold_for(cfg))
                    degenerate = False
                fh.write(
                    json.dumps(
                        {
                            "signal": name,
                            "metric": metric,
                            "value": value,
                            "n": len(records),
                            "degenerate": degenerate,
                            "preset": cfg.preset,
                            "dataset": cfg.dataset,
                            "excluded": stats.excluded,
                        }
                    )
                    + "\n"
                )
            curves_by_signal[name] = ev.rejection_curve(records, "by_uncertainty", cfg.max_reject)

    if curves_by_signal:
        with open(curves_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["signal", "reject_fraction", "mean_quality"])
            for name, points in sorted(curves_by_signal.items()):
                for frac, quality in points:
                    writer.writerow([name, repr(frac), repr(quality)])
        plotting.plot_rejection_curves(
            curves_by_signal, curves_png, title=cfg.dataset or "rejection curves"
        )
    return 0


SIM_KEYS = {
    "vocab_size",
    "length",
    "steps",
    "unmask_policy",
    "dist",
    "seed",
    "instances",
    "mc_samples",
    "decode",
    "blocks",
    "theorem_samples",
    "theorem_mode",
}


def _build_toy(obj: dict) -> tuple[oracle.ToyDiffusion, dict]:
    _require_keys(obj, SIM_KEYS, "simulator config")
    vocab_size = int(obj.get("vocab_size", 2))
    length = int(obj.get("length", 2))
    seed = int(obj.get("seed", 0))
    dist_spec = obj.get("dist", "uniform")
    if isinstance(dist_spec, list):
        table = np.asarray(dist_spec, dtype=np.float64).reshape(-1)
    elif dist_spec == "uniform":
        table = oracle.uniform_table(vocab_size, length)
    elif isinstance(dist_spec, str) and dist_spec.startswith("dirichlet:"):
        alpha = float(dist_spec.split(":", 1)[1])
        table = oracle.dirichlet_table(vocab_size, length, alpha, np.random.default_rng([seed, 3]))
    else:
        raise ConfigError(
            f"dist must be 'uniform', 'dirichlet:<alpha>', or an explicit table, got {dist_spec!r}"
        )
    try:
        model = oracle.ToyDiffusion(
            vocab_size=vocab_size,
            length=length,
            data_dist=table,
            steps=int(obj.get("steps", 2)),
            unmask_policy=obj.get("unmask_policy", "random_order"),
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"bad simulator config: {e}") from e
    options = {
        "instances": int(obj.get("instances", 100)),
        "mc_samples": int(obj.get("mc_samples", 0)),
        "decode": obj.get("decode", "greedy"),
        "blocks": int(obj.get("blocks", 1)),
        "theorem_samples": int(obj.get("theorem_samples", 10_000)),
        "theorem_mode": obj.get("theorem_mode", "monte_carlo"),
    }
    return model, options


def cmd_simulate(args) -> int:
    obj = _load_json(args.sim_config, "simulator config")
    model, options = _build_toy(obj)
    os.makedirs(args.out_dir, exist_ok=True)
    trace_path = os.path.join(args.out_dir, "traces.jsonl")
    report_path = os.path.join(args.out_dir, "theorem_report.json")

    traces = oracle.generate_trace(
        model,
        options["instances"],
        decode=options["decode"],
        n_mc=options["mc_samples"],
        blocks=options["blocks"],
    )
    write_traces(traces, trace_path)
    try:
        report = oracle.verify_theorem1(
            model, samples=options["theorem_samples"], mode=options["theorem_mode"]
        )
    except oracle.EnumerationLimitError as e:
        raise ConfigError(str(e)) from e
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
    print(
        f"wrote {len(traces)} traces to {trace_path}; "
        f"bound holds: {report.inequality_holds} (margin {report.margin:.6f})"
    )
    return 0


def cmd_validate(args) -> int:
    clean = True
    for path in args.paths:
        if not os.path.exists(path):
            raise ConfigError(f"trace file {path!r} does not exist")
        count = 0
        for trace in read_traces(path):
            violations = validate(trace)
            count += 1
            if violations:
                clean = False
                for v in violations:
                    print(f"{path}: {trace.instance_id}: {v}")
        print(f"{path}: {count} instance(s) checked")
    return 0 if clean else 1


def cmd_report(args) -> int:
    matrix: dict[str, dict[str, float]] = {}
    for path in args.inputs:
        if not os.path.exists(path):
            raise ConfigError(f"metrics file {path!r} does not exist")
        for obj in ev.read_jsonl(path):
            if obj.get("metric") != args.metric:
                continue
            dataset = obj.get("dataset") or os.path.splitext(os.path.basename(path))[0]
            matrix.setdefault(obj["signal"], {})[dataset] = float(obj["value"])
    if not matrix:
        raise ConfigError(f"no {args.metric!r} entries found in the given metrics files")
    datasets = sorted({d for row in matrix.values() for d in row})
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["signal"] + datasets)
        for name in sorted(matrix):
            writer.writerow([name] + [matrix[name].get(d, "") for d in datasets])
    figure_path = os.path.splitext(args.out)[0] + ".png"
    plotting.plot_metric_matrix(matrix, args.metric, figure_path)
    print(f"wrote {args.out} and {figure_path}")
    return 0


# -- argument parsing ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlmuq",
        description="Uncertainty scoring and selective-generation evaluation "
        "for masked diffusion language model traces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser("score", help="compute uncertainty signals over trace files")
    p_score.add_argument("traces", nargs="*", help="trace files (JSON Lines, optionally gzipped)")
    p_score.add_argument("--config", help="run config JSON")
    p_score.add_argument("--signals", help="comma-separated signal names (overrides config)")
    p_score.add_argument("--out", help="report output path (default: <out_dir>/report.jsonl)")
    p_score.add_argument("--jobs", type=int, help="worker threads (default: CPU count)")
    p_score.add_argument("--strict", action="store_true", help="abort on the first failed instance")
    p_score.set_defaults(fn=cmd_score)

    p_eval = sub.add_parser("eval", help="evaluate a score report against quality labels")
    p_eval.add_argument("--config", help="run config JSON")
    p_eval.add_argument("--reports", help="score report (JSON Lines)")
    p_eval.add_argument("--qualities", help="quality file (JSON Lines)")
    p_eval.add_argument("--metric", choices=["prr", "roc_auc", "both"])
    p_eval.add_argument("--preset", help="task preset for the ROC-AUC threshold")
    p_eval.add_argument("--threshold", type=float, help="explicit quality threshold")
    p_eval.add_argument("--max-reject", dest="max_reject", type=float)
    p_eval.add_argument("--dataset", help="dataset label echoed into the metric output")
    p_eval.add_argument("--out-dir", dest="out_dir")
    p_eval.set_defaults(fn=cmd_eval)

    p_sim = sub.add_parser("simulate", help="run the toy simulator and bound verification")
    p_sim.add_argument("sim_config", help="simulator config JSON")
    p_sim.add_argument("--out-dir", dest="out_dir", default=".")
    p_sim.set_defaults(fn=cmd_simulate)

    p_val = sub.add_parser("validate", help="check trace files against all invariants")
    p_val.add_argument("paths", nargs="+")
    p_val.set_defaults(fn=cmd_validate)

    p_rep = sub.add_parser("report", help="merge metric files into a signal x dataset matrix")
    p_rep.add_argument("inputs", nargs="+", help="metrics.jsonl files from eval runs")
    p_rep.add_argument("--out", required=True, help="output CSV path")
    p_rep.add_argument("--metric", default="prr")
    p_rep.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TraceError, ev.EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
