#!/usr/bin/env python3
"""
Voltage Stability Toolkit
Power flow, P-V curves, synthetic PMU data and a VAE-based stability index
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.continuation import curve_to_frame, sweep_lambda_max, trace_pv_curve
from src.curve_dataset import (CurveDatasetManager, TraceJob, dli_directions, run_jobs,
                               sli_directions)
from src.errors import (CheckpointError, ConfigError, EmptyRequest, StabilityIndexError,
                        ToolkitError, UnobservedBus)
from src.grid_case import build_ybus, case_summary, load_case, serialize_case
from src.model_store import Checkpoint, ModelStore
from src.pmu_synth import PmuPlacement, frame_to_window, replay_schedule, window_to_frame
from src.power_flow import SolverOptions, generator_dispatch, solve_newton
from src.plot_export import export_plot, series_summary
from src.run_config import RunConfig
from src.stability_index import (TemperatureConfig, align, extract_feature, extract_features,
                                 fit_alignment, mape, monitor_stream, predict_vcp, records_to_frame)
from src.vae import train, train_plain_ae

logger = logging.getLogger(__name__)

BENCH_WARMUP = 10
EVAL_STREAM = 1


class VoltageStabilityToolkit:
    """Runs one command against a resolved RunConfig"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out_dir = config.out_dir

    # helpers

    def _path(self, name: str) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, name)

    def _write_json(self, name: str, payload: Dict[str, Any]) -> str:
        payload = dict(payload, seed=self.config.seed, config=self.config.to_dict())
        path = self._path(name)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
        return path

    def _model_path(self, args) -> str:
        return getattr(args, "model", None) or os.path.join(self.out_dir, "model.json")

    def _dataset_dir(self, args) -> str:
        return getattr(args, "dataset", None) or os.path.join(self.out_dir, "dataset")

    def _temperature(self, args, ckpt: Optional[Checkpoint] = None) -> TemperatureConfig:
        if getattr(args, "phi", None) is not None:
            return TemperatureConfig(args.phi)
        if ckpt is not None and ckpt.temperature is not None:
            return ckpt.temperature
        return self.config.temperature_config()

    def _case_for(self, args, ckpt: Optional[Checkpoint] = None):
        if getattr(args, "case", None) is None and ckpt is not None and "case" in ckpt.metadata:
            return load_case(ckpt.metadata["case"])
        return self.config.load_grid()

    def _placement_for(self, case, ckpt: Optional[Checkpoint] = None) -> PmuPlacement:
        if ckpt is not None and ckpt.placement:
            placement = PmuPlacement(tuple(ckpt.placement))
            placement.positions(case.bus_ids)
            return placement
        return self.config.pmu_placement(case)

    def _aligned_checkpoint(self, args) -> Checkpoint:
        ckpt = ModelStore(self._model_path(args)).load()
        if ckpt.alignment is None:
            raise CheckpointError("checkpoint has no alignment map; run fit-alignment first")
        return ckpt

    # commands

    def cmd_case_info(self, args) -> Dict[str, Any]:
        case = self.config.load_grid()
        summary = case_summary(case)
        self._write_json("case_info.json", {"case": summary})
        if args.json_out:
            with open(args.json_out, "w") as f:
                f.write(serialize_case(case))
        print(f"✅ {summary['name']}: {summary['buses']} buses ({summary['pq_buses']} PQ, "
              f"{summary['pv_buses']} PV, slack {summary['slack_bus']}), "
              f"{summary['generators_online']} generators, {summary['branches_in_service']} branches, "
              f"{summary['total_p_demand_mw']:.1f} MW demand")
        return summary

    def cmd_pf_run(self, args) -> Dict[str, Any]:
        case = self.config.load_grid()
        opts = SolverOptions(enforce_q_limits=not args.no_q_limits, flat_start=args.flat_start)
        started = time.perf_counter()
        sol = solve_newton(case, build_ybus(case), opts)
        elapsed = time.perf_counter() - started

        sol.to_frame().to_csv(self._path("pf_buses.csv"), index=False)
        generator_dispatch(case, sol).to_csv(self._path("pf_gens.csv"), index=False)
        result = {
            "case": case.name,
            "converged": bool(sol.converged),
            "iterations": int(sol.iterations),
            "max_mismatch": float(sol.max_mismatch),
            "seconds": elapsed,
            "q_limit_events": [{"bus": e.bus, "action": e.action, "q_mvar": float(e.q_mvar)} for e in sol.events],
        }
        self._write_json("pf_summary.json", result)
        print(f"✅ Power flow on {case.name} converged in {sol.iterations} iterations "
              f"(mismatch {sol.max_mismatch:.2e}, {len(sol.events)} reactive-limit switches)")
        return result

    def cmd_cpflow_trace(self, args) -> Dict[str, Any]:
        case = self.config.load_grid()
        direction = self.config.load_direction()
        y = build_ybus(case)
        curve = trace_pv_curve(case, direction, self.config.continuation_options(), y)
        curve_to_frame(curve).to_csv(self._path("curve.csv"), index=False)

        result = {
            "case": case.name,
            "direction": direction.to_dict(),
            "lambda_max": curve.lambda_max,
            "nose_index": curve.nose_index,
            "points": len(curve),
            "limit_induced_nose": curve.limit_induced_nose,
            "switch_events": [{"lambda": lam, "bus": bus, "action": action}
                              for lam, bus, action in curve.switch_events()],
        }
        if args.sweep:
            result["sweep_lambda_max"] = sweep_lambda_max(case, direction, args.sweep_step, y=y)
        self._write_json("cpflow.json", result)
        line = f"✅ {direction.describe()}: lambda_max = {curve.lambda_max:.5f} over {len(curve)} points"
        if args.sweep:
            line += f" (sweep {result['sweep_lambda_max']:.5f})"
        print(line)
        return result

    def cmd_replay(self, args) -> Dict[str, Any]:
        case = self.config.load_grid()
        placement = self.config.pmu_placement(case)
        window = replay_schedule(case, self.config.load_schedule(), placement, self.config.noise_model())
        path = args.output or self._path("measurements.csv")
        window_to_frame(window).to_csv(path, index=False)
        result = {
            "case": case.name,
            "ticks": len(window),
            "placement": list(placement.observed_buses),
            "measurements": path,
            "events": [{"t": t, "bus": bus, "action": action} for t, bus, action in window.events],
        }
        self._write_json("replay.json", result)
        print(f"✅ Replayed {len(window)} ticks on {case.name} -> {path} "
              f"({len(window.events)} reactive-limit events)")
        return result

    def cmd_dataset_gen(self, args) -> Dict[str, Any]:
        case = self.config.load_grid()
        placement = self.config.pmu_placement(case)
        manager = CurveDatasetManager(self._dataset_dir(args))
        manifest = manager.generate(
            case, placement,
            n_curves=self.config.curves,
            max_nodes=self.config.nodes_per_curve(case),
            seed=self.config.seed,
            noise=self.config.noise_model(),
            options=self.config.continuation_options(),
            workers=self.config.workers,
            failure_cap=self.config.failure_cap,
        )
        print(f"✅ {len(manifest['curves'])} curves written to {manager.out_dir} "
              f"({len(manifest['failures'])} attempts skipped)")
        return manifest

    def cmd_train(self, args) -> Dict[str, Any]:
        manager = CurveDatasetManager(self._dataset_dir(args))
        x, _ = manager.training_arrays()
        arch = self.config.model_architecture(x.shape[1])
        train_config = self.config.train_config(x.shape[1])

        started = time.perf_counter()
        model = train(x, arch, train_config)
        elapsed = time.perf_counter() - started
        metadata = {
            "case": manager.manifest.get("case", self.config.case),
            "placement": manager.manifest["placement"],
            "seed": self.config.seed,
            "architecture": arch.describe(),
            "train": {"learning_rate": train_config.learning_rate, "batch_size": train_config.batch_size,
                      "max_steps": train_config.max_steps, "init_scheme": train_config.init_scheme},
            "steps": len(model.history),
        }
        ModelStore(self._model_path(args)).save(Checkpoint(model, metadata=metadata))
        pd.DataFrame({"step": np.arange(1, len(model.history) + 1), "loss": model.history}) \
            .to_csv(self._path("training_log.csv"), index=False)

        result = {"model": self._model_path(args), "rows": int(x.shape[0]), "steps": len(model.history),
                  "final_loss": model.history[-1], "seconds": elapsed, "architecture": arch.describe()}
        if args.plain_ae:
            baseline = train_plain_ae(x, arch, train_config)
            baseline_path = self._path("plain_ae.json")
            ModelStore(baseline_path).save_plain_ae(baseline, metadata)
            result["plain_ae"] = {"model": baseline_path, "final_loss": baseline.history[-1]}
        self._write_json("train.json", result)
        print(f"✅ Trained {arch.describe()} on {x.shape[0]} vectors: {len(model.history)} steps, "
              f"final loss {model.history[-1]:.5f} ({elapsed:.1f}s)")
        return result

    def cmd_fit_alignment(self, args) -> Dict[str, Any]:
        store = ModelStore(self._model_path(args))
        ckpt = store.load()
        x, c = CurveDatasetManager(self._dataset_dir(args)).training_arrays()
        temp = self._temperature(args, ckpt)
        z = extract_features(ckpt.model, x, temp, np.random.default_rng(self.config.seed))
        amap = fit_alignment(z, c, fit_intercept=args.intercept or self.config.alignment_intercept)
        ckpt.alignment = amap
        ckpt.temperature = temp
        store.save(ckpt)

        residual = z @ amap.beta + amap.intercept - c
        rms = np.sqrt(np.mean(residual ** 2, axis=0))
        result = {"alignment": amap.to_dict(), "phi": temp.phi, "rows": int(len(z)),
                  "rms_lambda": float(rms[0]), "rms_voltage": float(rms[1])}
        self._write_json("alignment.json", result)
        print(f"✅ Alignment fitted on {len(z)} rows (rms lambda {rms[0]:.4f}, rms voltage {rms[1]:.5f})")
        return result

    def cmd_monitor(self, args) -> Dict[str, Any]:
        ckpt = self._aligned_checkpoint(args)
        if not os.path.exists(args.input):
            raise ConfigError(f"measurement table not found: {args.input}")
        window = frame_to_window(pd.read_csv(args.input))
        if ckpt.placement and list(window.buses) != ckpt.placement:
            missing = [b for b in ckpt.placement if b not in window.buses]
            if missing:
                raise UnobservedBus(missing[0])
            frame = pd.read_csv(args.input)
            frame = frame[["t"] + PmuPlacement(tuple(ckpt.placement)).columns()]
            window = frame_to_window(frame)

        temp = self._temperature(args, ckpt)
        records = list(monitor_stream(ckpt.model, ckpt.alignment, temp,
                                      zip(window.ticks, window.values), seed=self.config.seed))
        path = self._path("monitor.csv")
        records_to_frame(records).to_csv(path, index=False)
        failed = sum(1 for r in records if r.error)
        result = {"input": args.input, "ticks": len(records), "failed_ticks": failed, "phi": temp.phi,
                  "output": path}
        self._write_json("monitor.json", result)
        print(f"{'✅' if not failed else '⚠️'} Monitored {len(records)} ticks -> {path}"
              + (f" ({failed} failed)" if failed else ""))
        return result

    def cmd_eval_vcp(self, args) -> Dict[str, Any]:
        ckpt = self._aligned_checkpoint(args)
        case = self._case_for(args, ckpt)
        placement = self._placement_for(case, ckpt)
        temp = self._temperature(args, ckpt)
        modes = [m.strip().lower() for m in args.modes.split(",") if m.strip()]
        if not modes or any(m not in ("sli", "dli") for m in modes):
            raise ConfigError("--modes takes sli, dli or sli,dli")

        report: Dict[str, Any] = {"case": case.name, "phi": temp.phi, "modes": {}}
        rows: List[Dict[str, Any]] = []
        for mode in modes:
            directions = sli_directions(case) if mode == "sli" else \
                dli_directions(case, args.max_pairs, self.config.seed)
            if not directions:
                raise EmptyRequest(f"no qualifying load buses for {mode}")
            children = np.random.SeedSequence([self.config.seed, EVAL_STREAM, modes.index(mode)]) \
                .spawn(len(directions))
            jobs = [TraceJob(i, case, d, placement, self.config.noise_model(), child,
                             self.config.continuation_options())
                    for i, (d, child) in enumerate(zip(directions, children))]

            pairs = []
            for result in run_jobs(jobs, self.config.workers):
                row = {"mode": mode, "direction": result.direction.describe(),
                       "lambda_real": result.lambda_max, "lambda_pre": float("nan"),
                       "nose_index": -1, "error": result.error or ""}
                if result.error is None:
                    vectors = result.frame[placement.columns()].to_numpy(dtype=float)
                    try:
                        est = predict_vcp(ckpt.model, ckpt.alignment, temp, vectors, self.config.seed)
                        row.update(lambda_pre=est.lambda_pre, nose_index=est.nose_sample_index)
                        pairs.append((est.lambda_pre, result.lambda_max))
                    except StabilityIndexError as e:
                        row["error"] = str(e)
                if row["error"]:
                    logger.warning("%s %s: %s", mode, row["direction"], row["error"])
                rows.append(row)

            score = mape([p for p, _ in pairs], [a for _, a in pairs]) if pairs else None
            report["modes"][mode] = {
                "directions": len(directions),
                "evaluated": len(pairs),
                "mape": score,
                "pairs": [{"lambda_pre": p, "lambda_real": a} for p, a in pairs],
            }
            print(f"{'✅' if score is not None else '❌'} {mode.upper()}: {len(pairs)}/{len(directions)} "
                  f"directions, MAPE " + (f"{score:.4f}" if score is not None else "n/a"))

        pd.DataFrame(rows).to_csv(self._path("vcp_scatter.csv"), index=False)
        self._write_json("vcp_report.json", report)
        return report

    def cmd_export_plot(self, args) -> Dict[str, Any]:
        written = export_plot(args.input, self.out_dir, args.lambda_max, svg=not args.no_svg)
        result = {"input": args.input, "outputs": written, "lambda_max": args.lambda_max,
                  "series": series_summary(pd.read_csv(args.input))}
        self._write_json("export_plot.json", result)
        print(f"✅ Plot written: {', '.join(written.values())}")
        return result

    def cmd_bench(self, args) -> Dict[str, Any]:
        if args.repeats < 1:
            raise EmptyRequest("bench needs at least one repeat")
        ckpt = self._aligned_checkpoint(args)
        temp = self._temperature(args, ckpt)
        model, amap = ckpt.model, ckpt.alignment
        x = model.norm_stats.denormalize(np.full(model.input_dim, 0.5))
        rng = np.random.default_rng(self.config.seed)

        for _ in range(BENCH_WARMUP):
            align(amap, extract_feature(model, x, temp, rng))
        timings = np.empty(args.repeats)
        for i in range(args.repeats):
            started = time.perf_counter()
            align(amap, extract_feature(model, x, temp, rng))
            timings[i] = time.perf_counter() - started

        ms = timings * 1e3
        result = {"input_dim": model.input_dim, "n_repeats": args.repeats,
                  "median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95)),
                  "mean_ms": float(np.mean(ms))}
        self._write_json("bench.json", result)
        print(f"✅ Inference: median {result['median_ms']:.4f} ms, p95 {result['p95_ms']:.4f} ms "
              f"over {args.repeats} runs")
        return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stability_toolkit",
                                     description="Voltage stability monitoring toolkit")
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--case", help="case file or MATPOWER case name")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    case_cmd = commands.add_parser("case").add_subparsers(dest="action", required=True)
    info = case_cmd.add_parser("info", help="summarize a case")
    info.add_argument("--json-out", help="also write the case as JSON")
    info.set_defaults(handler="cmd_case_info")

    pf_cmd = commands.add_parser("pf").add_subparsers(dest="action", required=True)
    pf_run = pf_cmd.add_parser("run", help="solve the base-case power flow")
    pf_run.add_argument("--no-q-limits", action="store_true")
    pf_run.add_argument("--flat-start", action="store_true")
    pf_run.set_defaults(handler="cmd_pf_run")

    cp_cmd = commands.add_parser("cpflow").add_subparsers(dest="action", required=True)
    trace = cp_cmd.add_parser("trace", help="trace a P-V curve")
    trace.add_argument("--direction", help="e.g. 4:p=1 or 4:p=1,5:q=0.5,g1=0.2")
    trace.add_argument("--sweep", action="store_true", help="also run the brute-force lambda sweep")
    trace.add_argument("--sweep-step", type=float, default=1e-3)
    trace.add_argument("--max-points", type=int)
    trace.set_defaults(handler="cmd_cpflow_trace")

    replay = commands.add_parser("replay", help="replay a load schedule into a measurement table")
    replay.add_argument("--schedule")
    replay.add_argument("--output")
    replay.set_defaults(handler="cmd_replay")

    ds_cmd = commands.add_parser("dataset").add_subparsers(dest="action", required=True)
    gen = ds_cmd.add_parser("gen", help="generate random training curves")
    gen.add_argument("--curves", type=int)
    gen.add_argument("--max-nodes", type=int)
    gen.add_argument("--dataset")
    gen.set_defaults(handler="cmd_dataset_gen")

    train_cmd = commands.add_parser("train", help="train the VAE on a curve dataset")
    train_cmd.add_argument("--dataset")
    train_cmd.add_argument("--model")
    train_cmd.add_argument("--plain-ae", action="store_true", help="also train the autoencoder baseline")
    train_cmd.set_defaults(handler="cmd_train")

    fit = commands.add_parser("fit-alignment", help="fit the latent-to-(lambda, V) map")
    fit.add_argument("--dataset")
    fit.add_argument("--model")
    fit.add_argument("--phi", type=float)
    fit.add_argument("--intercept", action="store_true", help="also fit a constant offset")
    fit.set_defaults(handler="cmd_fit_alignment")

    monitor = commands.add_parser("monitor", help="run the index over a measurement table")
    monitor.add_argument("--input", required=True)
    monitor.add_argument("--model")
    monitor.add_argument("--phi", type=float)
    monitor.set_defaults(handler="cmd_monitor")

    eval_cmd = commands.add_parser("eval").add_subparsers(dest="action", required=True)
    vcp = eval_cmd.add_parser("vcp", help="collapse-point accuracy over SLI/DLI directions")
    vcp.add_argument("--model")
    vcp.add_argument("--modes", default="sli,dli")
    vcp.add_argument("--max-pairs", type=int)
    vcp.add_argument("--phi", type=float)
    vcp.set_defaults(handler="cmd_eval_vcp")

    plot = commands.add_parser("export-plot", help="plot a result table")
    plot.add_argument("--input", required=True)
    plot.add_argument("--lambda-max", type=float)
    plot.add_argument("--no-svg", action="store_true")
    plot.set_defaults(handler="cmd_export_plot")

    bench = commands.add_parser("bench", help="time per-vector inference")
    bench.add_argument("--model")
    bench.add_argument("--repeats", type=int, default=1000)
    bench.add_argument("--phi", type=float)
    bench.set_defaults(handler="cmd_bench")
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config).with_overrides(
        seed=args.seed,
        out_dir=args.out_dir,
        case=args.case,
        workers=args.workers,
        direction=getattr(args, "direction", None),
        schedule=getattr(args, "schedule", None),
        curves=getattr(args, "curves", None),
        max_nodes=getattr(args, "max_nodes", None),
        max_points=getattr(args, "max_points", None),
    )
    return config.validate()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    debug = args.verbose or os.environ.get("ENVIRONMENT") == "development"
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        toolkit = VoltageStabilityToolkit(resolve_config(args))
        getattr(toolkit, args.handler)(args)
    except ToolkitError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
