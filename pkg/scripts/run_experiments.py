"""Train and evaluate the toy battery one run at a time, then write a report.

Runs land in <workspace>/runs/<config hash>; finished runs are reused, so the
script can be interrupted and restarted.  The acceptance suite reads the same
cache.

    python scripts/run_experiments.py                    # everything
    python scripts/run_experiments.py --only baseline cp:F2
    python scripts/run_experiments.py --iterations 200   # quick smoke run
"""
import argparse
import json
import logging
import time
from pathlib import Path

from featlock import minidet as md
from featlock.bench import attack as atk
from featlock.bench import presets, reports
from featlock.bench.data import load_split
from featlock.bench.experiment import dataset_dir, run_experiment

log = logging.getLogger("run_experiments")


def battery(iterations: int) -> dict:
    # acceptance-critical runs first so a partial battery is still useful
    cfgs = [presets.baseline(iterations), presets.cp_feature("F2", iterations),
            presets.cp_feature("F1", iterations), presets.cp_feature("F3", iterations),
            presets.shf_input(1, iterations), presets.shf_input(max(presets.SHF_BLOCKS), iterations)]
    cfgs += [presets.shf_input(m, iterations) for m in presets.SHF_BLOCKS[1:-1]]
    return {c.label: c for c in cfgs}


def run_attack(result, root: Path, n: int):
    out = result.run_dir / f"attack_n{n}"
    if (out / "attack_raw.csv").exists():
        return atk.BoxStats.of(atk.read_attack_raw(out / "attack_raw.csv"))
    model = md.load_checkpoint(result.run_dir / "model")
    test = load_split(dataset_dir(root, result.config.data), "test")
    report = atk.random_key_attack(model, test, n=n, seed=result.config.incorrect_seed + 1)
    atk.write_attack(report, out)
    return report.stats


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workspace", type=Path, default=Path(__file__).resolve().parents[1] / "workspace")
    ap.add_argument("--iterations", type=int, default=presets.ITERATIONS)
    ap.add_argument("--only", nargs="*", help="labels to run, e.g. baseline cp:F2 shf:M=16")
    ap.add_argument("--attack-keys", type=int, default=presets.N_ATTACK)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfgs = battery(args.iterations)
    unknown = set(args.only or ()) - set(cfgs)
    if unknown:
        ap.error(f"unknown labels {sorted(unknown)}; choose from {sorted(cfgs)}")
    results = {}
    for label, cfg in cfgs.items():
        if args.only and label not in args.only:
            continue
        start = time.perf_counter()
        log.info("%s (%s)", label, cfg.config_hash())
        results[label] = res = run_experiment(
            cfg, args.workspace,
            progress=lambda it, v: log.info("  iter %d loss %.3f", it, v) if it % 500 == 0 else None)
        log.info("%s done in %.1f min: %s", label, (time.perf_counter() - start) / 60,
                 ", ".join(f"{r.key_mode} {r.map:.4f}" for r in res.rows))

    parts = ["## Detection accuracy (mAP)\n\n" + reports.results_markdown(list(results.values()))]
    cps = [r for r in results.values() if r.config.mode == "cp"]
    if len(cps) > 1:
        parts.append("## Feature-map depth\n\n" + reports.depth_markdown(reports.depth_trend(cps)))
    if "cp:F2" in results:
        stats = run_attack(results["cp:F2"], args.workspace, args.attack_keys)
        parts.append("## Random-key attack on cp:F2\n\n" + reports.markdown_table(
            ["keys", "min", "q1", "median", "q3", "max", "outliers"],
            [[args.attack_keys, stats.minimum, stats.q1, stats.median, stats.q3, stats.maximum,
              len(stats.outliers)]]))
        atk.write_boxplot_csv(args.workspace / "attack_boxplot.csv", {"cp:F2": stats})
    if "baseline" in results and "cp:F2" in results:
        t = reports.timing_report(results["baseline"], results["cp:F2"])
        parts.append("## Time per iteration\n\n" + reports.markdown_table(
            ["model", "seconds/iter"],
            [["baseline", t["plain"]["seconds_per_iter"]], ["cp:F2", t["keyed"]["seconds_per_iter"]],
             ["ratio", t["ratio"]]]))
        (args.workspace / "timing.json").write_text(json.dumps(t, indent=2))
        conv = reports.convergence_report({k: results[k].train_log for k in ("baseline", "cp:F2")})
        parts.append("## Convergence\n\n" + reports.convergence_markdown(conv))
    out = args.workspace / "report.md"
    out.write_text("\n".join(parts))
    print(out.read_text())


if __name__ == "__main__":
    main()
