"""Command-line entry point.

Exit codes: 0 success, 1 bad input (flags, config, files), 2 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import cipher
from . import minidet as md
from .bench import attack as atk
from .bench import reports
from .evalkit import write_jsonl
from .bench.data import DatasetSpec, load_split, synth_dataset
from .bench.experiment import (ExperimentConfig, evaluate, load_result, run_experiment,
                               write_results_csv)

log = logging.getLogger("featlock")

SHF_BLOCKS = (1, 2, 4, 8, 16)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--config", type=Path, help="JSON file whose keys override option defaults")


def build_parser() -> _Parser:
    parser = _Parser(prog="featlock", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="write a key file")
    _common(p, "key file path")
    p.add_argument("--L", type=int, dest="length", help="key length (CP: channel count)")
    p.add_argument("--kind", choices=("CP", "SHF"), default="CP")
    p.add_argument("--M", type=int, dest="block", default=1, help="SHF block size")

    p = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    _common(p, "dataset directory")
    p.add_argument("--n-train", type=int, default=DatasetSpec.n_train)
    p.add_argument("--n-test", type=int, default=DatasetSpec.n_test)

    p = sub.add_parser("train", help="train one model")
    _common(p, "checkpoint directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=("baseline", "shf", "cp"), default="baseline")
    p.add_argument("--map", dest="map_id", choices=md.MAPS)
    p.add_argument("--block", type=int)
    p.add_argument("--key", type=Path, help="key file for shf/cp models")
    p.add_argument("--iterations", type=int, default=md.TrainConfig.iterations)
    p.add_argument("--lr", type=float, default=md.BASE_LR)
    p.add_argument("--batch-size", type=int, default=md.TrainConfig.batch_size)

    p = sub.add_parser("eval", help="evaluate a checkpoint under one key mode")
    _common(p, "report JSON path")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--key-mode", choices=("keyed", "noenc", "plain"), default="plain")
    p.add_argument("--key", type=Path)
    p.add_argument("--location", choices=md.MAPS, help="apply the key at this map instead")
    p.add_argument("--detections", type=Path, help="also write detections as JSON lines")

    p = sub.add_parser("attack", help="random-key attack on a protected checkpoint")
    _common(p, "output directory")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--location", choices=md.MAPS)

    p = sub.add_parser("sweep", help="train and evaluate a battery of experiments")
    _common(p, "workspace root (datasets and runs are cached here)")
    p.add_argument("--mode", choices=("cp", "shf", "baseline"), required=True)
    p.add_argument("--iterations", type=int, default=md.TrainConfig.iterations)
    p.add_argument("--lr", type=float, default=md.BASE_LR)
    p.add_argument("--n-incorrect", type=int, default=20)
    p.add_argument("--n-train", type=int, default=DatasetSpec.n_train)
    p.add_argument("--n-test", type=int, default=DatasetSpec.n_test)
    p.add_argument("--blocks", type=int, nargs="+", default=list(SHF_BLOCKS))
    p.add_argument("--wrong-location", choices=md.MAPS,
                   help="also evaluate an attacker keying this map (cp only)")

    p = sub.add_parser("report", help="render run directories and attack outputs as markdown")
    _common(p, "markdown output path")
    p.add_argument("--runs", type=Path, nargs="*", default=[])
    p.add_argument("--attacks", type=Path, nargs="*", default=[])
    p.add_argument("--boxplot-csv", type=Path)
    return parser


def _apply_config(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        overrides = json.loads(args.config.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(overrides, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    known = vars(args)
    if unknown := sorted(k for k in overrides if k.replace("-", "_") not in known):
        raise UsageError(f"{args.config}: unknown keys {unknown}")
    # command-line flags win over the config file
    given = {a.split("=")[0] for a in argv if a.startswith("--")}
    for k, v in overrides.items():
        dest = k.replace("-", "_")
        flag = "--" + k.replace("_", "-")
        if flag not in given:
            setattr(args, dest, Path(v) if isinstance(known[dest], Path) else v)
    return args


def _need_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_keygen(a) -> None:
    if a.length is None:
        if a.kind != "SHF":
            raise UsageError("--L is required for CP keys")
        a.length = 3 * a.block * a.block
    spec = cipher.KeySpec(a.kind, a.length // (a.block * a.block), a.block)
    if spec.L != a.length:
        raise UsageError(f"--L {a.length} is not c*M*M for M={a.block}")
    a.out.parent.mkdir(parents=True, exist_ok=True)
    cipher.write_key(a.out, cipher.keygen(spec.L, a.seed), spec)
    print(a.out)


def cmd_synth(a) -> None:
    spec = DatasetSpec(n_train=a.n_train, n_test=a.n_test, seed=a.seed)
    synth_dataset(spec, a.out)
    print(a.out)


def _model_config(a) -> md.MiniDetConfig:
    if a.mode == "cp":
        if a.map_id is None:
            raise UsageError("--map is required for cp")
        return md.MiniDetConfig(encrypted_map=a.map_id)
    if a.mode == "shf":
        if a.block is None:
            raise UsageError("--block is required for shf")
        return md.MiniDetConfig(shf_block=a.block)
    return md.MiniDetConfig()


def cmd_train(a) -> None:
    cfg = _model_config(a)
    key_mode = md.KeyMode.plain()
    if cfg.encrypted:
        key, _ = cipher.read_key(_need_file(a.key, "key file"))
        if key.L != cfg.key_length:
            raise UsageError(f"key length {key.L} does not match model ({cfg.key_length})")
        key_mode = md.KeyMode.keyed(key)
    split = load_split(a.data, "train")
    tc = md.TrainConfig.scaled(a.iterations, lr=a.lr, batch_size=a.batch_size, seed=a.seed)
    model = md.build_model(cfg, a.seed)
    model, train_log = md.train(model, split.images, split.gts, tc, key_mode,
                                progress=lambda it, v: log.info("iter %d loss %.4f", it, v)
                                if it % tc.log_every == 0 else None)
    md.save_checkpoint(model, a.out, train_log, {"seconds_per_iter": train_log.seconds_per_iter})
    print(a.out)


def _load_model(path: Path) -> md.ModelState:
    if not (path / "model.json").is_file():
        raise UsageError(f"no checkpoint at {path}")
    return md.load_checkpoint(path)


def cmd_eval(a) -> None:
    model = _load_model(a.model)
    if a.key_mode == "keyed":
        key, _ = cipher.read_key(_need_file(a.key, "key file"))
        mode = md.KeyMode.keyed(key)
    else:
        mode = md.KeyMode(a.key_mode)
    split = load_split(a.data, "test")
    dets: list = []
    rep = evaluate(model, split, mode, a.location, detections=dets)
    rep.meta.update({"key_mode": a.key_mode, "location": a.location})
    _write_json(a.out, rep.to_dict())
    if a.detections:
        write_jsonl(a.detections, dets, [f"{i:05d}" for i in range(len(dets))])
    print(f"mAP {rep.map_value:.4f}")


def cmd_attack(a) -> None:
    model = _load_model(a.model)
    if not model.config.encrypted:
        raise UsageError("attack needs a model trained with encryption")
    report = atk.random_key_attack(model, load_split(a.data, "test"), a.n, a.seed, a.location)
    atk.write_attack(report, a.out)
    s = report.stats
    print(f"median {s.median:.4f} (q1 {s.q1:.4f}, q3 {s.q3:.4f}) over {report.n} keys")


def sweep_configs(a) -> list[ExperimentConfig]:
    data = DatasetSpec(n_train=a.n_train, n_test=a.n_test, seed=a.seed)
    tc = md.TrainConfig.scaled(a.iterations, lr=a.lr, seed=a.seed)
    common = dict(train=tc, data=data, n_incorrect=a.n_incorrect, model_seed=a.seed)
    if a.mode == "cp":
        return [ExperimentConfig(mode="cp", map_id=m, **common,
                                 wrong_location=a.wrong_location if a.wrong_location != m else None)
                for m in md.MAPS]
    if a.mode == "shf":
        return [ExperimentConfig(mode="shf", block=m, **common) for m in a.blocks]
    return [ExperimentConfig(**common)]


def cmd_sweep(a) -> None:
    cfgs = sweep_configs(a)
    results = []
    for cfg in cfgs:
        log.info("running %s (%s)", cfg.label, cfg.config_hash())
        results.append(run_experiment(cfg, a.out))
    rows = [r for res in results for r in res.rows]
    write_results_csv(a.out / f"sweep_{a.mode}.csv", rows)
    table = reports.results_markdown(results)
    (a.out / f"sweep_{a.mode}.md").write_text(table)
    print(table, end="")


def cmd_report(a) -> None:
    parts = []
    results = [load_result(r) for r in a.runs]
    if results:
        parts.append("## Detection accuracy (mAP)\n\n" + reports.results_markdown(results))
        cps = [r for r in results if r.config.mode == "cp"]
        if len({r.config.map_id for r in cps}) > 1:
            parts.append("## Feature-map depth\n\n" + reports.depth_markdown(reports.depth_trend(cps)))
        if len(results) > 1:
            plain = [r for r in results if r.config.mode == "baseline"]
            keyed = [r for r in results if r.config.mode != "baseline"]
            logs = {r.config.label: r.train_log for r in results}
            try:
                parts.append("## Convergence\n\n" + reports.convergence_markdown(reports.convergence_report(logs)))
            except ValueError as exc:
                log.warning("skipping convergence table: %s", exc)
            if plain and keyed and plain[0].timing and keyed[0].timing:
                t = reports.timing_report(plain[0], keyed[0])
                parts.append("## Time per iteration\n\n" + reports.markdown_table(
                    ["model", "seconds/iter"],
                    [[t["plain"]["label"], t["plain"]["seconds_per_iter"]],
                     [t["keyed"]["label"], t["keyed"]["seconds_per_iter"]],
                     ["ratio", t["ratio"]]]))
    stats = {}
    for d in a.attacks:
        raw = d / "attack_raw.csv" if d.is_dir() else d
        stats[str(d)] = atk.BoxStats.of(atk.read_attack_raw(_need_file(raw, "attack CSV")))
    if stats:
        parts.append("## Random-key attack\n\n" + reports.markdown_table(
            ["run", "min", "q1", "median", "q3", "max", "outliers"],
            [[k, s.minimum, s.q1, s.median, s.q3, s.maximum, len(s.outliers)] for k, s in stats.items()]))
        if a.boxplot_csv:
            atk.write_boxplot_csv(a.boxplot_csv, stats)
    if not parts:
        raise UsageError("nothing to report: pass --runs and/or --attacks")
    a.out.parent.mkdir(parents=True, exist_ok=True)
    a.out.write_text("\n".join(parts))
    print(a.out)


COMMANDS = {"keygen": cmd_keygen, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "attack": cmd_attack, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except (UsageError, ValueError) as exc:  # CipherError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
