"""
The `fedtracker` command line.

    fedtracker train  --config CONFIG [--seed N] [--out DIR] [--threads N]
    fedtracker verify --checkpoint CKPT --trigger TRIGGER.ftck [--epsilon-v X]
    fedtracker trace  --checkpoint CKPT --records RECORDS.json
    fedtracker attack --checkpoint CKPT --attack SPEC [--records R] [--trigger T] [--config C] [--adv-id I] [--out DIR]
    fedtracker report --out DIR
    fedtracker sweep  --config CONFIG --grid KEY=V1,V2 [--grid ...] [--out DIR]

Exit codes: 0 success (or a positive verification), 1 a negative verification, 2 a usage or
configuration problem, 3 an IO failure or a corrupt input file.
"""
import itertools
import json
import sys
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import Any, Callable

import numpy as np
from loguru import logger

from src.attacks import ATTACK_NAMES, apply_attack, evaluate_attack, parse_attack_spec
from src.monitoring import build_report_tables, dump_json, read_report_json, report_summary, write_attacks_csv
from src.setup.config import ExperimentConfig, apply_overrides, config as settings, load_experiment_config
from src.setup.exceptions import ConfigError, DataFormatError, FedTrackerError
from src.setup.paths import ATTACKS_FILE, RECORDS_FILE, REPORT_FILE, TRIGGER_SAMPLES, make_needed_directories
from src.protection.fingerprint import code_to_string, extract_code, fss_vector, hd_trace, load_records, trace
from src.protection.watermark import load_trigger_set, trigger_accuracy
from src.training_pipeline.checkpoints import load_model, save_model
from src.training_pipeline.training import FederatedTrainer, run_experiment, save_run_artifacts


EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_USAGE = 2
EXIT_IO = 3


def configure_logging(level: str | None = None) -> None:
    logger.remove()
    logger.add(sys.stderr, level=(level or settings.log_level).upper())


def emit(payload: dict[str, Any]) -> None:
    print(dump_json(payload))


def _experiment_with_flags(args: Namespace) -> ExperimentConfig:
    experiment = load_experiment_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = str(args.out)
    return apply_overrides(experiment, overrides) if overrides else experiment


def cmd_train(args: Namespace) -> int:
    """Run an experiment and write its metrics, report and checkpoints"""
    experiment = _experiment_with_flags(args)
    output_dir = Path(experiment.output_dir)
    make_needed_directories(extra_paths=[output_dir])

    report = run_experiment(experiment, threads=args.threads)
    save_run_artifacts(report, output_dir)
    emit(report_summary(report))
    return EXIT_OK


def cmd_verify(args: Namespace) -> int:
    model = load_model(args.checkpoint)
    trigger = load_trigger_set(args.trigger)

    wm_acc = trigger_accuracy(model, trigger)
    verdict = wm_acc >= args.epsilon_v
    emit({"wm_acc": wm_acc, "epsilon_v": args.epsilon_v, "verdict": verdict})

    if not verdict:
        logger.warning(f"Trigger accuracy {wm_acc:.4f} is below {args.epsilon_v}; ownership is not verified")
    return EXIT_OK if verdict else EXIT_NEGATIVE


def cmd_trace(args: Namespace) -> int:
    model = load_model(args.checkpoint)
    records = load_records(args.records)

    scores = fss_vector(model, records)
    by_hamming = hd_trace(model, records)
    ranking = sorted(
        ({"client_id": record.client_id, "fss": float(score)} for record, score in zip(records, scores)),
        key=lambda entry: (-entry["fss"], entry["client_id"])
    )

    emit({
        "client_id": trace(model, records),
        "fss_vector": [float(score) for score in scores],
        "ranking": ranking,
        "hd_trace": {
            "client_id": by_hamming.client_id,
            "distance": by_hamming.distance,
            "ambiguous": by_hamming.ambiguous,
            "candidates": by_hamming.candidates,
        },
        "extracted_codes": {str(record.client_id): code_to_string(extract_code(model, record)) for record in records},
    })
    return EXIT_OK


def _attack_experiment(args: Namespace) -> ExperimentConfig:
    """The experiment behind a checkpoint: from --config, or else from the report saved beside it"""
    if args.config is not None:
        return load_experiment_config(args.config)

    report_path = Path(args.checkpoint).parent / REPORT_FILE
    if not report_path.is_file():
        raise ConfigError(f"Pass --config; there is no {REPORT_FILE} next to {args.checkpoint} to rebuild the data from")
    return read_report_json(report_path).config


def cmd_attack(args: Namespace) -> int:
    spec = parse_attack_spec(args.attack)
    run_dir = Path(args.checkpoint).parent
    records = load_records(args.records or run_dir / RECORDS_FILE)
    trigger = load_trigger_set(args.trigger or run_dir / TRIGGER_SAMPLES)
    model = load_model(args.checkpoint)

    experiment = _attack_experiment(args)
    trainer = FederatedTrainer(experiment, threads=args.threads, show_progress=False)
    federation = trainer.build_federation()

    adversary_id = args.adv_id if args.adv_id is not None else trace(model, records)
    if not 0 <= adversary_id < len(federation.client_data):
        raise ConfigError(f"Client {adversary_id} does not exist in this federation")

    rng = np.random.default_rng(np.random.SeedSequence([experiment.seed, 2, adversary_id]))
    attacked = apply_attack(
        spec, model, federation.client_data[adversary_id], rng=rng,
        fingerprint_cfg=experiment.fingerprint, default_lr=experiment.fl.client_lr, batch_size=experiment.fl.batch_size
    )
    outcome = evaluate_attack(
        model, attacked, trigger, records,
        adversary_id=adversary_id,
        threshold=experiment.utility_drop_threshold,
        test_set=federation.test_set,
        epsilon_v=args.epsilon_v if args.epsilon_v is not None else experiment.watermark.verify_threshold,
        attack_name=spec.name,
        setting=spec.setting
    )

    out_dir = Path(args.out) if args.out is not None else run_dir / "attacked"
    out_dir.mkdir(parents=True, exist_ok=True)
    label = f"{spec.name}_{spec.setting.replace(':', '_')}".rstrip("_")
    save_model(out_dir / f"{Path(args.checkpoint).stem}_{label}.ftck", attacked, meta={"attack": args.attack})
    write_attacks_csv([outcome], out_dir / f"{Path(args.checkpoint).stem}_{label}_{ATTACKS_FILE}")

    emit(outcome.model_dump())
    return EXIT_OK


def cmd_report(args: Namespace) -> int:
    written = build_report_tables(Path(args.out))
    emit({"tables": [str(path) for path in written]})
    return EXIT_OK


def _parse_value(token: str) -> Any:
    try:
        return json.loads(token)
    except json.JSONDecodeError:
        return token


def parse_grid(axes: list[str]) -> dict[str, list[Any]]:
    """["fl.clients=5,10", "fingerprint.bits=64,128"] -> {"fl.clients": [5, 10], "fingerprint.bits": [64, 128]}"""
    grid = {}
    for axis in axes:
        key, separator, values = axis.partition("=")
        if not separator or not key or not values:
            raise ConfigError(f"Grid axes look like key=v1,v2; got '{axis}'")
        grid[key.strip()] = [_parse_value(token.strip()) for token in values.split(",")]
    return grid


def cmd_sweep(args: Namespace) -> int:
    """Run one experiment per point of the grid, each in a directory named by its config hash"""
    base = load_experiment_config(args.config)
    if args.seed is not None:
        base = apply_overrides(base, {"seed": args.seed})

    grid = parse_grid(args.grid)
    out_dir = Path(args.out) if args.out is not None else Path(base.output_dir)
    points = [dict(zip(grid, values)) for values in itertools.product(*grid.values())]

    experiments = [apply_overrides(base, point) for point in points]
    for point, experiment in zip(points, experiments):
        run_dir = out_dir / experiment.config_hash()
        logger.info(f"Sweep point {point} -> {run_dir}")
        report = run_experiment(experiment.model_copy(update={"output_dir": run_dir}), threads=args.threads)
        save_run_artifacts(report, run_dir)

    build_report_tables(out_dir)
    emit({"runs": len(experiments), "output_dir": str(out_dir)})
    return EXIT_OK


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="fedtracker", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--log-level", type=str, default=None)
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="run an experiment")
    train.add_argument("--config", type=Path, required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", type=Path, default=None)
    train.add_argument("--threads", type=int, default=None)
    train.set_defaults(handler=cmd_train)

    verify = subparsers.add_parser("verify", help="check a checkpoint against the trigger set")
    verify.add_argument("--checkpoint", type=Path, required=True)
    verify.add_argument("--trigger", type=Path, required=True)
    verify.add_argument("--epsilon-v", type=float, default=0.5)
    verify.set_defaults(handler=cmd_verify)

    trace_parser = subparsers.add_parser("trace", help="identify the client a checkpoint was given to")
    trace_parser.add_argument("--checkpoint", type=Path, required=True)
    trace_parser.add_argument("--records", type=Path, required=True)
    trace_parser.set_defaults(handler=cmd_trace)

    attack = subparsers.add_parser("attack", help=f"attack a checkpoint ({', '.join(ATTACK_NAMES)})")
    attack.add_argument("--checkpoint", type=Path, required=True)
    attack.add_argument("--attack", type=str, required=True)
    attack.add_argument("--records", type=Path, default=None)
    attack.add_argument("--trigger", type=Path, default=None)
    attack.add_argument("--config", type=Path, default=None)
    attack.add_argument("--adv-id", type=int, default=None)
    attack.add_argument("--epsilon-v", type=float, default=None)
    attack.add_argument("--out", type=Path, default=None)
    attack.add_argument("--threads", type=int, default=None)
    attack.set_defaults(handler=cmd_attack)

    report = subparsers.add_parser("report", help="consolidate the runs under a directory into tables")
    report.add_argument("--out", type=Path, required=True)
    report.set_defaults(handler=cmd_report)

    sweep = subparsers.add_parser("sweep", help="run a grid of experiments")
    sweep.add_argument("--config", type=Path, required=True)
    sweep.add_argument("--grid", type=str, action="append", required=True)
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--out", type=Path, default=None)
    sweep.add_argument("--threads", type=int, default=None)
    sweep.set_defaults(handler=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    handler: Callable[[Namespace], int] = args.handler

    try:
        return handler(args)
    except ConfigError as error:
        logger.error(str(error))
        return EXIT_USAGE
    except (OSError, DataFormatError) as error:
        logger.error(f"Could not read or write a file: {error}")
        return EXIT_IO
    except (FedTrackerError, ValueError) as error:
        logger.error(f"The input files do not fit together: {error}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
