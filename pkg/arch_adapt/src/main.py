"""
Main entry point for arch-adapt.
Handles the command line interface and orchestrates the pipeline: QMC pools,
accuracy/energy predictor builds, latency LUTs, constrained searches and
threshold sweeps. Every command that writes an output directory also writes
a manifest from which it can be rerun.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from arch_adapt.config import run_config
from arch_adapt.config.settings import (
    DEBUG,
    LOG_FILE,
    LOG_LEVEL,
    FILE_FORMATTER,
    CONSOLE_FORMATTER,
)
from arch_adapt.src import ees, gp, resource, sampler
from arch_adapt.src.errors import AdaptError, ConfigViolation, DataError, InvalidGene, UsageError
from arch_adapt.src.fitness import ResourceKind, evaluate
from arch_adapt.src.manifest import MANIFEST_NAME, RunManifest
from arch_adapt.src.oracle import generate_lut
from arch_adapt.src.space import Gene, flops, load_space, stage_flops, validate

POOL_HEADER = "# arch-adapt pool v1"
HISTORY_COLUMNS = ("generation", "best_fitness", "mean_fitness", "best_accuracy", "best_resource",
                   "feasible_fraction")
TRADEOFF_COLUMNS = ("thres", "feasible", "accuracy", "resource", "fitness", "gene")

# options that never enter a manifest's recorded command line
UNRECORDED_OPTIONS = {"--config": True, "--out": True, "--force": False}


def setup_logging():
    """
    Configure application-wide logging with both file and console outputs.
    The file handler always uses the detailed format; the console format depends on DEBUG.

    Returns:
        logging.Logger: Configured root logger
    """
    logger = logging.getLogger()
    logger.setLevel(LOG_LEVEL)

    # Clear any existing handlers
    logger.handlers.clear()

    file_handler = logging.FileHandler(LOG_FILE)
    file_handler.setFormatter(FILE_FORMATTER)
    logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(CONSOLE_FORMATTER)
    logger.addHandler(console_handler)

    logging.captureWarnings(True)
    return logger


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help="YAML run configuration")
    common.add_argument('--space', type=str, help="Built-in space name or schema file (default: chamnet-mobile)")
    common.add_argument('--seed', type=int, help="Random seed (default: 0)")
    common.add_argument('--threads', type=int, help="Worker threads (default: available cores)")
    common.add_argument(
        '--round-channels',
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Restrict channel counts to multiples of 8"
    )

    def outputs(sub):
        sub.add_argument('--out', required=True, help="Output directory")
        sub.add_argument('--force', action='store_true', help="Overwrite an existing run in --out")

    def predictors(sub):
        sub.add_argument('--acc-model', required=True, help="Accuracy predictor (model.json from build-acc)")
        sub.add_argument('--lut', help="Latency LUT file (latency constraints)")
        sub.add_argument('--energy-model', help="Energy predictor (model.json from build-energy)")
        sub.add_argument('--kind', choices=[k.value for k in ResourceKind], help="Constraint kind")
        sub.add_argument('--alpha', help="Penalty coefficient with unit, e.g. '10/ms'")
        sub.add_argument('--w', type=float, help="Penalty exponent")
        sub.add_argument('--penalty', choices=['ramp', 'step'], help="Penalty mode")
        sub.add_argument('--interpolate', action='store_true', help="Interpolate operators missing from the LUT")

    parser = argparse.ArgumentParser(
        prog='arch-adapt',
        description='Platform-aware neural architecture adaptation toolkit'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    pool = commands.add_parser('pool', parents=[common], help="Draw a QMC architecture pool")
    pool.add_argument('--k', type=int, default=2048, help="Pool size (default: 2048)")
    outputs(pool)

    for name, what in (('build-acc', "accuracy"), ('build-energy', "energy")):
        build = commands.add_parser(name, parents=[common], help=f"Build the {what} predictor")
        outputs(build)
        build.add_argument('--resume', action='store_true', help="Continue from observations.tsv in --out")
        build.add_argument('--oracle-log', help="Replay measurements from an observation log")
        build.add_argument('--oracle-command', help="External command printing the measured value of a gene")
        if name == 'build-energy':
            build.add_argument('--platform', help="Platform id stored with the model")

    lut = commands.add_parser('build-lut', parents=[common], help="Build an operator latency LUT")
    outputs(lut)
    lut.add_argument('--records', help="Ingest a measured LUT file instead of the synthetic device")
    lut.add_argument('--device', choices=['cpu_like', 'dsp_like'], help="Synthetic device profile")

    search = commands.add_parser('search', parents=[common], help="Run one constrained search")
    outputs(search)
    predictors(search)
    search.add_argument('--thres', help="Resource budget with unit, e.g. '20 ms'")

    sweep = commands.add_parser('sweep', parents=[common], help="Search across a list of budgets")
    outputs(sweep)
    predictors(sweep)
    sweep.add_argument('--thres-list', help="Comma-separated budgets, e.g. '4 ms,6 ms,10 ms'")

    evaluate_cmd = commands.add_parser('eval', parents=[common], help="Score one gene against the predictors")
    predictors(evaluate_cmd)
    evaluate_cmd.add_argument('--gene', required=True, help="Comma-separated gene, or 'default'")
    evaluate_cmd.add_argument('--thres', help="Resource budget with unit")

    trace = commands.add_parser('trace-energy', help="Per-inference energy of a recorded power trace")
    trace.add_argument('--trace', required=True, help="Power-trace file")

    rerun = commands.add_parser('rerun', help="Re-execute a command from its manifest")
    rerun.add_argument('--manifest', required=True, help="manifest.json or the directory holding it")
    rerun.add_argument('--out', help="Write to this directory instead of the manifest's own")

    return parser


def parse_args(argv=None):
    """
    Parse command line arguments.

    Returns:
        argparse.Namespace: Parsed command line arguments
    """
    return build_parser().parse_args(argv)


def recorded_argv(argv):
    """Command line without the options a manifest stores elsewhere."""
    kept, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        name = token.split("=", 1)[0]
        if name in UNRECORDED_OPTIONS:
            skip = UNRECORDED_OPTIONS[name] and "=" not in token
            continue
        kept.append(token)
    return kept


def prepare_out(path, force=False, resume=False) -> Path:
    out = Path(path)
    if (out / MANIFEST_NAME).exists() and not (force or resume):
        raise UsageError(f"{out} already holds a run; pass --force to overwrite it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_tsv(path, columns, rows, preamble=()):
    with open(path, "w", encoding="utf-8") as fh:
        for line in preamble:
            fh.write(f"{line}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(v if isinstance(v, str) else repr(v) for v in row) + "\n")
    return path


def _oracle_config(config, key, args):
    if getattr(args, 'oracle_log', None):
        return config.override(**{key: {"kind": "replay", "path": args.oracle_log}})
    if getattr(args, 'oracle_command', None):
        return config.override(**{key: {"kind": "command", "command": args.oracle_command}})
    return config


def _fitness_overrides(args) -> dict:
    overrides = {
        "kind": args.kind,
        "alpha": args.alpha,
        "w": args.w,
        "penalty": args.penalty,
        "thres": getattr(args, 'thres', None),
    }
    return {k: v for k, v in overrides.items() if v is not None}


def _load_predictors(args, config, space):
    logger = logging.getLogger(__name__)
    params = config.fitness_params(_fitness_overrides(args))
    acc = sampler.AccuracyPredictor.load(args.acc_model, space)
    if params.resource_kind == ResourceKind.LATENCY:
        if not args.lut:
            raise UsageError("a latency constraint needs --lut")
        res = resource.LatencyModel(resource.read_lut(args.lut), space, interpolate=args.interpolate)
    else:
        if not args.energy_model:
            raise UsageError("an energy constraint needs --energy-model")
        res = resource.EnergyModel.load(args.energy_model, space)
    logger.info(f"Loaded predictors for '{space.name}' ({params.resource_kind.value} constraint)")
    return acc, res, params


def cmd_pool(args, config, space, out):
    logger = logging.getLogger(__name__)
    genes = sampler.qmc_pool(space, args.k, config.seed)
    rows = [(str(i), str(flops(space, g)), str(g)) for i, g in enumerate(genes)]
    write_tsv(
        out / "pool.tsv", ("index", "flops", "gene"), rows,
        (POOL_HEADER, f"# space: {space.name} {space.digest}", f"# seed: {config.seed}"),
    )
    logger.info(f"Wrote {len(genes)} genes to {out / 'pool.tsv'}")
    return {}, ["pool.tsv"]


def _build(args, config, space, out, energy):
    logger = logging.getLogger(__name__)
    key = "energy_oracle" if energy else "oracle"
    config = _oracle_config(config, key, args)
    cfg = config.energy_sampler_config() if energy else config.sampler_config()
    if energy and cfg.exploit_count != 0:
        raise ConfigViolation(f"energy predictors use exploration only; exploit_count is {cfg.exploit_count}")
    oracle = config.energy_oracle_for(space) if energy else config.accuracy_oracle(space)

    log_path = out / "observations.tsv"
    prior = []
    if args.resume and log_path.exists():
        prior = sampler.read_observations(log_path, space)
        logger.info(f"Resuming from {len(prior)} recorded observation(s) in {log_path}")
    elif log_path.exists():
        log_path.unlink()
    log = sampler.ObservationLog(log_path, space)

    kwargs = dict(log=log, prior=prior, threads=config.worker_threads)
    if energy:
        platform = args.platform or (
            config.device_model().platform if config.energy_oracle.get("kind", "synthetic") == "synthetic"
            else "measured"
        )
        model, observations = resource.build_energy_predictor(space, oracle, cfg, platform, **kwargs)
    else:
        gp_model, observations = sampler.build_predictor(space, oracle, cfg, **kwargs)
        model = sampler.AccuracyPredictor(space, gp_model)
    model.save(out / "model.json", observations=len(observations), seed=cfg.seed)
    if len(observations) >= 4:
        X = space.normalize([o.gene for o in observations])
        scores = gp.compare_regressors(X, [o.value for o in observations], cfg.center)
        logger.info("Leave-one-out MSE by regressor: " + ", ".join(f"{k} {v:.3e}" for k, v in scores.items()))
    logger.info(
        f"Saved {'energy' if energy else 'accuracy'} predictor ({len(observations)} observations) "
        f"to {out / 'model.json'}"
    )
    inputs = {"oracle_log": args.oracle_log, "oracle_command": args.oracle_command}
    return inputs, ["model.json", "observations.tsv"]


def cmd_build_acc(args, config, space, out):
    return _build(args, config, space, out, energy=False)


def cmd_build_energy(args, config, space, out):
    return _build(args, config, space, out, energy=True)


def cmd_build_lut(args, config, space, out):
    logger = logging.getLogger(__name__)
    if args.records:
        lut = resource.read_lut(args.records)
    else:
        device_settings = dict(config.device)
        if args.device:
            device_settings["profile"] = args.device
        device = config.override(device=device_settings).device_model()
        lut = resource.lut_build(generate_lut(device, space), device.platform)
    resource.write_lut(lut, out / "lut.csv")
    logger.info(f"Wrote {lut.record_count} LUT records for '{lut.platform}' to {out / 'lut.csv'}")
    return {"records": args.records}, ["lut.csv"]


def _result_payload(space, result, params):
    return {
        "space": space.name,
        "space_digest": space.digest,
        "best_gene": str(result.best_gene),
        "fitness": result.best_fitness.to_dict(),
        "constraint": params.to_mapping(),
        "evaluations": result.evaluations,
        "generations": len(result.history),
    }


def _predictor_inputs(args):
    return {"acc_model": args.acc_model, "lut": args.lut, "energy_model": args.energy_model}


def cmd_search(args, config, space, out):
    logger = logging.getLogger(__name__)
    acc, res, params = _load_predictors(args, config, space)
    result = ees.search(space, acc, res, params, config.ees_config(), threads=config.worker_threads)
    payload = _result_payload(space, result, params)
    (out / "result.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_tsv(
        out / "history.tsv", HISTORY_COLUMNS,
        [[getattr(stats, column) for column in HISTORY_COLUMNS] for stats in result.history],
    )
    logger.info(f"Best gene {result.best_gene}: {json.dumps(result.best_fitness.to_dict())}")
    return _predictor_inputs(args), ["result.json", "history.tsv"]


def cmd_sweep(args, config, space, out):
    logger = logging.getLogger(__name__)
    acc, res, params = _load_predictors(args, config, space)
    if args.thres_list:
        config = config.override(sweep=tuple(t.strip() for t in args.thres_list.split(",") if t.strip()))
    thresholds = config.sweep_thresholds(params.resource_kind)
    unit = params.resource_kind.unit

    rows, winner = [], None
    for thres in thresholds:
        logger.info(f"Searching under {thres:g} {unit}")
        seeds = [winner] if winner is not None else []
        result = ees.search(space, acc, res, params.with_thres(thres), config.ees_config(),
                            seed_genes=seeds, threads=config.worker_threads)
        winner = result.best_gene
        best = result.best_fitness
        rows.append((f"{thres:g}", str(best.feasible).lower(), best.accuracy, best.resource, best.fitness,
                     str(result.best_gene)))
    write_tsv(out / "tradeoff.tsv", TRADEOFF_COLUMNS, rows,
              (f"# space: {space.name} {space.digest}", f"# constraint: {params.resource_kind.value} ({unit})"))
    logger.info(f"Wrote {len(rows)} trade-off rows to {out / 'tradeoff.tsv'}")
    return _predictor_inputs(args), ["tradeoff.tsv"]


def stage_rows(space, gene, latency=None):
    """Per-stage FLOPs, plus latency and MACs per microsecond when a LUT is available."""
    rows = []
    latencies = latency.stage_us(gene) if latency is not None else None
    for index, (stage, stage_macs) in enumerate(zip(space.stages, stage_flops(space, gene))):
        row = {"stage": index, "op": stage.op_kind.value, "flops": stage_macs}
        if latencies is not None:
            row["latency_us"] = latencies[index]
            row["macs_per_us"] = stage_macs / latencies[index] if latencies[index] else None
        rows.append(row)
    return rows


def cmd_eval(args, config, space):
    acc, res, params = _load_predictors(args, config, space)
    gene = space.default_gene() if args.gene == "default" else Gene.parse(args.gene)
    if not validate(space, gene):
        raise InvalidGene(f"gene {gene} is not valid for space '{space.name}'")
    result = evaluate(gene, acc, res, params)
    prediction = acc.predict(gene)
    if isinstance(res, resource.LatencyModel):
        latency = res
    elif args.lut:
        latency = resource.LatencyModel(resource.read_lut(args.lut), space, interpolate=args.interpolate)
    else:
        latency = None
    payload = {
        "gene": str(gene),
        "flops": flops(space, gene),
        "accuracy": result.accuracy,
        "accuracy_std": prediction.std,
        "resource": result.resource,
        "unit": params.resource_kind.unit,
        "thres": params.thres,
        "fitness": result.fitness,
        "feasible": result.feasible,
        "stages": stage_rows(space, gene, latency),
    }
    print(json.dumps(payload, sort_keys=True))


def cmd_trace_energy(args):
    trace = resource.read_trace(args.trace)
    print(json.dumps({"energy_mj": resource.trace_to_energy(trace), "runs": trace.run_count}))


COMMANDS = {
    'pool': cmd_pool,
    'build-acc': cmd_build_acc,
    'build-energy': cmd_build_energy,
    'build-lut': cmd_build_lut,
    'search': cmd_search,
    'sweep': cmd_sweep,
}


def run(argv, config_override=None):
    """
    Execute one command.

    Args:
        argv (list): Command line without the program name
        config_override (dict): Resolved configuration replacing --config (used by rerun)
    """
    logger = logging.getLogger(__name__)
    args = parse_args(argv)

    if args.command == 'trace-energy':
        cmd_trace_energy(args)
        return 0
    if args.command == 'rerun':
        manifest = RunManifest.read(args.manifest)
        manifest_dir = Path(args.manifest) if Path(args.manifest).is_dir() else Path(args.manifest).parent
        out = args.out or str(manifest_dir)
        logger.info(f"Re-running '{manifest.command}' from {args.manifest} into {out}")
        return run([*manifest.argv, "--out", out, "--force"], config_override=manifest.config)

    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be positive")
    if args.command == 'pool' and args.k < 1:
        raise UsageError("--k must be at least 1")

    base = run_config.from_mapping(config_override) if config_override is not None \
        else run_config.load_run_config(args.config)
    config = base.override(space=args.space, seed=args.seed, threads=args.threads,
                           round_channels=args.round_channels)
    space = load_space(config.space, config.round_channels)

    if args.command == 'eval':
        cmd_eval(args, config, space)
        return 0

    out = prepare_out(args.out, args.force, getattr(args, 'resume', False))
    logger.info(f"Running {args.command} on space '{space.name}' (seed {config.seed}) into {out}")
    inputs, outputs = COMMANDS[args.command](args, config, space, out)
    RunManifest.create(
        command=args.command,
        argv=recorded_argv(argv),
        config=config.to_mapping(),
        seed=config.seed,
        inputs=inputs,
        outputs=outputs,
    ).write(out)
    return 0


def main(argv=None):
    """
    Main execution flow:
    1. Set up logging
    2. Parse arguments and resolve the run configuration
    3. Run the command and write its manifest
    4. Map toolkit errors onto exit codes (2 usage, 3 data, 4 oracle)
    """
    logger = setup_logging()
    argv = sys.argv[1:] if argv is None else list(argv)

    try:
        return run(argv)
    except AdaptError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if DEBUG:
            logger.exception("Traceback")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
