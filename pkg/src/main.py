"""Command-line entry point: generate, fit, infer, impute, bench and check"""
import argparse
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import structlog
from pydantic import ValidationError

from .config.settings import RunConfig, Settings
from .learning.svae import SVAE, range_mask
from .learning.trainer import Trainer
from .models.chain import BPMethod
from .tools import bench, checkpoint, config_file, invariants, rng, sequence_file, synthetic
from .tools.sequence_file import SequenceData
from .utils.exceptions import ConfigError, SvaeException
from .utils.logging import setup_logging
from .utils.metrics import metrics

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

DEFAULT_CHECKPOINT = "model.svae"
DEFAULT_BENCH = "bench.csv"


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting"""

    def error(self, message: str):
        raise ConfigError(message)


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _run_flags() -> argparse.ArgumentParser:
    """Flags shared by every command; ``dest`` is the dotted RunConfig key"""
    flags = _Parser(add_help=False)
    skip = argparse.SUPPRESS
    flags.add_argument("--config", default=skip, help="run configuration file")
    flags.add_argument("--seed", dest="seed", type=int, default=skip)
    flags.add_argument("--threads", dest="threads", type=int, default=skip)
    flags.add_argument("--data", dest="data", default=skip)
    flags.add_argument("--output", dest="output", default=skip)
    flags.add_argument("--checkpoint", dest="checkpoint", default=skip)
    flags.add_argument("--metrics", dest="metrics", default=skip)

    model = flags.add_argument_group("model")
    model.add_argument("--model", dest="model.kind", default=skip)
    model.add_argument("--obs-dim", dest="model.obs_dim", type=int, default=skip)
    model.add_argument("--latent-dim", dest="model.latent_dim", type=int, default=skip)
    model.add_argument("--states", dest="model.states", type=int, default=skip)
    model.add_argument("--hidden", dest="model.hidden", type=_int_list, default=skip)
    model.add_argument("--activation", dest="model.activation", default=skip)
    model.add_argument("--layer-norm", dest="model.layer_norm", action=argparse.BooleanOptionalAction,
                       default=skip)
    model.add_argument("--likelihood", dest="model.likelihood", default=skip)
    model.add_argument("--n-mc", dest="model.n_mc", type=int, default=skip)
    model.add_argument("--bijector", dest="model.bijector", default=skip)
    model.add_argument("--prior-scale", dest="model.prior_scale", type=float, default=skip)

    train = flags.add_argument_group("training")
    train.add_argument("--steps", dest="train.steps", type=int, default=skip)
    train.add_argument("--batch-size", dest="train.batch_size", type=int, default=skip)
    train.add_argument("--adam-lr", dest="train.adam_lr", type=float, default=skip)
    train.add_argument("--nat-lr", dest="train.nat_lr", type=float, default=skip)
    train.add_argument("--grad-mode", dest="train.grad_mode", default=skip)
    train.add_argument("--richardson-iters", dest="train.richardson_iters", type=int, default=skip)
    train.add_argument("--residual-tol", dest="train.residual_tol", type=float, default=skip)
    train.add_argument("--bp", dest="train.bp", default=skip)
    train.add_argument("--max-sweeps", dest="train.max_sweeps", type=int, default=skip)
    train.add_argument("--sweep-tol", dest="train.sweep_tol", type=float, default=skip)
    train.add_argument("--biased-natgrad", dest="train.biased_natgrad", action="store_const", const=True,
                       default=skip)
    train.add_argument("--global-optimizer", dest="train.global_optimizer", default=skip)
    train.add_argument("--global-adam-lr", dest="train.global_adam_lr", type=float, default=skip)
    train.add_argument("--log-every", dest="train.log_every", type=int, default=skip)

    synth = flags.add_argument_group("synthetic data")
    synth.add_argument("--T", dest="synth.T", type=int, default=skip)
    synth.add_argument("--n-sequences", dest="synth.n_sequences", type=int, default=skip)
    synth.add_argument("--grid-size", dest="synth.grid_size", type=int, default=skip)
    synth.add_argument("--switch-period", dest="synth.switch_period", type=int, default=skip)
    synth.add_argument("--noise", dest="synth.noise", type=float, default=skip)
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svae", description="Structured VI and SVAE training for LDS/SLDS models")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    shared = [_run_flags()]

    commands.add_parser("generate", parents=shared, help="write synthetic Laplace sequences")
    commands.add_parser("fit", parents=shared, help="train an SVAE on a sequence file")
    commands.add_parser("infer", parents=shared, help="posterior latent means per sequence")

    impute = commands.add_parser("impute", parents=shared, help="reconstruct a masked range")
    impute.add_argument("--mask", dest="mask", default=argparse.SUPPRESS, help="fractional range a:b")
    impute.add_argument("--samples", dest="cli.samples", type=int, default=1)

    bench_cmd = commands.add_parser("bench", parents=shared, help="time gradient steps or inference")
    bench_cmd.add_argument("--inference-only", dest="cli.inference_only", action="store_true")
    bench_cmd.add_argument("--repeats", dest="cli.repeats", type=int, default=3)

    check = commands.add_parser("check", parents=shared, help="run invariant suites")
    check.add_argument("--suite", dest="cli.suite", default="all",
                       choices=[*invariants.SUITES, "all"])
    return parser


def _split_args(namespace: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    values = dict(vars(namespace))
    command = values.pop("command")
    config_path = values.pop("config", None)
    cli = {k.split(".", 1)[1]: values.pop(k) for k in list(values) if k.startswith("cli.")}
    return {"command": command, "config": config_path, "cli": cli, "overrides": values}


def load_run_config(argv: Optional[List[str]] = None,
                    env: Optional[Settings] = None) -> Dict[str, Any]:
    """Parsed CLI arguments merged over the config file, with the thread count resolved"""
    parts = _split_args(build_parser().parse_args(argv))
    file_values = config_file.read(parts["config"]) if parts["config"] else {}
    config = config_file.build_run_config(parts["command"], file_values, parts["overrides"])
    env = env or Settings()
    env.validate()
    config.threads = env.resolve_threads(config.threads)
    return {"config": config, "cli": parts["cli"], "settings": env}


def _write_sequences(path: str, data: SequenceData):
    if path.endswith(".csv"):
        sequence_file.export_csv(path, data)
    else:
        sequence_file.write(path, data)


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _load_model(config: RunConfig):
    params, stored = checkpoint.load(_require(config.checkpoint, "--checkpoint"))
    model_config = stored if stored is not None else config.model
    return SVAE(model_config), params


def cmd_generate(config: RunConfig, cli: Dict[str, Any]) -> int:
    data = synthetic.gen_laplace_sequences(config.synth, workers=config.threads)
    _write_sequences(_require(config.output, "--output"), data)
    return EXIT_OK


def cmd_fit(config: RunConfig, cli: Dict[str, Any]) -> int:
    data = sequence_file.read(_require(config.data, "--data"))
    model_config = config.model
    if "obs_dim" not in model_config.model_fields_set:
        model_config = model_config.model_copy(update={"obs_dim": data.Dx})
    elif model_config.obs_dim != data.Dx:
        raise ConfigError(f"model.obs_dim={model_config.obs_dim} but the data has {data.Dx} features")
    trainer = Trainer(SVAE(model_config), config.train, seed=config.seed, threads=config.threads,
                      checkpoint_dir=config.output, metrics_path=config.metrics)
    run = trainer.fit(data.x)
    default = os.path.join(cli.get("output_dir", "."), DEFAULT_CHECKPOINT)
    checkpoint.save(config.checkpoint or default, run.params, model_config)
    return EXIT_OK


def _step_labels(q_k: Optional[np.ndarray], T: int) -> Optional[np.ndarray]:
    """Most likely state per step, step t taking the transition into it (step 0 the first)"""
    if q_k is None or T < 2:
        return None
    states = np.argmax(np.asarray(q_k), axis=1)
    return np.concatenate([states[:1], states]).astype(np.uint8)


def cmd_infer(config: RunConfig, cli: Dict[str, Any]) -> int:
    model, params = _load_model(config)
    data = sequence_file.read(_require(config.data, "--data"))
    bp = BPMethod.parse(config.train.bp)
    means, labels = [], []
    for n in range(data.N):
        state = model.infer(params, data.x[n], bp=bp, parallelism=config.threads,
                            max_iters=config.train.max_sweeps, tol=config.train.sweep_tol)
        means.append(np.asarray(state.mu_z.Ez))
        labels.append(_step_labels(state.q_k, data.T))
        logger.info("sequence_inferred", seq=n, sweeps=state.iters, surrogate=state.surrogate)
    has_labels = all(label is not None for label in labels)
    result = SequenceData(x=np.stack(means), labels=np.stack(labels) if has_labels else None)
    _write_sequences(_require(config.output, "--output"), result)
    return EXIT_OK


def cmd_impute(config: RunConfig, cli: Dict[str, Any]) -> int:
    model, params = _load_model(config)
    data = sequence_file.read(_require(config.data, "--data"))
    span = config.mask_range()
    if span is None:
        raise ConfigError("--mask is required for impute")
    mask = range_mask(data.T, *span)
    logger.info("mask_applied", mask=config.mask, T=data.T, steps=[int(t) for t in np.flatnonzero(mask)])
    bp = BPMethod.parse(config.train.bp)
    recon = []
    for n in range(data.N):
        result = model.impute(params, data.x[n], mask, rng.stream(config.seed, "impute", n),
                              n_samples=cli.get("samples", 1), bp=bp, parallelism=config.threads,
                              max_iters=config.train.max_sweeps, tol=config.train.sweep_tol)
        recon.append(result.reconstruction)
        logger.info("sequence_imputed", seq=n, **result.to_dict())
    if config.output:
        _write_sequences(config.output, SequenceData(x=np.stack(recon)))
    return EXIT_OK


def cmd_bench(config: RunConfig, cli: Dict[str, Any]) -> int:
    row = bench.run_bench(config.model, config.train, T=config.synth.T, repeats=cli.get("repeats", 3),
                          threads=config.threads, seed=config.seed,
                          inference_only=cli.get("inference_only", False))
    bench.append_rows(config.output or os.path.join(cli.get("output_dir", "."), DEFAULT_BENCH), [row])
    print(",".join(str(v) for v in row.__dict__.values()))
    return EXIT_OK


def cmd_check(config: RunConfig, cli: Dict[str, Any]) -> int:
    results = invariants.run_suite(cli.get("suite", "all"), seed=config.seed)
    if config.output:
        invariants.write_csv(config.output, results)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.suite}.{r.name}: max_error={r.max_error:.3e} tolerance={r.tolerance:.1e}",
              file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "infer": cmd_infer,
    "impute": cmd_impute,
    "bench": cmd_bench,
    "check": cmd_check,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code"""
    try:
        loaded = load_run_config(argv)
    except (ConfigError, ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    config: RunConfig = loaded["config"]
    env: Settings = loaded["settings"]
    loaded["cli"].setdefault("output_dir", env.OUTPUT_DIR)
    setup_logging(env.LOG_LEVEL, env.LOG_FILE, env.LOG_JSON)
    metrics.reset()
    metrics.start_timer(config.command)
    logger.info("command_started", command=config.command, seed=config.seed, threads=config.threads)

    try:
        code = COMMANDS[config.command](config, loaded["cli"])
    except (ConfigError, ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SvaeException as e:
        logger.error("command_failed", command=config.command, error=str(e), exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL

    duration = metrics.stop_timer(config.command)
    summary = metrics.get_summary()
    logger.info("command_completed", command=config.command, duration_s=round(duration, 3),
                **summary["counters"])
    logger.debug("command_metrics", peaks=summary["peaks"], aggregates=summary["aggregates"])
    return code


if __name__ == "__main__":
    sys.exit(main())
