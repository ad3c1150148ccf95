"""
Command Line Interface
Subcommands for data generation, training, scoring, sanitizing and evaluation
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from config.settings import echo_config, get_config, load_run_config
from concept_guard.concept_bank import SOURCE_SUFFIX, bank_load, bank_save, build_bank
from concept_guard.errors import ConceptGuardError, ConfigError, DegenerateDatasetError, PipelineError
from concept_guard.harness import (
    ProbeTarget, eval_probe_batch, eval_sweep, prompt_seed, run_pipeline, write_probe_summary
)
from concept_guard.localization import export_mask, export_sensitivity
from concept_guard.numerics import Rng, init_mlp, load_mlp, save_mlp
from concept_guard.pipeline import ConceptGuard, load_classifier, save_classifier
from concept_guard.schemas import DecisionRecord, RunConfig, ScoreRecord
from concept_guard.toy_world import ToyBackend, toy_dataset
from concept_guard.trainer import classifier_features, fit_classifier, fit_projection
from concept_guard.utils.datasets import read_dataset, write_dataset
from concept_guard.utils.gradcheck import grad_check
from concept_guard.utils.netpbm import write_netpbm
from concept_guard.utils.reports import write_json, write_json_lines, write_training_log
from storage.files import write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

PROG = 'concept-guard'

# artifact file names inside the output directory, by config key
DEFAULT_NAMES = {
    'dataset': 'dataset.tsv',
    'concepts': 'concepts.tsv',
    'projection': 'projection.mlp',
    'bank': 'bank.tsv',
    'classifier': 'classifier.mlp',
}


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class CommandResult:
    """Artifacts a subcommand read and wrote, by role, plus its exit code."""
    inputs: Dict[str, Path] = field(default_factory=dict)
    outputs: Dict[str, Path] = field(default_factory=dict)
    exit_code: int = EXIT_OK


# ============================================
# ARTIFACT HELPERS
# ============================================

def _out_dir(args: argparse.Namespace, cfg: RunConfig) -> Path:
    return Path(getattr(args, 'out_dir', None) or cfg.out_dir or get_config().OUTPUT_DIR)


def _require(value: Optional[str], key: str, out_dir: Path) -> Path:
    """
    Resolve an input artifact: the configured path, else the file of the
    same role that an earlier command wrote into the output directory.
    """
    if value:
        return Path(value)
    fallback = out_dir / DEFAULT_NAMES[key]
    if fallback.is_file():
        return fallback
    raise ConfigError(
        f"'{key}' is required for this command (set it with --set {key}=<path> "
        f"or run from an output directory holding {DEFAULT_NAMES[key]})"
    )


def _dataset_path(args: argparse.Namespace, cfg: RunConfig) -> Path:
    if getattr(args, 'input', None):
        return Path(args.input)
    return _require(cfg.dataset, 'dataset', _out_dir(args, cfg))


def _load_records(args: argparse.Namespace, cfg: RunConfig, result: CommandResult):
    path = _dataset_path(args, cfg)
    result.inputs['dataset'] = path
    concepts = Path(cfg.concepts) if cfg.concepts else None
    if concepts is not None:
        result.inputs['concepts'] = concepts
    return read_dataset(path, concepts)


def _load_guard(cfg: RunConfig, result: CommandResult, out_dir: Path) -> ConceptGuard:
    projection = _require(cfg.projection, 'projection', out_dir)
    classifier = _require(cfg.classifier, 'classifier', out_dir)
    bank_path = _require(cfg.bank, 'bank', out_dir)
    result.inputs.update({'projection': projection, 'classifier': classifier, 'bank': bank_path})
    source = Path(str(bank_path) + SOURCE_SUFFIX)
    if source.exists():
        result.inputs['bank_sources'] = source
    return ConceptGuard(load_mlp(projection), load_classifier(classifier), bank_load(bank_path))


def _artifact_path(value: Optional[str], out_dir: Path, default_name: str) -> Path:
    return Path(value) if value else out_dir / default_name


# ============================================
# SUBCOMMANDS
# ============================================

def cmd_gen_toy_data(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Write a labelled toy dataset and its concept sidecar."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    records = toy_dataset(cfg.toy_spec(), cfg.n_per_class, cfg.noise_level, cfg.seed)
    dataset = _artifact_path(cfg.dataset, out_dir, DEFAULT_NAMES['dataset'])
    concepts = _artifact_path(cfg.concepts, out_dir, DEFAULT_NAMES['concepts'])
    write_dataset(records, dataset, concepts)
    result.outputs.update({'dataset': dataset, 'concepts': concepts})
    print(f"Wrote {len(records)} prompts to {dataset}")
    return result


def cmd_train_proj(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Train the projection network g_theta."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    records = _load_records(args, cfg, result)
    if not records:
        raise DegenerateDatasetError("dataset is empty")
    dims = cfg.projection_dims(records[0].raw_embedding.size)
    initial = init_mlp(dims, Rng(cfg.seed).substream('init', 'projection'), cfg.activation)
    run = fit_projection(records, initial, cfg.projection_train_config())

    checkpoint = _artifact_path(cfg.projection, out_dir, DEFAULT_NAMES['projection'])
    log_path = out_dir / 'projection_log.csv'
    save_mlp(run.params, checkpoint)
    write_training_log(run.history, log_path)
    result.outputs.update({'projection': checkpoint, 'training_log': log_path})
    if run.history:
        print(f"Projection trained: final mean loss {run.history[-1].mean_loss:.6f}")
    return result


def cmd_build_bank(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Project the training set once into a concept bank."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    records = _load_records(args, cfg, result)
    projection = _require(cfg.projection, 'projection', out_dir)
    result.inputs['projection'] = projection
    bank = build_bank(records, load_mlp(projection))

    bank_path = _artifact_path(cfg.bank, out_dir, DEFAULT_NAMES['bank'])
    bank_save(bank, bank_path)
    result.outputs['bank'] = bank_path
    if bank.has_sources:
        result.outputs['bank_sources'] = Path(str(bank_path) + SOURCE_SUFFIX)
    print(f"Bank written: {bank_path} ({len(bank)} entries)")
    return result


def cmd_train_cls(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Train the safety classifier q_psi on retrieval distance features."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    records = _load_records(args, cfg, result)
    projection = _require(cfg.projection, 'projection', out_dir)
    bank_path = _require(cfg.bank, 'bank', out_dir)
    result.inputs.update({'projection': projection, 'bank': bank_path})
    g_theta = load_mlp(projection)
    bank = bank_load(bank_path)

    features = classifier_features(records, g_theta, bank, cfg.k, cfg.aggregator, cfg.gamma)
    initial = init_mlp(cfg.classifier_dims(), Rng(cfg.seed).substream('init', 'classifier'),
                       cfg.cls_activation)
    run = fit_classifier(features, [int(r.label) for r in records], initial, cfg.classifier_train_config())

    checkpoint = _artifact_path(cfg.classifier, out_dir, DEFAULT_NAMES['classifier'])
    log_path = out_dir / 'classifier_log.csv'
    save_classifier(run.params, checkpoint)
    write_training_log(run.history, log_path)
    result.outputs.update({'classifier': checkpoint, 'training_log': log_path})
    if run.history:
        print(f"Classifier trained: final mean loss {run.history[-1].mean_loss:.6f}")
    return result


def cmd_score(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Score every prompt and write one JSON line per prompt."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    records = _load_records(args, cfg, result)
    guard = _load_guard(cfg, result, out_dir)
    pipeline_cfg = cfg.pipeline_config()

    rows = [ScoreRecord.from_decision(r.prompt_id, guard.score(r.raw_embedding, pipeline_cfg))
            for r in records]
    scores = out_dir / 'scores.jsonl'
    write_json_lines(rows, scores)
    result.outputs['scores'] = scores
    flagged = sum(row.route == 'unsafe_path' for row in rows)
    print(f"Scored {len(rows)} prompts: {flagged} flagged")
    return result


def _image_name(prompt_id: str, channels: int) -> str:
    return f"{prompt_id}.{'ppm' if channels == 3 else 'pgm'}"


def cmd_sanitize(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Run the full pipeline and write an image plus a decision JSON per prompt."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    records = _load_records(args, cfg, result)
    guard = _load_guard(cfg, result, out_dir)
    backend = ToyBackend(cfg.toy_spec())
    settings = cfg.pipeline_settings()

    decisions: List[DecisionRecord] = []
    for index, record in enumerate(records):
        output = run_pipeline(record.raw_embedding, guard, backend, settings,
                              prompt_seed(cfg.seed, index), record.prompt_id)
        image_name = _image_name(record.prompt_id, output.image.shape[2])
        write_netpbm(out_dir / image_name, output.image)
        result.outputs[f"image:{record.prompt_id}"] = out_dir / image_name

        extra = {}
        found = output.localization
        if found is not None:
            mask_name = f"{record.prompt_id}.mask.pgm"
            sens_name = f"{record.prompt_id}.sensitivity.pgm"
            export_mask(found.pixel_mask, out_dir / mask_name)
            export_sensitivity(found.sensitivity, out_dir / sens_name,
                               out_dir / f"{record.prompt_id}.sensitivity.csv")
            result.outputs[f"mask:{record.prompt_id}"] = out_dir / mask_name
            extra = {
                'mask': mask_name,
                'sensitivity': sens_name,
                't_star': found.t_star,
                'masked_pixels': int(found.pixel_mask.sum()),
            }

        decision = output.decision
        base = ScoreRecord.from_decision(record.prompt_id, decision)
        row = DecisionRecord(
            **base.model_dump(),
            logit=decision.logit,
            neighbor_ids=list(decision.neighbor_ids),
            image=image_name,
            **extra,
        )
        write_json(row, out_dir / f"{record.prompt_id}.json")
        decisions.append(row)

    summary = out_dir / 'decisions.jsonl'
    write_json_lines(decisions, summary)
    result.outputs['decisions'] = summary
    flagged = sum(d.mask is not None for d in decisions)
    print(f"Sanitized {len(decisions)} prompts: {flagged} redacted")
    return result


def cmd_eval_sweep(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Sweep tau_safe or K and write the flag/bypass report."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    records = _load_records(args, cfg, result)
    guard = _load_guard(cfg, result, out_dir)
    report = eval_sweep(records, cfg.parameter, cfg.values, guard, ToyBackend(cfg.toy_spec()),
                        cfg.pipeline_settings(), cfg.seed)
    path = out_dir / 'sweep.csv'
    report.write_csv(path)
    result.outputs['sweep'] = path
    print(report.to_frame().to_string(index=False))
    return result


def cmd_probe_sim(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Simulate the probing attacker against one or both defenses."""
    result = CommandResult()
    out_dir = _out_dir(args, cfg)
    targets = [cfg.probe_target] if cfg.probe_target is not None else list(ProbeTarget)
    guard = _load_guard(cfg, result, out_dir) if ProbeTarget.CONCEPT_GUARD in targets else None
    summaries = eval_probe_batch(
        cfg.probe_runs, cfg.probe_config(targets[0]), guard, ToyBackend(cfg.toy_spec()),
        cfg.pipeline_settings(), targets,
    )
    path = out_dir / 'probe.csv'
    write_probe_summary(summaries, path)
    result.outputs['probe'] = path
    for s in summaries:
        print(f"{s.target}: {s.successes}/{s.runs} successes, median queries {s.median_queries}, "
              f"{s.bits_per_query:g} decision bits per query")
    return result


def cmd_grad_check(args: argparse.Namespace, cfg: RunConfig) -> CommandResult:
    """Finite-difference check of every analytic gradient; fails above 1e-4."""
    report = grad_check(cfg.seed, cfg.trials)
    for name, error in report.summary().items():
        print(f"{name}: max relative error {error:.3e}")
    print(f"max relative error {report.max_error:.3e}")
    return CommandResult(exit_code=EXIT_OK if report.passed else EXIT_DATA)


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], CommandResult]] = {
    'gen-toy-data': cmd_gen_toy_data,
    'build-bank': cmd_build_bank,
    'train-proj': cmd_train_proj,
    'train-cls': cmd_train_cls,
    'score': cmd_score,
    'sanitize': cmd_sanitize,
    'eval-sweep': cmd_eval_sweep,
    'probe-sim': cmd_probe_sim,
    'grad-check': cmd_grad_check,
}

# subcommands that read a prompt dataset accept --in
_DATASET_COMMANDS = {'build-bank', 'train-proj', 'train-cls', 'score', 'sanitize', 'eval-sweep'}


# ============================================
# DISPATCH
# ============================================

def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {text}")
    return value


def build_parser() -> CliArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='flat key=value configuration file')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override one configuration key (repeatable)')
    common.add_argument('--seed', type=_seed, help='root seed for all randomness')
    common.add_argument('--out-dir', dest='out_dir', help='directory receiving outputs and the manifest')

    parser = CliArgumentParser(prog=PROG, description='Concept-retrieval safety guard for image generation')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', parser_class=CliArgumentParser)
    sub.required = True
    for name, handler in COMMANDS.items():
        cmd = sub.add_parser(name, parents=[common], help=(handler.__doc__ or '').strip())
        if name in _DATASET_COMMANDS:
            cmd.add_argument('--in', dest='input', help='prompt dataset TSV (overrides dataset)')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, resolve configuration and run one subcommand.

    Returns:
        0 on success, 1 on usage or configuration errors, 2 on data errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE

    try:
        cfg = load_run_config(args.config, args.set, args.seed)
    except ConfigError as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    echoed = echo_config(cfg)
    logger.info(f"Running {args.command}")
    try:
        result = COMMANDS[args.command](args, cfg)
        write_manifest(
            _out_dir(args, cfg), args.command, echoed,
            {'seed': cfg.seed, 'world_seed': cfg.world_seed},
            result.inputs, result.outputs,
        )
    except ConfigError as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as e:
        logger.error(f"Pipeline failed: {e}")
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return EXIT_DATA
    except (ConceptGuardError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"{PROG}: {e}", file=sys.stderr)
        return EXIT_DATA
    return result.exit_code
