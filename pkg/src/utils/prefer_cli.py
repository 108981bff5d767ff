#!/usr/bin/env python3
"""
PREFER Command Line
Train, resume, predict, evaluate, run ablations and export reflections

Usage:
    python3 -m src.utils.prefer_cli train --dataset data/toy_entailment.jsonl \\
        --seed-prompt data/seed_prompt.json --checkpoint-dir runs/toy --k 10 --iters 3 \\
        --provider scripted:data/transcripts/toy_transcript.jsonl
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from src.core.llm_provider import build_provider
from src.core.prefer_booster import PreferBooster
from src.core.prefer_data_logger import PreferDataLogger
from src.core.prefer_templates import PromptTemplates
from src.core.prefer_types import ContractError, PreferError, Prompt, load_examples
from src.ml.prefer_evaluation import (
    AblationReport,
    accuracy,
    f1_score,
    kshot_sample,
    run_ablation,
    write_report,
    write_summary_report,
)
from src.ml.prefer_inference import predict_batch
from src.utils.prefer_checkpoint import (
    PROGRESS_FILE,
    load_checkpoint,
    reflection_records,
)
from src.utils.prefer_config import MODES, PreferConfig, from_mapping, load_config
from src.utils.prefer_logging import setup_logging

logger = logging.getLogger('prefer.cli')

# argparse dest -> config key for flags that override the config file
OVERRIDE_FLAGS = {
    'k': 'k',
    'iters': 'iterations',
    'tau': 'tau',
    'seed': 'seed',
    'm': 'm',
    'num_feedbacks': 'num_feedbacks',
    'labels': 'labels',
    'vote_n': 'vote_n',
    'n_jobs': 'n_jobs',
    'task_description': 'task_description',
    'inference_mode': 'inference_mode',
}


def load_seed_prompt(path) -> Prompt:
    """Seed prompt from a .json Prompt record or a plain-text instruction."""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ContractError(f"cannot read seed prompt {path}: {e}") from e
    if path.suffix == '.json':
        try:
            return Prompt.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError) as e:
            raise ContractError(f"{path}: bad seed prompt record ({e})") from e
    return Prompt(id='p0', instruction=text.strip(), output_format='')


def _overrides(args) -> Dict:
    values = {}
    for dest, key in OVERRIDE_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[key] = value
    return values


def _config(args, base: Optional[PreferConfig] = None) -> PreferConfig:
    """CLI flags over the config file over `base` (or the built-in defaults)."""
    if args.config:
        config = load_config(args.config)
    elif base is not None:
        config = base
    else:
        config = load_config()
    return config.merged(_overrides(args))


def _templates(config: PreferConfig) -> PromptTemplates:
    return PromptTemplates.load(config.template_dir, config.solving_template, config.task_description)


def cmd_train(args) -> int:
    config = _config(args)
    setup_logging(config)
    examples = load_examples(args.dataset, config.label_space)
    dataset = kshot_sample(examples, config.k, config.seed)
    seed_prompt = load_seed_prompt(args.seed_prompt)
    provider = build_provider(args.provider, config)
    try:
        booster = PreferBooster(
            provider, config, _templates(config),
            data_logger=PreferDataLogger(str(Path(args.checkpoint_dir) / PROGRESS_FILE)),
        )
        ensemble = booster.train(seed_prompt, dataset, args.checkpoint_dir, dataset_path=args.dataset)
    finally:
        provider.close()
    print(f"Trained {len(ensemble)} learners; checkpoint in {args.checkpoint_dir}")
    return 0


def cmd_resume(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint_dir)
    config = _config(args, base=from_mapping(checkpoint.config))
    setup_logging(config)
    provider = build_provider(args.provider, config)
    try:
        booster = PreferBooster(provider, config, _templates(config))
        ensemble = booster.resume(args.checkpoint_dir)
    finally:
        provider.close()
    print(f"Resumed to {len(ensemble)} learners; checkpoint in {args.checkpoint_dir}")
    return 0


def _trained(args):
    checkpoint = load_checkpoint(args.checkpoint_dir)
    if not len(checkpoint.ensemble):
        raise ContractError("ensemble empty")
    config = _config(args, base=from_mapping(checkpoint.config))
    return checkpoint, config


def cmd_predict(args) -> int:
    checkpoint, config = _trained(args)
    setup_logging(config)
    examples = load_examples(args.input)
    provider = build_provider(args.provider, config)
    try:
        results = predict_batch(
            checkpoint.ensemble, examples, provider, args.output,
            mode=config.inference_mode, tau=args.tau, templates=_templates(config), n_jobs=config.n_jobs,
        )
    finally:
        provider.close()
    print(f"Predicted {len(results)} examples -> {args.output}")
    return 0


def cmd_eval(args) -> int:
    checkpoint, config = _trained(args)
    setup_logging(config)
    examples = load_examples(args.input, config.label_space)
    provider = build_provider(args.provider, config)
    try:
        results = predict_batch(
            checkpoint.ensemble, examples, provider, args.predictions,
            mode=config.inference_mode, tau=args.tau, templates=_templates(config), n_jobs=config.n_jobs,
        )
    finally:
        provider.close()
    predictions = [result.label for result in results]
    golds = [example.gold for example in examples]
    averaging = config.metric_averaging()
    metrics = {
        'f1': f1_score(predictions, golds, config.label_space, averaging, config.positive()),
        'accuracy': accuracy(predictions, golds),
        'averaging': averaging,
        'examples': len(examples),
        'abstained': sum(1 for label in predictions if label is None),
        'learners': len(checkpoint.ensemble),
    }
    text = json.dumps(metrics, sort_keys=True, indent=2)
    if args.metrics_out:
        Path(args.metrics_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.metrics_out).write_text(text + '\n', encoding='utf-8')
    print(text)
    return 0


def cmd_ablate(args) -> int:
    config = _config(args)
    setup_logging(config)
    examples = load_examples(args.dataset, config.label_space)
    dataset = kshot_sample(examples, config.k, config.seed)
    eval_examples = load_examples(args.eval_dataset, config.label_space) if args.eval_dataset else None
    seed_prompt = load_seed_prompt(args.seed_prompt)
    modes = list(MODES) if 'all' in args.mode else args.mode

    reports: List[AblationReport] = []
    for mode in modes:
        # separate provider per mode so each keeps its own call counter
        provider = build_provider(args.provider, config)
        checkpoint_dir = Path(args.checkpoint_dir) / mode if args.checkpoint_dir else None
        try:
            reports.append(run_ablation(
                mode, seed_prompt, dataset, provider, config, eval_examples, _templates(config),
                checkpoint_dir=checkpoint_dir,
            ))
        finally:
            provider.close()

    write_report(args.report, reports)
    summary_path = args.summary or str(Path(args.report).with_suffix('.txt'))
    print(write_summary_report(summary_path, reports))
    return 0


def cmd_reflections(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint_dir)
    for record in reflection_records(checkpoint.ensemble):
        print(f"[{record['prompt_id']}] lambda={record['lambda']:.4f} error={record['train_error']:.4f}")
        print(f"  {record['instruction']}")
        for reason in record['reasons']:
            print(f"  - {reason}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='flat JSON config file (default: config/prefer_manifest.json)')
    common.add_argument('--provider', default='live', help="'live' or 'scripted:<transcript.jsonl>'")
    common.add_argument('--labels', help='comma-separated label space, e.g. Yes,No')
    common.add_argument('--tau', type=float, help='bilateral confidence threshold in [0, 1]')
    common.add_argument('--seed', type=int)
    common.add_argument('--n-jobs', type=int, dest='n_jobs', help='concurrent evaluations')

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--dataset', required=True, help='line-delimited training examples')
    training.add_argument('--seed-prompt', required=True, help='seed prompt (.json record or .txt instruction)')
    training.add_argument('--k', type=int, help='k-shot training set size')
    training.add_argument('--iters', type=int, help='boosting iterations')
    training.add_argument('--m', type=int, help='wrong examples shown in feedback')
    training.add_argument('--num-feedbacks', type=int, dest='num_feedbacks')
    training.add_argument('--vote-n', type=int, dest='vote_n', help='samples per majority vote')
    training.add_argument('--task-description', dest='task_description')

    parser = argparse.ArgumentParser(prog='prefer', description='Prompt ensemble boosting engine')
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', parents=[common, training], help='train an ensemble')
    train.add_argument('--checkpoint-dir', required=True)
    train.set_defaults(func=cmd_train)

    resume = sub.add_parser('resume', parents=[common], help='continue an interrupted run')
    resume.add_argument('--checkpoint-dir', required=True)
    resume.set_defaults(func=cmd_resume)

    predict = sub.add_parser('predict', parents=[common], help='label examples with a trained ensemble')
    predict.add_argument('--checkpoint-dir', required=True)
    predict.add_argument('--input', required=True)
    predict.add_argument('--output', required=True)
    predict.add_argument('--inference-mode', dest='inference_mode', choices=['weighted_vote', 'weighted_score'])
    predict.set_defaults(func=cmd_predict)

    evaluate = sub.add_parser('eval', parents=[common], help='score a trained ensemble on labeled data')
    evaluate.add_argument('--checkpoint-dir', required=True)
    evaluate.add_argument('--input', required=True)
    evaluate.add_argument('--metrics-out')
    evaluate.add_argument('--predictions', help='also write per-example predictions')
    evaluate.add_argument('--inference-mode', dest='inference_mode', choices=['weighted_vote', 'weighted_score'])
    evaluate.set_defaults(func=cmd_eval)

    ablate = sub.add_parser('ablate', parents=[common, training], help='compare ablation variants')
    ablate.add_argument('--mode', nargs='+', choices=list(MODES) + ['all'], default=['full'])
    ablate.add_argument('--eval-dataset', help='labeled evaluation split (training set when omitted)')
    ablate.add_argument('--report', default='ablation_report.jsonl')
    ablate.add_argument('--summary', help='summary text path (default: report path with .txt)')
    ablate.add_argument('--checkpoint-dir', help='per-mode checkpoint directories under this path')
    ablate.set_defaults(func=cmd_ablate)

    reflections = sub.add_parser('reflections', help='print learners with their reasons')
    reflections.add_argument('--checkpoint-dir', required=True)
    reflections.set_defaults(func=cmd_reflections)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PreferError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
