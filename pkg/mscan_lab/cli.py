"""
Command-line interface for mscan_lab.

Provides commands for generating synthetic logs, training and evaluating
M-scan, running baselines, the ablation grid and hyperparameter sweeps,
and checking gradients. Every command writes its artifacts into
``<out root>/<command>-<config hash>/`` and is recorded in the run ledger.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .baselines import run_baseline, run_baseline_all_scenarios
from .config import RunConfig, command_hash, echo_config, parse_config, run_dir
from .data import (Example, dataset_summary, densify, export_csv, ingest_csv, prepare_examples, read_log,
                   records_from_frame, records_to_frame, save_vocabularies, vocab_sizes)
from .database import RunRegistry
from .errors import GradientError, MissingInputError, MScanError
from .evaluation import MetricsReport, evaluate
from .experiments import ablation_summary, run_ablation, sweep
from .gradcheck import check_gradients, tiny_problem
from .model import MScanModel, init_parameters, load_checkpoint, save_checkpoint
from .reporter import Reporter
from .synthetic import sample_interactions
from .training import train

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = 'config.yaml'
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
RUN_COMMANDS = ('gen-data', 'train', 'eval', 'ablate', 'sweep', 'grad-check', 'baseline')


def error_line(error: MScanError) -> str:
    """Single machine-parsable line describing a failure."""
    return f"error code={error.exit_code} kind={error.kind} message={json.dumps(str(error))}"


def load_examples(cfg: RunConfig, out: Optional[Path] = None) -> Tuple[List[Example], List[Example]]:
    """
    Train/test examples for a run.

    Uses data.path when set, else the interactions written by gen-data for
    the same data settings, else a fresh draw from the synthetic generator.
    Vocabularies of a generated log go to data.vocab_dir or the run directory
    out; the gen-data directory is never written to.
    """
    if cfg.data.path:
        records = ingest_csv(cfg.data.path, schema=cfg.data.columns or None, vocab_dir=cfg.data.vocab_dir)
    else:
        generated = run_dir(cfg, 'gen-data') / 'interactions.csv'
        if generated.exists():
            logger.info("Using generated log %s", generated)
            frame, vocabs = read_log(generated)
            target = cfg.data.vocab_dir or (None if out is None else out / 'interactions_vocab')
            if target is not None:
                save_vocabularies(vocabs, target)
            records = records_from_frame(frame)
        else:
            frame, _ = densify(records_to_frame(sample_interactions(cfg.synthetic)))
            records = records_from_frame(frame)
    return prepare_examples(records, caps=cfg.model.caps, test_fraction=cfg.data.test_fraction,
                            filter_users=cfg.data.filter_users)


class MScanCLI:
    """Command-line interface for mscan_lab."""

    def __init__(self):
        self.reporter = Reporter()

    def gen_data(self, cfg: RunConfig, out: Path) -> Optional[float]:
        """Sample a synthetic log and write it with its train/test split."""
        records = sample_interactions(cfg.synthetic)
        export_csv(records, out / 'interactions.csv')
        frame, vocabs = densify(records_to_frame(records))
        save_vocabularies(vocabs, out / 'interactions_vocab')
        train_set, test_set = prepare_examples(records_from_frame(frame), caps=cfg.model.caps,
                                               test_fraction=cfg.data.test_fraction,
                                               filter_users=cfg.data.filter_users)
        export_csv(train_set, out / 'train.csv')
        export_csv(test_set, out / 'test.csv')
        summary = dataset_summary(train_set)
        self.reporter.emit_report(summary.reset_index(), 'csv', out / 'train_summary.csv')

        print(f"Generated {len(records)} events: {len(train_set)} train / {len(test_set)} test examples")
        print(self.reporter.format_dataset(summary, 'TRAIN SET'))
        return float(summary['ctr'].mean())

    def train_model(self, cfg: RunConfig, out: Path) -> Optional[float]:
        """Train M-scan on the configured data with the first seed."""
        seed = cfg.seeds[0]
        train_set, test_set = load_examples(cfg, out)
        model = MScanModel(init_parameters(replace(cfg.model, init_seed=seed), vocab_sizes(train_set, test_set)))
        params, report = train(model, train_set, replace(cfg.train, seed=seed), progress=cfg.output.progress)
        save_checkpoint(params, out / 'checkpoint.json')
        self.reporter.emit_report(report, 'json', out / 'train_report.json')

        print(self.reporter.format_train(report))
        return report.epochs[-1].l_final

    def evaluate_model(self, cfg: RunConfig, out: Path) -> Optional[float]:
        """Score the test split with the checkpoint trained under the same config."""
        checkpoint = run_dir(cfg, 'train') / 'checkpoint.json'
        if not checkpoint.exists():
            raise MissingInputError(f"no checkpoint for this config; run 'train' first ({checkpoint})",
                                    path=str(checkpoint))
        model = MScanModel(load_checkpoint(checkpoint))
        _, test_set = load_examples(cfg, out)
        report = evaluate(model, cfg.inference, test_set, group_by_scenario=cfg.eval.group_by_scenario,
                          kind=cfg.eval.score_kind, batch_size=cfg.eval.batch_size)
        baseline_json = run_dir(cfg, 'baseline') / 'metrics.json'
        if baseline_json.exists():
            base = MetricsReport.from_dict(json.loads(baseline_json.read_text(encoding='utf-8')))
            report = report.with_rel_impr(base)
        self.reporter.emit_report(report, 'json', out / 'metrics.json')
        self.reporter.emit_report(report, 'csv', out / 'metrics.csv')

        print(self.reporter.format_metrics(report))
        return report.overall

    def ablate(self, cfg: RunConfig, out: Path) -> Optional[float]:
        """Train and evaluate the 2x2 SACA/SBE grid for every seed."""
        train_set, test_set = load_examples(cfg, out)
        cells = run_ablation(train_set, test_set, cfg.model, cfg.train, cfg.inference, cfg.seeds,
                             progress=cfg.output.progress)
        summary = ablation_summary(cells)
        doc = {
            'cells': [asdict(c) for c in cells],
            'summary': json.loads(summary.to_json(orient='records')),
        }
        self.reporter.emit_report(doc, 'json', out / 'ablation.json')
        self.reporter.emit_report(summary, 'csv', out / 'ablation.csv')

        print(self.reporter.format_ablation(summary))
        full = summary[summary['saca_enabled'] & summary['sbe_enabled']]
        return None if full.empty else float(full['mean_auc'].iloc[0])

    def run_sweep(self, cfg: RunConfig, out: Path) -> Optional[float]:
        """Sweep c or alpha and write the curve as JSON and CSV."""
        train_set, test_set = load_examples(cfg, out)
        curve = sweep(cfg.sweep.hyper, cfg.sweep.grid, train_set, test_set, cfg.model, cfg.train,
                      cfg.inference, cfg.seeds, metric=cfg.sweep.metric, progress=cfg.output.progress)
        self.reporter.emit_report(curve, 'json', out / 'sweep.json')
        self.reporter.emit_report(curve, 'csv', out / 'sweep.csv')

        print(self.reporter.format_sweep(curve))
        means = [m for m in curve.mean if m is not None]
        return max(means) if means else None

    def grad_check(self, cfg: RunConfig, out: Path) -> Optional[float]:
        """Finite-difference check of every parameter gradient on a tiny model."""
        gc = cfg.gradcheck
        params, batch = tiny_problem(gc, seed=cfg.seeds[0])
        report = check_gradients(params, batch, gc.epsilon, gc.tolerance, alpha=gc.alpha,
                                 ys_label=cfg.train.ys_label, floor=gc.floor)
        self.reporter.emit_report(report, 'json', out / 'gradcheck.json')

        print(self.reporter.format_gradcheck(report))
        if not report.passed:
            raise GradientError(f"gradient check failed: max relative error {report.max_rel_error:.3e} "
                                f"> {gc.tolerance:g}")
        return report.max_rel_error

    def baseline(self, cfg: RunConfig, out: Path) -> Optional[float]:
        """Train and evaluate the configured baseline."""
        seed = cfg.seeds[0]
        train_set, test_set = load_examples(cfg, out)
        bcfg = replace(cfg.baseline, init_seed=seed)
        tcfg = replace(cfg.train, seed=seed)
        if bcfg.target_scenario is None:
            report = run_baseline_all_scenarios(bcfg.kind, train_set, test_set, tcfg, bcfg)
        else:
            report = run_baseline(bcfg.kind, train_set, test_set, tcfg, bcfg,
                                  target_scenario=bcfg.target_scenario)
        self.reporter.emit_report(report, 'json', out / 'metrics.json')
        self.reporter.emit_report(report, 'csv', out / 'metrics.csv')

        print(self.reporter.format_metrics(report))
        if report.overall is not None:
            return report.overall
        defined = [v for v in report.per_scenario.values() if v is not None]
        return defined[0] if defined else None

    def list_runs(self, cfg: RunConfig, limit: Optional[int] = None):
        """List recorded runs."""
        registry = RunRegistry(cfg.out_root() / 'runs.db')
        try:
            print(self.reporter.format_runs(registry.get_runs(limit=limit)))
            stats = registry.get_stats()
            if stats['total_runs']:
                status = ', '.join(f"{k}: {v}" for k, v in sorted(stats['by_status'].items()))
                print(f"Total runs: {stats['total_runs']} ({status})")
        finally:
            registry.close()

    def show_stats(self, cfg: RunConfig):
        """Show dataset statistics."""
        train_set, test_set = load_examples(cfg)
        print(self.reporter.format_dataset(dataset_summary(train_set), 'TRAIN SET'))
        print(self.reporter.format_dataset(dataset_summary(test_set), 'TEST SET'))

    def run_command(self, command: str, cfg: RunConfig) -> int:
        """
        Run one experiment command and record it in the ledger.

        Args:
            command: One of RUN_COMMANDS
            cfg: Resolved run configuration

        Returns:
            Exit status: 0 on success, the error's exit code otherwise
        """
        handlers = {
            'gen-data': self.gen_data,
            'train': self.train_model,
            'eval': self.evaluate_model,
            'ablate': self.ablate,
            'sweep': self.run_sweep,
            'grad-check': self.grad_check,
            'baseline': self.baseline,
        }
        out = run_dir(cfg, command)
        registry = RunRegistry(cfg.out_root() / 'runs.db')
        run_id = registry.start_run(command, command_hash(cfg, command), out, cfg.seeds)
        try:
            echo_config(cfg, out)
            headline = handlers[command](cfg, out)
        except MScanError as e:
            registry.finish_run(run_id, e.exit_code, error=str(e))
            registry.close()
            raise
        registry.finish_run(run_id, 0, headline=headline)
        registry.close()
        print(f"Artifacts written to {out}")
        return 0

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog='mscan_lab',
            description='Multi-scenario CTR experiments with the M-scan model',
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  # Generate a synthetic log, train, and evaluate
  python -m mscan_lab gen-data
  python -m mscan_lab train
  python -m mscan_lab eval

  # Override settings from the command line
  python -m mscan_lab train --set train.alpha=0.25 --set train.epochs=5

  # Ablation grid and c-sweep over five seeds
  python -m mscan_lab ablate --seed 0 --seed 1 --seed 2 --seed 3 --seed 4
  python -m mscan_lab sweep --set sweep.hyper=c

  # Check gradients on a tiny model
  python -m mscan_lab grad-check
            """
        )
        parser.add_argument('--config', default=None,
                            help=f'Configuration file (default: {DEFAULT_CONFIG} if present)')
        parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                            help='Override a config value, e.g. train.alpha=0.5 (repeatable)')
        parser.add_argument('--out', help='Output root (default: $MSCAN_OUT or runs/)')
        parser.add_argument('--seed', dest='seeds', type=int, action='append', default=None,
                            help='Run seed (repeatable; default from config)')
        parser.add_argument('--log-level', default='INFO',
                            choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')

        subparsers = parser.add_subparsers(dest='command', help='Commands')
        subparsers.add_parser('gen-data', help='Generate a synthetic interaction log')
        subparsers.add_parser('train', help='Train M-scan')
        subparsers.add_parser('eval', help='Evaluate the trained checkpoint')
        subparsers.add_parser('ablate', help='Run the SACA/SBE ablation grid')
        subparsers.add_parser('sweep', help='Sweep c or alpha')
        subparsers.add_parser('grad-check', help='Check gradients against finite differences')
        subparsers.add_parser('baseline', help='Train and evaluate a Single/Mix/Finetune baseline')
        runs_parser = subparsers.add_parser('runs', help='List recorded runs')
        runs_parser.add_argument('--limit', type=int, help='Show at most this many runs')
        subparsers.add_parser('stats', help='Show dataset statistics')
        return parser

    def resolve_config(self, args) -> RunConfig:
        path = args.config
        if path is None and Path(DEFAULT_CONFIG).exists():
            path = DEFAULT_CONFIG
        overrides = list(args.overrides)
        if args.seeds:
            overrides.append(f"seeds={json.dumps(args.seeds)}")
        if args.out:
            overrides.append(f"output.root={json.dumps(str(args.out))}")
        return parse_config(path, overrides)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """Run the CLI; returns the process exit status."""
        parser = self.build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

        if not args.command:
            parser.print_help()
            return 0

        try:
            cfg = self.resolve_config(args)
            if args.command == 'runs':
                self.list_runs(cfg, args.limit)
                return 0
            if args.command == 'stats':
                self.show_stats(cfg)
                return 0
            return self.run_command(args.command, cfg)
        except MScanError as e:
            print(error_line(e), file=sys.stderr)
            return e.exit_code


def main():
    """Main entry point."""
    cli = MScanCLI()
    sys.exit(cli.run())


if __name__ == '__main__':
    main()
