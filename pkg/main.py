"""Command-line entry point: corpus, training-set, model, output and report verbs."""
import argparse
import dataclasses
import logging
import os
import sys

from errors import ToolkitError, ValidationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FAILURE = 3


def _named_dirs(values):
    named = {}
    for value in values:
        name, sep, path = value.partition('=')
        if not sep or not name or not path:
            raise ValidationError(f'expected NAME=DIR, got {value!r}')
        named[name] = path
    return named


def _plan(args, override_out=True):
    from harness import ExperimentPlan

    plan = ExperimentPlan.from_yaml(args.config) if getattr(args, 'config', None) else ExperimentPlan()
    strategies = getattr(args, 'strategies', None)
    return plan.with_overrides(seed=getattr(args, 'seed', None),
                               out=getattr(args, 'out', None) if override_out else None,
                               strategies=strategies.split(',') if strategies else None,
                               workers=getattr(args, 'workers', None))


def cmd_generate_corpus(args):
    from corpus import save_corpus
    from synthgen import GeneratorConfig, generate_corpus

    config = GeneratorConfig.from_yaml(args.config) if args.config else GeneratorConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, master_seed=args.seed)
    save_corpus(generate_corpus(config), args.out)


def cmd_build_set(args):
    from corpus import TrainingSetRecipe, build_training_set, load_corpus, save_training_set

    recipe = TrainingSetRecipe(args.strategy.upper(), seed=args.seed or 0, speaker=args.speaker,
                               draws_per_speaker=args.draws)
    training_set = build_training_set(load_corpus(args.corpus), recipe)
    save_training_set(training_set, args.out)
    logger.info('[sets] %s: %d items -> %s', recipe.label, training_set.size, args.out)


def cmd_train(args):
    from acoustic_model import Variant, train
    from corpus import Strategy, load_corpus, load_training_set

    plan = _plan(args, override_out=False)
    corpus = load_corpus(args.corpus)
    training_set = load_training_set(args.set)
    recipe = training_set.recipe
    single = args.single_speaker or recipe.strategy is Strategy.SD
    n_speakers = 1 if single else corpus.n_speakers
    variant = Variant(args.variant)
    if variant is Variant.SAR:
        topology = plan.sar_topology(corpus, n_speakers)
    else:
        topology = plan.dar_topology(corpus, n_speakers)
    name = args.name or plan.job_name(recipe)
    model = train(corpus, training_set, topology, plan.training_config(name, variant), label=name)
    model.save(args.out)
    model.write_log_csv(os.path.splitext(args.out)[0] + '.log.csv')


def cmd_synthesize(args):
    from acoustic_model import TrainedModel
    from corpus import load_corpus, save_tracks
    from harness import synthesize_split

    corpus = load_corpus(args.corpus)
    sar = TrainedModel.load(args.sar)
    dar = TrainedModel.load(args.dar)
    speakers = args.speakers.split(',') if args.speakers else [s for s in corpus.speaker_ids if s in sar.speakers]
    save_tracks(args.out, synthesize_split(corpus, sar, dar, speakers, args.split))


def cmd_combine(args):
    from corpus import load_tracks, save_tracks
    from ensemble import combine_output_sets

    save_tracks(args.out, combine_output_sets([load_tracks(d) for d in args.inputs]))


def cmd_evaluate(args):
    from corpus import load_corpus, load_tracks
    from evaluation import build_reports
    from reporting import write_run_reports

    outputs = {name: load_tracks(path) for name, path in _named_dirs(args.outputs).items()}
    report = build_reports(load_corpus(args.corpus), outputs)
    write_run_reports(args.out, report, figures=args.figures, pdf=args.pdf)


def cmd_ab_test(args):
    from corpus import load_corpus, load_tracks
    from harness import JudgeModel, compare_outputs
    from reporting import write_preferences_csv

    named = _named_dirs([args.a, args.b])
    if len(named) != 2:
        raise ValidationError('the two sides of an AB test need different names')
    pair = tuple(named)
    outputs = {name: load_tracks(path) for name, path in named.items()}
    tally = compare_outputs(load_corpus(args.corpus), pair, outputs,
                            JudgeModel(args.sigma, args.listeners), args.seed or 0)
    write_preferences_csv(args.out, [tally])


def cmd_run_plan(args):
    from harness import run

    run(_plan(args))


def cmd_dashboard(args):
    from dashboard_frame import open_dashboard

    open_dashboard(args.run)


def build_parser():
    parser = argparse.ArgumentParser(prog='main.py', description=__doc__)
    parser.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate-corpus', help='write a synthetic corpus directory')
    p.add_argument('--config', help='generator YAML')
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_generate_corpus)

    p = sub.add_parser('build-set', help='resample a corpus into a training set')
    p.add_argument('--corpus', required=True)
    p.add_argument('--strategy', required=True, choices=['SD', 'UN', 'MU', 'OV', 'BOOTSTRAP'],
                   type=str.upper)
    p.add_argument('--speaker')
    p.add_argument('--draws', type=int, help='BOOTSTRAP draws per speaker')
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_build_set)

    p = sub.add_parser('train', help='train one SAR or DAR model')
    p.add_argument('--corpus', required=True)
    p.add_argument('--set', required=True)
    p.add_argument('--variant', required=True, choices=['sar', 'dar'])
    p.add_argument('--config', help='plan YAML (topology widths, training config)')
    p.add_argument('--single-speaker', action='store_true', help='no speaker code (implied for SD sets)')
    p.add_argument('--name', help='model name for seed derivation (default: the run-plan job name)')
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True, help='checkpoint path')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('synthesize', help='generate acoustic outputs for a corpus split')
    p.add_argument('--corpus', required=True)
    p.add_argument('--sar', required=True)
    p.add_argument('--dar', required=True)
    p.add_argument('--speakers', help='comma-separated speaker ids')
    p.add_argument('--split', default='test')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser('combine', help='ensemble several output directories')
    p.add_argument('--inputs', nargs='+', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser('evaluate', help='score output directories against the test split')
    p.add_argument('--corpus', required=True)
    p.add_argument('--outputs', nargs='+', required=True, metavar='NAME=DIR')
    p.add_argument('--figures', action='store_true')
    p.add_argument('--pdf', action='store_true')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('ab-test', help='simulated AB preference test between two output directories')
    p.add_argument('--corpus', required=True)
    p.add_argument('--a', required=True, metavar='NAME=DIR')
    p.add_argument('--b', required=True, metavar='NAME=DIR')
    p.add_argument('--sigma', type=float, default=0.5)
    p.add_argument('--listeners', type=int, default=3)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True, help='tally CSV')
    p.set_defaults(func=cmd_ab_test)

    p = sub.add_parser('run-plan', help='run a whole experiment plan')
    p.add_argument('--config', help='plan YAML')
    p.add_argument('--seed', type=int)
    p.add_argument('--out')
    p.add_argument('--strategies', help='comma-separated subset of SD,UN,MU,OV,E1,E2,E3,EN')
    p.add_argument('--workers', type=int)
    p.set_defaults(func=cmd_run_plan)

    p = sub.add_parser('dashboard', help='open the result viewer for a run directory')
    p.add_argument('--run', required=True)
    p.set_defaults(func=cmd_dashboard)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        args.func(args)
    except ValidationError as e:
        logger.error('%s: %s', args.command, e)
        return EXIT_VALIDATION
    except ToolkitError as e:
        logger.error('%s failed: %s', args.command, e)
        return EXIT_FAILURE
    except Exception:
        logger.exception('%s failed', args.command)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
