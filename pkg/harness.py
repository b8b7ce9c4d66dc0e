"""Experiment plans: corpus, training sets, models, test-split outputs, reports.

A run directory holds every artifact of one plan::

    corpus/            generated corpus (manifest + records)
    sets/              training-set JSON per job
    models/            SAR/DAR checkpoints and epoch logs per job
    outputs/<S>/       synthesized test-split records per strategy
    reports/ plots/ figures/
    run_manifest.json  seeds, config hashes, training-set sizes
    resolved_config.yaml
    state.db           stage ledger, used to resume an interrupted run
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

import database
import reporting
from acoustic_model import (NetworkTopology, TrainedModel, TrainingConfig, Variant, derive_seed,
                            synthesize, train)
from corpus import (Corpus, Strategy, TrainingSetRecipe, build_training_set, content_digest, load_corpus,
                    load_tracks, load_training_set, save_corpus, save_tracks, save_training_set)
from ensemble import combine_output_sets, spectral_contraction_gaps
from errors import HarnessError, ToolkitError, ValidationError
from evaluation import OVERALL, EvaluationReport, PreferenceTally, build_reports, per_utterance_mcd
from features import AcousticTrack
from synthgen import GeneratorConfig, generate_corpus

logger = logging.getLogger(__name__)

ALL_STRATEGIES = ('SD', 'UN', 'MU', 'OV', 'E1', 'E2', 'E3', 'EN')
ENSEMBLE_MEMBERS = ('E1', 'E2', 'E3')
DEFAULT_AB_PAIRS = (('MU', 'SD'), ('EN', 'SD'), ('EN', 'MU'))
CORPUS_SOURCES = ('generate', 'load')
CONTRACTION_TOLERANCE = 1e-12
# Outputs are stored as float32, so per-speaker MCD comparisons get a little slack.
MCD_HOLDS_TOLERANCE_DB = 1e-4

MANIFEST_NAME = 'run_manifest.json'
RESOLVED_CONFIG_NAME = 'resolved_config.yaml'


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(blob.encode('utf-8')).hexdigest()


def _unknown_keys(data: Mapping, cls, what: str) -> None:
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValidationError(f'unknown {what} keys: {sorted(unknown)}')


# ------------------------------------------------------------------ plan

@dataclass(frozen=True)
class JudgeModel:
    """Simulated listener: prefers the lower per-utterance MCD after N(0, sigma) noise."""
    sigma: float = 0.5
    n_listeners: int = 3

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError(f'judge sigma must be >= 0, got {self.sigma}')
        if self.n_listeners < 1:
            raise ValidationError(f'judge n_listeners must be >= 1, got {self.n_listeners}')

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'JudgeModel':
        _unknown_keys(data, cls, 'judge')
        return cls(**data)


@dataclass(frozen=True)
class CorpusSource:
    source: str = 'generate'
    path: Optional[str] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.source not in CORPUS_SOURCES:
            raise ValidationError(f'corpus source must be one of {CORPUS_SOURCES}, got {self.source!r}')
        if self.source == 'load' and not self.path:
            raise ValidationError('corpus source "load" needs a path')

    def to_mapping(self) -> dict:
        return {'source': self.source, 'path': self.path, 'generator': self.generator.to_mapping()}

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'CorpusSource':
        _unknown_keys(data, cls, 'corpus')
        data = dict(data)
        if 'generator' in data:
            data['generator'] = GeneratorConfig.from_mapping(data['generator'])
        return cls(**data)


@dataclass(frozen=True)
class ReportOptions:
    figures: bool = True
    pdf: bool = False

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'ReportOptions':
        _unknown_keys(data, cls, 'report')
        return cls(**data)


@dataclass(frozen=True)
class ExperimentPlan:
    out: str = os.path.join('runs', 'default')
    seed: int = 0
    workers: int = 1
    corpus: CorpusSource = field(default_factory=CorpusSource)
    strategies: Tuple[str, ...] = ALL_STRATEGIES
    draws_per_speaker: int = 300
    sar_widths: Tuple[int, ...] = (32, 32, 16, 16)
    dar_widths: Tuple[int, ...] = (32, 32, 16, 8)
    embed_dim: int = 4
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ab_pairs: Optional[Tuple[Tuple[str, str], ...]] = None
    judge: JudgeModel = field(default_factory=JudgeModel)
    report: ReportOptions = field(default_factory=ReportOptions)

    def __post_init__(self):
        strategies = [str(s).upper() for s in self.strategies]
        unknown = sorted(set(strategies) - set(ALL_STRATEGIES))
        if unknown:
            raise ValidationError(f'unknown strategies {unknown}; choose from {list(ALL_STRATEGIES)}')
        if not strategies:
            raise ValidationError('a plan needs at least one strategy')
        object.__setattr__(self, 'strategies', tuple(s for s in ALL_STRATEGIES if s in strategies))
        if 'EN' in self.strategies and not set(ENSEMBLE_MEMBERS) <= set(self.strategies):
            raise ValidationError('EN requires E1, E2 and E3 in the plan')
        if self.workers < 1:
            raise ValidationError(f'workers must be >= 1, got {self.workers}')
        if self.draws_per_speaker < 1:
            raise ValidationError(f'draws_per_speaker must be >= 1, got {self.draws_per_speaker}')
        for name in ('sar_widths', 'dar_widths'):
            widths = tuple(int(w) for w in getattr(self, name))
            if len(widths) != 4 or min(widths) < 1:
                raise ValidationError(f'{name} needs four positive widths, got {list(widths)}')
            object.__setattr__(self, name, widths)
        if self.ab_pairs is not None:
            pairs = tuple((str(a).upper(), str(b).upper()) for a, b in self.ab_pairs)
            for a, b in pairs:
                if a not in self.strategies or b not in self.strategies:
                    raise ValidationError(f'AB pair {a}-{b} names a strategy outside the plan')
            object.__setattr__(self, 'ab_pairs', pairs)
        # The plan seed is the generator master seed.
        if self.corpus.generator.master_seed != self.seed:
            generator = dataclasses.replace(self.corpus.generator, master_seed=self.seed)
            object.__setattr__(self, 'corpus', dataclasses.replace(self.corpus, generator=generator))

    @property
    def pairs(self) -> Tuple[Tuple[str, str], ...]:
        if self.ab_pairs is not None:
            return self.ab_pairs
        return tuple(p for p in DEFAULT_AB_PAIRS if p[0] in self.strategies and p[1] in self.strategies)

    @property
    def corpus_dir(self) -> str:
        if self.corpus.source == 'load':
            return self.corpus.path
        return os.path.join(self.out, 'corpus')

    def output_dir(self, strategy: str) -> str:
        return os.path.join(self.out, 'outputs', strategy)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       strategies: Optional[Sequence[str]] = None,
                       workers: Optional[int] = None) -> 'ExperimentPlan':
        changes = {}
        if seed is not None:
            changes['seed'] = seed
        if out is not None:
            changes['out'] = out
        if strategies is not None:
            chosen = tuple(str(s).upper() for s in strategies)
            changes['strategies'] = chosen
            if self.ab_pairs is not None:
                changes['ab_pairs'] = tuple(p for p in self.ab_pairs if p[0] in chosen and p[1] in chosen)
        if workers is not None:
            changes['workers'] = workers
        return dataclasses.replace(self, **changes)

    def to_mapping(self) -> dict:
        return {
            'out': self.out,
            'seed': self.seed,
            'workers': self.workers,
            'corpus': self.corpus.to_mapping(),
            'strategies': list(self.strategies),
            'draws_per_speaker': self.draws_per_speaker,
            'sar_widths': list(self.sar_widths),
            'dar_widths': list(self.dar_widths),
            'embed_dim': self.embed_dim,
            'training': self.training.to_mapping(),
            'ab_pairs': [list(p) for p in self.pairs],
            'judge': self.judge.to_mapping(),
            'report': self.report.to_mapping(),
        }

    @classmethod
    def from_mapping(cls, data: Mapping) -> 'ExperimentPlan':
        data = dict(data or {})
        _unknown_keys(data, cls, 'plan')
        generator_seed = ((data.get('corpus') or {}).get('generator') or {}).get('master_seed')
        if generator_seed is not None:
            if data.get('seed') is None:
                data['seed'] = generator_seed
            elif data['seed'] != generator_seed:
                raise ValidationError(f'plan seed {data["seed"]} conflicts with generator master_seed '
                                      f'{generator_seed}; the plan seed drives the generator')
        if 'corpus' in data:
            data['corpus'] = CorpusSource.from_mapping(data['corpus'] or {})
        if 'training' in data:
            data['training'] = TrainingConfig.from_mapping(data['training'] or {})
        if 'judge' in data:
            data['judge'] = JudgeModel.from_mapping(data['judge'] or {})
        if 'report' in data:
            data['report'] = ReportOptions.from_mapping(data['report'] or {})
        for key in ('strategies', 'sar_widths', 'dar_widths'):
            if key in data:
                data[key] = tuple(data[key])
        if data.get('ab_pairs') is not None:
            data['ab_pairs'] = tuple(tuple(p) for p in data['ab_pairs'])
        try:
            return cls(**data)
        except TypeError as e:
            raise ValidationError(f'invalid plan: {e}') from None

    @classmethod
    def from_yaml(cls, path: str) -> 'ExperimentPlan':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ValidationError(f'plan file not found: {path}') from None
        except yaml.YAMLError as e:
            raise ValidationError(f'{path}: {e}') from None
        return cls.from_mapping(raw)

    def sar_topology(self, corpus: Corpus, n_speakers: int) -> NetworkTopology:
        return NetworkTopology.sar(corpus.d_lin, corpus.feature_config.d_mgc, n_speakers, self.sar_widths)

    def dar_topology(self, corpus: Corpus, n_speakers: int) -> NetworkTopology:
        return NetworkTopology.dar(corpus.d_lin, corpus.feature_config.n_classes, n_speakers,
                                   self.dar_widths, self.embed_dim)

    def job_name(self, recipe: TrainingSetRecipe) -> str:
        """Name a trained model the way plan_jobs does; bootstrap sets match by their derived seed."""
        if recipe.strategy is Strategy.SD:
            return f'SD-{recipe.speaker}'
        if recipe.strategy is Strategy.BOOTSTRAP:
            for member in ENSEMBLE_MEMBERS:
                if recipe.seed == derive_seed(self.seed, f'set:{member}'):
                    return member
            return recipe.label
        return recipe.strategy.value

    def training_config(self, job_name: str, variant: Variant) -> TrainingConfig:
        label = f'{job_name}.{variant.value}'
        return dataclasses.replace(self.training,
                                   init_seed=derive_seed(self.seed, f'{label}.init'),
                                   shuffle_seed=derive_seed(self.seed, f'{label}.shuffle'))


# ------------------------------------------------------------------ jobs

@dataclass(frozen=True)
class TrainingJob:
    name: str
    strategy: str
    recipe: TrainingSetRecipe
    speakers: Tuple[str, ...]

    @property
    def multi_speaker(self) -> bool:
        return self.strategy != 'SD'


def plan_jobs(plan: ExperimentPlan, corpus: Corpus) -> List[TrainingJob]:
    """One job per trained model pair; SD expands to one job per speaker."""
    jobs = []
    for strategy in plan.strategies:
        if strategy == 'EN':
            continue
        if strategy == 'SD':
            for spk in corpus.speaker_ids:
                recipe = TrainingSetRecipe(Strategy.SD, speaker=spk)
                jobs.append(TrainingJob(plan.job_name(recipe), 'SD', recipe, (spk,)))
            continue
        seed = derive_seed(plan.seed, f'set:{strategy}')
        if strategy in ENSEMBLE_MEMBERS:
            recipe = TrainingSetRecipe(Strategy.BOOTSTRAP, seed=seed, draws_per_speaker=plan.draws_per_speaker)
        else:
            recipe = TrainingSetRecipe(Strategy(strategy), seed=seed)
        jobs.append(TrainingJob(strategy, strategy, recipe, corpus.speaker_ids))
    return jobs


def expected_set_size(recipe: TrainingSetRecipe, corpus: Corpus) -> int:
    counts = corpus.train_counts()
    n = corpus.n_speakers
    if recipe.strategy is Strategy.SD:
        return counts[recipe.speaker]
    if recipe.strategy is Strategy.UN:
        return min(counts.values()) * n
    if recipe.strategy is Strategy.MU:
        return sum(counts.values())
    if recipe.strategy is Strategy.OV:
        return max(counts.values()) * n
    return recipe.draws_per_speaker * n


def synthesize_split(corpus: Corpus, sar_model: TrainedModel, dar_model: TrainedModel,
                     speakers: Optional[Sequence[str]] = None, split: str = 'test') -> Dict[str, AcousticTrack]:
    tracks = {}
    for spk in speakers or corpus.speaker_ids:
        for utt in corpus.utterances(split, spk):
            tracks[utt.utt_id] = synthesize(sar_model, dar_model, utt.linguistic, spk)
    return tracks


def _train_worker(task: Mapping) -> str:
    corpus = load_corpus(task['corpus_dir'])
    training_set = load_training_set(task['set_path'])
    model = train(corpus, training_set, NetworkTopology.from_mapping(task['topology']),
                  TrainingConfig.from_mapping(task['training']), label=task['label'])
    model.save(task['checkpoint'])
    model.write_log_csv(task['log'])
    return task['checkpoint']


# ------------------------------------------------------------------ preference

def judge_preference(pair: Tuple[str, str], mcd_a: Mapping[str, float], mcd_b: Mapping[str, float],
                     owners: Mapping[str, str], speakers: Sequence[str], judge: JudgeModel,
                     seed: int) -> PreferenceTally:
    """Forced-choice judgements; exact ties are settled by a coin flip."""
    rng = np.random.default_rng(seed)
    wins = {spk: [0, 0] for spk in speakers}
    for utt_id in sorted(mcd_a):
        tally = wins[owners[utt_id]]
        for _ in range(judge.n_listeners):
            a = mcd_a[utt_id] + judge.sigma * rng.normal()
            b = mcd_b[utt_id] + judge.sigma * rng.normal()
            if a < b or (a == b and rng.random() < 0.5):
                tally[0] += 1
            else:
                tally[1] += 1
    return PreferenceTally(pair, {spk: (w[0], w[1]) for spk, w in wins.items() if sum(w)})


def compare_outputs(corpus: Corpus, pair: Tuple[str, str], outputs: Mapping[str, Mapping[str, AcousticTrack]],
                    judge: JudgeModel, seed: int) -> PreferenceTally:
    reference = {u: corpus.utterance(u).acoustic
                 for spk in corpus.speaker_ids for u in corpus.split_ids('test', spk)}
    a, b = pair
    tally = judge_preference(pair, per_utterance_mcd(outputs[a], reference),
                             per_utterance_mcd(outputs[b], reference),
                             {u: corpus.owner(u) for u in reference}, corpus.speaker_ids, judge, seed)
    wa, wb = tally.overall
    logger.info('[ab] %s: %d-%d, p=%.4g', tally.label, wa, wb, tally.p_value())
    return tally


def simulate_preference(plan: ExperimentPlan, pair: Tuple[str, str], judge: Optional[JudgeModel] = None,
                        corpus: Optional[Corpus] = None) -> PreferenceTally:
    a, b = pair
    corpus = corpus or load_corpus(plan.corpus_dir)
    outputs = {}
    for strategy in (a, b):
        directory = plan.output_dir(strategy)
        if not os.path.isdir(directory):
            raise ValidationError(f'no outputs for {strategy} in {directory}')
        outputs[strategy] = load_tracks(directory)
    return compare_outputs(corpus, (a, b), outputs, judge or plan.judge, derive_seed(plan.seed, f'ab:{a}-{b}'))


# ------------------------------------------------------------------ run

@dataclass
class RunResult:
    run_dir: str
    report: EvaluationReport
    manifest: dict


class PlanRunner:
    """Runs one plan stage by stage, skipping stages the ledger marks done."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.run_dir = plan.out
        self.stage_hashes: Dict[str, str] = {}
        self.corpus_digest: Optional[str] = None

    def _path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    def _stage(self, name: str, payload, artifact: str, work, reuse: bool = True) -> str:
        digest = config_hash({'stage': name, 'payload': payload})
        self.stage_hashes[name] = digest
        if reuse and database.stage_done(self.run_dir, name, digest) and os.path.exists(artifact):
            logger.info('[run] %s: up to date', name)
            return digest
        database.begin_stage(self.run_dir, name, digest, os.path.relpath(artifact, self.run_dir))
        try:
            work()
        except Exception:
            database.finish_stage(self.run_dir, name, database.STATUS_FAILED)
            raise
        database.finish_stage(self.run_dir, name)
        return digest

    # -- stages

    def prepare_corpus(self) -> Corpus:
        plan = self.plan
        if plan.corpus.source == 'load':
            manifest = os.path.join(plan.corpus_dir, 'manifest.json')
            self._stage('corpus', {'path': os.path.abspath(plan.corpus_dir),
                                  'content': content_digest(plan.corpus_dir)}, manifest,
                        lambda: load_corpus(plan.corpus_dir), reuse=False)
        else:
            def generate():
                if os.path.isdir(plan.corpus_dir):
                    shutil.rmtree(plan.corpus_dir)
                save_corpus(generate_corpus(plan.corpus.generator), plan.corpus_dir)
            self._stage('corpus', plan.corpus.to_mapping(), os.path.join(plan.corpus_dir, 'manifest.json'),
                        generate)
        # Downstream stages key on the records themselves, not only the split layout.
        self.corpus_digest = content_digest(plan.corpus_dir)
        return load_corpus(plan.corpus_dir)

    def build_sets(self, corpus: Corpus, jobs: Sequence[TrainingJob]) -> Dict[str, dict]:
        os.makedirs(self._path('sets'), exist_ok=True)
        summary = {}
        for job in jobs:
            path = self._path('sets', f'{job.name}.json')
            self._stage(f'set:{job.name}', {'corpus': corpus.fingerprint, 'content': self.corpus_digest,
                                              'recipe': job.recipe.to_mapping()},
                        path, lambda job=job, path=path: save_training_set(
                            build_training_set(corpus, job.recipe), path))
            training_set = load_training_set(path)
            expected = expected_set_size(job.recipe, corpus)
            if training_set.size != expected:
                raise HarnessError(f'{job.name}: training set has {training_set.size} items, expected {expected}')
            summary[job.name] = {'strategy': job.strategy, 'recipe': job.recipe.to_mapping(),
                                 'size': training_set.size, 'expected_size': expected,
                                 'unique_counts': training_set.unique_counts}
            logger.info('[sets] %s: %d items', job.name, training_set.size)
        return summary

    def _model_paths(self, job: TrainingJob, variant: Variant) -> Tuple[str, str]:
        stem = self._path('models', f'{job.name}.{variant.value}')
        return stem + '.msam', stem + '.log.csv'

    def train_models(self, corpus: Corpus, jobs: Sequence[TrainingJob]) -> Dict[str, dict]:
        plan = self.plan
        os.makedirs(self._path('models'), exist_ok=True)
        seeds = {}
        pending = []
        for job in jobs:
            n_speakers = corpus.n_speakers if job.multi_speaker else 1
            for variant, topology in ((Variant.SAR, plan.sar_topology(corpus, n_speakers)),
                                      (Variant.DAR, plan.dar_topology(corpus, n_speakers))):
                label = f'{job.name}.{variant.value}'
                config = plan.training_config(job.name, variant)
                checkpoint, log = self._model_paths(job, variant)
                name = f'train:{label}'
                payload = {'set': self.stage_hashes[f'set:{job.name}'], 'topology': topology.to_mapping(),
                           'training': config.to_mapping()}
                digest = config_hash({'stage': name, 'payload': payload})
                self.stage_hashes[name] = digest
                seeds[label] = {'init_seed': config.init_seed, 'shuffle_seed': config.shuffle_seed,
                                'config_hash': digest}
                if database.stage_done(self.run_dir, name, digest) and os.path.exists(checkpoint):
                    logger.info('[run] %s: up to date', name)
                    continue
                database.begin_stage(self.run_dir, name, digest, os.path.relpath(checkpoint, self.run_dir))
                pending.append((name, {
                    'corpus_dir': plan.corpus_dir,
                    'set_path': self._path('sets', f'{job.name}.json'),
                    'topology': topology.to_mapping(),
                    'training': config.to_mapping(),
                    'label': job.name,
                    'checkpoint': checkpoint,
                    'log': log,
                }))

        failures = []
        if pending and plan.workers > 1:
            logger.info('[run] training %d models on %d workers', len(pending), plan.workers)
            with ProcessPoolExecutor(max_workers=plan.workers) as pool:
                futures = [(name, pool.submit(_train_worker, task)) for name, task in pending]
                for name, future in futures:
                    try:
                        future.result()
                        database.finish_stage(self.run_dir, name)
                    except Exception as e:
                        database.finish_stage(self.run_dir, name, database.STATUS_FAILED)
                        failures.append(f'{name}: {e}')
        else:
            for name, task in pending:
                try:
                    _train_worker(task)
                    database.finish_stage(self.run_dir, name)
                except Exception as e:
                    database.finish_stage(self.run_dir, name, database.STATUS_FAILED)
                    failures.append(f'{name}: {e}')
        if failures:
            raise HarnessError('model training failed: ' + '; '.join(failures))
        return seeds

    def synthesize_outputs(self, corpus: Corpus, jobs: Sequence[TrainingJob]) -> None:
        by_strategy: Dict[str, List[TrainingJob]] = {}
        for job in jobs:
            by_strategy.setdefault(job.strategy, []).append(job)
        for strategy, members in by_strategy.items():
            directory = self.plan.output_dir(strategy)
            upstream = [self.stage_hashes[f'train:{j.name}.{v.value}'] for j in members for v in Variant]

            def work(members=members, directory=directory):
                tracks = {}
                for job in members:
                    # Checkpoints are always read back so fresh and resumed runs agree.
                    sar = TrainedModel.load(self._model_paths(job, Variant.SAR)[0])
                    dar = TrainedModel.load(self._model_paths(job, Variant.DAR)[0])
                    tracks.update(synthesize_split(corpus, sar, dar, job.speakers))
                if os.path.isdir(directory):
                    shutil.rmtree(directory)
                save_tracks(directory, tracks)
                logger.info('[synth] %s: %d test utterances', os.path.basename(directory), len(tracks))

            self._stage(f'synth:{strategy}', upstream, directory, work)

    def combine_ensemble(self) -> None:
        if 'EN' not in self.plan.strategies:
            return
        directory = self.plan.output_dir('EN')

        def work():
            combined = combine_output_sets([load_tracks(self.plan.output_dir(s)) for s in ENSEMBLE_MEMBERS])
            if os.path.isdir(directory):
                shutil.rmtree(directory)
            save_tracks(directory, combined)
            logger.info('[combine] EN: %d utterances from %s', len(combined), '+'.join(ENSEMBLE_MEMBERS))

        upstream = [self.stage_hashes[f'synth:{s}'] for s in ENSEMBLE_MEMBERS]
        self._stage('combine:EN', upstream, directory, work)

    def check_ensemble(self, corpus: Corpus, report: EvaluationReport) -> dict:
        """Per-frame contraction of the combined spectra, then the per-speaker MCD consequence."""
        members = [load_tracks(self.plan.output_dir(s)) for s in ENSEMBLE_MEMBERS]
        combined = combine_output_sets(members)
        worst = -np.inf
        frames = 0
        for utt_id, track in combined.items():
            gaps = spectral_contraction_gaps([m[utt_id] for m in members], track,
                                             corpus.utterance(utt_id).acoustic.mgc)
            worst = max(worst, float(gaps.max()))
            frames += gaps.size
        if worst > CONTRACTION_TOLERANCE:
            raise HarnessError(f'ensemble spectral error exceeds the subsystem mean by {worst:g}')
        metrics = report.metrics
        per_speaker = {}
        for spk in list(corpus.speaker_ids) + [OVERALL]:
            en = metrics.get('EN', spk).mcd_db
            mean = float(np.mean([metrics.get(s, spk).mcd_db for s in ENSEMBLE_MEMBERS]))
            per_speaker[spk] = {'EN': en, 'mean_E': mean, 'holds': en <= mean + MCD_HOLDS_TOLERANCE_DB}
        logger.info('[evaluate] ensemble contraction holds on %d frames (max gap %.3g)', frames, worst)
        return {'frames_checked': frames, 'max_gap': worst, 'mcd': per_speaker}

    def evaluate(self, corpus: Corpus) -> EvaluationReport:
        outputs = {s: load_tracks(self.plan.output_dir(s)) for s in self.plan.strategies}
        report = build_reports(corpus, outputs)
        if 'EN' in self.plan.strategies:
            report.checks['ensemble_contraction'] = self.check_ensemble(corpus, report)
        return report

    def run(self) -> RunResult:
        plan = self.plan
        database.open_ledger(self.run_dir)
        plan_digest = config_hash(plan.to_mapping())
        run_id = database.start_run(self.run_dir, plan_digest)
        with open(self._path(RESOLVED_CONFIG_NAME), 'w', encoding='utf-8') as f:
            yaml.safe_dump(plan.to_mapping(), f, sort_keys=True)
        logger.info('[run] plan %s -> %s (strategies %s)', plan_digest[:12], self.run_dir,
                    ','.join(plan.strategies))
        try:
            corpus = self.prepare_corpus()
            jobs = plan_jobs(plan, corpus)
            sets = self.build_sets(corpus, jobs)
            seeds = self.train_models(corpus, jobs)
            self.synthesize_outputs(corpus, jobs)
            self.combine_ensemble()
            report = self.evaluate(corpus)
            report.preferences.extend(simulate_preference(plan, pair, corpus=corpus) for pair in plan.pairs)
            reporting.write_run_reports(self.run_dir, report, figures=plan.report.figures,
                                        pdf=plan.report.pdf)
            manifest = {
                'plan_hash': plan_digest,
                'seed': plan.seed,
                'corpus_fingerprint': corpus.fingerprint,
                'corpus_content': self.corpus_digest,
                'train_counts': corpus.train_counts(),
                'training_sets': sets,
                'models': seeds,
                'ab_seeds': {f'{a}-{b}': derive_seed(plan.seed, f'ab:{a}-{b}') for a, b in plan.pairs},
                'stage_hashes': dict(sorted(self.stage_hashes.items())),
                'checks': report.checks,
            }
            with open(self._path(MANIFEST_NAME), 'w', encoding='utf-8') as f:
                json.dump(manifest, f, indent=1, sort_keys=True)
        except ToolkitError:
            database.finish_run(self.run_dir, run_id, database.STATUS_FAILED)
            raise
        except Exception as e:
            database.finish_run(self.run_dir, run_id, database.STATUS_FAILED)
            raise HarnessError(f'plan failed: {e}') from e
        database.finish_run(self.run_dir, run_id)
        logger.info('[run] done: %s', self.run_dir)
        return RunResult(self.run_dir, report, manifest)


def run(plan: ExperimentPlan) -> RunResult:
    return PlanRunner(plan).run()
