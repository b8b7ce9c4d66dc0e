import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

import database
from acoustic_model import Variant
from corpus import Strategy, TrainingSetRecipe, load_corpus
from errors import ValidationError
from evaluation import OVERALL
from harness import (ALL_STRATEGIES, CONTRACTION_TOLERANCE, MANIFEST_NAME, ExperimentPlan, JudgeModel,
                     config_hash, expected_set_size, judge_preference, plan_jobs, run,
                     simulate_preference)

CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')


def tiny_plan(out, **changes):
    data = {
        'out': str(out),
        'seed': 3,
        'corpus': {'generator': {'per_speaker_train_counts': [6, 10, 16], 'val_count': 2, 'test_count': 3,
                                 'd_lin': 6, 'd_mgc': 4, 'frames_per_utterance': [6, 10],
                                 'feature_config': {'n_f0_bins': 31}}},
        'draws_per_speaker': 8,
        'sar_widths': [6, 6, 4, 4],
        'dar_widths': [6, 6, 4, 4],
        'embed_dim': 2,
        'training': {'n_epochs': 2},
        'report': {'figures': False},
    }
    data.update(changes)
    return ExperimentPlan.from_mapping(data)


def read(path):
    with open(path, 'rb') as f:
        return f.read()


class TestPlan:
    def test_strategies_are_normalized(self):
        plan = ExperimentPlan(strategies=('mu', 'sd'))
        assert plan.strategies == ('SD', 'MU')
        assert plan.pairs == (('MU', 'SD'),)
        assert ExperimentPlan().pairs == (('MU', 'SD'), ('EN', 'SD'), ('EN', 'MU'))

    @pytest.mark.parametrize('changes', [
        {'strategies': ('MU', 'XX')},
        {'strategies': ()},
        {'strategies': ('EN', 'E1', 'E2')},
        {'workers': 0},
        {'draws_per_speaker': 0},
        {'sar_widths': (8, 8, 4)},
        {'ab_pairs': (('EN', 'OV'),), 'strategies': ('MU', 'OV')},
    ])
    def test_invalid_plans(self, changes):
        with pytest.raises(ValidationError):
            ExperimentPlan(**changes)

    def test_unknown_keys_are_rejected(self):
        with pytest.raises(ValidationError, match='colour'):
            ExperimentPlan.from_mapping({'colour': 'red'})
        with pytest.raises(ValidationError):
            ExperimentPlan.from_mapping({'judge': {'patience': 1}})
        with pytest.raises(ValidationError):
            ExperimentPlan.from_mapping({'corpus': {'source': 'load'}})

    def test_plan_seed_drives_the_generator(self):
        plan = ExperimentPlan(seed=11)
        assert plan.corpus.generator.master_seed == 11
        assert plan.with_overrides(seed=12).corpus.generator.master_seed == 12

    def test_generator_seed_must_agree_with_plan_seed(self):
        with pytest.raises(ValidationError, match='master_seed'):
            ExperimentPlan.from_mapping({'seed': 1, 'corpus': {'generator': {'master_seed': 2}}})
        adopted = ExperimentPlan.from_mapping({'corpus': {'generator': {'master_seed': 5}}})
        assert adopted.seed == 5 and adopted.corpus.generator.master_seed == 5
        assert ExperimentPlan.from_mapping({'seed': 4, 'corpus': {'generator': {'master_seed': 4}}}).seed == 4

    def test_overrides_filter_explicit_pairs(self):
        plan = ExperimentPlan(ab_pairs=(('MU', 'SD'), ('EN', 'MU')))
        narrowed = plan.with_overrides(strategies=['mu', 'sd'], out='elsewhere', workers=2)
        assert narrowed.pairs == (('MU', 'SD'),)
        assert narrowed.out == 'elsewhere' and narrowed.workers == 2

    def test_mapping_round_trip_and_hash(self):
        plan = tiny_plan('x')
        again = ExperimentPlan.from_mapping(plan.to_mapping())
        assert again.to_mapping() == plan.to_mapping()
        assert config_hash(again.to_mapping()) == config_hash(plan.to_mapping())
        assert config_hash(plan.with_overrides(seed=4).to_mapping()) != config_hash(plan.to_mapping())

    def test_shipped_configs_load(self):
        smoke = ExperimentPlan.from_yaml(os.path.join(CONFIGS, 'smoke_plan.yaml'))
        assert smoke.corpus.generator.n_speakers == 3
        full = ExperimentPlan.from_yaml(os.path.join(CONFIGS, 'default_plan.yaml'))
        assert full.strategies == ALL_STRATEGIES
        with pytest.raises(ValidationError):
            ExperimentPlan.from_yaml(os.path.join(CONFIGS, 'missing.yaml'))


class TestJobs:
    def test_sd_expands_per_speaker_and_en_trains_nothing(self, reference_corpus):
        jobs = plan_jobs(ExperimentPlan(), reference_corpus)
        names = [j.name for j in jobs]
        assert names[:10] == [f'SD-{spk}' for spk in reference_corpus.speaker_ids]
        assert names[10:] == ['UN', 'MU', 'OV', 'E1', 'E2', 'E3']
        boot = [j.recipe for j in jobs if j.strategy in ('E1', 'E2', 'E3')]
        assert all(r.strategy is Strategy.BOOTSTRAP and r.draws_per_speaker == 300 for r in boot)
        assert len({r.seed for r in boot}) == 3

    def test_job_names_and_training_seeds(self, reference_corpus):
        plan = ExperimentPlan(seed=5)
        jobs = plan_jobs(plan, reference_corpus)
        assert [plan.job_name(j.recipe) for j in jobs] == [j.name for j in jobs]
        stray = TrainingSetRecipe(Strategy.BOOTSTRAP, seed=12345, draws_per_speaker=3)
        assert plan.job_name(stray) == stray.label
        sar = plan.training_config('MU', Variant.SAR)
        assert sar == plan.training_config('MU', Variant.SAR)
        assert sar.init_seed != plan.training_config('MU', Variant.DAR).init_seed
        assert sar.init_seed != ExperimentPlan(seed=6).training_config('MU', Variant.SAR).init_seed

    def test_expected_sizes(self, reference_corpus):
        assert expected_set_size(TrainingSetRecipe(Strategy.SD, speaker='XS01'), reference_corpus) == 735
        assert expected_set_size(TrainingSetRecipe(Strategy.UN), reference_corpus) == 7350
        assert expected_set_size(TrainingSetRecipe(Strategy.MU), reference_corpus) == 32076
        assert expected_set_size(TrainingSetRecipe(Strategy.OV), reference_corpus) == 87500
        assert expected_set_size(TrainingSetRecipe(Strategy.BOOTSTRAP, draws_per_speaker=300),
                                 reference_corpus) == 3000


class TestJudge:
    def _utterances(self, n):
        owners = {f'u{i:04d}': 'A' if i % 2 else 'B' for i in range(n)}
        return owners, sorted(set(owners.values()))

    def test_clear_winner_takes_every_judgement(self):
        owners, speakers = self._utterances(20)
        tally = judge_preference(('X', 'Y'), {u: 1.0 for u in owners}, {u: 9.0 for u in owners},
                                 owners, speakers, JudgeModel(sigma=0.0, n_listeners=3), seed=0)
        assert tally.overall == (60, 0)
        assert tally.per_speaker == {'A': (30, 0), 'B': (30, 0)}
        assert tally.significant()

    def test_self_comparison_falls_back_to_coin_flips(self):
        owners, speakers = self._utterances(1000)
        same = {u: 5.0 for u in owners}
        tally = judge_preference(('MU', 'MU'), same, same, owners, speakers,
                                 JudgeModel(sigma=0.0, n_listeners=1), seed=1)
        assert sum(tally.overall) == 1000
        assert abs(tally.preference_a() - 0.5) < 0.1

    def test_noise_swamps_small_differences(self):
        owners, speakers = self._utterances(4000)
        tally = judge_preference(('X', 'Y'), {u: 5.0 for u in owners}, {u: 5.1 for u in owners},
                                 owners, speakers, JudgeModel(sigma=1e6, n_listeners=1), seed=2)
        assert abs(tally.preference_a() - 0.5) < 0.05

    def test_same_seed_same_tally(self):
        owners, speakers = self._utterances(50)
        rng = np.random.default_rng(0)
        a = {u: float(v) for u, v in zip(owners, rng.uniform(4, 6, 50))}
        b = {u: float(v) for u, v in zip(owners, rng.uniform(4, 6, 50))}
        judge = JudgeModel()
        assert judge_preference(('X', 'Y'), a, b, owners, speakers, judge, 7).per_speaker == \
            judge_preference(('X', 'Y'), a, b, owners, speakers, judge, 7).per_speaker


@pytest.fixture(scope='module')
def finished_run(tmp_path_factory):
    return run(tiny_plan(tmp_path_factory.mktemp('plan') / 'run'))


class TestRun:
    def test_report_shape(self, finished_run):
        metrics = finished_run.report.metrics
        assert metrics.strategies == list(ALL_STRATEGIES)
        assert len(metrics.rows) == len(ALL_STRATEGIES) * (3 + 1)
        assert metrics.get('SD', OVERALL).n_frames_scored == metrics.get('EN', OVERALL).n_frames_scored
        assert [t.label for t in finished_run.report.preferences] == ['MU-SD', 'EN-SD', 'EN-MU']

    def test_artifacts(self, finished_run):
        run_dir = finished_run.run_dir
        for rel in ('reports/metrics.csv', 'reports/summary.json', 'reports/preferences.csv',
                    'plots/mcd_db.csv', 'plots/preference.csv', 'resolved_config.yaml',
                    'corpus/manifest.json', 'sets/MU.json', 'models/MU.sar.msam', 'models/E2.dar.log.csv',
                    'outputs/EN', database.DB_NAME, MANIFEST_NAME):
            assert os.path.exists(os.path.join(run_dir, rel)), rel
        assert not os.path.exists(os.path.join(run_dir, 'figures'))

    def test_manifest_records_sets_and_seeds(self, finished_run):
        manifest = finished_run.manifest
        assert manifest['seed'] == 3
        sets = manifest['training_sets']
        assert sets['UN']['size'] == 6 * 3
        assert sets['MU']['size'] == 6 + 10 + 16
        assert sets['OV']['size'] == 16 * 3
        assert sets['E1']['size'] == 8 * 3
        assert sets['SD-SPK00']['size'] == 6
        assert set(manifest['models']) >= {'MU.sar', 'MU.dar', 'SD-SPK02.dar', 'E3.sar'}
        assert set(manifest['ab_seeds']) == {'MU-SD', 'EN-SD', 'EN-MU'}
        with open(os.path.join(finished_run.run_dir, MANIFEST_NAME), encoding='utf-8') as f:
            assert json.load(f)['plan_hash'] == manifest['plan_hash']

    def test_ensemble_contracts(self, finished_run):
        check = finished_run.report.checks['ensemble_contraction']
        assert check['max_gap'] <= CONTRACTION_TOLERANCE
        assert check['frames_checked'] > 0
        for row in check['mcd'].values():
            assert row['EN'] <= row['mean_E'] + 1e-4
            assert row['holds']

    def test_rerun_reuses_every_stage(self, finished_run):
        before = read(os.path.join(finished_run.run_dir, 'reports', 'metrics.csv'))
        again = run(tiny_plan(finished_run.run_dir))
        assert read(os.path.join(again.run_dir, 'reports', 'metrics.csv')) == before
        assert all(row['attempts'] == 1 and row['status'] == database.STATUS_DONE
                   for row in database.stage_rows(finished_run.run_dir))

    def test_same_plan_in_a_new_directory_reproduces_reports(self, finished_run, tmp_path):
        other = run(tiny_plan(tmp_path / 'copy'))
        for rel in ('reports/metrics.csv', 'reports/preferences.csv', 'plots/mcd_db.csv'):
            assert read(os.path.join(other.run_dir, rel)) == read(os.path.join(finished_run.run_dir, rel)), rel
        assert other.manifest['stage_hashes'] == finished_run.manifest['stage_hashes']

    def test_worker_pool_matches_serial_training(self, tmp_path):
        serial = run(tiny_plan(tmp_path / 'serial', strategies=['MU', 'UN']))
        pooled = run(tiny_plan(tmp_path / 'pooled', strategies=['MU', 'UN'], workers=2))
        assert read(os.path.join(serial.run_dir, 'reports', 'metrics.csv')) == \
            read(os.path.join(pooled.run_dir, 'reports', 'metrics.csv'))

    def test_changed_corpus_retrains_in_the_same_directory(self, tmp_path):
        plan = tiny_plan(tmp_path / 'resume', strategies=['MU'])
        first = run(plan)
        checkpoint = os.path.join(first.run_dir, 'models', 'MU.sar.msam')
        before = read(checkpoint)
        generator = dataclasses.replace(plan.corpus.generator, noise_sigma=2.0, bias_scale=5.0)
        second = run(dataclasses.replace(plan, corpus=dataclasses.replace(plan.corpus, generator=generator)))
        assert read(checkpoint) != before
        assert second.manifest['corpus_content'] != first.manifest['corpus_content']
        attempts = {row['name']: row['attempts'] for row in database.stage_rows(second.run_dir)}
        for stage in ('corpus', 'set:MU', 'train:MU.sar', 'train:MU.dar', 'synth:MU'):
            assert attempts[stage] == 2, stage

    def test_simulated_preference_needs_outputs(self, finished_run, tmp_path):
        corpus = load_corpus(os.path.join(finished_run.run_dir, 'corpus'))
        with pytest.raises(ValidationError, match='no outputs'):
            simulate_preference(tiny_plan(tmp_path / 'empty'), ('MU', 'SD'), corpus=corpus)

    def test_simulated_preference_is_even_under_overwhelming_noise(self, finished_run):
        corpus = load_corpus(os.path.join(finished_run.run_dir, 'corpus'))
        plan = tiny_plan(finished_run.run_dir)
        loud = JudgeModel(sigma=1e6, n_listeners=50)
        wins_a = total = 0
        for seed in range(40):
            a, b = simulate_preference(plan.with_overrides(seed=seed), ('MU', 'SD'), judge=loud,
                                       corpus=corpus).overall
            wins_a += a
            total += a + b
        assert total == 40 * 9 * 50
        assert abs(wins_a / total - 0.5) < 0.02

    def test_invalid_plan_does_no_work(self, tmp_path):
        with pytest.raises(ValidationError):
            tiny_plan(tmp_path / 'bad', strategies=['EN'])
        assert not os.path.exists(tmp_path / 'bad')


@pytest.mark.slow
def test_pooling_helps_the_smallest_speakers(tmp_path):
    plan = ExperimentPlan.from_yaml(os.path.join(CONFIGS, 'acceptance_plan.yaml'))
    plans = [plan.with_overrides(seed=seed, out=str(tmp_path / f'seed{seed}')) for seed in range(10)]
    with ProcessPoolExecutor(max_workers=min(len(plans), os.cpu_count() or 1)) as pool:
        results = list(pool.map(run, plans))
    wins = 0
    for result in results:
        table = result.report.metrics.mcd_table()
        smallest = sorted(result.report.metrics.speakers, key=lambda s: result.manifest['train_counts'][s])[:2]
        if all(table['MU'][spk] < table['SD'][spk] for spk in smallest):
            wins += 1
    assert wins >= 8
