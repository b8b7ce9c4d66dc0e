import csv
import os

import pytest
import yaml

from main import EXIT_FAILURE, EXIT_OK, EXIT_VALIDATION, main

GENERATOR = {'generator': {'per_speaker_train_counts': [4, 6], 'val_count': 1, 'test_count': 2,
                           'd_lin': 4, 'd_mgc': 3, 'frames_per_utterance': [5, 7],
                           'feature_config': {'n_f0_bins': 15}}}
PLAN = {'sar_widths': [4, 4, 3, 3], 'dar_widths': [4, 4, 3, 3], 'embed_dim': 2, 'training': {'n_epochs': 1}}


@pytest.fixture
def workspace(tmp_path):
    for name, data in (('gen.yaml', GENERATOR), ('plan.yaml', PLAN)):
        with open(tmp_path / name, 'w', encoding='utf-8') as f:
            yaml.safe_dump(data, f)
    return tmp_path


def test_step_by_step_pipeline(workspace):
    w = str(workspace)
    corpus = os.path.join(w, 'corpus')
    assert main(['generate-corpus', '--config', os.path.join(w, 'gen.yaml'), '--out', corpus]) == EXIT_OK
    assert main(['build-set', '--corpus', corpus, '--strategy', 'mu', '--out', os.path.join(w, 'mu.json')]) == EXIT_OK
    for variant in ('sar', 'dar'):
        assert main(['train', '--corpus', corpus, '--set', os.path.join(w, 'mu.json'), '--variant', variant,
                     '--config', os.path.join(w, 'plan.yaml'),
                     '--out', os.path.join(w, f'mu.{variant}.msam')]) == EXIT_OK
    assert os.path.exists(os.path.join(w, 'mu.sar.log.csv'))
    for name in ('MU', 'OTHER'):
        assert main(['synthesize', '--corpus', corpus, '--sar', os.path.join(w, 'mu.sar.msam'),
                     '--dar', os.path.join(w, 'mu.dar.msam'), '--out', os.path.join(w, name)]) == EXIT_OK
    assert main(['combine', '--inputs', os.path.join(w, 'MU'), os.path.join(w, 'OTHER'),
                 '--out', os.path.join(w, 'EN')]) == EXIT_OK
    assert main(['evaluate', '--corpus', corpus, '--outputs', f'MU={os.path.join(w, "MU")}',
                 f'EN={os.path.join(w, "EN")}', '--out', os.path.join(w, 'reports')]) == EXIT_OK
    with open(os.path.join(w, 'reports', 'reports', 'metrics.csv'), newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    assert {r['strategy'] for r in rows} == {'MU', 'EN'}
    # identical inputs make the ensemble equal its members
    mcd = {r['strategy']: r['value'] for r in rows if r['metric'] == 'mcd_db' and r['speaker'] == 'ALL'}
    assert mcd['MU'] == mcd['EN']

    tally = os.path.join(w, 'ab.csv')
    assert main(['ab-test', '--corpus', corpus, '--a', f'EN={os.path.join(w, "EN")}',
                 '--b', f'MU={os.path.join(w, "MU")}', '--seed', '1', '--out', tally]) == EXIT_OK
    with open(tally, newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    overall = rows[-1]
    assert overall['speaker'] == 'ALL'
    assert int(overall['wins_a']) + int(overall['wins_b']) == 2 * 2 * 3


def test_train_verb_reproduces_run_plan_checkpoints(workspace):
    w = str(workspace)
    config = os.path.join(w, 'full.yaml')
    with open(config, 'w', encoding='utf-8') as f:
        yaml.safe_dump(dict(PLAN, corpus=GENERATOR, strategies=['SD', 'MU'], report={'figures': False}), f)
    run_dir = os.path.join(w, 'run')
    assert main(['run-plan', '--config', config, '--out', run_dir]) == EXIT_OK
    for job in ('MU', 'SD-SPK00'):
        out = os.path.join(w, f'{job}.dar.msam')
        assert main(['train', '--corpus', os.path.join(run_dir, 'corpus'),
                     '--set', os.path.join(run_dir, 'sets', f'{job}.json'), '--variant', 'dar',
                     '--config', config, '--out', out]) == EXIT_OK
        with open(out, 'rb') as mine, open(os.path.join(run_dir, 'models', f'{job}.dar.msam'), 'rb') as theirs:
            assert mine.read() == theirs.read(), job


def test_validation_errors_exit_with_two(workspace):
    w = str(workspace)
    assert main(['build-set', '--corpus', os.path.join(w, 'nothing'), '--strategy', 'MU',
                 '--out', os.path.join(w, 'x.json')]) == EXIT_VALIDATION
    corpus = os.path.join(w, 'corpus')
    assert main(['generate-corpus', '--config', os.path.join(w, 'gen.yaml'), '--out', corpus]) == EXIT_OK
    assert main(['build-set', '--corpus', corpus, '--strategy', 'SD', '--out', os.path.join(w, 'x.json')]) \
        == EXIT_VALIDATION
    assert main(['evaluate', '--corpus', corpus, '--outputs', 'no-equals-sign',
                 '--out', os.path.join(w, 'r')]) == EXIT_VALIDATION
    assert main(['run-plan', '--config', os.path.join(w, 'missing.yaml')]) == EXIT_VALIDATION
    assert main(['generate-corpus', '--config', os.path.join(w, 'missing.yaml'),
                 '--out', os.path.join(w, 'c2')]) == EXIT_VALIDATION
    assert main(['run-plan', '--config', os.path.join(w, 'plan.yaml'), '--strategies', 'EN',
                 '--out', os.path.join(w, 'run')]) == EXIT_VALIDATION


def test_runtime_failures_exit_with_three(workspace):
    w = str(workspace)
    corpus = os.path.join(w, 'corpus')
    assert main(['generate-corpus', '--config', os.path.join(w, 'gen.yaml'), '--out', corpus]) == EXIT_OK
    broken = os.path.join(w, 'broken.msam')
    with open(broken, 'wb') as f:
        f.write(b'not a checkpoint at all')
    assert main(['synthesize', '--corpus', corpus, '--sar', broken, '--dar', broken,
                 '--out', os.path.join(w, 'out')]) == EXIT_FAILURE


def test_unknown_verb_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(['frobnicate'])
    assert info.value.code == 2
