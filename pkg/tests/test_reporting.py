import csv
import os

import pytest

import reporting
from errors import ValidationError
from evaluation import OVERALL, EvaluationReport, MetricReport, MetricRow, PreferenceTally


@pytest.fixture
def report():
    rows = [
        MetricRow('MU', 'S1', 4.25, 0.9, 0.1, 40),
        MetricRow('MU', 'S2', 5.5, None, 0.2, 30),
        MetricRow('MU', OVERALL, 4.75, 0.85, 0.15, 70),
        MetricRow('SD', 'S1', 6.0, 0.7, 0.3, 40),
        MetricRow('SD', 'S2', 6.5, 0.6, 0.25, 30),
        MetricRow('SD', OVERALL, 6.2, 0.65, 0.28, 70),
    ]
    tally = PreferenceTally(('MU', 'SD'), {'S1': (9, 3), 'S2': (7, 5)})
    return EvaluationReport(MetricReport(rows), [tally], {'note': 'ok'})


def read_csv(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


def test_metrics_csv_is_long_format(report, tmp_path):
    path = str(tmp_path / 'metrics.csv')
    reporting.write_metrics_csv(path, report.metrics)
    rows = read_csv(path)
    assert len(rows) == 6 * len(reporting.METRICS)
    assert rows[0] == {'strategy': 'MU', 'speaker': 'S1', 'metric': 'mcd_db', 'value': '4.25'}
    missing = [r for r in rows if r['speaker'] == 'S2' and r['strategy'] == 'MU' and r['metric'] == 'f0_corr']
    assert missing[0]['value'] == ''


def test_plot_data_has_one_series_per_strategy(report, tmp_path):
    written = reporting.write_plot_data(str(tmp_path), report)
    assert set(written) == {'mcd_db', 'f0_corr', 'vuv_error_rate', 'preference'}
    rows = read_csv(written['mcd_db'])
    assert [(r['series'], r['x']) for r in rows[:3]] == [('MU', 'S1'), ('MU', 'S2'), ('MU', OVERALL)]
    prefs = read_csv(written['preference'])
    assert prefs[-1] == {'series': 'MU-SD', 'x': OVERALL, 'y': repr(16 / 24)}


def test_run_reports_round_trip(report, tmp_path):
    reporting.write_run_reports(str(tmp_path), report, figures=False)
    loaded = reporting.load_report(str(tmp_path))
    assert loaded.metrics.rows == report.metrics.rows
    assert loaded.preferences[0].per_speaker == report.preferences[0].per_speaker
    assert loaded.checks == {'note': 'ok'}
    prefs = read_csv(str(tmp_path / 'reports' / 'preferences.csv'))
    assert [r['speaker'] for r in prefs] == ['S1', 'S2', OVERALL]
    with pytest.raises(ValidationError):
        reporting.load_report(str(tmp_path / 'empty'))


def test_figures_and_pdf(report, tmp_path):
    paths = reporting.save_figures(str(tmp_path / 'figures'), report)
    assert sorted(os.path.basename(p) for p in paths) == \
        ['f0_corr.png', 'mcd_db.png', 'preference.png', 'vuv_error_rate.png']
    assert all(os.path.getsize(p) > 0 for p in paths)
    pdf = reporting.export_pdf(str(tmp_path / 'report.pdf'), report)
    with open(pdf, 'rb') as f:
        assert f.read(5) == b'%PDF-'
    with pytest.raises(ValidationError):
        reporting.export_pdf(str(tmp_path / 'none.pdf'), EvaluationReport(MetricReport()))
