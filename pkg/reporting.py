"""Report files for a finished run: metric CSV/JSON, plot data, figures, PDF."""
import csv
import json
import logging
import os
from typing import Dict, List, Sequence

from fpdf import FPDF
from matplotlib.figure import Figure

from errors import ValidationError
from evaluation import OVERALL, EvaluationReport, MetricReport, MetricRow, PreferenceTally

logger = logging.getLogger(__name__)

METRICS = ('mcd_db', 'f0_corr', 'vuv_error_rate', 'n_frames_scored')
METRIC_LABELS = {
    'mcd_db': 'MCD (dB)',
    'f0_corr': 'F0 correlation',
    'vuv_error_rate': 'V/UV error rate',
}

REPORTS_DIR = 'reports'
PLOTS_DIR = 'plots'
FIGURES_DIR = 'figures'
SUMMARY_NAME = 'summary.json'


def _cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path: str, metrics: MetricReport) -> None:
    """One row per strategy x speaker x metric."""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['strategy', 'speaker', 'metric', 'value'])
        for row in metrics.rows:
            values = row.as_dict()
            for metric in METRICS:
                writer.writerow([row.strategy, row.speaker, metric, _cell(values[metric])])


def write_preferences_csv(path: str, preferences: Sequence[PreferenceTally]) -> None:
    columns = ['pair', 'speaker', 'wins_a', 'wins_b', 'preference_a', 'p_value', 'significant']
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for tally in preferences:
            for row in tally.rows():
                writer.writerow([_cell(row[c]) for c in columns])


def summary(report: EvaluationReport) -> dict:
    return {
        'metrics': [r.as_dict() for r in report.metrics.rows],
        'preferences': [{'pair': list(t.pair), 'per_speaker': {k: list(v) for k, v in t.per_speaker.items()},
                         'rows': t.rows()} for t in report.preferences],
        'checks': report.checks,
    }


def write_summary_json(path: str, report: EvaluationReport) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(summary(report), f, indent=1, sort_keys=True)


def load_report(run_dir: str) -> EvaluationReport:
    path = os.path.join(run_dir, REPORTS_DIR, SUMMARY_NAME)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f'no report summary in {run_dir}') from None
    metrics = MetricReport([MetricRow(**r) for r in data['metrics']])
    preferences = [PreferenceTally(tuple(p['pair']), {k: tuple(v) for k, v in p['per_speaker'].items()})
                   for p in data['preferences']]
    return EvaluationReport(metrics, preferences, data.get('checks', {}))


# ------------------------------------------------------------------ plot data

def metric_series(metrics: MetricReport, metric: str) -> List[tuple]:
    """(series, x, y) triples: one series per strategy, x = speaker (pooled row last)."""
    series = []
    for strategy in metrics.strategies:
        for speaker in metrics.speakers + [OVERALL]:
            value = getattr(metrics.get(strategy, speaker), metric)
            series.append((strategy, speaker, value))
    return series


def preference_series(preferences: Sequence[PreferenceTally]) -> List[tuple]:
    return [(t.label, speaker, t.preference_a(speaker))
            for t in preferences for speaker in list(t.per_speaker) + [OVERALL]]


def write_plot_data(plots_dir: str, report: EvaluationReport) -> Dict[str, str]:
    os.makedirs(plots_dir, exist_ok=True)
    written = {}
    tables = {metric: metric_series(report.metrics, metric) for metric in METRIC_LABELS}
    if report.preferences:
        tables['preference'] = preference_series(report.preferences)
    for name, rows in tables.items():
        path = os.path.join(plots_dir, f'{name}.csv')
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['series', 'x', 'y'])
            for s, x, y in rows:
                writer.writerow([s, x, _cell(y)])
        written[name] = path
    return written


# ------------------------------------------------------------------ figures

def metric_figure(metrics: MetricReport, metric: str = 'mcd_db') -> Figure:
    """Grouped bars: speakers on the x axis, one bar per strategy."""
    fig = Figure(figsize=(10, 4), tight_layout=True)
    ax = fig.add_subplot(111)
    speakers = metrics.speakers + [OVERALL]
    strategies = metrics.strategies
    width = 0.8 / max(len(strategies), 1)
    for i, strategy in enumerate(strategies):
        values = [getattr(metrics.get(strategy, spk), metric) for spk in speakers]
        xs = [j + (i - (len(strategies) - 1) / 2) * width for j in range(len(speakers))]
        ax.bar(xs, [v if v is not None else 0.0 for v in values], width, label=strategy)
    ax.set_xticks(range(len(speakers)))
    ax.set_xticklabels(speakers)
    ax.set_title(METRIC_LABELS.get(metric, metric))
    ax.set_xlabel('Speaker')
    ax.set_ylabel(METRIC_LABELS.get(metric, metric))
    ax.tick_params(axis='x', rotation=45)
    ax.legend(ncol=min(len(strategies), 4), fontsize='small')
    return fig


def preference_figure(preferences: Sequence[PreferenceTally]) -> Figure:
    fig = Figure(figsize=(8, 0.6 * len(preferences) + 1.5), tight_layout=True)
    ax = fig.add_subplot(111)
    labels = [t.label for t in preferences]
    shares = [100.0 * t.preference_a() for t in preferences]
    ax.barh(labels, shares, label='A preferred')
    ax.barh(labels, [100.0 - s for s in shares], left=shares, label='B preferred')
    for y, t in enumerate(preferences):
        mark = '*' if t.significant() else ''
        ax.text(101, y, f'p={t.p_value():.3g}{mark}', va='center', fontsize='small')
    ax.set_xlim(0, 120)
    ax.axvline(50, color='k', linewidth=0.8)
    ax.set_xlabel('Preference (%)')
    ax.set_title('AB preference (simulated judge)')
    ax.legend(loc='lower right', fontsize='small')
    return fig


def save_figures(figures_dir: str, report: EvaluationReport) -> List[str]:
    os.makedirs(figures_dir, exist_ok=True)
    paths = []
    for metric in METRIC_LABELS:
        path = os.path.join(figures_dir, f'{metric}.png')
        metric_figure(report.metrics, metric).savefig(path)
        paths.append(path)
    if report.preferences:
        path = os.path.join(figures_dir, 'preference.png')
        preference_figure(report.preferences).savefig(path)
        paths.append(path)
    return paths


# ------------------------------------------------------------------ pdf

def export_pdf(path: str, report: EvaluationReport, title: str = 'Acoustic model comparison') -> str:
    metrics = report.metrics
    if not metrics.rows:
        raise ValidationError('no data to export')

    pdf = FPDF()
    pdf.add_page()
    pdf.set_font("Arial", "B", 16)
    pdf.cell(0, 10, title, ln=1)
    pdf.ln(5)

    pdf.set_font("Arial", "B", 12)
    headers = ["Strategy", "Speaker", "MCD (dB)", "F0 corr", "V/UV err", "Frames"]
    widths = [25, 25, 30, 30, 30, 25]
    for w, h in zip(widths, headers):
        pdf.cell(w, 8, h, border=1)
    pdf.ln()

    pdf.set_font("Arial", "", 10)
    for row in metrics.rows:
        corr = '-' if row.f0_corr is None else f'{row.f0_corr:.3f}'
        values = [row.strategy, row.speaker, f'{row.mcd_db:.3f}', corr,
                  f'{row.vuv_error_rate:.3f}', str(row.n_frames_scored)]
        for w, v in zip(widths, values):
            pdf.cell(w, 7, v, border=1)
        pdf.ln()

    if report.preferences:
        pdf.ln(5)
        pdf.set_font("Arial", "B", 12)
        pdf.cell(0, 10, "AB preference (simulated judge)", ln=1)
        pdf.set_font("Arial", "", 10)
        for tally in report.preferences:
            a, b = tally.overall
            pdf.cell(0, 7, f'{tally.label}: {a} vs {b}, p = {tally.p_value():.4g}', ln=1)

    pdf.output(path)
    logger.info('[report] exported %s', path)
    return path


def write_run_reports(run_dir: str, report: EvaluationReport, figures: bool = True, pdf: bool = False) -> None:
    reports = os.path.join(run_dir, REPORTS_DIR)
    os.makedirs(reports, exist_ok=True)
    write_metrics_csv(os.path.join(reports, 'metrics.csv'), report.metrics)
    write_summary_json(os.path.join(reports, SUMMARY_NAME), report)
    if report.preferences:
        write_preferences_csv(os.path.join(reports, 'preferences.csv'), report.preferences)
    write_plot_data(os.path.join(run_dir, PLOTS_DIR), report)
    if figures:
        save_figures(os.path.join(run_dir, FIGURES_DIR), report)
    if pdf:
        export_pdf(os.path.join(reports, 'report.pdf'), report)
    logger.info('[report] wrote reports for %d strategies to %s', len(report.metrics.strategies), reports)
