import os

import ttkbootstrap as tb
from ttkbootstrap import Button, Frame, Label, Scrollbar, Treeview
from ttkbootstrap.toast import ToastNotification
from matplotlib.backends.backend_tkagg import FigureCanvasTkAgg

from evaluation import OVERALL
from reporting import REPORTS_DIR, export_pdf, load_report, metric_figure


class DashboardFrame(Frame):
    """Read-only view over a finished run directory."""

    def __init__(self, master, run_dir):
        super().__init__(master, padding=20)
        self.run_dir = run_dir
        self.report = load_report(run_dir)
        Label(self, text=f"Run: {os.path.basename(os.path.abspath(run_dir))}",
              font=("Helvetica", 24, "bold")).pack(pady=(0, 20))

        stats_frame = Frame(self)
        stats_frame.pack(fill='x', pady=(0, 20))
        num_cols = 4
        for idx, (title, value) in enumerate(self._stats()):
            self._add_stat(stats_frame, title, value, idx // num_cols, idx % num_cols)

        controls = Frame(self)
        controls.pack(fill='x', pady=(0, 10))
        Button(controls, text="Export PDF", bootstyle="info",
               command=self.export_report_pdf).pack(side='left')

        self._build_table()

        chart_frame = Frame(self)
        chart_frame.pack(fill='both', expand=True)
        canvas = FigureCanvasTkAgg(metric_figure(self.report.metrics, 'mcd_db'), master=chart_frame)
        canvas.draw()
        canvas.get_tk_widget().pack(fill='both', expand=True)

    def _stats(self):
        metrics = self.report.metrics
        pooled = {s: metrics.get(s, OVERALL) for s in metrics.strategies}
        stats = [
            ("Strategies", len(metrics.strategies)),
            ("Speakers", len(metrics.speakers)),
        ]
        if pooled:
            best = min(pooled, key=lambda s: pooled[s].mcd_db)
            stats.append(("Lowest MCD", f"{best} {pooled[best].mcd_db:.3f} dB"))
            stats.append(("Frames scored", pooled[best].n_frames_scored))
        for tally in self.report.preferences:
            a, b = tally.overall
            stats.append((f"AB {tally.label}", f"{a}:{b} (p={tally.p_value():.3g})"))
        return stats

    def _add_stat(self, parent, title, value, row, col):
        card = Frame(parent, width=200, height=100, padding=15, bootstyle="primary")
        card.grid(row=row, column=col, padx=10, pady=10, sticky="nsew")
        Label(card, text=title, font=("Helvetica", 12)).pack()
        Label(card, text=value, font=("Helvetica", 18, "bold")).pack()

    def _build_table(self):
        table_frame = Frame(self)
        table_frame.pack(fill='both', expand=True, pady=(0, 10))
        cols = ("Strategy", "Speaker", "MCD (dB)", "F0 corr", "V/UV err", "Frames")
        self.tree = Treeview(table_frame, columns=cols, show='headings', bootstyle="info", height=8)
        for c in cols:
            self.tree.heading(c, text=c)
            self.tree.column(c, anchor='center')
        v_scroll = Scrollbar(table_frame, orient='vertical', command=self.tree.yview)
        self.tree.configure(yscrollcommand=v_scroll.set)
        self.tree.grid(row=0, column=0, sticky='nsew')
        v_scroll.grid(row=0, column=1, sticky='ns')
        table_frame.rowconfigure(0, weight=1)
        table_frame.columnconfigure(0, weight=1)

        for row in self.report.metrics.rows:
            corr = '-' if row.f0_corr is None else f"{row.f0_corr:.3f}"
            self.tree.insert('', 'end', values=(row.strategy, row.speaker, f"{row.mcd_db:.3f}", corr,
                                                f"{row.vuv_error_rate:.3f}", row.n_frames_scored))

    def export_report_pdf(self):
        folder = os.path.join(self.run_dir, REPORTS_DIR)
        os.makedirs(folder, exist_ok=True)
        path = export_pdf(os.path.join(folder, 'report.pdf'), self.report)
        ToastNotification("Success", f"Exported to {path}").show_toast()


def open_dashboard(run_dir):
    style = tb.Style(theme='flatly')
    root = style.master
    root.title("Acoustic model comparison")
    DashboardFrame(root, run_dir).pack(fill='both', expand=True)
    root.mainloop()
