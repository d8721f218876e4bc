"""
Report generator for homogenization studies.
Writes the convergence table, the log-log convergence plot, the diagnostics
JSON and a markdown summary into a study output directory.
"""

import os
import json
import logging
from typing import Dict, List, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns
from jinja2 import Template

from errors import SchemaError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['epsilon', 'grad_error_lp', 'averaged_error_lp', 'remainder_lp',
                  'energy_residual_fine', 'energy_residual_hom', 'cell_cache_entries', 'wall_time_s']
PLOTTED = {
    'grad_error_lp': '||Du_eps - Du||',
    'averaged_error_lp': '||Du_eps - M_eps Du||',
    'remainder_lp': '||r_eps||',
}

SUMMARY_TEMPLATE = Template("""# Homogenization study

**Model:** {{ model }}
**mu:** {{ mu }} ({{ regime }})
**Epsilons:** {{ rows | length }}
**Homogenized solves:** {{ homogenized_solves }}

## Convergence

| epsilon | grad error | averaged error | remainder | energy (fine) | energy (hom) | cell entries |
|---|---|---|---|---|---|---|
{% for row in rows -%}
| {{ '%.6g' % row.epsilon }} | {{ '%.4e' % row.grad_error_lp }} | {{ '%.4e' % row.averaged_error_lp }} | {{ '%.4e' % row.remainder_lp }} | {{ '%.2e' % row.energy_residual_fine }} | {{ '%.2e' % row.energy_residual_hom }} | {{ row.cell_cache_entries }} |
{% endfor %}
{% if remainder_factor is not none %}
Remainder decrease from the coarsest to the finest epsilon: **{{ '%.3f' % remainder_factor }}x**
{% endif %}
{% if diagnostics %}
## Corrector diagnostics
{% for eps, entry in diagnostics.items() %}
- eps = {{ eps }}: lp_bound_ratio {{ '%.4g' % entry.lp_bound_ratio }}, xi_continuity_C {{ '%.4g' % entry.xi_continuity_C }}, uniform_bound {{ '%.4g' % entry.uniform_bound }}, flux gap {{ '%.4g' % entry.flux_weak_gap }}{% if entry.flags %} (above ceiling: {{ entry.flags | join(', ') }}){% endif %}
{% endfor %}
{% endif %}
{% if failure %}
## Aborted

Stage `{{ failure.stage }}` failed: {{ failure.message }}
{% endif %}
""")


def rows_frame(rows: List[Dict]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def read_report(csv_path: str) -> pd.DataFrame:
    """Load a convergence report, checking the header.

    Raises:
        SchemaError: Header differs from the report columns
    """
    frame = pd.read_csv(csv_path, float_precision='round_trip')
    if list(frame.columns) != REPORT_COLUMNS:
        raise SchemaError(f"{csv_path} does not have the convergence report header", ['$.header'])
    return frame


def plot_convergence(frame: pd.DataFrame, svg_path: str) -> str:
    """Log-log plot of the error columns against epsilon; output depends only on the frame."""
    long = frame.melt(id_vars='epsilon', value_vars=list(PLOTTED), var_name='quantity', value_name='norm')
    long = long[long['norm'] > 0].copy()
    long['quantity'] = long['quantity'].map(PLOTTED)

    plt.rcParams['svg.hashsalt'] = 'convergence'
    sns.set_theme(style='whitegrid')
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    if not long.empty:
        sns.lineplot(data=long, x='epsilon', y='norm', hue='quantity', marker='o', errorbar=None, ax=ax)
        ax.set_xscale('log')
        ax.set_yscale('log')
    ax.set_xlabel('epsilon')
    ax.set_ylabel('L^p norm')
    ax.set_title('Convergence versus epsilon')
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(svg_path)), exist_ok=True)
    fig.savefig(svg_path, format='svg', metadata={'Date': None})
    plt.close(fig)
    logger.info(f"Convergence plot written: {svg_path}")
    return svg_path


class ReportGenerator:
    """Writes study artefacts into one output directory."""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def write_report(self, rows: List[Dict]) -> str:
        filepath = self.path('convergence_report.csv')
        rows_frame(rows).to_csv(filepath, index=False)
        logger.info(f"Convergence report written: {filepath} ({len(rows)} rows)")
        return filepath

    def write_diagnostics(self, diagnostics: Dict) -> str:
        filepath = self.path('diagnostics.json')
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(diagnostics, f, indent=2, sort_keys=True)
        return filepath

    def write_summary(self, rows: List[Dict], meta: Dict, diagnostics: Optional[Dict] = None,
                      failure: Optional[Dict] = None) -> str:
        frame = rows_frame(rows)
        factor = None
        if len(frame) > 1 and frame['remainder_lp'].iloc[-1] > 0:
            factor = float(frame['remainder_lp'].iloc[0] / frame['remainder_lp'].iloc[-1])
        content = SUMMARY_TEMPLATE.render(rows=frame.to_dict('records'), remainder_factor=factor,
                                          diagnostics=diagnostics or {}, failure=failure, **meta)
        filepath = self.path('summary.md')
        with open(filepath, 'w', encoding='utf-8') as f:
            f.write(content)
        logger.info(f"Summary written: {filepath}")
        return filepath

    def write_ledger(self, ledger: pd.DataFrame, name: str) -> str:
        filepath = self.path(os.path.join('ledgers', f'{name}.csv'))
        os.makedirs(os.path.dirname(filepath), exist_ok=True)
        ledger.to_csv(filepath, index=False)
        return filepath

    def write_fields(self, frame: pd.DataFrame, name: str) -> str:
        filepath = self.path(os.path.join('fields', f'{name}.csv'))
        os.makedirs(os.path.dirname(filepath), exist_ok=True)
        frame.to_csv(filepath, index=False)
        logger.info(f"Fields written: {filepath} ({len(frame)} rows)")
        return filepath

    def write_study(self, rows: List[Dict], meta: Dict, diagnostics: Optional[Dict] = None,
                    failure: Optional[Dict] = None) -> List[str]:
        """Report CSV, plot, diagnostics and summary; also used to flush partial studies."""
        files = [self.write_report(rows)]
        files.append(plot_convergence(rows_frame(rows), self.path('convergence.svg')))
        if diagnostics:
            files.append(self.write_diagnostics(diagnostics))
        files.append(self.write_summary(rows, meta, diagnostics, failure))
        return files


def rerender(csv_path: str, output_dir: Optional[str] = None) -> str:
    """Rebuild convergence.svg from an existing report CSV without recomputation."""
    frame = read_report(csv_path)
    output_dir = output_dir or os.path.dirname(os.path.abspath(csv_path))
    return plot_convergence(frame, os.path.join(output_dir, 'convergence.svg'))
