from typing import Any, List, Optional

from mlrbench.bench import TABLE_ALIASES, CellOutcome, TableReport

TABLE_TITLES = {table: name for name, table in TABLE_ALIASES.items()}

PLOT_RECIPE = """\
Relative error against round for every federated cell, from the `rounds.csv`
files written by `mlrb run` (one file per run):

```python
import pandas as pd, matplotlib.pyplot as plt
for path in ["runs/f-wmlr/rounds.csv", "runs/f-gem/rounds.csv"]:
    df = pd.read_csv(path).dropna(subset=["rel_err"])
    plt.semilogy(df["round"], df["rel_err"], label=path.split("/")[-2])
plt.xlabel("round"); plt.ylabel("relative error"); plt.legend(); plt.show()
```
"""


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, int):
        return str(value)
    return f"{value:.4g}"


def _status(passed: Optional[bool]) -> str:
    if passed is None:
        return "-"
    return "PASS" if passed else "FAIL"


def _cell_row(o: CellOutcome) -> str:
    v = o.values
    measured = []
    for metric in ("final_rel_err", "final_nll", "convergence_round", "did_not_converge"):
        text = _fmt(v.get(metric))
        if metric in o.quartiles:
            lo, hi = o.quartiles[metric]
            text += f" [{lo:.4g}, {hi:.4g}]"
        measured.append(text)
    bands = "; ".join(b.describe() for b in o.cell.bands) or "report only"
    if o.errors:
        bands += f" ({len(o.errors)} run(s) failed: {o.errors[0]})"
    return f"| {o.cell.name} | {o.cell.repeats} | " + " | ".join(measured) + f" | {bands} | {_status(o.passed)} |"


def generate_report(reports: List[TableReport]) -> str:
    """Markdown with one table per reproduced table: measured values, bands and PASS/FAIL."""
    md_lines = ["# Reproduction Report"]
    for report in reports:
        title = TABLE_TITLES.get(report.table)
        heading = f"{report.table} ({title}, {report.scale} scale)" if title else f"{report.table} ({report.scale} scale)"
        md_lines.append(f"\n## {heading}: {_status(report.passed)}")
        md_lines.append("")
        md_lines.append("| cell | runs | rel. error | NLL | conv. round | d.n.c. | band | status |")
        md_lines.append("|---|---|---|---|---|---|---|---|")
        for outcome in report.cells:
            md_lines.append(_cell_row(outcome))
        if report.relations:
            md_lines.append("\n**Cross-cell checks**\n")
            for rel, ok in report.relations:
                md_lines.append(f"- {rel.description}: {_status(ok)}")
        if any(o.quartiles for o in report.cells):
            md_lines.append("\nValues are medians over repetitions with [lower, upper] quartiles.")
    md_lines.append("\n## Plotting")
    md_lines.append("")
    md_lines.append(PLOT_RECIPE)
    return "\n".join(md_lines) + "\n"
