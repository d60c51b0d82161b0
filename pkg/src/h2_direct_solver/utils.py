import json
import sys
from typing import Any, Dict, List, Optional, Sequence

from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

console = Console()
err_console = Console(stderr=True)


def _fmt_bytes(n: float) -> str:
    for unit in ("B", "KiB", "MiB", "GiB"):
        if abs(n) < 1024 or unit == "GiB":
            return f"{n:.1f} {unit}" if unit != "B" else f"{int(n)} B"
        n /= 1024.0
    return f"{n:.1f} GiB"


def emit_json(data: Dict[str, Any]) -> None:
    """Write one JSON document to stdout, unstyled, for --json mode."""
    sys.stdout.write(json.dumps(data, default=str) + "\n")
    sys.stdout.flush()


def show_tree_statistics(stats: Dict[str, Any], console_instance: Optional[Console] = None):
    """
    Display cluster tree and block partition statistics.

    Args:
        stats: Output of tree_statistics()
        console_instance: Optional Rich Console instance (defaults to global console)
    """
    if console_instance is None:
        console_instance = console

    info = Text()
    info.append("N: ", style="white")
    info.append(f"{stats['n']}", style="bold cyan")
    info.append("   depth L: ", style="white")
    info.append(f"{stats['depth']}", style="bold cyan")
    info.append("   leafsize: ", style="white")
    info.append(f"{stats['leafsize']}", style="cyan")
    info.append("   eta: ", style="white")
    info.append(f"{stats['eta']}\n", style="cyan")
    leaves = stats["leaf_sizes"]
    info.append("Leaf sizes: ", style="white")
    info.append(f"min {leaves['min']}, max {leaves['max']}, mean {leaves['mean']:.1f}\n", style="green")
    info.append("Blocks: ", style="white")
    info.append(f"{stats['admissible_blocks']} admissible, {stats['dense_blocks']} dense", style="green")
    info.append(f" ({stats['admissible_coverage']:.1%} far field)", style="dim")
    info.append("   l0: ", style="white")
    info.append(f"{stats['l0'] if stats['l0'] is not None else '-'}", style="bold yellow")
    info.append("   csp: ", style="white")
    info.append(f"{stats['csp']}", style="bold yellow")

    table = Table(title="Per level", show_edge=False, header_style="bold magenta")
    for col in ("level", "clusters", "admissible", "near", "csp", "max rank"):
        table.add_column(col, justify="right")
    ranks = stats.get("max_rank_per_level", [])
    for row in stats["levels"]:
        rank = ranks[row["level"]] if row["level"] < len(ranks) else "-"
        table.add_row(*(str(row[k]) for k in ("level", "clusters", "admissible", "near", "csp")), str(rank))

    console_instance.print(Panel(info, title="🌳 Cluster tree", border_style="blue", padding=(0, 1)))
    console_instance.print(table)


def show_level_diagnostics(diagnostics: Sequence[Dict[str, Any]], console_instance: Optional[Console] = None):
    """Display the per-level factorization diagnostics as a table."""
    if console_instance is None:
        console_instance = console

    table = Table(title="Factorization", header_style="bold magenta")
    columns = [
        ("level", "level"),
        ("active", "active"),
        ("eliminated", "eliminated"),
        ("rank", None),
        ("fill-ins", "fill_in_targets"),
        ("ledger", "ledger_entries"),
        ("carried", "carried_entries"),
        ("promoted", "promoted_blocks"),
        ("chain", None),
        ("time", None),
    ]
    for title, _ in columns:
        table.add_column(title, justify="right")
    for d in diagnostics:
        cells = []
        for title, key in columns:
            if title == "rank":
                cells.append(f"{d['max_rank_before']} → {d['max_rank_after']}")
            elif title == "chain":
                cells.append(_fmt_bytes(d["chain_nbytes"]))
            elif title == "time":
                cells.append(f"{d['seconds']:.3f}s")
            else:
                cells.append(str(d[key]))
        table.add_row(*cells)
    console_instance.print(table)


def show_solve_report(report: Dict[str, Any], console_instance: Optional[Console] = None):
    """
    Display the result of a solve.

    Args:
        report: Dictionary with n, eps_rel, tolerance, seconds and output path
        console_instance: Optional Rich Console instance (defaults to global console)
    """
    if console_instance is None:
        console_instance = console

    ok = report.get("ok", True)
    text = Text()
    text.append("✓ Solved: " if ok else "⚠ Tolerance missed: ", style="bold green" if ok else "bold yellow")
    text.append(f"N={report['n']}\n", style="cyan")
    text.append("   Relative residual: ", style="white")
    text.append(f"{report['eps_rel']:.3e}", style="bold green" if ok else "bold yellow")
    if report.get("tolerance") is not None:
        text.append(f"  (bound {report['tolerance']:.1e})", style="dim")
    text.append("\n   Solve time: ", style="white")
    text.append(f"{report['seconds'] * 1e3:.2f} ms", style="green")
    if report.get("solution"):
        text.append("\n   Solution: ", style="white")
        text.append(f"{report['solution']}", style="dim")
    console_instance.print(Panel(text, border_style="green" if ok else "yellow", padding=(0, 1)))


def show_metrics_table(
    runs: Sequence[Dict[str, Any]],
    slopes: Optional[Dict[str, Dict[str, Any]]] = None,
    console_instance: Optional[Console] = None,
):
    """Display benchmark rows and, if given, the fitted log-log slopes."""
    if console_instance is None:
        console_instance = console

    table = Table(title="Benchmark", header_style="bold magenta")
    for col in ("N", "t_build", "t_factor", "t_solve", "mem_h2", "mem_factor", "csp", "eps_rel", "ranks"):
        table.add_column(col, justify="right")
    for r in runs:
        table.add_row(
            str(r["N"]),
            f"{r['t_build']:.2f}s",
            f"{r['t_factor']:.2f}s",
            f"{r['t_solve'] * 1e3:.1f}ms",
            _fmt_bytes(r["mem_h2"]),
            _fmt_bytes(r["mem_factor"]),
            str(r["csp"]),
            f"{r['eps_rel']:.2e}",
            ",".join(str(k) for k in r["max_rank_per_level"]),
        )
    console_instance.print(table)

    if slopes:
        text = Text()
        for name, fit in slopes.items():
            text.append(f"{name}: ", style="white")
            if fit["degenerate"]:
                text.append("degenerate (needs two distinct N)\n", style="yellow")
            else:
                text.append(f"{fit['slope']:.3f}\n", style="bold cyan")
        console_instance.print(Panel(text, title="📈 log-log slopes", border_style="blue", padding=(0, 1)))


def show_messages(lines: List[str], title: str, border_style: str = "green"):
    """Display a short list of result lines in a panel."""
    console.print(Panel("\n".join(lines), title=title, border_style=border_style, padding=(0, 1)))


def show_error(message: str, exit_code: int):
    """Display an error on stderr."""
    text = Text()
    text.append("❌ Error: ", style="bold red")
    text.append(message, style="red")
    text.append(f"\n   Exit code: {exit_code}", style="dim")
    err_console.print(Panel(text, border_style="red", padding=(0, 1)))
