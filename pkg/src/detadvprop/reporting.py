"""Text tables of evaluation reports and deltas against a baseline row."""

from .evaluation import EvalReport

METRICS = ("map", "ap50", "ap75", "mean_corrupted_map", "rpc_percent")
HEADERS = {"map": "mAP", "ap50": "AP50", "ap75": "AP75", "mean_corrupted_map": "mAP-C", "rpc_percent": "rPC"}


class ReportMismatchError(ValueError):
    pass


def format_value(value):
    return "-" if value is None else f"{value:.1f}"


def delta(value, baseline):
    """Difference of the one-decimal displayed values, so rows agree with what is printed."""
    return round(round(value, 1) - round(baseline, 1), 1)


def format_delta(d):
    d = round(d, 1)
    if d == 0:
        return "+0.0"
    return f"{d:+.1f}"


def render_cell(value, baseline=None):
    if baseline is None:
        return format_value(value)
    return f"{format_value(value)} ({format_delta(delta(value, baseline))})"


def _present(report):
    return tuple(m for m in METRICS if getattr(report, m) is not None)


def _table(header, rows):
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in [header] + rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def render_table(reports, names=None):
    """One row per report: model, mAP, AP50, AP75, corrupted mAP, rPC."""
    reports = [_as_report(r) for r in reports]
    names = _names(reports, names)
    header = ["model"] + [HEADERS[m] for m in METRICS]
    rows = [[name] + [format_value(getattr(r, m)) for m in METRICS] for name, r in zip(names, reports)]
    return _table(header, rows)


def compare_report(reports, baseline=0, names=None):
    """Render every report against ``reports[baseline]`` as ``value (+delta)`` cells.

    Returns ``(text, table)`` where ``table`` is a JSON-ready dict holding the
    values, the deltas and the rendered cells. All reports must carry the same
    set of metrics.
    """
    reports = [_as_report(r) for r in reports]
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    if not 0 <= baseline < len(reports):
        raise IndexError(f"baseline index {baseline} out of range for {len(reports)} reports")
    names = _names(reports, names)
    metrics = _present(reports[baseline])
    for name, report in zip(names, reports):
        if _present(report) != metrics:
            raise ReportMismatchError(
                f"report {name!r} has metrics {list(_present(report))}, baseline has {list(metrics)}"
            )
    base = reports[baseline]
    rows, json_rows = [], []
    for i, (name, report) in enumerate(zip(names, reports)):
        values = {m: getattr(report, m) for m in metrics}
        if i == baseline:
            cells = {m: format_value(v) for m, v in values.items()}
            deltas = {m: 0.0 for m in metrics}
        else:
            cells = {m: render_cell(v, getattr(base, m)) for m, v in values.items()}
            deltas = {m: delta(v, getattr(base, m)) for m, v in values.items()}
        rows.append([name] + [cells[m] for m in metrics])
        json_rows.append({"model": name, "baseline": i == baseline, "values": values, "deltas": deltas,
                          "rendered": cells})
    text = _table(["model"] + [HEADERS[m] for m in metrics], rows)
    return text, {"baseline": names[baseline], "metrics": list(metrics), "rows": json_rows}


def _as_report(r):
    if isinstance(r, EvalReport):
        return r
    if isinstance(r, dict):
        return EvalReport(**r)
    raise TypeError(f"expected an EvalReport, got {type(r).__name__}")


def _names(reports, names):
    if names is None:
        return [f"model{i}" for i in range(len(reports))]
    names = list(names)
    if len(names) != len(reports):
        raise ValueError("need one name per report")
    return names
