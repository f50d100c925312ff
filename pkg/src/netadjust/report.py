"""CSV and text outputs.

Every CSV written here has a registered, versioned column layout in
``SCHEMAS``; the run manifest records the schema id next to each file.
Reals are written with 9 significant digits, missing values as empty cells.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .fur_probe import FUR_COLUMNS
from .topology import flops

SCHEMAS = {
    "trace/1": ("iteration", "accuracy", "flops", "config"),
    "fur/1": FUR_COLUMNS,
    "oracle/1": ("rank", "accuracy", "flops", "config"),
    "flops/1": ("layer_id", "kind", "channels", "flops"),
}


def fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def to_csv(schema, rows):
    """Render ``rows`` (mappings keyed by column) as CSV text under ``schema``."""
    columns = SCHEMAS[schema]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, schema, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv(schema, rows))
    return path


def check_csv(path, schema):
    """Raise ValueError unless ``path`` has exactly the columns of ``schema``
    and every row has one cell per column."""
    columns = SCHEMAS[schema]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != columns:
        raise ValueError(f"{path}: header {rows[0] if rows else None} does not match {schema}")
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(columns):
            raise ValueError(f"{path}:{n}: expected {len(columns)} cells, got {len(row)}")
    return rows[1:]


def trace_rows(records):
    for r in records:
        yield {"iteration": r.iteration, "accuracy": r.accuracy, "flops": r.flops,
               "config": str(r.config)}


def flops_rows(topology, config):
    bd = flops(topology, config)
    widths = topology.widths(config)
    for layer in topology.layers:
        if layer.id in bd.per_layer:
            yield {"layer_id": layer.id, "kind": layer.kind, "channels": widths.get(layer.id),
                   "flops": bd.per_layer[layer.id]}


def flops_table(topology, config, other=None):
    """Per-layer FLOPs as aligned text; with ``other``, adds its widths,
    FLOPs and the per-layer deltas (``other`` minus ``config``)."""
    bd = flops(topology, config)
    widths = topology.widths(config)
    header = ["layer", "kind", "channels", "flops"]
    bd2 = widths2 = None
    if other is not None:
        bd2 = flops(topology, other)
        widths2 = topology.widths(other)
        header += ["channels'", "flops'", "d_channels", "d_flops"]
    rows = []
    for layer in topology.layers:
        if layer.id not in bd.per_layer:
            continue
        c = widths.get(layer.id)
        row = [layer.id, layer.kind, fmt(c), fmt(bd.per_layer[layer.id])]
        if other is not None:
            c2 = widths2.get(layer.id)
            dc = "" if c is None else f"{c2 - c:+d}"
            row += [fmt(c2), fmt(bd2.per_layer[layer.id]), dc,
                    f"{bd2.per_layer[layer.id] - bd.per_layer[layer.id]:+d}"]
        rows.append(row)
    rows.append(["(constant)", "", "", fmt(bd.constant_part)])
    rows.append(["total", "", "", fmt(bd.total)])
    if other is not None:
        rows[-2] += ["", fmt(bd2.constant_part), "", f"{bd2.constant_part - bd.constant_part:+d}"]
        rows[-1] += ["", fmt(bd2.total), "", f"{bd2.total - bd.total:+d}"]
    widths_col = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(v.rjust(w) if i >= 2 else v.ljust(w) for i, (v, w) in
                       enumerate(zip(r, widths_col))).rstrip() for r in [header] + rows]
    return "\n".join(lines) + "\n"
