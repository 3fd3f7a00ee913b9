"""CSV output shared by every command. Floats are written with ``repr`` so
files round-trip exactly; NaN and missing values become empty cells."""
import csv
import io
import math


def fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(fmt(x) for x in v)
    return str(v)


def csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(columns, rows))
