"""CSV contracts shared with the solver, duplicated here on purpose: this
package consumes the files, not the library."""

from __future__ import annotations

import csv


class SchemaError(ValueError):
    """CSV header does not match the documented contract."""


TRACE_HEADER = ("step,t,dt_f,n_substeps,w_fluid,w_drag,w_neighbor,w_collide,"
                "w_integrate,w_ghost,w_redist,w_deposit,w_total")
SIZES_HEADER = "label,factor,particles,wall_s,ideal_wall_s,substeps"
WEAK_HEADER = "ranks,particles,wall_s,efficiency,ats"
ATS_HEADER = ("label,substeps_fixed,substeps_ats,wall_fixed_s,wall_ats_s,"
              "substep_ratio,wall_ratio")

HEADERS = {"trace": TRACE_HEADER, "sizes": SIZES_HEADER,
           "weak": WEAK_HEADER, "ats": ATS_HEADER}

_TEXT_COLUMNS = {"label", "ats"}


def read_csv(path, kind: str) -> dict[str, list]:
    """Parse a CSV against its contract; returns column name -> list.

    Numeric columns come back as floats; raises SchemaError naming the first
    missing or unexpected column.
    """
    expected = HEADERS[kind].split(",")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header "
                              f"{HEADERS[kind]!r}")
        for name in expected:
            if name not in header:
                raise SchemaError(f"{path}: missing column {name!r}")
        for name in header:
            if name not in expected:
                raise SchemaError(f"{path}: unexpected column {name!r}")
        if header != expected:
            raise SchemaError(f"{path}: column order must be {HEADERS[kind]!r}")
        columns: dict[str, list] = {name: [] for name in expected}
        for row in reader:
            if not row:
                continue
            if len(row) != len(expected):
                raise SchemaError(f"{path}: row has {len(row)} fields, "
                                  f"expected {len(expected)}")
            for name, value in zip(expected, row):
                columns[name].append(
                    value if name in _TEXT_COLUMNS else float(value))
    return columns
