#!/usr/bin/env python3
"""Build data/adult.csv and data/compas.csv from the copies bundled in the
`responsibly` wheel on PyPI (UCI Adult train+test, ProPublica two-year COMPAS).

    pip download --no-deps -d /tmp/wheels responsibly==0.1.2
    python3 scripts/prepare_data.py /tmp/wheels/responsibly-0.1.2-py3-none-any.whl
"""
import csv
import io
import sys
import zipfile
from datetime import datetime
from pathlib import Path

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]

COMPAS_COLUMNS = [
    "sex", "age", "age_cat", "race", "juv_fel_count", "juv_misd_count",
    "juv_other_count", "priors_count", "c_charge_degree", "days_in_jail",
    "two_year_recid",
]


def adult_rows(text, skip_first):
    lines = text.splitlines()
    if skip_first:
        lines = lines[1:]
    for line in lines:
        line = line.strip()
        if not line:
            continue
        cells = [c.strip() for c in line.split(",")]
        cells[-1] = cells[-1].rstrip(".")
        yield cells


def days_in_jail(row):
    try:
        jail_in = datetime.strptime(row["c_jail_in"], "%Y-%m-%d %H:%M:%S")
        jail_out = datetime.strptime(row["c_jail_out"], "%Y-%m-%d %H:%M:%S")
    except ValueError:
        return "?"
    return str((jail_out - jail_in).days)


def main():
    wheel = zipfile.ZipFile(sys.argv[1])
    out = Path(__file__).resolve().parent.parent / "data"
    out.mkdir(exist_ok=True)

    base = "responsibly/dataset/"
    with open(out / "adult.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ADULT_COLUMNS)
        n = 0
        for name, skip in (("adult/adult.data", False), ("adult/adult.test", True)):
            text = wheel.read(base + name).decode("utf-8")
            for cells in adult_rows(text, skip):
                w.writerow(cells)
                n += 1
    print(f"adult.csv: {n} rows")

    text = wheel.read(base + "compas/compas-scores-two-years.csv").decode("utf-8")
    reader = csv.DictReader(io.StringIO(text))
    with open(out / "compas.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COMPAS_COLUMNS)
        n = 0
        for row in reader:
            row["days_in_jail"] = days_in_jail(row)
            w.writerow([row[c] if row[c] != "" else "?" for c in COMPAS_COLUMNS])
            n += 1
    print(f"compas.csv: {n} rows")


if __name__ == "__main__":
    main()
