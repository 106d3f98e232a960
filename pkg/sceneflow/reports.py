"""
Serialization of MetricsReport: a long-format CSV and a plain-text table.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .scene_io import CLASS_NAMES

CSV_HEADER = ('metric', 'class', 'bin', 'value', 'count')
ABSENT = '-'


def _value(value):
    return '' if value is None else repr(float(value))


def _class_name(class_id):
    return CLASS_NAMES.get(class_id, str(class_id))


def report_rows(report):
    """Yield (metric, class, bin, value, count) tuples; absent values are ''."""
    for part in ('FD', 'FS', 'BS', 'mean'):
        yield ('threeway', part, '', _value(report.threeway[part]), report.threeway_counts[part])

    bucket = report.bucket
    for (class_id, index), (value, count, _) in sorted(bucket.cells.items()):
        yield ('bucket', _class_name(class_id), bucket.bucket_label(index), _value(value), count)
    yield ('bucket_static_mean', 'all', '', _value(bucket.static_mean), '')
    yield ('bucket_dynamic_mean', 'all', '', _value(bucket.dynamic_normalized_mean), '')

    ranged = report.rangewise
    for motion, values, counts, mean in (
        ('dynamic', ranged.dynamic, ranged.dynamic_counts, ranged.dynamic_mean),
        ('static', ranged.static, ranged.static_counts, ranged.static_mean),
    ):
        for label, value, count in zip(ranged.labels, values, counts):
            yield ('rangewise', motion, label, _value(value), count)
        yield ('rangewise', motion, 'mean', _value(mean), sum(counts))


def write_report_csv(report, path):
    with Path(path).open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_HEADER)
        writer.writerows(report_rows(report))


def _cell(value):
    return ABSENT if value is None else f'{value:.4f}'


def format_range_table(report, title='prediction'):
    """Range-wise EPE laid out with bins as columns and the mean last."""
    ranged = report.rangewise
    header = ['', *ranged.labels, 'mean']
    rows = [
        [f'{title} dynamic', *(_cell(v) for v in ranged.dynamic), _cell(ranged.dynamic_mean)],
        [f'{title} static', *(_cell(v) for v in ranged.static), _cell(ranged.static_mean)],
    ]
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(len(header))]
    out = io.StringIO()
    for row in [header, *rows]:
        out.write('  '.join(str(cell).rjust(width) if i else str(cell).ljust(width)
                            for i, (cell, width) in enumerate(zip(row, widths))).rstrip())
        out.write('\n')
    return out.getvalue()


def format_summary(report):
    three = report.threeway
    bucket = report.bucket
    return (
        f"three-way EPE  FD {_cell(three['FD'])}  FS {_cell(three['FS'])}  "
        f"BS {_cell(three['BS'])}  mean {_cell(three['mean'])}\n"
        f"bucket-normalized  static {_cell(bucket.static_mean)}  "
        f"dynamic {_cell(bucket.dynamic_normalized_mean)}\n"
    )
