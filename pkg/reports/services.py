"""
CSV and Excel reports for recovery runs, metrics, gradient checks and
calibration.
"""
import csv
import logging

from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill

from core.exceptions import IoError

logger = logging.getLogger(__name__)

HEADER_COLOUR = 'C77A1A'

METRIC_HEADERS = ['label', 'abs_rel', 'sq_rel', 'rmse', 'rmse_log', 'a1', 'a2', 'a3', 'count']


def _write_rows(path, header, rows):
    try:
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise IoError(f'cannot write report {path}: {exc}') from exc


def history_rows(solve_report):
    return [[iteration, repr(float(loss))] for iteration, loss in enumerate(solve_report.history)]


def write_history_csv(solve_report, path):
    """One row per solver iteration: iteration, total loss before the step."""
    _write_rows(path, ['iteration', 'loss'], history_rows(solve_report))


def metric_rows(labelled):
    return [[label, *report.as_row()] for label, report in labelled]


def write_metrics_csv(labelled, path):
    """labelled is a sequence of (label, MetricsReport)."""
    _write_rows(path, METRIC_HEADERS, metric_rows(labelled))


def write_breakdown_csv(breakdown, path):
    _write_rows(path, ['term', 'value'], [[name, repr(float(value))] for name, value in breakdown.scalar_rows()])


def write_gradcheck_csv(check, path):
    _write_rows(path, ['wrt', 'term', 'eps', 'tol', 'max_rel_err', 'worst_row', 'worst_col', 'checked', 'skipped', 'passed'], [[
        check.wrt, check.term, check.eps, check.tol, repr(check.max_rel_err),
        *(check.worst_pixel if check.worst_pixel is not None else ('', '')),
        check.checked, check.skipped, int(check.passed),
    ]])


def write_calib_csv(calib_report, path):
    _write_rows(path, ['quantity', 'value'], calib_report.rows())


def _write_table(ws, row, title, headers, rows):
    header_fill = PatternFill(start_color=HEADER_COLOUR, end_color=HEADER_COLOUR, fill_type='solid')
    header_font = Font(bold=True, color='FFFFFF', size=12)

    ws[f'A{row}'] = title
    ws[f'A{row}'].font = Font(bold=True, size=12)
    row += 1

    for col, header in enumerate(headers, 1):
        cell = ws.cell(row=row, column=col)
        cell.value = header
        cell.fill = header_fill
        cell.font = header_font
        cell.alignment = Alignment(horizontal='center')

    row += 1
    for values in rows:
        for col, value in enumerate(values, 1):
            ws.cell(row=row, column=col, value=value)
        row += 1
    return row + 2


def generate_excel_report(title, sections):
    """
    Workbook with a title line and one table per section.

    sections is a sequence of (section title, headers, rows).
    """
    wb = Workbook()
    ws = wb.active
    ws.title = 'Report'

    ws['A1'] = title
    ws['A1'].font = Font(bold=True, size=14, color=HEADER_COLOUR)
    ws.merge_cells('A1:D1')

    row = 3
    for section_title, headers, rows in sections:
        row = _write_table(ws, row, section_title, headers, rows)

    for column in ('A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I'):
        ws.column_dimensions[column].width = 14
    return wb


def recovery_sections(solve_report):
    sections = [
        ('Loss breakdown', ['Term', 'Value'], [[name, float(value)] for name, value in solve_report.breakdown.scalar_rows()]),
    ]
    labelled = []
    if solve_report.metrics is not None:
        labelled.append(('all', solve_report.metrics))
    labelled.extend((f'cap {cap:g} m', report) for cap, report in sorted(solve_report.range_metrics.items()))
    if labelled:
        sections.append(('Metrics', [h.title() for h in METRIC_HEADERS], metric_rows(labelled)))
    sections.append((
        'Loss history', ['Iteration', 'Loss'],
        [[iteration, float(loss)] for iteration, loss in enumerate(solve_report.history)],
    ))
    return sections


def write_recovery_workbook(solve_report, path):
    """Excel workbook of one recovery run: breakdown, metrics and history."""
    wb = generate_excel_report(
        f'Depth recovery - strategy {solve_report.strategy} ({solve_report.optimizer})',
        recovery_sections(solve_report),
    )
    try:
        wb.save(path)
    except OSError as exc:
        raise IoError(f'cannot write workbook {path}: {exc}') from exc
    logger.info('Wrote recovery workbook %s', path)
