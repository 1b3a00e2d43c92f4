import csv
import tempfile
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase
from openpyxl import load_workbook

from core.exceptions import IoError
from gradients.services import GradientCheckReport
from solver.services import SolveReport, evaluate

from .services import (
    generate_excel_report,
    write_gradcheck_csv,
    write_history_csv,
    write_metrics_csv,
    write_recovery_workbook,
)


def solve_report():
    breakdown = SimpleNamespace(scalar_rows=lambda: [('stereo', 0.25), ('total', 0.5)])
    metrics = evaluate(np.array([[1.0, 2.0, 4.0]]), np.array([[1.0, 2.0, 2.0]]))
    return SolveReport(
        strategy='S', optimizer='momentum', history=np.array([0.5, 0.25, 0.125]),
        breakdown=breakdown, wall_time=0.1, metrics=metrics, range_metrics={10.0: metrics},
    )


class CsvReportTests(SimpleTestCase):
    def read(self, path):
        with open(path, newline='', encoding='utf-8') as handle:
            return list(csv.reader(handle))

    def test_history_rows(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'history.csv'
            write_history_csv(solve_report(), path)
            rows = self.read(path)
        self.assertEqual(rows[0], ['iteration', 'loss'])
        self.assertEqual(len(rows), 4)
        self.assertEqual(float(rows[3][1]), 0.125)

    def test_metrics_rows(self):
        report = solve_report().metrics
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'metrics.csv'
            write_metrics_csv([('all', report)], path)
            rows = self.read(path)
        self.assertEqual(rows[0][:4], ['label', 'abs_rel', 'sq_rel', 'rmse'])
        self.assertAlmostEqual(float(rows[1][2]), 2.0 / 3.0)
        self.assertEqual(rows[1][-1], '3')

    def test_gradcheck_row(self):
        check = GradientCheckReport('pol', 'total', 1e-4, 1e-3, 2e-4, (3, 4), 50, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'gradcheck.csv'
            write_gradcheck_csv(check, path)
            rows = self.read(path)
        self.assertEqual(rows[1][5:], ['3', '4', '50', '2', '1'])

    def test_unwritable_path(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(IoError):
                write_history_csv(solve_report(), Path(tmp) / 'missing' / 'history.csv')


class ExcelReportTests(SimpleTestCase):
    def test_table_layout(self):
        wb = generate_excel_report('Title', [('Section', ['A', 'B'], [[1, 2], [3, 4]])])
        ws = wb.active
        self.assertEqual(ws['A1'].value, 'Title')
        self.assertEqual(ws['A3'].value, 'Section')
        self.assertEqual(ws['B4'].value, 'B')
        self.assertTrue(ws['A4'].font.bold)
        self.assertEqual(ws['A4'].fill.start_color.rgb[-6:], 'C77A1A')
        self.assertEqual(ws['B6'].value, 4)

    def test_recovery_workbook(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.xlsx'
            write_recovery_workbook(solve_report(), path)
            ws = load_workbook(path).active
            values = [cell.value for cell in ws['A']]
        self.assertIn('Loss breakdown', values)
        self.assertIn('Metrics', values)
        self.assertIn('Loss history', values)
        self.assertIn('cap 10 m', values)
