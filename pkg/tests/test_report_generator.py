import pytest

from layergrasp.error_types import ErrorRecord
from layergrasp.experiments import AblationResult, ModeSummary
from layergrasp.harness import EvaluationResult
from layergrasp.report_generator import ReportGenerator


@pytest.fixture
def ablation():
    evaluation = EvaluationResult('printer_book', 10, 7, 0.35, 0.93, {'fine': 8, 'coarse': 2}, 0.71)
    summaries = {
        'Ours': ModeSummary('Ours', aucs=[0.6, 0.8], final_rates=[0.7, 0.9], evaluations=[evaluation]),
        'SL': ModeSummary('SL', aucs=[0.4], final_rates=[0.5], diverged=[2]),
    }
    records = [
        ErrorRecord('recycle', 3, "printer_book stack restored", 'low', 0),
        ErrorRecord('recycle', 9, "printer_book stack restored", 'low', 1),
        ErrorRecord('divergence', -1, "SL seed 2: critic loss diverged", 'high'),
    ]
    return AblationResult(summaries, records)


def test_text_report(ablation):
    report = ReportGenerator.generate_text_report(ablation)
    assert report.startswith("Ablation Report")
    assert report.endswith("\n")
    assert "Modes: Ours, SL" in report
    assert "0.700" in report
    assert "7/10" in report
    assert "High: 1" in report and "Low: 2" in report
    assert "- recycle: 2 occurrences (low severity)" in report


def test_pdf_report(ablation):
    pdf = ReportGenerator.generate_pdf_report(ablation)
    assert pdf.startswith(b'%PDF')


def test_evaluation_report_lists_anomalies():
    evaluation = EvaluationResult('towel', 4, 1, 0.006, 0.806)
    report = ReportGenerator.generate_evaluation_report(
        [evaluation], [ErrorRecord('degenerate_slip', 2, "slip missed the object", 'medium')], title="Generalisation"
    )
    lines = report.splitlines()
    assert lines[0] == "Generalisation" and lines[1] == "-" * len("Generalisation")
    assert lines[3].startswith("towel")
    assert "Anomalies: 1" in report
    assert "nan" in lines[3]
