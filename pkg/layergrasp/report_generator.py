import io
import logging
from typing import List, Optional, Sequence

from reportlab.lib import colors
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from .error_types import ErrorRecord, LayerGraspError
from .utils import categorize_records_by_severity, identify_common_problems

logger = logging.getLogger(__name__)

_TABLE_STYLE = TableStyle([
    ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
    ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
    ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
    ('GRID', (0, 0), (-1, -1), 1, colors.black),
])


def _mode_rows(result) -> List[List[str]]:
    rows = [['Mode', 'Seeds', 'Median AUC', 'Final rate', 'Diverged']]
    for mode, summary in result.summaries.items():
        final = f"{sum(summary.final_rates) / len(summary.final_rates):.3f}" if summary.final_rates else '-'
        rows.append([
            mode,
            str(len(summary.aucs)),
            f"{summary.median_auc:.3f}",
            final,
            ', '.join(str(s) for s in summary.diverged) or '-',
        ])
    return rows


def _evaluation_rows(evaluations) -> List[List[str]]:
    rows = [['Scenario', 'Successes', 'Rate', '95% interval', 'Expected']]
    for e in evaluations:
        rows.append([
            e.scenario,
            f"{e.successes}/{e.episodes}",
            f"{e.rate:.3f}",
            f"[{e.ci_low:.3f}, {e.ci_high:.3f}]",
            f"{e.expected:.3f}",
        ])
    return rows


class ReportGenerator:
    @staticmethod
    def generate_pdf_report(result) -> bytes:
        """Generates a PDF report of an ablation suite"""
        try:
            buffer = io.BytesIO()
            doc = SimpleDocTemplate(buffer, pagesize=letter)
            styles = getSampleStyleSheet()
            story = []

            title_style = ParagraphStyle(
                'CustomTitle',
                parent=styles['Heading1'],
                fontSize=24,
                spaceAfter=30
            )
            story.append(Paragraph("Ablation Report", title_style))
            story.append(Spacer(1, 12))

            story.append(Paragraph("Learning Curves", styles['Heading2']))
            story.append(Spacer(1, 6))
            modes_table = Table(_mode_rows(result), colWidths=[70, 50, 90, 80, 90])
            modes_table.setStyle(_TABLE_STYLE)
            story.append(modes_table)
            story.append(Spacer(1, 12))

            for mode, summary in result.summaries.items():
                if not summary.evaluations:
                    continue
                story.append(Paragraph(f"Greedy Evaluation: {mode}", styles['Heading2']))
                story.append(Spacer(1, 6))
                table = Table(_evaluation_rows(summary.evaluations), colWidths=[110, 70, 50, 110, 60])
                table.setStyle(_TABLE_STYLE)
                story.append(table)
                story.append(Spacer(1, 12))

            categories = categorize_records_by_severity(result.records)
            story.append(Paragraph("Run Anomalies by Severity:", styles['Heading2']))
            story.append(Spacer(1, 6))
            severity_table = Table([
                ['Severity', 'Count'],
                ['High', str(categories['high'])],
                ['Medium', str(categories['medium'])],
                ['Low', str(categories['low'])]
            ], colWidths=[200, 100])
            severity_table.setStyle(_TABLE_STYLE)
            story.append(severity_table)

            common_problems = identify_common_problems(result.records)
            if common_problems:
                story.append(Spacer(1, 20))
                story.append(Paragraph("Most Common Anomalies:", styles['Heading2']))
                story.append(Spacer(1, 12))
                for problem in common_problems:
                    story.append(Paragraph(f"• {problem}", styles['Normal']))

            doc.build(story)
            pdf_content = buffer.getvalue()
            buffer.close()
            return pdf_content

        except Exception as e:
            logger.error(f"Error generating PDF report: {str(e)}", exc_info=True)
            raise LayerGraspError(f"Failed to generate PDF report: {str(e)}") from e

    @staticmethod
    def generate_text_report(result) -> str:
        """Generates a text report of an ablation suite"""
        try:
            text_report = [
                "Ablation Report",
                "===============",
                f"Modes: {', '.join(result.summaries)}",
                "\nLearning Curves:",
                "----------------",
            ]
            for row in _mode_rows(result):
                text_report.append("  ".join(f"{cell:<12}" for cell in row).rstrip())

            for mode, summary in result.summaries.items():
                if summary.evaluations:
                    text_report.append(
                        ReportGenerator.generate_evaluation_report(summary.evaluations, title=f"\nEvaluation: {mode}")
                    )

            text_report.extend([
                "\nAnomalies by Severity:",
                "----------------------"
            ])
            for severity, count in categorize_records_by_severity(result.records).items():
                text_report.append(f"{severity.capitalize()}: {count}")
            for problem in identify_common_problems(result.records):
                text_report.append(f"- {problem}")

            return "\n".join(text_report) + "\n"

        except Exception as e:
            logger.error(f"Error generating text report: {str(e)}")
            raise LayerGraspError(f"Failed to generate text report: {str(e)}") from e

    @staticmethod
    def generate_evaluation_report(evaluations: Sequence, records: Optional[List[ErrorRecord]] = None,
                                   title: str = "Evaluation") -> str:
        lines = [title, "-" * len(title.strip())]
        for row in _evaluation_rows(evaluations):
            lines.append("  ".join(f"{cell:<18}" for cell in row).rstrip())
        if records:
            lines.append(f"Anomalies: {len(records)}")
            lines.extend(f"- {problem}" for problem in identify_common_problems(records))
        return "\n".join(lines)
