from datetime import datetime
from pathlib import Path

from fpdf import FPDF

# PALETA
OXFORD_GRAY = (55, 65, 81)   # #374151
GOLD = (250, 204, 21)        # #FACC15
INK = (40, 40, 40)
PASS_GREEN = (22, 163, 74)
FAIL_RED = (220, 38, 38)
INFO_BLUE = (37, 99, 235)

STATUS_COLORS = {"PASS": PASS_GREEN, "FAIL": FAIL_RED, "INFORMATIONAL": INFO_BLUE}


def _latin1(text):
    # las fuentes base de fpdf solo cubren latin-1
    return str(text).encode('latin-1', 'replace').decode('latin-1')


def _fmt(x, spec=".4g"):
    try:
        return format(float(x), spec)
    except (TypeError, ValueError):
        return "--"


class VerificationPDF(FPDF):
    def __init__(self, scenario_name, status):
        super().__init__()
        self.scenario_name = scenario_name
        self.status = status

    def header(self):
        self.set_fill_color(*OXFORD_GRAY)
        self.rect(0, 0, 210, 28, 'F')
        self.set_xy(10, 8)
        self.set_font('Arial', 'B', 18)
        self.set_text_color(*GOLD)
        self.cell(130, 8, 'VERIFICACION CMJ', 0, 0, 'L')
        # franja de estado a la derecha
        self.set_fill_color(*STATUS_COLORS.get(self.status, OXFORD_GRAY))
        self.set_text_color(255, 255, 255)
        self.set_font('Arial', 'B', 11)
        self.cell(60, 8, self.status, 0, 1, 'C', True)
        self.set_x(10)
        self.set_font('Arial', '', 9)
        self.cell(0, 6, _latin1(f"Escenario: {self.scenario_name}"), 0, 1, 'L')
        self.set_y(36)

    def footer(self):
        self.set_y(-12)
        self.set_font('Arial', 'I', 7)
        self.set_text_color(140, 140, 140)
        stamp = datetime.now().strftime('%d/%m/%Y %H:%M')
        self.cell(0, 6, f'Emitido {stamp} - pagina {self.page_no()}', 0, 0, 'R')

    def section(self, label):
        self.ln(3)
        self.set_font('Arial', 'B', 12)
        self.set_text_color(*OXFORD_GRAY)
        self.cell(0, 7, label, 'B', 1, 'L')
        self.ln(3)

    def key_value(self, key, value):
        self.set_font('Arial', 'B', 9)
        self.set_text_color(*INK)
        self.cell(70, 7, _latin1(key), 0, 0, 'L')
        self.set_font('Arial', '', 9)
        self.cell(0, 7, _latin1(value), 0, 1, 'L')

    def verdict_row(self, name, ok):
        self.set_font('Arial', '', 9)
        self.set_text_color(*INK)
        self.cell(70, 7, _latin1(name), 'B', 0, 'L')
        self.set_text_color(*(PASS_GREEN if ok else FAIL_RED))
        self.set_font('Arial', 'B', 9)
        self.cell(30, 7, 'PASS' if ok else 'FAIL', 'B', 1, 'C')


def generate_pdf_report(report, summary, scenario_name, path):
    """Resumen legible de un VerificationReport; devuelve la ruta escrita."""
    pdf = VerificationPDF(scenario_name, report.status)
    pdf.set_auto_page_break(auto=True, margin=18)
    pdf.add_page()

    pdf.section('Lote')
    pdf.key_value("Caso", report.case)
    pdf.key_value("Replicas / sobrevivientes", f"{summary.get('replicates', '--')} / {report.sample_size}")
    pdf.key_value("Tasa de abortos", _fmt(summary.get('abort_rate'), ".2%"))
    if "delta_sensitivity" in summary:
        pdf.key_value("Sensibilidad a Delta", _fmt(summary['delta_sensitivity']))

    pdf.section('Estadisticos')
    pdf.key_value("Sigma del caso", _fmt(report.sigma_case))
    if report.ks is not None:
        pdf.key_value("KS (estadistico / p-valor)", f"{_fmt(report.ks.statistic)} / {_fmt(report.ks.pvalue)}")
    pdf.key_value("Media de residuos", _fmt(report.residual_mean))
    if report.residual_variance is not None:
        v = report.residual_variance
        pdf.key_value("Varianza de residuos", f"{_fmt(v.estimate)} (SE bootstrap {_fmt(v.se)})")
    if report.corr_square is not None:
        c = report.corr_square
        pdf.key_value("corr(e^2, W)", f"{_fmt(c.value)} [{_fmt(c.low)}, {_fmt(c.high)}]")
    for part, ks in report.marginals.items():
        pdf.key_value(f"KS marginal ({part})", f"p = {_fmt(ks.pvalue)}")

    if report.verdicts:
        pdf.section('Criterios')
        for name, ok in report.verdicts.items():
            pdf.verdict_row(name, ok)

    if report.notes:
        pdf.section('Notas')
        pdf.set_font('Arial', '', 9)
        pdf.set_text_color(*INK)
        for note in report.notes:
            pdf.multi_cell(0, 6, _latin1(note))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pdf.output(str(path))
    return str(path)
