"""Report Generator

Writes run artifacts: absorption images (graymap + numeric grid), the
reconstruction report as JSON, Markdown and HTML, traces, bases and
diagnostic series.
"""

import os
import logging
from typing import Dict, List

import numpy as np
import markdown

from .diagnostics import DiagnosticSeries, write_series
from .inversion import ReconstructionReport
from .mor import save_basis
from .synth import Phantom, save_mask
from .utils import ensure_directory, save_graymap, save_grid_csv, save_json, to_graylevels

# Set up logging
logger = logging.getLogger(__name__)


class ReportGenerator:
    """Writes the files of one run into an output directory."""

    def __init__(self, output_dir: str = "output"):
        """Initialize report generator.

        Args:
            output_dir: Directory to save generated files
        """
        self.output_dir = output_dir
        ensure_directory(output_dir)

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def save_image(self, image: np.ndarray, name: str, low: float, high: float) -> Dict[str, str]:
        """Save a node-order (nz, nx) image as graymap and CSV, top surface first.

        Args:
            image: Absorption values, row 0 = bottom surface
            name: File stem
            low: Value shown black
            high: Value shown white

        Returns:
            Paths keyed by format
        """
        picture = np.flipud(image)
        paths = {'pgm': self._path(f"{name}.pgm"), 'csv': self._path(f"{name}.csv")}
        save_graymap(to_graylevels(picture, low, high), paths['pgm'])
        save_grid_csv(picture, paths['csv'])
        return paths

    def write_phantom(self, phantom: Phantom, low: float, high: float) -> Dict[str, str]:
        mask_path = self._path('mask.pgm')
        save_mask(phantom.mask, mask_path)
        truth = self.save_image(phantom.absorption, 'truth', low, high)
        return {'mask': mask_path, 'truth_pgm': truth['pgm'], 'truth_csv': truth['csv']}

    def write_reconstruction(self, report: ReconstructionReport, low: float, high: float,
                             save_basis_file: bool = True) -> Dict[str, str]:
        """Write images, trace, basis and the report triple.

        Args:
            report: Result of run_reconstruction
            low: Lower end of the image gray scale
            high: Upper end of the image gray scale
            save_basis_file: Also persist a basis built during the run

        Returns:
            All written paths
        """
        logger.info("Writing reconstruction report...")
        paths: Dict[str, str] = {}
        if report.image is not None:
            image = self.save_image(report.image, 'reconstruction', low, high)
            paths['image_pgm'] = image['pgm']
            paths['image_csv'] = image['csv']
        if report.trace is not None:
            paths['trace'] = self._path('trace.json')
            report.trace.save(paths['trace'])
        if save_basis_file and report.basis is not None and report.mode == 'rom' and report.samples:
            paths['basis'] = self._path('basis.bin')
            save_basis(paths['basis'], report.basis)
        report.paths.update(paths)
        paths.update(self._save_report(report.to_dict(), 'report', self._markdown_report(report)))
        logger.info(f"Report saved to {self.output_dir}")
        return paths

    def write_diagnostics(self, series: DiagnosticSeries, name: str = 'diagnostics') -> Dict[str, str]:
        csv_path = write_series(series, self._path(f"{name}.csv"))
        json_path = self._path(f"{name}.json")
        save_json(series.to_dict(), json_path)
        return {'series': csv_path, 'summary': json_path}

    def _save_report(self, data: Dict, stem: str, md_content: str) -> Dict[str, str]:
        """Save the JSON, Markdown and HTML versions of a report."""
        json_file = self._path(f"{stem}.json")
        save_json(data, json_file)

        md_file = self._path(f"{stem}.md")
        with open(md_file, 'w', encoding='utf-8') as f:
            f.write(md_content)

        html_file = self._path(f"{stem}.html")
        with open(html_file, 'w', encoding='utf-8') as f:
            f.write(self._generate_html(md_content, data.get('mode', stem)))

        return {'report_json': json_file, 'report_md': md_file, 'report_html': html_file}

    def _markdown_report(self, report: ReconstructionReport) -> str:
        """Generate the Markdown version of a reconstruction report.

        Args:
            report: Reconstruction report

        Returns:
            Markdown content
        """
        counters = report.counters
        ratio = report.offline_online_ratio
        md = f"""# Reconstruction report ({report.mode})

**Status:** {report.status}  
**Initial relative misfit:** {report.initial_misfit:.6e}  
**Final relative misfit:** {report.final_misfit:.6e}  
"""
        if report.final_misfit_full is not None:
            md += f"**Final relative misfit (full model):** {report.final_misfit_full:.6e}  \n"
        if report.basis_rank is not None:
            md += f"**Reduced dimension r:** {report.basis_rank}  \n"
        md += f"**Offline/online ratio (K_fun + K_Jac)/(2K):** {'n/a' if ratio is None else f'{ratio:.3f}'}\n"

        md += "\n## Solve counts\n\n| counter | value |\n|---|---|\n"
        for key in ('large_solves', 'reduced_solves', 'update_flops', 'k_fun', 'k_jac', 'k_samples'):
            md += f"| {key} | {counters[key]} |\n"

        if report.phase_counters:
            md += "\n## Per phase\n\n| phase | large solves | reduced solves | K_fun | K_Jac |\n|---|---|---|---|---|\n"
            for phase, counts in report.phase_counters.items():
                md += (f"| {phase} | {counts['large_solves']} | {counts['reduced_solves']} | "
                       f"{counts['k_fun']} | {counts['k_jac']} |\n")

        md += "\n## Objective history\n\n"
        for k, value in enumerate(report.objective_history):
            md += f"{k}. {value:.6e}\n" if k else f"0. {value:.6e} (start)\n"

        if report.paths:
            md += "\n## Files\n\n"
            for key in sorted(report.paths):
                md += f"- {key}: `{os.path.basename(report.paths[key])}`\n"
        return md

    def _generate_html(self, md_content: str, title: str) -> str:
        """Wrap rendered Markdown in a standalone HTML page."""
        body = markdown.markdown(md_content, extensions=['tables'])
        return f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>Reconstruction report ({title})</title>
    <style>
        body {{ font-family: Arial, sans-serif; margin: 20px; line-height: 1.6; }}
        table {{ border-collapse: collapse; }}
        td, th {{ border: 1px solid #ddd; padding: 4px 10px; }}
        code {{ background: #f4f4f4; }}
    </style>
</head>
<body>
{body}
</body>
</html>
"""


def image_range(mu_in: float, mu_out: float) -> List[float]:
    """Gray-scale range covering both absorption levels."""
    return [min(mu_in, mu_out), max(mu_in, mu_out)]
