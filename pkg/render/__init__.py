"""
Federated SSL simulator - Rendering Package
Plain-text comparison tables and PR point files.
"""
from .tables import ComparisonTable, format_mean_sd, render_report, write_pr_points

__all__ = ['ComparisonTable', 'format_mean_sd', 'render_report', 'write_pr_points']
