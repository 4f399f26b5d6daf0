"""Geração de tabelas LaTeX e figuras: MAE por frame, série de um pixel e painéis de predição."""

import logging
import os
from pathlib import Path
from typing import Sequence

import matplotlib
matplotlib.use("agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from src.augmentation import FORCE_MASK_ALPHA, mask_forces
from src.inference import check_pixel, read_prediction_map, read_prediction_meta
from src.metrics import EvalReport
from src.synth_data import read_frameset

logger = logging.getLogger(__name__)

_SET_COLORS = ["#2196F3", "#FF9800", "#4CAF50", "#9C27B0"]


def generate_latex_tables(reports: Sequence[EvalReport], output_dir: str) -> str:
    """
    Tabela com MAE médio ± desvio padrão por conjunto.
    Salva <output_dir>/latex_tables.tex.
    """
    os.makedirs(output_dir, exist_ok=True)
    lines = []
    lines.append("% Tabela: MAE por conjunto")
    lines.append("\\begin{table}[h]")
    lines.append("\\centering")
    lines.append("\\caption{Erro absoluto médio (MAE) da força prevista por conjunto}")
    lines.append("\\label{tab:mae_conjuntos}")
    lines.append("\\begin{tabular}{lcc}")
    lines.append("\\hline")
    lines.append("\\textbf{Conjunto} & \\textbf{Frames} & \\textbf{MAE} \\\\")
    lines.append("\\hline")
    for report in reports:
        name = report.name.replace("_", "\\_")
        lines.append(f"{name} & {len(report.maes)} & {report.mean:.2f} $\\pm$ {report.std:.2f} \\\\")
    lines.append("\\hline")
    lines.append("\\end{tabular}")
    lines.append("\\end{table}")
    lines.append("")

    tex_path = os.path.join(output_dir, "latex_tables.tex")
    with open(tex_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    logger.info(f"Tabelas LaTeX salvas em {tex_path}")
    return tex_path


def generate_mae_over_frames_plot(reports: Sequence[EvalReport], output_dir: str) -> str:
    """Curvas de MAE por frame de cada conjunto, com faixa de média ± desvio."""
    fig_dir = os.path.join(output_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)

    fig, ax = plt.subplots(figsize=(8, 5))
    for i, report in enumerate(reports):
        color = _SET_COLORS[i % len(_SET_COLORS)]
        frames = np.arange(len(report.maes))
        ax.plot(frames, report.maes, color=color, label=f"{report.name} ({report.mean:.1f} ± {report.std:.1f})")
        ax.fill_between(frames, report.mean - report.std, report.mean + report.std, color=color, alpha=0.15)
    ax.set_xlabel("Frame")
    ax.set_ylabel("MAE (unidades de força)")
    ax.set_title("MAE ao longo dos frames")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)

    fig_path = os.path.join(fig_dir, "mae_over_frames.png")
    fig.savefig(fig_path, dpi=300, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Gráfico de MAE salvo em {fig_path}")
    return fig_path


def generate_pixel_series_plot(series: pd.DataFrame, fig_path: str, pixel: tuple[int, int]) -> str:
    """Verdade, média prevista, faixas de confiança por nível e entropia tracejada em eixo gêmeo."""
    Path(fig_path).parent.mkdir(parents=True, exist_ok=True)
    levels = sorted(
        (c[len("lower_"):] for c in series.columns if c.startswith("lower_")),
        key=float, reverse=True,
    )

    fig, ax = plt.subplots(figsize=(9, 4))
    frames = series["frame_index"]
    for i, tag in enumerate(levels):
        ax.fill_between(frames, series[f"lower_{tag}"], series[f"upper_{tag}"],
                        color="#2196F3", alpha=0.15 + 0.15 * i, label=f"IC {float(tag):.0%}")
    ax.plot(frames, series["truth"], color="black", label="Verdade")
    ax.plot(frames, series["mean"], color="#2196F3", label="Média prevista")
    ax.set_xlabel("Frame")
    ax.set_ylabel("Força")
    ax.set_title(f"Pixel (x={pixel[0]}, y={pixel[1]})")

    ax2 = ax.twinx()
    ax2.plot(frames, series["entropy_bits"], color="#FF9800", linestyle="--", label="Entropia")
    ax2.set_ylabel("Entropia (bits)")

    handles, labels = ax.get_legend_handles_labels()
    handles2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(handles + handles2, labels + labels2, loc="upper left", fontsize=8)

    fig.savefig(fig_path, dpi=300, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Série do pixel salva em {fig_path}")
    return fig_path


def generate_prediction_panels(pred_dir: str, frame: int, output_dir: str) -> str:
    """Imagem crua, força média, desvios aleatórico e epistêmico, CV e entropia lado a lado."""
    meta = read_prediction_meta(pred_dir)
    fs = read_frameset(meta["data"])
    panels = [
        ("Imagem (crua)", fs.frames[frame].input_image, "gray"),
        ("Força média", read_prediction_map(pred_dir, "mean", frame, meta), "viridis"),
        ("Desvio aleatórico", np.sqrt(read_prediction_map(pred_dir, "var_aleatoric", frame, meta)), "magma"),
        ("Desvio epistêmico", np.sqrt(read_prediction_map(pred_dir, "var_epistemic", frame, meta)), "magma"),
        ("CV", read_prediction_map(pred_dir, "cv", frame, meta), "cividis"),
        ("Entropia (bits)", read_prediction_map(pred_dir, "entropy", frame, meta), "cividis"),
    ]

    fig_dir = os.path.join(output_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.6))
    for ax, (title, values, cmap) in zip(axes, panels):
        sns.heatmap(values, ax=ax, cmap=cmap, square=True, xticklabels=False, yticklabels=False)
        ax.set_title(title)

    fig_path = os.path.join(fig_dir, f"prediction_panels_{frame:04d}.png")
    fig.savefig(fig_path, dpi=300, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Painéis de predição salvos em {fig_path}")
    return fig_path


def generate_frame_strip(pred_dir: str, pixel: tuple[int, int], output_dir: str, n_frames: int = 5) -> str:
    """
    Tira de frames: imagem crua, força verdadeira (mascarada) e média prevista,
    uma linha por quantidade e uma coluna por frame, com o pixel marcado.
    """
    meta = read_prediction_meta(pred_dir)
    x, y = check_pixel(pixel, meta["width"], meta["height"])
    fs = mask_forces(read_frameset(meta["data"]), meta.get("tukey_alpha", FORCE_MASK_ALPHA))
    frames = np.unique(np.linspace(0, meta["frames"] - 1, min(n_frames, meta["frames"])).round().astype(int))

    rows = [
        ("Imagem (crua)", lambda i: fs.frames[i].input_image, "gray"),
        ("Força verdadeira", lambda i: fs.frames[i].force_map, "viridis"),
        ("Força prevista", lambda i: read_prediction_map(pred_dir, "mean", i, meta), "viridis"),
    ]
    fig, axes = plt.subplots(len(rows), len(frames), figsize=(2.6 * len(frames), 2.6 * len(rows)), squeeze=False)
    for r, (title, load, cmap) in enumerate(rows):
        for c, i in enumerate(frames):
            ax = axes[r, c]
            ax.imshow(load(int(i)), cmap=cmap)
            ax.plot(x, y, marker="+", color="red", markersize=10, markeredgewidth=1.5)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"Frame {i}")
            if c == 0:
                ax.set_ylabel(title)

    fig_dir = os.path.join(output_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    fig_path = os.path.join(fig_dir, f"frame_strip_x{x}_y{y}.png")
    fig.savefig(fig_path, dpi=200, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Tira de frames salva em {fig_path}")
    return fig_path
