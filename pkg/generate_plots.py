"""SVG plots for traces, similarity matrices and training curves."""
from __future__ import annotations

import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

FIGSIZE = (8, 4.5)
COLORS = ['#1f77b4', '#d62728', '#2ca02c', '#9467bd']


def _save(fig: plt.Figure, path: str) -> None:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    fig.savefig(path, format='svg', bbox_inches='tight', facecolor='white')
    plt.close(fig)
    print(f"✓ Generated {path}")


def plot_trace(trace: pd.DataFrame, path: str, title: str = "Prefix rounding error") -> None:
    """Step plot of the BF16 rounding error of each prefix sum."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=FIGSIZE, sharex=True)
    top.step(trace['position'], trace['exact'], where='post', color=COLORS[0], label='exact (f32)')
    top.step(trace['position'], trace['rounded'], where='post', color=COLORS[1], label='rounded (bf16)')
    top.set_ylabel('prefix sum')
    top.legend(loc='best', fontsize=8)
    bottom.step(trace['position'], trace['error'], where='post', color=COLORS[2])
    bottom.axhline(0.0, color='grey', linewidth=0.5)
    shifted = trace[trace['overflow_shift']]
    bottom.scatter(shifted['position'], shifted['error'], color=COLORS[3], s=12, zorder=3, label='exponent shift')
    if len(shifted):
        bottom.legend(loc='best', fontsize=8)
    bottom.set_xlabel('token position')
    bottom.set_ylabel('error')
    top.set_title(title)
    _save(fig, path)


def plot_similarity(similarity: np.ndarray, path: str, title: str = "Cosine similarity of rank-1 terms") -> None:
    fig, ax = plt.subplots(1, 1, figsize=(5.5, 5))
    image = ax.imshow(similarity, vmin=-1.0, vmax=1.0, cmap='RdBu_r')
    fig.colorbar(image, ax=ax, fraction=0.046)
    ax.set_xlabel('token')
    ax.set_ylabel('token')
    ax.set_title(title)
    _save(fig, path)


def plot_metrics(metrics: pd.DataFrame, path: str, column: str, title: str | None = None) -> None:
    """One curve per arm of a metrics column against the step."""
    fig, ax = plt.subplots(1, 1, figsize=FIGSIZE)
    for i, (arm, rows) in enumerate(metrics.groupby('arm', sort=False)):
        ax.plot(rows['step'], rows[column], color=COLORS[i % len(COLORS)], label=arm)
    ax.set_xlabel('step')
    ax.set_ylabel(column)
    ax.set_title(title or column)
    if len(metrics):
        ax.legend(loc='best', fontsize=8)
    _save(fig, path)


def plot_experiment(metrics: pd.DataFrame, folder: str) -> list[str]:
    """Bias and W_Q norm curves of a paired experiment; returns the written paths."""
    paths = []
    for column, title in (('bias_cumsum', 'Cumulative δ bias'), ('norm_W_Q', 'Spectral norm of W_Q')):
        path = os.path.join(folder, f'{column}.svg')
        plot_metrics(metrics, path, column, title)
        paths.append(path)
    return paths
